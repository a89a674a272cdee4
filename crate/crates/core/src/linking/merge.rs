use std::collections::{BTreeMap, BTreeSet};

use ndarray::Array2;

use super::{solve_assignment, Tube};
use crate::error::{Error, Result};
use crate::geometry::Detection;
use crate::tubelets::{tubelet_score, Tubelet};

/// `(i, j)`: tube `j` continues tube `i`.
pub type MergeEdge = (usize, usize);

/// Reverse index from proposal id to the tubelets that contain it.
#[derive(Debug, Clone, Default)]
pub struct TubeletIndex {
    by_proposal: BTreeMap<String, Vec<usize>>,
}

impl TubeletIndex {
    pub fn new(tubelets: &[Tubelet]) -> Self {
        let mut by_proposal: BTreeMap<String, Vec<usize>> = BTreeMap::new();
        for (t, tubelet) in tubelets.iter().enumerate() {
            for id in &tubelet.box_ids {
                let slot = by_proposal.entry(id.clone()).or_default();
                if slot.last() != Some(&t) {
                    slot.push(t);
                }
            }
        }
        TubeletIndex { by_proposal }
    }

    /// Indices of tubelets holding any proposal the detection absorbed.
    pub fn associated(&self, d: &Detection) -> BTreeSet<usize> {
        d.source_proposal_ids
            .iter()
            .filter_map(|p| self.by_proposal.get(p))
            .flatten()
            .copied()
            .collect()
    }
}

/// True when the detection absorbed at least one of the tubelet's proposals.
pub fn gamma(d: &Detection, t: &Tubelet) -> bool {
    t.video == d.video && t.box_ids.iter().any(|b| d.source_proposal_ids.contains(b))
}

/// `C[i][j]` is the best tubelet score among tubelets associated with both
/// the last detection of tube `i` and the first detection of tube `j`, when
/// tube `j` starts strictly after tube `i` ends; zero otherwise.
pub fn merge_cost_matrix(
    tubes: &[Tube],
    tubelets: &[Tubelet],
    index: &TubeletIndex,
) -> Result<Array2<f64>> {
    if let Some(first) = tubes.first() {
        if let Some(bad) = tubes
            .iter()
            .find(|t| t.class_id != first.class_id || t.video != first.video)
        {
            return Err(Error::precondition(format!(
                "merging tubes {} and {} of different class or video",
                first.id, bad.id
            )));
        }
    }
    let scores = tubelets
        .iter()
        .map(tubelet_score)
        .collect::<Result<Vec<_>>>()?;
    let ends: Vec<BTreeSet<usize>> = tubes.iter().map(|t| index.associated(t.last())).collect();
    let starts: Vec<BTreeSet<usize>> = tubes.iter().map(|t| index.associated(t.first())).collect();

    let n = tubes.len();
    let mut c = Array2::<f64>::zeros((n, n));
    for i in 0..n {
        let tail = tubes[i].last();
        for j in 0..n {
            let head = tubes[j].first();
            if i == j || head.frame <= tail.frame {
                continue;
            }
            let best = ends[i]
                .intersection(&starts[j])
                .filter(|&&l| tubelets[l].video == tail.video)
                .map(|&l| scores[l])
                .fold(0.0, f64::max);
            c[[i, j]] = best;
        }
    }
    Ok(c)
}

/// Joins tube fragments bridged by a shared tubelet. See
/// [`merge_tubes_with_edges`] for the assignment edges behind the result.
pub fn merge_tubes(
    tubes: &[Tube],
    tubelets: &[Tubelet],
    index: &TubeletIndex,
) -> Result<Vec<Tube>> {
    Ok(merge_tubes_with_edges(tubes, tubelets, index)?.0)
}

/// Solves the fragment assignment, reads each pair `(i, j)` as "tube `j`
/// continues tube `i`", follows the resulting chains and concatenates each
/// chain into one tube named after its earliest fragment. Unmatched tubes
/// pass through. Output keeps the input order of chain heads.
pub fn merge_tubes_with_edges(
    tubes: &[Tube],
    tubelets: &[Tubelet],
    index: &TubeletIndex,
) -> Result<(Vec<Tube>, Vec<MergeEdge>)> {
    let cost = merge_cost_matrix(tubes, tubelets, index)?;
    let edges = solve_assignment(&cost)?;

    let mut next = vec![None; tubes.len()];
    let mut has_prev = vec![false; tubes.len()];
    for &(i, j) in &edges {
        next[i] = Some(j);
        has_prev[j] = true;
    }

    let mut out = Vec::new();
    let mut visited = vec![false; tubes.len()];
    for head in 0..tubes.len() {
        if has_prev[head] {
            continue;
        }
        let mut merged = tubes[head].clone();
        visited[head] = true;
        let mut cur = head;
        while let Some(j) = next[cur] {
            if visited[j] {
                return Err(Error::Internal(format!(
                    "merge chain revisits tube {}",
                    tubes[j].id
                )));
            }
            visited[j] = true;
            merged.entries.extend(tubes[j].entries.iter().cloned());
            merged.original_scores.extend(&tubes[j].original_scores);
            cur = j;
        }
        merged.final_score =
            merged.original_scores.iter().sum::<f64>() / merged.original_scores.len() as f64;
        merged.check()?;
        out.push(merged);
    }
    if let Some(lost) = visited.iter().position(|v| !v) {
        return Err(Error::Internal(format!(
            "tube {} sits on a merge cycle",
            tubes[lost].id
        )));
    }
    Ok((out, edges))
}
