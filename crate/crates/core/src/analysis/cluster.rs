//! Average-linkage agglomerative clustering over cosine distance.

use std::collections::HashMap;

use crate::merge::{cosine, MergeError};
use crate::providers::EmbeddingVector;

pub const DEFAULT_DISTANCE_THRESHOLD: f64 = 0.4;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClusterParams {
    /// Clusters merge while their average distance is below this.
    pub distance_threshold: f64,
}

impl Default for ClusterParams {
    fn default() -> Self {
        Self {
            distance_threshold: DEFAULT_DISTANCE_THRESHOLD,
        }
    }
}

/// Clusters `vectors` and returns member indices per cluster. Members
/// ascend; clusters are ordered by size descending, then lowest member.
///
/// Exactly identical vectors are collapsed into one weighted point first;
/// they sit at distance zero and would merge before anything else.
pub fn cluster_vectors(vectors: &[EmbeddingVector], params: ClusterParams) -> Result<Vec<Vec<usize>>, MergeError> {
    let mut points: Vec<usize> = Vec::new();
    let mut members: Vec<Vec<usize>> = Vec::new();
    let mut slot_of: HashMap<Vec<u64>, usize> = HashMap::new();
    for (i, v) in vectors.iter().enumerate() {
        let key: Vec<u64> = v.values().iter().map(|x| x.to_bits()).collect();
        match slot_of.get(&key) {
            Some(&k) => members[k].push(i),
            None => {
                slot_of.insert(key, points.len());
                points.push(i);
                members.push(vec![i]);
            }
        }
    }
    let n = points.len();
    // Sum of pairwise distances between clusters, indexed by slot.
    let mut sum = vec![vec![0.0f64; n]; n];
    for a in 0..n {
        for b in a + 1..n {
            let d = 1.0 - cosine(&vectors[points[a]], &vectors[points[b]])?;
            let w = (members[a].len() * members[b].len()) as f64;
            sum[a][b] = d * w;
            sum[b][a] = d * w;
        }
    }
    let mut active: Vec<bool> = vec![true; n];
    let avg = |sum: &[Vec<f64>], members: &[Vec<usize>], a: usize, b: usize| {
        sum[a][b] / (members[a].len() * members[b].len()) as f64
    };
    // Nearest later slot per row. Slots keep their lowest member first, so
    // scanning pairs (a, b) with a < b in order breaks ties by lowest members.
    let row_min = |sum: &[Vec<f64>], members: &[Vec<usize>], active: &[bool], a: usize| {
        let mut best: Option<(f64, usize)> = None;
        for b in a + 1..n {
            if active[b] {
                let d = avg(sum, members, a, b);
                if best.is_none_or(|(bd, _)| d < bd) {
                    best = Some((d, b));
                }
            }
        }
        best
    };
    let mut nearest: Vec<Option<(f64, usize)>> = (0..n).map(|a| row_min(&sum, &members, &active, a)).collect();
    loop {
        let mut best: Option<(f64, usize, usize)> = None;
        for a in 0..n {
            if let (true, Some((d, b))) = (active[a], nearest[a]) {
                if best.is_none_or(|(bd, _, _)| d < bd) {
                    best = Some((d, a, b));
                }
            }
        }
        let Some((d, a, b)) = best else { break };
        if d >= params.distance_threshold {
            break;
        }
        active[b] = false;
        nearest[b] = None;
        let moved = std::mem::take(&mut members[b]);
        members[a].extend(moved);
        members[a].sort_unstable();
        for k in 0..n {
            if k != a && active[k] {
                let s = sum[k][a] + sum[k][b];
                sum[k][a] = s;
                sum[a][k] = s;
            }
        }
        nearest[a] = row_min(&sum, &members, &active, a);
        for k in 0..n {
            if k == a || !active[k] {
                continue;
            }
            match nearest[k] {
                Some((_, j)) if j == a || j == b => nearest[k] = row_min(&sum, &members, &active, k),
                Some((nd, j)) if k < a => {
                    let d = avg(&sum, &members, k, a);
                    if d < nd || (d == nd && a < j) {
                        nearest[k] = Some((d, a));
                    }
                }
                _ => {}
            }
        }
    }
    let mut out: Vec<Vec<usize>> = (0..n).filter(|&k| active[k]).map(|k| members[k].clone()).collect();
    out.sort_by(|x, y| y.len().cmp(&x.len()).then(x[0].cmp(&y[0])));
    Ok(out)
}
