//! Similarity between client representations and grouping of clients.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicUsize, Ordering};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pfe::SparsityRepresentation;
use crate::seed::{self, stream};

/// Distances at or below this are treated as no separation at all.
const FLAT: f64 = 1e-9;

/// Euclidean distance between two representations built with the same selector.
pub fn similarity(a: &SparsityRepresentation, b: &SparsityRepresentation) -> Result<f64> {
    if a.selector.relu_index != b.selector.relu_index || a.selector.channel_ids != b.selector.channel_ids {
        return Err(Error::Comparison(format!(
            "clients {} and {} were extracted with different selectors",
            a.client_id, b.client_id
        )));
    }
    if a.values.len() != b.values.len() {
        return Err(Error::Comparison(format!(
            "clients {} and {} have {} and {} values",
            a.client_id,
            b.client_id,
            a.values.len(),
            b.values.len()
        )));
    }
    Ok(euclidean(&a.values, &b.values))
}

pub(crate) fn euclidean(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum::<f64>()
        .sqrt()
}

/// Pairwise distances between all clients.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityMatrix {
    pub client_ids: Vec<usize>,
    pub entries: Vec<Vec<f64>>,
    /// Number of distance evaluations performed to build the matrix.
    pub evaluations: usize,
}

impl SimilarityMatrix {
    pub fn n(&self) -> usize {
        self.client_ids.len()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.entries[i][j]
    }

    /// Heat-map rows `client_a,client_b,distance` for every unordered pair.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("client_a,client_b,distance\n");
        for i in 0..self.n() {
            for j in i + 1..self.n() {
                out.push_str(&format!("{},{},{}\n", self.client_ids[i], self.client_ids[j], self.entries[i][j]));
            }
        }
        out
    }
}

/// Distances from one randomly chosen anchor client to every client.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnchorSimilarityVector {
    pub anchor_id: usize,
    pub client_ids: Vec<usize>,
    pub distances: Vec<f64>,
    pub evaluations: usize,
}

fn check_reps(reps: &[SparsityRepresentation]) -> Result<()> {
    if reps.len() < 2 {
        return Err(Error::config(format!(
            "similarity needs at least two representations, got {}",
            reps.len()
        )));
    }
    let mut ids: Vec<usize> = reps.iter().map(|r| r.client_id).collect();
    ids.sort_unstable();
    if ids.windows(2).any(|w| w[0] == w[1]) {
        return Err(Error::config("duplicate client id among representations"));
    }
    Ok(())
}

/// All `n(n-1)/2` pairwise distances.
pub fn full_matrix(reps: &[SparsityRepresentation]) -> Result<SimilarityMatrix> {
    check_reps(reps)?;
    let n = reps.len();
    let counter = AtomicUsize::new(0);
    let pairs: Vec<(usize, usize)> = (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j))).collect();
    let dists: Vec<f64> = pairs
        .par_iter()
        .map(|&(i, j)| {
            counter.fetch_add(1, Ordering::Relaxed);
            similarity(&reps[i], &reps[j])
        })
        .collect::<Result<_>>()?;
    let mut entries = vec![vec![0.0; n]; n];
    for (&(i, j), &d) in pairs.iter().zip(&dists) {
        entries[i][j] = d;
        entries[j][i] = d;
    }
    Ok(SimilarityMatrix {
        client_ids: reps.iter().map(|r| r.client_id).collect(),
        entries,
        evaluations: counter.into_inner(),
    })
}

/// Distances from a seeded random anchor to every other client (`n - 1` evaluations).
pub fn anchor_vector(reps: &[SparsityRepresentation], anchor_seed: u64) -> Result<AnchorSimilarityVector> {
    check_reps(reps)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(anchor_seed, &[stream::ANCHOR]));
    let z = rng.gen_range(0..reps.len());
    anchor_vector_at(reps, z)
}

/// Anchor vector with the anchor at position `z` of `reps`.
pub fn anchor_vector_at(reps: &[SparsityRepresentation], z: usize) -> Result<AnchorSimilarityVector> {
    check_reps(reps)?;
    if z >= reps.len() {
        return Err(Error::config(format!("anchor position {z} out of range")));
    }
    let counter = AtomicUsize::new(0);
    let distances: Vec<f64> = reps
        .par_iter()
        .enumerate()
        .map(|(i, r)| {
            if i == z {
                return Ok(0.0);
            }
            counter.fetch_add(1, Ordering::Relaxed);
            similarity(&reps[z], r)
        })
        .collect::<Result<_>>()?;
    Ok(AnchorSimilarityVector {
        anchor_id: reps[z].client_id,
        client_ids: reps.iter().map(|r| r.client_id).collect(),
        distances,
        evaluations: counter.into_inner(),
    })
}

/// Client to group mapping. Group ids run from 0 in order of each group's
/// smallest client id.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupAssignment {
    pub groups: BTreeMap<usize, usize>,
    pub group_count: usize,
}

impl GroupAssignment {
    /// Build from arbitrary cluster labels, renumbering groups canonically.
    pub fn from_labels(client_ids: &[usize], labels: &[usize]) -> Result<Self> {
        if client_ids.len() != labels.len() || client_ids.is_empty() {
            return Err(Error::internal("group labels do not match clients"));
        }
        let mut order: Vec<(usize, usize)> = client_ids.iter().copied().zip(labels.iter().copied()).collect();
        order.sort_unstable();
        let mut renumber = BTreeMap::new();
        let mut groups = BTreeMap::new();
        for (id, label) in order {
            let next = renumber.len();
            let g = *renumber.entry(label).or_insert(next);
            if groups.insert(id, g).is_some() {
                return Err(Error::config(format!("client {id} assigned twice")));
            }
        }
        Ok(GroupAssignment {
            group_count: renumber.len(),
            groups,
        })
    }

    /// Build from explicit member lists.
    pub fn from_groups(groups: &[Vec<usize>]) -> Result<Self> {
        if groups.iter().any(Vec::is_empty) {
            return Err(Error::config("empty group"));
        }
        let (ids, labels): (Vec<usize>, Vec<usize>) = groups
            .iter()
            .enumerate()
            .flat_map(|(g, m)| m.iter().map(move |&id| (id, g)))
            .unzip();
        Self::from_labels(&ids, &labels)
    }

    pub fn group_of(&self, client_id: usize) -> Option<usize> {
        self.groups.get(&client_id).copied()
    }

    /// Members of group `g` in ascending id order.
    pub fn members(&self, g: usize) -> Vec<usize> {
        self.groups
            .iter()
            .filter(|(_, &gg)| gg == g)
            .map(|(&id, _)| id)
            .collect()
    }

    pub fn client_ids(&self) -> Vec<usize> {
        self.groups.keys().copied().collect()
    }
}

/// Fraction of clients whose group's majority ground-truth label equals their own.
///
/// `truth` maps client id to its true distribution id. Majority ties go to
/// the smaller label.
pub fn cluster_purity(assignment: &GroupAssignment, truth: &BTreeMap<usize, usize>) -> Result<f64> {
    let mut counted = 0usize;
    let mut matched = 0usize;
    for g in 0..assignment.group_count {
        let mut hist: BTreeMap<usize, usize> = BTreeMap::new();
        let members = assignment.members(g);
        for id in &members {
            let t = truth
                .get(id)
                .ok_or_else(|| Error::config(format!("no ground truth for client {id}")))?;
            *hist.entry(*t).or_default() += 1;
        }
        let best = hist.values().copied().max().unwrap_or(0);
        matched += best;
        counted += members.len();
    }
    if counted == 0 {
        return Err(Error::config("empty assignment"));
    }
    Ok(matched as f64 / counted as f64)
}

/// Input to [`group_clients`].
#[derive(Debug, Clone, Copy)]
pub enum GroupingInput<'a> {
    Matrix(&'a SimilarityMatrix),
    Anchor(&'a AnchorSimilarityVector),
}

/// Partition clients into groups.
///
/// The matrix path runs single-linkage clustering; the anchor path splits the
/// sorted anchor distances at gaps. With `expected_groups` the cut yields
/// exactly that many groups; otherwise `epsilon` bounds the within-group
/// step, defaulting to the largest gap (matrix) or half of it (anchor).
pub fn group_clients(
    input: GroupingInput<'_>,
    expected_groups: Option<usize>,
    epsilon: Option<f64>,
) -> Result<GroupAssignment> {
    let n = match input {
        GroupingInput::Matrix(m) => m.n(),
        GroupingInput::Anchor(a) => a.client_ids.len(),
    };
    if n == 0 {
        return Err(Error::config("nothing to group"));
    }
    if let Some(k) = expected_groups {
        if k == 0 || k > n {
            return Err(Error::config(format!("expected_groups {k} outside [1, {n}]")));
        }
    }
    if let Some(e) = epsilon {
        if !(e >= 0.0) {
            return Err(Error::config(format!("epsilon {e} must be non-negative")));
        }
    }
    match input {
        GroupingInput::Matrix(m) => group_matrix(m, expected_groups, epsilon),
        GroupingInput::Anchor(a) => group_anchor(a, expected_groups, epsilon),
    }
}

struct DisjointSet {
    parent: Vec<usize>,
}

impl DisjointSet {
    fn new(n: usize) -> Self {
        DisjointSet { parent: (0..n).collect() }
    }

    fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    fn union(&mut self, a: usize, b: usize) -> bool {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra == rb {
            return false;
        }
        let (lo, hi) = (ra.min(rb), ra.max(rb));
        self.parent[hi] = lo;
        true
    }
}

/// Single-linkage merge sequence: minimum spanning tree edges by ascending
/// distance, ties by index pair.
fn merge_sequence(m: &SimilarityMatrix) -> Vec<(f64, usize, usize)> {
    let n = m.n();
    let mut edges: Vec<(f64, usize, usize)> =
        (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j))).map(|(i, j)| (m.get(i, j), i, j)).collect();
    edges.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut ds = DisjointSet::new(n);
    edges.into_iter().filter(|&(_, i, j)| ds.union(i, j)).collect()
}

fn group_matrix(m: &SimilarityMatrix, k: Option<usize>, epsilon: Option<f64>) -> Result<GroupAssignment> {
    let n = m.n();
    let merges = merge_sequence(m);
    let take = match (k, epsilon) {
        (Some(k), _) => n - k,
        (None, Some(e)) => merges.iter().take_while(|e2| e2.0 <= e).count(),
        (None, None) => {
            let top = merges.last().map_or(0.0, |e| e.0);
            if top <= FLAT {
                merges.len()
            } else {
                // heights with a zero prefix; cut below the widest jump
                let mut heights = vec![0.0];
                heights.extend(merges.iter().map(|e| e.0));
                let mut best = (0.0, 0usize);
                for i in 0..heights.len() - 1 {
                    let gap = heights[i + 1] - heights[i];
                    if gap > best.0 {
                        best = (gap, i);
                    }
                }
                best.1
            }
        }
    };
    let mut ds = DisjointSet::new(n);
    for &(_, i, j) in merges.iter().take(take) {
        ds.union(i, j);
    }
    let labels: Vec<usize> = (0..n).map(|i| ds.find(i)).collect();
    GroupAssignment::from_labels(&m.client_ids, &labels)
}

fn group_anchor(a: &AnchorSimilarityVector, k: Option<usize>, epsilon: Option<f64>) -> Result<GroupAssignment> {
    let n = a.client_ids.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a.distances[i].total_cmp(&a.distances[j]).then(a.client_ids[i].cmp(&a.client_ids[j])));
    // gaps[p] separates sorted positions p and p + 1
    let gaps: Vec<f64> = order.windows(2).map(|w| a.distances[w[1]] - a.distances[w[0]]).collect();
    let max_gap = gaps.iter().copied().fold(0.0, f64::max);
    let mut cut = vec![false; gaps.len()];
    match (k, epsilon) {
        (Some(k), _) => {
            let mut ranked: Vec<usize> = (0..gaps.len()).collect();
            ranked.sort_by(|&p, &q| gaps[q].total_cmp(&gaps[p]).then(p.cmp(&q)));
            for &p in ranked.iter().take(k - 1) {
                cut[p] = true;
            }
        }
        (None, eps) => {
            if max_gap > FLAT {
                let eps = eps.unwrap_or(max_gap / 2.0);
                for (c, &g) in cut.iter_mut().zip(&gaps) {
                    *c = g > eps;
                }
            }
        }
    }
    let mut labels = vec![0usize; n];
    let mut current = 0;
    for (p, &i) in order.iter().enumerate() {
        if p > 0 && cut[p - 1] {
            current += 1;
        }
        labels[i] = current;
    }
    GroupAssignment::from_labels(&a.client_ids, &labels)
}

/// Whether the grouping `truth` (client id to label) is separated: the
/// smallest distance between clients of different groups exceeds twice the
/// largest distance inside any group.
pub fn well_separated(m: &SimilarityMatrix, truth: &BTreeMap<usize, usize>) -> Result<bool> {
    let (inter, intra) = inter_intra(m, truth)?;
    Ok(inter > 2.0 * intra)
}

/// `(min inter-group distance, max intra-group distance)` under `truth`.
pub fn inter_intra(m: &SimilarityMatrix, truth: &BTreeMap<usize, usize>) -> Result<(f64, f64)> {
    let label = |i: usize| {
        truth
            .get(&m.client_ids[i])
            .copied()
            .ok_or_else(|| Error::config(format!("no ground truth for client {}", m.client_ids[i])))
    };
    let (mut inter, mut intra) = (f64::INFINITY, 0.0f64);
    for i in 0..m.n() {
        for j in i + 1..m.n() {
            if label(i)? == label(j)? {
                intra = intra.max(m.get(i, j));
            } else {
                inter = inter.min(m.get(i, j));
            }
        }
    }
    Ok((inter, intra))
}
