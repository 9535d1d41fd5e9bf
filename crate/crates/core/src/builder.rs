//! One-pass graph construction from a replay buffer, plus the baseline and
//! ablation policies.
//!
//! States are read in buffer order (episode, then time). Each one is either
//! merged into the first vertex that passes the policy's tests, leaving a
//! [`Witness`], or kept as a new vertex joined in both directions to every
//! vertex within `max_dist`. Each vertex finally keeps its `knn` cheapest
//! successors.
//!
//! The pass caches the vertex-to-vertex distance matrix, so a candidate costs
//! `2|V| + 1` distance queries however many merge tests it runs. Results are
//! identical to applying [`find_merge_target`](crate::memory::find_merge_target),
//! [`GraphMemory::add_node_with_edges`] and [`GraphMemory::knn_filter`] one step
//! at a time.

use std::collections::{BTreeMap, HashMap};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::distance::{feature_distance, Distance, Embedding};
use crate::error::{Error, Result};
use crate::maze::{Observation, ReplayBuffer};
use crate::memory::{Aggregation, BuildParams, GraphMemory, Witness};

/// Rows at least this long are filled in parallel.
const PAR_ROW: usize = 2048;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BuildReport {
    pub input_states: usize,
    pub vertices_kept: usize,
    pub edges_before_knn: usize,
    pub edges_after_knn: usize,
    /// Kept vertex id to the number of states merged into it.
    pub merge_histogram: BTreeMap<usize, usize>,
    /// Seconds spent building; the only non-deterministic field.
    pub wall_clock: f64,
}

impl BuildReport {
    pub fn merged(&self) -> usize {
        self.merge_histogram.values().sum()
    }
}

/// Outcome of offering one candidate to an [`Aggregator`].
#[derive(Clone, Debug, PartialEq)]
pub(crate) enum Offer {
    Merged { into: usize, c_in: f64, c_out: f64 },
    /// Kept at position `pos`; `out_row[j] = d(cand, v_j)` and
    /// `in_row[j] = d(v_j, cand)` over the earlier vertices.
    Kept { pos: usize, out_row: Vec<f64>, in_row: Vec<f64> },
}

/// Online TWC aggregation over abstract items addressed by index.
pub(crate) struct Aggregator<'a> {
    dist: &'a (dyn Fn(usize, usize) -> f64 + Sync),
    policy: Aggregation,
    tau_a: f64,
    kept: Vec<usize>,
    /// `matrix[a][b] = d(kept[a], kept[b])`, maintained while merging is possible.
    matrix: Vec<Vec<f64>>,
}

impl<'a> Aggregator<'a> {
    pub(crate) fn new(dist: &'a (dyn Fn(usize, usize) -> f64 + Sync), policy: Aggregation, tau_a: f64) -> Self {
        Self {
            dist,
            policy,
            tau_a,
            kept: Vec::new(),
            matrix: Vec::new(),
        }
    }

    pub(crate) fn kept(&self) -> &[usize] {
        &self.kept
    }

    fn rows(&self, c: usize) -> (Vec<f64>, Vec<f64>) {
        let d = self.dist;
        if self.kept.len() >= PAR_ROW {
            let out = self.kept.par_iter().map(|&v| d(c, v)).collect();
            let inc = self.kept.par_iter().map(|&v| d(v, c)).collect();
            (out, inc)
        } else {
            (self.kept.iter().map(|&v| d(c, v)).collect(), self.kept.iter().map(|&v| d(v, c)).collect())
        }
    }

    /// `C_in` of vertex `v` and the candidate, or `None` once it exceeds `cap`.
    fn c_in(&self, v: usize, out_c: &[f64], in_c: &[f64], dcc: f64, cap: f64) -> Option<f64> {
        let mut best = (out_c[v] - dcc).abs();
        if best > cap {
            return None;
        }
        for (j, row) in self.matrix.iter().enumerate() {
            best = best.max((row[v] - in_c[j]).abs());
            if best > cap {
                return None;
            }
        }
        Some(best)
    }

    /// `C_out` of vertex `v` and the candidate, or `None` once it exceeds `cap`.
    fn c_out(&self, v: usize, out_c: &[f64], in_c: &[f64], dcc: f64, cap: f64) -> Option<f64> {
        let mut best = (in_c[v] - dcc).abs();
        if best > cap {
            return None;
        }
        for (m, o) in self.matrix[v].iter().zip(out_c) {
            best = best.max((m - o).abs());
            if best > cap {
                return None;
            }
        }
        Some(best)
    }

    /// Merges candidate `c` into the first vertex that passes `gate` (by
    /// vertex position) and the policy's TWC tests, or keeps it.
    pub(crate) fn offer(&mut self, c: usize, gate: impl Fn(usize) -> bool) -> Offer {
        let merging = self.policy.merges();
        let mut rows: Option<(Vec<f64>, Vec<f64>, f64)> = None;
        if merging {
            for v in 0..self.kept.len() {
                if self.policy.uses_perceptual_gate() && !gate(v) {
                    continue;
                }
                let (out_c, in_c, dcc) = rows.get_or_insert_with(|| {
                    let (o, i) = self.rows(c);
                    (o, i, (self.dist)(c, c))
                });
                let cap = |checked: bool| if checked { self.tau_a } else { f64::INFINITY };
                let Some(c_in) = self.c_in(v, out_c, in_c, *dcc, cap(self.policy.checks_incoming())) else {
                    continue;
                };
                let Some(c_out) = self.c_out(v, out_c, in_c, *dcc, cap(self.policy.checks_outgoing())) else {
                    continue;
                };
                return Offer::Merged { into: v, c_in, c_out };
            }
        }
        let (out_row, in_row, dcc) = match rows {
            Some(r) => r,
            None => {
                let (o, i) = self.rows(c);
                let dcc = if merging { (self.dist)(c, c) } else { 0.0 };
                (o, i, dcc)
            }
        };
        let pos = self.kept.len();
        self.kept.push(c);
        if merging {
            for (row, &x) in self.matrix.iter_mut().zip(&in_row) {
                row.push(x);
            }
            let mut own = out_row.clone();
            own.push(dcc);
            self.matrix.push(own);
        }
        Offer::Kept { pos, out_row, in_row }
    }
}

/// Per-vertex bounded list of the cheapest successors, ordered by
/// `(weight, dst)`.
struct TopK {
    k: usize,
    lists: Vec<Vec<(f64, usize)>>,
}

impl TopK {
    fn push(&mut self, src: usize, w: f64, dst: usize) {
        let list = &mut self.lists[src];
        let cmp = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
        if list.len() == self.k && cmp(&(w, dst), list.last().unwrap()).is_ge() {
            return;
        }
        let at = list.partition_point(|e| cmp(e, &(w, dst)).is_lt());
        list.insert(at, (w, dst));
        list.truncate(self.k);
    }
}

/// Builds the graph with the policy in `p.aggregation`.
pub fn build_sparse_graph(
    buffer: &ReplayBuffer,
    d: &dyn Distance,
    phi: &dyn Embedding,
    p: &BuildParams,
) -> Result<(GraphMemory, BuildReport)> {
    p.validate()?;
    if buffer.is_empty() {
        return Err(Error::EmptyBuffer);
    }
    let started = Instant::now();
    let states: Vec<Observation> = buffer.states().copied().collect();
    let dist = |i: usize, j: usize| d.distance(&states[i], &states[j]);
    let mut agg = Aggregator::new(&dist, p.aggregation, p.tau_a);
    let mut topk = TopK { k: p.knn, lists: Vec::new() };
    let mut edges_before = 0;
    let mut witnesses = Vec::new();
    let mut histogram = BTreeMap::new();

    let candidates: Vec<usize> = match p.aggregation {
        Aggregation::Uniform { n, seed } => {
            if n == 0 {
                return Err(Error::InvalidParams("uniform subsample must keep at least one state".into()));
            }
            if n > states.len() {
                return Err(Error::BufferTooSmall { requested: n, available: states.len() });
            }
            let mut idx = rand::seq::index::sample(&mut crate::rng::rng(seed), states.len(), n).into_vec();
            idx.sort_unstable();
            idx
        }
        _ => (0..states.len()).collect(),
    };

    let gated = p.aggregation.uses_perceptual_gate();
    let mut embedded: Vec<Vec<f64>> = Vec::new();
    let mut seen: HashMap<(u64, u64), usize> = HashMap::new();
    for c in candidates {
        let obs = states[c];
        if p.aggregation == Aggregation::None {
            if let Some(&into) = seen.get(&obs.key()) {
                witnesses.push(Witness { obs, kept: into, c_in: 0.0, c_out: 0.0, prefix: agg.kept().len() });
                *histogram.entry(into).or_insert(0) += 1;
                continue;
            }
        }
        let emb = if gated { phi.embed(&obs) } else { Vec::new() };
        let prefix = agg.kept().len();
        let offer = agg.offer(c, |v| feature_distance(&embedded[v], &emb) <= p.tau_p);
        match offer {
            Offer::Merged { into, c_in, c_out } => {
                witnesses.push(Witness { obs, kept: into, c_in, c_out, prefix });
                *histogram.entry(into).or_insert(0) += 1;
            }
            Offer::Kept { pos, out_row, in_row } => {
                seen.insert(obs.key(), pos);
                embedded.push(emb);
                topk.lists.push(Vec::new());
                for j in 0..pos {
                    if in_row[j] <= p.max_dist {
                        topk.push(j, in_row[j], pos);
                        edges_before += 1;
                    }
                    if out_row[j] <= p.max_dist {
                        topk.push(pos, out_row[j], j);
                        edges_before += 1;
                    }
                }
            }
        }
    }

    let mut g = GraphMemory::new(*p);
    for &i in agg.kept() {
        g.add_vertex(states[i]);
    }
    for (src, list) in topk.lists.iter().enumerate() {
        for &(w, dst) in list {
            g.add_edge(src, dst, w)?;
        }
    }
    for w in witnesses {
        g.push_witness(w);
    }
    let report = BuildReport {
        input_states: states.len(),
        vertices_kept: g.len(),
        edges_before_knn: edges_before,
        edges_after_knn: g.edge_count(),
        merge_histogram: histogram,
        wall_clock: started.elapsed().as_secs_f64(),
    };
    Ok((g, report))
}

/// Builds one of the comparison graphs: `strategy` replaces the policy in `p`.
pub fn build_baseline(
    buffer: &ReplayBuffer,
    d: &dyn Distance,
    phi: &dyn Embedding,
    p: &BuildParams,
    strategy: Aggregation,
) -> Result<(GraphMemory, BuildReport)> {
    build_sparse_graph(buffer, d, phi, &BuildParams { aggregation: strategy, ..*p })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::distance::{euclidean_step_distance, grid_value_distance, IdentityEmbedding};
    use crate::maze::{collect_random_buffer, Maze};
    use crate::memory::find_merge_target;
    use std::sync::Arc;

    fn line3() -> (Arc<Maze>, ReplayBuffer) {
        let m = Arc::new(Maze::fixture("line3").unwrap());
        let states = vec![Observation::new(0.5, 0.5), Observation::new(2.5, 0.5), Observation::new(4.5, 0.5)];
        (m, ReplayBuffer::from_states(states))
    }

    fn twc(tau_a: f64, max_dist: f64) -> BuildParams {
        BuildParams { tau_a, tau_p: 100.0, max_dist, knn: 5, aggregation: Aggregation::TwcOnly }
    }

    /// The same construction one operation at a time.
    fn naive(buffer: &ReplayBuffer, d: &dyn Distance, phi: &dyn Embedding, p: &BuildParams) -> GraphMemory {
        let mut g = GraphMemory::new(*p);
        for s in buffer.states() {
            let seen = p.aggregation == Aggregation::None && g.vertices().contains(s);
            if seen {
                continue;
            }
            if find_merge_target(&g, d, phi, s, p).is_none() {
                g.add_node_with_edges(d, *s, p.max_dist);
            }
        }
        g.knn_filter(p.knn);
        g
    }

    fn strip_witnesses(g: &GraphMemory) -> GraphMemory {
        let mut h = GraphMemory::new(*g.params());
        for v in g.vertices() {
            h.add_vertex(*v);
        }
        for (s, t, w) in g.edges() {
            h.add_edge(s, t, w).unwrap();
        }
        h
    }

    #[test]
    fn line3_low_threshold_keeps_all() {
        let (m, buf) = line3();
        let d = grid_value_distance(m);
        let (g, report) = build_sparse_graph(&buf, &*d, &IdentityEmbedding, &twc(1.0, 3.0)).unwrap();
        assert_eq!(g.len(), 3);
        let edges: Vec<(usize, usize)> = g.edges().map(|(s, t, _)| (s, t)).collect();
        assert_eq!(edges, vec![(0, 1), (1, 0), (1, 2), (2, 1)]);
        assert_eq!(report.edges_before_knn, 4);
        assert_eq!(report.merged(), 0);
    }

    #[test]
    fn line3_high_threshold_merges_all() {
        let (m, buf) = line3();
        let d = grid_value_distance(m);
        let (g, report) = build_sparse_graph(&buf, &*d, &IdentityEmbedding, &twc(5.0, 3.0)).unwrap();
        assert_eq!((g.len(), g.edge_count()), (1, 0));
        assert_eq!(report.merge_histogram.get(&0), Some(&2));
        assert!(g.witnesses().iter().all(|w| w.kept == 0 && w.prefix == 1));
    }

    #[test]
    fn exact_duplicates_collapse() {
        let (m, _) = line3();
        let d = grid_value_distance(m);
        let buf = ReplayBuffer::from_states(vec![Observation::new(1.5, 0.5); 6]);
        let (g, report) = build_sparse_graph(&buf, &*d, &IdentityEmbedding, &twc(0.0, 3.0)).unwrap();
        assert_eq!(g.len(), 1);
        assert_eq!(g.witnesses().len(), 5);
        assert_eq!(report.vertices_kept + report.merged(), report.input_states);
    }

    #[test]
    fn baselines_on_line3() {
        let (m, buf) = line3();
        let d = grid_value_distance(m);
        let p = twc(5.0, 3.0);
        let (dense, _) = build_baseline(&buf, &*d, &IdentityEmbedding, &p, Aggregation::None).unwrap();
        assert_eq!(dense.len(), 3);
        let (one, _) = build_baseline(&buf, &*d, &IdentityEmbedding, &p, Aggregation::Uniform { n: 1, seed: 0 }).unwrap();
        assert_eq!((one.len(), one.edge_count()), (1, 0));
        let too_many = build_baseline(&buf, &*d, &IdentityEmbedding, &p, Aggregation::Uniform { n: 4, seed: 0 });
        assert!(matches!(too_many, Err(Error::BufferTooSmall { requested: 4, available: 3 })));
    }

    #[test]
    fn empty_buffer_is_an_error() {
        let d = euclidean_step_distance(1.0).unwrap();
        let buf = ReplayBuffer::from_states(Vec::new());
        assert!(matches!(
            build_sparse_graph(&buf, &*d, &IdentityEmbedding, &BuildParams::default()),
            Err(Error::EmptyBuffer)
        ));
    }

    #[test]
    fn matches_step_by_step_construction() {
        let m = Arc::new(Maze::fixture("fourrooms").unwrap());
        let buf = collect_random_buffer(&m, 6, 25, 3).unwrap();
        let oracle = grid_value_distance(m.clone());
        let phi = crate::distance::NormalizedEmbedding::for_maze(&m);
        for aggregation in [
            Aggregation::TwcPerceptual,
            Aggregation::TwcOnly,
            Aggregation::PerceptualOnly,
            Aggregation::IncomingOnly,
            Aggregation::OutgoingOnly,
            Aggregation::None,
        ] {
            let p = BuildParams { tau_a: 2.0, tau_p: 0.1, max_dist: 4.0, knn: 3, aggregation };
            let (fast, report) = build_sparse_graph(&buf, &*oracle, &phi, &p).unwrap();
            assert_eq!(strip_witnesses(&fast), naive(&buf, &*oracle, &phi, &p), "{aggregation}");
            assert_eq!(report.vertices_kept + report.merged(), buf.len());
            fast.check_invariants().unwrap();
        }
    }

    #[test]
    fn deterministic_bytes() {
        let m = Arc::new(Maze::fixture("fourrooms").unwrap());
        let buf = collect_random_buffer(&m, 5, 40, 11).unwrap();
        let d = grid_value_distance(m.clone());
        let phi = crate::distance::NormalizedEmbedding::for_maze(&m);
        let p = BuildParams { tau_a: 1.5, ..BuildParams::default() };
        let a = build_sparse_graph(&buf, &*d, &phi, &p).unwrap().0.to_json().unwrap();
        let b = build_sparse_graph(&buf, &*d, &phi, &p).unwrap().0.to_json().unwrap();
        assert_eq!(a, b);
    }
}
