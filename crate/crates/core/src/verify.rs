//! Empirical check of the path-length guarantee of TWC aggregation.
//!
//! For a shortest path `P_B` with `k` edges in the complete graph over every
//! buffer state, the shortest path `P_TWC` between the same endpoints in the
//! complete graph over the aggregated vertices satisfies
//!
//! ```text
//! (i)  len(P_TWC) - len(P_B)      <= 2 k tau_a
//! (ii) |len(P_TWC) - len*(P_B)|   <= k eps + 2 k tau_a
//! ```
//!
//! where `len*` re-prices `P_B` with the true distance and `eps` bounds the
//! error of the distance used for planning. Both graphs are complete: edge
//! cutoffs and successor filtering play no part here.

use std::collections::HashSet;
use std::sync::OnceLock;

use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::builder::Aggregator;
use crate::distance::{with_noise, Distance, DistanceFn, NoiseSpec};
use crate::error::{Error, Result};
use crate::maze::{Observation, ReplayBuffer};
use crate::memory::Aggregation;
use crate::rng;

pub const GAP_CSV_HEADER: &str = "start,goal,k,len_dense,len_sparse,true_len,bound_i,bound_ii,pass_i,pass_ii";

/// One start/goal pair. Ids are positions in the buffer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GapTrial {
    pub start: usize,
    pub goal: usize,
    /// Edges of `P_B`.
    pub k: usize,
    pub len_dense: f64,
    pub len_sparse: f64,
    pub true_len: Option<f64>,
    pub bound_i: f64,
    pub bound_ii: Option<f64>,
    pub pass_i: bool,
    pub pass_ii: Option<bool>,
}

impl GapTrial {
    pub fn gap(&self) -> f64 {
        self.len_sparse - self.len_dense
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GapReport {
    pub tau_a: f64,
    pub epsilon: Option<f64>,
    pub vertices_dense: usize,
    pub vertices_sparse: usize,
    pub trials: Vec<GapTrial>,
}

impl GapReport {
    pub fn all_pass_i(&self) -> bool {
        self.trials.iter().all(|t| t.pass_i)
    }

    /// True when no trial fails (ii); trials without a true length count as passing.
    pub fn all_pass_ii(&self) -> bool {
        self.trials.iter().all(|t| t.pass_ii != Some(false))
    }

    /// Fraction of trials whose sparse path is strictly longer.
    pub fn positive_gap_fraction(&self) -> f64 {
        if self.trials.is_empty() {
            return 0.0;
        }
        self.trials.iter().filter(|t| t.gap() > 1e-12).count() as f64 / self.trials.len() as f64
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn to_csv(&self) -> Result<String> {
        crate::bench::rows_to_csv(GAP_CSV_HEADER, &self.trials)
    }
}

/// Single-source shortest paths over a complete graph given by a matrix.
struct Sssp {
    dist: Vec<f64>,
    pred: Vec<usize>,
}

/// Array Dijkstra over `nodes` (indices into the `n x n` matrix `m`).
/// Distances and predecessors are by position in `nodes`; equal-cost routes
/// keep the lower predecessor position.
fn complete_sssp(m: &[f64], n: usize, nodes: &[usize], src: usize) -> Sssp {
    let len = nodes.len();
    let mut dist = vec![f64::INFINITY; len];
    let mut pred = vec![usize::MAX; len];
    let mut done = vec![false; len];
    dist[src] = 0.0;
    for _ in 0..len {
        let mut u = usize::MAX;
        for v in 0..len {
            if !done[v] && (u == usize::MAX || dist[v] < dist[u]) {
                u = v;
            }
        }
        if u == usize::MAX || !dist[u].is_finite() {
            break;
        }
        done[u] = true;
        let row = &m[nodes[u] * n..(nodes[u] + 1) * n];
        for v in 0..len {
            if done[v] || v == u {
                continue;
            }
            let nd = dist[u] + row[nodes[v]];
            if nd < dist[v] || (nd == dist[v] && u < pred[v]) {
                dist[v] = nd;
                pred[v] = u;
            }
        }
    }
    Sssp { dist, pred }
}

impl Sssp {
    /// Positions along the path from the source to `dst`.
    fn path(&self, dst: usize) -> Vec<usize> {
        let mut path = vec![dst];
        let mut at = dst;
        while self.pred[at] != usize::MAX {
            at = self.pred[at];
            path.push(at);
        }
        path.reverse();
        path
    }
}

/// Pairwise distances of one buffer, reusable across thresholds.
pub struct GapExperiment {
    n: usize,
    matrix: Vec<f64>,
    true_matrix: Option<Vec<f64>>,
    epsilon: Option<f64>,
    all: Vec<usize>,
    dense: Vec<OnceLock<Sssp>>,
}

fn pairwise(states: &[Observation], d: &dyn Distance) -> Vec<f64> {
    states
        .par_iter()
        .flat_map_iter(|a| states.iter().map(move |b| d.distance(a, b)))
        .collect()
}

impl GapExperiment {
    /// Distances from `d` taken as exact.
    pub fn new(buffer: &ReplayBuffer, d: &dyn Distance) -> Result<Self> {
        Self::with_matrices(buffer, d, None)
    }

    /// Plans with `d_true` perturbed by at most `epsilon` and re-prices
    /// dense paths with `d_true`.
    pub fn noisy(buffer: &ReplayBuffer, d_true: DistanceFn, epsilon: f64, noise_seed: u64) -> Result<Self> {
        let noisy = with_noise(d_true.clone(), NoiseSpec { epsilon, seed: noise_seed })?;
        let mut exp = Self::with_matrices(buffer, &*noisy, Some(&*d_true))?;
        exp.epsilon = Some(epsilon);
        Ok(exp)
    }

    fn with_matrices(buffer: &ReplayBuffer, d: &dyn Distance, d_true: Option<&dyn Distance>) -> Result<Self> {
        if buffer.len() < 2 {
            return Err(Error::BufferTooSmall { requested: 2, available: buffer.len() });
        }
        let states: Vec<Observation> = buffer.states().copied().collect();
        let n = states.len();
        Ok(Self {
            n,
            matrix: pairwise(&states, d),
            true_matrix: d_true.map(|t| pairwise(&states, t)),
            epsilon: None,
            all: (0..n).collect(),
            dense: (0..n).map(|_| OnceLock::new()).collect(),
        })
    }

    fn dense_from(&self, src: usize) -> &Sssp {
        self.dense[src].get_or_init(|| complete_sssp(&self.matrix, self.n, &self.all, src))
    }

    /// Buffer positions kept by TWC aggregation without the perceptual gate.
    pub fn aggregate(&self, tau_a: f64) -> Vec<usize> {
        let n = self.n;
        let m = &self.matrix;
        let dist = move |i: usize, j: usize| m[i * n + j];
        let mut agg = Aggregator::new(&dist, Aggregation::TwcOnly, tau_a);
        for c in 0..n {
            agg.offer(c, |_| true);
        }
        agg.kept().to_vec()
    }

    /// Runs `pairs` trials at threshold `tau_a`.
    pub fn run(&self, tau_a: f64, pairs: usize, seed: u64) -> Result<GapReport> {
        if pairs == 0 {
            return Err(Error::InvalidParams("at least one start/goal pair is required".into()));
        }
        if !(tau_a >= 0.0) {
            return Err(Error::InvalidParams(format!("tau_a must be >= 0, got {tau_a}")));
        }
        let kept = self.aggregate(tau_a);
        let mut r = rng::rng(seed);
        let chosen: Vec<(usize, usize)> = (0..pairs)
            .map(|_| {
                if kept.len() == 1 {
                    return (0, 0);
                }
                let a = r.gen_range(0..kept.len());
                let mut b = r.gen_range(0..kept.len() - 1);
                if b >= a {
                    b += 1;
                }
                (a, b)
            })
            .collect();
        let starts: HashSet<usize> = chosen.iter().map(|&(a, _)| a).collect();
        let mut starts: Vec<usize> = starts.into_iter().collect();
        starts.sort_unstable();
        let sparse: Vec<(usize, Sssp)> = starts
            .par_iter()
            .map(|&a| (a, complete_sssp(&self.matrix, self.n, &kept, a)))
            .collect();
        let trials = chosen
            .par_iter()
            .map(|&(a, b)| {
                let sp = &sparse[sparse.binary_search_by_key(&a, |e| e.0).unwrap()].1;
                let (start, goal) = (kept[a], kept[b]);
                let dense = self.dense_from(start);
                let path = dense.path(goal);
                let k = path.len() - 1;
                let tol = 1e-9 * k.max(1) as f64;
                let len_dense = dense.dist[goal];
                let len_sparse = sp.dist[b];
                let bound_i = 2.0 * k as f64 * tau_a;
                let true_len = self.true_matrix.as_ref().map(|t| {
                    path.windows(2).map(|w| t[w[0] * self.n + w[1]]).sum::<f64>()
                });
                let bound_ii = true_len.map(|_| k as f64 * self.epsilon.unwrap_or(0.0) + bound_i);
                GapTrial {
                    start,
                    goal,
                    k,
                    len_dense,
                    len_sparse,
                    true_len,
                    bound_i,
                    bound_ii,
                    pass_i: len_sparse - len_dense <= bound_i + tol,
                    pass_ii: true_len.zip(bound_ii).map(|(t, b)| (len_sparse - t).abs() <= b + tol),
                }
            })
            .collect();
        Ok(GapReport {
            tau_a,
            epsilon: self.epsilon,
            vertices_dense: self.n,
            vertices_sparse: kept.len(),
            trials,
        })
    }
}

/// Checks bound (i) on `pairs` start/goal pairs drawn from the aggregated
/// vertices.
pub fn verify_gap(buffer: &ReplayBuffer, d: &dyn Distance, tau_a: f64, pairs: usize, seed: u64) -> Result<GapReport> {
    GapExperiment::new(buffer, d)?.run(tau_a, pairs, seed)
}

/// Checks both bounds with `d_true` perturbed by at most `epsilon`.
pub fn verify_gap_noisy(
    buffer: &ReplayBuffer,
    d_true: DistanceFn,
    epsilon: f64,
    tau_a: f64,
    pairs: usize,
    seed: u64,
) -> Result<GapReport> {
    GapExperiment::noisy(buffer, d_true, epsilon, rng::substream(seed, "noise"))?.run(tau_a, pairs, seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::distance::grid_value_distance;
    use crate::maze::{collect_random_buffer, Maze};
    use std::sync::Arc;

    fn fourrooms_buffer(seed: u64) -> (Arc<Maze>, ReplayBuffer) {
        let m = Arc::new(Maze::fixture("fourrooms").unwrap());
        let b = collect_random_buffer(&m, 6, 20, seed).unwrap();
        (m, b)
    }

    #[test]
    fn zero_threshold_has_zero_gap() {
        let (m, buf) = fourrooms_buffer(1);
        let d = grid_value_distance(m);
        let report = verify_gap(&buf, &*d, 0.0, 30, 4).unwrap();
        assert!(report.trials.iter().all(|t| t.gap() == 0.0 && t.pass_i));
        assert!(report.trials.iter().all(|t| t.true_len.is_none() && t.pass_ii.is_none()));
    }

    #[test]
    fn duplicates_collapse_to_one_vertex() {
        let (m, _) = fourrooms_buffer(1);
        let d = grid_value_distance(m);
        let buf = ReplayBuffer::from_states(vec![Observation::new(1.5, 1.5); 10]);
        let report = verify_gap(&buf, &*d, 0.0, 5, 0).unwrap();
        assert_eq!(report.vertices_sparse, 1);
        assert!(report.trials.iter().all(|t| t.start == t.goal && t.k == 0 && t.gap() == 0.0));
    }

    #[test]
    fn bounds_hold_on_small_grid() {
        let (m, buf) = fourrooms_buffer(2);
        let d = grid_value_distance(m.clone());
        let exp = GapExperiment::new(&buf, &*d).unwrap();
        for tau in [0.5, 2.0, 5.0] {
            let r = exp.run(tau, 40, 9).unwrap();
            assert!(r.all_pass_i(), "tau {tau}");
            assert!(r.vertices_sparse <= r.vertices_dense);
        }
        for (eps, tau) in [(0.5, 1.0), (1.0, 3.0)] {
            let r = verify_gap_noisy(&buf, d.clone(), eps, tau, 40, 9).unwrap();
            assert!(r.all_pass_ii(), "eps {eps} tau {tau}");
        }
    }

    #[test]
    fn zero_noise_matches_plain_run() {
        let (m, buf) = fourrooms_buffer(3);
        let d = grid_value_distance(m);
        let plain = verify_gap(&buf, &*d, 2.0, 20, 5).unwrap();
        let noisy = verify_gap_noisy(&buf, d, 0.0, 2.0, 20, 5).unwrap();
        for (p, q) in plain.trials.iter().zip(&noisy.trials) {
            assert_eq!((p.start, p.goal, p.k, p.len_dense, p.len_sparse), (q.start, q.goal, q.k, q.len_dense, q.len_sparse));
            assert_eq!(q.true_len, Some(q.len_dense));
            assert_eq!(q.bound_ii, Some(q.bound_i));
        }
    }

    #[test]
    fn unit_noise_zero_threshold_bound_is_k() {
        let (m, buf) = fourrooms_buffer(4);
        let d = grid_value_distance(m);
        let r = verify_gap_noisy(&buf, d, 1.0, 0.0, 30, 2).unwrap();
        for t in &r.trials {
            assert_eq!(t.bound_ii, Some(t.k as f64));
            assert_eq!(t.pass_ii, Some(true));
        }
    }

    #[test]
    fn complete_sssp_matches_floyd_warshall() {
        let n = 7;
        let mut r = rng::rng(3);
        let m: Vec<f64> = (0..n * n).map(|i| if i % (n + 1) == 0 { 0.0 } else { r.gen_range(0..20) as f64 / 4.0 }).collect();
        let mut fw = m.clone();
        for k in 0..n {
            for i in 0..n {
                for j in 0..n {
                    fw[i * n + j] = fw[i * n + j].min(fw[i * n + k] + fw[k * n + j]);
                }
            }
        }
        let nodes: Vec<usize> = (0..n).collect();
        for s in 0..n {
            let sp = complete_sssp(&m, n, &nodes, s);
            for t in 0..n {
                assert_eq!(sp.dist[t], fw[s * n + t]);
                let path = sp.path(t);
                let cost: f64 = path.windows(2).map(|w| m[w[0] * n + w[1]]).sum();
                assert_eq!(cost, sp.dist[t]);
            }
        }
    }

    #[test]
    fn csv_layout() {
        let (m, buf) = fourrooms_buffer(5);
        let d = grid_value_distance(m);
        let r = verify_gap_noisy(&buf, d, 0.5, 1.0, 3, 1).unwrap();
        let csv = r.to_csv().unwrap();
        let mut lines = csv.lines();
        assert_eq!(lines.next(), Some(GAP_CSV_HEADER));
        assert_eq!(lines.count(), 3);
        assert!(GapExperiment::new(&ReplayBuffer::from_states(vec![Observation::new(1.5, 1.5)]), &*grid_value_distance(Arc::new(Maze::fixture("line3").unwrap()))).is_err());
    }
}
