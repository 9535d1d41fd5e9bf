//! Experiment harness: success tables stratified by difficulty, cleanup
//! curves, strategy ablations, edge-length histograms, path-length statistics
//! and per-action timing. Every table can be written as CSV.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::agent::{cleanup, run_frozen_episode, EpisodeResult, EpisodeSetup};
use crate::builder::build_sparse_graph;
use crate::distance::Embedding;
use crate::error::{Error, Result};
use crate::maze::{Maze, Observation, ReplayBuffer};
use crate::memory::{Aggregation, BuildParams, GraphMemory};
use crate::rng;

pub const SUCCESS_CSV_HEADER: &str = "strategy,cleanup_steps,bin,success,sem,episodes,seeds";
pub const CURVE_CSV_HEADER: &str = "cleanup_steps,success,sem";
pub const HISTOGRAM_CSV_HEADER: &str = "bin_lo,bin_hi,count";
pub const TIMING_CSV_HEADER: &str = "graph,mean_s,sd_s,n";

/// Rejection-sampling attempts allowed per requested episode.
const TRIES_PER_EPISODE: usize = 2000;

/// Serializes rows under `header`, which must match the row's field names.
pub fn rows_to_csv<T: Serialize>(header: &str, rows: &[T]) -> Result<String> {
    if rows.is_empty() {
        return Ok(format!("{header}\n"));
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    for row in rows {
        w.serialize(row)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalSpec {
    pub episodes: usize,
    /// Number of equal-width difficulty bins over the maze diameter.
    pub bins: usize,
}

impl Default for EvalSpec {
    fn default() -> Self {
        Self { episodes: 100, bins: 3 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DifficultyBin {
    pub label: String,
    pub lo: f64,
    pub hi: f64,
}

/// Equal slices of `[0, diameter]` in geodesic steps. Three bins are named
/// easy, medium and hard.
pub fn difficulty_bins(maze: &Maze, n: usize) -> Vec<DifficultyBin> {
    let n = n.max(1);
    let diameter = maze.diameter();
    (0..n)
        .map(|i| DifficultyBin {
            label: match (n, i) {
                (1, _) => "all".to_string(),
                (3, 0) => "easy".to_string(),
                (3, 1) => "medium".to_string(),
                (3, _) => "hard".to_string(),
                _ => format!("bin{i}"),
            },
            lo: diameter * i as f64 / n as f64,
            hi: if i + 1 == n { f64::INFINITY } else { diameter * (i + 1) as f64 / n as f64 },
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpisodeTask {
    pub start: Observation,
    pub goal: Observation,
    pub bin: usize,
}

/// Start/goal pairs spread evenly over the bins. Bins that cannot be filled
/// within the sampling budget are reported instead of failing.
pub fn sample_tasks(maze: &Maze, bins: &[DifficultyBin], episodes: usize, seed: u64) -> (Vec<EpisodeTask>, Vec<String>) {
    let mut tasks = Vec::with_capacity(episodes);
    let mut deficits = Vec::new();
    for (b, bin) in bins.iter().enumerate() {
        let quota = episodes / bins.len() + usize::from(b < episodes % bins.len());
        let mut r = rng::rng(rng::child(seed, b as u64));
        let mut got = 0;
        for _ in 0..quota * TRIES_PER_EPISODE {
            if got == quota {
                break;
            }
            let start = maze.sample_free(&mut r);
            let goal = maze.sample_free(&mut r);
            let difficulty = maze.geodesic(&start, &goal);
            if difficulty >= bin.lo && difficulty < bin.hi {
                tasks.push(EpisodeTask { start, goal, bin: b });
                got += 1;
            }
        }
        if got < quota {
            deficits.push(format!("bin {} filled {got} of {quota} episodes", bin.label));
        }
    }
    (tasks, deficits)
}

/// Outcomes of one batch of read-only episodes.
#[derive(Clone, Debug)]
pub struct Evaluation {
    pub labels: Vec<String>,
    pub tasks: Vec<EpisodeTask>,
    pub results: Vec<EpisodeResult>,
    pub deficits: Vec<String>,
}

impl Evaluation {
    pub fn success_rate(&self) -> f64 {
        rate(self.results.iter())
    }

    /// Success rate within one bin, `None` if the bin is empty.
    pub fn bin_rate(&self, bin: usize) -> Option<f64> {
        let n = self.tasks.iter().filter(|t| t.bin == bin).count();
        (n > 0).then(|| rate(self.tasks.iter().zip(&self.results).filter(|(t, _)| t.bin == bin).map(|(_, r)| r)))
    }

    fn bin_count(&self, bin: usize) -> usize {
        self.tasks.iter().filter(|t| t.bin == bin).count()
    }
}

fn rate<'a>(results: impl Iterator<Item = &'a EpisodeResult>) -> f64 {
    let (mut ok, mut n) = (0usize, 0usize);
    for r in results {
        n += 1;
        ok += usize::from(r.success);
    }
    if n == 0 {
        0.0
    } else {
        ok as f64 / n as f64
    }
}

/// Runs `spec.episodes` stratified episodes against a frozen graph.
pub fn evaluate(setup: EpisodeSetup<'_>, g: &GraphMemory, spec: &EvalSpec, seed: u64) -> Evaluation {
    let bins = difficulty_bins(setup.maze, spec.bins);
    let (tasks, deficits) = sample_tasks(setup.maze, &bins, spec.episodes, seed);
    let results = tasks
        .par_iter()
        .map(|t| run_frozen_episode(setup, g, t.start, t.goal))
        .collect();
    Evaluation {
        labels: bins.into_iter().map(|b| b.label).collect(),
        tasks,
        results,
        deficits,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuccessRow {
    pub strategy: String,
    pub cleanup_steps: usize,
    pub bin: String,
    pub success: f64,
    pub sem: f64,
    pub episodes: usize,
    pub seeds: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SuccessTable {
    pub rows: Vec<SuccessRow>,
    pub deficits: Vec<String>,
}

impl SuccessTable {
    /// Rows for one strategy and budget over evaluations from several seeds.
    pub fn from_evaluations(strategy: &str, cleanup_steps: usize, evals: &[Evaluation]) -> Self {
        let mut table = SuccessTable::default();
        let Some(first) = evals.first() else {
            return table;
        };
        let mut cells: Vec<(String, Vec<(f64, usize)>)> = Vec::new();
        for (b, label) in first.labels.iter().enumerate() {
            let per_seed = evals.iter().filter_map(|e| e.bin_rate(b).map(|r| (r, e.bin_count(b)))).collect();
            cells.push((label.clone(), per_seed));
        }
        if first.labels.len() > 1 {
            let per_seed = evals.iter().filter(|e| !e.results.is_empty()).map(|e| (e.success_rate(), e.results.len())).collect();
            cells.push(("all".to_string(), per_seed));
        }
        for (bin, per_seed) in cells {
            if per_seed.is_empty() {
                continue;
            }
            let (success, sem) = mean_sem(&per_seed);
            table.rows.push(SuccessRow {
                strategy: strategy.to_string(),
                cleanup_steps,
                bin,
                success,
                sem,
                episodes: per_seed.iter().map(|p| p.1).sum(),
                seeds: per_seed.len(),
            });
        }
        for e in evals {
            table.deficits.extend(e.deficits.iter().cloned());
        }
        table
    }

    pub fn extend(&mut self, other: SuccessTable) {
        self.rows.extend(other.rows);
        self.deficits.extend(other.deficits);
    }

    pub fn get(&self, strategy: &str, cleanup_steps: usize, bin: &str) -> Option<&SuccessRow> {
        self.rows.iter().find(|r| r.strategy == strategy && r.cleanup_steps == cleanup_steps && r.bin == bin)
    }

    pub fn to_csv(&self) -> Result<String> {
        rows_to_csv(SUCCESS_CSV_HEADER, &self.rows)
    }
}

/// Mean of per-seed rates with its standard error; a single seed falls back
/// to the binomial standard error.
fn mean_sem(per_seed: &[(f64, usize)]) -> (f64, f64) {
    let k = per_seed.len() as f64;
    let mean = per_seed.iter().map(|p| p.0).sum::<f64>() / k;
    if per_seed.len() == 1 {
        let n = per_seed[0].1.max(1) as f64;
        return (mean, (mean * (1.0 - mean) / n).sqrt());
    }
    let var = per_seed.iter().map(|p| (p.0 - mean).powi(2)).sum::<f64>() / (k - 1.0);
    (mean, (var / k).sqrt())
}

/// Success table of one graph, read-only.
pub fn eval_success(setup: EpisodeSetup<'_>, g: &GraphMemory, spec: &EvalSpec, seed: u64, strategy: &str) -> SuccessTable {
    SuccessTable::from_evaluations(strategy, 0, &[evaluate(setup, g, spec, seed)])
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub cleanup_steps: usize,
    pub success: f64,
    pub sem: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CleanupCurve {
    pub points: Vec<CurvePoint>,
    /// Edge count at each checkpoint.
    pub edges: Vec<usize>,
    pub removed: Vec<(usize, usize)>,
    /// The graph after the last checkpoint.
    pub graph: GraphMemory,
}

impl CleanupCurve {
    pub fn to_csv(&self) -> Result<String> {
        rows_to_csv(CURVE_CSV_HEADER, &self.points)
    }
}

/// Alternates cleanup up to each checkpoint with an evaluation of the frozen
/// graph. Every evaluation uses the same tasks.
pub fn cleanup_curve(
    setup: EpisodeSetup<'_>,
    g: &GraphMemory,
    checkpoints: &[usize],
    spec: &EvalSpec,
    seed: u64,
) -> Result<CleanupCurve> {
    if checkpoints.windows(2).any(|w| w[0] > w[1]) {
        return Err(Error::InvalidParams("checkpoints must be ascending".into()));
    }
    let mut graph = g.clone();
    let mut spent = 0;
    let mut curve = CleanupCurve { points: Vec::new(), edges: Vec::new(), removed: Vec::new(), graph: g.clone() };
    let eval_seed = rng::substream(seed, "eval");
    let cleanup_seed = rng::substream(seed, "cleanup");
    for (i, &budget) in checkpoints.iter().enumerate() {
        if budget > spent {
            let report = cleanup(setup, &mut graph, budget - spent, rng::child(cleanup_seed, i as u64));
            spent += report.steps_used;
            curve.removed.extend(report.edges_removed);
        }
        let e = evaluate(setup, &graph, spec, eval_seed);
        let (success, sem) = mean_sem(&[(e.success_rate(), e.results.len())]);
        curve.points.push(CurvePoint { cleanup_steps: budget, success, sem });
        curve.edges.push(graph.edge_count());
    }
    curve.graph = graph;
    Ok(curve)
}

/// Inputs shared by every strategy of an ablation.
#[derive(Clone, Copy)]
pub struct AblationSetup<'a> {
    pub episode: EpisodeSetup<'a>,
    pub buffer: &'a ReplayBuffer,
    pub phi: &'a dyn Embedding,
    pub params: &'a BuildParams,
    pub cleanup_budget: usize,
    pub spec: &'a EvalSpec,
}

/// Label used in tables: the policy string, with uniform subsampling shown
/// without its size.
pub fn strategy_label(a: &Aggregation) -> String {
    match a {
        Aggregation::Uniform { .. } => "uniform".to_string(),
        other => other.to_string(),
    }
}

/// Success before and after cleanup for each node-retention strategy. Uniform
/// subsampling keeps as many states as two-way aggregation does.
pub fn ablation_table(setup: AblationSetup<'_>, strategies: &[Aggregation], seeds: &[u64]) -> Result<SuccessTable> {
    let d = setup.episode.d;
    let twc = BuildParams { aggregation: Aggregation::TwcPerceptual, ..*setup.params };
    let matched = build_sparse_graph(setup.buffer, d, setup.phi, &twc)?.0.len();
    let mut table = SuccessTable::default();
    for strategy in strategies {
        let label = strategy_label(strategy);
        let mut before = Vec::new();
        let mut after = Vec::new();
        let build = |aggregation: Aggregation| {
            let p = BuildParams { aggregation, ..*setup.params };
            build_sparse_graph(setup.buffer, d, setup.phi, &p).map(|(g, _)| g)
        };
        let fixed = match strategy {
            Aggregation::Uniform { .. } => None,
            other => Some(build(*other)?),
        };
        for &seed in seeds {
            let g = match &fixed {
                Some(g) => g.clone(),
                None => build(Aggregation::Uniform { n: matched, seed: rng::substream(seed, "uniform") })?,
            };
            let eval_seed = rng::substream(seed, "eval");
            before.push(evaluate(setup.episode, &g, setup.spec, eval_seed));
            let mut cleaned = g;
            cleanup(setup.episode, &mut cleaned, setup.cleanup_budget, rng::substream(seed, "cleanup"));
            after.push(evaluate(setup.episode, &cleaned, setup.spec, eval_seed));
        }
        table.extend(SuccessTable::from_evaluations(&label, 0, &before));
        table.extend(SuccessTable::from_evaluations(&label, setup.cleanup_budget, &after));
    }
    Ok(table)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistogramBin {
    pub bin_lo: f64,
    pub bin_hi: f64,
    pub count: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EdgeHistogram {
    pub bins: Vec<HistogramBin>,
    /// Fraction of edges whose geodesic length exceeds `long_threshold`.
    pub long_edge_fraction: f64,
    pub long_threshold: f64,
    pub edges: usize,
}

impl EdgeHistogram {
    pub fn to_csv(&self) -> Result<String> {
        rows_to_csv(HISTOGRAM_CSV_HEADER, &self.bins)
    }
}

/// Geodesic lengths of all edges, in steps, by edge order.
pub fn edge_geodesics(maze: &Maze, g: &GraphMemory) -> Vec<f64> {
    let edges: Vec<(usize, usize, f64)> = g.edges().collect();
    edges
        .par_iter()
        .map(|&(s, t, _)| maze.geodesic(&g.vertices()[s], &g.vertices()[t]))
        .collect()
}

/// Histogram of true edge lengths; edges longer than twice `max_dist` count
/// as long.
pub fn edge_length_histogram(maze: &Maze, g: &GraphMemory, bin_width: f64) -> EdgeHistogram {
    let lengths = edge_geodesics(maze, g);
    let threshold = 2.0 * g.params().max_dist;
    let width = if bin_width > 0.0 { bin_width } else { 1.0 };
    let top = lengths.iter().copied().fold(0.0, f64::max);
    let nbins = ((top / width).floor() as usize + 1).max(1);
    let mut bins: Vec<HistogramBin> = (0..nbins)
        .map(|i| HistogramBin { bin_lo: i as f64 * width, bin_hi: (i + 1) as f64 * width, count: 0 })
        .collect();
    for &len in &lengths {
        bins[((len / width).floor() as usize).min(nbins - 1)].count += 1;
    }
    let long = lengths.iter().filter(|&&l| l > threshold).count();
    EdgeHistogram {
        bins,
        long_edge_fraction: if lengths.is_empty() { 0.0 } else { long as f64 / lengths.len() as f64 },
        long_threshold: threshold,
        edges: lengths.len(),
    }
}

/// Drops every edge the greedy controller cannot follow: geodesic longer
/// than `max_dist`, or no straight line of sight.
pub fn faithful_subgraph(maze: &Maze, g: &GraphMemory) -> GraphMemory {
    let max_dist = g.params().max_dist;
    let lengths = edge_geodesics(maze, g);
    let mut out = g.clone();
    for ((s, t, _), len) in g.edges().zip(lengths) {
        let (a, b) = (g.vertices()[s], g.vertices()[t]);
        if len > max_dist || !maze.line_of_sight(&a, &b) {
            out.remove_edge(s, t).expect("edge listed by the graph");
        }
    }
    out
}

/// Fraction of `removed` edges of `g` whose geodesic exceeds `max_dist`.
pub fn removal_precision(maze: &Maze, g: &GraphMemory, removed: &[(usize, usize)]) -> Option<f64> {
    if removed.is_empty() {
        return None;
    }
    let max_dist = g.params().max_dist;
    let bad = removed
        .iter()
        .filter(|&&(s, t)| maze.geodesic(&g.vertices()[s], &g.vertices()[t]) > max_dist)
        .count();
    Some(bad as f64 / removed.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PathStats {
    pub successes: usize,
    /// `None` when no episode succeeded.
    pub mean: Option<f64>,
    pub median: Option<f64>,
    pub budget: usize,
}

/// Environment steps of the successful episodes.
pub fn path_length_stats(results: &[EpisodeResult], budget: usize) -> PathStats {
    let mut steps: Vec<f64> = results.iter().filter(|r| r.success).map(|r| r.env_steps as f64).collect();
    steps.sort_by(f64::total_cmp);
    let n = steps.len();
    let median = match n {
        0 => None,
        _ if n % 2 == 1 => Some(steps[n / 2]),
        _ => Some((steps[n / 2 - 1] + steps[n / 2]) / 2.0),
    };
    PathStats {
        successes: n,
        mean: (n > 0).then(|| steps.iter().sum::<f64>() / n as f64),
        median,
        budget,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimingRow {
    pub graph: String,
    pub mean_s: f64,
    pub sd_s: f64,
    pub n: usize,
}

/// Wall-clock seconds per action on each graph over the same random tasks,
/// run sequentially. One warm-up episode per graph is discarded.
pub fn timing(setup: EpisodeSetup<'_>, graphs: &[(&str, &GraphMemory)], actions: usize, seed: u64) -> Vec<TimingRow> {
    let setup = setup.with_timing();
    let task = |i: usize| {
        let mut r = rng::rng(rng::child(seed, i as u64));
        (setup.maze.sample_free(&mut r), setup.maze.sample_free(&mut r))
    };
    graphs
        .iter()
        .map(|&(name, g)| {
            let (s, t) = task(usize::MAX);
            run_frozen_episode(setup, g, s, t);
            let mut times = Vec::new();
            let mut i = 0;
            while times.len() < actions {
                let (s, t) = task(i);
                let res = run_frozen_episode(setup, g, s, t);
                times.extend(res.action_times.unwrap_or_default());
                i += 1;
                if i > actions.max(1) * 10 && times.is_empty() {
                    break;
                }
            }
            times.truncate(actions);
            let n = times.len();
            let mean = if n == 0 { 0.0 } else { times.iter().sum::<f64>() / n as f64 };
            let sd = if n < 2 { 0.0 } else { (times.iter().map(|t| (t - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt() };
            TimingRow { graph: name.to_string(), mean_s: mean, sd_s: sd, n }
        })
        .collect()
}

pub fn timing_to_csv(rows: &[TimingRow]) -> Result<String> {
    rows_to_csv(TIMING_CSV_HEADER, rows)
}

/// Success rates by strategy and budget, for quick lookups.
pub fn overall_by_strategy(table: &SuccessTable) -> BTreeMap<(String, usize), f64> {
    table
        .rows
        .iter()
        .filter(|r| r.bin == "all")
        .map(|r| ((r.strategy.clone(), r.cleanup_steps), r.success))
        .collect()
}

/// Uniform start/goal pairs with no stratification.
pub fn random_tasks(maze: &Maze, n: usize, seed: u64) -> Vec<(Observation, Observation)> {
    let mut r = rng::rng(seed);
    (0..n)
        .map(|_| {
            let s = maze.sample_free(&mut r);
            (s, maze.sample_free(&mut r))
        })
        .collect()
}
