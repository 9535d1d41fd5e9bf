use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use sgm::agent::{cleanup, EpisodeSetup, GreedyController};
use sgm::bench::{self, AblationSetup, EvalSpec};
use sgm::builder::build_sparse_graph;
use sgm::config::{write_atomic, ExperimentConfig};
use sgm::distance::{DistanceFn, NormalizedEmbedding};
use sgm::maze::{collect_random_buffer, Maze, ReplayBuffer};
use sgm::memory::{Aggregation, GraphMemory};
use sgm::verify::GapExperiment;
use sgm::{rng, Error, Result};

/// Sparse graphical memory experiments in a point-mass maze.
#[derive(Parser)]
#[command(name = "sgm", version)]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// TOML experiment config.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Fixture name or maze file.
    #[arg(long, global = true)]
    maze: Option<String>,
    /// Distance spec, e.g. `oracle`, `euclid`, `euclid+noise:1:7`.
    #[arg(long, global = true)]
    distance: Option<String>,
    /// Node retention strategy, e.g. `twc+perceptual`, `dense`, `uniform:200`.
    #[arg(long, global = true)]
    strategy: Option<String>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Config override with a dotted key, e.g. `--set build.tau_a=3`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Collect a random-action replay buffer.
    Explore,
    /// Build a graph from a buffer.
    Build {
        #[arg(long)]
        buffer: PathBuf,
    },
    /// Success rates of a frozen graph, by difficulty.
    Eval {
        #[arg(long)]
        graph: PathBuf,
    },
    /// Repair a graph by executing random plans and dropping failed edges.
    Cleanup {
        #[arg(long)]
        graph: PathBuf,
        /// Environment steps to spend; defaults to `eval.cleanup_steps`.
        #[arg(long)]
        budget: Option<usize>,
    },
    /// Success rate at each cleanup checkpoint.
    Curve {
        #[arg(long)]
        graph: PathBuf,
    },
    /// Compare node retention strategies before and after cleanup.
    Ablate {
        #[arg(long)]
        buffer: PathBuf,
    },
    /// Check the path-length gap bound on complete graphs.
    Verify {
        #[arg(long)]
        buffer: PathBuf,
    },
    /// Per-action wall-clock on two graphs.
    Timing {
        #[arg(long)]
        dense: PathBuf,
        #[arg(long)]
        sparse: PathBuf,
    },
    /// Graph size and true edge-length histogram.
    Stats {
        #[arg(long)]
        graph: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", json!({ "error": e.kind(), "message": e.to_string() }));
            ExitCode::FAILURE
        }
    }
}

fn load_config(g: &Global) -> Result<ExperimentConfig> {
    let mut cfg = match &g.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = g.seed {
        cfg.seed = seed;
    }
    if let Some(maze) = &g.maze {
        cfg.maze = maze.clone();
    }
    if let Some(distance) = &g.distance {
        cfg.distance = distance.clone();
    }
    if let Some(strategy) = &g.strategy {
        cfg.build.strategy = Some(strategy.clone());
    }
    if let Some(out) = &g.out {
        cfg.out = out.clone();
    }
    let cfg = cfg.with_overrides(&g.overrides)?;
    cfg.validate()?;
    Ok(cfg)
}

fn read(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))
}

fn read_buffer(path: &Path) -> Result<ReplayBuffer> {
    ReplayBuffer::from_json(&read(path)?)
}

fn read_graph(path: &Path) -> Result<GraphMemory> {
    GraphMemory::from_json(&read(path)?)
}

fn emit(cfg: &ExperimentConfig, name: &str, contents: &str) -> Result<PathBuf> {
    let path = cfg.out.join(name);
    write_atomic(&path, contents.as_bytes())?;
    Ok(path)
}

struct Env {
    maze: std::sync::Arc<Maze>,
    d: DistanceFn,
}

fn env(cfg: &ExperimentConfig, buffer: Option<&ReplayBuffer>) -> Result<Env> {
    let maze = cfg.load_maze()?;
    let d = cfg.load_distance(&maze, buffer)?;
    Ok(Env { maze, d })
}

fn run(cli: Cli) -> Result<()> {
    let cfg = load_config(&cli.global)?;
    let ctrl = GreedyController;
    let summary = match cli.command {
        Command::Explore => {
            let maze = cfg.load_maze()?;
            let seed = rng::substream(cfg.seed, "explore");
            let buffer = collect_random_buffer(&maze, cfg.explore.episodes, cfg.explore.horizon, seed)?;
            let path = emit(&cfg, "buffer.json", &buffer.to_json()?)?;
            json!({ "buffer": path, "states": buffer.len(), "coverage": buffer.coverage(&maze) })
        }
        Command::Build { buffer } => {
            let buffer = read_buffer(&buffer)?;
            let Env { maze, d } = env(&cfg, Some(&buffer))?;
            let mut p = cfg.build_params()?;
            if let Aggregation::Uniform { n, seed: 0 } = p.aggregation {
                p.aggregation = Aggregation::Uniform { n, seed: rng::substream(cfg.seed, "build") };
            }
            let phi = NormalizedEmbedding::for_maze(&maze);
            let (g, report) = build_sparse_graph(&buffer, &*d, &phi, &p)?;
            let graph = emit(&cfg, "graph.json", &g.to_json()?)?;
            let report_path = emit(&cfg, "build_report.json", &serde_json::to_string_pretty(&report)?)?;
            json!({
                "graph": graph,
                "report": report_path,
                "input_states": report.input_states,
                "vertices": report.vertices_kept,
                "merged": report.merged(),
                "edges": report.edges_after_knn,
            })
        }
        Command::Eval { graph } => {
            let g = read_graph(&graph)?;
            let Env { maze, d } = env(&cfg, None)?;
            let xp = cfg.exec_params(g.params(), &maze)?;
            let setup = EpisodeSetup::new(&maze, &*d, &ctrl, &xp);
            let label = bench::strategy_label(&g.params().aggregation);
            let table = bench::eval_success(setup, &g, &cfg.eval_spec(), rng::substream(cfg.seed, "eval"), &label);
            let path = emit(&cfg, "success.csv", &table.to_csv()?)?;
            let overall = table.get(&label, 0, "all").or(table.rows.first()).map(|r| r.success);
            json!({ "table": path, "success": overall, "deficits": table.deficits })
        }
        Command::Cleanup { graph, budget } => {
            let mut g = read_graph(&graph)?;
            let Env { maze, d } = env(&cfg, None)?;
            let xp = cfg.exec_params(g.params(), &maze)?;
            let setup = EpisodeSetup::new(&maze, &*d, &ctrl, &xp);
            let budget = budget.unwrap_or(cfg.eval.cleanup_steps);
            let report = cleanup(setup, &mut g, budget, rng::substream(cfg.seed, "cleanup"));
            let path = emit(&cfg, "graph_clean.json", &g.to_json()?)?;
            let report_path = emit(&cfg, "cleanup_report.json", &serde_json::to_string_pretty(&report)?)?;
            json!({
                "graph": path,
                "report": report_path,
                "steps_used": report.steps_used,
                "episodes": report.episodes,
                "edges_removed": report.edges_removed.len(),
            })
        }
        Command::Curve { graph } => {
            let g = read_graph(&graph)?;
            let Env { maze, d } = env(&cfg, None)?;
            let xp = cfg.exec_params(g.params(), &maze)?;
            let setup = EpisodeSetup::new(&maze, &*d, &ctrl, &xp);
            let curve = bench::cleanup_curve(setup, &g, &cfg.eval.checkpoints, &cfg.eval_spec(), cfg.seed)?;
            let path = emit(&cfg, "curve.csv", &curve.to_csv()?)?;
            json!({
                "curve": path,
                "success": curve.points.iter().map(|p| p.success).collect::<Vec<_>>(),
                "edges": curve.edges,
            })
        }
        Command::Ablate { buffer } => {
            let buffer = read_buffer(&buffer)?;
            let Env { maze, d } = env(&cfg, Some(&buffer))?;
            let params = cfg.build_params()?;
            let xp = cfg.exec_params(&params, &maze)?;
            let strategies = cfg.eval.strategies.iter().map(|s| s.parse()).collect::<Result<Vec<Aggregation>>>()?;
            let phi = NormalizedEmbedding::for_maze(&maze);
            let spec: EvalSpec = cfg.eval_spec();
            let setup = AblationSetup {
                episode: EpisodeSetup::new(&maze, &*d, &ctrl, &xp),
                buffer: &buffer,
                phi: &phi,
                params: &params,
                cleanup_budget: cfg.eval.cleanup_steps,
                spec: &spec,
            };
            let table = bench::ablation_table(setup, &strategies, &cfg.seeds())?;
            let path = emit(&cfg, "ablation.csv", &table.to_csv()?)?;
            let overall: Vec<_> = bench::overall_by_strategy(&table)
                .into_iter()
                .map(|((s, b), v)| json!({ "strategy": s, "cleanup_steps": b, "success": v }))
                .collect();
            json!({ "table": path, "overall": overall })
        }
        Command::Verify { buffer } => {
            let buffer = read_buffer(&buffer)?;
            let Env { d, .. } = env(&cfg, Some(&buffer))?;
            let exp = match cfg.eval.epsilon {
                Some(eps) => GapExperiment::noisy(&buffer, d, eps, rng::substream(cfg.seed, "noise"))?,
                None => GapExperiment::new(&buffer, &*d)?,
            };
            let mut reports = Vec::new();
            let mut csv = String::new();
            for (i, &tau) in cfg.eval.tau_grid.iter().enumerate() {
                let r = exp.run(tau, cfg.eval.pairs, rng::child(rng::substream(cfg.seed, "verify"), i as u64))?;
                let part = r.to_csv()?;
                if csv.is_empty() {
                    csv.push_str(&part);
                } else {
                    csv.extend(part.lines().skip(1).map(|l| format!("{l}\n")));
                }
                reports.push(r);
            }
            let path = emit(&cfg, "gap.json", &serde_json::to_string(&reports)?)?;
            let csv_path = emit(&cfg, "gap.csv", &csv)?;
            let all_i = reports.iter().all(|r| r.all_pass_i());
            let all_ii = cfg.eval.epsilon.map(|_| reports.iter().all(|r| r.all_pass_ii()));
            json!({ "report": path, "csv": csv_path, "all_pass_i": all_i, "all_pass_ii": all_ii })
        }
        Command::Timing { dense, sparse } => {
            let dg = read_graph(&dense)?;
            let sg = read_graph(&sparse)?;
            let Env { maze, d } = env(&cfg, None)?;
            let xp = cfg.exec_params(sg.params(), &maze)?;
            let setup = EpisodeSetup::new(&maze, &*d, &ctrl, &xp);
            let rows = bench::timing(setup, &[("dense", &dg), ("sparse", &sg)], cfg.eval.timing_actions, cfg.seed);
            let path = emit(&cfg, "timing.csv", &bench::timing_to_csv(&rows)?)?;
            let ratio = (rows[0].mean_s > 0.0).then(|| rows[1].mean_s / rows[0].mean_s);
            json!({ "table": path, "ratio": ratio })
        }
        Command::Stats { graph } => {
            let g = read_graph(&graph)?;
            let maze = cfg.load_maze()?;
            let hist = bench::edge_length_histogram(&maze, &g, 1.0);
            let path = emit(&cfg, "histogram.csv", &hist.to_csv()?)?;
            json!({
                "histogram": path,
                "vertices": g.len(),
                "edges": g.edge_count(),
                "long_edge_fraction": hist.long_edge_fraction,
                "long_threshold": hist.long_threshold,
            })
        }
    };
    println!("{summary}");
    Ok(())
}
