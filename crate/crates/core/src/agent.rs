//! Hierarchical execution: localize, plan, follow waypoints with a low-level
//! controller, and delete edges the controller cannot traverse.

use std::io::Write;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::distance::Distance;
use crate::error::{Error, Result};
use crate::maze::{Action, Maze, Observation};
use crate::memory::{BuildParams, GraphMemory};
use crate::planner::{localize, shortest_path, LocalizeMode};
use crate::rng;

/// Low-level policy: one action toward a waypoint.
pub trait Controller: Send + Sync {
    fn act(&self, maze: &Maze, current: &Observation, waypoint: &Observation) -> Action;
}

/// Moves straight at the waypoint, at most one maximal step at a time.
#[derive(Clone, Copy, Debug, Default)]
pub struct GreedyController;

pub fn greedy_controller() -> GreedyController {
    GreedyController
}

impl Controller for GreedyController {
    fn act(&self, maze: &Maze, current: &Observation, waypoint: &Observation) -> Action {
        let (dx, dy) = (waypoint.x - current.x, waypoint.y - current.y);
        let norm = dx.hypot(dy);
        if norm <= maze.max_step() {
            return Action::new(dx, dy);
        }
        let scale = maze.max_step() / norm;
        Action::new(dx * scale, dy * scale)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExecParams {
    /// Localization and waypoint attainment threshold, in steps.
    pub acting_cutoff: f64,
    pub max_steps_per_edge: usize,
    pub episode_budget: usize,
    /// Success radius around the goal, in length units.
    pub goal_radius: f64,
}

impl Default for ExecParams {
    fn default() -> Self {
        Self {
            acting_cutoff: 1.0,
            max_steps_per_edge: 30,
            episode_budget: 300,
            goal_radius: 1.0,
        }
    }
}

impl ExecParams {
    /// Defaults tied to a build and a maze: three steps per unit of
    /// `max_dist` per leg, and a goal radius of `acting_cutoff` steps.
    pub fn for_build(p: &BuildParams, maze: &Maze) -> Self {
        let base = Self::default();
        Self {
            max_steps_per_edge: (3.0 * p.max_dist).ceil().max(1.0) as usize,
            goal_radius: maze.max_step() * base.acting_cutoff,
            ..base
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.acting_cutoff > 0.0 && self.goal_radius > 0.0) || self.max_steps_per_edge == 0 || self.episode_budget == 0 {
            return Err(Error::InvalidParams("execution parameters must all be positive".into()));
        }
        Ok(())
    }
}

/// One environment step of an episode trace.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceStep {
    pub t: usize,
    pub obs: Observation,
    /// Vertex pursued during the step; `None` while heading for the raw goal.
    pub wp: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeResult {
    pub success: bool,
    pub env_steps: usize,
    pub edges_removed: Vec<(usize, usize)>,
    /// Plans computed after the first one.
    pub replans: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub trace: Option<Vec<TraceStep>>,
    /// Seconds per action, including any localization and planning that
    /// preceded it.
    #[serde(skip)]
    pub action_times: Option<Vec<f64>>,
    pub start: Observation,
    pub goal: Observation,
    /// Geodesic distance from start to goal, in steps.
    pub difficulty: f64,
}

/// Writes a trace as JSON lines, one step per line.
pub fn write_trace(trace: &[TraceStep], out: &mut dyn Write) -> Result<()> {
    for step in trace {
        serde_json::to_writer(&mut *out, step)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

enum GraphAccess<'a> {
    Frozen(&'a GraphMemory),
    Mutable(&'a mut GraphMemory),
}

impl GraphAccess<'_> {
    fn get(&self) -> &GraphMemory {
        match self {
            GraphAccess::Frozen(g) => g,
            GraphAccess::Mutable(g) => g,
        }
    }
}

/// Everything an episode needs apart from the graph.
#[derive(Clone, Copy)]
pub struct EpisodeSetup<'a> {
    pub maze: &'a Maze,
    pub d: &'a dyn Distance,
    pub ctrl: &'a dyn Controller,
    pub xp: &'a ExecParams,
    pub record_trace: bool,
    /// Record the wall-clock seconds spent on each action.
    pub time_actions: bool,
}

impl<'a> EpisodeSetup<'a> {
    pub fn new(maze: &'a Maze, d: &'a dyn Distance, ctrl: &'a dyn Controller, xp: &'a ExecParams) -> Self {
        Self { maze, d, ctrl, xp, record_trace: false, time_actions: false }
    }

    pub fn with_trace(self) -> Self {
        Self { record_trace: true, ..self }
    }

    pub fn with_timing(self) -> Self {
        Self { time_actions: true, ..self }
    }
}

/// Runs one episode, deleting edges whose legs fail when
/// `allow_edge_removal` is set.
pub fn run_episode(
    setup: EpisodeSetup<'_>,
    g: &mut GraphMemory,
    start: Observation,
    goal: Observation,
    allow_edge_removal: bool,
) -> EpisodeResult {
    let access = if allow_edge_removal { GraphAccess::Mutable(g) } else { GraphAccess::Frozen(g) };
    execute(setup, access, start, goal)
}

/// Runs one episode against a graph that is never modified.
pub fn run_frozen_episode(setup: EpisodeSetup<'_>, g: &GraphMemory, start: Observation, goal: Observation) -> EpisodeResult {
    execute(setup, GraphAccess::Frozen(g), start, goal)
}

fn execute(setup: EpisodeSetup<'_>, mut g: GraphAccess<'_>, start: Observation, goal: Observation) -> EpisodeResult {
    let EpisodeSetup { maze, d, ctrl, xp, record_trace, time_actions } = setup;
    let mut result = EpisodeResult {
        success: false,
        env_steps: 0,
        edges_removed: Vec::new(),
        replans: 0,
        trace: record_trace.then(Vec::new),
        action_times: time_actions.then(Vec::new),
        start,
        goal,
        difficulty: maze.geodesic(&start, &goal),
    };
    let mut clock = Instant::now();
    let mut s = start;
    let reached = |s: &Observation| s.euclidean(&goal) <= xp.goal_radius;
    if reached(&s) {
        result.success = true;
        return result;
    }
    if g.get().is_empty() {
        return result;
    }
    // Vertices whose approach leg failed from the current side: a failed
    // start leg bans that start vertex, a failed final leg bans that goal
    // vertex. Neither leg corresponds to an edge that could be removed.
    let mut banned_starts = Vec::new();
    let mut banned_goals = Vec::new();
    let mut planned = false;
    'replan: loop {
        let Some(goal_vertex) = localize_excluding(g.get(), d, &goal, LocalizeMode::AsGoal, &banned_goals) else {
            return result;
        };
        let Some(from) = localize_excluding(g.get(), d, &s, LocalizeMode::AsStart, &banned_starts) else {
            return result;
        };
        let Ok(Some(mut plan)) = shortest_path(g.get(), from, goal_vertex) else {
            return result;
        };
        if planned {
            result.replans += 1;
        }
        planned = true;
        plan.advance(g.get(), d, &s, xp.acting_cutoff);
        let mut leg = 0;
        loop {
            if result.env_steps >= xp.episode_budget {
                return result;
            }
            let target = plan.target();
            let wp = match target {
                Some(id) => g.get().vertices()[id],
                None => goal,
            };
            let a = ctrl.act(maze, &s, &wp);
            s = maze.step(&s, &a);
            result.env_steps += 1;
            leg += 1;
            if let Some(trace) = result.trace.as_mut() {
                trace.push(TraceStep { t: result.env_steps, obs: s, wp: target });
            }
            if let Some(times) = result.action_times.as_mut() {
                let now = Instant::now();
                times.push((now - clock).as_secs_f64());
                clock = now;
            }
            if reached(&s) {
                result.success = true;
                return result;
            }
            if target.is_some() && d.distance(&s, &wp) <= xp.acting_cutoff {
                // Attainment triggers a replan from the current position.
                banned_starts.clear();
                continue 'replan;
            }
            if leg > xp.max_steps_per_edge {
                match (plan.last_attained(), target) {
                    (Some(src), Some(dst)) => {
                        if let GraphAccess::Mutable(graph) = &mut g {
                            if graph.remove_edge(src, dst).is_ok() {
                                result.edges_removed.push((src, dst));
                            }
                        }
                    }
                    (None, Some(dst)) => banned_starts.push(dst),
                    (_, None) => banned_goals.push(goal_vertex),
                }
                continue 'replan;
            }
        }
    }
}

fn localize_excluding(g: &GraphMemory, d: &dyn Distance, s: &Observation, mode: LocalizeMode, banned: &[usize]) -> Option<usize> {
    if banned.is_empty() {
        return localize(g, d, s, f64::INFINITY, mode).ok().map(|l| l.vertex);
    }
    let mut best: Option<(usize, f64)> = None;
    for (id, v) in g.vertices().iter().enumerate() {
        if banned.contains(&id) {
            continue;
        }
        let dist = match mode {
            LocalizeMode::AsStart => d.distance(s, v),
            LocalizeMode::AsGoal => d.distance(v, s),
        };
        if best.is_none_or(|(_, b)| dist < b) {
            best = Some((id, dist));
        }
    }
    best.map(|(id, _)| id)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CleanupReport {
    pub steps_used: usize,
    pub edges_removed: Vec<(usize, usize)>,
    pub episodes: usize,
}

/// Random-goal episodes with edge removal until `n_steps` environment steps
/// have been spent.
pub fn cleanup(setup: EpisodeSetup<'_>, g: &mut GraphMemory, n_steps: usize, seed: u64) -> CleanupReport {
    let mut report = CleanupReport::default();
    while report.steps_used < n_steps {
        let mut r = rng::rng(rng::child(seed, report.episodes as u64));
        let start = setup.maze.sample_free(&mut r);
        let goal = setup.maze.sample_free(&mut r);
        let xp = ExecParams {
            episode_budget: setup.xp.episode_budget.min(n_steps - report.steps_used),
            ..*setup.xp
        };
        let res = run_episode(EpisodeSetup { xp: &xp, record_trace: false, time_actions: false, ..setup }, g, start, goal, true);
        report.steps_used += res.env_steps.max(1);
        report.edges_removed.extend(res.edges_removed);
        report.episodes += 1;
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::distance::{euclidean_step_distance, grid_value_distance};
    use std::sync::Arc;

    fn graph(points: &[(f64, f64)], edges: &[(usize, usize, f64)]) -> GraphMemory {
        let mut g = GraphMemory::new(BuildParams::default());
        for &(x, y) in points {
            g.add_vertex(Observation::new(x, y));
        }
        for &(s, t, w) in edges {
            g.add_edge(s, t, w).unwrap();
        }
        g
    }

    #[test]
    fn greedy_actions() {
        let m = Maze::fixture("line3").unwrap();
        let c = greedy_controller();
        let s = Observation::new(1.0, 0.5);
        assert_eq!(c.act(&m, &s, &s).norm(), 0.0);
        let a = c.act(&m, &s, &Observation::new(1.3, 0.5));
        assert!((a.norm() - 0.3).abs() < 1e-12);
        let far = c.act(&m, &s, &Observation::new(4.0, 0.5));
        assert!((far.norm() - m.max_step()).abs() < 1e-12);
    }

    #[test]
    fn greedy_stalls_at_thin_wall() {
        let m = Maze::fixture("thinwall").unwrap();
        let c = greedy_controller();
        let target = Observation::new(0.5, 3.5);
        let mut s = Observation::new(0.5, 1.5);
        for _ in 0..5 {
            s = m.step(&s, &c.act(&m, &s, &target));
        }
        let stuck = s;
        s = m.step(&s, &c.act(&m, &s, &target));
        assert_eq!(s, stuck);
        assert!(s.y < 2.5);
    }

    #[test]
    fn trivial_and_faithful_episodes() {
        let m = Arc::new(Maze::fixture("line3").unwrap());
        let d = grid_value_distance(m.clone());
        let xp = ExecParams::default();
        let setup = EpisodeSetup::new(&m, &*d, &GreedyController, &xp).with_trace();
        let mut g = graph(&[(0.5, 0.5), (2.5, 0.5), (4.5, 0.5)], &[(0, 1, 2.0), (1, 0, 2.0), (1, 2, 2.0), (2, 1, 2.0)]);
        let near = run_episode(setup, &mut g, Observation::new(0.5, 0.5), Observation::new(0.9, 0.5), false);
        assert!(near.success);
        assert_eq!((near.env_steps, near.replans), (0, 0));

        let a = Observation::new(0.5, 0.5);
        let c = Observation::new(4.5, 0.5);
        let r = run_frozen_episode(setup, &g, a, c);
        assert!(r.success);
        assert!(r.env_steps as f64 <= 1.5 * m.geodesic(&a, &c));
        assert!(r.edges_removed.is_empty());
        assert_eq!(r.trace.as_ref().unwrap().len(), r.env_steps);
        let mut lines = Vec::new();
        write_trace(r.trace.as_ref().unwrap(), &mut lines).unwrap();
        let first = String::from_utf8(lines).unwrap().lines().next().unwrap().to_string();
        assert_eq!(first, r#"{"t":1,"obs":[1.5,0.5],"wp":1}"#);
    }

    #[test]
    fn wall_crossing_edge_is_removed_then_detoured() {
        let m = Maze::fixture("thinwall").unwrap();
        let d = euclidean_step_distance(m.max_step()).unwrap();
        let xp = ExecParams { acting_cutoff: 1.0, max_steps_per_edge: 12, episode_budget: 200, goal_radius: 1.0 };
        let setup = EpisodeSetup::new(&m, &*d, &GreedyController, &xp);
        let mut g = graph(
            &[(0.5, 1.5), (0.5, 3.5), (8.5, 1.5), (8.5, 3.5)],
            &[(0, 1, 2.0), (0, 2, 8.0), (2, 3, 2.0), (3, 1, 8.0)],
        );
        let r = run_episode(setup, &mut g, Observation::new(0.5, 1.5), Observation::new(0.5, 3.5), true);
        assert_eq!(r.edges_removed, vec![(0, 1)]);
        assert!(r.replans >= 1);
        assert!(r.success);
        assert!(!g.has_edge(0, 1));
        assert_eq!(g.edge_count(), 3);
    }

    #[test]
    fn frozen_episodes_keep_edges() {
        let m = Maze::fixture("thinwall").unwrap();
        let d = euclidean_step_distance(m.max_step()).unwrap();
        let xp = ExecParams { acting_cutoff: 1.0, max_steps_per_edge: 12, episode_budget: 60, goal_radius: 1.0 };
        let setup = EpisodeSetup::new(&m, &*d, &GreedyController, &xp);
        let mut g = graph(&[(0.5, 1.5), (0.5, 3.5)], &[(0, 1, 2.0)]);
        let r = run_episode(setup, &mut g, Observation::new(0.5, 1.5), Observation::new(0.5, 3.5), false);
        assert!(!r.success);
        assert_eq!(r.env_steps, xp.episode_budget);
        assert!(g.has_edge(0, 1));
    }

    #[test]
    fn cleanup_budgets() {
        let m = Maze::fixture("thinwall").unwrap();
        let d = euclidean_step_distance(m.max_step()).unwrap();
        let xp = ExecParams { acting_cutoff: 1.0, max_steps_per_edge: 12, episode_budget: 100, goal_radius: 1.0 };
        let setup = EpisodeSetup::new(&m, &*d, &GreedyController, &xp);
        let base = graph(&[(0.5, 1.5), (0.5, 3.5), (4.5, 1.5)], &[(0, 1, 2.0), (1, 0, 2.0), (0, 2, 4.0), (2, 0, 4.0)]);
        let mut g = base.clone();
        let none = cleanup(setup, &mut g, 0, 5);
        assert_eq!(none, CleanupReport::default());
        assert_eq!(g, base);

        let mut a = base.clone();
        let ra = cleanup(setup, &mut a, 2000, 5);
        let mut b = base.clone();
        let rb = cleanup(setup, &mut b, 2000, 5);
        assert_eq!(ra, rb);
        assert_eq!(a, b);
        assert!(ra.steps_used <= 2000);
        assert!(!a.has_edge(0, 1) && !a.has_edge(1, 0));
        assert!(a.has_edge(0, 2) && a.has_edge(2, 0));
        assert_eq!(a.len(), base.len());
    }
}
