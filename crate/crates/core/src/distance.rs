//! Asymmetric distance functions `d(from, to)`, measured in low-level steps.
//!
//! The value is read as the number of controller steps needed to reach `to`
//! from `from`, i.e. the negated optimal goal-conditioned value of a task with
//! a -1 living reward. Concrete implementations stand in for learned critics:
//! the exact grid value (oracle), a wall-blind straight-line distance, and
//! wrappers that inject bounded noise, aggregate an ensemble pessimistically,
//! or aggregate over temporal windows of the replay buffer.

use std::collections::HashMap;
use std::fmt;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::maze::{Maze, Observation, ReplayBuffer};
use crate::rng::{hash_words, unit_f64};

pub trait Distance: Send + Sync {
    fn distance(&self, from: &Observation, to: &Observation) -> f64;

    fn name(&self) -> String;
}

/// Shared handle to a distance function.
pub type DistanceFn = Arc<dyn Distance>;

impl fmt::Debug for dyn Distance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Distance({})", self.name())
    }
}

/// Optimal step count under the maze dynamics, from per-goal shortest-path
/// fields over the oracle sub-grid. Equal to [`Maze::geodesic`].
pub struct GridValueDistance {
    maze: Arc<Maze>,
}

pub fn grid_value_distance(maze: Arc<Maze>) -> DistanceFn {
    Arc::new(GridValueDistance { maze })
}

impl Distance for GridValueDistance {
    fn distance(&self, from: &Observation, to: &Observation) -> f64 {
        self.maze.geodesic(from, to)
    }

    fn name(&self) -> String {
        "oracle".into()
    }
}

/// Straight-line distance in steps; blind to walls.
pub struct EuclideanStepDistance {
    max_step: f64,
}

pub fn euclidean_step_distance(max_step: f64) -> Result<DistanceFn> {
    if !(max_step > 0.0) {
        return Err(Error::InvalidParams("max_step must be positive".into()));
    }
    Ok(Arc::new(EuclideanStepDistance { max_step }))
}

impl Distance for EuclideanStepDistance {
    fn distance(&self, from: &Observation, to: &Observation) -> f64 {
        from.euclidean(to) / self.max_step
    }

    fn name(&self) -> String {
        "euclid".into()
    }
}

/// Bounded error injection.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NoiseSpec {
    pub epsilon: f64,
    pub seed: u64,
}

pub struct NoisyDistance {
    base: DistanceFn,
    spec: NoiseSpec,
}

/// `max(0, base(a, b) + u(a, b))` with `u` a hash-seeded uniform draw in
/// `[-eps, eps]` per ordered pair of observations.
pub fn with_noise(base: DistanceFn, spec: NoiseSpec) -> Result<DistanceFn> {
    if !(spec.epsilon >= 0.0 && spec.epsilon.is_finite()) {
        return Err(Error::InvalidParams("noise epsilon must be finite and >= 0".into()));
    }
    Ok(Arc::new(NoisyDistance { base, spec }))
}

impl NoisyDistance {
    fn perturbation(&self, a: &Observation, b: &Observation) -> f64 {
        let (ax, ay) = a.key();
        let (bx, by) = b.key();
        let u = unit_f64(hash_words(&[self.spec.seed, ax, ay, bx, by]));
        self.spec.epsilon * (2.0 * u - 1.0)
    }
}

impl Distance for NoisyDistance {
    fn distance(&self, from: &Observation, to: &Observation) -> f64 {
        if self.spec.epsilon == 0.0 {
            return self.base.distance(from, to);
        }
        (self.base.distance(from, to) + self.perturbation(from, to)).max(0.0)
    }

    fn name(&self) -> String {
        format!("{}+noise:{}:{}", self.base.name(), self.spec.epsilon, self.spec.seed)
    }
}

/// Pessimistic ensemble: the largest member distance.
pub struct EnsembleDistance {
    members: Vec<DistanceFn>,
}

pub fn pessimistic_ensemble(members: Vec<DistanceFn>) -> Result<DistanceFn> {
    if members.is_empty() {
        return Err(Error::EmptyEnsemble);
    }
    Ok(Arc::new(EnsembleDistance { members }))
}

impl Distance for EnsembleDistance {
    fn distance(&self, from: &Observation, to: &Observation) -> f64 {
        self.members
            .iter()
            .map(|m| m.distance(from, to))
            .fold(f64::NEG_INFINITY, f64::max)
    }

    fn name(&self) -> String {
        let names: Vec<String> = self.members.iter().map(|m| m.name()).collect();
        format!("ensemble:[{}]", names.join(","))
    }
}

/// Maximum of the base distance over the temporal windows of half-width `w`
/// around two buffer states, truncated at episode boundaries.
///
/// Observations that are not buffer states (e.g. an agent's live position)
/// contribute a window of just themselves.
pub struct TemporalWindowDistance {
    base: DistanceFn,
    episodes: Vec<Vec<Observation>>,
    lookup: HashMap<(u64, u64), (usize, usize)>,
    window: usize,
}

pub fn temporal_window_distance(base: DistanceFn, buffer: &ReplayBuffer, window: usize) -> Arc<TemporalWindowDistance> {
    let mut lookup = HashMap::new();
    for (e, ep) in buffer.episodes.iter().enumerate() {
        for (t, s) in ep.iter().enumerate() {
            lookup.entry(s.key()).or_insert((e, t));
        }
    }
    Arc::new(TemporalWindowDistance {
        base,
        episodes: buffer.episodes.clone(),
        lookup,
        window,
    })
}

impl TemporalWindowDistance {
    fn window_of(&self, episode: usize, time: usize) -> &[Observation] {
        let ep = &self.episodes[episode];
        let lo = time.saturating_sub(self.window);
        let hi = (time + self.window + 1).min(ep.len());
        &ep[lo..hi]
    }

    fn check(&self, (episode, time): (usize, usize)) -> Result<()> {
        match self.episodes.get(episode) {
            Some(ep) if time < ep.len() => Ok(()),
            _ => Err(Error::IndexOutOfRange { episode, time }),
        }
    }

    /// Windowed distance between two buffer-indexed states `(episode, time)`.
    pub fn between(&self, from: (usize, usize), to: (usize, usize)) -> Result<f64> {
        self.check(from)?;
        self.check(to)?;
        Ok(self.max_over(self.window_of(from.0, from.1), self.window_of(to.0, to.1)))
    }

    /// Number of pairs aggregated for two indexed states.
    pub fn pair_count(&self, from: (usize, usize), to: (usize, usize)) -> Result<usize> {
        self.check(from)?;
        self.check(to)?;
        Ok(self.window_of(from.0, from.1).len() * self.window_of(to.0, to.1).len())
    }

    fn max_over(&self, a: &[Observation], b: &[Observation]) -> f64 {
        let mut best = f64::NEG_INFINITY;
        for x in a {
            for y in b {
                best = best.max(self.base.distance(x, y));
            }
        }
        best
    }
}

impl Distance for TemporalWindowDistance {
    fn distance(&self, from: &Observation, to: &Observation) -> f64 {
        let one_from = [*from];
        let one_to = [*to];
        let a = match self.lookup.get(&from.key()) {
            Some(&(e, t)) => self.window_of(e, t),
            None => &one_from,
        };
        let b = match self.lookup.get(&to.key()) {
            Some(&(e, t)) => self.window_of(e, t),
            None => &one_to,
        };
        self.max_over(a, b)
    }

    fn name(&self) -> String {
        format!("window:{}:{}", self.window, self.base.name())
    }
}

/// Feature map used by the perceptual consistency prefilter.
pub trait Embedding: Send + Sync {
    fn embed(&self, o: &Observation) -> Vec<f64>;
}

/// Raw coordinates as features.
#[derive(Clone, Copy, Debug, Default)]
pub struct IdentityEmbedding;

impl Embedding for IdentityEmbedding {
    fn embed(&self, o: &Observation) -> Vec<f64> {
        vec![o.x, o.y]
    }
}

/// Coordinates divided by a fixed extent, e.g. the larger side of the maze,
/// so features live in `[0, 1]`.
#[derive(Clone, Copy, Debug)]
pub struct NormalizedEmbedding {
    pub scale: f64,
}

impl NormalizedEmbedding {
    pub fn for_maze(maze: &Maze) -> Self {
        let (w, h) = maze.extent();
        Self { scale: w.max(h) }
    }
}

impl Embedding for NormalizedEmbedding {
    fn embed(&self, o: &Observation) -> Vec<f64> {
        vec![o.x / self.scale, o.y / self.scale]
    }
}

pub fn feature_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// L2 distance between embeddings.
pub fn perceptual_distance(phi: &dyn Embedding, a: &Observation, b: &Observation) -> f64 {
    feature_distance(&phi.embed(a), &phi.embed(b))
}

/// Parsed form of a distance selection string.
///
/// Grammar: `oracle`, `euclid`, `<spec>+noise:<eps>:<seed>`,
/// `ensemble:[<spec>,<spec>,...]`, `window:<w>` (over the oracle) or
/// `window:<w>:<spec>`.
#[derive(Clone, Debug, PartialEq)]
pub enum DistanceSpec {
    Oracle,
    Euclid,
    Noise { base: Box<DistanceSpec>, epsilon: f64, seed: u64 },
    Ensemble(Vec<DistanceSpec>),
    Window { window: usize, base: Box<DistanceSpec> },
}

impl DistanceSpec {
    pub fn parse(text: &str) -> Result<DistanceSpec> {
        let err = |reason: &str| Error::DistanceSpec { spec: text.to_string(), reason: reason.to_string() };
        let text = text.trim();
        if let Some(pos) = top_level_noise(text) {
            let base = DistanceSpec::parse(&text[..pos])?;
            let args = &text[pos + "+noise:".len()..];
            let (eps, seed) = args.split_once(':').ok_or_else(|| err("expected +noise:<eps>:<seed>"))?;
            let epsilon: f64 = eps.parse().map_err(|_| err("bad epsilon"))?;
            if !(epsilon >= 0.0) {
                return Err(err("epsilon must be >= 0"));
            }
            let seed = seed.parse().map_err(|_| err("bad seed"))?;
            return Ok(DistanceSpec::Noise { base: Box::new(base), epsilon, seed });
        }
        if let Some(inner) = text.strip_prefix("ensemble:") {
            let inner = inner
                .strip_prefix('[')
                .and_then(|s| s.strip_suffix(']'))
                .ok_or_else(|| err("ensemble members must be in brackets"))?;
            let members = split_top_level(inner)
                .into_iter()
                .filter(|s| !s.trim().is_empty())
                .map(DistanceSpec::parse)
                .collect::<Result<Vec<_>>>()?;
            if members.is_empty() {
                return Err(err("ensemble needs at least one member"));
            }
            return Ok(DistanceSpec::Ensemble(members));
        }
        if let Some(rest) = text.strip_prefix("window:") {
            let (w, base) = match rest.split_once(':') {
                Some((w, base)) => (w, DistanceSpec::parse(base)?),
                None => (rest, DistanceSpec::Oracle),
            };
            let window = w.parse().map_err(|_| err("window must be a non-negative integer"))?;
            return Ok(DistanceSpec::Window { window, base: Box::new(base) });
        }
        match text {
            "oracle" => Ok(DistanceSpec::Oracle),
            "euclid" => Ok(DistanceSpec::Euclid),
            _ => Err(err("unknown distance")),
        }
    }

    /// Instantiates the distance; `window` specs need the replay buffer.
    pub fn build(&self, maze: &Arc<Maze>, buffer: Option<&ReplayBuffer>) -> Result<DistanceFn> {
        Ok(match self {
            DistanceSpec::Oracle => grid_value_distance(maze.clone()),
            DistanceSpec::Euclid => euclidean_step_distance(maze.max_step())?,
            DistanceSpec::Noise { base, epsilon, seed } => {
                with_noise(base.build(maze, buffer)?, NoiseSpec { epsilon: *epsilon, seed: *seed })?
            }
            DistanceSpec::Ensemble(members) => {
                pessimistic_ensemble(members.iter().map(|m| m.build(maze, buffer)).collect::<Result<_>>()?)?
            }
            DistanceSpec::Window { window, base } => {
                let buffer = buffer.ok_or_else(|| Error::DistanceSpec {
                    spec: self.to_string(),
                    reason: "window distance needs a replay buffer".into(),
                })?;
                temporal_window_distance(base.build(maze, Some(buffer))?, buffer, *window)
            }
        })
    }
}

impl fmt::Display for DistanceSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DistanceSpec::Oracle => write!(f, "oracle"),
            DistanceSpec::Euclid => write!(f, "euclid"),
            DistanceSpec::Noise { base, epsilon, seed } => write!(f, "{base}+noise:{epsilon}:{seed}"),
            DistanceSpec::Ensemble(members) => {
                let parts: Vec<String> = members.iter().map(ToString::to_string).collect();
                write!(f, "ensemble:[{}]", parts.join(","))
            }
            DistanceSpec::Window { window, base } => write!(f, "window:{window}:{base}"),
        }
    }
}

/// Byte offset of the last `+noise:` outside brackets.
fn top_level_noise(s: &str) -> Option<usize> {
    let mut depth = 0i32;
    let mut found = None;
    for (i, ch) in s.char_indices() {
        match ch {
            '[' => depth += 1,
            ']' => depth -= 1,
            '+' if depth == 0 && s[i..].starts_with("+noise:") => found = Some(i),
            _ => {}
        }
    }
    found
}

fn split_top_level(s: &str) -> Vec<&str> {
    let mut parts = Vec::new();
    let mut depth = 0i32;
    let mut start = 0;
    for (i, ch) in s.char_indices() {
        match ch {
            '[' => depth += 1,
            ']' => depth -= 1,
            ',' if depth == 0 => {
                parts.push(&s[start..i]);
                start = i + 1;
            }
            _ => {}
        }
    }
    parts.push(&s[start..]);
    parts
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Constant(f64);

    impl Distance for Constant {
        fn distance(&self, _: &Observation, _: &Observation) -> f64 {
            self.0
        }
        fn name(&self) -> String {
            format!("const:{}", self.0)
        }
    }

    fn line3() -> (Arc<Maze>, [Observation; 3]) {
        let m = Arc::new(Maze::fixture("line3").unwrap());
        (m, [Observation::new(0.5, 0.5), Observation::new(2.5, 0.5), Observation::new(4.5, 0.5)])
    }

    #[test]
    fn oracle_line3_values() {
        let (m, [a, b, c]) = line3();
        let d = grid_value_distance(m);
        assert_eq!(d.distance(&a, &a), 0.0);
        assert!((d.distance(&a, &b) - 2.0).abs() <= 0.15);
        assert!((d.distance(&b, &c) - 2.0).abs() <= 0.15);
        assert!((d.distance(&a, &c) - 4.0).abs() <= 0.15);
        assert!(d.distance(&a, &c) <= d.distance(&a, &b) + d.distance(&b, &c) + 1e-9);
    }

    #[test]
    fn euclid_is_wall_blind() {
        let m = Maze::fixture("thinwall").unwrap();
        let d = euclidean_step_distance(1.0).unwrap();
        let p = Observation::new(0.5, 2.3);
        let q = Observation::new(0.5, 2.7);
        assert!((d.distance(&p, &q) - 0.4).abs() < 1e-12);
        assert_eq!(d.distance(&p, &q), d.distance(&q, &p));
        assert_eq!(d.distance(&p, &p), 0.0);
        assert!(m.geodesic(&p, &q) >= 4.0);
        assert!(euclidean_step_distance(0.0).is_err());
    }

    #[test]
    fn zero_noise_is_identity() {
        let (m, pts) = line3();
        let base = grid_value_distance(m);
        let noisy = with_noise(base.clone(), NoiseSpec { epsilon: 0.0, seed: 1 }).unwrap();
        for a in &pts {
            for b in &pts {
                assert_eq!(noisy.distance(a, b), base.distance(a, b));
            }
        }
    }

    #[test]
    fn noise_is_bounded_and_repeatable() {
        let (m, pts) = line3();
        let base = grid_value_distance(m);
        let noisy = with_noise(base.clone(), NoiseSpec { epsilon: 1.0, seed: 4 }).unwrap();
        for a in &pts {
            for b in &pts {
                let v = noisy.distance(a, b);
                assert!((v - base.distance(a, b)).abs() <= 1.0);
                assert_eq!(v, noisy.distance(a, b));
                assert!(v >= 0.0);
            }
        }
        assert!(with_noise(base, NoiseSpec { epsilon: -1.0, seed: 0 }).is_err());
    }

    #[test]
    fn ensemble_takes_max() {
        let members: Vec<DistanceFn> = vec![Arc::new(Constant(2.0)), Arc::new(Constant(5.0)), Arc::new(Constant(3.0))];
        let d = pessimistic_ensemble(members).unwrap();
        let p = Observation::new(0.0, 0.0);
        assert_eq!(d.distance(&p, &p), 5.0);
        assert!(matches!(pessimistic_ensemble(vec![]), Err(Error::EmptyEnsemble)));

        let (m, [a, _, c]) = line3();
        let oracle = grid_value_distance(m);
        let single = pessimistic_ensemble(vec![oracle.clone()]).unwrap();
        assert_eq!(single.distance(&a, &c), oracle.distance(&a, &c));
        let noisy = with_noise(oracle.clone(), NoiseSpec { epsilon: 0.5, seed: 2 }).unwrap();
        let both = pessimistic_ensemble(vec![oracle.clone(), noisy]).unwrap();
        let v = both.distance(&a, &c);
        let o = oracle.distance(&a, &c);
        assert!(v >= o && v <= o + 0.5);
    }

    #[test]
    fn window_pair_counts() {
        let states: Vec<Observation> = (0..10).map(|i| Observation::new(0.5 + i as f64 * 0.3, 0.5)).collect();
        let buffer = ReplayBuffer::new(vec![states.clone(), states[..4].to_vec()], 0);
        let base = euclidean_step_distance(1.0).unwrap();
        let w0 = temporal_window_distance(base.clone(), &buffer, 0);
        for (i, j) in buffer.indices().zip(buffer.indices()) {
            let expect = base.distance(buffer.get(i.0, i.1).unwrap(), buffer.get(j.0, j.1).unwrap());
            assert_eq!(w0.between(i, j).unwrap(), expect);
        }
        let w2 = temporal_window_distance(base.clone(), &buffer, 2);
        assert_eq!(w2.pair_count((0, 5), (0, 6)).unwrap(), 25);
        // Episode start: left window truncated to 3 states.
        assert_eq!(w2.pair_count((0, 0), (0, 5)).unwrap(), 3 * 5);
        assert!(w2.between((0, 10), (0, 0)).is_err());
        assert!(w2.between((2, 0), (0, 0)).is_err());
        // Interior value: max over the two windows.
        let got = w2.between((0, 5), (0, 6)).unwrap();
        let expect = base.distance(&states[3], &states[8]);
        assert!((got - expect).abs() < 1e-12);
    }

    #[test]
    fn perceptual_distance_values() {
        let phi = IdentityEmbedding;
        let a = Observation::new(0.0, 0.0);
        let b = Observation::new(3.0, 4.0);
        assert_eq!(perceptual_distance(&phi, &a, &a), 0.0);
        assert_eq!(perceptual_distance(&phi, &a, &b), 5.0);
        assert_eq!(perceptual_distance(&phi, &b, &a), 5.0);
        let scaled = NormalizedEmbedding { scale: 10.0 };
        assert!((perceptual_distance(&scaled, &a, &b) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn spec_strings() {
        for s in [
            "oracle",
            "euclid",
            "oracle+noise:0.5:3",
            "euclid+noise:1:7",
            "ensemble:[oracle,oracle+noise:1:2]",
            "window:2:euclid",
            "ensemble:[euclid,ensemble:[oracle,euclid]]+noise:0.25:1",
        ] {
            let spec = DistanceSpec::parse(s).unwrap();
            assert_eq!(DistanceSpec::parse(&spec.to_string()).unwrap(), spec, "{s}");
        }
        assert_eq!(
            DistanceSpec::parse("window:2").unwrap(),
            DistanceSpec::Window { window: 2, base: Box::new(DistanceSpec::Oracle) }
        );
        for bad in ["manhattan", "oracle+noise:x:1", "oracle+noise:-1:1", "ensemble:[]", "ensemble:oracle", "window:-1"] {
            assert!(DistanceSpec::parse(bad).is_err(), "{bad}");
        }
    }

    #[test]
    fn spec_build_needs_buffer_for_window() {
        let (m, _) = line3();
        assert!(DistanceSpec::parse("window:1").unwrap().build(&m, None).is_err());
        let buffer = ReplayBuffer::from_states(vec![Observation::new(0.5, 0.5)]);
        let d = DistanceSpec::parse("window:1:euclid").unwrap().build(&m, Some(&buffer)).unwrap();
        assert_eq!(d.name(), "window:1:euclid");
    }
}
