//! The sparse graphical memory: retained observations, directed weighted
//! edges, and the two-way consistency (TWC) scores used to decide merges.
//!
//! Two states `s1`, `s2` are two-way consistent at threshold `tau_a` when both
//!
//! ```text
//! C_out(s1, s2) = max_w  |d(s1, w) - d(s2, w)|   (interchangeable as starts)
//! C_in (s1, s2) = max_s0 |d(s0, s1) - d(s0, s2)| (interchangeable as goals)
//! ```
//!
//! are at most `tau_a`. The maxima range over the current vertex set plus the
//! two arguments; the vertex set is the action space of the planner.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::distance::{perceptual_distance, Distance, Embedding};
use crate::error::{Error, Result};
use crate::maze::Observation;

/// Node-retention policy used while reading the replay buffer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Aggregation {
    /// Perceptual gate, then both TWC directions (the default).
    TwcPerceptual,
    TwcOnly,
    PerceptualOnly,
    IncomingOnly,
    OutgoingOnly,
    /// Keep `n` states drawn uniformly without replacement.
    Uniform { n: usize, seed: u64 },
    /// Keep every distinct state.
    None,
}

impl Aggregation {
    pub fn uses_perceptual_gate(&self) -> bool {
        matches!(self, Aggregation::TwcPerceptual | Aggregation::PerceptualOnly)
    }

    pub fn checks_incoming(&self) -> bool {
        matches!(self, Aggregation::TwcPerceptual | Aggregation::TwcOnly | Aggregation::IncomingOnly)
    }

    pub fn checks_outgoing(&self) -> bool {
        matches!(self, Aggregation::TwcPerceptual | Aggregation::TwcOnly | Aggregation::OutgoingOnly)
    }

    /// Whether this policy ever merges through [`find_merge_target`].
    pub fn merges(&self) -> bool {
        !matches!(self, Aggregation::Uniform { .. } | Aggregation::None)
    }
}

impl fmt::Display for Aggregation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Aggregation::TwcPerceptual => write!(f, "twc+perceptual"),
            Aggregation::TwcOnly => write!(f, "twc-only"),
            Aggregation::PerceptualOnly => write!(f, "perceptual-only"),
            Aggregation::IncomingOnly => write!(f, "incoming-only"),
            Aggregation::OutgoingOnly => write!(f, "outgoing-only"),
            Aggregation::Uniform { n, seed: 0 } => write!(f, "uniform:{n}"),
            Aggregation::Uniform { n, seed } => write!(f, "uniform:{n}:{seed}"),
            Aggregation::None => write!(f, "none"),
        }
    }
}

impl FromStr for Aggregation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "twc+perceptual" | "two-way" | "sgm" => Aggregation::TwcPerceptual,
            "twc-only" => Aggregation::TwcOnly,
            "perceptual-only" | "perceptual" => Aggregation::PerceptualOnly,
            "incoming-only" | "incoming" => Aggregation::IncomingOnly,
            "outgoing-only" | "outgoing" => Aggregation::OutgoingOnly,
            "none" | "dense" => Aggregation::None,
            other => {
                let rest = other
                    .strip_prefix("uniform:")
                    .ok_or_else(|| Error::InvalidParams(format!("unknown aggregation `{other}`")))?;
                let bad = || Error::InvalidParams(format!("bad uniform spec `{other}`"));
                let (n, seed) = match rest.split_once(':') {
                    Some((n, seed)) => (n.parse().map_err(|_| bad())?, seed.parse().map_err(|_| bad())?),
                    None => (rest.parse().map_err(|_| bad())?, 0),
                };
                Aggregation::Uniform { n, seed }
            }
        })
    }
}

impl Serialize for Aggregation {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Aggregation {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Construction hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BuildParams {
    /// TWC threshold, in steps.
    pub tau_a: f64,
    /// Perceptual threshold, in embedding units.
    pub tau_p: f64,
    /// Edge creation cutoff, in steps.
    pub max_dist: f64,
    /// Successors kept per vertex.
    pub knn: usize,
    pub aggregation: Aggregation,
}

impl Default for BuildParams {
    fn default() -> Self {
        Self {
            max_dist: 10.0,
            tau_p: 0.05,
            tau_a: 5.0,
            knn: 5,
            aggregation: Aggregation::TwcPerceptual,
        }
    }
}

impl BuildParams {
    /// Dense-baseline settings: every state kept, shorter edges.
    pub fn dense() -> Self {
        Self {
            max_dist: 6.0,
            knn: 5,
            aggregation: Aggregation::None,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("tau_a", self.tau_a), ("tau_p", self.tau_p), ("max_dist", self.max_dist)] {
            if !(v >= 0.0) {
                return Err(Error::InvalidParams(format!("{name} must be >= 0, got {v}")));
            }
        }
        if self.knn == 0 {
            return Err(Error::InvalidParams("knn must be at least 1".into()));
        }
        Ok(())
    }
}

/// Record of a merged (rejected) buffer state.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Witness {
    pub obs: Observation,
    /// Vertex the state was merged into.
    pub kept: usize,
    pub c_in: f64,
    pub c_out: f64,
    /// Number of vertices at rejection time; the scores were maximized over
    /// vertices `0..prefix` plus the two states.
    pub prefix: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TwcScore {
    pub c_in: f64,
    pub c_out: f64,
}

impl TwcScore {
    pub fn max(&self) -> f64 {
        self.c_in.max(self.c_out)
    }
}

/// Directed weighted graph over retained observations. Vertex ids are dense
/// and follow insertion order.
#[derive(Clone, Debug, PartialEq)]
pub struct GraphMemory {
    vertices: Vec<Observation>,
    out: Vec<BTreeMap<usize, f64>>,
    edge_count: usize,
    witnesses: Vec<Witness>,
    params: BuildParams,
}

impl GraphMemory {
    pub fn new(params: BuildParams) -> Self {
        Self {
            vertices: Vec::new(),
            out: Vec::new(),
            edge_count: 0,
            witnesses: Vec::new(),
            params,
        }
    }

    pub fn params(&self) -> &BuildParams {
        &self.params
    }

    pub fn len(&self) -> usize {
        self.vertices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vertices.is_empty()
    }

    pub fn vertices(&self) -> &[Observation] {
        &self.vertices
    }

    pub fn vertex(&self, id: usize) -> Option<&Observation> {
        self.vertices.get(id)
    }

    pub fn edge_count(&self) -> usize {
        self.edge_count
    }

    pub fn weight(&self, src: usize, dst: usize) -> Option<f64> {
        self.out.get(src).and_then(|m| m.get(&dst).copied())
    }

    pub fn has_edge(&self, src: usize, dst: usize) -> bool {
        self.weight(src, dst).is_some()
    }

    /// Outgoing `(dst, weight)` pairs of `src`, by ascending `dst`.
    pub fn successors(&self, src: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.out[src].iter().map(|(&d, &w)| (d, w))
    }

    pub fn out_degree(&self, src: usize) -> usize {
        self.out[src].len()
    }

    /// All edges as `(src, dst, weight)`, sorted by `(src, dst)`.
    pub fn edges(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        self.out
            .iter()
            .enumerate()
            .flat_map(|(s, m)| m.iter().map(move |(&d, &w)| (s, d, w)))
    }

    pub fn witnesses(&self) -> &[Witness] {
        &self.witnesses
    }

    pub(crate) fn push_witness(&mut self, w: Witness) {
        self.witnesses.push(w);
    }

    /// Appends a vertex without edges and returns its id.
    pub fn add_vertex(&mut self, obs: Observation) -> usize {
        self.vertices.push(obs);
        self.out.push(BTreeMap::new());
        self.vertices.len() - 1
    }

    /// Appends a vertex with an explicit id, which must be the next dense id.
    pub fn add_vertex_with_id(&mut self, id: usize, obs: Observation) -> Result<usize> {
        if id < self.vertices.len() {
            return Err(Error::DuplicateVertex(id));
        }
        if id > self.vertices.len() {
            return Err(Error::GraphSchema(format!(
                "vertex ids must be dense: expected {}, got {id}",
                self.vertices.len()
            )));
        }
        Ok(self.add_vertex(obs))
    }

    /// Inserts or overwrites the edge `src -> dst`.
    pub fn add_edge(&mut self, src: usize, dst: usize, weight: f64) -> Result<()> {
        if src >= self.len() {
            return Err(Error::UnknownVertex(src));
        }
        if dst >= self.len() {
            return Err(Error::UnknownVertex(dst));
        }
        if src == dst {
            return Err(Error::InvalidParams(format!("self-loop on vertex {src}")));
        }
        if !(weight >= 0.0 && weight.is_finite()) {
            return Err(Error::InvalidParams(format!("edge weight must be finite and >= 0, got {weight}")));
        }
        if self.out[src].insert(dst, weight).is_none() {
            self.edge_count += 1;
        }
        Ok(())
    }

    pub fn remove_edge(&mut self, src: usize, dst: usize) -> Result<f64> {
        let w = self
            .out
            .get_mut(src)
            .and_then(|m| m.remove(&dst))
            .ok_or(Error::MissingEdge { src, dst })?;
        self.edge_count -= 1;
        Ok(w)
    }

    /// Adds `s` as a vertex with edges in both directions to every existing
    /// vertex within `max_dist`, weighted by `d`.
    pub fn add_node_with_edges(&mut self, d: &dyn Distance, s: Observation, max_dist: f64) -> usize {
        let id = self.add_vertex(s);
        for j in 0..id {
            let other = self.vertices[j];
            let into = d.distance(&other, &s);
            if into <= max_dist {
                self.out[j].insert(id, into);
                self.edge_count += 1;
            }
            let from = d.distance(&s, &other);
            if from <= max_dist {
                self.out[id].insert(j, from);
                self.edge_count += 1;
            }
        }
        id
    }

    /// Keeps each vertex's `k` lowest-weight outgoing edges, ties broken by
    /// destination id.
    pub fn knn_filter(&mut self, k: usize) {
        for m in &mut self.out {
            if m.len() <= k {
                continue;
            }
            let mut ranked: Vec<(usize, f64)> = m.iter().map(|(&d, &w)| (d, w)).collect();
            ranked.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
            ranked.truncate(k);
            self.edge_count -= m.len() - k;
            *m = ranked.into_iter().collect();
        }
    }

    /// Re-checks the structural invariants.
    pub fn check_invariants(&self) -> Result<()> {
        let mut count = 0;
        for (s, m) in self.out.iter().enumerate() {
            for (&d, &w) in m {
                if d >= self.len() {
                    return Err(Error::GraphSchema(format!("edge {s} -> {d} has a dangling endpoint")));
                }
                if d == s {
                    return Err(Error::GraphSchema(format!("self-loop on {s}")));
                }
                if !(w >= 0.0) {
                    return Err(Error::GraphSchema(format!("edge {s} -> {d} has weight {w}")));
                }
                count += 1;
            }
        }
        if count != self.edge_count || self.out.len() != self.vertices.len() {
            return Err(Error::GraphSchema("edge bookkeeping out of sync".into()));
        }
        for w in &self.witnesses {
            if w.kept >= self.len() || w.prefix > self.len() || w.kept >= w.prefix {
                return Err(Error::GraphSchema(format!("witness points at vertex {} outside prefix {}", w.kept, w.prefix)));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(&GraphFile::from(self))?)
    }

    pub fn to_json_pretty(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&GraphFile::from(self))?)
    }

    pub fn from_json(text: &str) -> Result<GraphMemory> {
        let file: GraphFile = serde_json::from_str(text).map_err(|e| Error::GraphSchema(e.to_string()))?;
        file.params.validate()?;
        let mut g = GraphMemory::new(file.params);
        for node in file.nodes {
            g.add_vertex_with_id(node.id, node.obs)?;
        }
        for e in file.edges {
            if e.src >= g.len() || e.dst >= g.len() {
                return Err(Error::GraphSchema(format!("edge {} -> {} has a dangling endpoint", e.src, e.dst)));
            }
            if g.has_edge(e.src, e.dst) {
                return Err(Error::GraphSchema(format!("duplicate edge {} -> {}", e.src, e.dst)));
            }
            g.add_edge(e.src, e.dst, e.w).map_err(|err| Error::GraphSchema(err.to_string()))?;
        }
        g.witnesses = file.witnesses;
        g.check_invariants()?;
        Ok(g)
    }
}

#[derive(Serialize, Deserialize)]
struct GraphFile {
    params: BuildParams,
    nodes: Vec<NodeRecord>,
    edges: Vec<EdgeRecord>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    witnesses: Vec<Witness>,
}

#[derive(Serialize, Deserialize)]
struct NodeRecord {
    id: usize,
    obs: Observation,
}

#[derive(Serialize, Deserialize)]
struct EdgeRecord {
    src: usize,
    dst: usize,
    w: f64,
}

impl From<&GraphMemory> for GraphFile {
    fn from(g: &GraphMemory) -> Self {
        GraphFile {
            params: g.params,
            nodes: g.vertices.iter().enumerate().map(|(id, &obs)| NodeRecord { id, obs }).collect(),
            edges: g.edges().map(|(src, dst, w)| EdgeRecord { src, dst, w }).collect(),
            witnesses: g.witnesses.clone(),
        }
    }
}

/// `C_out` over `reference ∪ {s1, s2}`.
pub fn c_out_over(reference: &[Observation], d: &dyn Distance, s1: &Observation, s2: &Observation) -> f64 {
    reference
        .iter()
        .chain([s1, s2])
        .map(|w| (d.distance(s1, w) - d.distance(s2, w)).abs())
        .fold(0.0, f64::max)
}

/// `C_in` over `reference ∪ {s1, s2}`.
pub fn c_in_over(reference: &[Observation], d: &dyn Distance, s1: &Observation, s2: &Observation) -> f64 {
    reference
        .iter()
        .chain([s1, s2])
        .map(|s0| (d.distance(s0, s1) - d.distance(s0, s2)).abs())
        .fold(0.0, f64::max)
}

/// Outgoing consistency of `s1`, `s2` against the graph's vertices.
pub fn c_out(g: &GraphMemory, d: &dyn Distance, s1: &Observation, s2: &Observation) -> f64 {
    c_out_over(g.vertices(), d, s1, s2)
}

/// Incoming consistency of `s1`, `s2` against the graph's vertices.
pub fn c_in(g: &GraphMemory, d: &dyn Distance, s1: &Observation, s2: &Observation) -> f64 {
    c_in_over(g.vertices(), d, s1, s2)
}

pub fn twc_score(g: &GraphMemory, d: &dyn Distance, s1: &Observation, s2: &Observation) -> TwcScore {
    TwcScore {
        c_in: c_in(g, d, s1, s2),
        c_out: c_out(g, d, s1, s2),
    }
}

/// First vertex, in insertion order, that `cand` may be merged into under the
/// policy of `p`.
///
/// The perceptual gate is tested first and skips the TWC evaluation for
/// perceptually distant vertices.
pub fn find_merge_target(
    g: &GraphMemory,
    d: &dyn Distance,
    phi: &dyn Embedding,
    cand: &Observation,
    p: &BuildParams,
) -> Option<usize> {
    if !p.aggregation.merges() {
        return None;
    }
    let agg = p.aggregation;
    g.vertices().iter().position(|v| {
        if agg.uses_perceptual_gate() && perceptual_distance(phi, v, cand) > p.tau_p {
            return false;
        }
        if agg.checks_incoming() && c_in(g, d, v, cand) > p.tau_a {
            return false;
        }
        if agg.checks_outgoing() && c_out(g, d, v, cand) > p.tau_a {
            return false;
        }
        true
    })
}
