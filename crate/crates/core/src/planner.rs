//! Localization onto graph vertices and shortest-path plans.

use std::collections::BinaryHeap;

use serde::{Deserialize, Serialize};

use crate::distance::Distance;
use crate::error::{Error, Result};
use crate::heap::MinEntry;
use crate::maze::Observation;
use crate::memory::GraphMemory;

/// Which side of the asymmetric distance the observation sits on.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LocalizeMode {
    /// Nearest vertex the agent can reach: argmin `d(s, v)`.
    AsStart,
    /// Nearest vertex the goal can be reached from: argmin `d(v, s)`.
    AsGoal,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Localization {
    pub vertex: usize,
    pub distance: f64,
    /// False when even the nearest vertex lies beyond the cutoff.
    pub in_range: bool,
}

/// Nearest vertex to `s` under `d`, lower id on ties.
pub fn localize(g: &GraphMemory, d: &dyn Distance, s: &Observation, cutoff: f64, mode: LocalizeMode) -> Result<Localization> {
    let mut best: Option<(usize, f64)> = None;
    for (id, v) in g.vertices().iter().enumerate() {
        let dist = match mode {
            LocalizeMode::AsStart => d.distance(s, v),
            LocalizeMode::AsGoal => d.distance(v, s),
        };
        if best.is_none_or(|(_, b)| dist < b) {
            best = Some((id, dist));
        }
    }
    let (vertex, distance) = best.ok_or(Error::EmptyGraph)?;
    Ok(Localization { vertex, distance, in_range: distance <= cutoff })
}

/// A route through the graph and the index of the waypoint being pursued.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Plan {
    pub waypoints: Vec<usize>,
    pub total_cost: f64,
    pub cursor: usize,
}

impl Plan {
    /// All waypoints attained.
    pub fn is_finished(&self) -> bool {
        self.cursor >= self.waypoints.len()
    }

    /// Vertex currently pursued, `None` once the plan is finished.
    pub fn target(&self) -> Option<usize> {
        self.waypoints.get(self.cursor).copied()
    }

    /// Last attained waypoint, if any.
    pub fn last_attained(&self) -> Option<usize> {
        self.cursor.checked_sub(1).map(|i| self.waypoints[i])
    }

    /// Advances past every consecutively attained waypoint and returns the
    /// observation to pursue: the first unattained waypoint, or the final
    /// vertex once all are attained.
    pub fn current_waypoint(&mut self, g: &GraphMemory, d: &dyn Distance, s: &Observation, cutoff: f64) -> Observation {
        self.advance(g, d, s, cutoff);
        let id = self.target().unwrap_or(*self.waypoints.last().expect("plans are never empty"));
        g.vertices()[id]
    }

    /// Like [`Plan::current_waypoint`], returning how many waypoints were
    /// attained.
    pub fn advance(&mut self, g: &GraphMemory, d: &dyn Distance, s: &Observation, cutoff: f64) -> usize {
        let before = self.cursor;
        while let Some(id) = self.target() {
            if d.distance(s, &g.vertices()[id]) > cutoff {
                break;
            }
            self.cursor += 1;
        }
        self.cursor - before
    }
}

/// Minimum-weight directed path from `src` to `dst`, `None` when unreachable.
///
/// Among equal-cost routes the predecessor with the lower id wins.
pub fn shortest_path(g: &GraphMemory, src: usize, dst: usize) -> Result<Option<Plan>> {
    for v in [src, dst] {
        if v >= g.len() {
            return Err(Error::UnknownVertex(v));
        }
    }
    let n = g.len();
    let mut dist = vec![f64::INFINITY; n];
    let mut pred = vec![usize::MAX; n];
    let mut done = vec![false; n];
    let mut heap = BinaryHeap::new();
    dist[src] = 0.0;
    heap.push(MinEntry { cost: 0.0, node: src });
    while let Some(MinEntry { cost, node: u }) = heap.pop() {
        if done[u] {
            continue;
        }
        done[u] = true;
        if u == dst {
            break;
        }
        for (v, w) in g.successors(u) {
            if done[v] {
                continue;
            }
            let nd = cost + w;
            if nd < dist[v] || (nd == dist[v] && u < pred[v]) {
                dist[v] = nd;
                pred[v] = u;
                heap.push(MinEntry { cost: nd, node: v });
            }
        }
    }
    if !dist[dst].is_finite() {
        return Ok(None);
    }
    let mut waypoints = vec![dst];
    let mut at = dst;
    while at != src {
        at = pred[at];
        waypoints.push(at);
    }
    waypoints.reverse();
    Ok(Some(Plan { waypoints, total_cost: dist[dst], cursor: 0 }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::distance::{euclidean_step_distance, grid_value_distance};
    use crate::maze::Maze;
    use crate::memory::BuildParams;
    use std::sync::Arc;

    fn pts() -> [Observation; 3] {
        [Observation::new(0.5, 0.5), Observation::new(2.5, 0.5), Observation::new(4.5, 0.5)]
    }

    fn chain() -> GraphMemory {
        let mut g = GraphMemory::new(BuildParams::default());
        for p in pts() {
            g.add_vertex(p);
        }
        g.add_edge(0, 1, 2.0).unwrap();
        g.add_edge(1, 2, 2.0).unwrap();
        g
    }

    #[test]
    fn localize_cases() {
        let m = Arc::new(Maze::fixture("line3").unwrap());
        let d = grid_value_distance(m);
        let g = chain();
        let at = localize(&g, &*d, &pts()[1], 1.0, LocalizeMode::AsStart).unwrap();
        assert_eq!((at.vertex, at.distance, at.in_range), (1, 0.0, true));

        let mut ac = GraphMemory::new(BuildParams::default());
        ac.add_vertex(pts()[0]);
        ac.add_vertex(pts()[2]);
        let tie = localize(&ac, &*d, &pts()[1], 1.0, LocalizeMode::AsGoal).unwrap();
        assert_eq!(tie.vertex, 0);
        assert!(!tie.in_range);

        let empty = GraphMemory::new(BuildParams::default());
        assert!(matches!(localize(&empty, &*d, &pts()[0], 1.0, LocalizeMode::AsStart), Err(Error::EmptyGraph)));
    }

    #[test]
    fn wall_blind_localization_crosses_walls() {
        let m = Maze::fixture("thinwall").unwrap();
        let d = euclidean_step_distance(m.max_step()).unwrap();
        let mut g = GraphMemory::new(BuildParams::default());
        g.add_vertex(Observation::new(0.5, 2.8));
        let s = Observation::new(0.5, 2.2);
        let at = localize(&g, &*d, &s, 1.0, LocalizeMode::AsStart).unwrap();
        assert!(at.in_range);
        assert!(m.geodesic(&s, &g.vertices()[0]) > 1.0);
    }

    #[test]
    fn dijkstra_cases() {
        let mut g = chain();
        let same = shortest_path(&g, 1, 1).unwrap().unwrap();
        assert_eq!((same.waypoints, same.total_cost), (vec![1], 0.0));
        let p = shortest_path(&g, 0, 2).unwrap().unwrap();
        assert_eq!((p.waypoints, p.total_cost), (vec![0, 1, 2], 4.0));
        assert!(shortest_path(&g, 2, 0).unwrap().is_none());
        g.remove_edge(1, 2).unwrap();
        assert!(shortest_path(&g, 0, 2).unwrap().is_none());
        assert!(matches!(shortest_path(&g, 0, 9), Err(Error::UnknownVertex(9))));
    }

    #[test]
    fn equal_cost_prefers_lower_predecessor() {
        let mut g = GraphMemory::new(BuildParams::default());
        for i in 0..4 {
            g.add_vertex(Observation::new(i as f64, 0.0));
        }
        g.add_edge(0, 2, 1.0).unwrap();
        g.add_edge(0, 1, 1.0).unwrap();
        g.add_edge(2, 3, 1.0).unwrap();
        g.add_edge(1, 3, 1.0).unwrap();
        assert_eq!(shortest_path(&g, 0, 3).unwrap().unwrap().waypoints, vec![0, 1, 3]);
    }

    #[test]
    fn cursor_advances() {
        let m = Arc::new(Maze::fixture("line3").unwrap());
        let d = grid_value_distance(m);
        let g = chain();
        let mut plan = shortest_path(&g, 0, 2).unwrap().unwrap();
        let wp = plan.current_waypoint(&g, &*d, &pts()[0], 1.0);
        assert_eq!((plan.cursor, wp), (1, pts()[1]));
        let far = Observation::new(4.9, 0.5);
        let mut fresh = shortest_path(&g, 0, 2).unwrap().unwrap();
        fresh.current_waypoint(&g, &*d, &far, 1.0);
        assert_eq!(fresh.cursor, 0);
        let mut wide = shortest_path(&g, 0, 2).unwrap().unwrap();
        wide.current_waypoint(&g, &*d, &Observation::new(1.5, 0.5), 1.0);
        assert_eq!(wide.cursor, 2);
        assert_eq!(wide.last_attained(), Some(1));
        let last = wide.current_waypoint(&g, &*d, &pts()[2], 1.0);
        assert!(wide.is_finished());
        assert_eq!(last, pts()[2]);
    }
}
