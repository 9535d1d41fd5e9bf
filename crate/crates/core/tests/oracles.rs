//! Library results checked against small independent implementations.

use std::sync::Arc;

use sgm::builder::build_sparse_graph;
use sgm::distance::{grid_value_distance, perceptual_distance, with_noise, Distance, NormalizedEmbedding, NoiseSpec};
use sgm::maze::{collect_random_buffer, Maze, Observation, ReplayBuffer};
use sgm::memory::{c_in, c_out, Aggregation, BuildParams, GraphMemory};
use sgm::verify::GapExperiment;

fn line3() -> (Arc<Maze>, [Observation; 3]) {
    let m = Arc::new(Maze::fixture("line3").unwrap());
    (m, [Observation::new(0.5, 0.5), Observation::new(2.5, 0.5), Observation::new(4.5, 0.5)])
}

#[test]
fn line3_distance_table() {
    let (m, [a, b, c]) = line3();
    let d = grid_value_distance(m);
    for (x, y, want) in [(a, b, 2.0), (b, c, 2.0), (a, c, 4.0)] {
        assert!((d.distance(&x, &y) - want).abs() <= 0.15);
        assert!((d.distance(&y, &x) - want).abs() <= 0.15);
    }
}

#[test]
fn line3_consistency_table() {
    let (m, [a, b, c]) = line3();
    let d = grid_value_distance(m);
    let mut g = GraphMemory::new(BuildParams::default());
    for v in [a, b, c] {
        g.add_vertex(v);
    }
    let table = |x: &Observation, y: &Observation| [a, b, c].map(|w| (d.distance(x, &w) - d.distance(y, &w)).abs());
    let by_hand = table(&a, &c).into_iter().fold(0.0, f64::max);
    assert_eq!(c_out(&g, &*d, &a, &c), by_hand);
    assert!((by_hand - 4.0).abs() <= 0.3);
    assert!((c_out(&g, &*d, &a, &b) - 2.0).abs() <= 0.3);
    assert_eq!(c_in(&g, &*d, &a, &c), c_out(&g, &*d, &a, &c));
}

#[test]
fn line3_builds() {
    let (m, pts) = line3();
    let d = grid_value_distance(m.clone());
    let phi = NormalizedEmbedding::for_maze(&m);
    let buffer = ReplayBuffer::from_states(pts.to_vec());
    let open = |tau_a| BuildParams { tau_a, tau_p: f64::INFINITY, max_dist: 3.0, ..BuildParams::default() };

    let (g, _) = build_sparse_graph(&buffer, &*d, &phi, &open(1.0)).unwrap();
    assert_eq!(g.len(), 3);
    let edges: Vec<(usize, usize)> = g.edges().map(|(s, t, _)| (s, t)).collect();
    assert_eq!(edges, [(0, 1), (1, 0), (1, 2), (2, 1)]);

    let (g, _) = build_sparse_graph(&buffer, &*d, &phi, &open(5.0)).unwrap();
    assert_eq!((g.len(), g.edge_count(), g.witnesses().len()), (1, 0, 2));
    assert!(g.witnesses().iter().all(|w| w.kept == 0));
}

/// The one-pass construction written out over a precomputed distance matrix.
fn reference_build(states: &[Observation], d: &dyn Distance, phi: &NormalizedEmbedding, p: &BuildParams) -> (Vec<usize>, Vec<(usize, usize)>) {
    let n = states.len();
    let m: Vec<Vec<f64>> = states.iter().map(|a| states.iter().map(|b| d.distance(a, b)).collect()).collect();
    let mut kept: Vec<usize> = Vec::new();
    for c in 0..n {
        let score = |v: usize| {
            let mut reference = kept.clone();
            reference.extend([v, c]);
            let out = reference.iter().map(|&w| (m[v][w] - m[c][w]).abs()).fold(0.0, f64::max);
            let inc = reference.iter().map(|&s| (m[s][v] - m[s][c]).abs()).fold(0.0, f64::max);
            (inc, out)
        };
        let merged = kept.iter().any(|&v| {
            let gate = !p.aggregation.uses_perceptual_gate() || perceptual_distance(phi, &states[v], &states[c]) <= p.tau_p;
            let (inc, out) = score(v);
            gate && (!p.aggregation.checks_incoming() || inc <= p.tau_a) && (!p.aggregation.checks_outgoing() || out <= p.tau_a)
        });
        if !merged {
            kept.push(c);
        }
    }
    let mut edges = Vec::new();
    for (i, &a) in kept.iter().enumerate() {
        let mut out: Vec<(f64, usize)> = kept
            .iter()
            .enumerate()
            .filter(|&(j, &b)| j != i && m[a][b] <= p.max_dist)
            .map(|(j, &b)| (m[a][b], j))
            .collect();
        out.sort_by(|x, y| x.0.total_cmp(&y.0).then(x.1.cmp(&y.1)));
        edges.extend(out.into_iter().take(p.knn).map(|(_, j)| (i, j)));
    }
    edges.sort_unstable();
    (kept, edges)
}

#[test]
fn builder_matches_reference_construction() {
    let policies = [
        Aggregation::TwcPerceptual,
        Aggregation::TwcOnly,
        Aggregation::IncomingOnly,
        Aggregation::OutgoingOnly,
        Aggregation::PerceptualOnly,
    ];
    for seed in 0..6 {
        let m = Arc::new(Maze::fixture("fourrooms").unwrap());
        let d = with_noise(grid_value_distance(m.clone()), NoiseSpec { epsilon: 0.7, seed }).unwrap();
        let phi = NormalizedEmbedding::for_maze(&m);
        let buffer = collect_random_buffer(&m, 12, 10, seed).unwrap();
        let states: Vec<Observation> = buffer.states().copied().collect();
        for aggregation in policies {
            let p = BuildParams { tau_a: 2.0, tau_p: 0.2, max_dist: 4.0, knn: 3, aggregation };
            let (g, _) = build_sparse_graph(&buffer, &*d, &phi, &p).unwrap();
            let (kept, edges) = reference_build(&states, &*d, &phi, &p);
            let kept_obs: Vec<Observation> = kept.iter().map(|&i| states[i]).collect();
            assert_eq!(g.vertices(), &kept_obs[..], "seed {seed} {aggregation}");
            let got: Vec<(usize, usize)> = g.edges().map(|(s, t, _)| (s, t)).collect();
            assert_eq!(got, edges, "seed {seed} {aggregation}");
        }
    }
}

/// All-pairs shortest paths by Floyd-Warshall.
fn floyd(w: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = w.len();
    let mut dist = w.to_vec();
    for (i, row) in dist.iter_mut().enumerate() {
        row[i] = 0.0;
    }
    for k in 0..n {
        for i in 0..n {
            for j in 0..n {
                let via = dist[i][k] + dist[k][j];
                if via < dist[i][j] {
                    dist[i][j] = via;
                }
            }
        }
    }
    dist
}

#[test]
fn gap_lengths_match_floyd_warshall() {
    for seed in 0..4 {
        let m = Arc::new(Maze::random(6, 6, 0.2, seed));
        let base = grid_value_distance(m.clone());
        let buffer = collect_random_buffer(&m, 6, 7, seed).unwrap();
        let states: Vec<Observation> = buffer.states().copied().collect();
        let exp = GapExperiment::noisy(&buffer, base.clone(), 1.0, seed).unwrap();
        let noisy = with_noise(base.clone(), NoiseSpec { epsilon: 1.0, seed }).unwrap();
        let w: Vec<Vec<f64>> = states.iter().map(|a| states.iter().map(|b| noisy.distance(a, b)).collect()).collect();
        let dense = floyd(&w);
        let report = exp.run(2.0, 20, seed).unwrap();
        let kept = exp.aggregate(2.0);
        let sub: Vec<Vec<f64>> = kept.iter().map(|&i| kept.iter().map(|&j| w[i][j]).collect()).collect();
        let sparse = floyd(&sub);
        for t in &report.trials {
            let (a, b) = (kept.iter().position(|&k| k == t.start).unwrap(), kept.iter().position(|&k| k == t.goal).unwrap());
            assert!((t.len_dense - dense[t.start][t.goal]).abs() < 1e-9);
            assert!((t.len_sparse - sparse[a][b]).abs() < 1e-9);
            assert!(t.pass_i && t.pass_ii == Some(true));
        }
    }
}
