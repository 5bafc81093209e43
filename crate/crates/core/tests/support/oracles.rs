//! Library routines against independent brute-force references. Each check
//! panics with a description on the first mismatch.

use std::collections::BTreeMap;

use ndarray::{Array1, Array2};
use rand::Rng;

use bats_core::bisim_embed::{spearman, train_bisim_on, BisimConfig, TransitionBatch};
use bats_core::bounds::exact_bisim_distance;
use bats_core::dataset::{NeighborGraph, NeighborMode};
use bats_core::dynamics::ForwardModel;
use bats_core::mdp::{value_iteration, Edge, TabularMdp, TabularPolicy};
use bats_core::metric::DistanceMetric;
use bats_core::planner::{plan_stitch, CemConfig};
use bats_core::seeding::rng_from;
use bats_core::stitching::{find_feasible, HopPosition};

fn random_mdp(seed: u64, max_states: usize, max_actions: usize, terminal_prob: f64) -> TabularMdp {
    let mut rng = rng_from(seed, &[]);
    let n = rng.random_range(2..=max_states);
    let gamma = rng.random_range(0.5..0.95);
    let mut m = TabularMdp::new(1, 1, gamma).unwrap();
    for i in 0..n {
        let terminal = i > 0 && rng.random_bool(terminal_prob);
        m.add_state(vec![i as f64], terminal, false);
    }
    for s in 0..n {
        if m.terminal[s] {
            continue;
        }
        for a in 0..rng.random_range(1..=max_actions) {
            let next = rng.random_range(0..n);
            let reward = rng.random_range(-1.0..1.0);
            m.add_edge(s, Edge::logged(vec![a as f64], next, reward)).unwrap();
        }
    }
    m.start_states = vec![0];
    m.validate().unwrap();
    m
}

/// Solve `(I - γ P_π) v = r_π` by Gauss-Jordan elimination with partial pivoting.
fn evaluate_exact(m: &TabularMdp, choice: &[usize]) -> Vec<f64> {
    let n = m.n_states();
    let mut a = vec![vec![0.0; n + 1]; n];
    for s in 0..n {
        let e = &m.actions[s][choice[s]];
        a[s][s] += 1.0;
        a[s][e.next] -= m.discount;
        a[s][n] = e.reward;
    }
    for c in 0..n {
        let p = (c..n).max_by(|&i, &j| a[i][c].abs().total_cmp(&a[j][c].abs())).unwrap();
        a.swap(c, p);
        let d = a[c][c];
        for x in a[c].iter_mut() {
            *x /= d;
        }
        for r in 0..n {
            if r != c {
                let f = a[r][c];
                if f != 0.0 {
                    for k in 0..=n {
                        a[r][k] -= f * a[c][k];
                    }
                }
            }
        }
    }
    a.iter().map(|row| row[n]).collect()
}

pub fn value_iteration_matches_policy_enumeration() {
    for seed in 0..40 {
        let m = random_mdp(seed, 7, 3, 0.15);
        let n = m.n_states();
        let sizes: Vec<usize> = m.actions.iter().map(Vec::len).collect();
        let mut best = vec![f64::NEG_INFINITY; n];
        let mut choice = vec![0; n];
        'outer: loop {
            for (b, v) in best.iter_mut().zip(evaluate_exact(&m, &choice)) {
                *b = b.max(v);
            }
            for s in 0..n {
                choice[s] += 1;
                if choice[s] < sizes[s] {
                    continue 'outer;
                }
                choice[s] = 0;
            }
            break;
        }
        let vt = value_iteration(&m, 1e-12, 100_000).unwrap();
        for s in 0..n {
            assert!((vt.values[s] - best[s]).abs() < 1e-6, "seed {seed} state {s}: {} vs {}", vt.values[s], best[s]);
        }
    }
}

pub fn value_iteration_matches_exact_policy_iteration() {
    // Up to 20 states, where enumeration is too large.
    for seed in 100..140 {
        let m = random_mdp(seed, 20, 3, 0.1);
        let n = m.n_states();
        let mut choice = vec![0; n];
        let v = loop {
            let v = evaluate_exact(&m, &choice);
            let mut changed = false;
            for s in 0..n {
                let q = |a: usize| {
                    let e = &m.actions[s][a];
                    e.reward + m.discount * v[e.next]
                };
                let a = (0..m.actions[s].len()).max_by(|&x, &y| q(x).total_cmp(&q(y))).unwrap();
                if q(a) > q(choice[s]) + 1e-12 {
                    choice[s] = a;
                    changed = true;
                }
            }
            if !changed {
                break v;
            }
        };
        let vt = value_iteration(&m, 1e-12, 100_000).unwrap();
        for s in 0..n {
            assert!((vt.values[s] - v[s]).abs() < 1e-6, "seed {seed} state {s}");
        }
    }
}

/// Minimum MDP-edge count per target over every path with exactly one hop,
/// found by depth-first enumeration.
fn dfs_candidates(m: &TabularMdp, g: &NeighborGraph, source: usize, max_k: usize, hop: HopPosition) -> BTreeMap<usize, usize> {
    let mut best = BTreeMap::new();
    fn walk(
        m: &TabularMdp,
        g: &NeighborGraph,
        u: usize,
        k: usize,
        hopped: bool,
        max_k: usize,
        hop: HopPosition,
        best: &mut BTreeMap<usize, usize>,
    ) {
        if hopped && k >= 1 && !m.imagined[u] {
            let e = best.entry(u).or_insert(k);
            *e = (*e).min(k);
        }
        if !hopped && (k >= 1 || hop == HopPosition::Anywhere) {
            for &t in g.neighbors(u) {
                walk(m, g, t, k, true, max_k, hop, best);
            }
        }
        let may_walk = !hopped || hop == HopPosition::Anywhere;
        if k < max_k && may_walk {
            for e in &m.actions[u] {
                walk(m, g, e.next, k + 1, hopped, max_k, hop, best);
            }
        }
    }
    if !m.terminal[source] {
        walk(m, g, source, 0, false, max_k, hop, &mut best);
    }
    best
}

fn random_graph(seed: u64, n: usize, degree: usize) -> NeighborGraph {
    let mut rng = rng_from(seed, &[7]);
    let adjacency = (0..n)
        .map(|i| {
            let mut list: Vec<usize> = (0..rng.random_range(0..=degree))
                .map(|_| rng.random_range(0..n))
                .filter(|&j| j != i)
                .collect();
            list.sort_unstable();
            list.dedup();
            list
        })
        .collect();
    NeighborGraph {
        mode: NeighborMode::Knn(degree),
        metric: bats_core::metric::MetricKind::Euclidean,
        adjacency,
    }
}

pub fn candidate_enumeration_matches_exhaustive_search() {
    for seed in 0..30 {
        let mut m = random_mdp(1000 + seed, 60, 2, 0.05);
        let n = m.n_states();
        let mut rng = rng_from(seed, &[9]);
        for s in 0..n {
            m.imagined[s] = rng.random_bool(0.1);
        }
        let g = random_graph(seed, n, 3);
        for hop in [HopPosition::Last, HopPosition::Anywhere] {
            for max_k in 1..=3 {
                for source in 0..n {
                    let got = find_feasible(&m, &g, source, max_k, hop);
                    let want = dfs_candidates(&m, &g, source, max_k, hop);
                    let got_map: BTreeMap<usize, usize> = got.iter().map(|c| (c.target, c.k)).collect();
                    assert_eq!(got_map, want, "seed {seed} source {source} k {max_k} {hop:?}");
                    for c in &got {
                        let w = &c.witness;
                        assert_eq!(w.mdp_edges.len(), c.k);
                        assert!(g.neighbors(w.hop.0).contains(&w.hop.1));
                        let mut at = source;
                        for (i, &(s, a)) in w.mdp_edges.iter().enumerate() {
                            if i == w.hop_index {
                                assert_eq!(at, w.hop.0);
                                at = w.hop.1;
                            }
                            assert_eq!(s, at);
                            at = m.actions[s][a].next;
                        }
                        if w.hop_index == w.mdp_edges.len() {
                            assert_eq!(at, w.hop.0);
                            at = w.hop.1;
                        }
                        assert_eq!(at, c.target);
                    }
                }
            }
        }
    }
}

pub fn ball_graph_matches_pairwise_scan() {
    for seed in 0..10 {
        let mut rng = rng_from(seed, &[3]);
        let dim = rng.random_range(1..=4);
        // Lattice points give many pairs at exactly the radius.
        let pts: Vec<Vec<f64>> = (0..200)
            .map(|_| (0..dim).map(|_| rng.random_range(0..6) as f64 * 0.5).collect())
            .collect();
        for eps in [0.5, 0.75, 1.0] {
            let g = NeighborGraph::build(&pts, NeighborMode::Radius(eps), &DistanceMetric::Euclidean).unwrap();
            for i in 0..pts.len() {
                let want: Vec<usize> = (0..pts.len())
                    .filter(|&j| {
                        j != i && pts[i].iter().zip(&pts[j]).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt() <= eps
                    })
                    .collect();
                assert_eq!(g.neighbors(i), want.as_slice(), "seed {seed} eps {eps} point {i}");
            }
        }
    }
}

/// `s' = A s + B a` with diagonal `B`, a single member.
struct Linear {
    a: Array2<f64>,
    b: Vec<f64>,
}

impl ForwardModel for Linear {
    fn n_members(&self) -> usize {
        1
    }
    fn state_dim(&self) -> usize {
        self.b.len()
    }
    fn action_dim(&self) -> usize {
        self.b.len()
    }
    fn step_member_batch(&self, _: usize, states: &Array2<f64>, actions: &Array2<f64>) -> Array2<f64> {
        let mut next = states.dot(&self.a.t());
        for (mut row, act) in next.rows_mut().into_iter().zip(actions.rows()) {
            for j in 0..self.b.len() {
                row[j] += self.b[j] * act[j];
            }
        }
        next
    }
    fn reward_batch(&self, states: &Array2<f64>, _: &Array2<f64>) -> Array1<f64> {
        Array1::zeros(states.nrows())
    }
}

pub fn cem_is_near_the_closed_form_optimum() {
    let bounds = vec![[-1.0, 1.0]; 2];
    let config = CemConfig::with_bounds(bounds.clone());
    for seed in 0..20 {
        let mut rng = rng_from(seed, &[5]);
        let model = Linear {
            a: Array2::from_shape_fn((2, 2), |_| rng.random_range(-1.0..1.0)),
            b: (0..2).map(|_| rng.random_range(0.5..2.0) * if rng.random_bool(0.5) { 1.0 } else { -1.0 }).collect(),
        };
        let source: Vec<f64> = (0..2).map(|_| rng.random_range(-2.0..2.0)).collect();
        // Some targets are out of reach, making the bounds bind.
        let target: Vec<f64> = (0..2).map(|_| rng.random_range(-3.0..3.0)).collect();
        let drift: Vec<f64> = (0..2).map(|i| model.a[[i, 0]] * source[0] + model.a[[i, 1]] * source[1]).collect();
        let best_a: Vec<f64> = (0..2).map(|i| ((target[i] - drift[i]) / model.b[i]).clamp(-1.0, 1.0)).collect();
        let optimum = (0..2).map(|i| (drift[i] + model.b[i] * best_a[i] - target[i]).powi(2)).sum::<f64>().sqrt();
        let r = plan_stitch(&model, &source, &target, 1, 1.0, &DistanceMetric::Euclidean, &config, seed).unwrap();
        let reach: f64 = model.b.iter().map(|b| (2.0 * b).powi(2)).sum::<f64>().sqrt();
        assert!(r.achieved_distance >= optimum - 1e-12, "seed {seed}: below the optimum");
        assert!(
            r.achieved_distance - optimum <= 0.05 * reach,
            "seed {seed}: {} vs optimum {optimum}",
            r.achieved_distance
        );
        for (j, a) in r.actions[0].iter().enumerate() {
            assert!((a - best_a[j]).abs() <= 0.05 * 2.0, "seed {seed}: action {a} vs {}", best_a[j]);
        }
    }
}

/// Deterministic chain with random rewards and one-hot features; the last
/// state loops. Returns the Spearman correlation between learned latent
/// distances and the exact metric over all pairs.
pub fn chain_embedding_spearman(seed: u64) -> f64 {
    let n = 10;
    let gamma = 0.8;
    let mut rng = rng_from(seed, &[]);
    let rewards: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
    let mut m = TabularMdp::new(n, 1, gamma).unwrap();
    let one_hot = |i: usize| (0..n).map(|j| f64::from(u8::from(i == j))).collect::<Vec<f64>>();
    for i in 0..n {
        m.add_state(one_hot(i), false, false);
    }
    let mut batch = TransitionBatch::default();
    for i in 0..n {
        let next = (i + 1).min(n - 1);
        m.add_edge(i, Edge::logged(vec![0.0], next, rewards[i])).unwrap();
        batch.states.push(one_hot(i));
        batch.actions.push(vec![0.0]);
        batch.rewards.push(rewards[i]);
        batch.next_states.push(one_hot(next));
    }
    let exact = exact_bisim_distance(&m, &TabularPolicy::Greedy { choice: vec![0; n] }).unwrap();
    let cfg = BisimConfig {
        encoder_hidden: vec![64, 64],
        dynamics_hidden: vec![64],
        latent_dim: 4,
        discount: gamma,
        batch_size: n,
        steps: 20_000,
        ..BisimConfig::default()
    };
    let emb = train_bisim_on(&batch, &cfg, 9).unwrap();
    let (mut learned, mut truth) = (Vec::new(), Vec::new());
    for s in 0..n {
        for t in s + 1..n {
            let (zs, zt) = (emb.encode(&one_hot(s)), emb.encode(&one_hot(t)));
            learned.push(zs.iter().zip(&zt).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt());
            truth.push(exact.get(s, t));
        }
    }
    spearman(&learned, &truth)
}
