use nalgebra::DMatrix;
use rand::RngCore;

use dzgt::gt_core::{
    apply_update, consensus_error, gradients, gradients_in_order, run, step, Init, Oracle, Record, RunConfig,
    SwarmState,
};
use dzgt::lower_level::{LowerIterRule, ViConstants};
use dzgt::network::{build_topology, metropolis_weights, MixingMatrix, Topology, TopologyParams};
use dzgt::problems::{bilevel_benchmark, cournot_game, CournotParams, Problem, Stage};
use dzgt::rng::{Purpose, StreamKey};
use dzgt::smoothing::{sample_unit_sphere, zo_gradient};
use dzgt::Result;

/// Agent `i` minimizes `|x - c_i|^2 / 2 + scale * z^2`; the lower level is
/// `F = z` on the real line, so `z(x) = 0`.
struct Quadratic {
    centers: Vec<[f64; 2]>,
    scale: f64,
}

impl Problem for Quadratic {
    fn name(&self) -> &str {
        "quadratic"
    }
    fn stage(&self) -> Stage {
        Stage::SingleStage
    }
    fn dim_x(&self) -> usize {
        2
    }
    fn dim_z(&self) -> usize {
        1
    }
    fn noise_dim(&self) -> usize {
        0
    }
    fn constants(&self) -> ViConstants {
        ViConstants { mu_f: 1.0, l_f: 1.0, nu_f: 0.0, diameter_sq: f64::INFINITY }
    }
    fn sample_noise(&self, _agent: usize, _rng: &mut dyn RngCore, _out: &mut [f64]) {}
    fn upper(&self, agent: usize, x: &[f64], z: &[f64], _xi: &[f64]) -> f64 {
        let c = self.centers[agent];
        self.scale * (0.5 * ((x[0] - c[0]).powi(2) + (x[1] - c[1]).powi(2)) + z[0] * z[0])
    }
    fn lower_map(&self, _agent: usize, _x: &[f64], z: &[f64], _xi: &[f64], out: &mut [f64]) {
        out[0] = z[0];
    }
    fn project(&self, _agent: usize, _x: &[f64], _xi: &[f64], _z: &mut [f64]) -> Result<()> {
        Ok(())
    }
    fn has_exact_lower(&self) -> bool {
        true
    }
    fn exact_lower(&self, _agent: usize, _x: &[f64], _xi: &[f64]) -> Result<Vec<f64>> {
        Ok(vec![0.0])
    }
}

fn mixing(t: Topology, m: usize) -> MixingMatrix {
    metropolis_weights(&build_topology(t, m, &TopologyParams::default()).unwrap()).unwrap()
}

fn col_means(a: &DMatrix<f64>) -> Vec<f64> {
    a.column_iter().map(|c| c.mean()).collect()
}

fn exact_cfg(mode: Stage, gamma: f64, k: usize, seed: u64) -> RunConfig {
    let mut cfg = RunConfig::new(mode, gamma, 0.1, k);
    cfg.oracle = Oracle::Exact;
    cfg.master_seed = seed;
    cfg
}

#[test]
fn tracker_mean_telescopes_on_ring_of_three() {
    let p = Quadratic { centers: vec![[1.0, 0.0], [-2.0, 3.0], [0.5, -1.0]], scale: 1.0 };
    let w = mixing(Topology::Ring, 3);
    let mut cfg = exact_cfg(Stage::SingleStage, 0.05, 40, 4);
    cfg.minibatch = 3;
    cfg.init = Init::Random { center: None, scale: 1.0 };
    let mut s = SwarmState::initial(&p, 3, &cfg).unwrap();
    for _ in 0..40 {
        let g = gradients(&s, &p, &cfg).unwrap();
        let next = apply_update(&s, &w, g.clone(), &cfg).unwrap();
        let (y_bar, g_bar) = (col_means(&next.y), col_means(&g));
        let (x_bar, x_prev) = (col_means(&next.x), col_means(&s.x));
        for j in 0..2 {
            assert!((y_bar[j] - g_bar[j]).abs() < 1e-12);
            assert!((x_bar[j] - (x_prev[j] - cfg.gamma * y_bar[j])).abs() < 1e-12);
        }
        s = next;
    }
    assert_eq!(s.iteration, 40);
}

#[test]
fn zero_objective_reaches_consensus_at_the_initial_mean() {
    let p = Quadratic { centers: vec![[0.0, 0.0]; 6], scale: 0.0 };
    let w = mixing(Topology::Ring, 6);
    let mut cfg = exact_cfg(Stage::SingleStage, 0.1, 60, 8);
    cfg.init = Init::Random { center: Some(vec![1.0, -1.0]), scale: 2.0 };
    let mut s = SwarmState::initial(&p, 6, &cfg).unwrap();
    let mean0 = s.mean_x();
    let err0 = consensus_error(&s.x).sqrt();
    let lambda = w.lambda_w();
    for k in 1..=60 {
        s = step(&s, &w, &p, &cfg).unwrap();
        assert!(s.g_prev.iter().all(|&v| v == 0.0));
        let err = consensus_error(&s.x).sqrt();
        assert!(err <= lambda.powi(k) * err0 * (1.0 + 1e-6), "k = {k}: {err}");
    }
    for (a, b) in s.mean_x().iter().zip(&mean0) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn agent_visiting_order_does_not_change_gradients() {
    let b = bilevel_benchmark();
    let mut cfg = RunConfig::new(Stage::SingleStage, 1e-3, 0.1, 5);
    cfg.minibatch = 2;
    cfg.master_seed = 17;
    cfg.init = Init::Random { center: None, scale: 0.5 };
    let s = SwarmState::initial(&b, 5, &cfg).unwrap();
    let natural = gradients(&s, &b, &cfg).unwrap();
    let shuffled = gradients_in_order(&s, &b, &cfg, Some(&[3, 0, 4, 1, 2])).unwrap();
    assert_eq!(natural, shuffled);
    assert!(gradients_in_order(&s, &b, &cfg, Some(&[0, 0, 1, 2, 3])).is_err());
}

#[test]
fn inexact_oracle_approaches_exact_as_lower_steps_grow() {
    let b = bilevel_benchmark();
    let w = mixing(Topology::Ring, 5);
    let final_mean = |oracle, rule| {
        let mut cfg = RunConfig::new(Stage::SingleStage, 1e-2, 0.1, 10);
        cfg.oracle = oracle;
        cfg.lower_rule = rule;
        cfg.minibatch = 2;
        cfg.master_seed = 23;
        run(&cfg, &b, &w, &[], |s| Ok(Record::basic(s))).unwrap().final_state.mean_x()
    };
    let exact = final_mean(Oracle::Exact, LowerIterRule::default());
    let gaps: Vec<f64> = [10, 100, 1000, 10_000]
        .iter()
        .map(|&t| {
            let x = final_mean(Oracle::Inexact, LowerIterRule::Fixed(t));
            x.iter().zip(&exact).map(|(a, e)| (a - e).powi(2)).sum::<f64>().sqrt()
        })
        .collect();
    assert!(gaps.windows(2).all(|p| p[1] < p[0]), "{gaps:?}");
}

#[test]
fn single_agent_matches_reference_loop() {
    let game = cournot_game(4, &CournotParams::default());
    let cfg = {
        let mut c = exact_cfg(Stage::TwoStage, 0.05, 25, 31);
        c.minibatch = 3;
        c
    };
    let traj = run(&cfg, &game, &MixingMatrix::single(), &[], |s| Ok(Record::basic(s))).unwrap();

    // Plain zeroth-order descent with the same random streams.
    let n = game.dim_x();
    let mut x = game.default_x0();
    let mut xi = vec![0.0; game.noise_dim()];
    for k in 0..cfg.horizon_k {
        let mut g = vec![0.0; n];
        for b in 0..cfg.minibatch {
            let key = |purpose| StreamKey::new(cfg.master_seed, purpose).agent(0).iteration(k).index(b);
            let v = sample_unit_sphere(&mut key(Purpose::Direction).rng(), n);
            game.sample_noise(0, &mut key(Purpose::UpperNoise).rng(), &mut xi);
            let xp: Vec<f64> = x.iter().zip(v.as_slice()).map(|(a, d)| a + cfg.eta * d).collect();
            let xm: Vec<f64> = x.iter().zip(v.as_slice()).map(|(a, d)| a - cfg.eta * d).collect();
            let hp = game.upper(0, &xp, &game.exact_lower(0, &xp, &xi).unwrap(), &xi);
            let hm = game.upper(0, &xm, &game.exact_lower(0, &xm, &xi).unwrap(), &xi);
            let scale = n as f64 / (2.0 * cfg.eta) * (hp - hm) / cfg.minibatch as f64;
            for (gj, vj) in g.iter_mut().zip(v.as_slice()) {
                *gj += scale * vj;
            }
        }
        for (xj, gj) in x.iter_mut().zip(&g) {
            *xj -= cfg.gamma * gj;
        }
    }
    let got = traj.final_state.mean_x();
    for (a, b) in got.iter().zip(&x) {
        assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0), "{a} vs {b}");
    }
}

#[test]
fn first_tracker_is_first_gradient_for_one_agent() {
    let b = bilevel_benchmark();
    let cfg = exact_cfg(Stage::SingleStage, 1e-2, 1, 5);
    let s = SwarmState::initial(&b, 1, &cfg).unwrap();
    let g0 = gradients(&s, &b, &cfg).unwrap();
    let s1 = step(&s, &MixingMatrix::single(), &b, &cfg).unwrap();
    assert_eq!(s1.y, g0);
    assert_eq!(s1.x, &s.x - cfg.gamma * &g0);
}

#[test]
fn antithetic_directions_give_the_same_estimate() {
    let mut rng = StreamKey::new(3, Purpose::Test).rng();
    for _ in 0..20 {
        let v = sample_unit_sphere(&mut rng, 3);
        let (hp, hm) = (rng.next_u32() as f64 / 1e6, rng.next_u32() as f64 / 1e6);
        let a = zo_gradient(hp, hm, &v, 0.2).unwrap();
        let b = zo_gradient(hm, hp, &v.negated(), 0.2).unwrap();
        for (x, y) in a.g.iter().zip(&b.g) {
            assert!((x - y).abs() <= 1e-12 * x.abs().max(1.0));
        }
    }
}

#[test]
fn complete_graph_moves_every_agent_to_the_averaged_step() {
    let game = cournot_game(3, &CournotParams::default());
    let w = mixing(Topology::Complete, 5);
    let mut cfg = RunConfig::new(Stage::TwoStage, 1e-2, 0.1, 10);
    cfg.minibatch = 2;
    cfg.master_seed = 12;
    cfg.init = Init::Random { center: Some(vec![2.0]), scale: 0.5 };
    let mut s = SwarmState::initial(&game, 5, &cfg).unwrap();
    for _ in 0..10 {
        let g = gradients(&s, &game, &cfg).unwrap();
        let target = s.mean_x()[0] - cfg.gamma * g.column(0).mean();
        s = apply_update(&s, &w, g, &cfg).unwrap();
        for i in 0..5 {
            assert!((s.x[(i, 0)] - target).abs() < 1e-12);
        }
    }
}

#[test]
fn mismatched_mode_is_rejected() {
    let game = cournot_game(2, &CournotParams::default());
    let cfg = RunConfig::new(Stage::SingleStage, 1e-2, 0.1, 3);
    let err = run(&cfg, &game, &mixing(Topology::Ring, 3), &[0], |s| Ok(Record::basic(s))).unwrap_err();
    assert!(err.partial.records.is_empty());
    let s = SwarmState::initial(&game, 3, &cfg).unwrap();
    assert!(step(&s, &mixing(Topology::Ring, 3), &game, &cfg).is_err());
}
