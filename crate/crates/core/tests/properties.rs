mod common;

use common::*;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use neural_cert::certify::{
    barrier_terms, lyapunov_terms, train, ModelSpec, ProblemSets, RiskConfig, TrainConfig, TrainState,
};
use neural_cert::diffnet::{Head, LinearPolicy, MlpNet, Policy, ScalarField};
use neural_cert::par;
use neural_cert::sets::StateSet;
use neural_cert::sim::{batch_rollouts, judge, rk4_simulate, SimConfig};
use neural_cert::systems::{closed_loop, FnVectorField, SystemModel, VectorField};
use neural_cert::verify::{raw_slack, verify_all, verify_barrier, Status, VerifyConfig};

fn random_net(seed: u64, head: Head) -> MlpNet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.gen_range(1..=4);
    let dims = vec![n, rng.gen_range(1..=8), rng.gen_range(1..=8), 1];
    let mut net = MlpNet::zeros(&dims, head, rng.gen_bool(0.5)).unwrap();
    randomize_params(&mut net, 2.0, &mut rng);
    net
}

fn random_point(rng: &mut ChaCha8Rng, n: usize, r: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-r..r)).collect()
}

fn random_set(seed: u64) -> StateSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.gen_range(1..=3);
    let c = random_point(&mut rng, n, 1.0);
    match rng.gen_range(0..4) {
        0 => {
            let lb = random_point(&mut rng, n, 1.0);
            let ub = lb.iter().map(|l| l + rng.gen_range(0.1..1.0)).collect();
            StateSet::boxed(lb, ub).unwrap()
        }
        1 => StateSet::ball(c, rng.gen_range(0.1..1.0)).unwrap(),
        2 => {
            let r_in = rng.gen_range(0.2..0.6);
            StateSet::annulus(c, r_in, r_in + rng.gen_range(0.1..0.5)).unwrap()
        }
        _ => StateSet::point(c).unwrap(),
    }
}

fn systems() -> Vec<SystemModel> {
    vec![
        SystemModel::pendulum(),
        SystemModel::cartpole(),
        SystemModel::vehicle(),
        SystemModel::uav(),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn quadratic_head_is_nonnegative(seed in any::<u64>()) {
        let net = random_net(seed, Head::Quadratic);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 1);
        for _ in 0..2000 {
            let x = random_point(&mut rng, net.input_dim(), 10.0);
            prop_assert!(net.eval(&x).unwrap() >= 0.0);
        }
    }

    #[test]
    fn params_round_trip(seed in any::<u64>()) {
        let net = random_net(seed, Head::Scalar);
        let p = net.params();
        prop_assert_eq!(p.len(), net.param_count());
        let mut other = MlpNet::zeros(net.layer_dims(), net.head(), net.has_bias()).unwrap();
        other.set_params(&p).unwrap();
        prop_assert_eq!(&other, &net);
        prop_assert_eq!(other.params(), p);
    }

    #[test]
    fn lipschitz_bound_dominates_difference_quotients(seed in any::<u64>()) {
        let net = random_net(seed, Head::Scalar);
        let l = net.lipschitz_bound();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 2);
        for _ in 0..200 {
            let a = random_point(&mut rng, net.input_dim(), 3.0);
            let b = random_point(&mut rng, net.input_dim(), 3.0);
            let d: f64 = a.iter().zip(&b).map(|(p, q)| (p - q) * (p - q)).sum::<f64>().sqrt();
            if d > 1e-9 {
                let q = (net.eval(&a).unwrap() - net.eval(&b).unwrap()).abs() / d;
                prop_assert!(q <= l * (1.0 + 1e-12), "{} > {}", q, l);
            }
        }
    }

    #[test]
    fn control_jacobian_matches_differences(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for sys in systems() {
            let (n, m) = (sys.state_dim(), sys.control_dim());
            let x = random_point(&mut rng, n, 0.8);
            let u = random_point(&mut rng, m, 1.0);
            let j = sys.jac_u(&x, &u).unwrap();
            prop_assert_eq!(j.len(), n * m);
            for k in 0..m {
                let h = 1e-6;
                let mut up = u.clone();
                up[k] += h;
                let mut dn = u.clone();
                dn[k] -= h;
                let fu = sys.rhs(&x, &up).unwrap();
                let fd = sys.rhs(&x, &dn).unwrap();
                for i in 0..n {
                    let num = (fu[i] - fd[i]) / (2.0 * h);
                    let a = j[i * m + k];
                    let err = (a - num).abs() / a.abs().max(num.abs()).max(1.0);
                    prop_assert!(err < 1e-6, "{} {} {}: {} vs {}", sys.name(), i, k, a, num);
                }
            }
            prop_assert_eq!(sys.rhs(&x, &u).unwrap(), sys.rhs(&x, &u).unwrap());
        }
    }

    #[test]
    fn distance_vanishes_exactly_on_the_set(seed in any::<u64>()) {
        let s = random_set(seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 3);
        for _ in 0..200 {
            let x = random_point(&mut rng, s.dim(), 2.0);
            prop_assert_eq!(s.distance(&x).unwrap() == 0.0, s.contains(&x).unwrap());
        }
        for p in s.sample_uniform(50, seed).unwrap().points {
            prop_assert!(s.contains(&p).unwrap());
            prop_assert_eq!(s.distance(&p).unwrap(), 0.0);
        }
    }

    #[test]
    fn grid_covers_the_set(seed in any::<u64>()) {
        let s = random_set(seed);
        let g = s.make_grid(0.08).unwrap();
        for p in &g.points {
            prop_assert!(s.contains(p).unwrap());
        }
        for x in s.sample_uniform(300, seed ^ 4).unwrap().points {
            let near = g.points.iter().map(|p| {
                p.iter().zip(&x).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt()
            }).fold(f64::INFINITY, f64::min);
            prop_assert!(near <= g.tau * (1.0 + 1e-9), "{} > {}", near, g.tau);
        }
    }

    #[test]
    fn sampling_is_seeded(seed in any::<u64>()) {
        let s = random_set(seed);
        let a = s.sample_uniform(20, seed).unwrap();
        let b = s.sample_uniform(20, seed).unwrap();
        prop_assert_eq!(&a, &b);
        if s.kind() != "point" {
            let c = s.sample_uniform(20, seed.wrapping_add(1)).unwrap();
            prop_assert_ne!(a.points, c.points);
        }
    }

    #[test]
    fn zero_field_decrease_terms(seed in any::<u64>()) {
        let inst = random_instance(seed);
        let n = inst.sys.state_dim();
        let zero = FnVectorField { dim: n, f: move |_: &[f64]| vec![0.0; n] };
        let cfg = RiskConfig { nondegeneracy: None, ..inst.cfg.clone() };
        let bt = barrier_terms(&inst.b, &zero, &inst.batches, &cfg).unwrap();
        let lt = lyapunov_terms(&inst.v, &zero, &inst.batches, &cfg).unwrap();
        let mean = |h: &MlpNet| inst.batches.x.iter().map(|x| h.eval(x).unwrap()).sum::<f64>() / inst.batches.x.len() as f64;
        prop_assert_eq!(bt.decrease, relu(mean(&inst.b)));
        prop_assert_eq!(lt.decrease, relu(mean(&inst.v)));
    }

    #[test]
    fn violated_witness_reproduces(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let sets = plane_sets();
        let mut b = MlpNet::zeros(&[2, 4, 1], Head::Scalar, true).unwrap();
        randomize_params(&mut b, 1.5, &mut rng);
        let mut v = MlpNet::zeros(&[2, 4, 1], Head::Quadratic, true).unwrap();
        randomize_params(&mut v, 1.5, &mut rng);
        let cfg = VerifyConfig { tau: 0.05, ..VerifyConfig::default() };
        let r = verify_all(&b, &v, &decay(2), &sets, &cfg).unwrap();
        for c in r.conditions.iter().filter(|c| c.status == Status::Violated) {
            let w = c.witness.as_ref().unwrap();
            let h: &dyn ScalarField = if c.name.starts_with('4') { &b } else { &v };
            let s = raw_slack(&c.name, h, &decay(2), w, &cfg).unwrap();
            if c.name == "7a-existence" {
                prop_assert!(s < 0.0);
            } else {
                prop_assert!(raw_fails(&c.name, s), "{} at {:?}: {}", c.name, w, s);
            }
        }
    }

    #[test]
    fn refining_tau_never_turns_verified_into_violated(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = rng.gen_range(0.1..0.5);
        let b = neural_cert::diffnet::FnField::new(
            2,
            move |x: &[f64]| x[0] * x[0] + x[1] * x[1] - c,
            |x: &[f64]| vec![2.0 * x[0], 2.0 * x[1]],
        );
        let sets = plane_sets();
        let coarse = verify_barrier(&b, &decay(2), &sets, &VerifyConfig { tau: 0.1, ..VerifyConfig::default() }).unwrap();
        let fine = verify_barrier(&b, &decay(2), &sets, &VerifyConfig { tau: 0.02, ..VerifyConfig::default() }).unwrap();
        for (a, f) in coarse.conditions.iter().zip(&fine.conditions) {
            if a.status == Status::Verified {
                prop_assert_ne!(f.status, Status::Violated);
            }
        }
    }

    #[test]
    fn trajectories_are_evenly_timed_and_judged_purely(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let k = vec![vec![rng.gen_range(-1.0..3.0), rng.gen_range(-3.0..0.0)]];
        let sys = SystemModel::pendulum();
        let p = Policy::Linear(LinearPolicy::from_rows(&k).unwrap());
        let field = closed_loop(&sys, &p).unwrap();
        let x0 = random_point(&mut rng, 2, 1.4);
        let tr = rk4_simulate(&field, &x0, 0.01, 5.0).unwrap();
        for (i, t) in tr.times.iter().enumerate() {
            prop_assert!((t - i as f64 * 0.01).abs() < 1e-12);
        }
        let sets = neural_cert::config::RunConfig::from_toml_str("system = \"pendulum\"").unwrap().sets;
        let v1 = judge(&tr, &sets.xu, &sets.xg, 0.1, 0.05);
        let v2 = judge(&tr, &sets.xu, &sets.xg, 0.1, 0.05);
        prop_assert_eq!(&v1, &v2);
        if let Some(t) = v1.first_violation_time {
            let k = tr.times.iter().position(|s| *s == t).unwrap();
            prop_assert!(sets.xu.contains(&tr.states[k]).unwrap());
            prop_assert!(!v1.safe);
        }
    }
}

#[test]
fn training_history_is_consistent() {
    let cfg = neural_cert::config::RunConfig::from_toml_str("system = \"pendulum\"").unwrap();
    let tc = TrainConfig {
        max_iters: 40,
        target_risk: 0.0,
        ..cfg.train.clone()
    };
    let st = TrainState::init(&cfg.system, &ModelSpec::for_dim(2), 3).unwrap();
    let out = train(st, &cfg.system, &cfg.sets, &tc).unwrap();
    assert_eq!(out.state.history.len(), 41);
    for r in &out.state.history {
        assert!(r.total >= 0.0 && r.l_b >= 0.0 && r.l_v >= 0.0);
        assert_eq!(r.total, r.l_b + r.l_v);
    }
}

#[test]
fn parallel_and_sequential_agree_bitwise() {
    let cfg = neural_cert::config::RunConfig::from_toml_str("system = \"cartpole\"").unwrap();
    let tc = TrainConfig {
        max_iters: 10,
        ..cfg.train.clone()
    };
    let run = |on: bool| {
        par::set_parallel(on);
        let st = TrainState::init(&cfg.system, &cfg.model, 5).unwrap();
        let out = train(st, &cfg.system, &cfg.sets, &tc).unwrap();
        let vcfg = VerifyConfig {
            tau: 0.3,
            ..VerifyConfig::default()
        };
        let field = closed_loop(&cfg.system, &out.state.policy).unwrap();
        let rep = verify_all(&out.state.barrier, &out.state.lyapunov, &field, &cfg.sets, &vcfg).unwrap();
        (out.state.history.clone(), out.state.barrier.params(), rep)
    };
    let a = run(false);
    let b = run(true);
    par::set_parallel(true);
    assert_eq!(a.0, b.0);
    assert_eq!(a.1, b.1);
    assert_eq!(a.2, b.2);
}

/// A barrier that verifies for `x' = -x` keeps every rollout from the
/// initial set safe, and its decrease quantity stays non-positive along them.
#[test]
fn verified_barrier_implies_safe_rollouts() {
    let sys = SystemModel::linear(
        "decay",
        &[vec![0.0, 0.0], vec![0.0, 0.0]],
        &[vec![1.0, 0.0], vec![0.0, 1.0]],
    )
    .unwrap();
    let policy = Policy::Linear(LinearPolicy::from_rows(&[vec![-1.0, 0.0], vec![0.0, -1.0]]).unwrap());
    let field = closed_loop(&sys, &policy).unwrap();
    let sets: ProblemSets = plane_sets();
    let b = neural_cert::diffnet::FnField::new(
        2,
        |x: &[f64]| x[0] * x[0] + x[1] * x[1] - 0.3,
        |x: &[f64]| vec![2.0 * x[0], 2.0 * x[1]],
    );
    let r = verify_barrier(
        &b,
        &field,
        &sets,
        &VerifyConfig {
            tau: 0.01,
            ..VerifyConfig::default()
        },
    )
    .unwrap();
    assert_eq!(r.status, Status::Verified, "{}", r.summary());
    let sim = SimConfig {
        n_starts: 100,
        horizon: 10.0,
        ..SimConfig::default()
    };
    let ro = batch_rollouts(&policy, &sys, &sets.x0, &sets.xu, &sets.xg, 1, &sim).unwrap();
    assert_eq!(ro.summary.fraction_safe, 1.0);
    for (tr, _) in &ro.runs {
        for x in tr.states.iter().filter(|x| sets.x.contains(x).unwrap()) {
            let (val, g) = b.value_and_grad(x).unwrap();
            let f = field.eval(x).unwrap();
            let dec = g[0] * f[0] + g[1] * f[1] + val;
            assert!(dec <= 1e-9, "{dec} at {x:?}");
        }
    }
}
