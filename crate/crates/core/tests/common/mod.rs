#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use neural_cert::certify::{risk_and_grad, total_risk, BatchSizes, Batches, ProblemSets, RiskConfig};
use neural_cert::diffnet::{Head, LinearPolicy, MlpNet, ParamVector, Policy, ScalarField};
use neural_cert::sets::StateSet;
use neural_cert::systems::{closed_loop, SystemModel, VectorField};

pub fn relu(v: f64) -> f64 {
    v.max(0.0)
}

/// Sets scaled for a generic `n`-dimensional test problem.
pub fn generic_sets(n: usize) -> ProblemSets {
    let o = vec![0.0; n];
    ProblemSets {
        x: StateSet::boxed(vec![-1.5; n], vec![1.5; n]).unwrap(),
        x0: StateSet::ball(o.clone(), 0.5).unwrap(),
        xu: StateSet::annulus(o.clone(), 1.0, 1.4).unwrap(),
        xg: StateSet::point(o.clone()).unwrap(),
        xg_bar: StateSet::ball(o, 0.1).unwrap(),
    }
}

fn random_matrix<R: Rng>(rows: usize, cols: usize, rng: &mut R) -> Vec<Vec<f64>> {
    (0..rows)
        .map(|_| (0..cols).map(|_| rng.gen_range(-1.0..1.0)).collect())
        .collect()
}

pub fn randomize_params<R: Rng>(net: &mut MlpNet, scale: f64, rng: &mut R) {
    let p = (0..net.param_count()).map(|_| rng.gen_range(-scale..scale)).collect();
    net.set_params(&ParamVector(p)).unwrap();
}

/// One random small problem: system, networks, policy and batches.
pub struct Instance {
    pub sys: SystemModel,
    pub b: MlpNet,
    pub v: MlpNet,
    pub policy: Policy,
    pub batches: Batches,
    pub cfg: RiskConfig,
}

pub fn random_instance(seed: u64) -> Instance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.gen_range(1..=4usize);
    let sys = match (n, rng.gen_range(0..3)) {
        (2, 0) => SystemModel::pendulum(),
        (4, 0) => SystemModel::cartpole(),
        _ => {
            let m = rng.gen_range(1..=2usize);
            SystemModel::linear("random", &random_matrix(n, n, &mut rng), &random_matrix(n, m, &mut rng)).unwrap()
        }
    };
    let m = sys.control_dim();
    let hidden = |rng: &mut ChaCha8Rng| -> Vec<usize> {
        let depth = rng.gen_range(1..=2);
        (0..depth).map(|_| rng.gen_range(1..=8)).collect()
    };
    let mut dims_b = vec![n];
    dims_b.extend(hidden(&mut rng));
    dims_b.push(1);
    let mut dims_v = vec![n];
    dims_v.extend(hidden(&mut rng));
    dims_v.push(1);
    let mut b = MlpNet::zeros(&dims_b, Head::Scalar, true).unwrap();
    let v_bias = rng.gen_bool(0.5);
    let mut v = MlpNet::zeros(&dims_v, Head::Quadratic, v_bias).unwrap();
    randomize_params(&mut b, 1.0, &mut rng);
    randomize_params(&mut v, 1.0, &mut rng);
    let policy = if rng.gen_bool(0.5) {
        let rows = random_matrix(m, n, &mut rng);
        Policy::Linear(LinearPolicy::from_rows(&rows).unwrap())
    } else {
        let mut dims = vec![n];
        dims.extend(hidden(&mut rng));
        dims.push(m);
        let mut net = MlpNet::zeros(&dims, Head::Scalar, true).unwrap();
        randomize_params(&mut net, 0.7, &mut rng);
        Policy::Mlp(net)
    };
    let cfg = RiskConfig {
        batch_sizes: BatchSizes {
            x: 8,
            x0: 8,
            xu: 8,
            xg: 8,
        },
        nondegeneracy: if rng.gen_bool(0.5) { Some(0.01) } else { None },
        ..RiskConfig::default()
    };
    let batches = generic_sets(n).draw(&cfg, &mut rng).unwrap();
    Instance {
        sys,
        b,
        v,
        policy,
        batches,
        cfg,
    }
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = xs.collect();
    v.iter().sum::<f64>() / v.len() as f64
}

/// Pre-activation arguments of every relu in the mean-then-relu risk,
/// computed directly from the definitions.
pub fn relu_arguments(inst: &Instance) -> Vec<f64> {
    let field = closed_loop(&inst.sys, &inst.policy).unwrap();
    let bt = &inst.batches;
    let eps = inst.cfg.epsilon_margin;
    let lie = |h: &MlpNet, x: &[f64]| {
        let (val, g) = h.value_and_grad(x).unwrap();
        let f = field.eval(x).unwrap();
        g.iter().zip(&f).map(|(a, b)| a * b).sum::<f64>() + val
    };
    let mut args = vec![
        mean(bt.x0.iter().map(|x| inst.b.eval(x).unwrap())),
        mean(bt.xu.iter().map(|x| -inst.b.eval(x).unwrap() + eps)),
        mean(bt.x.iter().map(|x| lie(&inst.b, x))),
        mean(bt.xg_bar.iter().map(|x| inst.v.eval(x).unwrap())),
        mean(bt.x.iter().map(|x| lie(&inst.v, x))),
    ];
    if let Some(d) = inst.cfg.nondegeneracy {
        if !bt.x_outside_goal.is_empty() {
            args.push(d - mean(bt.x_outside_goal.iter().map(|x| inst.v.eval(x).unwrap())));
        }
    }
    args
}

pub fn risk_total(inst: &Instance, b: &MlpNet, v: &MlpNet, p: &Policy) -> f64 {
    let field = closed_loop(&inst.sys, p).unwrap();
    total_risk(b, v, &field, &inst.batches, &inst.cfg).unwrap().total()
}

pub const FD_STEP: f64 = 1e-5;
pub const REL_FLOOR: f64 = 1e-6;
/// Instances whose relu arguments sit this close to zero are skipped:
/// a central difference straddling the kink is not a derivative.
pub const KINK_MARGIN: f64 = 1e-3;

pub struct GradCheck {
    pub max_rel: f64,
    pub checked: usize,
    pub skipped: usize,
    pub components: usize,
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_FLOOR)
}

/// Exact parameter gradient of the total risk against central differences
/// over every parameter, on `count` random instances.
pub fn gradient_suite(count: usize, seed: u64) -> GradCheck {
    let mut out = GradCheck {
        max_rel: 0.0,
        checked: 0,
        skipped: 0,
        components: 0,
    };
    let mut k = 0u64;
    while out.checked < count {
        let inst = random_instance(seed.wrapping_mul(1_000_003).wrapping_add(k));
        k += 1;
        if relu_arguments(&inst).iter().any(|a| a.abs() < KINK_MARGIN) {
            out.skipped += 1;
            continue;
        }
        let (_, grad) = risk_and_grad(&inst.b, &inst.v, &inst.policy, &inst.sys, &inst.batches, &inst.cfg).unwrap();
        let h = FD_STEP;

        let base = inst.b.params();
        for (j, g) in grad.barrier.iter().enumerate() {
            let mut b = inst.b.clone();
            let mut p = base.clone();
            p.0[j] = base.0[j] + h;
            b.set_params(&p).unwrap();
            let up = risk_total(&inst, &b, &inst.v, &inst.policy);
            p.0[j] = base.0[j] - h;
            b.set_params(&p).unwrap();
            let dn = risk_total(&inst, &b, &inst.v, &inst.policy);
            out.max_rel = out.max_rel.max(rel_err(*g, (up - dn) / (2.0 * h)));
            out.components += 1;
        }
        let base = inst.v.params();
        for (j, g) in grad.lyapunov.iter().enumerate() {
            let mut v = inst.v.clone();
            let mut p = base.clone();
            p.0[j] = base.0[j] + h;
            v.set_params(&p).unwrap();
            let up = risk_total(&inst, &inst.b, &v, &inst.policy);
            p.0[j] = base.0[j] - h;
            v.set_params(&p).unwrap();
            let dn = risk_total(&inst, &inst.b, &v, &inst.policy);
            out.max_rel = out.max_rel.max(rel_err(*g, (up - dn) / (2.0 * h)));
            out.components += 1;
        }
        let base = inst.policy.params();
        for (j, g) in grad.policy.iter().enumerate() {
            let mut pol = inst.policy.clone();
            let mut p = base.clone();
            p.0[j] = base.0[j] + h;
            pol.set_params(&p).unwrap();
            let up = risk_total(&inst, &inst.b, &inst.v, &pol);
            p.0[j] = base.0[j] - h;
            pol.set_params(&p).unwrap();
            let dn = risk_total(&inst, &inst.b, &inst.v, &pol);
            out.max_rel = out.max_rel.max(rel_err(*g, (up - dn) / (2.0 * h)));
            out.components += 1;
        }
        out.checked += 1;
    }
    out
}

/// `B(x) = x^2 - 1` on the line.
pub fn parabola_barrier() -> impl ScalarField {
    neural_cert::diffnet::FnField::new(1, |x: &[f64]| x[0] * x[0] - 1.0, |x: &[f64]| vec![2.0 * x[0]])
}

/// `V(x) = |x|^2`.
pub fn squared_norm(n: usize) -> impl ScalarField {
    neural_cert::diffnet::FnField::new(
        n,
        |x: &[f64]| x.iter().map(|v| v * v).sum(),
        |x: &[f64]| x.iter().map(|v| 2.0 * v).collect(),
    )
}

/// Problem sets for the one-dimensional parabola fixture under `x' = -x`.
pub fn line_sets() -> ProblemSets {
    ProblemSets {
        x: StateSet::boxed(vec![-2.0], vec![2.0]).unwrap(),
        x0: StateSet::boxed(vec![-0.5], vec![0.5]).unwrap(),
        xu: StateSet::boxed(vec![1.5], vec![2.0]).unwrap(),
        xg: StateSet::point(vec![0.0]).unwrap(),
        xg_bar: StateSet::ball(vec![0.0], 0.1).unwrap(),
    }
}

/// Two-dimensional problem for the squared-norm fixture under `x' = -x`.
pub fn plane_sets() -> ProblemSets {
    ProblemSets {
        x: StateSet::boxed(vec![-1.0, -1.0], vec![1.0, 1.0]).unwrap(),
        x0: StateSet::ball(vec![0.0, 0.0], 0.3).unwrap(),
        xu: StateSet::annulus(vec![0.0, 0.0], 0.6, 0.9).unwrap(),
        xg: StateSet::ball(vec![0.0, 0.0], 0.2).unwrap(),
        xg_bar: StateSet::ball(vec![0.0, 0.0], 0.1).unwrap(),
    }
}

pub fn decay(n: usize) -> neural_cert::systems::FnVectorField<impl Fn(&[f64]) -> Vec<f64> + Sync> {
    neural_cert::systems::FnVectorField {
        dim: n,
        f: |x: &[f64]| x.iter().map(|v| -v).collect(),
    }
}

pub fn zero_field(n: usize) -> impl ScalarField {
    neural_cert::diffnet::FnField::new(n, |_: &[f64]| 0.0, move |_: &[f64]| vec![0.0; n])
}

fn probe_set<'a>(name: &str, sets: &'a ProblemSets) -> Option<&'a StateSet> {
    match name {
        "4a" => Some(&sets.x0),
        "4b" => Some(&sets.xu),
        "4c" | "7b" | "7a-containment" => Some(&sets.x),
        _ => None,
    }
}

/// Raw inequality of a condition fails at slack `s`.
pub fn raw_fails(name: &str, s: f64) -> bool {
    match name {
        "4b" | "7a-containment" => s <= 0.0,
        _ => s < 0.0,
    }
}

/// Random points of the set each `verified` condition speaks about, and how
/// many of them break the raw inequality. Existence is not a pointwise
/// claim and is not probed.
pub fn soundness_probe(
    report: &neural_cert::verify::CertReport,
    h: &dyn ScalarField,
    field: &dyn VectorField,
    sets: &ProblemSets,
    samples: usize,
    seed: u64,
    cfg: &neural_cert::verify::VerifyConfig,
) -> Vec<(String, usize, usize)> {
    use neural_cert::verify::{raw_slack, Status};
    let mut out = Vec::new();
    for c in report.conditions.iter().filter(|c| c.status == Status::Verified) {
        let Some(set) = probe_set(&c.name, sets) else { continue };
        let pts = set.sample_uniform(samples, seed).unwrap().points;
        let mut n = 0;
        let mut bad = 0;
        for x in &pts {
            if c.name == "7a-containment" && sets.xg.contains(x).unwrap() {
                continue;
            }
            n += 1;
            if raw_fails(&c.name, raw_slack(&c.name, h, field, x, cfg).unwrap()) {
                bad += 1;
            }
        }
        out.push((c.name.clone(), n, bad));
    }
    out
}

/// `x' = -x` from 1 to `t = 1`: error against `e^-1`.
pub fn decay_error(dt: f64) -> f64 {
    let tr = neural_cert::sim::rk4_simulate(&decay(1), &[1.0], dt, 1.0).unwrap();
    (tr.final_state()[0] - (-1.0f64).exp()).abs()
}

/// Relative energy drift of the unit harmonic oscillator over one period.
pub fn oscillator_drift(dt: f64) -> f64 {
    let f = neural_cert::systems::FnVectorField {
        dim: 2,
        f: |x: &[f64]| vec![x[1], -x[0]],
    };
    let tr = neural_cert::sim::rk4_simulate(&f, &[1.0, 0.0], dt, 2.0 * std::f64::consts::PI).unwrap();
    let e = |x: &[f64]| 0.5 * (x[0] * x[0] + x[1] * x[1]);
    tr.states.iter().map(|x| (e(x) - 0.5).abs() / 0.5).fold(0.0, f64::max)
}

/// Barrier and Lyapunov risks of all-zero networks, and the minimum of
/// every risk term over `count` random instances.
pub fn risk_semantics(count: u64) -> (f64, f64, f64, f64) {
    use neural_cert::certify::{barrier_risk, barrier_terms, lyapunov_risk, lyapunov_terms};
    let inst = random_instance(11);
    let n = inst.sys.state_dim();
    let field = closed_loop(&inst.sys, &inst.policy).unwrap();
    let zb = MlpNet::zeros(inst.b.layer_dims(), Head::Scalar, true).unwrap();
    let zv = MlpNet::zeros(inst.v.layer_dims(), Head::Quadratic, inst.v.has_bias()).unwrap();
    let cfg = RiskConfig {
        nondegeneracy: None,
        ..inst.cfg.clone()
    };
    let b0 = barrier_risk(&zb, &field, &inst.batches, &cfg).unwrap();
    let v0 = lyapunov_risk(&zv, &field, &inst.batches, &cfg).unwrap();
    assert_eq!(zb.input_dim(), n);
    let mut min_term = f64::INFINITY;
    let mut min_total = f64::INFINITY;
    for s in 0..count {
        let inst = random_instance(1_000 + s);
        let field = closed_loop(&inst.sys, &inst.policy).unwrap();
        let bt = barrier_terms(&inst.b, &field, &inst.batches, &inst.cfg).unwrap();
        let lt = lyapunov_terms(&inst.v, &field, &inst.batches, &inst.cfg).unwrap();
        for t in [bt.init, bt.unsafe_, bt.decrease, lt.goal, lt.decrease, lt.nondegeneracy] {
            min_term = min_term.min(t);
        }
        min_total = min_total.min(bt.total() + lt.total());
    }
    (b0, v0, min_term, min_total)
}
