use serde::{Deserialize, Serialize};

use crate::diffnet::{dot, MlpNet, Policy, ScalarField};
use crate::error::{Error, Result};
use crate::par;
use crate::systems::{closed_loop, ClosedLoop, SystemModel, VectorField};

/// How per-sample penalties are folded into one term.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Aggregation {
    /// `relu(mean q)`
    #[default]
    MeanThenRelu,
    /// `mean relu(q)`
    PerSample,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchSizes {
    pub x: usize,
    pub x0: usize,
    pub xu: usize,
    pub xg: usize,
}

impl Default for BatchSizes {
    fn default() -> Self {
        BatchSizes {
            x: 500,
            x0: 500,
            xu: 500,
            xg: 500,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RiskConfig {
    /// Margin added to the unsafe-set term.
    pub epsilon_margin: f64,
    pub batch_sizes: BatchSizes,
    /// Iterations between fresh batches; 0 keeps the first draw.
    pub resample_every: u64,
    pub aggregation: Aggregation,
    /// `relu(delta - mean V)` over state samples outside the goal set.
    /// Counters the all-zero minimizer of the Lyapunov risk. Off when `None`.
    pub nondegeneracy: Option<f64>,
}

impl Default for RiskConfig {
    fn default() -> Self {
        RiskConfig {
            epsilon_margin: 0.01,
            batch_sizes: BatchSizes::default(),
            resample_every: 0,
            aggregation: Aggregation::MeanThenRelu,
            nondegeneracy: None,
        }
    }
}

impl RiskConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon_margin > 0.0) || !self.epsilon_margin.is_finite() {
            return Err(Error::Config("epsilon_margin must be positive".into()));
        }
        let b = &self.batch_sizes;
        if b.x == 0 || b.x0 == 0 || b.xu == 0 || b.xg == 0 {
            return Err(Error::Config("batch sizes must be >= 1".into()));
        }
        if let Some(d) = self.nondegeneracy {
            if !(d > 0.0) || !d.is_finite() {
                return Err(Error::Config("nondegeneracy delta must be positive".into()));
            }
        }
        Ok(())
    }
}

/// One draw of every sample family used by the risks.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Batches {
    /// State-space samples.
    pub x: Vec<Vec<f64>>,
    pub x0: Vec<Vec<f64>>,
    pub xu: Vec<Vec<f64>>,
    /// Samples of the goal neighbourhood used by the Lyapunov goal term.
    pub xg_bar: Vec<Vec<f64>>,
    /// State samples outside the goal set, for the optional non-degeneracy term.
    pub x_outside_goal: Vec<Vec<f64>>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct BarrierTerms {
    pub init: f64,
    pub unsafe_: f64,
    pub decrease: f64,
}

impl BarrierTerms {
    pub fn total(&self) -> f64 {
        self.init + self.unsafe_ + self.decrease
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LyapunovTerms {
    pub goal: f64,
    pub decrease: f64,
    pub nondegeneracy: f64,
}

impl LyapunovTerms {
    pub fn total(&self) -> f64 {
        self.goal + self.decrease + self.nondegeneracy
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct RiskValue {
    pub barrier: BarrierTerms,
    pub lyapunov: LyapunovTerms,
}

impl RiskValue {
    pub fn l_b(&self) -> f64 {
        self.barrier.total()
    }

    pub fn l_v(&self) -> f64 {
        self.lyapunov.total()
    }

    pub fn total(&self) -> f64 {
        self.l_b() + self.l_v()
    }
}

/// Parameter gradients of the total risk, one block per trainable object.
#[derive(Clone, Debug, PartialEq)]
pub struct RiskGrad {
    pub barrier: Vec<f64>,
    pub lyapunov: Vec<f64>,
    pub policy: Vec<f64>,
}

fn relu(v: f64) -> f64 {
    if v > 0.0 {
        v
    } else {
        0.0
    }
}

fn finite(index: usize, v: f64, what: &str) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::Numerical {
            index,
            what: what.to_string(),
        })
    }
}

fn collect<T: Send>(n: usize, f: impl Fn(usize) -> Result<T> + Sync + Send) -> Result<Vec<T>> {
    par::map_indexed(n, f).into_iter().collect()
}

fn values(h: &dyn ScalarField, xs: &[Vec<f64>]) -> Result<Vec<f64>> {
    collect(xs.len(), |i| finite(i, h.value(&xs[i])?, "certificate value"))
}

/// `grad h(x) . F(x) + h(x)` per sample.
fn decrease(h: &dyn ScalarField, field: &dyn VectorField, xs: &[Vec<f64>]) -> Result<Vec<f64>> {
    collect(xs.len(), |i| {
        let x = &xs[i];
        let f = field.eval(x)?;
        if f.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical {
                index: i,
                what: "closed-loop dynamics".into(),
            });
        }
        let (v, g) = h.value_and_grad(x)?;
        finite(i, dot(&g, &f) + v, "decrease condition")
    })
}

fn aggregate(q: &[f64], agg: Aggregation) -> f64 {
    let n = q.len() as f64;
    match agg {
        Aggregation::MeanThenRelu => relu(q.iter().sum::<f64>() / n),
        Aggregation::PerSample => q.iter().map(|&v| relu(v)).sum::<f64>() / n,
    }
}

/// Derivative of [`aggregate`] with respect to each `q_i`.
fn weights(q: &[f64], agg: Aggregation) -> Vec<f64> {
    let n = q.len() as f64;
    match agg {
        Aggregation::MeanThenRelu => {
            let w = if q.iter().sum::<f64>() / n > 0.0 { 1.0 / n } else { 0.0 };
            vec![w; q.len()]
        }
        Aggregation::PerSample => q.iter().map(|&v| if v > 0.0 { 1.0 / n } else { 0.0 }).collect(),
    }
}

fn nonempty(name: &str, xs: &[Vec<f64>]) -> Result<()> {
    if xs.is_empty() {
        return Err(Error::Precondition(format!("{name} batch is empty")));
    }
    Ok(())
}

/// Terms of the empirical barrier risk:
/// `relu(mean_X0 B) + relu(mean_Xu (-B) + eps) + relu(mean_X (grad B . F + B))`.
pub fn barrier_terms(
    b: &dyn ScalarField,
    field: &dyn VectorField,
    batches: &Batches,
    cfg: &RiskConfig,
) -> Result<BarrierTerms> {
    nonempty("X", &batches.x)?;
    nonempty("X0", &batches.x0)?;
    nonempty("Xu", &batches.xu)?;
    let eps = cfg.epsilon_margin;
    let q0 = values(b, &batches.x0)?;
    let qu: Vec<f64> = values(b, &batches.xu)?.into_iter().map(|v| -v + eps).collect();
    let qd = decrease(b, field, &batches.x)?;
    Ok(BarrierTerms {
        init: aggregate(&q0, cfg.aggregation),
        unsafe_: aggregate(&qu, cfg.aggregation),
        decrease: aggregate(&qd, cfg.aggregation),
    })
}

pub fn barrier_risk(b: &dyn ScalarField, field: &dyn VectorField, batches: &Batches, cfg: &RiskConfig) -> Result<f64> {
    Ok(barrier_terms(b, field, batches, cfg)?.total())
}

/// Terms of the empirical Lyapunov risk:
/// `relu(mean_Xg_bar V) + relu(mean_X (grad V . F + V))`, plus the optional
/// non-degeneracy term.
pub fn lyapunov_terms(
    v: &dyn ScalarField,
    field: &dyn VectorField,
    batches: &Batches,
    cfg: &RiskConfig,
) -> Result<LyapunovTerms> {
    nonempty("X", &batches.x)?;
    nonempty("Xg_bar", &batches.xg_bar)?;
    let qg = values(v, &batches.xg_bar)?;
    let qd = decrease(v, field, &batches.x)?;
    let nondegeneracy = match cfg.nondegeneracy {
        Some(delta) if !batches.x_outside_goal.is_empty() => {
            let vals = values(v, &batches.x_outside_goal)?;
            relu(delta - vals.iter().sum::<f64>() / vals.len() as f64)
        }
        _ => 0.0,
    };
    Ok(LyapunovTerms {
        goal: aggregate(&qg, cfg.aggregation),
        decrease: aggregate(&qd, cfg.aggregation),
        nondegeneracy,
    })
}

pub fn lyapunov_risk(v: &dyn ScalarField, field: &dyn VectorField, batches: &Batches, cfg: &RiskConfig) -> Result<f64> {
    Ok(lyapunov_terms(v, field, batches, cfg)?.total())
}

/// Both risks under one closed loop.
pub fn total_risk(
    b: &dyn ScalarField,
    v: &dyn ScalarField,
    field: &dyn VectorField,
    batches: &Batches,
    cfg: &RiskConfig,
) -> Result<RiskValue> {
    Ok(RiskValue {
        barrier: barrier_terms(b, field, batches, cfg)?,
        lyapunov: lyapunov_terms(v, field, batches, cfg)?,
    })
}

struct Acc {
    net: Vec<f64>,
    policy: Vec<f64>,
}

fn add(mut a: Acc, b: Acc) -> Acc {
    for (x, y) in a.net.iter_mut().zip(&b.net) {
        *x += y;
    }
    for (x, y) in a.policy.iter_mut().zip(&b.policy) {
        *x += y;
    }
    a
}

/// `sum_i w_i * h(x_i)` differentiated with respect to the network parameters.
fn value_grad(net: &MlpNet, xs: &[Vec<f64>], w: &[f64], scale: f64) -> Result<Vec<f64>> {
    let p = net.param_count();
    let zero_dir = vec![0.0; net.input_dim()];
    let acc = par::try_chunked_fold(
        xs.len(),
        par::DEFAULT_CHUNK,
        || vec![0.0; p],
        |g, i| {
            if w[i] != 0.0 {
                net.accumulate_param_grad(&xs[i], &zero_dir, scale * w[i], 0.0, g)?;
            }
            Ok::<_, Error>(())
        },
        |mut a, b| {
            for (x, y) in a.iter_mut().zip(&b) {
                *x += y;
            }
            a
        },
    )?;
    Ok(acc)
}

/// `sum_i w_i * (grad h . F + h)(x_i)` differentiated with respect to the
/// network and the policy.
fn decrease_grad(net: &MlpNet, cl: &ClosedLoop<'_>, xs: &[Vec<f64>], w: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    let p = net.param_count();
    let q = cl.policy.param_count();
    let m = cl.sys.control_dim();
    let acc = par::try_chunked_fold(
        xs.len(),
        par::DEFAULT_CHUNK,
        || Acc {
            net: vec![0.0; p],
            policy: vec![0.0; q],
        },
        |acc, i| {
            if w[i] == 0.0 {
                return Ok::<_, Error>(());
            }
            let x = &xs[i];
            let (f, u) = cl.eval_with_control(x)?;
            let adj_f = net.accumulate_param_grad(x, &f, w[i], w[i], &mut acc.net)?;
            let ju = cl.sys.jac_u(x, &u)?;
            let upstream: Vec<f64> = (0..m)
                .map(|j| adj_f.iter().enumerate().map(|(r, a)| a * ju[r * m + j]).sum())
                .collect();
            cl.policy.accumulate_param_grad(x, &upstream, &mut acc.policy)?;
            Ok(())
        },
        add,
    )?;
    Ok((acc.net, acc.policy))
}

/// Total risk and its exact parameter gradient for the trainable triple.
pub fn risk_and_grad(
    barrier: &MlpNet,
    lyapunov: &MlpNet,
    policy: &Policy,
    sys: &SystemModel,
    batches: &Batches,
    cfg: &RiskConfig,
) -> Result<(RiskValue, RiskGrad)> {
    let cl = closed_loop(sys, policy)?;
    nonempty("X", &batches.x)?;
    nonempty("X0", &batches.x0)?;
    nonempty("Xu", &batches.xu)?;
    nonempty("Xg_bar", &batches.xg_bar)?;
    let agg = cfg.aggregation;
    let eps = cfg.epsilon_margin;

    let q0 = values(barrier, &batches.x0)?;
    let qu: Vec<f64> = values(barrier, &batches.xu)?.into_iter().map(|v| -v + eps).collect();
    let qbd = decrease(barrier, &cl, &batches.x)?;
    let qg = values(lyapunov, &batches.xg_bar)?;
    let qvd = decrease(lyapunov, &cl, &batches.x)?;

    let mut grad_b = value_grad(barrier, &batches.x0, &weights(&q0, agg), 1.0)?;
    let gu = value_grad(barrier, &batches.xu, &weights(&qu, agg), -1.0)?;
    let (gbd, mut grad_p) = decrease_grad(barrier, &cl, &batches.x, &weights(&qbd, agg))?;
    for ((a, b), c) in grad_b.iter_mut().zip(&gu).zip(&gbd) {
        *a += b + c;
    }

    let mut grad_v = value_grad(lyapunov, &batches.xg_bar, &weights(&qg, agg), 1.0)?;
    let (gvd, gp) = decrease_grad(lyapunov, &cl, &batches.x, &weights(&qvd, agg))?;
    for (a, b) in grad_v.iter_mut().zip(&gvd) {
        *a += b;
    }
    for (a, b) in grad_p.iter_mut().zip(&gp) {
        *a += b;
    }

    let mut nondegeneracy = 0.0;
    if let Some(delta) = cfg.nondegeneracy {
        let xs = &batches.x_outside_goal;
        if !xs.is_empty() {
            let vals = values(lyapunov, xs)?;
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            nondegeneracy = relu(delta - mean);
            if nondegeneracy > 0.0 {
                let w = vec![1.0 / xs.len() as f64; xs.len()];
                let g = value_grad(lyapunov, xs, &w, -1.0)?;
                for (a, b) in grad_v.iter_mut().zip(&g) {
                    *a += b;
                }
            }
        }
    }

    let value = RiskValue {
        barrier: BarrierTerms {
            init: aggregate(&q0, agg),
            unsafe_: aggregate(&qu, agg),
            decrease: aggregate(&qbd, agg),
        },
        lyapunov: LyapunovTerms {
            goal: aggregate(&qg, agg),
            decrease: aggregate(&qvd, agg),
            nondegeneracy,
        },
    };
    Ok((
        value,
        RiskGrad {
            barrier: grad_b,
            lyapunov: grad_v,
            policy: grad_p,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffnet::{FnField, Head, LinearPolicy};
    use crate::systems::FnVectorField;

    fn tiny_batches() -> Batches {
        Batches {
            x: vec![vec![0.5, -1.0], vec![2.0, 3.0]],
            x0: vec![vec![0.1, 0.2], vec![-1.0, 0.5]],
            xu: vec![vec![2.6, 0.0], vec![0.0, -2.9]],
            xg_bar: vec![vec![0.01, -0.02], vec![0.0, 0.05]],
            x_outside_goal: vec![],
        }
    }

    #[test]
    fn zero_barrier_costs_exactly_epsilon() {
        let b = MlpNet::zeros(&[2, 16, 16, 1], Head::Scalar, true).unwrap();
        let sys = SystemModel::pendulum();
        let pol = Policy::Linear(LinearPolicy::new(1, 2, vec![2.0120, -2.1343]).unwrap());
        let cl = closed_loop(&sys, &pol).unwrap();
        let r = barrier_risk(&b, &cl, &tiny_batches(), &RiskConfig::default()).unwrap();
        assert_eq!(r, 0.01);
    }

    #[test]
    fn one_dimensional_lyapunov_example() {
        let v = FnField::new(1, |x: &[f64]| x[0] * x[0], |x: &[f64]| vec![2.0 * x[0]]);
        let f = FnVectorField {
            dim: 1,
            f: |x: &[f64]| vec![-x[0]],
        };
        let batches = Batches {
            x: vec![vec![1.0], vec![2.0]],
            xg_bar: vec![vec![0.0]],
            ..Batches::default()
        };
        let t = lyapunov_terms(&v, &f, &batches, &RiskConfig::default()).unwrap();
        assert_eq!(t, LyapunovTerms::default());
    }

    #[test]
    fn aggregation_modes_differ_only_in_order_of_relu() {
        let q = [-3.0, 1.0];
        assert_eq!(aggregate(&q, Aggregation::MeanThenRelu), 0.0);
        assert_eq!(aggregate(&q, Aggregation::PerSample), 0.5);
        assert_eq!(weights(&q, Aggregation::PerSample), vec![0.0, 0.5]);
    }

    #[test]
    fn non_finite_dynamics_report_sample_index() {
        let b = MlpNet::zeros(&[1, 2, 1], Head::Scalar, true).unwrap();
        let f = FnVectorField {
            dim: 1,
            f: |x: &[f64]| vec![if x[0] > 1.0 { f64::NAN } else { 0.0 }],
        };
        let batches = Batches {
            x: vec![vec![0.0], vec![0.5], vec![3.0]],
            x0: vec![vec![0.0]],
            xu: vec![vec![0.0]],
            ..Batches::default()
        };
        match barrier_risk(&b, &f, &batches, &RiskConfig::default()) {
            Err(Error::Numerical { index, .. }) => assert_eq!(index, 2),
            other => panic!("expected numerical error, got {other:?}"),
        }
    }

    #[test]
    fn empty_batch_rejected() {
        let b = MlpNet::zeros(&[1, 2, 1], Head::Scalar, true).unwrap();
        let f = FnVectorField {
            dim: 1,
            f: |_: &[f64]| vec![0.0],
        };
        assert!(barrier_risk(&b, &f, &Batches::default(), &RiskConfig::default()).is_err());
    }
}
