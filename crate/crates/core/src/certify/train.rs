use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::optim::{Moments, OptimizerConfig};
use super::risk::{risk_and_grad, Batches, RiskConfig, RiskValue};
use crate::diffnet::{Head, LinearPolicy, MlpNet, ParamVector, Policy};
use crate::error::{Error, Result};
use crate::sets::StateSet;
use crate::systems::SystemModel;

/// Risks above this count as divergence.
pub const DIVERGENCE_LIMIT: f64 = 1e6;

/// The five sets a certificate pair is trained and checked against.
#[derive(Clone, Debug, PartialEq)]
pub struct ProblemSets {
    pub x: StateSet,
    pub x0: StateSet,
    pub xu: StateSet,
    pub xg: StateSet,
    pub xg_bar: StateSet,
}

impl ProblemSets {
    pub fn dim(&self) -> usize {
        self.x.dim()
    }

    pub fn check_dim(&self, n: usize) -> Result<()> {
        for (name, s) in self.named() {
            if s.dim() != n {
                return Err(Error::Config(format!(
                    "set `{name}` has dimension {}, system has {n}",
                    s.dim()
                )));
            }
        }
        Ok(())
    }

    pub fn named(&self) -> [(&'static str, &StateSet); 5] {
        [
            ("state", &self.x),
            ("initial", &self.x0),
            ("unsafe", &self.xu),
            ("goal", &self.xg),
            ("goal_bar", &self.xg_bar),
        ]
    }

    pub fn draw<R: Rng + ?Sized>(&self, cfg: &RiskConfig, rng: &mut R) -> Result<Batches> {
        let b = &cfg.batch_sizes;
        let x = self.x.sample_with(b.x, rng)?;
        let x0 = self.x0.sample_with(b.x0, rng)?;
        let xu = self.xu.sample_with(b.xu, rng)?;
        let xg_bar = self.xg_bar.sample_with(b.xg, rng)?;
        let x_outside_goal = x.iter().filter(|p| !self.xg.contains_unchecked(p)).cloned().collect();
        Ok(Batches {
            x,
            x0,
            xu,
            xg_bar,
            x_outside_goal,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct RiskRecord {
    pub iteration: u64,
    pub l_b: f64,
    pub l_v: f64,
    pub total: f64,
}

impl RiskRecord {
    fn new(iteration: u64, r: &RiskValue) -> Self {
        let (l_b, l_v) = (r.l_b(), r.l_v());
        RiskRecord {
            iteration,
            l_b,
            l_v,
            total: l_b + l_v,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PolicyInit {
    /// Entries uniform in `[-1/sqrt(n), 1/sqrt(n)]`.
    Random,
    Zeros,
    /// Explicit gain rows.
    Gains(Vec<Vec<f64>>),
}

/// Shapes and initialization of the trainable triple.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelSpec {
    pub barrier_dims: Vec<usize>,
    pub lyapunov_dims: Vec<usize>,
    pub lyapunov_bias: bool,
    /// `None` gives a linear policy; otherwise hidden widths of a tanh policy network.
    pub policy_hidden: Option<Vec<usize>>,
    pub policy_init: PolicyInit,
}

impl ModelSpec {
    /// The `n-8n-8n-1` certificate networks with a random linear policy.
    pub fn for_dim(n: usize) -> Self {
        ModelSpec {
            barrier_dims: MlpNet::certificate_dims(n),
            lyapunov_dims: MlpNet::certificate_dims(n),
            lyapunov_bias: false,
            policy_hidden: None,
            policy_init: PolicyInit::Random,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub barrier: MlpNet,
    pub lyapunov: MlpNet,
    pub policy: Policy,
    pub moments: [Moments; 3],
    pub iteration: u64,
    pub seed: u64,
    pub history: Vec<RiskRecord>,
}

impl TrainState {
    pub fn new(barrier: MlpNet, lyapunov: MlpNet, policy: Policy, seed: u64) -> Self {
        let moments = [
            Moments::new(barrier.param_count()),
            Moments::new(lyapunov.param_count()),
            Moments::new(policy.param_count()),
        ];
        TrainState {
            barrier,
            lyapunov,
            policy,
            moments,
            iteration: 0,
            seed,
            history: Vec::new(),
        }
    }

    /// Seeded initialization for `sys`.
    pub fn init(sys: &SystemModel, spec: &ModelSpec, seed: u64) -> Result<Self> {
        let n = sys.state_dim();
        let m = sys.control_dim();
        for (name, dims) in [("barrier", &spec.barrier_dims), ("lyapunov", &spec.lyapunov_dims)] {
            if dims.first() != Some(&n) || dims.last() != Some(&1) {
                return Err(Error::Config(format!(
                    "{name} layer dims {dims:?} must start at {n} and end at 1"
                )));
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let barrier = MlpNet::random(&spec.barrier_dims, Head::Scalar, true, &mut rng)?;
        let lyapunov = MlpNet::random(&spec.lyapunov_dims, Head::Quadratic, spec.lyapunov_bias, &mut rng)?;
        let policy = match (&spec.policy_hidden, &spec.policy_init) {
            (None, PolicyInit::Gains(rows)) => {
                let p = LinearPolicy::from_rows(rows)?;
                if rows.len() != m || rows[0].len() != n {
                    return Err(Error::Config(format!("policy gains must be {m}x{n}")));
                }
                Policy::Linear(p)
            }
            (None, PolicyInit::Zeros) => Policy::Linear(LinearPolicy::zeros(m, n)),
            (None, PolicyInit::Random) => {
                let r = 1.0 / (n as f64).sqrt();
                let gain = (0..m * n).map(|_| rng.gen_range(-r..=r)).collect();
                Policy::Linear(LinearPolicy::new(m, n, gain)?)
            }
            (Some(hidden), init) => {
                let mut dims = vec![n];
                dims.extend(hidden);
                dims.push(m);
                let mut net = MlpNet::random(&dims, Head::Scalar, true, &mut rng)?;
                match init {
                    PolicyInit::Random => {}
                    PolicyInit::Zeros => net.set_params(&ParamVector::zeros(net.param_count()))?,
                    PolicyInit::Gains(_) => {
                        return Err(Error::Config("gain initialization needs a linear policy".into()))
                    }
                }
                Policy::Mlp(net)
            }
        };
        Ok(TrainState::new(barrier, lyapunov, policy, seed))
    }

    fn apply(&mut self, grad: &super::RiskGrad, cfg: &OptimizerConfig) -> Result<()> {
        let mut pb = self.barrier.params();
        self.moments[0].step(&mut pb.0, &grad.barrier, cfg);
        let mut pv = self.lyapunov.params();
        self.moments[1].step(&mut pv.0, &grad.lyapunov, cfg);
        let mut pp = self.policy.params();
        self.moments[2].step(&mut pp.0, &grad.policy, cfg);
        self.barrier.set_params(&pb)?;
        self.lyapunov.set_params(&pv)?;
        self.policy.set_params(&pp)?;
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub risk: RiskConfig,
    pub optimizer: OptimizerConfig,
    pub max_iters: u64,
    pub target_risk: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            risk: RiskConfig::default(),
            optimizer: OptimizerConfig::default(),
            max_iters: 20_000,
            target_risk: 1e-3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum StopReason {
    TargetReached,
    IterationCap,
    /// Risk above the divergence limit, non-finite, or the policy left the
    /// model's domain. Carries a short description.
    Diverged(String),
}

impl StopReason {
    pub fn label(&self) -> &'static str {
        match self {
            StopReason::TargetReached => "target-reached",
            StopReason::IterationCap => "iteration-cap",
            StopReason::Diverged(_) => "diverged",
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub state: TrainState,
    pub stop: StopReason,
    /// Risk of the returned parameters, when it was evaluated.
    pub final_risk: Option<RiskValue>,
}

/// Train with no per-iteration hook.
pub fn train(state: TrainState, sys: &SystemModel, sets: &ProblemSets, cfg: &TrainConfig) -> Result<TrainOutcome> {
    train_with(state, sys, sets, cfg, &mut |_, _| Ok(()))
}

/// Joint descent on the total risk. `observer` sees the state and the
/// record of every evaluated iterate, before the update.
///
/// Each iteration evaluates the risk at the current parameters, records it,
/// stops if the target is met or the run diverged, and otherwise takes one
/// optimizer step. After `max_iters` steps the final parameters are
/// evaluated once more.
pub fn train_with(
    mut state: TrainState,
    sys: &SystemModel,
    sets: &ProblemSets,
    cfg: &TrainConfig,
    observer: &mut dyn FnMut(&TrainState, &RiskRecord) -> Result<()>,
) -> Result<TrainOutcome> {
    cfg.risk.validate()?;
    cfg.optimizer.validate()?;
    sets.check_dim(sys.state_dim())?;
    if cfg.max_iters == 0 {
        return Ok(TrainOutcome {
            state,
            stop: StopReason::IterationCap,
            final_risk: None,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(state.seed);
    rng.set_stream(1);
    let mut batches = sets.draw(&cfg.risk, &mut rng)?;
    let mut steps = 0u64;
    loop {
        if steps > 0 && cfg.risk.resample_every > 0 && steps.is_multiple_of(cfg.risk.resample_every) {
            batches = sets.draw(&cfg.risk, &mut rng)?;
        }
        let evaluated = risk_and_grad(&state.barrier, &state.lyapunov, &state.policy, sys, &batches, &cfg.risk);
        let (risk, grad) = match evaluated {
            Ok(v) => v,
            Err(e @ (Error::Numerical { .. } | Error::Domain { .. })) => {
                return Ok(TrainOutcome {
                    state,
                    stop: StopReason::Diverged(e.to_string()),
                    final_risk: None,
                })
            }
            Err(e) => return Err(e),
        };
        let record = RiskRecord::new(state.iteration, &risk);
        state.history.push(record);
        observer(&state, &record)?;
        if !record.total.is_finite() || record.total > DIVERGENCE_LIMIT {
            return Ok(TrainOutcome {
                state,
                stop: StopReason::Diverged(format!("total risk {}", record.total)),
                final_risk: Some(risk),
            });
        }
        if record.total <= cfg.target_risk {
            return Ok(TrainOutcome {
                state,
                stop: StopReason::TargetReached,
                final_risk: Some(risk),
            });
        }
        if steps == cfg.max_iters {
            return Ok(TrainOutcome {
                state,
                stop: StopReason::IterationCap,
                final_risk: Some(risk),
            });
        }
        let all_finite = grad
            .barrier
            .iter()
            .chain(&grad.lyapunov)
            .chain(&grad.policy)
            .all(|g| g.is_finite());
        if !all_finite {
            return Ok(TrainOutcome {
                state,
                stop: StopReason::Diverged("non-finite gradient".into()),
                final_risk: Some(risk),
            });
        }
        if let Err(e) = state.apply(&grad, &cfg.optimizer) {
            return Ok(TrainOutcome {
                state,
                stop: StopReason::Diverged(e.to_string()),
                final_risk: Some(risk),
            });
        }
        state.iteration += 1;
        steps += 1;
    }
}
