//! Run configuration: a TOML file with one section per stage. Missing
//! fields take documented defaults; the resolved form can be written back
//! out and re-read unchanged.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::certify::{
    Aggregation, BatchSizes, ModelSpec, OptimizerConfig, OptimizerKind, PolicyInit, ProblemSets, RiskConfig,
    TrainConfig,
};
use crate::diffnet::MlpNet;
use crate::error::{Error, Result};
use crate::sets::{StateSet, DEFAULT_GRID_CAP};
use crate::sim::SimConfig;
use crate::systems::SystemModel;
use crate::verify::{LipschitzMode, VerifyConfig};

/// Radius of the default goal neighbourhood.
pub const GOAL_BAR_RADIUS: f64 = 0.1;

/// Set geometry of the four built-in benchmarks.
pub fn benchmark_sets(system: &str) -> Option<[String; 4]> {
    let s = |a: &str, b: &str, c: &str, d: &str| Some([a.into(), b.into(), c.into(), d.into()]);
    match system {
        "pendulum" => s(
            "box lb=[-3.141592653589793,-5] ub=[3.141592653589793,5]",
            "ball center=[0,0] radius=2",
            "annulus center=[0,0] r_in=2.5 r_out=3",
            "point center=[0,0]",
        ),
        "cartpole" => s(
            "box lb=[-1.3,-1.3,-1.3,-1.3] ub=[1.3,1.3,1.3,1.3]",
            "ball center=[0,0,0,0] radius=0.8",
            "annulus center=[0,0,0,0] r_in=0.9 r_out=1.3",
            "point center=[0,0,0,0]",
        ),
        "vehicle" => s(
            "box lb=[-0.8,-0.8] ub=[0.8,0.8]",
            "ball center=[0,0] radius=0.5",
            "annulus center=[0,0] r_in=0.6 r_out=0.8",
            "ball center=[-0.2,0] radius=0.2",
        ),
        "uav" => s(
            "box lb=[-1,-1,-1,-1,-1,-1] ub=[1,1,1,1,1,1]",
            "ball center=[0,0,0,0,0,0] radius=0.5",
            "annulus center=[0,0,0,0,0,0] r_in=0.9 r_out=1",
            "point center=[0,0,0,0,0,0]",
        ),
        _ => None,
    }
}

/// Default goal neighbourhood: a small ball around the goal centre, inside
/// the goal set whenever the goal set is large enough to hold one.
pub fn default_goal_bar(goal: &StateSet) -> Result<StateSet> {
    match goal {
        StateSet::Point { center } => StateSet::ball(center.clone(), GOAL_BAR_RADIUS),
        StateSet::Ball { center, radius } => StateSet::ball(center.clone(), radius.min(GOAL_BAR_RADIUS)),
        StateSet::Box { lb, ub } => {
            let center: Vec<f64> = lb.iter().zip(ub).map(|(l, u)| 0.5 * (l + u)).collect();
            let half = lb
                .iter()
                .zip(ub)
                .map(|(l, u)| 0.5 * (u - l))
                .fold(f64::INFINITY, f64::min);
            StateSet::ball(center, half.min(GOAL_BAR_RADIUS))
        }
        StateSet::Annulus { .. } => Err(Error::Config("an annulus goal needs an explicit `goal_bar` set".into())),
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SetsSection {
    pub state: Option<String>,
    pub initial: Option<String>,
    #[serde(rename = "unsafe")]
    pub unsafe_: Option<String>,
    pub goal: Option<String>,
    pub goal_bar: Option<String>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkSection {
    pub barrier_dims: Option<Vec<usize>>,
    pub lyapunov_dims: Option<Vec<usize>>,
    pub lyapunov_bias: Option<bool>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PolicyKind {
    #[default]
    Linear,
    Mlp,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InitKind {
    #[default]
    Random,
    Zeros,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicySection {
    pub kind: Option<PolicyKind>,
    pub hidden: Option<Vec<usize>>,
    pub init: Option<InitKind>,
    /// Initial gain rows for a linear policy; overrides `init`.
    pub gains: Option<Vec<Vec<f64>>>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub max_iters: Option<u64>,
    pub target_risk: Option<f64>,
    pub optimizer: Option<OptimizerKind>,
    pub learning_rate: Option<f64>,
    pub beta1: Option<f64>,
    pub beta2: Option<f64>,
    pub adam_epsilon: Option<f64>,
    /// Margin of the unsafe-set term.
    pub epsilon: Option<f64>,
    pub n_state: Option<usize>,
    pub n_initial: Option<usize>,
    pub n_unsafe: Option<usize>,
    pub n_goal: Option<usize>,
    pub resample_every: Option<u64>,
    pub aggregation: Option<Aggregation>,
    /// Delta of the non-degeneracy term; absent disables it.
    pub nondegeneracy: Option<f64>,
    /// Write a checkpoint every this many iterations (0 = only at the end).
    pub checkpoint_every: Option<u64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VerifySection {
    pub eps1: Option<f64>,
    pub eps2: Option<f64>,
    pub eps3: Option<f64>,
    pub tau: Option<f64>,
    pub grid_points: Option<usize>,
    pub grid_cap: Option<usize>,
    pub lipschitz: Option<LipschitzMode>,
    pub safety_factor: Option<f64>,
    pub containment: Option<bool>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateSection {
    pub dt: Option<f64>,
    pub horizon: Option<f64>,
    pub n_starts: Option<usize>,
    pub goal_tol: Option<f64>,
    pub envelope_tol: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExportSection {
    /// The two state coordinates spanned by the level-set slice.
    pub slice_axes: Option<[usize; 2]>,
    pub resolution: Option<usize>,
}

/// The file as written, every field optional.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawConfig {
    pub system: Option<String>,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    #[serde(default)]
    pub sets: SetsSection,
    #[serde(default)]
    pub network: NetworkSection,
    #[serde(default)]
    pub policy: PolicySection,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub verify: VerifySection,
    #[serde(default)]
    pub simulate: SimulateSection,
    #[serde(default)]
    pub export: ExportSection,
}

/// Fully resolved configuration.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub system: SystemModel,
    pub seed: u64,
    pub out: PathBuf,
    pub sets: ProblemSets,
    pub model: ModelSpec,
    pub train: TrainConfig,
    pub checkpoint_every: u64,
    pub verify: VerifyConfig,
    pub simulate: SimConfig,
    pub slice_axes: [usize; 2],
    pub slice_resolution: usize,
}

fn cfg_err(field: &str, msg: impl std::fmt::Display) -> Error {
    Error::Config(format!("`{field}`: {msg}"))
}

fn parse_set(field: &str, text: &Option<String>, fallback: Option<&str>) -> Result<StateSet> {
    let t = text
        .as_deref()
        .or(fallback)
        .ok_or_else(|| cfg_err(field, "missing (no benchmark default for this system)"))?;
    t.parse::<StateSet>().map_err(|e| cfg_err(field, e))
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let raw: RawConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        Self::resolve(&raw)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn resolve(raw: &RawConfig) -> Result<Self> {
        let name = raw.system.as_deref().ok_or_else(|| cfg_err("system", "missing"))?;
        let system = SystemModel::by_name(name).map_err(|e| cfg_err("system", e))?;
        let n = system.state_dim();
        let m = system.control_dim();
        let bench = benchmark_sets(name);
        let fallback = |i: usize| bench.as_ref().map(|b| b[i].as_str());

        let x = parse_set("sets.state", &raw.sets.state, fallback(0))?;
        let x0 = parse_set("sets.initial", &raw.sets.initial, fallback(1))?;
        let xu = parse_set("sets.unsafe", &raw.sets.unsafe_, fallback(2))?;
        let xg = parse_set("sets.goal", &raw.sets.goal, fallback(3))?;
        let xg_bar = match &raw.sets.goal_bar {
            Some(_) => parse_set("sets.goal_bar", &raw.sets.goal_bar, None)?,
            None => default_goal_bar(&xg).map_err(|e| cfg_err("sets.goal_bar", e))?,
        };
        let sets = ProblemSets { x, x0, xu, xg, xg_bar };
        for (field, s) in [
            ("sets.state", &sets.x),
            ("sets.initial", &sets.x0),
            ("sets.unsafe", &sets.xu),
            ("sets.goal", &sets.xg),
            ("sets.goal_bar", &sets.xg_bar),
        ] {
            if s.dim() != n {
                return Err(cfg_err(
                    field,
                    format!("dimension {} does not match {name} (state dimension {n})", s.dim()),
                ));
            }
        }

        let net = &raw.network;
        let dims_default = MlpNet::certificate_dims(n);
        let barrier_dims = net.barrier_dims.clone().unwrap_or_else(|| dims_default.clone());
        let lyapunov_dims = net.lyapunov_dims.clone().unwrap_or(dims_default);
        for (field, d) in [
            ("network.barrier_dims", &barrier_dims),
            ("network.lyapunov_dims", &lyapunov_dims),
        ] {
            if d.first() != Some(&n) || d.last() != Some(&1) || d.contains(&0) {
                return Err(cfg_err(
                    field,
                    format!("{d:?} must start at {n}, end at 1, no zero widths"),
                ));
            }
        }
        if lyapunov_dims.len() < 3 {
            return Err(cfg_err("network.lyapunov_dims", "needs at least one hidden layer"));
        }

        let pol = &raw.policy;
        let kind = pol.kind.unwrap_or_default();
        let policy_init = match (&pol.gains, pol.init.unwrap_or_default()) {
            (Some(rows), _) => {
                if kind != PolicyKind::Linear {
                    return Err(cfg_err("policy.gains", "only valid for a linear policy"));
                }
                if rows.len() != m || rows.iter().any(|r| r.len() != n) {
                    return Err(cfg_err("policy.gains", format!("must be {m} rows of {n} entries")));
                }
                PolicyInit::Gains(rows.clone())
            }
            (None, InitKind::Random) => PolicyInit::Random,
            (None, InitKind::Zeros) => PolicyInit::Zeros,
        };
        let policy_hidden = match kind {
            PolicyKind::Linear => {
                if pol.hidden.is_some() {
                    return Err(cfg_err("policy.hidden", "only valid for kind = \"mlp\""));
                }
                None
            }
            PolicyKind::Mlp => Some(pol.hidden.clone().unwrap_or_else(|| vec![8 * n])),
        };
        let model = ModelSpec {
            barrier_dims,
            lyapunov_dims,
            lyapunov_bias: net.lyapunov_bias.unwrap_or(false),
            policy_hidden,
            policy_init,
        };

        let t = &raw.train;
        let od = OptimizerConfig::default();
        let optimizer = OptimizerConfig {
            kind: t.optimizer.unwrap_or(od.kind),
            learning_rate: t.learning_rate.unwrap_or(od.learning_rate),
            beta1: t.beta1.unwrap_or(od.beta1),
            beta2: t.beta2.unwrap_or(od.beta2),
            epsilon: t.adam_epsilon.unwrap_or(od.epsilon),
        };
        optimizer.validate()?;
        let bd = BatchSizes::default();
        let risk = RiskConfig {
            epsilon_margin: t.epsilon.unwrap_or(0.01),
            batch_sizes: BatchSizes {
                x: t.n_state.unwrap_or(bd.x),
                x0: t.n_initial.unwrap_or(bd.x0),
                xu: t.n_unsafe.unwrap_or(bd.xu),
                xg: t.n_goal.unwrap_or(bd.xg),
            },
            resample_every: t.resample_every.unwrap_or(0),
            aggregation: t.aggregation.unwrap_or_default(),
            nondegeneracy: t.nondegeneracy,
        };
        risk.validate()?;
        let target_risk = t.target_risk.unwrap_or(1e-3);
        if !(target_risk >= 0.0) {
            return Err(cfg_err("train.target_risk", "must be >= 0"));
        }
        let train = TrainConfig {
            risk,
            optimizer,
            max_iters: t.max_iters.unwrap_or(20_000),
            target_risk,
        };

        let v = &raw.verify;
        let vd = VerifyConfig::default();
        let verify = VerifyConfig {
            eps1: v.eps1.unwrap_or(vd.eps1),
            eps2: v.eps2.unwrap_or(vd.eps2),
            eps3: v.eps3,
            tau: v.tau.unwrap_or(vd.tau),
            grid_points: v.grid_points,
            grid_cap: v.grid_cap.unwrap_or(DEFAULT_GRID_CAP),
            lipschitz: v.lipschitz.unwrap_or_default(),
            safety_factor: v.safety_factor.unwrap_or(vd.safety_factor),
            containment: v.containment.unwrap_or(true),
        };
        verify.validate()?;

        let s = &raw.simulate;
        let sd = SimConfig::default();
        let simulate = SimConfig {
            dt: s.dt.unwrap_or(sd.dt),
            horizon: s.horizon.unwrap_or(sd.horizon),
            n_starts: s.n_starts.unwrap_or(sd.n_starts),
            goal_tol: s.goal_tol.unwrap_or(sd.goal_tol),
            envelope_tol: s.envelope_tol.unwrap_or(sd.envelope_tol),
        };
        simulate.validate().map_err(|e| cfg_err("simulate", e))?;

        let slice_axes = raw.export.slice_axes.unwrap_or([0, 1]);
        if slice_axes[0] >= n || slice_axes[1] >= n || slice_axes[0] == slice_axes[1] {
            return Err(cfg_err(
                "export.slice_axes",
                format!("need two distinct axes below {n}"),
            ));
        }
        let slice_resolution = raw.export.resolution.unwrap_or(200);
        if slice_resolution < 2 {
            return Err(cfg_err("export.resolution", "must be >= 2"));
        }

        Ok(RunConfig {
            seed: raw.seed.unwrap_or(0),
            out: raw.out.clone().unwrap_or_else(|| PathBuf::from("runs").join(name)),
            system,
            sets,
            model,
            train,
            checkpoint_every: t.checkpoint_every.unwrap_or(0),
            verify,
            simulate,
            slice_axes,
            slice_resolution,
        })
    }

    /// Every field spelled out. Parsing this text gives back `self`.
    pub fn to_raw(&self) -> RawConfig {
        let (kind, hidden) = match &self.model.policy_hidden {
            None => (PolicyKind::Linear, None),
            Some(h) => (PolicyKind::Mlp, Some(h.clone())),
        };
        let (init, gains) = match &self.model.policy_init {
            PolicyInit::Random => (Some(InitKind::Random), None),
            PolicyInit::Zeros => (Some(InitKind::Zeros), None),
            PolicyInit::Gains(g) => (None, Some(g.clone())),
        };
        let t = &self.train;
        let v = &self.verify;
        let s = &self.simulate;
        RawConfig {
            system: Some(self.system.name().to_string()),
            seed: Some(self.seed),
            out: Some(self.out.clone()),
            sets: SetsSection {
                state: Some(self.sets.x.to_string()),
                initial: Some(self.sets.x0.to_string()),
                unsafe_: Some(self.sets.xu.to_string()),
                goal: Some(self.sets.xg.to_string()),
                goal_bar: Some(self.sets.xg_bar.to_string()),
            },
            network: NetworkSection {
                barrier_dims: Some(self.model.barrier_dims.clone()),
                lyapunov_dims: Some(self.model.lyapunov_dims.clone()),
                lyapunov_bias: Some(self.model.lyapunov_bias),
            },
            policy: PolicySection {
                kind: Some(kind),
                hidden,
                init,
                gains,
            },
            train: TrainSection {
                max_iters: Some(t.max_iters),
                target_risk: Some(t.target_risk),
                optimizer: Some(t.optimizer.kind),
                learning_rate: Some(t.optimizer.learning_rate),
                beta1: Some(t.optimizer.beta1),
                beta2: Some(t.optimizer.beta2),
                adam_epsilon: Some(t.optimizer.epsilon),
                epsilon: Some(t.risk.epsilon_margin),
                n_state: Some(t.risk.batch_sizes.x),
                n_initial: Some(t.risk.batch_sizes.x0),
                n_unsafe: Some(t.risk.batch_sizes.xu),
                n_goal: Some(t.risk.batch_sizes.xg),
                resample_every: Some(t.risk.resample_every),
                aggregation: Some(t.risk.aggregation),
                nondegeneracy: t.risk.nondegeneracy,
                checkpoint_every: Some(self.checkpoint_every),
            },
            verify: VerifySection {
                eps1: Some(v.eps1),
                eps2: Some(v.eps2),
                eps3: v.eps3,
                tau: Some(v.tau),
                grid_points: v.grid_points,
                grid_cap: Some(v.grid_cap),
                lipschitz: Some(v.lipschitz),
                safety_factor: Some(v.safety_factor),
                containment: Some(v.containment),
            },
            simulate: SimulateSection {
                dt: Some(s.dt),
                horizon: Some(s.horizon),
                n_starts: Some(s.n_starts),
                goal_tol: Some(s.goal_tol),
                envelope_tol: Some(s.envelope_tol),
            },
            export: ExportSection {
                slice_axes: Some(self.slice_axes),
                resolution: Some(self.slice_resolution),
            },
        }
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(&self.to_raw()).map_err(|e| Error::Config(e.to_string()))
    }
}

/// Gain matrix file: `gains = [[...], ...]`, one row per control.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GainsFile {
    pub gains: Vec<Vec<f64>>,
}

impl GainsFile {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }
}
