//! Fixed-step RK4 rollouts of the closed loop and trajectory-level safety
//! and goal-reaching verdicts.

use std::fmt::Write as _;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffnet::Policy;
use crate::error::{Error, Result};
use crate::par;
use crate::sets::StateSet;
use crate::systems::{closed_loop, SystemModel, VectorField};

/// Rollouts stop once the state norm exceeds this.
pub const BLOWUP_NORM: f64 = 1e3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub dt: f64,
    pub horizon: f64,
    pub n_starts: usize,
    pub goal_tol: f64,
    pub envelope_tol: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            dt: 0.01,
            horizon: 30.0,
            n_starts: 20,
            goal_tol: 0.1,
            envelope_tol: 0.05,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0) || !self.dt.is_finite() {
            return Err(Error::Precondition("dt must be positive".into()));
        }
        if !(self.horizon >= self.dt) || !self.horizon.is_finite() {
            return Err(Error::Precondition("horizon must be at least dt".into()));
        }
        if self.n_starts == 0 {
            return Err(Error::Precondition("n_starts must be >= 1".into()));
        }
        if !(self.goal_tol >= 0.0) || !(self.envelope_tol >= 0.0) {
            return Err(Error::Precondition("tolerances must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajMeta {
    pub system: String,
    pub policy_checksum: u64,
    pub dt: f64,
    pub horizon: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<Vec<f64>>,
    /// Control applied at each recorded state; empty rows for open fields.
    pub controls: Vec<Vec<f64>>,
    pub meta: TrajMeta,
    /// Why the rollout stopped early, if it did.
    pub blowup: Option<String>,
}

impl Trajectory {
    pub fn final_state(&self) -> &[f64] {
        self.states.last().expect("trajectory holds the initial state")
    }
}

fn axpy(x: &[f64], a: f64, k: &[f64]) -> Vec<f64> {
    x.iter().zip(k).map(|(xi, ki)| xi + a * ki).collect()
}

/// Classical four-stage Runge-Kutta. `eval` returns the derivative and the
/// control in effect at a state.
fn integrate<F>(eval: F, x0: &[f64], dt: f64, horizon: f64, meta: TrajMeta) -> Result<Trajectory>
where
    F: Fn(&[f64]) -> Result<(Vec<f64>, Vec<f64>)>,
{
    if !(dt > 0.0) || !(horizon >= dt) {
        return Err(Error::Precondition("need dt > 0 and horizon >= dt".into()));
    }
    let steps = (horizon / dt).round() as usize;
    let mut times = Vec::with_capacity(steps + 1);
    let mut states = Vec::with_capacity(steps + 1);
    let mut controls = Vec::with_capacity(steps + 1);
    let mut blowup = None;
    let mut x = x0.to_vec();
    for k in 0..=steps {
        let (k1, u) = match eval(&x) {
            Ok(v) => v,
            Err(Error::Domain { bound, .. }) => {
                blowup = Some(format!("domain guard: {bound}"));
                break;
            }
            Err(e) => return Err(e),
        };
        times.push(k as f64 * dt);
        states.push(x.clone());
        controls.push(u);
        if k == steps {
            break;
        }
        let stages = (|| {
            let k2 = eval(&axpy(&x, 0.5 * dt, &k1))?.0;
            let k3 = eval(&axpy(&x, 0.5 * dt, &k2))?.0;
            let k4 = eval(&axpy(&x, dt, &k3))?.0;
            Ok::<_, Error>((k2, k3, k4))
        })();
        let (k2, k3, k4) = match stages {
            Ok(v) => v,
            Err(Error::Domain { bound, .. }) => {
                blowup = Some(format!("domain guard: {bound}"));
                break;
            }
            Err(e) => return Err(e),
        };
        for i in 0..x.len() {
            x[i] += dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
        }
        if x.iter().any(|v| !v.is_finite()) {
            blowup = Some("non-finite state".into());
            break;
        }
        if x.iter().map(|v| v * v).sum::<f64>().sqrt() > BLOWUP_NORM {
            // keep the offending state so the escape is visible
            times.push((k + 1) as f64 * dt);
            states.push(x.clone());
            controls.push(eval(&x).map(|r| r.1).unwrap_or_default());
            blowup = Some(format!("state norm above {BLOWUP_NORM}"));
            break;
        }
    }
    if states.is_empty() {
        return Err(Error::Precondition(format!(
            "initial state outside the model domain: {}",
            blowup.unwrap_or_default()
        )));
    }
    Ok(Trajectory {
        times,
        states,
        controls,
        meta,
        blowup,
    })
}

/// Integrate an autonomous field from `x0` over `[0, horizon]`.
pub fn rk4_simulate(field: &dyn VectorField, x0: &[f64], dt: f64, horizon: f64) -> Result<Trajectory> {
    if x0.len() != field.dim() {
        return Err(Error::shape(field.dim(), x0.len()));
    }
    let meta = TrajMeta {
        system: "field".into(),
        policy_checksum: 0,
        dt,
        horizon,
    };
    integrate(|x| Ok((field.eval(x)?, Vec::new())), x0, dt, horizon, meta)
}

/// Closed-loop rollout recording the applied controls.
pub fn simulate_policy(sys: &SystemModel, policy: &Policy, x0: &[f64], dt: f64, horizon: f64) -> Result<Trajectory> {
    let cl = closed_loop(sys, policy)?;
    if x0.len() != sys.state_dim() {
        return Err(Error::shape(sys.state_dim(), x0.len()));
    }
    let meta = TrajMeta {
        system: sys.name().to_string(),
        policy_checksum: policy.checksum(),
        dt,
        horizon,
    };
    integrate(|x| cl.eval_with_control(x), x0, dt, horizon, meta)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajVerdict {
    pub safe: bool,
    pub first_violation_time: Option<f64>,
    pub min_dist_unsafe: f64,
    pub reached_goal: bool,
    pub final_dist_goal: f64,
    pub monotone_envelope_ok: bool,
    pub blew_up: bool,
}

/// Safety and goal-reaching verdict of one trajectory.
pub fn judge(traj: &Trajectory, xu: &StateSet, xg: &StateSet, goal_tol: f64, envelope_tol: f64) -> TrajVerdict {
    let mut first_violation_time = None;
    let mut min_dist_unsafe = f64::INFINITY;
    let mut dist_goal = Vec::with_capacity(traj.states.len());
    for (t, x) in traj.times.iter().zip(&traj.states) {
        let du = xu.distance_unchecked(x);
        min_dist_unsafe = min_dist_unsafe.min(du);
        if first_violation_time.is_none() && xu.contains_unchecked(x) {
            first_violation_time = Some(*t);
        }
        dist_goal.push(xg.distance_unchecked(x));
    }
    let final_dist_goal = *dist_goal.last().unwrap_or(&f64::INFINITY);
    let mut suffix_max = f64::NEG_INFINITY;
    let mut monotone_envelope_ok = true;
    for &d in dist_goal.iter().rev() {
        suffix_max = suffix_max.max(d);
        if suffix_max > d + envelope_tol {
            monotone_envelope_ok = false;
        }
    }
    let blew_up = traj.blowup.is_some();
    TrajVerdict {
        safe: first_violation_time.is_none(),
        first_violation_time,
        min_dist_unsafe,
        reached_goal: !blew_up && final_dist_goal <= goal_tol,
        final_dist_goal,
        monotone_envelope_ok,
        blew_up,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RolloutSummary {
    pub system: String,
    pub n: usize,
    pub n_safe: usize,
    pub n_reached: usize,
    pub n_blowup: usize,
    pub fraction_safe: f64,
    pub fraction_reached: f64,
    pub min_dist_unsafe: f64,
    pub max_final_dist_goal: f64,
}

impl RolloutSummary {
    pub fn all_safe_and_reached(&self) -> bool {
        self.n_safe == self.n && self.n_reached == self.n
    }
}

#[derive(Clone, Debug)]
pub struct Rollouts {
    pub runs: Vec<(Trajectory, TrajVerdict)>,
    pub summary: RolloutSummary,
}

/// Seeded starts from `x0`, rolled out and judged in start order.
#[allow(clippy::too_many_arguments)]
pub fn batch_rollouts(
    policy: &Policy,
    sys: &SystemModel,
    x0: &StateSet,
    xu: &StateSet,
    xg: &StateSet,
    seed: u64,
    cfg: &SimConfig,
) -> Result<Rollouts> {
    cfg.validate()?;
    closed_loop(sys, policy)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let starts = x0.sample_with(cfg.n_starts, &mut rng)?;
    let runs: Vec<(Trajectory, TrajVerdict)> = par::map_indexed(starts.len(), |i| {
        let traj = simulate_policy(sys, policy, &starts[i], cfg.dt, cfg.horizon)?;
        let v = judge(&traj, xu, xg, cfg.goal_tol, cfg.envelope_tol);
        Ok::<_, Error>((traj, v))
    })
    .into_iter()
    .collect::<Result<_>>()?;
    let n = runs.len();
    let n_safe = runs.iter().filter(|r| r.1.safe).count();
    let n_reached = runs.iter().filter(|r| r.1.reached_goal).count();
    let summary = RolloutSummary {
        system: sys.name().to_string(),
        n,
        n_safe,
        n_reached,
        n_blowup: runs.iter().filter(|r| r.1.blew_up).count(),
        fraction_safe: n_safe as f64 / n as f64,
        fraction_reached: n_reached as f64 / n as f64,
        min_dist_unsafe: runs.iter().map(|r| r.1.min_dist_unsafe).fold(f64::INFINITY, f64::min),
        max_final_dist_goal: runs.iter().map(|r| r.1.final_dist_goal).fold(0.0, f64::max),
    };
    Ok(Rollouts { runs, summary })
}

/// Delimited text with header `t,x1..xn,u1..um,dist_unsafe,dist_goal`.
pub fn trajectory_csv(traj: &Trajectory, xu: &StateSet, xg: &StateSet) -> String {
    let n = traj.states.first().map_or(0, Vec::len);
    let m = traj.controls.iter().map(Vec::len).max().unwrap_or(0);
    let mut s = String::from("t");
    for i in 1..=n {
        let _ = write!(s, ",x{i}");
    }
    for j in 1..=m {
        let _ = write!(s, ",u{j}");
    }
    s.push_str(",dist_unsafe,dist_goal\n");
    for ((t, x), u) in traj.times.iter().zip(&traj.states).zip(&traj.controls) {
        let _ = write!(s, "{t}");
        for v in x {
            let _ = write!(s, ",{v}");
        }
        for j in 0..m {
            match u.get(j) {
                Some(v) => {
                    let _ = write!(s, ",{v}");
                }
                None => s.push(','),
            }
        }
        let _ = writeln!(s, ",{},{}", xu.distance_unchecked(x), xg.distance_unchecked(x));
    }
    s
}

pub fn write_trajectory_csv(path: &Path, traj: &Trajectory, xu: &StateSet, xg: &StateSet) -> Result<()> {
    std::fs::write(path, trajectory_csv(traj, xu, xg))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffnet::LinearPolicy;
    use crate::systems::FnVectorField;

    #[test]
    fn zero_field_is_constant() {
        let f = FnVectorField {
            dim: 2,
            f: |_: &[f64]| vec![0.0, 0.0],
        };
        let t = rk4_simulate(&f, &[0.3, -1.0], 0.1, 1.0).unwrap();
        assert_eq!(t.states.len(), 11);
        assert!(t.states.iter().all(|x| x == &vec![0.3, -1.0]));
        assert_eq!(t.times[10], 1.0);
    }

    #[test]
    fn blowup_is_flagged_not_thrown() {
        let f = FnVectorField {
            dim: 1,
            f: |x: &[f64]| vec![x[0] * x[0]],
        };
        let t = rk4_simulate(&f, &[1.0], 0.01, 5.0).unwrap();
        assert!(t.blowup.is_some());
        assert!(t.times.last().unwrap() < &1.1);
    }

    #[test]
    fn vehicle_guard_stops_rollout() {
        let sys = SystemModel::vehicle();
        let p = Policy::Linear(LinearPolicy::new(1, 2, vec![0.0, 0.0]).unwrap());
        let t = simulate_policy(&sys, &p, &[0.0, 0.0], 0.01, 30.0).unwrap();
        assert!(t.blowup.as_deref().unwrap().contains("domain"));
    }

    #[test]
    fn origin_is_safe_and_at_goal() {
        let f = FnVectorField {
            dim: 2,
            f: |_: &[f64]| vec![0.0, 0.0],
        };
        let t = rk4_simulate(&f, &[0.0, 0.0], 0.01, 1.0).unwrap();
        let xu = StateSet::annulus(vec![0.0, 0.0], 2.5, 3.0).unwrap();
        let xg = StateSet::point(vec![0.0, 0.0]).unwrap();
        let v = judge(&t, &xu, &xg, 0.1, 0.05);
        assert!(v.safe && v.reached_goal && v.monotone_envelope_ok);
    }

    #[test]
    fn straight_line_through_unsafe_set() {
        let times: Vec<f64> = (0..=40).map(|k| k as f64 * 0.1).collect();
        let states: Vec<Vec<f64>> = times.iter().map(|t| vec![*t, 0.0]).collect();
        let traj = Trajectory {
            controls: vec![vec![]; times.len()],
            times,
            states,
            meta: TrajMeta {
                system: "line".into(),
                policy_checksum: 0,
                dt: 0.1,
                horizon: 4.0,
            },
            blowup: None,
        };
        let xu = StateSet::annulus(vec![0.0, 0.0], 2.5, 3.0).unwrap();
        let xg = StateSet::point(vec![0.0, 0.0]).unwrap();
        let v = judge(&traj, &xu, &xg, 0.1, 0.05);
        assert!(!v.safe);
        assert_eq!(v.first_violation_time, Some(2.5));
        assert!(xu.contains(&traj.states[25]).unwrap());
        assert!(!xu.contains(&traj.states[24]).unwrap());
        assert_eq!(v, judge(&traj, &xu, &xg, 0.1, 0.05));
    }

    #[test]
    fn decaying_spiral_has_monotone_envelope() {
        let f = FnVectorField {
            dim: 2,
            f: |x: &[f64]| vec![-0.2 * x[0] + x[1], -x[0] - 0.2 * x[1]],
        };
        let t = rk4_simulate(&f, &[1.0, 0.0], 0.01, 30.0).unwrap();
        let xu = StateSet::annulus(vec![0.0, 0.0], 2.5, 3.0).unwrap();
        let xg = StateSet::point(vec![0.0, 0.0]).unwrap();
        let v = judge(&t, &xu, &xg, 0.1, 0.05);
        assert!(v.monotone_envelope_ok && v.reached_goal);
    }

    #[test]
    fn csv_header_and_rows() {
        let sys = SystemModel::pendulum();
        let p = Policy::Linear(LinearPolicy::new(1, 2, vec![2.0120, -2.1343]).unwrap());
        let t = simulate_policy(&sys, &p, &[0.5, 0.0], 0.01, 0.05).unwrap();
        let xu = StateSet::annulus(vec![0.0, 0.0], 2.5, 3.0).unwrap();
        let xg = StateSet::point(vec![0.0, 0.0]).unwrap();
        let csv = trajectory_csv(&t, &xu, &xg);
        let mut lines = csv.lines();
        assert_eq!(lines.next(), Some("t,x1,x2,u1,dist_unsafe,dist_goal"));
        assert_eq!(lines.count(), 6);
    }

    #[test]
    fn zero_starts_rejected() {
        let sys = SystemModel::pendulum();
        let p = Policy::Linear(LinearPolicy::zeros(1, 2));
        let s = StateSet::ball(vec![0.0, 0.0], 2.0).unwrap();
        let cfg = SimConfig {
            n_starts: 0,
            ..SimConfig::default()
        };
        assert!(matches!(
            batch_rollouts(&p, &sys, &s, &s, &s, 0, &cfg),
            Err(Error::Precondition(_))
        ));
    }
}
