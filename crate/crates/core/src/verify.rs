//! Grid verification of the barrier and Lyapunov-like conditions with
//! Lipschitz-tightened inequalities.
//!
//! Every condition is reduced to a slack `s(x)` whose sign carries the raw
//! inequality (`s >= 0`, or `s > 0` for strict conditions). A condition is
//! `verified` when `s >= required + L * tau` at every grid point, `violated`
//! when the raw inequality fails at some grid point, and `inconclusive`
//! otherwise.

use std::cmp::Ordering;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::certify::ProblemSets;
use crate::diffnet::{dot, ScalarField};
use crate::error::{Error, Result};
use crate::par;
use crate::sets::{Grid, StateSet, DEFAULT_GRID_CAP};
use crate::systems::VectorField;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Status {
    Verified,
    Violated,
    Inconclusive,
}

impl Status {
    pub fn as_str(&self) -> &'static str {
        match self {
            Status::Verified => "verified",
            Status::Violated => "violated",
            Status::Inconclusive => "inconclusive",
        }
    }

    /// Violated dominates inconclusive, which dominates verified.
    fn combine(self, other: Status) -> Status {
        match (self, other) {
            (Status::Violated, _) | (_, Status::Violated) => Status::Violated,
            (Status::Inconclusive, _) | (_, Status::Inconclusive) => Status::Inconclusive,
            _ => Status::Verified,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LipschitzMode {
    /// `1.5 x` the largest gradient norm seen on the grid; composite
    /// gradients by central differences.
    #[default]
    Empirical,
    /// Products of layer norms for the networks; field bounds from the grid.
    Certified,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VerifyConfig {
    pub eps1: f64,
    pub eps2: f64,
    /// Margin of the containment check; defaults to `eps2`.
    pub eps3: Option<f64>,
    /// Target covering radius of every grid.
    pub tau: f64,
    /// Point-count mode: grids with about this many points instead of `tau`.
    pub grid_points: Option<usize>,
    pub grid_cap: usize,
    pub lipschitz: LipschitzMode,
    pub safety_factor: f64,
    /// Check `V > 0` outside the goal set in addition to the existence check.
    pub containment: bool,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        VerifyConfig {
            eps1: 1e-4,
            eps2: 1e-4,
            eps3: None,
            tau: 0.01,
            grid_points: None,
            grid_cap: DEFAULT_GRID_CAP,
            lipschitz: LipschitzMode::Empirical,
            safety_factor: 1.5,
            containment: true,
        }
    }
}

impl VerifyConfig {
    pub fn eps3(&self) -> f64 {
        self.eps3.unwrap_or(self.eps2)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("eps1", self.eps1), ("eps2", self.eps2), ("eps3", self.eps3())] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if !(self.tau > 0.0) || !self.tau.is_finite() {
            return Err(Error::Config("tau must be positive".into()));
        }
        if !(self.safety_factor >= 1.0) {
            return Err(Error::Config("safety_factor must be >= 1".into()));
        }
        Ok(())
    }

    fn grid(&self, set: &StateSet) -> Result<Grid> {
        match self.grid_points {
            Some(n) => set.make_grid_with_points(n, self.grid_cap),
            None => set.make_grid_capped(self.tau, self.grid_cap),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConditionResult {
    /// `4a`, `4b`, `4c`, `7a-existence`, `7a-containment` or `7b`.
    pub name: String,
    pub status: Status,
    /// Smallest raw slack over the grid; negative (or zero for strict
    /// conditions) means the raw inequality fails.
    pub worst_margin: f64,
    /// Grid point attaining `worst_margin`.
    pub witness: Option<Vec<f64>>,
    /// Slack each grid point must reach for the condition to be verified.
    pub required_margin: f64,
    pub lipschitz: f64,
    pub set: String,
    pub tau: f64,
    pub grid_size: usize,
    pub raw_failures: usize,
    pub tightened_failures: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CertReport {
    pub status: Status,
    pub eps1: f64,
    pub eps2: f64,
    pub eps3: f64,
    pub lipschitz_mode: LipschitzMode,
    pub conditions: Vec<ConditionResult>,
}

impl CertReport {
    fn from_conditions(cfg: &VerifyConfig, conditions: Vec<ConditionResult>) -> Self {
        let status = conditions.iter().fold(Status::Verified, |s, c| s.combine(c.status));
        CertReport {
            status,
            eps1: cfg.eps1,
            eps2: cfg.eps2,
            eps3: cfg.eps3(),
            lipschitz_mode: cfg.lipschitz,
            conditions,
        }
    }

    pub fn condition(&self, name: &str) -> Option<&ConditionResult> {
        self.conditions.iter().find(|c| c.name == name)
    }

    /// Union of two partial reports.
    pub fn merge(mut self, other: CertReport) -> CertReport {
        self.conditions.extend(other.conditions);
        self.status = self.status.combine(other.status);
        self
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn summary(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "overall: {}", self.status.as_str());
        let _ = writeln!(
            s,
            "eps1={:e} eps2={:e} eps3={:e} lipschitz={:?}",
            self.eps1, self.eps2, self.eps3, self.lipschitz_mode
        );
        for c in &self.conditions {
            let _ = write!(
                s,
                "{:<15} {:<12} margin={:+.3e} need={:.3e} L={:.3e} tau={:.3e} grid={} on {}",
                c.name,
                c.status.as_str(),
                c.worst_margin,
                c.required_margin,
                c.lipschitz,
                c.tau,
                c.grid_size,
                c.set
            );
            if let Some(w) = &c.witness {
                if c.status != Status::Verified {
                    let _ = write!(s, " witness={w:?}");
                }
            }
            s.push('\n');
        }
        s
    }
}

/// Smaller slack first, then the lexicographically smaller point.
fn worse(a: (f64, &[f64]), b: (f64, &[f64])) -> bool {
    match a.0.total_cmp(&b.0) {
        Ordering::Less => true,
        Ordering::Greater => false,
        Ordering::Equal => {
            a.1.iter()
                .zip(b.1)
                .map(|(x, y)| x.total_cmp(y))
                .find(|o| *o != Ordering::Equal)
                == Some(Ordering::Less)
        }
    }
}

struct Check<'a> {
    name: &'static str,
    set: &'static str,
    points: &'a [Vec<f64>],
    tau: f64,
    slack: Vec<f64>,
    strict: bool,
    /// Required slack before the Lipschitz term.
    base: f64,
    lipschitz: f64,
    /// Raw failures only count at these points (all when `None`).
    counts_raw: Option<Vec<bool>>,
}

impl Check<'_> {
    fn finish(self) -> ConditionResult {
        let required = self.base + self.lipschitz * self.tau;
        let mut worst: Option<usize> = None;
        let mut worst_raw: Option<usize> = None;
        let mut raw_failures = 0;
        let mut tightened_failures = 0;
        for (i, &s) in self.slack.iter().enumerate() {
            let raw_bad = if self.strict { s <= 0.0 } else { s < 0.0 };
            let counted = self.counts_raw.as_ref().is_none_or(|c| c[i]);
            if raw_bad && counted {
                raw_failures += 1;
                if worst_raw.is_none_or(|w| worse((s, &self.points[i]), (self.slack[w], &self.points[w]))) {
                    worst_raw = Some(i);
                }
            }
            if s < required || (self.strict && s <= 0.0) {
                tightened_failures += 1;
            }
            if worst.is_none_or(|w| worse((s, &self.points[i]), (self.slack[w], &self.points[w]))) {
                worst = Some(i);
            }
        }
        let status = if raw_failures > 0 {
            Status::Violated
        } else if tightened_failures == 0 {
            Status::Verified
        } else {
            Status::Inconclusive
        };
        let pick = if status == Status::Violated { worst_raw } else { worst };
        ConditionResult {
            name: self.name.to_string(),
            status,
            worst_margin: pick.map_or(f64::INFINITY, |i| self.slack[i]),
            witness: pick.map(|i| self.points[i].clone()),
            required_margin: required,
            lipschitz: self.lipschitz,
            set: self.set.to_string(),
            tau: self.tau,
            grid_size: self.points.len(),
            raw_failures,
            tightened_failures,
        }
    }
}

fn collect<T: Send>(n: usize, f: impl Fn(usize) -> Result<T> + Sync + Send) -> Result<Vec<T>> {
    par::map_indexed(n, f).into_iter().collect()
}

fn norm(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

fn max_of(v: impl IntoIterator<Item = f64>) -> f64 {
    v.into_iter().fold(0.0, f64::max)
}

fn finite_at(v: f64, index: usize, what: &str) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::Numerical {
            index,
            what: what.to_string(),
        })
    }
}

/// Values and gradient norms of `h` on a grid.
fn values_on(h: &dyn ScalarField, pts: &[Vec<f64>]) -> Result<(Vec<f64>, Vec<f64>)> {
    let vg = collect(pts.len(), |i| {
        let (v, g) = h.value_and_grad(&pts[i])?;
        Ok((finite_at(v, i, "certificate value")?, norm(&g)))
    })?;
    Ok(vg.into_iter().unzip())
}

fn value_lipschitz(h: &dyn ScalarField, grad_norms: &[f64], cfg: &VerifyConfig) -> Result<f64> {
    match cfg.lipschitz {
        LipschitzMode::Empirical => Ok(cfg.safety_factor * max_of(grad_norms.iter().copied())),
        LipschitzMode::Certified => h
            .certified_lipschitz()
            .ok_or_else(|| Error::Precondition("certified Lipschitz mode needs a network certificate".into())),
    }
}

/// `grad h(x) . F(x) + h(x)`
fn decrease_at(h: &dyn ScalarField, field: &dyn VectorField, x: &[f64]) -> Result<(f64, Vec<f64>)> {
    let f = field.eval(x)?;
    let (v, g) = h.value_and_grad(x)?;
    Ok((dot(&g, &f) + v, f))
}

fn fd_step(x: f64) -> f64 {
    1e-6 * x.abs().max(1.0)
}

/// Decrease slack on the grid plus a Lipschitz bound of the decrease quantity.
fn decrease_check(
    h: &dyn ScalarField,
    field: &dyn VectorField,
    pts: &[Vec<f64>],
    cfg: &VerifyConfig,
) -> Result<(Vec<f64>, f64)> {
    struct Probe {
        q: f64,
        comp_grad: f64,
        field: f64,
        field_jac: f64,
    }
    let empirical = cfg.lipschitz == LipschitzMode::Empirical;
    let probes = collect(pts.len(), |i| {
        let x = &pts[i];
        let (q, f) = decrease_at(h, field, x)?;
        let q = finite_at(q, i, "decrease condition")?;
        let n = x.len();
        let mut comp = 0.0;
        let mut jac = 0.0;
        let mut xp = x.clone();
        for j in 0..n {
            let d = fd_step(x[j]);
            xp[j] = x[j] + d;
            let hi = if empirical { decrease_at(h, field, &xp)?.0 } else { 0.0 };
            let fhi = if empirical { Vec::new() } else { field.eval(&xp)? };
            xp[j] = x[j] - d;
            let lo = if empirical { decrease_at(h, field, &xp)?.0 } else { 0.0 };
            let flo = if empirical { Vec::new() } else { field.eval(&xp)? };
            xp[j] = x[j];
            if empirical {
                let dq = (hi - lo) / (2.0 * d);
                comp += dq * dq;
            } else {
                jac += fhi
                    .iter()
                    .zip(&flo)
                    .map(|(a, b)| ((a - b) / (2.0 * d)).powi(2))
                    .sum::<f64>();
            }
        }
        Ok(Probe {
            q,
            comp_grad: comp.sqrt(),
            field: norm(&f),
            field_jac: jac.sqrt(),
        })
    })?;
    let slack: Vec<f64> = probes.iter().map(|p| -p.q).collect();
    let k = cfg.safety_factor;
    let lipschitz = match cfg.lipschitz {
        LipschitzMode::Empirical => k * max_of(probes.iter().map(|p| p.comp_grad)),
        LipschitzMode::Certified => {
            let missing = || Error::Precondition("certified Lipschitz mode needs a network certificate".into());
            let lh = h.certified_lipschitz().ok_or_else(missing)?;
            let lgrad = h.certified_gradient_lipschitz().ok_or_else(missing)?;
            let f_sup = k * max_of(probes.iter().map(|p| p.field));
            let l_f = k * max_of(probes.iter().map(|p| p.field_jac));
            // grad h . F + h varies by at most L_grad*|F| + |grad h|*L_F + L_h
            lgrad * f_sup + lh * l_f + lh
        }
    };
    Ok((slack, lipschitz))
}

/// Barrier conditions on the initial set, the unsafe set and the state set.
pub fn verify_barrier(
    b: &dyn ScalarField,
    field: &dyn VectorField,
    sets: &ProblemSets,
    cfg: &VerifyConfig,
) -> Result<CertReport> {
    cfg.validate()?;
    let g0 = cfg.grid(&sets.x0)?;
    let gu = cfg.grid(&sets.xu)?;
    let gx = cfg.grid(&sets.x)?;

    let (v0, n0) = values_on(b, &g0.points)?;
    let l0 = value_lipschitz(b, &n0, cfg)?;
    let c4a = Check {
        name: "4a",
        set: "initial",
        points: &g0.points,
        tau: g0.tau,
        slack: v0.iter().map(|v| -v).collect(),
        strict: false,
        base: 0.0,
        lipschitz: l0,
        counts_raw: None,
    }
    .finish();

    let (vu, nu) = values_on(b, &gu.points)?;
    let lu = value_lipschitz(b, &nu, cfg)?;
    let c4b = Check {
        name: "4b",
        set: "unsafe",
        points: &gu.points,
        tau: gu.tau,
        slack: vu,
        strict: true,
        base: cfg.eps1,
        lipschitz: lu,
        counts_raw: None,
    }
    .finish();

    let (slack, lc) = decrease_check(b, field, &gx.points, cfg)?;
    let c4c = Check {
        name: "4c",
        set: "state",
        points: &gx.points,
        tau: gx.tau,
        slack,
        strict: false,
        base: 0.0,
        lipschitz: lc,
        counts_raw: None,
    }
    .finish();

    Ok(CertReport::from_conditions(cfg, vec![c4a, c4b, c4c]))
}

/// Lyapunov-like conditions: a small value inside the goal neighbourhood,
/// positivity outside the goal set, and the decrease condition.
pub fn verify_lyapunov(
    v: &dyn ScalarField,
    field: &dyn VectorField,
    sets: &ProblemSets,
    cfg: &VerifyConfig,
) -> Result<CertReport> {
    cfg.validate()?;
    let mut out = Vec::new();

    // existence: some goal-neighbourhood grid point with V <= eps2
    let gg = cfg.grid(&sets.xg_bar)?;
    let (vg, _) = values_on(v, &gg.points)?;
    out.push(existence("7a-existence", "goal_bar", &gg, &vg, cfg.eps2));

    let gx = cfg.grid(&sets.x)?;
    if cfg.containment {
        // Grid points outside the goal set, plus those within tau inside its
        // boundary, so every state outside the goal set has a covering point.
        let shell: Vec<Vec<f64>> = gx
            .points
            .iter()
            .filter(|p| sets.xg.interior_depth(p).is_ok_and(|d| d <= gx.tau))
            .cloned()
            .collect();
        let outside: Vec<bool> = shell.iter().map(|p| !sets.xg.contains_unchecked(p)).collect();
        let (vs, ns) = values_on(v, &shell)?;
        let l = value_lipschitz(v, &ns, cfg)?;
        out.push(
            Check {
                name: "7a-containment",
                set: "state minus goal",
                points: &shell,
                tau: gx.tau,
                slack: vs,
                strict: true,
                base: cfg.eps3(),
                lipschitz: l,
                counts_raw: Some(outside),
            }
            .finish(),
        );
    }

    let (slack, lc) = decrease_check(v, field, &gx.points, cfg)?;
    out.push(
        Check {
            name: "7b",
            set: "state",
            points: &gx.points,
            tau: gx.tau,
            slack,
            strict: false,
            base: 0.0,
            lipschitz: lc,
            counts_raw: None,
        }
        .finish(),
    );
    Ok(CertReport::from_conditions(cfg, out))
}

/// Existence of a grid point with `V <= eps`. Fails with the minimizer as
/// witness, where the raw inequality is violated.
fn existence(name: &str, set: &str, grid: &Grid, values: &[f64], eps: f64) -> ConditionResult {
    let pts = &grid.points;
    let slack: Vec<f64> = values.iter().map(|v| eps - v).collect();
    // largest slack wins; ties go to the lexicographically smaller point
    let best = (0..slack.len()).fold(None::<usize>, |acc, i| match acc {
        Some(j) if !worse((-slack[i], &pts[i]), (-slack[j], &pts[j])) => Some(j),
        _ => Some(i),
    });
    let margin = best.map_or(f64::NEG_INFINITY, |i| slack[i]);
    let status = if margin >= 0.0 {
        Status::Verified
    } else {
        Status::Violated
    };
    let failed = usize::from(status == Status::Violated);
    ConditionResult {
        name: name.to_string(),
        status,
        worst_margin: margin,
        witness: best.map(|i| pts[i].clone()),
        required_margin: 0.0,
        lipschitz: 0.0,
        set: set.to_string(),
        tau: grid.tau,
        grid_size: pts.len(),
        raw_failures: failed,
        tightened_failures: failed,
    }
}

/// Both partial reports; overall verified only when every condition is.
pub fn verify_all(
    b: &dyn ScalarField,
    v: &dyn ScalarField,
    field: &dyn VectorField,
    sets: &ProblemSets,
    cfg: &VerifyConfig,
) -> Result<CertReport> {
    Ok(verify_barrier(b, field, sets, cfg)?.merge(verify_lyapunov(v, field, sets, cfg)?))
}

/// Raw slack of a named condition at one point, as used by the verifier.
/// Useful for re-checking witnesses.
pub fn raw_slack(
    condition: &str,
    h: &dyn ScalarField,
    field: &dyn VectorField,
    x: &[f64],
    cfg: &VerifyConfig,
) -> Result<f64> {
    Ok(match condition {
        "4a" => -h.value(x)?,
        "4b" | "7a-containment" => h.value(x)?,
        "4c" | "7b" => -decrease_at(h, field, x)?.0,
        "7a-existence" => cfg.eps2 - h.value(x)?,
        other => return Err(Error::Precondition(format!("unknown condition {other:?}"))),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffnet::FnField;
    use crate::systems::FnVectorField;

    fn one_d_sets() -> ProblemSets {
        ProblemSets {
            x: StateSet::boxed(vec![-2.0], vec![2.0]).unwrap(),
            x0: StateSet::boxed(vec![-0.5], vec![0.5]).unwrap(),
            xu: StateSet::boxed(vec![1.5], vec![2.0]).unwrap(),
            xg: StateSet::boxed(vec![-0.1], vec![0.1]).unwrap(),
            xg_bar: StateSet::boxed(vec![-0.1], vec![0.1]).unwrap(),
        }
    }

    fn decay() -> FnVectorField<impl Fn(&[f64]) -> Vec<f64> + Sync> {
        FnVectorField {
            dim: 1,
            f: |x: &[f64]| vec![-x[0]],
        }
    }

    #[test]
    fn quadratic_barrier_verifies() {
        let b = FnField::new(1, |x: &[f64]| x[0] * x[0] - 1.0, |x: &[f64]| vec![2.0 * x[0]]);
        let cfg = VerifyConfig {
            tau: 0.01,
            ..VerifyConfig::default()
        };
        let r = verify_barrier(&b, &decay(), &one_d_sets(), &cfg).unwrap();
        assert_eq!(r.status, Status::Verified, "{}", r.summary());
        assert!((r.condition("4a").unwrap().worst_margin - 0.75).abs() < 1e-12);
        assert!((r.condition("4b").unwrap().worst_margin - 1.25).abs() < 1e-12);
    }

    #[test]
    fn positive_constant_violates_initial_condition() {
        let b = FnField::new(1, |_: &[f64]| 1.0, |_: &[f64]| vec![0.0]);
        let r = verify_barrier(&b, &decay(), &one_d_sets(), &VerifyConfig::default()).unwrap();
        let c = r.condition("4a").unwrap();
        assert_eq!(c.status, Status::Violated);
        let w = c.witness.as_ref().unwrap();
        assert!(one_d_sets().x0.contains(w).unwrap());
        assert_eq!(r.status, Status::Violated);
    }

    #[test]
    fn witness_ties_break_lexicographically() {
        let b = FnField::new(1, |_: &[f64]| 1.0, |_: &[f64]| vec![0.0]);
        let r = verify_barrier(&b, &decay(), &one_d_sets(), &VerifyConfig::default()).unwrap();
        assert_eq!(r.condition("4a").unwrap().witness, Some(vec![-0.5]));
    }

    #[test]
    fn zero_lyapunov_fails_containment_only() {
        let v = FnField::new(1, |_: &[f64]| 0.0, |_: &[f64]| vec![0.0]);
        let sets = one_d_sets();
        let r = verify_lyapunov(&v, &decay(), &sets, &VerifyConfig::default()).unwrap();
        assert_eq!(r.condition("7a-existence").unwrap().status, Status::Verified);
        let c = r.condition("7a-containment").unwrap();
        assert_eq!(c.status, Status::Violated);
        assert!(!sets.xg.contains(c.witness.as_ref().unwrap()).unwrap());
    }

    #[test]
    fn report_serializes() {
        let b = FnField::new(1, |x: &[f64]| x[0] * x[0] - 1.0, |x: &[f64]| vec![2.0 * x[0]]);
        let r = verify_barrier(&b, &decay(), &one_d_sets(), &VerifyConfig::default()).unwrap();
        let back: CertReport = serde_json::from_str(&r.to_json().unwrap()).unwrap();
        assert_eq!(back, r);
        assert!(r.summary().starts_with("overall: verified"));
    }

    #[test]
    fn certified_mode_needs_network_bounds() {
        let b = FnField::new(1, |x: &[f64]| x[0], |_: &[f64]| vec![1.0]);
        let cfg = VerifyConfig {
            lipschitz: LipschitzMode::Certified,
            ..VerifyConfig::default()
        };
        assert!(matches!(
            verify_barrier(&b, &decay(), &one_d_sets(), &cfg),
            Err(Error::Precondition(_))
        ));
    }

    #[test]
    fn grid_cap_surfaces_as_resource_error() {
        let b = FnField::new(1, |x: &[f64]| x[0], |_: &[f64]| vec![1.0]);
        let cfg = VerifyConfig {
            tau: 1e-6,
            grid_cap: 1000,
            ..VerifyConfig::default()
        };
        assert!(matches!(
            verify_barrier(&b, &decay(), &one_d_sets(), &cfg),
            Err(Error::Resource { .. })
        ));
    }
}
