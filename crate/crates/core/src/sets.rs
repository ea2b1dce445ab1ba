//! State-set geometry: membership, distance, uniform sampling and covering
//! grids with a known covering radius.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Default cap on the number of grid points.
pub const DEFAULT_GRID_CAP: usize = 10_000_000;

/// Rejection sampling gives up below this acceptance rate.
const MIN_ACCEPTANCE: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq)]
pub enum StateSet {
    Box { lb: Vec<f64>, ub: Vec<f64> },
    Ball { center: Vec<f64>, radius: f64 },
    Annulus { center: Vec<f64>, r_in: f64, r_out: f64 },
    Point { center: Vec<f64> },
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

impl StateSet {
    pub fn boxed(lb: Vec<f64>, ub: Vec<f64>) -> Result<Self> {
        StateSet::Box { lb, ub }.validated()
    }

    pub fn ball(center: Vec<f64>, radius: f64) -> Result<Self> {
        StateSet::Ball { center, radius }.validated()
    }

    pub fn annulus(center: Vec<f64>, r_in: f64, r_out: f64) -> Result<Self> {
        StateSet::Annulus { center, r_in, r_out }.validated()
    }

    pub fn point(center: Vec<f64>) -> Result<Self> {
        StateSet::Point { center }.validated()
    }

    /// Check the invariants and hand the set back.
    pub fn validated(self) -> Result<Self> {
        let finite = |v: &[f64]| v.iter().all(|x| x.is_finite());
        match &self {
            StateSet::Box { lb, ub } => {
                if lb.is_empty() || lb.len() != ub.len() {
                    return Err(Error::Set("box bounds must have equal, non-zero length".into()));
                }
                if !finite(lb) || !finite(ub) || lb.iter().zip(ub).any(|(l, u)| l > u) {
                    return Err(Error::Set("box needs finite lb <= ub".into()));
                }
            }
            StateSet::Ball { center, radius } => {
                if center.is_empty() || !finite(center) || !radius.is_finite() || *radius < 0.0 {
                    return Err(Error::Set("ball needs a finite center and radius >= 0".into()));
                }
            }
            StateSet::Annulus { center, r_in, r_out } => {
                if center.is_empty()
                    || !finite(center)
                    || !r_in.is_finite()
                    || !r_out.is_finite()
                    || *r_in < 0.0
                    || r_in > r_out
                {
                    return Err(Error::Set("annulus needs 0 <= r_in <= r_out".into()));
                }
            }
            StateSet::Point { center } => {
                if center.is_empty() || !finite(center) {
                    return Err(Error::Set("point needs a finite center".into()));
                }
            }
        }
        Ok(self)
    }

    pub fn dim(&self) -> usize {
        match self {
            StateSet::Box { lb, .. } => lb.len(),
            StateSet::Ball { center, .. } | StateSet::Annulus { center, .. } | StateSet::Point { center } => {
                center.len()
            }
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            StateSet::Box { .. } => "box",
            StateSet::Ball { .. } => "ball",
            StateSet::Annulus { .. } => "annulus",
            StateSet::Point { .. } => "point",
        }
    }

    fn check(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.dim() {
            return Err(Error::shape(self.dim(), x.len()));
        }
        Ok(())
    }

    /// Membership with closed boundaries.
    pub fn contains(&self, x: &[f64]) -> Result<bool> {
        self.check(x)?;
        Ok(self.contains_unchecked(x))
    }

    pub(crate) fn contains_unchecked(&self, x: &[f64]) -> bool {
        match self {
            StateSet::Box { lb, ub } => x.iter().zip(lb.iter().zip(ub)).all(|(v, (l, u))| l <= v && v <= u),
            StateSet::Ball { center, radius } => dist(x, center) <= *radius,
            StateSet::Annulus { center, r_in, r_out } => {
                let r = dist(x, center);
                *r_in <= r && r <= *r_out
            }
            StateSet::Point { center } => x == center.as_slice(),
        }
    }

    /// Euclidean distance from `x` to the set; zero inside.
    pub fn distance(&self, x: &[f64]) -> Result<f64> {
        self.check(x)?;
        Ok(self.distance_unchecked(x))
    }

    pub(crate) fn distance_unchecked(&self, x: &[f64]) -> f64 {
        match self {
            StateSet::Box { lb, ub } => x
                .iter()
                .zip(lb.iter().zip(ub))
                .map(|(v, (l, u))| {
                    let d = if v < l {
                        l - v
                    } else if v > u {
                        v - u
                    } else {
                        0.0
                    };
                    d * d
                })
                .sum::<f64>()
                .sqrt(),
            StateSet::Ball { center, radius } => (dist(x, center) - radius).max(0.0),
            StateSet::Annulus { center, r_in, r_out } => {
                let r = dist(x, center);
                if r < *r_in {
                    r_in - r
                } else if r > *r_out {
                    r - r_out
                } else {
                    0.0
                }
            }
            StateSet::Point { center } => dist(x, center),
        }
    }

    /// Distance from `x` to the complement of the set (how deep `x` sits
    /// inside). Non-positive outside.
    pub fn interior_depth(&self, x: &[f64]) -> Result<f64> {
        self.check(x)?;
        Ok(match self {
            StateSet::Box { lb, ub } => x
                .iter()
                .zip(lb.iter().zip(ub))
                .map(|(v, (l, u))| (v - l).min(u - v))
                .fold(f64::INFINITY, f64::min),
            StateSet::Ball { center, radius } => radius - dist(x, center),
            StateSet::Annulus { center, r_in, r_out } => {
                let r = dist(x, center);
                (r - r_in).min(r_out - r)
            }
            StateSet::Point { .. } => -self.distance_unchecked(x),
        })
    }

    /// Nearest point of the set.
    pub fn project(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check(x)?;
        Ok(match self {
            StateSet::Box { lb, ub } => x
                .iter()
                .zip(lb.iter().zip(ub))
                .map(|(v, (l, u))| v.clamp(*l, *u))
                .collect(),
            StateSet::Ball { center, radius } => radial_clamp(x, center, 0.0, *radius),
            StateSet::Annulus { center, r_in, r_out } => radial_clamp(x, center, *r_in, *r_out),
            StateSet::Point { center } => center.clone(),
        })
    }

    /// Axis-aligned bounding box `(lb, ub)`.
    pub fn bounds(&self) -> (Vec<f64>, Vec<f64>) {
        match self {
            StateSet::Box { lb, ub } => (lb.clone(), ub.clone()),
            StateSet::Ball { center, radius: r } | StateSet::Annulus { center, r_out: r, .. } => (
                center.iter().map(|c| c - r).collect(),
                center.iter().map(|c| c + r).collect(),
            ),
            StateSet::Point { center } => (center.clone(), center.clone()),
        }
    }

    fn is_convex(&self) -> bool {
        match self {
            StateSet::Annulus { r_in, .. } => *r_in == 0.0,
            _ => true,
        }
    }

    /// `n` uniform points, reproducible from `seed`. Balls and annuli use
    /// rejection from the bounding box.
    pub fn sample_uniform(&self, n: usize, seed: u64) -> Result<SampleBatch> {
        if n == 0 {
            return Err(Error::Precondition("sample count must be >= 1".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let points = self.sample_with(n, &mut rng)?;
        Ok(SampleBatch {
            points,
            source_set: self.clone(),
            seed,
        })
    }

    /// Draw from an existing generator (used when several batches share one stream).
    pub fn sample_with<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<Vec<Vec<f64>>> {
        if let StateSet::Point { center } = self {
            return Ok(vec![center.clone(); n]);
        }
        let (lb, ub) = self.bounds();
        let draw = |rng: &mut R| -> Vec<f64> {
            lb.iter()
                .zip(&ub)
                .map(|(l, u)| if l == u { *l } else { rng.gen_range(*l..=*u) })
                .collect()
        };
        let mut out = Vec::with_capacity(n);
        if let StateSet::Box { .. } = self {
            for _ in 0..n {
                out.push(draw(rng));
            }
            return Ok(out);
        }
        let mut attempts: u64 = 0;
        while out.len() < n {
            let p = draw(rng);
            attempts += 1;
            if self.contains_unchecked(&p) {
                out.push(p);
            } else if attempts >= 100_000 && (out.len() as f64) < MIN_ACCEPTANCE * attempts as f64 {
                return Err(Error::Sampling(format!(
                    "{} acceptance rate below {MIN_ACCEPTANCE} after {attempts} draws",
                    self.kind()
                )));
            }
        }
        Ok(out)
    }

    /// Lattice grid over the set with covering radius at most `target_tau`.
    pub fn make_grid(&self, target_tau: f64) -> Result<Grid> {
        self.make_grid_capped(target_tau, DEFAULT_GRID_CAP)
    }

    pub fn make_grid_capped(&self, target_tau: f64, cap: usize) -> Result<Grid> {
        if !(target_tau > 0.0) || !target_tau.is_finite() {
            return Err(Error::Precondition("target tau must be positive".into()));
        }
        if let StateSet::Point { center } = self {
            return Ok(Grid {
                points: vec![center.clone()],
                tau: 0.0,
                spacing: vec![0.0; center.len()],
            });
        }
        // Outside lattice points within reach are projected onto the set. For
        // convex sets projection is non-expansive and keeps the lattice radius;
        // otherwise the radius can at most double.
        let lattice_tau = if self.is_convex() { target_tau } else { target_tau / 2.0 };
        let (lb, ub) = self.bounds();
        let lattice = Lattice::new(&lb, &ub, lattice_tau);
        let total = lattice.count();
        if total > cap as u128 {
            return Err(Error::Resource { points: total, cap });
        }
        let reach = lattice.tau;
        let mut points = Vec::new();
        lattice.for_each(|p| {
            if self.contains_unchecked(p) {
                points.push(p.to_vec());
            } else if self.distance_unchecked(p) <= reach {
                points.push(self.project(p).expect("dimension checked"));
            }
        });
        let tau = if self.is_convex() {
            lattice.tau
        } else {
            2.0 * lattice.tau
        };
        Ok(Grid {
            points,
            tau,
            spacing: lattice.spacing,
        })
    }

    /// Grid whose point count is close to `target_points` (at least that many
    /// when the cap allows). The achieved covering radius is reported as usual.
    pub fn make_grid_with_points(&self, target_points: usize, cap: usize) -> Result<Grid> {
        if target_points == 0 {
            return Err(Error::Precondition("grid point count must be >= 1".into()));
        }
        if let StateSet::Point { .. } = self {
            return self.make_grid_capped(1.0, cap);
        }
        let (lb, ub) = self.bounds();
        let mut tau = lb.iter().zip(&ub).map(|(l, u)| u - l).fold(0.0, f64::max).max(1e-9);
        loop {
            let g = self.make_grid_capped(tau, cap)?;
            if g.points.len() >= target_points {
                return Ok(g);
            }
            tau *= 0.95;
        }
    }
}

fn radial_clamp(x: &[f64], center: &[f64], r_in: f64, r_out: f64) -> Vec<f64> {
    let d: Vec<f64> = x.iter().zip(center).map(|(a, c)| a - c).collect();
    let r = norm(&d);
    let target = r.clamp(r_in, r_out);
    if r == target {
        return x.to_vec();
    }
    if r == 0.0 {
        // any direction is nearest; take the first axis
        let mut p = center.to_vec();
        p[0] += target;
        return p;
    }
    // Rounding can leave the scaled point a hair outside the shell; nudge
    // the scale until the membership test agrees.
    let mut s = target / r;
    let mut p: Vec<f64> = center.iter().zip(&d).map(|(c, v)| c + v * s).collect();
    for _ in 0..16 {
        let rp = dist(&p, center);
        if rp > r_out {
            s *= 1.0 - f64::EPSILON;
        } else if rp < r_in {
            s *= 1.0 + f64::EPSILON;
        } else {
            break;
        }
        p = center.iter().zip(&d).map(|(c, v)| c + v * s).collect();
    }
    p
}

/// Regular lattice over a box, spacing chosen so the covering radius
/// `0.5 * |spacing|` stays below the requested tau.
pub(crate) struct Lattice {
    lb: Vec<f64>,
    counts: Vec<usize>,
    spacing: Vec<f64>,
    tau: f64,
}

impl Lattice {
    pub(crate) fn new(lb: &[f64], ub: &[f64], tau: f64) -> Self {
        let n = lb.len();
        let h = 2.0 * tau / (n as f64).sqrt();
        let mut counts = Vec::with_capacity(n);
        let mut spacing = Vec::with_capacity(n);
        for (l, u) in lb.iter().zip(ub) {
            let w = u - l;
            if w == 0.0 {
                counts.push(1);
                spacing.push(0.0);
            } else {
                let k = (w / h).ceil().max(1.0) as usize + 1;
                counts.push(k);
                spacing.push(w / (k - 1) as f64);
            }
        }
        let tau = 0.5 * norm(&spacing);
        Lattice {
            lb: lb.to_vec(),
            counts,
            spacing,
            tau,
        }
    }

    pub(crate) fn count(&self) -> u128 {
        self.counts.iter().map(|&c| c as u128).product()
    }

    pub(crate) fn for_each<F: FnMut(&[f64])>(&self, mut f: F) {
        let n = self.lb.len();
        let mut idx = vec![0usize; n];
        let mut p = self.lb.clone();
        loop {
            f(&p);
            let mut d = n;
            loop {
                if d == 0 {
                    return;
                }
                d -= 1;
                idx[d] += 1;
                if idx[d] < self.counts[d] {
                    p[d] = self.lb[d] + idx[d] as f64 * self.spacing[d];
                    break;
                }
                idx[d] = 0;
                p[d] = self.lb[d];
            }
        }
    }
}

/// Uniform samples drawn from one set.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleBatch {
    pub points: Vec<Vec<f64>>,
    pub source_set: StateSet,
    pub seed: u64,
}

impl SampleBatch {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Finite point set covering a state set: every set point lies within `tau`
/// of some grid point.
#[derive(Clone, Debug, PartialEq)]
pub struct Grid {
    pub points: Vec<Vec<f64>>,
    pub tau: f64,
    pub spacing: Vec<f64>,
}

impl Grid {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

// ---------------------------------------------------------------------------
// text syntax: `annulus center=[0,0] r_in=2.5 r_out=3.0`

impl fmt::Display for StateSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fn list(v: &[f64]) -> String {
            let items: Vec<String> = v.iter().map(|x| format!("{x:?}")).collect();
            format!("[{}]", items.join(","))
        }
        match self {
            StateSet::Box { lb, ub } => write!(f, "box lb={} ub={}", list(lb), list(ub)),
            StateSet::Ball { center, radius } => {
                write!(f, "ball center={} radius={radius:?}", list(center))
            }
            StateSet::Annulus { center, r_in, r_out } => {
                write!(f, "annulus center={} r_in={r_in:?} r_out={r_out:?}", list(center))
            }
            StateSet::Point { center } => write!(f, "point center={}", list(center)),
        }
    }
}

impl FromStr for StateSet {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        // drop whitespace inside brackets so lists tokenize as one word
        let mut cleaned = String::with_capacity(s.len());
        let mut depth = 0;
        for ch in s.chars() {
            match ch {
                '[' => depth += 1,
                ']' => depth -= 1,
                _ => {}
            }
            if depth > 0 && ch.is_whitespace() {
                continue;
            }
            cleaned.push(ch);
        }
        let mut words = cleaned.split_whitespace();
        let kind = words.next().ok_or_else(|| Error::Set("empty set definition".into()))?;
        let mut fields = std::collections::BTreeMap::new();
        for w in words {
            let (k, v) = w
                .split_once('=')
                .ok_or_else(|| Error::Set(format!("expected key=value, got {w:?}")))?;
            fields.insert(k.to_string(), v.to_string());
        }
        let mut take = |k: &str| {
            fields
                .remove(k)
                .ok_or_else(|| Error::Set(format!("{kind} is missing `{k}`")))
        };
        let set = match kind {
            "box" => StateSet::Box {
                lb: parse_list(&take("lb")?)?,
                ub: parse_list(&take("ub")?)?,
            },
            "ball" => StateSet::Ball {
                center: parse_list(&take("center")?)?,
                radius: parse_num(&take("radius")?)?,
            },
            "annulus" => StateSet::Annulus {
                center: parse_list(&take("center")?)?,
                r_in: parse_num(&take("r_in")?)?,
                r_out: parse_num(&take("r_out")?)?,
            },
            "point" => StateSet::Point {
                center: parse_list(&take("center")?)?,
            },
            other => {
                return Err(Error::Set(format!(
                    "unknown set kind {other:?} (box | ball | annulus | point)"
                )))
            }
        };
        if let Some(k) = fields.keys().next() {
            return Err(Error::Set(format!("unexpected field `{k}` for {kind}")));
        }
        set.validated()
    }
}

fn parse_num(s: &str) -> Result<f64> {
    let t = s.trim();
    let v = match t {
        "pi" => std::f64::consts::PI,
        "-pi" => -std::f64::consts::PI,
        _ => t
            .parse::<f64>()
            .map_err(|_| Error::Set(format!("not a number: {t:?}")))?,
    };
    Ok(v)
}

fn parse_list(s: &str) -> Result<Vec<f64>> {
    let inner = s
        .trim()
        .strip_prefix('[')
        .and_then(|r| r.strip_suffix(']'))
        .ok_or_else(|| Error::Set(format!("expected [..] list, got {s:?}")))?;
    if inner.trim().is_empty() {
        return Ok(Vec::new());
    }
    inner.split(',').map(parse_num).collect()
}
