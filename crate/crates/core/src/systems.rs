//! Continuous-time benchmark dynamics `x' = f(x, u)` with analytic control
//! Jacobians.

use std::collections::BTreeMap;

use crate::diffnet::Policy;
use crate::error::{Error, Result};

/// Distance kept from the vehicle model's singularities.
pub const VEHICLE_GUARD_MARGIN: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq)]
pub enum Dynamics {
    /// State `[angle, rate]`, torque input.
    Pendulum { g: f64, l: f64, mass: f64, damping: f64 },
    /// State `[x, theta, x_dot, theta_dot]`, horizontal force input.
    Cartpole { m_cart: f64, m_pole: f64, g: f64, l: f64 },
    /// Path-tracking errors `[d_e, theta_e]` against a unit-circle reference,
    /// steering-angle input.
    Vehicle { speed: f64, wheelbase: f64 },
    /// Planar UAV `[x, y, theta, x_dot, y_dot, theta_dot]`, two rotor thrusts.
    Uav { mass: f64, g: f64, inertia: f64, arm: f64 },
    /// `x' = A x + B u`, row-major `A` (n x n) and `B` (n x m).
    Linear { a: Vec<f64>, b: Vec<f64> },
}

#[derive(Clone, Debug, PartialEq)]
pub struct SystemModel {
    name: String,
    n: usize,
    m: usize,
    dynamics: Dynamics,
}

impl SystemModel {
    pub fn pendulum() -> Self {
        SystemModel {
            name: "pendulum".into(),
            n: 2,
            m: 1,
            dynamics: Dynamics::Pendulum {
                g: 10.0,
                l: 1.0,
                mass: 1.0,
                damping: 0.1,
            },
        }
    }

    pub fn cartpole() -> Self {
        SystemModel {
            name: "cartpole".into(),
            n: 4,
            m: 1,
            dynamics: Dynamics::Cartpole {
                m_cart: 1.0,
                m_pole: 1.0,
                g: 1.0,
                l: 1.0,
            },
        }
    }

    pub fn vehicle() -> Self {
        SystemModel {
            name: "vehicle".into(),
            n: 2,
            m: 1,
            dynamics: Dynamics::Vehicle {
                speed: 6.0,
                wheelbase: 1.0,
            },
        }
    }

    pub fn uav() -> Self {
        SystemModel {
            name: "uav".into(),
            n: 6,
            m: 2,
            dynamics: Dynamics::Uav {
                mass: 0.1,
                g: 0.1,
                inertia: 0.1,
                arm: 0.1,
            },
        }
    }

    pub fn linear(name: &str, a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<Self> {
        let n = a.len();
        let m = b.first().map_or(0, Vec::len);
        if n == 0 || a.iter().any(|r| r.len() != n) || b.len() != n || b.iter().any(|r| r.len() != m) {
            return Err(Error::Config(format!("linear system {name}: inconsistent A/B shapes")));
        }
        Ok(SystemModel {
            name: name.into(),
            n,
            m,
            dynamics: Dynamics::Linear {
                a: a.concat(),
                b: b.concat(),
            },
        })
    }

    pub fn by_name(name: &str) -> Result<Self> {
        match name {
            "pendulum" => Ok(Self::pendulum()),
            "cartpole" => Ok(Self::cartpole()),
            "vehicle" => Ok(Self::vehicle()),
            "uav" => Ok(Self::uav()),
            other => Err(Error::Config(format!(
                "unknown system {other:?} (expected pendulum | cartpole | vehicle | uav)"
            ))),
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn state_dim(&self) -> usize {
        self.n
    }

    pub fn control_dim(&self) -> usize {
        self.m
    }

    pub fn dynamics(&self) -> &Dynamics {
        &self.dynamics
    }

    /// Named physical constants.
    pub fn params(&self) -> BTreeMap<&'static str, f64> {
        let mut p = BTreeMap::new();
        match self.dynamics {
            Dynamics::Pendulum { g, l, mass, damping } => {
                p.insert("g", g);
                p.insert("l", l);
                p.insert("m", mass);
                p.insert("d", damping);
            }
            Dynamics::Cartpole { m_cart, m_pole, g, l } => {
                p.insert("m_c", m_cart);
                p.insert("m_p", m_pole);
                p.insert("g", g);
                p.insert("l", l);
            }
            Dynamics::Vehicle { speed, wheelbase } => {
                p.insert("v", speed);
                p.insert("L", wheelbase);
            }
            Dynamics::Uav { mass, g, inertia, arm } => {
                p.insert("m", mass);
                p.insert("g", g);
                p.insert("I", inertia);
                p.insert("r", arm);
            }
            Dynamics::Linear { .. } => {}
        }
        p
    }

    fn check_dims(&self, x: &[f64], u: &[f64]) -> Result<()> {
        if x.len() != self.n {
            return Err(Error::shape(self.n, x.len()));
        }
        if u.len() != self.m {
            return Err(Error::shape(self.m, u.len()));
        }
        Ok(())
    }

    /// Rejects states and controls where the model is singular.
    pub fn domain_guard(&self, x: &[f64], u: &[f64]) -> Result<()> {
        if let Dynamics::Vehicle { .. } = self.dynamics {
            let limit_d = 1.0 - VEHICLE_GUARD_MARGIN;
            if !(x[0].abs() < limit_d) {
                return Err(Error::Domain {
                    system: self.name.clone(),
                    bound: format!("|d_e| < {limit_d} violated by d_e = {}", x[0]),
                });
            }
            let limit_u = std::f64::consts::FRAC_PI_2 - VEHICLE_GUARD_MARGIN;
            if !(u[0].abs() < limit_u) {
                return Err(Error::Domain {
                    system: self.name.clone(),
                    bound: format!("|u| < pi/2 - 1e-3 violated by u = {}", u[0]),
                });
            }
        }
        Ok(())
    }

    /// `f(x, u)`
    pub fn rhs(&self, x: &[f64], u: &[f64]) -> Result<Vec<f64>> {
        self.check_dims(x, u)?;
        self.domain_guard(x, u)?;
        Ok(match self.dynamics {
            Dynamics::Pendulum { g, l, mass, damping } => {
                let ml2 = mass * l * l;
                vec![x[1], -(g / l) * x[0].sin() - damping / ml2 * x[1] + u[0] / ml2]
            }
            Dynamics::Cartpole { m_cart, m_pole, g, l } => {
                let (s, c) = x[1].sin_cos();
                let td = x[3];
                let den = m_cart + m_pole * s * s;
                let xdd = (u[0] + m_pole * s * (l * td * td - g * c)) / den;
                let tdd = (u[0] * c + m_pole * l * td * td * c * s - (m_cart + m_pole) * g * s) / (l * den);
                vec![x[2], x[3], xdd, tdd]
            }
            Dynamics::Vehicle { speed, wheelbase } => {
                let (s, c) = x[1].sin_cos();
                vec![speed * s, speed * u[0].tan() / wheelbase - speed * c / (1.0 - x[0])]
            }
            Dynamics::Uav { mass, g, inertia, arm } => {
                let (s, c) = x[2].sin_cos();
                let thrust = u[0] + u[1];
                vec![
                    x[3],
                    x[4],
                    x[5],
                    -thrust * s / mass,
                    (thrust * c - mass * g) / mass,
                    arm * (u[0] - u[1]) / inertia,
                ]
            }
            Dynamics::Linear { ref a, ref b } => (0..self.n)
                .map(|i| {
                    let ax: f64 = (0..self.n).map(|j| a[i * self.n + j] * x[j]).sum();
                    let bu: f64 = (0..self.m).map(|j| b[i * self.m + j] * u[j]).sum();
                    ax + bu
                })
                .collect(),
        })
    }

    /// `df/du`, row-major `n x m`.
    pub fn jac_u(&self, x: &[f64], u: &[f64]) -> Result<Vec<f64>> {
        self.check_dims(x, u)?;
        self.domain_guard(x, u)?;
        Ok(match self.dynamics {
            Dynamics::Pendulum { l, mass, .. } => vec![0.0, 1.0 / (mass * l * l)],
            Dynamics::Cartpole { m_cart, m_pole, l, .. } => {
                let (s, c) = x[1].sin_cos();
                let den = m_cart + m_pole * s * s;
                vec![0.0, 0.0, 1.0 / den, c / (l * den)]
            }
            Dynamics::Vehicle { speed, wheelbase } => {
                let sec = 1.0 / u[0].cos();
                vec![0.0, speed * sec * sec / wheelbase]
            }
            Dynamics::Uav { mass, inertia, arm, .. } => {
                let (s, c) = x[2].sin_cos();
                let r = arm / inertia;
                vec![
                    0.0,
                    0.0, //
                    0.0,
                    0.0, //
                    0.0,
                    0.0, //
                    -s / mass,
                    -s / mass, //
                    c / mass,
                    c / mass, //
                    r,
                    -r,
                ]
            }
            Dynamics::Linear { ref b, .. } => b.clone(),
        })
    }
}

/// Autonomous vector field `x' = F(x)`.
pub trait VectorField: Sync {
    fn dim(&self) -> usize;
    fn eval(&self, x: &[f64]) -> Result<Vec<f64>>;
}

/// `x -> f(x, u(x))`
#[derive(Clone, Copy)]
pub struct ClosedLoop<'a> {
    pub sys: &'a SystemModel,
    pub policy: &'a Policy,
}

pub fn closed_loop<'a>(sys: &'a SystemModel, policy: &'a Policy) -> Result<ClosedLoop<'a>> {
    if policy.control_dim() != sys.control_dim() {
        return Err(Error::Config(format!(
            "policy produces {} controls, {} expects {}",
            policy.control_dim(),
            sys.name(),
            sys.control_dim()
        )));
    }
    if policy.state_dim() != sys.state_dim() {
        return Err(Error::Config(format!(
            "policy reads {} states, {} has {}",
            policy.state_dim(),
            sys.name(),
            sys.state_dim()
        )));
    }
    Ok(ClosedLoop { sys, policy })
}

impl ClosedLoop<'_> {
    /// Field value together with the control that produced it.
    pub fn eval_with_control(&self, x: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let u = self.policy.control(x)?;
        let f = self.sys.rhs(x, &u)?;
        Ok((f, u))
    }
}

impl VectorField for ClosedLoop<'_> {
    fn dim(&self) -> usize {
        self.sys.state_dim()
    }

    fn eval(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.eval_with_control(x)?.0)
    }
}

/// Vector field from a plain function.
pub struct FnVectorField<F> {
    pub dim: usize,
    pub f: F,
}

impl<F> VectorField for FnVectorField<F>
where
    F: Fn(&[f64]) -> Vec<f64> + Sync,
{
    fn dim(&self) -> usize {
        self.dim
    }

    fn eval(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.dim {
            return Err(Error::shape(self.dim, x.len()));
        }
        Ok((self.f)(x))
    }
}
