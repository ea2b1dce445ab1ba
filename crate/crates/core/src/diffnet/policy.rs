use super::{MlpNet, ParamVector};
use crate::error::{Error, Result};

/// `u = K x`, no bias. `gain` is row-major `m x n`.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearPolicy {
    m: usize,
    n: usize,
    gain: Vec<f64>,
}

impl LinearPolicy {
    pub fn new(m: usize, n: usize, gain: Vec<f64>) -> Result<Self> {
        if gain.len() != m * n || m == 0 || n == 0 {
            return Err(Error::Network(format!(
                "gain has {} entries, expected {m}x{n}",
                gain.len()
            )));
        }
        if gain.iter().any(|g| !g.is_finite()) {
            return Err(Error::Network("non-finite gain".into()));
        }
        Ok(LinearPolicy { m, n, gain })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let m = rows.len();
        let n = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != n) {
            return Err(Error::Network("ragged gain matrix".into()));
        }
        Self::new(m, n, rows.concat())
    }

    pub fn zeros(m: usize, n: usize) -> Self {
        LinearPolicy {
            m,
            n,
            gain: vec![0.0; m * n],
        }
    }

    pub fn gain(&self) -> &[f64] {
        &self.gain
    }

    pub fn rows(&self) -> Vec<Vec<f64>> {
        self.gain.chunks(self.n).map(<[f64]>::to_vec).collect()
    }
}

/// Control policy: the linear gain used in all benchmark runs, or a
/// scalar-head network with `m` outputs.
#[derive(Clone, Debug, PartialEq)]
pub enum Policy {
    Linear(LinearPolicy),
    Mlp(MlpNet),
}

impl Policy {
    pub fn state_dim(&self) -> usize {
        match self {
            Policy::Linear(p) => p.n,
            Policy::Mlp(net) => net.input_dim(),
        }
    }

    pub fn control_dim(&self) -> usize {
        match self {
            Policy::Linear(p) => p.m,
            Policy::Mlp(net) => net.output_dim(),
        }
    }

    pub fn control(&self, x: &[f64]) -> Result<Vec<f64>> {
        match self {
            Policy::Linear(p) => {
                if x.len() != p.n {
                    return Err(Error::shape(p.n, x.len()));
                }
                Ok(p.gain.chunks(p.n).map(|row| super::dot(row, x)).collect())
            }
            Policy::Mlp(net) => net.eval_vec(x),
        }
    }

    pub fn param_count(&self) -> usize {
        match self {
            Policy::Linear(p) => p.gain.len(),
            Policy::Mlp(net) => net.param_count(),
        }
    }

    pub fn params(&self) -> ParamVector {
        match self {
            Policy::Linear(p) => ParamVector(p.gain.clone()),
            Policy::Mlp(net) => net.params(),
        }
    }

    pub fn set_params(&mut self, params: &ParamVector) -> Result<()> {
        match self {
            Policy::Linear(p) => {
                if params.len() != p.gain.len() {
                    return Err(Error::shape(p.gain.len(), params.len()));
                }
                if params.0.iter().any(|v| !v.is_finite()) {
                    return Err(Error::Network("non-finite gain".into()));
                }
                p.gain.copy_from_slice(&params.0);
                Ok(())
            }
            Policy::Mlp(net) => net.set_params(params),
        }
    }

    /// Accumulate `d(upstream . u(x)) / d params` into `grad`.
    pub fn accumulate_param_grad(&self, x: &[f64], upstream: &[f64], grad: &mut [f64]) -> Result<()> {
        match self {
            Policy::Linear(p) => {
                if upstream.len() != p.m {
                    return Err(Error::shape(p.m, upstream.len()));
                }
                for (r, u) in upstream.iter().enumerate() {
                    for (g, xj) in grad[r * p.n..(r + 1) * p.n].iter_mut().zip(x) {
                        *g += u * xj;
                    }
                }
                Ok(())
            }
            Policy::Mlp(net) => net.accumulate_vec_param_grad(x, upstream, grad),
        }
    }

    /// FNV-1a hash over the parameter bits, for trajectory metadata.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for v in self.params().0 {
            for b in v.to_bits().to_le_bytes() {
                h ^= u64::from(b);
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        }
        h
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_control_is_matrix_vector_product() {
        let p = Policy::Linear(LinearPolicy::from_rows(&[vec![1.0, 2.0], vec![-1.0, 0.5]]).unwrap());
        assert_eq!(p.control(&[3.0, 4.0]).unwrap(), vec![11.0, -1.0]);
        assert_eq!(p.control_dim(), 2);
        assert!(p.control(&[1.0]).is_err());
    }

    #[test]
    fn linear_param_grad_is_outer_product() {
        let p = Policy::Linear(LinearPolicy::zeros(2, 3));
        let mut g = vec![0.0; 6];
        p.accumulate_param_grad(&[1.0, 2.0, 3.0], &[10.0, -1.0], &mut g)
            .unwrap();
        assert_eq!(g, vec![10.0, 20.0, 30.0, -1.0, -2.0, -3.0]);
    }

    #[test]
    fn ragged_rows_rejected() {
        assert!(LinearPolicy::from_rows(&[vec![1.0], vec![1.0, 2.0]]).is_err());
    }
}
