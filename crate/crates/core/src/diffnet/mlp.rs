use rand::Rng;
use serde::{Deserialize, Serialize};

use super::ParamVector;
use crate::error::{Error, Result};

/// How the last hidden activation is turned into the network output.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Head {
    /// Affine output layer, no activation.
    Scalar,
    /// Output is `phi . phi` where `phi` is the last hidden activation.
    Quadratic,
}

/// One dense layer, `out = W in + b`. `weight` is row-major `rows x cols`.
#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    pub rows: usize,
    pub cols: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Layer {
    fn zeros(rows: usize, cols: usize) -> Self {
        Layer {
            rows,
            cols,
            weight: vec![0.0; rows * cols],
            bias: vec![0.0; rows],
        }
    }

    #[inline]
    fn affine(&self, input: &[f64], out: &mut Vec<f64>) {
        out.clear();
        for r in 0..self.rows {
            let row = &self.weight[r * self.cols..(r + 1) * self.cols];
            out.push(dot(row, input) + self.bias[r]);
        }
    }

    #[inline]
    fn linear(&self, input: &[f64], out: &mut Vec<f64>) {
        out.clear();
        for r in 0..self.rows {
            let row = &self.weight[r * self.cols..(r + 1) * self.cols];
            out.push(dot(row, input));
        }
    }

    /// `out = W^T v`
    #[inline]
    fn transpose_mul(&self, v: &[f64], out: &mut Vec<f64>) {
        out.clear();
        out.resize(self.cols, 0.0);
        for (r, &vr) in v.iter().enumerate().take(self.rows) {
            if vr == 0.0 {
                continue;
            }
            let row = &self.weight[r * self.cols..(r + 1) * self.cols];
            for (o, w) in out.iter_mut().zip(row) {
                *o += w * vr;
            }
        }
    }

    fn frobenius(&self) -> f64 {
        self.weight.iter().map(|w| w * w).sum::<f64>().sqrt()
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Dense tanh network.
///
/// For [`Head::Scalar`] every layer but the last is followed by `tanh` and
/// `layer_dims` lists input, hidden and output widths. For [`Head::Quadratic`]
/// every layer is a tanh layer, the value is the squared norm of the last
/// activation, and the trailing entry of `layer_dims` is the `1` of that
/// scalar.
#[derive(Clone, Debug, PartialEq)]
pub struct MlpNet {
    layer_dims: Vec<usize>,
    layers: Vec<Layer>,
    head: Head,
    bias: bool,
}

/// Forward activations of one input, plus optional tangents along a direction.
pub(crate) struct Trace {
    /// `acts[0]` is the input, `acts[k]` the output of tanh layer `k-1`.
    acts: Vec<Vec<f64>>,
    /// Tangents of `acts`.
    tans: Vec<Vec<f64>>,
    /// Pre-activation tangents of each tanh layer.
    ztans: Vec<Vec<f64>>,
    out: Vec<f64>,
}

impl MlpNet {
    /// All-zero network.
    pub fn zeros(layer_dims: &[usize], head: Head, bias: bool) -> Result<Self> {
        if layer_dims.len() < 2 || layer_dims.contains(&0) {
            return Err(Error::Network(format!(
                "layer_dims must hold at least two positive widths, got {layer_dims:?}"
            )));
        }
        let affine = match head {
            Head::Scalar => layer_dims.len() - 1,
            Head::Quadratic => {
                if layer_dims.len() < 3 || *layer_dims.last().unwrap() != 1 {
                    return Err(Error::Network(format!(
                        "quadratic head needs dims [n, hidden.., 1], got {layer_dims:?}"
                    )));
                }
                layer_dims.len() - 2
            }
        };
        let layers = (0..affine)
            .map(|k| Layer::zeros(layer_dims[k + 1], layer_dims[k]))
            .collect();
        Ok(MlpNet {
            layer_dims: layer_dims.to_vec(),
            layers,
            head,
            bias,
        })
    }

    /// Weights uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`, biases zero.
    pub fn random<R: Rng + ?Sized>(layer_dims: &[usize], head: Head, bias: bool, rng: &mut R) -> Result<Self> {
        let mut net = Self::zeros(layer_dims, head, bias)?;
        for layer in &mut net.layers {
            let bound = 1.0 / (layer.cols as f64).sqrt();
            for w in &mut layer.weight {
                *w = rng.gen_range(-bound..=bound);
            }
        }
        Ok(net)
    }

    /// Build from explicit layers. Shapes must chain.
    pub fn from_layers(layers: Vec<Layer>, head: Head, bias: bool) -> Result<Self> {
        let first = layers.first().ok_or_else(|| Error::Network("no layers".into()))?;
        let mut dims = vec![first.cols];
        for l in &layers {
            if l.cols != *dims.last().unwrap() || l.weight.len() != l.rows * l.cols || l.bias.len() != l.rows {
                return Err(Error::Network("layer shapes do not chain".into()));
            }
            dims.push(l.rows);
        }
        if head == Head::Quadratic {
            dims.push(1);
        }
        if !bias && layers.iter().any(|l| l.bias.iter().any(|&b| b != 0.0)) {
            return Err(Error::Network("bias-free network with non-zero bias".into()));
        }
        let net = MlpNet {
            layer_dims: dims,
            layers,
            head,
            bias,
        };
        net.check_finite()?;
        Ok(net)
    }

    /// `[n, 8n, 8n, 1]`
    pub fn certificate_dims(n: usize) -> Vec<usize> {
        vec![n, 8 * n, 8 * n, 1]
    }

    pub fn layer_dims(&self) -> &[usize] {
        &self.layer_dims
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn head(&self) -> Head {
        self.head
    }

    pub fn has_bias(&self) -> bool {
        self.bias
    }

    pub fn input_dim(&self) -> usize {
        self.layer_dims[0]
    }

    /// Width of the network output vector (before the quadratic head).
    pub fn output_dim(&self) -> usize {
        match self.head {
            Head::Scalar => *self.layer_dims.last().unwrap(),
            Head::Quadratic => 1,
        }
    }

    fn check_finite(&self) -> Result<()> {
        for (k, l) in self.layers.iter().enumerate() {
            if l.weight.iter().chain(&l.bias).any(|v| !v.is_finite()) {
                return Err(Error::Network(format!("non-finite parameter in layer {k}")));
            }
        }
        Ok(())
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.input_dim() {
            return Err(Error::shape(self.input_dim(), x.len()));
        }
        Ok(())
    }

    fn n_tanh(&self) -> usize {
        match self.head {
            Head::Scalar => self.layers.len() - 1,
            Head::Quadratic => self.layers.len(),
        }
    }

    /// Scalar value: `B(x)` for a scalar head, `phi(x).phi(x)` for a quadratic head.
    pub fn eval(&self, x: &[f64]) -> Result<f64> {
        self.check_input(x)?;
        if self.output_dim() != 1 {
            return Err(Error::Network(format!(
                "eval needs a scalar output, network has {}",
                self.output_dim()
            )));
        }
        Ok(self.forward_plain(x)[0])
    }

    /// Output vector of a scalar-head network of any output width.
    pub fn eval_vec(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_input(x)?;
        Ok(self.forward_plain(x))
    }

    /// Last hidden activation of a quadratic-head network.
    pub fn features(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_input(x)?;
        let mut a = x.to_vec();
        let mut z = Vec::new();
        for layer in &self.layers[..self.n_tanh()] {
            layer.affine(&a, &mut z);
            a.clear();
            a.extend(z.iter().map(|v| v.tanh()));
        }
        Ok(a)
    }

    fn forward_plain(&self, x: &[f64]) -> Vec<f64> {
        let mut a = x.to_vec();
        let mut z = Vec::new();
        let nt = self.n_tanh();
        for layer in &self.layers[..nt] {
            layer.affine(&a, &mut z);
            a.clear();
            a.extend(z.iter().map(|v| v.tanh()));
        }
        match self.head {
            Head::Scalar => {
                self.layers[nt].affine(&a, &mut z);
                z
            }
            Head::Quadratic => vec![dot(&a, &a)],
        }
    }

    /// Gradient of [`eval`](Self::eval) with respect to the input.
    pub fn grad_x(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.value_and_grad(x)?.1)
    }

    /// Value and input gradient in one forward/backward sweep.
    pub fn value_and_grad(&self, x: &[f64]) -> Result<(f64, Vec<f64>)> {
        self.check_input(x)?;
        if self.output_dim() != 1 {
            return Err(Error::Network("value_and_grad needs a scalar output".into()));
        }
        let trace = self.trace(x, None);
        let value = trace.out[0];
        let (adj_x, _) = self.backward(&trace, &[1.0], &[0.0], None);
        Ok((value, adj_x))
    }

    /// Forward sweep recording activations and, if `dir` is given, tangents
    /// of every activation along `dir`.
    pub(crate) fn trace(&self, x: &[f64], dir: Option<&[f64]>) -> Trace {
        let nt = self.n_tanh();
        let mut acts = Vec::with_capacity(nt + 1);
        let mut tans = Vec::with_capacity(nt + 1);
        let mut ztans = Vec::with_capacity(nt);
        acts.push(x.to_vec());
        tans.push(match dir {
            Some(d) => d.to_vec(),
            None => vec![0.0; x.len()],
        });
        let mut z = Vec::new();
        let mut zt = Vec::new();
        for layer in &self.layers[..nt] {
            layer.affine(acts.last().unwrap(), &mut z);
            layer.linear(tans.last().unwrap(), &mut zt);
            let a: Vec<f64> = z.iter().map(|v| v.tanh()).collect();
            let at: Vec<f64> = a.iter().zip(&zt).map(|(a, t)| (1.0 - a * a) * t).collect();
            acts.push(a);
            tans.push(at);
            ztans.push(zt.clone());
        }
        let out = match self.head {
            Head::Scalar => {
                let mut o = Vec::new();
                self.layers[nt].affine(acts.last().unwrap(), &mut o);
                o
            }
            Head::Quadratic => {
                let phi = acts.last().unwrap();
                vec![dot(phi, phi)]
            }
        };
        Trace { acts, tans, ztans, out }
    }

    /// Reverse sweep over a [`Trace`].
    ///
    /// `seed_out[i]` weights output `i`, `seed_tan[i]` weights the tangent of
    /// output `i`. Parameter gradients are accumulated into `grad` (layout of
    /// [`ParamVector`]) when given. Returns the adjoints of the input and of
    /// the tangent direction.
    pub(crate) fn backward(
        &self,
        trace: &Trace,
        seed_out: &[f64],
        seed_tan: &[f64],
        mut grad: Option<&mut [f64]>,
    ) -> (Vec<f64>, Vec<f64>) {
        let nt = self.n_tanh();
        let offsets = self.offsets();
        let mut adj_a: Vec<f64>;
        let mut adj_t: Vec<f64>;
        match self.head {
            Head::Scalar => {
                let last = &self.layers[nt];
                let a = &trace.acts[nt];
                let at = &trace.tans[nt];
                if let Some(g) = grad.as_deref_mut() {
                    let (w_off, b_off) = offsets[nt];
                    for r in 0..last.rows {
                        let (so, st) = (seed_out[r], seed_tan[r]);
                        let gw = &mut g[w_off + r * last.cols..w_off + (r + 1) * last.cols];
                        for ((gw, a), at) in gw.iter_mut().zip(a).zip(at) {
                            *gw += so * a + st * at;
                        }
                        if let Some(b_off) = b_off {
                            g[b_off + r] += so;
                        }
                    }
                }
                adj_a = Vec::new();
                adj_t = Vec::new();
                last.transpose_mul(seed_out, &mut adj_a);
                last.transpose_mul(seed_tan, &mut adj_t);
            }
            Head::Quadratic => {
                let phi = &trace.acts[nt];
                let phit = &trace.tans[nt];
                let (so, st) = (seed_out[0], seed_tan[0]);
                adj_a = phi
                    .iter()
                    .zip(phit)
                    .map(|(p, pt)| 2.0 * so * p + 2.0 * st * pt)
                    .collect();
                adj_t = phi.iter().map(|p| 2.0 * st * p).collect();
            }
        }

        let mut adj_z = Vec::new();
        let mut adj_zt = Vec::new();
        for k in (0..nt).rev() {
            let layer = &self.layers[k];
            let a = &trace.acts[k + 1];
            let zt = &trace.ztans[k];
            adj_z.clear();
            adj_zt.clear();
            for i in 0..layer.rows {
                let s = 1.0 - a[i] * a[i];
                adj_zt.push(adj_t[i] * s);
                adj_z.push(adj_a[i] * s - 2.0 * adj_t[i] * zt[i] * a[i] * s);
            }
            if let Some(g) = grad.as_deref_mut() {
                let (w_off, b_off) = offsets[k];
                let a_prev = &trace.acts[k];
                let t_prev = &trace.tans[k];
                for r in 0..layer.rows {
                    let (gz, gzt) = (adj_z[r], adj_zt[r]);
                    let gw = &mut g[w_off + r * layer.cols..w_off + (r + 1) * layer.cols];
                    for ((gw, a), t) in gw.iter_mut().zip(a_prev).zip(t_prev) {
                        *gw += gz * a + gzt * t;
                    }
                    if let Some(b_off) = b_off {
                        g[b_off + r] += gz;
                    }
                }
            }
            layer.transpose_mul(&adj_z, &mut adj_a);
            layer.transpose_mul(&adj_zt, &mut adj_t);
        }
        (adj_a, adj_t)
    }

    /// Accumulate into `grad` the parameter gradient of
    /// `w_value * h(x) + w_dir * (grad_x h(x) . dir)`.
    ///
    /// Returns `w_dir * grad_x h(x)`, the adjoint of `dir`, which callers
    /// chain into whatever produced the direction.
    pub fn accumulate_param_grad(
        &self,
        x: &[f64],
        dir: &[f64],
        w_value: f64,
        w_dir: f64,
        grad: &mut [f64],
    ) -> Result<Vec<f64>> {
        self.check_input(x)?;
        self.check_input(dir)?;
        if grad.len() != self.param_count() {
            return Err(Error::shape(self.param_count(), grad.len()));
        }
        let trace = self.trace(x, Some(dir));
        let (_, adj_dir) = self.backward(&trace, &[w_value], &[w_dir], Some(grad));
        Ok(adj_dir)
    }

    /// Value `h(x)`, input gradient and directional derivative along `dir`.
    pub fn value_grad_dir(&self, x: &[f64], dir: &[f64]) -> Result<(f64, Vec<f64>, f64)> {
        let (v, g) = self.value_and_grad(x)?;
        let d = dot(&g, dir);
        Ok((v, g, d))
    }

    /// Backprop an output-space cotangent `upstream` of a vector-output
    /// network into parameter gradients.
    pub fn accumulate_vec_param_grad(&self, x: &[f64], upstream: &[f64], grad: &mut [f64]) -> Result<()> {
        self.check_input(x)?;
        if upstream.len() != self.output_dim() {
            return Err(Error::shape(self.output_dim(), upstream.len()));
        }
        let trace = self.trace(x, None);
        let zeros = vec![0.0; upstream.len()];
        self.backward(&trace, upstream, &zeros, Some(grad));
        Ok(())
    }

    /// Offsets of (weights, biases) of each layer inside the flat parameter vector.
    fn offsets(&self) -> Vec<(usize, Option<usize>)> {
        let mut off = 0;
        self.layers
            .iter()
            .map(|l| {
                let w = off;
                off += l.weight.len();
                let b = if self.bias {
                    let b = off;
                    off += l.rows;
                    Some(b)
                } else {
                    None
                };
                (w, b)
            })
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.len() + if self.bias { l.rows } else { 0 })
            .sum()
    }

    /// Flatten: layer by layer, weights row-major then biases (biases skipped
    /// for bias-free networks).
    pub fn params(&self) -> ParamVector {
        let mut v = Vec::with_capacity(self.param_count());
        for l in &self.layers {
            v.extend_from_slice(&l.weight);
            if self.bias {
                v.extend_from_slice(&l.bias);
            }
        }
        ParamVector(v)
    }

    pub fn set_params(&mut self, p: &ParamVector) -> Result<()> {
        if p.len() != self.param_count() {
            return Err(Error::shape(self.param_count(), p.len()));
        }
        if p.0.iter().any(|v| !v.is_finite()) {
            return Err(Error::Network("non-finite parameter".into()));
        }
        let mut off = 0;
        for l in &mut self.layers {
            let n = l.weight.len();
            l.weight.copy_from_slice(&p.0[off..off + n]);
            off += n;
            if self.bias {
                l.bias.copy_from_slice(&p.0[off..off + l.rows]);
                off += l.rows;
            }
        }
        Ok(())
    }

    /// Product of per-layer Frobenius norms. Valid everywhere for a scalar
    /// head. For a quadratic head `phi_bound` bounds `|phi|` on the region of
    /// interest and the result is `2 * phi_bound * prod`.
    pub fn lipschitz_bound_with(&self, phi_bound: f64) -> f64 {
        let prod: f64 = self.layers.iter().map(Layer::frobenius).product();
        match self.head {
            Head::Scalar => prod,
            Head::Quadratic => 2.0 * phi_bound * prod,
        }
    }

    /// Upper bound on the Lipschitz constant of [`eval`](Self::eval) over all
    /// inputs. For a quadratic head `|phi| <= sqrt(width)` since `|tanh| < 1`.
    pub fn lipschitz_bound(&self) -> f64 {
        self.lipschitz_bound_with(self.phi_cap())
    }

    /// Like [`lipschitz_bound`](Self::lipschitz_bound) but with `sup |phi|`
    /// estimated over `region` points (1.5 safety factor, capped by the
    /// global bound).
    pub fn lipschitz_bound_on(&self, region: &[Vec<f64>]) -> Result<f64> {
        if self.head == Head::Scalar {
            return Ok(self.lipschitz_bound());
        }
        let mut sup: f64 = 0.0;
        for x in region {
            let phi = self.features(x)?;
            sup = sup.max(dot(&phi, &phi).sqrt());
        }
        Ok(self.lipschitz_bound_with((1.5 * sup).min(self.phi_cap())))
    }

    fn phi_cap(&self) -> f64 {
        (self.layers.last().unwrap().rows as f64).sqrt()
    }

    /// Upper bound on the Lipschitz constant of [`grad_x`](Self::grad_x),
    /// from layer norms and `sup |tanh''| = 4 / (3 sqrt 3)`.
    pub fn gradient_lipschitz_bound(&self) -> f64 {
        let c2 = 4.0 / (3.0 * 3f64.sqrt());
        let norms: Vec<f64> = self.layers.iter().map(Layer::frobenius).collect();
        let nt = self.n_tanh();
        let prod_all: f64 = norms.iter().product();
        // Q_k = prod_{j<=k} |W_j| for each tanh layer
        let mut q = 1.0;
        let mut sum_q = 0.0;
        for n in &norms[..nt] {
            q *= n;
            sum_q += q;
        }
        let l_jac = c2 * prod_all * sum_q;
        match self.head {
            Head::Scalar => l_jac,
            Head::Quadratic => 2.0 * (l_jac * self.phi_cap() + prod_all * prod_all),
        }
    }
}
