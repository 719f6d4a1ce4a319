//! Wengert-tape reverse-mode differentiation over [`Tensor`] values.
//!
//! Every operation appends a node holding its forward value; inputs always
//! precede their consumers, so a single reverse sweep propagates gradients.

use std::collections::HashMap;

use num_complex::Complex64;
use rand::Rng;

use super::fft;
use super::{ParamId, ParamStore, Tensor};
use crate::error::{dim_err, Error, Result};
use crate::Scalar;

/// sqrt(2/pi), the scale inside the tanh approximation of GELU.
pub const GELU_COEFF: f64 = 0.797_884_560_802_865_4;
const GELU_CUBIC: f64 = 0.044_715;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

enum Op<T> {
    Leaf,
    Param,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Gelu(Var),
    Softmax(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<T>, inv_std: Vec<T> },
    Sum(Var),
    MeanRows(Var),
    SliceCols { x: Var, start: usize },
    ConcatCols(Vec<Var>),
    GatherRows(Vec<(Var, usize)>),
    Reshape(Var),
    Conv1d { x: Var, k: Var, stride: usize, padding: usize },
    DepthwiseConv { x: Var, k: Var },
    RfftMag { x: Var, spectra: Vec<Vec<Complex64>> },
    L2NormalizeRows { x: Var, norms: Vec<T> },
    CrossEntropy { logits: Var, label: usize, probs: Vec<T> },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
}

/// Recording of one forward computation.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    param_vars: HashMap<ParamId, Var>,
    backward_done: bool,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), param_vars: HashMap::new(), backward_done: false }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, mut value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        value.requires_grad = requires_grad;
        value.grad = None;
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].value.requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].value.grad.as_deref()
    }

    /// Scalar value of a one-element node.
    pub fn item(&self, v: Var) -> T {
        self.nodes[v.0].value.data()[0]
    }

    /// Leaf node. Gradients are tracked when `tensor.requires_grad` is set.
    pub fn leaf(&mut self, tensor: Tensor<T>) -> Var {
        let rg = tensor.requires_grad;
        self.push(tensor, Op::Leaf, rg)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, tensor: Tensor<T>) -> Var {
        self.push(tensor, Op::Leaf, false)
    }

    /// Binds a parameter; repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(v) = self.param_vars.get(&id) {
            return *v;
        }
        let t = store.get(id);
        let rg = t.requires_grad;
        let value = Tensor::new(t.shape().to_vec(), t.data().to_vec()).expect("param shape");
        let v = self.push(value, Op::Param, rg);
        self.param_vars.insert(id, v);
        v
    }

    fn dims2(&self, v: Var) -> Result<(usize, usize)> {
        self.value(v).dims2()
    }

    // ---------------------------------------------------------------- ops

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a)?;
        let (k2, n) = self.dims2(b)?;
        if k != k2 {
            return Err(dim_err(format!(
                "matmul of {:?} by {:?}: inner dimensions differ",
                self.shape(a),
                self.shape(b)
            )));
        }
        let ad = self.value(a).data();
        let bd = self.value(b).data();
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            let orow = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let aip = ad[i * k + p];
                if aip == T::zero() {
                    continue;
                }
                let brow = &bd[p * n..(p + 1) * n];
                for (o, &bv) in orow.iter_mut().zip(brow) {
                    *o += aip * bv;
                }
            }
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.dims2(a)?;
        let ad = self.value(a).data();
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = ad[i * n + j];
            }
        }
        let rg = self.rg(a);
        Ok(self.push(Tensor::new(vec![n, m], out)?, Op::Transpose(a), rg))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(dim_err(format!("{what} of {:?} and {:?}", self.shape(a), self.shape(b))));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, op: Op<T>, f: impl Fn(T, T) -> T) -> Var {
        let out: Vec<T> =
            self.value(a).data().iter().zip(self.value(b).data()).map(|(&x, &y)| f(x, y)).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a) || self.rg(b);
        self.push(Tensor::new(shape, out).expect("same shape"), op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        Ok(self.zip_with(a, b, Op::Add(a, b), |x, y| x + y))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        Ok(self.zip_with(a, b, Op::Sub(a, b), |x, y| x - y))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        Ok(self.zip_with(a, b, Op::Mul(a, b), |x, y| x * y))
    }

    /// `x[M,N] + bias[N]` broadcast over rows.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (m, n) = self.dims2(x)?;
        if self.value(bias).len() != n {
            return Err(dim_err(format!(
                "row bias {:?} does not match columns of {:?}",
                self.shape(bias),
                self.shape(x)
            )));
        }
        let b = self.value(bias).data();
        let mut out = self.value(x).data().to_vec();
        for i in 0..m {
            for (o, &bv) in out[i * n..(i + 1) * n].iter_mut().zip(b) {
                *o += bv;
            }
        }
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x) || self.rg(bias);
        Ok(self.push(Tensor::new(shape, out)?, Op::AddRow(x, bias), rg))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        let t = self.value(x).map(|v| v * c);
        let rg = self.rg(x);
        self.push(t, Op::Scale(x, c), rg)
    }

    pub fn add_scalar(&mut self, x: Var, c: T) -> Var {
        let t = self.value(x).map(|v| v + c);
        let rg = self.rg(x);
        self.push(t, Op::AddScalar(x), rg)
    }

    /// GELU, tanh approximation: `0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))`.
    pub fn gelu(&mut self, x: Var) -> Var {
        let t = self.value(x).map(gelu_scalar);
        let rg = self.rg(x);
        self.push(t, Op::Gelu(x), rg)
    }

    /// Softmax along the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.dims2(x)?;
        let mut out = self.value(x).data().to_vec();
        for i in 0..m {
            softmax_in_place(&mut out[i * n..(i + 1) * n]);
        }
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(shape, out)?, Op::Softmax(x), rg))
    }

    /// Row-wise layer normalisation with affine `gain`/`bias` of length N.
    pub fn layernorm(&mut self, x: Var, gain: Var, bias: Var, eps: T) -> Result<Var> {
        let (m, n) = self.dims2(x)?;
        if self.value(gain).len() != n || self.value(bias).len() != n {
            return Err(dim_err(format!(
                "layernorm affine {:?}/{:?} vs input {:?}",
                self.shape(gain),
                self.shape(bias),
                self.shape(x)
            )));
        }
        let xd = self.value(x).data();
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let nf = T::lit(n as f64);
        let mut xhat = vec![T::zero(); m * n];
        let mut inv_std = vec![T::zero(); m];
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            let row = &xd[i * n..(i + 1) * n];
            let mean = row.iter().copied().sum::<T>() / nf;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / nf;
            let is = T::one() / (var + eps).sqrt();
            inv_std[i] = is;
            for j in 0..n {
                let h = (row[j] - mean) * is;
                xhat[i * n + j] = h;
                out[i * n + j] = h * g[j] + b[j];
            }
        }
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        Ok(self.push(Tensor::new(shape, out)?, Op::LayerNorm { x, gain, bias, xhat, inv_std }, rg))
    }

    /// Sum of all elements, as a one-element tensor.
    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len().max(1);
        let s = self.sum(x);
        self.scale(s, T::one() / T::lit(n as f64))
    }

    /// Column means of `x[M,N]`, shape `[1,N]`.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.dims2(x)?;
        if m == 0 {
            return Err(dim_err("mean over zero rows"));
        }
        let xd = self.value(x).data();
        let mut out = vec![T::zero(); n];
        for i in 0..m {
            for (o, &v) in out.iter_mut().zip(&xd[i * n..(i + 1) * n]) {
                *o += v;
            }
        }
        let inv = T::one() / T::lit(m as f64);
        out.iter_mut().for_each(|v| *v *= inv);
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(vec![1, n], out)?, Op::MeanRows(x), rg))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.dims2(x)?;
        if start + len > n {
            return Err(dim_err(format!("column slice {start}..{} of {:?}", start + len, self.shape(x))));
        }
        let xd = self.value(x).data();
        let mut out = Vec::with_capacity(m * len);
        for i in 0..m {
            out.extend_from_slice(&xd[i * n + start..i * n + start + len]);
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(vec![m, len], out)?, Op::SliceCols { x, start }, rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let m = self.dims2(parts[0])?.0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.dims2(p)?;
            if r != m {
                return Err(dim_err(format!("concat_cols row mismatch: {:?}", self.shape(p))));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(m * total);
        for i in 0..m {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[i * w..(i + 1) * w]);
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(Tensor::new(vec![m, total], out)?, Op::ConcatCols(parts.to_vec()), rg))
    }

    /// Builds a matrix whose row `r` is row `picks[r].1` of `picks[r].0`.
    /// Covers row concatenation, token selection and mask-token insertion.
    pub fn gather_rows(&mut self, picks: &[(Var, usize)]) -> Result<Var> {
        if picks.is_empty() {
            return Err(dim_err("gather of zero rows"));
        }
        let n = self.dims2(picks[0].0)?.1;
        let mut out = Vec::with_capacity(picks.len() * n);
        for &(v, r) in picks {
            let (rows, c) = self.dims2(v)?;
            if c != n || r >= rows {
                return Err(dim_err(format!("gather row {r} of {:?} into width {n}", self.shape(v))));
            }
            out.extend_from_slice(&self.value(v).data()[r * n..(r + 1) * n]);
        }
        let rg = picks.iter().any(|&(v, _)| self.rg(v));
        Ok(self.push(Tensor::new(vec![picks.len(), n], out)?, Op::GatherRows(picks.to_vec()), rg))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let mut picks = Vec::new();
        for &p in parts {
            let (r, _) = self.dims2(p)?;
            picks.extend((0..r).map(|i| (p, i)));
        }
        self.gather_rows(&picks)
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::Reshape(x), rg))
    }

    /// Cross-correlation of `x[C_in, L]` with `kernels[C_out, C_in, K]`.
    /// Output length is `floor((L + 2 padding - K) / stride) + 1`.
    pub fn conv1d(&mut self, x: Var, kernels: Var, stride: usize, padding: usize) -> Result<Var> {
        let (cin, l) = self.dims2(x)?;
        let ks = self.shape(kernels).to_vec();
        let [cout, kcin, k] = ks[..] else {
            return Err(dim_err(format!("conv1d kernels must be 3-D, got {ks:?}")));
        };
        if kcin != cin {
            return Err(dim_err(format!("conv1d kernels {ks:?} vs input {:?}", self.shape(x))));
        }
        if stride == 0 {
            return Err(Error::Config("conv1d stride must be positive".into()));
        }
        if k > l + 2 * padding {
            return Err(dim_err(format!("conv1d kernel length {k} exceeds padded input {}", l + 2 * padding)));
        }
        let lout = (l + 2 * padding - k) / stride + 1;
        let xd = self.value(x).data();
        let kd = self.value(kernels).data();
        let mut out = vec![T::zero(); cout * lout];
        for o in 0..cout {
            for t in 0..lout {
                let mut acc = T::zero();
                for c in 0..cin {
                    for q in 0..k {
                        let pos = (t * stride + q) as isize - padding as isize;
                        if pos >= 0 && (pos as usize) < l {
                            acc += kd[(o * cin + c) * k + q] * xd[c * l + pos as usize];
                        }
                    }
                }
                out[o * lout + t] = acc;
            }
        }
        let rg = self.rg(x) || self.rg(kernels);
        Ok(self.push(
            Tensor::new(vec![cout, lout], out)?,
            Op::Conv1d { x, k: kernels, stride, padding },
            rg,
        ))
    }

    /// Per-feature temporal convolution of a token sequence `x[T, D]` with
    /// `kernels[D, K]` (K odd), zero "same" padding so the length is kept.
    pub fn depthwise_conv(&mut self, x: Var, kernels: Var) -> Result<Var> {
        let (t_len, d) = self.dims2(x)?;
        let (kd_rows, k) = self.dims2(kernels)?;
        if kd_rows != d || k % 2 == 0 {
            return Err(dim_err(format!(
                "depthwise kernels {:?} (odd width required) vs tokens {:?}",
                self.shape(kernels),
                self.shape(x)
            )));
        }
        if t_len < k {
            return Err(Error::Contract(format!("sequence length {t_len} shorter than kernel {k}")));
        }
        let half = k / 2;
        let xd = self.value(x).data();
        let kd = self.value(kernels).data();
        let mut out = vec![T::zero(); t_len * d];
        for t in 0..t_len {
            for q in 0..k {
                let src = t as isize + q as isize - half as isize;
                if src < 0 || src as usize >= t_len {
                    continue;
                }
                let s = src as usize;
                for j in 0..d {
                    out[t * d + j] += kd[j * k + q] * xd[s * d + j];
                }
            }
        }
        let rg = self.rg(x) || self.rg(kernels);
        Ok(self.push(Tensor::new(vec![t_len, d], out)?, Op::DepthwiseConv { x, k: kernels }, rg))
    }

    /// Row-wise one-sided DFT magnitudes: `x[R, L]` to `[R, L/2 + 1]`.
    pub fn rfft_magnitude(&mut self, x: Var) -> Result<Var> {
        let (r, l) = self.dims2(x)?;
        fft::check_pow2(l)?;
        let half = l / 2 + 1;
        let mut out = Vec::with_capacity(r * half);
        let mut spectra = Vec::with_capacity(r);
        for i in 0..r {
            let spec = fft::spectrum(self.value(x).row(i));
            out.extend(spec[..half].iter().map(|c| T::lit(c.norm())));
            spectra.push(spec);
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(vec![r, half], out)?, Op::RfftMag { x, spectra }, rg))
    }

    /// Divides each row by its Euclidean norm; zero rows stay zero.
    pub fn l2_normalize_rows(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.dims2(x)?;
        let xd = self.value(x).data();
        let mut norms = vec![T::zero(); m];
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            let row = &xd[i * n..(i + 1) * n];
            let nrm = row.iter().map(|&v| v * v).sum::<T>().sqrt();
            norms[i] = nrm;
            if nrm > T::zero() {
                for j in 0..n {
                    out[i * n + j] = row[j] / nrm;
                }
            }
        }
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(shape, out)?, Op::L2NormalizeRows { x, norms }, rg))
    }

    /// Negative log-likelihood of `label` under softmax(`logits`) for a single
    /// row of logits.
    pub fn cross_entropy(&mut self, logits: Var, label: usize) -> Result<Var> {
        let (m, k) = self.dims2(logits)?;
        if m != 1 || label >= k {
            return Err(dim_err(format!("cross entropy of {:?} with label {label}", self.shape(logits))));
        }
        let mut probs = self.value(logits).data().to_vec();
        softmax_in_place(&mut probs);
        let loss = -probs[label].ln();
        // log-sum-exp form keeps confident predictions finite
        let z = self.value(logits).data();
        let zmax = z.iter().copied().fold(T::neg_infinity(), T::max);
        let lse = zmax + z.iter().map(|&v| (v - zmax).exp()).sum::<T>().ln();
        let loss = if loss.is_finite() { lse - z[label] } else { loss };
        let rg = self.rg(logits);
        Ok(self.push(Tensor::scalar(loss), Op::CrossEntropy { logits, label, probs }, rg))
    }

    /// Multiplies by a fresh inverted-dropout mask. In eval mode (or with a
    /// zero rate) this is the identity and records nothing.
    pub fn dropout(&mut self, x: Var, rate: f64, training: bool, rng: &mut impl Rng) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Config(format!("dropout rate {rate} outside [0, 1)")));
        }
        if !training || rate == 0.0 {
            return Ok(x);
        }
        let mask = dropout_mask(self.shape(x), rate, rng);
        let m = self.constant(mask);
        self.mul(x, m)
    }

    // ----------------------------------------------------------- backward

    /// Propagates d(loss)/d(node) to every node that requires a gradient.
    /// A second call without [`Tape::reset_grads`] is an error.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::Contract("backward already ran on this tape; reset gradients first".into()));
        }
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.backward_done = true;
        self.nodes[loss.0].value.grad = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let (before, rest) = self.nodes.split_at_mut(i);
            let node = &mut rest[0];
            let Some(g) = node.value.grad.take() else { continue };
            backprop(before, node, &g);
            node.value.grad = Some(g);
        }
        for node in &mut self.nodes {
            if node.value.requires_grad && node.value.grad.is_none() {
                node.value.grad = Some(vec![T::zero(); node.value.len()]);
            }
        }
        Ok(())
    }

    pub fn reset_grads(&mut self) {
        for node in &mut self.nodes {
            node.value.grad = None;
        }
        self.backward_done = false;
    }

    /// Gradients of all bound trainable parameters, in parameter order.
    pub fn param_grads(&self) -> Vec<(ParamId, &[T])> {
        let mut out: Vec<_> = self
            .param_vars
            .iter()
            .filter_map(|(&id, &v)| self.nodes[v.0].value.grad.as_deref().map(|g| (id, g)))
            .collect();
        out.sort_by_key(|(id, _)| *id);
        out
    }

    /// Adds the parameter gradients of this tape into the store's buffers.
    pub fn accumulate_into(&self, store: &mut ParamStore<T>) {
        for (id, g) in self.param_grads() {
            let t = store.get_mut(id);
            if !t.requires_grad {
                continue;
            }
            match &mut t.grad {
                Some(buf) => buf.iter_mut().zip(g).for_each(|(a, &b)| *a += b),
                None => t.grad = Some(g.to_vec()),
            }
        }
    }
}

pub(crate) fn gelu_scalar<T: Scalar>(x: T) -> T {
    let half = T::lit(0.5);
    let u = T::lit(GELU_COEFF) * (x + T::lit(GELU_CUBIC) * x * x * x);
    half * x * (T::one() + u.tanh())
}

fn gelu_grad<T: Scalar>(x: T) -> T {
    let half = T::lit(0.5);
    let c = T::lit(GELU_COEFF);
    let u = c * (x + T::lit(GELU_CUBIC) * x * x * x);
    let th = u.tanh();
    let du = c * (T::one() + T::lit(3.0 * GELU_CUBIC) * x * x);
    half * (T::one() + th) + half * x * (T::one() - th * th) * du
}

pub(crate) fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut s = T::zero();
    for v in row.iter_mut() {
        *v = (*v - mx).exp();
        s += *v;
    }
    for v in row.iter_mut() {
        *v /= s;
    }
}

/// Inverted-dropout mask: entries are 0 with probability `rate`, otherwise
/// `1 / (1 - rate)`.
pub fn dropout_mask<T: Scalar>(shape: &[usize], rate: f64, rng: &mut impl Rng) -> Tensor<T> {
    let keep = T::lit(1.0 / (1.0 - rate));
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| if rng.random::<f64>() < rate { T::zero() } else { keep }).collect();
    Tensor::new(shape.to_vec(), data).expect("mask shape")
}

fn acc<T: Scalar>(nodes: &mut [Node<T>], v: Var, f: impl FnOnce(&mut [T], &[Node<T>])) {
    if !nodes[v.0].value.requires_grad {
        return;
    }
    let len = nodes[v.0].value.len();
    let mut g = nodes[v.0].value.grad.take().unwrap_or_else(|| vec![T::zero(); len]);
    f(&mut g, nodes);
    nodes[v.0].value.grad = Some(g);
}

fn val<T>(nodes: &[Node<T>], v: Var) -> &Tensor<T> {
    &nodes[v.0].value
}

fn backprop<T: Scalar>(nodes: &mut [Node<T>], node: &Node<T>, g: &[T]) {
    let out = &node.value;
    match &node.op {
        Op::Leaf | Op::Param => {}
        Op::MatMul(a, b) => {
            let (m, k) = val(nodes, *a).dims2().unwrap();
            let n = val(nodes, *b).dims2().unwrap().1;
            let (a, b) = (*a, *b);
            acc(nodes, a, |ga, ns| {
                let bd = val(ns, b).data();
                for i in 0..m {
                    let grow = &g[i * n..(i + 1) * n];
                    for p in 0..k {
                        let brow = &bd[p * n..(p + 1) * n];
                        let mut s = T::zero();
                        for (x, y) in grow.iter().zip(brow) {
                            s += *x * *y;
                        }
                        ga[i * k + p] += s;
                    }
                }
            });
            acc(nodes, b, |gb, ns| {
                let ad = val(ns, a).data();
                for i in 0..m {
                    let grow = &g[i * n..(i + 1) * n];
                    for p in 0..k {
                        let aip = ad[i * k + p];
                        if aip == T::zero() {
                            continue;
                        }
                        for (o, &gv) in gb[p * n..(p + 1) * n].iter_mut().zip(grow) {
                            *o += aip * gv;
                        }
                    }
                }
            });
        }
        Op::Transpose(a) => {
            let (m, n) = val(nodes, *a).dims2().unwrap();
            acc(nodes, *a, |ga, _| {
                for i in 0..m {
                    for j in 0..n {
                        ga[i * n + j] += g[j * m + i];
                    }
                }
            });
        }
        Op::Add(a, b) => {
            acc(nodes, *a, |ga, _| add_into(ga, g));
            acc(nodes, *b, |gb, _| add_into(gb, g));
        }
        Op::Sub(a, b) => {
            acc(nodes, *a, |ga, _| add_into(ga, g));
            acc(nodes, *b, |gb, _| gb.iter_mut().zip(g).for_each(|(o, &v)| *o -= v));
        }
        Op::Mul(a, b) => {
            let (a, b) = (*a, *b);
            acc(nodes, a, |ga, ns| {
                for ((o, &gv), &bv) in ga.iter_mut().zip(g).zip(val(ns, b).data()) {
                    *o += gv * bv;
                }
            });
            acc(nodes, b, |gb, ns| {
                for ((o, &gv), &av) in gb.iter_mut().zip(g).zip(val(ns, a).data()) {
                    *o += gv * av;
                }
            });
        }
        Op::AddRow(x, bias) => {
            acc(nodes, *x, |gx, _| add_into(gx, g));
            let n = val(nodes, *bias).len();
            acc(nodes, *bias, |gb, _| {
                for row in g.chunks(n) {
                    add_into(gb, row);
                }
            });
        }
        Op::Scale(x, c) => {
            let c = *c;
            acc(nodes, *x, |gx, _| gx.iter_mut().zip(g).for_each(|(o, &v)| *o += c * v));
        }
        Op::AddScalar(x) => acc(nodes, *x, |gx, _| add_into(gx, g)),
        Op::Gelu(x) => {
            let x = *x;
            acc(nodes, x, |gx, ns| {
                for ((o, &gv), &xi) in gx.iter_mut().zip(g).zip(val(ns, x).data()) {
                    *o += gv * gelu_grad(xi);
                }
            })
        }
        Op::Softmax(x) => {
            let n = *out.shape().last().unwrap();
            let y = out.data();
            acc(nodes, *x, |gx, _| {
                for ((gr, yr), gxr) in g.chunks(n).zip(y.chunks(n)).zip(gx.chunks_mut(n)) {
                    let dot: T = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                    for ((o, &gv), &yv) in gxr.iter_mut().zip(gr).zip(yr) {
                        *o += yv * (gv - dot);
                    }
                }
            });
        }
        Op::LayerNorm { x, gain, bias, xhat, inv_std } => {
            let n = val(nodes, *gain).len();
            acc(nodes, *gain, |gg, _| {
                for (gr, hr) in g.chunks(n).zip(xhat.chunks(n)) {
                    for ((o, &gv), &h) in gg.iter_mut().zip(gr).zip(hr) {
                        *o += gv * h;
                    }
                }
            });
            acc(nodes, *bias, |gb, _| {
                for gr in g.chunks(n) {
                    add_into(gb, gr);
                }
            });
            let nf = T::lit(n as f64);
            let gain = *gain;
            acc(nodes, *x, |gx, ns| {
                let gain_v = val(ns, gain).data();
                for (i, ((gr, hr), gxr)) in g.chunks(n).zip(xhat.chunks(n)).zip(gx.chunks_mut(n)).enumerate() {
                    let mut mean_d = T::zero();
                    let mut mean_dh = T::zero();
                    for j in 0..n {
                        let d = gr[j] * gain_v[j];
                        mean_d += d;
                        mean_dh += d * hr[j];
                    }
                    mean_d /= nf;
                    mean_dh /= nf;
                    for j in 0..n {
                        let d = gr[j] * gain_v[j];
                        gxr[j] += inv_std[i] * (d - mean_d - hr[j] * mean_dh);
                    }
                }
            });
        }
        Op::Sum(x) => {
            let g0 = g[0];
            acc(nodes, *x, |gx, _| gx.iter_mut().for_each(|o| *o += g0));
        }
        Op::MeanRows(x) => {
            let (m, n) = val(nodes, *x).dims2().unwrap();
            let inv = T::one() / T::lit(m as f64);
            acc(nodes, *x, |gx, _| {
                for row in gx.chunks_mut(n) {
                    for (o, &gv) in row.iter_mut().zip(g) {
                        *o += gv * inv;
                    }
                }
            });
        }
        Op::SliceCols { x, start } => {
            let n = val(nodes, *x).dims2().unwrap().1;
            let w = out.dims2().unwrap().1;
            let start = *start;
            acc(nodes, *x, |gx, _| {
                for (gr, gxr) in g.chunks(w).zip(gx.chunks_mut(n)) {
                    add_into(&mut gxr[start..start + w], gr);
                }
            });
        }
        Op::ConcatCols(parts) => {
            let total = out.dims2().unwrap().1;
            let mut offset = 0;
            for &p in parts {
                let w = val(nodes, p).dims2().unwrap().1;
                let off = offset;
                acc(nodes, p, |gp, _| {
                    for (gr, gpr) in g.chunks(total).zip(gp.chunks_mut(w)) {
                        add_into(gpr, &gr[off..off + w]);
                    }
                });
                offset += w;
            }
        }
        Op::GatherRows(picks) => {
            let n = out.dims2().unwrap().1;
            for (r, &(v, row)) in picks.iter().enumerate() {
                acc(nodes, v, |gv, _| add_into(&mut gv[row * n..(row + 1) * n], &g[r * n..(r + 1) * n]));
            }
        }
        Op::Reshape(x) => acc(nodes, *x, |gx, _| add_into(gx, g)),
        Op::Conv1d { x, k, stride, padding } => {
            let (cin, l) = val(nodes, *x).dims2().unwrap();
            let ks = val(nodes, *k).shape().to_vec();
            let (cout, kw) = (ks[0], ks[2]);
            let lout = out.dims2().unwrap().1;
            let (stride, padding, x, k) = (*stride, *padding, *x, *k);
            let each = |f: &mut dyn FnMut(usize, usize, usize, usize, T)| {
                for o in 0..cout {
                    for t in 0..lout {
                        let go = g[o * lout + t];
                        for c in 0..cin {
                            for q in 0..kw {
                                let pos = (t * stride + q) as isize - padding as isize;
                                if pos >= 0 && (pos as usize) < l {
                                    f(o, c, q, pos as usize, go);
                                }
                            }
                        }
                    }
                }
            };
            acc(nodes, k, |gk, ns| {
                let xd = val(ns, x).data();
                each(&mut |o, c, q, pos, go| gk[(o * cin + c) * kw + q] += go * xd[c * l + pos]);
            });
            acc(nodes, x, |gx, ns| {
                let kd = val(ns, k).data();
                each(&mut |o, c, q, pos, go| gx[c * l + pos] += go * kd[(o * cin + c) * kw + q]);
            });
        }
        Op::DepthwiseConv { x, k } => {
            let (t_len, d) = val(nodes, *x).dims2().unwrap();
            let kw = val(nodes, *k).dims2().unwrap().1;
            let half = kw / 2;
            let (x, k) = (*x, *k);
            let pairs = |f: &mut dyn FnMut(usize, usize, usize)| {
                for t in 0..t_len {
                    for q in 0..kw {
                        let src = t as isize + q as isize - half as isize;
                        if src >= 0 && (src as usize) < t_len {
                            f(t, q, src as usize);
                        }
                    }
                }
            };
            acc(nodes, k, |gk, ns| {
                let xd = val(ns, x).data();
                pairs(&mut |t, q, s| {
                    for j in 0..d {
                        gk[j * kw + q] += g[t * d + j] * xd[s * d + j];
                    }
                });
            });
            acc(nodes, x, |gx, ns| {
                let kd = val(ns, k).data();
                pairs(&mut |t, q, s| {
                    for j in 0..d {
                        gx[s * d + j] += g[t * d + j] * kd[j * kw + q];
                    }
                });
            });
        }
        Op::RfftMag { x, spectra } => {
            let half = out.dims2().unwrap().1;
            let l = val(nodes, *x).dims2().unwrap().1;
            acc(nodes, *x, |gx, _| {
                for (i, spec) in spectra.iter().enumerate() {
                    let up: Vec<f64> = g[i * half..(i + 1) * half].iter().map(|v| v.as_f64()).collect();
                    let gi = fft::rfft_magnitude_vjp(spec, &up);
                    for (o, v) in gx[i * l..(i + 1) * l].iter_mut().zip(gi) {
                        *o += T::lit(v);
                    }
                }
            });
        }
        Op::L2NormalizeRows { x, norms } => {
            let n = out.dims2().unwrap().1;
            let y = out.data();
            acc(nodes, *x, |gx, _| {
                for (i, nrm) in norms.iter().enumerate() {
                    if *nrm == T::zero() {
                        continue;
                    }
                    let gr = &g[i * n..(i + 1) * n];
                    let yr = &y[i * n..(i + 1) * n];
                    let dot: T = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                    for j in 0..n {
                        gx[i * n + j] += (gr[j] - yr[j] * dot) / *nrm;
                    }
                }
            });
        }
        Op::CrossEntropy { logits, label, probs } => {
            let g0 = g[0];
            let label = *label;
            acc(nodes, *logits, |gl, _| {
                for (j, (o, &p)) in gl.iter_mut().zip(probs).enumerate() {
                    let target = if j == label { T::one() } else { T::zero() };
                    *o += g0 * (p - target);
                }
            });
        }
    }
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (o, &v) in dst.iter_mut().zip(src) {
        *o += v;
    }
}
