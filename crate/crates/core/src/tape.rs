//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every operation appends a node holding its forward value and whatever it
//! needs for backward. [`Tape::backward`] walks the nodes in reverse
//! insertion order, which is a valid reverse topological order because a node
//! can only reference nodes recorded before it.

use crate::error::{Error, Result};
use crate::tensor::{gemm_acc, MatRef, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Linear {
        input: Var,
        weight: Var,
        bias: Var,
    },
    Conv {
        input: Var,
        kernel: Var,
        bias: Var,
        dilation: usize,
    },
    Relu(Var),
    Add(Var, Var),
    Mul(Var, Var),
    Affine {
        input: Var,
        scale: f64,
    },
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    Grl {
        input: Var,
        lambda: f64,
    },
    WeightedPool {
        features: Var,
        weights: Var,
    },
    EntropyRows(Var),
    Sum(Var),
    Mean(Var),
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
    TruncatedMse {
        log_probs: Var,
        clamp: f64,
    },
    Reshape(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum GrlBackward {
    Reverse,
    /// Backward behaves like the identity; used to compare whole-model
    /// gradients against finite differences, which cannot see the reversal.
    PassThrough,
    /// Deliberately wrong sign, for mutation-testing the gradient suite.
    FlippedSign,
}

pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    grl_backward: GrlBackward,
    kinks: u64,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grads: Vec::new(),
            grl_backward: GrlBackward::Reverse,
            kinks: FNV_OFFSET,
        }
    }

    /// Drops every recorded node and gradient. Options survive.
    pub fn reset(&mut self) {
        self.nodes.clear();
        self.grads.clear();
        self.kinks = FNV_OFFSET;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// When `false`, gradient reversal layers pass gradients through
    /// unchanged. Verification only.
    pub fn set_gradient_reversal(&mut self, enabled: bool) {
        self.grl_backward = if enabled {
            GrlBackward::Reverse
        } else {
            GrlBackward::PassThrough
        };
    }

    #[doc(hidden)]
    pub fn inject_grl_sign_fault(&mut self) {
        self.grl_backward = GrlBackward::FlippedSign;
    }

    /// Hash of every piecewise branch taken so far (relu masks, clamps).
    /// Two forward passes with equal signatures lie on the same smooth piece.
    pub fn kink_signature(&self) -> u64 {
        self.kinks
    }

    fn record_kinks(&mut self, bits: impl Iterator<Item = bool>) {
        let mut word = 0u64;
        let mut n = 0;
        for b in bits {
            word = (word << 1) | b as u64;
            n += 1;
            if n == 64 {
                self.kinks = (self.kinks ^ word).wrapping_mul(FNV_PRIME);
                word = 0;
                n = 0;
            }
        }
        self.kinks = (self.kinks ^ word ^ ((n as u64) << 56)).wrapping_mul(FNV_PRIME);
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Records a differentiable leaf (a parameter or input under test).
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Records a leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient buffer of `v` after [`Tape::backward`]; `None` when nothing
    /// reached it.
    pub fn grad_data(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }

    /// Gradient of `v` as a tensor, zero-filled when `v` is off the path.
    pub fn grad(&self, v: Var) -> Tensor {
        let shape = self.shape(v).to_vec();
        match &self.grads[v.0] {
            Some(g) => Tensor::new(shape, g.clone()).expect("grad shape"),
            None => Tensor::zeros(&shape),
        }
    }

    fn dims2(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        self.value(v).dims2().ok_or_else(|| Error::Dimension {
            op,
            left: self.shape(v).to_vec(),
            right: vec![],
        })
    }

    fn mismatch(&self, op: &'static str, a: Var, b: Var) -> Error {
        Error::Dimension {
            op,
            left: self.shape(a).to_vec(),
            right: self.shape(b).to_vec(),
        }
    }

    /// `input · weight + bias` for `input: T x D`, `weight: D x K`, `bias: K`.
    pub fn linear(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let (t, d) = self.dims2("linear", input)?;
        let (wd, k) = self.dims2("linear", weight)?;
        if wd != d {
            return Err(self.mismatch("linear", input, weight));
        }
        if self.shape(bias) != [k] {
            return Err(self.mismatch("linear", weight, bias));
        }
        let b = self.value(bias).data();
        let mut out = Vec::with_capacity(t * k);
        for _ in 0..t {
            out.extend_from_slice(b);
        }
        gemm_acc(
            t,
            d,
            k,
            MatRef::row_major(self.value(input).data(), d),
            MatRef::row_major(self.value(weight).data(), k),
            &mut out,
            k,
        );
        let rg = self.needs(&[input, weight, bias]);
        Ok(self.push(Tensor::new(vec![t, k], out)?, Op::Linear { input, weight, bias }, rg))
    }

    /// Centered ("acausal") dilated convolution over time with zero padding
    /// of `dilation * (k - 1) / 2` frames per side, so the output keeps `T`.
    /// `kernel` is `k x C_in x C_out`.
    pub fn dilated_conv1d(&mut self, input: Var, kernel: Var, bias: Var, dilation: usize) -> Result<Var> {
        let (t, cin) = self.dims2("dilated_conv1d", input)?;
        let kshape = self.shape(kernel).to_vec();
        let [k, kin, cout] = kshape[..] else {
            return Err(self.mismatch("dilated_conv1d", input, kernel));
        };
        if k % 2 == 0 {
            return Err(Error::config(format!("kernel size must be odd, got {k}")));
        }
        if dilation == 0 {
            return Err(Error::config("dilation must be at least 1"));
        }
        if kin != cin {
            return Err(self.mismatch("dilated_conv1d", input, kernel));
        }
        if self.shape(bias) != [cout] {
            return Err(self.mismatch("dilated_conv1d", kernel, bias));
        }
        let x = self.value(input).data();
        let w = self.value(kernel).data();
        let b = self.value(bias).data();
        let mut out = Vec::with_capacity(t * cout);
        for _ in 0..t {
            out.extend_from_slice(b);
        }
        for_each_tap(t, k, dilation, |tap, src, dst, rows| {
            gemm_acc(
                rows,
                cin,
                cout,
                MatRef::row_major(&x[src * cin..], cin),
                MatRef::row_major(&w[tap * cin * cout..(tap + 1) * cin * cout], cout),
                &mut out[dst * cout..],
                cout,
            );
        });
        let rg = self.needs(&[input, kernel, bias]);
        Ok(self.push(
            Tensor::new(vec![t, cout], out)?,
            Op::Conv {
                input,
                kernel,
                bias,
                dilation,
            },
            rg,
        ))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let out: Vec<f64> = v.data().iter().map(|&a| if a > 0.0 { a } else { 0.0 }).collect();
        let shape = v.shape().to_vec();
        let mask: Vec<bool> = v.data().iter().map(|&a| a > 0.0).collect();
        self.record_kinks(mask.into_iter());
        let rg = self.needs(&[x]);
        self.push(Tensor::new(shape, out).expect("shape"), Op::Relu(x), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(self.mismatch("add", a, b));
        }
        let out: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.needs(&[a, b]);
        Ok(self.push(Tensor::new(shape, out)?, Op::Add(a, b), rg))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(self.mismatch("mul", a, b));
        }
        let out: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.needs(&[a, b]);
        Ok(self.push(Tensor::new(shape, out)?, Op::Mul(a, b), rg))
    }

    /// `scale * x + shift`, elementwise.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Var {
        let v = self.value(x);
        let out: Vec<f64> = v.data().iter().map(|&a| scale * a + shift).collect();
        let shape = v.shape().to_vec();
        let rg = self.needs(&[x]);
        self.push(
            Tensor::new(shape, out).expect("shape"),
            Op::Affine { input: x, scale },
            rg,
        )
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        self.affine(x, factor, 0.0)
    }

    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let (t, c) = self.dims2("softmax_rows", x)?;
        let src = self.value(x).data();
        let mut out = vec![0.0; t * c];
        for r in 0..t {
            softmax_into(&src[r * c..(r + 1) * c], &mut out[r * c..(r + 1) * c]);
        }
        let rg = self.needs(&[x]);
        Ok(self.push(Tensor::new(vec![t, c], out)?, Op::SoftmaxRows(x), rg))
    }

    pub fn log_softmax_rows(&mut self, x: Var) -> Result<Var> {
        let (t, c) = self.dims2("log_softmax_rows", x)?;
        let src = self.value(x).data();
        let mut out = vec![0.0; t * c];
        for r in 0..t {
            log_softmax_into(&src[r * c..(r + 1) * c], &mut out[r * c..(r + 1) * c]);
        }
        let rg = self.needs(&[x]);
        Ok(self.push(Tensor::new(vec![t, c], out)?, Op::LogSoftmaxRows(x), rg))
    }

    /// Gradient reversal: identity forward, `-lambda` times upstream backward.
    pub fn grl(&mut self, x: Var, lambda: f64) -> Result<Var> {
        if !(lambda >= 0.0) || !lambda.is_finite() {
            return Err(Error::config(format!(
                "gradient reversal coefficient must be finite and nonnegative, got {lambda}"
            )));
        }
        let value = self.value(x).clone();
        let rg = self.needs(&[x]);
        Ok(self.push(value, Op::Grl { input: x, lambda }, rg))
    }

    /// `(1/T) Σ_t weights[t] · features[t]` for `features: T x D`, `weights: T`.
    pub fn weighted_temporal_pool(&mut self, features: Var, weights: Var) -> Result<Var> {
        let (t, d) = self.dims2("weighted_temporal_pool", features)?;
        if self.shape(weights) != [t] {
            return Err(self.mismatch("weighted_temporal_pool", features, weights));
        }
        let f = self.value(features).data();
        let w = self.value(weights).data();
        let mut out = vec![0.0; d];
        for (row, &wt) in f.chunks_exact(d).zip(w) {
            for (o, &v) in out.iter_mut().zip(row) {
                *o += wt * v;
            }
        }
        let inv = 1.0 / t as f64;
        out.iter_mut().for_each(|o| *o *= inv);
        let rg = self.needs(&[features, weights]);
        Ok(self.push(Tensor::new(vec![d], out)?, Op::WeightedPool { features, weights }, rg))
    }

    /// Natural-log entropy of each row of a `T x C` probability matrix,
    /// using `0 · log 0 = 0`. Output has shape `[T]`.
    pub fn entropy_rows(&mut self, p: Var) -> Result<Var> {
        let (t, c) = self.dims2("entropy_rows", p)?;
        let out: Vec<f64> = self.value(p).data().chunks_exact(c).map(entropy).collect();
        let rg = self.needs(&[p]);
        Ok(self.push(Tensor::new(vec![t], out)?, Op::EntropyRows(p), rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s: f64 = self.value(x).data().iter().sum();
        let rg = self.needs(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let s = v.data().iter().sum::<f64>() / v.len() as f64;
        let rg = self.needs(&[x]);
        self.push(Tensor::scalar(s), Op::Mean(x), rg)
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let value = self.value(x).clone().reshaped(shape)?;
        let rg = self.needs(&[x]);
        Ok(self.push(value, Op::Reshape(x), rg))
    }

    /// Mean over rows of `-log softmax(logits)[t, labels[t]]`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (t, c) = self.dims2("cross_entropy", logits)?;
        if labels.len() != t {
            return Err(Error::Dimension {
                op: "cross_entropy",
                left: vec![t, c],
                right: vec![labels.len()],
            });
        }
        if let Some((i, &l)) = labels.iter().enumerate().find(|(_, &l)| l >= c) {
            return Err(Error::Data(format!(
                "label {l} at frame {i} is out of range for {c} classes"
            )));
        }
        let src = self.value(logits).data();
        let mut probs = vec![0.0; t * c];
        let mut logp = vec![0.0; c];
        let mut total = 0.0;
        for (r, &l) in labels.iter().enumerate() {
            let row = &src[r * c..(r + 1) * c];
            log_softmax_into(row, &mut logp);
            total -= logp[l];
            softmax_into(row, &mut probs[r * c..(r + 1) * c]);
        }
        let rg = self.needs(&[logits]);
        Ok(self.push(
            Tensor::scalar(total / t as f64),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Mean over `t ≥ 1` and classes of `min((lp[t] - lp[t-1])², clamp²)`.
    /// A single frame yields zero.
    pub fn truncated_mse(&mut self, log_probs: Var, clamp: f64) -> Result<Var> {
        let (t, c) = self.dims2("truncated_mse", log_probs)?;
        if !(clamp >= 0.0) {
            return Err(Error::config(format!("clamp must be nonnegative, got {clamp}")));
        }
        let lp = self.value(log_probs).data();
        let cap = clamp * clamp;
        let mut total = 0.0;
        let mut clamped = Vec::with_capacity(t.saturating_sub(1) * c);
        for i in c..t * c {
            let d = lp[i] - lp[i - c];
            let sq = d * d;
            clamped.push(sq >= cap);
            total += sq.min(cap);
        }
        let n = (t.saturating_sub(1) * c).max(1);
        self.record_kinks(clamped.into_iter());
        let rg = self.needs(&[log_probs]);
        Ok(self.push(
            Tensor::scalar(total / n as f64),
            Op::TruncatedMse { log_probs, clamp },
            rg,
        ))
    }

    /// Populates gradients of `loss` with respect to every node on its path.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        for g in &mut self.grads {
            *g = None;
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            self.backprop_node(i, &g);
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    fn backprop_node(&mut self, i: usize, g: &[f64]) {
        let Tape {
            nodes,
            grads,
            grl_backward,
            ..
        } = self;
        let nodes: &[Node] = nodes;
        let val = |v: &Var| &nodes[v.0].value;
        let rg = |v: &Var| nodes[v.0].requires_grad;
        match &nodes[i].op {
            Op::Leaf => {}
            Op::Linear { input, weight, bias } => {
                let (t, d) = val(input).dims2().unwrap();
                let k = val(weight).shape()[1];
                if rg(input) {
                    let w = nodes[weight.0].value.data();
                    let dx = acc(nodes, grads, input).unwrap();
                    gemm_acc(t, k, d, MatRef::row_major(g, k), MatRef::transposed(w, k), dx, d);
                }
                if rg(weight) {
                    let x = nodes[input.0].value.data();
                    let dw = acc(nodes, grads, weight).unwrap();
                    gemm_acc(d, t, k, MatRef::transposed(x, d), MatRef::row_major(g, k), dw, k);
                }
                if let Some(db) = acc(nodes, grads, bias) {
                    for row in g.chunks_exact(k) {
                        for (b, &v) in db.iter_mut().zip(row) {
                            *b += v;
                        }
                    }
                }
            }
            Op::Conv {
                input,
                kernel,
                bias,
                dilation,
            } => {
                let (t, cin) = val(input).dims2().unwrap();
                let ks = val(kernel).shape().to_vec();
                let (k, cout) = (ks[0], ks[2]);
                let block = cin * cout;
                if rg(input) {
                    let w = nodes[kernel.0].value.data();
                    let dx = acc(nodes, grads, input).unwrap();
                    for_each_tap(t, k, *dilation, |tap, src, dst, rows| {
                        gemm_acc(
                            rows,
                            cout,
                            cin,
                            MatRef::row_major(&g[dst * cout..], cout),
                            MatRef::transposed(&w[tap * block..(tap + 1) * block], cout),
                            &mut dx[src * cin..],
                            cin,
                        );
                    });
                }
                if rg(kernel) {
                    let x = nodes[input.0].value.data();
                    let dw = acc(nodes, grads, kernel).unwrap();
                    for_each_tap(t, k, *dilation, |tap, src, dst, rows| {
                        gemm_acc(
                            cin,
                            rows,
                            cout,
                            MatRef::transposed(&x[src * cin..], cin),
                            MatRef::row_major(&g[dst * cout..], cout),
                            &mut dw[tap * block..(tap + 1) * block],
                            cout,
                        );
                    });
                }
                if let Some(db) = acc(nodes, grads, bias) {
                    for row in g.chunks_exact(cout) {
                        for (b, &v) in db.iter_mut().zip(row) {
                            *b += v;
                        }
                    }
                }
            }
            Op::Relu(x) => {
                let xs = nodes[x.0].value.data();
                if let Some(dx) = acc(nodes, grads, x) {
                    for ((d, &gv), &xv) in dx.iter_mut().zip(g).zip(xs) {
                        if xv > 0.0 {
                            *d += gv;
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if let Some(d) = acc(nodes, grads, &v) {
                        add_into(d, g);
                    }
                }
            }
            Op::Mul(a, b) => {
                let av = nodes[a.0].value.data();
                let bv = nodes[b.0].value.data();
                if let Some(da) = acc(nodes, grads, a) {
                    for ((d, &gv), &y) in da.iter_mut().zip(g).zip(bv) {
                        *d += gv * y;
                    }
                }
                if let Some(db) = acc(nodes, grads, b) {
                    for ((d, &gv), &y) in db.iter_mut().zip(g).zip(av) {
                        *d += gv * y;
                    }
                }
            }
            Op::Affine { input, scale } => {
                let s = *scale;
                if let Some(dx) = acc(nodes, grads, input) {
                    for (d, &gv) in dx.iter_mut().zip(g) {
                        *d += s * gv;
                    }
                }
            }
            Op::SoftmaxRows(x) => {
                let (_, c) = nodes[i].value.dims2().unwrap();
                let y = nodes[i].value.data().to_vec();
                if let Some(dx) = acc(nodes, grads, x) {
                    for ((drow, grow), yrow) in dx.chunks_exact_mut(c).zip(g.chunks_exact(c)).zip(y.chunks_exact(c)) {
                        let dot: f64 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                        for ((d, &gv), &yv) in drow.iter_mut().zip(grow).zip(yrow) {
                            *d += yv * (gv - dot);
                        }
                    }
                }
            }
            Op::LogSoftmaxRows(x) => {
                let (_, c) = nodes[i].value.dims2().unwrap();
                let y = nodes[i].value.data().to_vec();
                if let Some(dx) = acc(nodes, grads, x) {
                    for ((drow, grow), yrow) in dx.chunks_exact_mut(c).zip(g.chunks_exact(c)).zip(y.chunks_exact(c)) {
                        let gsum: f64 = grow.iter().sum();
                        for ((d, &gv), &lp) in drow.iter_mut().zip(grow).zip(yrow) {
                            *d += gv - lp.exp() * gsum;
                        }
                    }
                }
            }
            Op::Grl { input, lambda } => {
                let factor = match grl_backward {
                    GrlBackward::Reverse => -lambda,
                    GrlBackward::PassThrough => 1.0,
                    GrlBackward::FlippedSign => *lambda,
                };
                if let Some(dx) = acc(nodes, grads, input) {
                    for (d, &gv) in dx.iter_mut().zip(g) {
                        *d += factor * gv;
                    }
                }
            }
            Op::WeightedPool { features, weights } => {
                let (t, dim) = val(features).dims2().unwrap();
                let inv = 1.0 / t as f64;
                let f = nodes[features.0].value.data();
                let w = nodes[weights.0].value.data();
                if let Some(df) = acc(nodes, grads, features) {
                    for (row, &wt) in df.chunks_exact_mut(dim).zip(w) {
                        for (d, &gv) in row.iter_mut().zip(g) {
                            *d += gv * wt * inv;
                        }
                    }
                }
                if let Some(dw) = acc(nodes, grads, weights) {
                    for (d, row) in dw.iter_mut().zip(f.chunks_exact(dim)) {
                        *d += inv * row.iter().zip(g).map(|(a, b)| a * b).sum::<f64>();
                    }
                }
            }
            Op::EntropyRows(p) => {
                let (_, c) = val(p).dims2().unwrap();
                let pv = nodes[p.0].value.data();
                if let Some(dp) = acc(nodes, grads, p) {
                    for ((drow, prow), &gv) in dp.chunks_exact_mut(c).zip(pv.chunks_exact(c)).zip(g) {
                        for (d, &q) in drow.iter_mut().zip(prow) {
                            if q > 0.0 {
                                *d -= gv * (q.ln() + 1.0);
                            }
                        }
                    }
                }
            }
            Op::Sum(x) => {
                let gv = g[0];
                if let Some(dx) = acc(nodes, grads, x) {
                    dx.iter_mut().for_each(|d| *d += gv);
                }
            }
            Op::Mean(x) => {
                let n = nodes[x.0].value.len() as f64;
                let gv = g[0] / n;
                if let Some(dx) = acc(nodes, grads, x) {
                    dx.iter_mut().for_each(|d| *d += gv);
                }
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let (t, c) = val(logits).dims2().unwrap();
                let scale = g[0] / t as f64;
                if let Some(dx) = acc(nodes, grads, logits) {
                    for (r, &l) in labels.iter().enumerate() {
                        for j in 0..c {
                            let target = if j == l { 1.0 } else { 0.0 };
                            dx[r * c + j] += scale * (probs[r * c + j] - target);
                        }
                    }
                }
            }
            Op::TruncatedMse { log_probs, clamp } => {
                let (t, c) = val(log_probs).dims2().unwrap();
                let cap = clamp * clamp;
                let lp = nodes[log_probs.0].value.data();
                let n = (t.saturating_sub(1) * c).max(1) as f64;
                let scale = g[0] / n;
                if let Some(dx) = acc(nodes, grads, log_probs) {
                    for idx in c..t * c {
                        let d = lp[idx] - lp[idx - c];
                        if d * d < cap {
                            dx[idx] += 2.0 * d * scale;
                            dx[idx - c] -= 2.0 * d * scale;
                        }
                    }
                }
            }
            Op::Reshape(x) => {
                if let Some(dx) = acc(nodes, grads, x) {
                    add_into(dx, g);
                }
            }
        }
    }
}

fn acc<'a>(nodes: &[Node], grads: &'a mut [Option<Vec<f64>>], v: &Var) -> Option<&'a mut [f64]> {
    if !nodes[v.0].requires_grad {
        return None;
    }
    let n = nodes[v.0].value.len();
    Some(grads[v.0].get_or_insert_with(|| vec![0.0; n]).as_mut_slice())
}

/// Calls `f(tap, src_row, dst_row, rows)` for each kernel tap's contiguous
/// block of valid (non-padded) rows.
fn for_each_tap(t: usize, k: usize, dilation: usize, mut f: impl FnMut(usize, usize, usize, usize)) {
    let half = (k / 2) as isize;
    let t = t as isize;
    for tap in 0..k {
        let offset = (tap as isize - half) * dilation as isize;
        let dst_start = (-offset).max(0);
        let dst_end = (t - offset).min(t);
        if dst_end <= dst_start {
            continue;
        }
        f(
            tap,
            (dst_start + offset) as usize,
            dst_start as usize,
            (dst_end - dst_start) as usize,
        );
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

pub(crate) fn softmax_into(row: &[f64], out: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for (o, &v) in out.iter_mut().zip(row) {
        *o = (v - max).exp();
        z += *o;
    }
    out.iter_mut().for_each(|o| *o /= z);
}

pub(crate) fn log_softmax_into(row: &[f64], out: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
    for (o, &v) in out.iter_mut().zip(row) {
        *o = v - lse;
    }
}

/// Natural-log entropy of a distribution, with `0 · log 0 = 0`.
pub fn entropy(p: &[f64]) -> f64 {
    -p.iter().filter(|&&q| q > 0.0).map(|&q| q * q.ln()).sum::<f64>()
}
