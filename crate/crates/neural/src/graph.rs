//! Tape-based reverse-mode differentiation over dense f64 tensors.
//!
//! Every op appends a node holding its output value; [`Graph::backward`]
//! walks the tape in reverse and leaves gradients on the leaves that asked
//! for them. Tensors use `[N, C, D, H, W]` layout for volumes.

use rand::Rng;

use crate::kernels::{conv_backward_data, conv_backward_weight, conv_forward, ConvGeom};
use crate::NeuralError;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, NeuralError> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(NeuralError::ShapeMismatch(format!("shape {shape:?} needs {n} values, got {}", data.len())));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self { shape, data: vec![0.0; n] }
    }

    pub fn scalar(v: f64) -> Self {
        Self { shape: vec![], data: vec![v] }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// `(N, C, spatial)` of a 5-d tensor.
    fn ncs(&self) -> Result<(usize, usize, [usize; 3]), NeuralError> {
        match self.shape[..] {
            [n, c, d, h, w] => Ok((n, c, [d, h, w])),
            _ => Err(NeuralError::ShapeMismatch(format!("expected [N,C,D,H,W], got {:?}", self.shape))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv { x: Var, w: Var, stride: usize },
    ConvT { x: Var, w: Var },
    Bias { x: Var, b: Var },
    Add { a: Var, b: Var },
    Relu { x: Var },
    Sigmoid { x: Var },
    GroupNorm { x: Var, gamma: Var, beta: Var, groups: usize, xhat: Vec<f64>, rstd: Vec<f64> },
    Dropout { x: Var, scale: Vec<f64> },
    SoftDice { pred: Var, dpred: Vec<f64> },
    WeightedSum { x: Var, weights: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

pub const GROUP_NORM_EPS: f64 = 1e-5;

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    /// Constant input (no gradient).
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Trainable leaf; its gradient is kept after [`Graph::backward`].
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Gradient of the last backward pass (leaves only). Same shape as the value.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Vec<f64>> {
        self.grads[v.0].take()
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// 3×3×3 (or 1×1×1) convolution, zero "same" padding, stride 1 or 2.
    /// `w` is `[F, C, k, k, k]`.
    pub fn conv3d(&mut self, x: Var, w: Var, stride: usize) -> Result<Var, NeuralError> {
        let (n, c, sp) = self.value(x).ncs()?;
        let g = conv_geom(&self.value(w).shape, c, sp, stride)?;
        let out_sp = g.output();
        let (ip, op) = (c * sp.iter().product::<usize>(), g.c_out * out_sp.iter().product::<usize>());
        let mut out = vec![0.0; n * op];
        {
            let (xv, wv) = (&self.value(x).data, &self.value(w).data);
            for s in 0..n {
                conv_forward(&g, &xv[s * ip..(s + 1) * ip], wv, &mut out[s * op..(s + 1) * op]);
            }
        }
        let shape = vec![n, g.c_out, out_sp[0], out_sp[1], out_sp[2]];
        let rg = self.rg(x) || self.rg(w);
        Ok(self.push(Tensor { shape, data: out }, Op::Conv { x, w, stride }, rg))
    }

    /// Stride-2 transposed 3×3×3 convolution, the adjoint of the stride-2
    /// [`Graph::conv3d`]: output spatial dims are twice the input's.
    /// `w` is `[C_in, C_out, 3, 3, 3]`.
    pub fn conv3d_transpose(&mut self, x: Var, w: Var) -> Result<Var, NeuralError> {
        let (n, c, sp) = self.value(x).ncs()?;
        let g = convt_geom(&self.value(w).shape, c, sp)?;
        let big = g.input;
        let (sp_small, sp_big) = (sp.iter().product::<usize>(), big.iter().product::<usize>());
        let (ip, op) = (c * sp_small, g.c_in * sp_big);
        let mut out = vec![0.0; n * op];
        {
            let (xv, wv) = (&self.value(x).data, &self.value(w).data);
            for s in 0..n {
                conv_backward_data(&g, &xv[s * ip..(s + 1) * ip], wv, &mut out[s * op..(s + 1) * op]);
            }
        }
        let shape = vec![n, g.c_in, big[0], big[1], big[2]];
        let rg = self.rg(x) || self.rg(w);
        Ok(self.push(Tensor { shape, data: out }, Op::ConvT { x, w }, rg))
    }

    /// Per-channel bias, `b` of shape `[C]`.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var, NeuralError> {
        let (_, c, sp) = self.value(x).ncs()?;
        if self.value(b).shape != [c] {
            return Err(NeuralError::ShapeMismatch(format!("bias {:?} for {c} channels", self.value(b).shape)));
        }
        let plane: usize = sp.iter().product();
        let bv = &self.value(b).data;
        let mut data = self.value(x).data.clone();
        for (i, chunk) in data.chunks_mut(plane).enumerate() {
            let bi = bv[i % c];
            chunk.iter_mut().for_each(|v| *v += bi);
        }
        let shape = self.value(x).shape.clone();
        let rg = self.rg(x) || self.rg(b);
        Ok(self.push(Tensor { shape, data }, Op::Bias { x, b }, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NeuralError> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape != vb.shape {
            return Err(NeuralError::ShapeMismatch(format!("add {:?} + {:?}", va.shape, vb.shape)));
        }
        let data = va.data.iter().zip(&vb.data).map(|(p, q)| p + q).collect();
        let shape = va.shape.clone();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor { shape, data }, Op::Add { a, b }, rg))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let t = Tensor { shape: v.shape.clone(), data: v.data.iter().map(|&a| a.max(0.0)).collect() };
        let rg = self.rg(x);
        self.push(t, Op::Relu { x }, rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let t = Tensor { shape: v.shape.clone(), data: v.data.iter().map(|&a| sigmoid(a)).collect() };
        let rg = self.rg(x);
        self.push(t, Op::Sigmoid { x }, rg)
    }

    /// Group normalization with per-channel affine `gamma`, `beta` (`[C]`).
    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize) -> Result<Var, NeuralError> {
        let (n, c, sp) = self.value(x).ncs()?;
        if groups == 0 || c % groups != 0 {
            return Err(NeuralError::BadGroupCount { channels: c, groups });
        }
        for p in [gamma, beta] {
            if self.value(p).shape != [c] {
                return Err(NeuralError::ShapeMismatch(format!(
                    "norm affine {:?} for {c} channels",
                    self.value(p).shape
                )));
            }
        }
        let plane: usize = sp.iter().product();
        let m = c / groups * plane;
        let xv = &self.value(x).data;
        let (gv, bv) = (&self.value(gamma).data, &self.value(beta).data);
        let mut xhat = vec![0.0; xv.len()];
        let mut out = vec![0.0; xv.len()];
        let mut rstd = vec![0.0; n * groups];
        for (gi, (chunk, hat)) in xv.chunks(m).zip(xhat.chunks_mut(m)).enumerate() {
            let mean = chunk.iter().sum::<f64>() / m as f64;
            let var = chunk.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / m as f64;
            let r = 1.0 / (var + GROUP_NORM_EPS).sqrt();
            rstd[gi] = r;
            for (h, v) in hat.iter_mut().zip(chunk) {
                *h = (v - mean) * r;
            }
        }
        for (i, (o, h)) in out.chunks_mut(plane).zip(xhat.chunks(plane)).enumerate() {
            let ch = i % c;
            for (ov, hv) in o.iter_mut().zip(h) {
                *ov = hv * gv[ch] + bv[ch];
            }
        }
        let shape = self.value(x).shape.clone();
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(Tensor { shape, data: out }, Op::GroupNorm { x, gamma, beta, groups, xhat, rstd }, rg))
    }

    /// Zeroes whole channels with probability `rate` and rescales survivors
    /// by `1/(1 − rate)`; identity outside training.
    pub fn spatial_dropout(
        &mut self,
        x: Var,
        rate: f64,
        training: bool,
        rng: &mut impl Rng,
    ) -> Result<Var, NeuralError> {
        if !(0.0..1.0).contains(&rate) {
            return Err(NeuralError::BadConfig(format!("dropout rate {rate} outside [0, 1)")));
        }
        if !training || rate == 0.0 {
            return Ok(x);
        }
        let (n, c, sp) = self.value(x).ncs()?;
        let plane: usize = sp.iter().product();
        let keep = 1.0 / (1.0 - rate);
        let scale: Vec<f64> = (0..n * c).map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep }).collect();
        let mut data = self.value(x).data.clone();
        for (chunk, s) in data.chunks_mut(plane).zip(&scale) {
            chunk.iter_mut().for_each(|v| *v *= s);
        }
        let shape = self.value(x).shape.clone();
        let rg = self.rg(x);
        Ok(self.push(Tensor { shape, data }, Op::Dropout { x, scale }, rg))
    }

    /// Mean soft Dice loss over every (sample, channel) map of `pred`
    /// against a same-shaped target.
    pub fn soft_dice_loss(&mut self, pred: Var, target: &Tensor, smooth: f64) -> Result<Var, NeuralError> {
        let (n, c, sp) = self.value(pred).ncs()?;
        if self.value(pred).shape != target.shape {
            return Err(NeuralError::ShapeMismatch(format!(
                "prediction {:?} vs target {:?}",
                self.value(pred).shape,
                target.shape
            )));
        }
        let plane: usize = sp.iter().product();
        let p: Vec<&[f64]> = self.value(pred).data.chunks(plane).collect();
        let g: Vec<&[f64]> = target.data.chunks(plane).collect();
        debug_assert_eq!(p.len(), n * c);
        let (loss, grads) = netseg_core::metrics::soft_dice_loss_with_grad(&p, &g, smooth)?;
        let dpred = grads.concat();
        let rg = self.rg(pred);
        Ok(self.push(Tensor::scalar(loss), Op::SoftDice { pred, dpred }, rg))
    }

    /// `Σ w_i x_i`, a scalar probe used by gradient checks.
    pub fn weighted_sum(&mut self, x: Var, weights: Vec<f64>) -> Result<Var, NeuralError> {
        if weights.len() != self.value(x).len() {
            return Err(NeuralError::ShapeMismatch(format!(
                "{} weights for {} values",
                weights.len(),
                self.value(x).len()
            )));
        }
        let s = self.value(x).data.iter().zip(&weights).map(|(a, b)| a * b).sum();
        let rg = self.rg(x);
        Ok(self.push(Tensor::scalar(s), Op::WeightedSum { x, weights }, rg))
    }

    /// Back-propagates from the scalar `loss`. Gradients of intermediate
    /// nodes are released as soon as they have been consumed.
    pub fn backward(&mut self, loss: Var) -> Result<(), NeuralError> {
        if self.value(loss).len() != 1 {
            return Err(NeuralError::ShapeMismatch(format!("backward from non-scalar {:?}", self.value(loss).shape)));
        }
        self.grads.iter_mut().for_each(|g| *g = None);
        self.grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(dy) = self.grads[i].take() else { continue };
            if matches!(self.nodes[i].op, Op::Leaf) {
                self.grads[i] = Some(dy);
                continue;
            }
            self.backprop_node(i, &dy);
        }
        Ok(())
    }

    fn backprop_node(&mut self, i: usize, dy: &[f64]) {
        // Nodes only reference earlier nodes, so splitting the tape lets us
        // read this node's inputs while accumulating into their gradients.
        let (earlier, rest) = self.nodes.split_at(i);
        let node = &rest[0];
        let grads = &mut self.grads[..i];
        macro_rules! acc {
            ($v:expr) => {
                grad_slot(earlier, &mut *grads, $v)
            };
        }
        match &node.op {
            Op::Leaf => {}
            Op::Conv { x, w, stride } => {
                let (n, c, sp) = earlier[x.0].value.ncs().expect("checked in forward");
                let g = conv_geom(&earlier[w.0].value.shape, c, sp, *stride).expect("checked in forward");
                let ip = c * sp.iter().product::<usize>();
                let op = g.c_out * g.output().iter().product::<usize>();
                let (xv, wv) = (&earlier[x.0].value.data, &earlier[w.0].value.data);
                if let Some(dw) = acc!(*w) {
                    for s in 0..n {
                        conv_backward_weight(&g, &dy[s * op..(s + 1) * op], &xv[s * ip..(s + 1) * ip], dw);
                    }
                }
                if let Some(dx) = acc!(*x) {
                    for s in 0..n {
                        conv_backward_data(&g, &dy[s * op..(s + 1) * op], wv, &mut dx[s * ip..(s + 1) * ip]);
                    }
                }
            }
            Op::ConvT { x, w } => {
                let (n, c, sp) = earlier[x.0].value.ncs().expect("checked in forward");
                let g = convt_geom(&earlier[w.0].value.shape, c, sp).expect("checked in forward");
                let ip = c * sp.iter().product::<usize>();
                let op = g.c_in * g.input.iter().product::<usize>();
                let (xv, wv) = (&earlier[x.0].value.data, &earlier[w.0].value.data);
                if let Some(dw) = acc!(*w) {
                    for s in 0..n {
                        conv_backward_weight(&g, &xv[s * ip..(s + 1) * ip], &dy[s * op..(s + 1) * op], dw);
                    }
                }
                if let Some(dx) = acc!(*x) {
                    for s in 0..n {
                        conv_forward(&g, &dy[s * op..(s + 1) * op], wv, &mut dx[s * ip..(s + 1) * ip]);
                    }
                }
            }
            Op::Bias { x, b } => {
                let (_, c, sp) = earlier[x.0].value.ncs().expect("checked in forward");
                let plane: usize = sp.iter().product();
                if let Some(db) = acc!(*b) {
                    for (k, chunk) in dy.chunks(plane).enumerate() {
                        db[k % c] += chunk.iter().sum::<f64>();
                    }
                }
                if let Some(dx) = acc!(*x) {
                    add_into(dx, dy);
                }
            }
            Op::Add { a, b } => {
                if let Some(da) = acc!(*a) {
                    add_into(da, dy);
                }
                if let Some(db) = acc!(*b) {
                    add_into(db, dy);
                }
            }
            Op::Relu { x } => {
                let xv = &earlier[x.0].value.data;
                if let Some(dx) = acc!(*x) {
                    for ((d, &g), &v) in dx.iter_mut().zip(dy).zip(xv) {
                        if v > 0.0 {
                            *d += g;
                        }
                    }
                }
            }
            Op::Sigmoid { x } => {
                let yv = &node.value.data;
                if let Some(dx) = acc!(*x) {
                    for ((d, &g), &y) in dx.iter_mut().zip(dy).zip(yv) {
                        *d += g * y * (1.0 - y);
                    }
                }
            }
            Op::GroupNorm { x, gamma, beta, groups, xhat, rstd } => {
                let (_, c, sp) = earlier[x.0].value.ncs().expect("checked in forward");
                let plane: usize = sp.iter().product();
                let gv = &earlier[gamma.0].value.data;
                if let Some(dg) = acc!(*gamma) {
                    for (k, (d, h)) in dy.chunks(plane).zip(xhat.chunks(plane)).enumerate() {
                        dg[k % c] += d.iter().zip(h).map(|(a, b)| a * b).sum::<f64>();
                    }
                }
                if let Some(db) = acc!(*beta) {
                    for (k, d) in dy.chunks(plane).enumerate() {
                        db[k % c] += d.iter().sum::<f64>();
                    }
                }
                if let Some(dx) = acc!(*x) {
                    let cpg = c / groups;
                    let m = cpg * plane;
                    for (gi, r) in rstd.iter().enumerate() {
                        let range = gi * m..(gi + 1) * m;
                        let (d, h) = (&dy[range.clone()], &xhat[range.clone()]);
                        let gam = |j: usize| gv[(gi * cpg + j / plane) % c];
                        let (mut s1, mut s2) = (0.0, 0.0);
                        for j in 0..m {
                            let g = d[j] * gam(j);
                            s1 += g;
                            s2 += g * h[j];
                        }
                        let (s1, s2) = (s1 / m as f64, s2 / m as f64);
                        for (j, o) in dx[range].iter_mut().enumerate() {
                            *o += r * (d[j] * gam(j) - s1 - h[j] * s2);
                        }
                    }
                }
            }
            Op::Dropout { x, scale } => {
                let (_, _, sp) = earlier[x.0].value.ncs().expect("checked in forward");
                let plane: usize = sp.iter().product();
                if let Some(dx) = acc!(*x) {
                    for ((o, d), s) in dx.chunks_mut(plane).zip(dy.chunks(plane)).zip(scale) {
                        for (a, b) in o.iter_mut().zip(d) {
                            *a += b * s;
                        }
                    }
                }
            }
            Op::SoftDice { pred, dpred } => {
                if let Some(dp) = acc!(*pred) {
                    for (a, b) in dp.iter_mut().zip(dpred) {
                        *a += dy[0] * b;
                    }
                }
            }
            Op::WeightedSum { x, weights } => {
                if let Some(dx) = acc!(*x) {
                    for (a, b) in dx.iter_mut().zip(weights) {
                        *a += dy[0] * b;
                    }
                }
            }
        }
    }
}

fn grad_slot<'a>(nodes: &[Node], grads: &'a mut [Option<Vec<f64>>], v: Var) -> Option<&'a mut Vec<f64>> {
    let n = &nodes[v.0];
    if !n.requires_grad {
        return None;
    }
    let len = n.value.len();
    Some(grads[v.0].get_or_insert_with(|| vec![0.0; len]))
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (a, b) in dst.iter_mut().zip(src) {
        *a += b;
    }
}

/// Logistic function kept strictly inside (0, 1) even where it saturates.
pub fn sigmoid(a: f64) -> f64 {
    let y = if a >= 0.0 {
        1.0 / (1.0 + (-a).exp())
    } else {
        let e = a.exp();
        e / (1.0 + e)
    };
    y.clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON / 2.0)
}

fn conv_geom(wshape: &[usize], c: usize, input: [usize; 3], stride: usize) -> Result<ConvGeom, NeuralError> {
    let [f, wc, k, k2, k3] = wshape[..] else {
        return Err(NeuralError::ShapeMismatch(format!("conv weight must be 5-d, got {wshape:?}")));
    };
    if wc != c || k != k2 || k != k3 || !(k == 1 || k == 3) {
        return Err(NeuralError::ShapeMismatch(format!("conv weight {wshape:?} for {c} input channels")));
    }
    if !(stride == 1 || stride == 2) {
        return Err(NeuralError::ShapeMismatch(format!("stride {stride}")));
    }
    if input.contains(&0) {
        return Err(NeuralError::ShapeMismatch(format!("empty spatial dims {input:?}")));
    }
    Ok(ConvGeom { c_in: c, c_out: f, k, stride, input })
}

/// The transposed conv reuses the stride-2 geometry seen from the large side.
fn convt_geom(wshape: &[usize], c: usize, input: [usize; 3]) -> Result<ConvGeom, NeuralError> {
    let [wc, f, 3, 3, 3] = wshape[..] else {
        return Err(NeuralError::ShapeMismatch(format!("transposed conv weight {wshape:?}")));
    };
    if wc != c {
        return Err(NeuralError::ShapeMismatch(format!("transposed conv weight {wshape:?} for {c} input channels")));
    }
    Ok(ConvGeom { c_in: f, c_out: c, k: 3, stride: 2, input: input.map(|d| 2 * d) })
}
