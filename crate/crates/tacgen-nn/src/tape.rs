//! Reverse-mode automatic differentiation on a flat tape of f64 tensors.
//!
//! Each forward call appends a node holding the op, its input ids, and the
//! computed value; `backward` walks the tape in reverse accumulating adjoints.
//! Everything is single-threaded f64 with fixed iteration order, so losses
//! and gradients are bit-reproducible across runs.
//!
//! Shape conventions: token tensors are `(rows, cols)`; "vec" operands are
//! `(1, cols)` rows broadcast over rows; image tensors are `(n, c, h, w)`;
//! scalar losses are one-element 1-D arrays.

use ndarray::{Array1, Array2, Array4, ArrayD, Axis, Ix1, Ix2, Ix4, IxDyn};

use crate::store::{ParamId, ParamStore};

pub type NodeId = usize;

const LAYER_NORM_EPS: f64 = 1e-6;
const BATCH_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone)]
enum Op {
    Constant,
    Param(ParamId),
    Add(NodeId, NodeId),
    AddScaled(NodeId, NodeId, f64, f64),
    Scale(NodeId, f64),
    AddVec(NodeId, NodeId),
    MulVec(NodeId, NodeId),
    Matmul(NodeId, NodeId),
    Linear { x: NodeId, w: NodeId, b: NodeId },
    Relu(NodeId),
    Silu(NodeId),
    Gelu(NodeId),
    Sigmoid(NodeId),
    LayerNorm(NodeId),
    Modulate { x: NodeId, shift: NodeId, scale: NodeId },
    Attention { q: NodeId, k: NodeId, v: NodeId, heads: usize },
    SliceCols { x: NodeId, start: usize, len: usize },
    Reshape(NodeId),
    MeanRows(NodeId),
    Conv2d { x: NodeId, w: NodeId, b: NodeId, pad: usize },
    MaxPool2(NodeId),
    BatchNormTrain { x: NodeId, gamma: NodeId, beta: NodeId },
    BatchNormEval { x: NodeId, gamma: NodeId, beta: NodeId },
    Upsample2(NodeId),
    MseLoss { pred: NodeId },
    L1Loss { pred: NodeId },
    CrossEntropy { logits: NodeId },
    MeanAll(NodeId),
}

enum Aux {
    None,
    AttnProbs(Vec<Array2<f64>>),
    Norm { invstd: Array1<f64>, xhat: Array2<f64> },
    PoolArgmax(Vec<usize>),
    BnTrain { invstd: Array1<f64>, xhat: Array4<f64>, mean: Array1<f64>, var: Array1<f64> },
    BnEval { invstd: Array1<f64>, xhat: Array4<f64> },
    Loss { target: ArrayD<f64>, weight: Option<ArrayD<f64>>, denom: f64 },
    Ce { probs: Array2<f64>, labels: Vec<usize> },
    Cols(Vec<Array2<f64>>),
}

struct Node {
    value: ArrayD<f64>,
    op: Op,
    needs_grad: bool,
    aux: Aux,
}

/// Per-parameter gradient accumulator, indexed by `ParamId`.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<ArrayD<f64>>>,
}

impl Gradients {
    pub fn zeros(len: usize) -> Self {
        Self { grads: vec![None; len] }
    }

    pub fn get(&self, id: ParamId) -> Option<&ArrayD<f64>> {
        self.grads[id.0].as_ref()
    }

    fn accumulate(&mut self, id: ParamId, g: &ArrayD<f64>) {
        match &mut self.grads[id.0] {
            Some(acc) => *acc += g,
            slot => *slot = Some(g.clone()),
        }
    }

    /// Merges another gradient set (used to sum per-sample tapes).
    pub fn add_assign(&mut self, other: &Gradients) {
        assert_eq!(self.grads.len(), other.grads.len());
        for (a, b) in self.grads.iter_mut().zip(&other.grads) {
            if let Some(g) = b {
                match a {
                    Some(acc) => *acc += g,
                    slot => *slot = Some(g.clone()),
                }
            }
        }
    }

    pub fn scale(&mut self, c: f64) {
        for g in self.grads.iter_mut().flatten() {
            *g *= c;
        }
    }

    /// Global L2 norm over all stored gradients.
    pub fn l2_norm(&self) -> f64 {
        self.grads
            .iter()
            .flatten()
            .map(|g| g.iter().map(|v| v * v).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }
}

pub struct Tape {
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

impl Tape {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &ArrayD<f64> {
        &self.nodes[id].value
    }

    pub fn scalar(&self, id: NodeId) -> f64 {
        let v = &self.nodes[id].value;
        assert_eq!(v.len(), 1, "node {id} is not scalar");
        v.iter().next().copied().unwrap()
    }

    fn push(&mut self, value: ArrayD<f64>, op: Op, needs_grad: bool, aux: Aux) -> NodeId {
        self.nodes.push(Node { value, op, needs_grad, aux });
        self.nodes.len() - 1
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id].needs_grad
    }

    fn as2(&self, id: NodeId) -> ndarray::ArrayView2<'_, f64> {
        self.nodes[id]
            .value
            .view()
            .into_dimensionality::<Ix2>()
            .expect("expected a 2-D tensor")
    }

    fn as4(&self, id: NodeId) -> ndarray::ArrayView4<'_, f64> {
        self.nodes[id]
            .value
            .view()
            .into_dimensionality::<Ix4>()
            .expect("expected a 4-D tensor")
    }

    fn as1(&self, id: NodeId) -> ndarray::ArrayView1<'_, f64> {
        self.nodes[id]
            .value
            .view()
            .into_dimensionality::<Ix1>()
            .expect("expected a 1-D tensor")
    }

    // ----- leaves -----

    pub fn constant<D: ndarray::Dimension>(&mut self, value: ndarray::Array<f64, D>) -> NodeId {
        self.push(value.into_dyn(), Op::Constant, false, Aux::None)
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> NodeId {
        self.push(store.get(id).clone(), Op::Param(id), true, Aux::None)
    }

    // ----- arithmetic -----

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.nodes[a].value.shape(), self.nodes[b].value.shape(), "add shape mismatch");
        let value = &self.nodes[a].value + &self.nodes[b].value;
        let ng = self.needs(a) || self.needs(b);
        self.push(value, Op::Add(a, b), ng, Aux::None)
    }

    /// `alpha * a + beta * b`.
    pub fn add_scaled(&mut self, a: NodeId, b: NodeId, alpha: f64, beta: f64) -> NodeId {
        assert_eq!(self.nodes[a].value.shape(), self.nodes[b].value.shape());
        let value = self.nodes[a].value.mapv(|v| v * alpha) + self.nodes[b].value.mapv(|v| v * beta);
        let ng = self.needs(a) || self.needs(b);
        self.push(value, Op::AddScaled(a, b, alpha, beta), ng, Aux::None)
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let value = self.nodes[a].value.mapv(|v| v * c);
        let ng = self.needs(a);
        self.push(value, Op::Scale(a, c), ng, Aux::None)
    }

    /// Adds a `(1, d)` row vector to every row of `x`.
    pub fn add_vec(&mut self, x: NodeId, v: NodeId) -> NodeId {
        let xv = self.as2(x);
        let vv = self.as2(v);
        assert_eq!(vv.shape()[0], 1, "add_vec vector must be (1, d)");
        assert_eq!(xv.shape()[1], vv.shape()[1]);
        let value = (&xv + &vv.row(0)).into_dyn();
        let ng = self.needs(x) || self.needs(v);
        self.push(value, Op::AddVec(x, v), ng, Aux::None)
    }

    /// Multiplies every row of `x` elementwise by a `(1, d)` row vector.
    pub fn mul_vec(&mut self, x: NodeId, v: NodeId) -> NodeId {
        let xv = self.as2(x);
        let vv = self.as2(v);
        assert_eq!(vv.shape()[0], 1, "mul_vec vector must be (1, d)");
        assert_eq!(xv.shape()[1], vv.shape()[1]);
        let value = (&xv * &vv.row(0)).into_dyn();
        let ng = self.needs(x) || self.needs(v);
        self.push(value, Op::MulVec(x, v), ng, Aux::None)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let av = self.as2(a);
        let bv = self.as2(b);
        assert_eq!(av.shape()[1], bv.shape()[0], "matmul inner dims");
        let value = av.dot(&bv).into_dyn();
        let ng = self.needs(a) || self.needs(b);
        self.push(value, Op::Matmul(a, b), ng, Aux::None)
    }

    /// `x (t, i) * w (i, o) + b (1, o)`.
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: NodeId) -> NodeId {
        let xv = self.as2(x);
        let wv = self.as2(w);
        let bv = self.as2(b);
        assert_eq!(xv.shape()[1], wv.shape()[0], "linear inner dims");
        assert_eq!(bv.shape(), &[1, wv.shape()[1]], "linear bias shape");
        let value = (xv.dot(&wv) + &bv.row(0)).into_dyn();
        let ng = self.needs(x) || self.needs(w) || self.needs(b);
        self.push(value, Op::Linear { x, w, b }, ng, Aux::None)
    }

    // ----- activations -----

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let value = self.nodes[x].value.mapv(|v| v.max(0.0));
        let ng = self.needs(x);
        self.push(value, Op::Relu(x), ng, Aux::None)
    }

    pub fn silu(&mut self, x: NodeId) -> NodeId {
        let value = self.nodes[x].value.mapv(|v| v * sigmoid(v));
        let ng = self.needs(x);
        self.push(value, Op::Silu(x), ng, Aux::None)
    }

    /// Tanh-approximation GELU.
    pub fn gelu(&mut self, x: NodeId) -> NodeId {
        let value = self.nodes[x]
            .value
            .mapv(|v| 0.5 * v * (1.0 + (GELU_C * (v + GELU_A * v * v * v)).tanh()));
        let ng = self.needs(x);
        self.push(value, Op::Gelu(x), ng, Aux::None)
    }

    pub fn sigmoid_op(&mut self, x: NodeId) -> NodeId {
        let value = self.nodes[x].value.mapv(sigmoid);
        let ng = self.needs(x);
        self.push(value, Op::Sigmoid(x), ng, Aux::None)
    }

    // ----- normalization / modulation -----

    /// Row-wise layer norm without affine parameters.
    pub fn layer_norm(&mut self, x: NodeId) -> NodeId {
        let xv = self.as2(x);
        let (t, d) = (xv.shape()[0], xv.shape()[1]);
        let mut out = Array2::zeros((t, d));
        let mut invstd = Array1::zeros(t);
        for r in 0..t {
            let row = xv.row(r);
            let mean = row.sum() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            invstd[r] = is;
            for c in 0..d {
                out[[r, c]] = (row[c] - mean) * is;
            }
        }
        let ng = self.needs(x);
        let aux = Aux::Norm { invstd, xhat: out.clone() };
        self.push(out.into_dyn(), Op::LayerNorm(x), ng, aux)
    }

    /// `x * (1 + scale) + shift` with `(1, d)` shift/scale rows.
    pub fn modulate(&mut self, x: NodeId, shift: NodeId, scale: NodeId) -> NodeId {
        let xv = self.as2(x);
        let sh = self.as2(shift);
        let sc = self.as2(scale);
        assert_eq!(sh.shape(), &[1, xv.shape()[1]]);
        assert_eq!(sc.shape(), &[1, xv.shape()[1]]);
        let value = (&xv * &(sc.row(0).mapv(|v| 1.0 + v)) + &sh.row(0)).into_dyn();
        let ng = self.needs(x) || self.needs(shift) || self.needs(scale);
        self.push(value, Op::Modulate { x, shift, scale }, ng, Aux::None)
    }

    /// Multi-head scaled dot-product attention over one sequence.
    /// `q,k,v: (t, d)` with `d % heads == 0`; softmax probabilities are cached
    /// for the backward pass.
    pub fn attention(&mut self, q: NodeId, k: NodeId, v: NodeId, heads: usize) -> NodeId {
        let qv = self.as2(q);
        let kv = self.as2(k);
        let vv = self.as2(v);
        let (t, d) = (qv.shape()[0], qv.shape()[1]);
        assert_eq!(kv.shape(), &[t, d]);
        assert_eq!(vv.shape(), &[t, d]);
        assert_eq!(d % heads, 0, "head count must divide the model dim");
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut out = Array2::zeros((t, d));
        let mut probs = Vec::with_capacity(heads);
        for h in 0..heads {
            let cols = h * dh..(h + 1) * dh;
            let qh = qv.slice(ndarray::s![.., cols.clone()]);
            let kh = kv.slice(ndarray::s![.., cols.clone()]);
            let vh = vv.slice(ndarray::s![.., cols.clone()]);
            let mut s = qh.dot(&kh.t());
            s *= scale;
            // Row-wise softmax with max subtraction.
            for mut row in s.rows_mut() {
                let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for v in row.iter_mut() {
                    *v = (*v - m).exp();
                    sum += *v;
                }
                for v in row.iter_mut() {
                    *v /= sum;
                }
            }
            let oh = s.dot(&vh);
            out.slice_mut(ndarray::s![.., cols]).assign(&oh);
            probs.push(s);
        }
        let ng = self.needs(q) || self.needs(k) || self.needs(v);
        self.push(out.into_dyn(), Op::Attention { q, k, v, heads }, ng, Aux::AttnProbs(probs))
    }

    pub fn slice_cols(&mut self, x: NodeId, start: usize, len: usize) -> NodeId {
        let xv = self.as2(x);
        assert!(start + len <= xv.shape()[1], "slice_cols out of range");
        let value = xv.slice(ndarray::s![.., start..start + len]).to_owned().into_dyn();
        let ng = self.needs(x);
        self.push(value, Op::SliceCols { x, start, len }, ng, Aux::None)
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> NodeId {
        let value = self.nodes[x]
            .value
            .clone()
            .into_shape_with_order(IxDyn(shape))
            .expect("reshape element count mismatch");
        let ng = self.needs(x);
        self.push(value, Op::Reshape(x), ng, Aux::None)
    }

    /// Column means: `(t, d) -> (1, d)`.
    pub fn mean_rows(&mut self, x: NodeId) -> NodeId {
        let xv = self.as2(x);
        let t = xv.shape()[0] as f64;
        let value = (xv.sum_axis(Axis(0)) / t).insert_axis(Axis(0)).into_dyn();
        let ng = self.needs(x);
        self.push(value, Op::MeanRows(x), ng, Aux::None)
    }

    // ----- conv stack -----

    /// 2-D convolution, stride 1, symmetric zero padding.
    /// `x: (n, ci, h, w)`, `w: (co, ci, k, k)`, `b: (co)`.
    pub fn conv2d(&mut self, x: NodeId, w: NodeId, b: NodeId, pad: usize) -> NodeId {
        let xv = self.as4(x);
        let wv = self.as4(w);
        let bv = self.as1(b);
        let (n, ci, h, wd) = (xv.shape()[0], xv.shape()[1], xv.shape()[2], xv.shape()[3]);
        let (co, ci2, k, k2) = (wv.shape()[0], wv.shape()[1], wv.shape()[2], wv.shape()[3]);
        assert_eq!(ci, ci2, "conv channel mismatch");
        assert_eq!(k, k2, "conv kernels are square");
        assert_eq!(bv.len(), co);
        let (ho, wo) = (h + 2 * pad - k + 1, wd + 2 * pad - k + 1);
        let wmat = wv.to_shape((co, ci * k * k)).unwrap().to_owned();
        let mut out = Array4::zeros((n, co, ho, wo));
        let mut cols_cache = Vec::with_capacity(n);
        for s in 0..n {
            let cols = im2col(&xv.index_axis(Axis(0), s).to_owned(), k, pad);
            let y = wmat.dot(&cols);
            for c in 0..co {
                for oy in 0..ho {
                    for ox in 0..wo {
                        out[[s, c, oy, ox]] = y[[c, oy * wo + ox]] + bv[c];
                    }
                }
            }
            cols_cache.push(cols);
        }
        let ng = self.needs(x) || self.needs(w) || self.needs(b);
        self.push(out.into_dyn(), Op::Conv2d { x, w, b, pad }, ng, Aux::Cols(cols_cache))
    }

    /// 2x2 max pooling, stride 2. Spatial dims must be even.
    pub fn max_pool2(&mut self, x: NodeId) -> NodeId {
        let xv = self.as4(x);
        let (n, c, h, w) = (xv.shape()[0], xv.shape()[1], xv.shape()[2], xv.shape()[3]);
        assert!(h % 2 == 0 && w % 2 == 0, "max_pool2 needs even spatial dims");
        let (ho, wo) = (h / 2, w / 2);
        let mut out = Array4::zeros((n, c, ho, wo));
        let mut argmax = vec![0usize; n * c * ho * wo];
        let mut i = 0;
        for s in 0..n {
            for ch in 0..c {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut best = f64::NEG_INFINITY;
                        let mut best_idx = 0usize;
                        for dy in 0..2 {
                            for dx in 0..2 {
                                let (yy, xx) = (2 * oy + dy, 2 * ox + dx);
                                let v = xv[[s, ch, yy, xx]];
                                if v > best {
                                    best = v;
                                    best_idx = ((s * c + ch) * h + yy) * w + xx;
                                }
                            }
                        }
                        out[[s, ch, oy, ox]] = best;
                        argmax[i] = best_idx;
                        i += 1;
                    }
                }
            }
        }
        let ng = self.needs(x);
        self.push(out.into_dyn(), Op::MaxPool2(x), ng, Aux::PoolArgmax(argmax))
    }

    /// Batch norm over `(n, h, w)` per channel using batch statistics.
    /// `gamma`, `beta`: `(c)`.
    pub fn batch_norm_train(&mut self, x: NodeId, gamma: NodeId, beta: NodeId) -> NodeId {
        let xv = self.as4(x).to_owned();
        let g = self.as1(gamma).to_owned();
        let be = self.as1(beta).to_owned();
        let (n, c, h, w) = (xv.shape()[0], xv.shape()[1], xv.shape()[2], xv.shape()[3]);
        assert!(n * h * w > 1, "batch norm needs more than one value per channel");
        let m = (n * h * w) as f64;
        let mut mean = Array1::zeros(c);
        let mut var = Array1::zeros(c);
        for ch in 0..c {
            let mut sum = 0.0;
            for s in 0..n {
                for y in 0..h {
                    for xx in 0..w {
                        sum += xv[[s, ch, y, xx]];
                    }
                }
            }
            let mu = sum / m;
            let mut vs = 0.0;
            for s in 0..n {
                for y in 0..h {
                    for xx in 0..w {
                        let d = xv[[s, ch, y, xx]] - mu;
                        vs += d * d;
                    }
                }
            }
            mean[ch] = mu;
            var[ch] = vs / m;
        }
        let invstd = var.mapv(|v| 1.0 / (v + BATCH_NORM_EPS).sqrt());
        let mut xhat = Array4::zeros((n, c, h, w));
        let mut out = Array4::zeros((n, c, h, w));
        for s in 0..n {
            for ch in 0..c {
                for y in 0..h {
                    for xx in 0..w {
                        let xh = (xv[[s, ch, y, xx]] - mean[ch]) * invstd[ch];
                        xhat[[s, ch, y, xx]] = xh;
                        out[[s, ch, y, xx]] = g[ch] * xh + be[ch];
                    }
                }
            }
        }
        let ng = self.needs(x) || self.needs(gamma) || self.needs(beta);
        let aux = Aux::BnTrain { invstd, xhat, mean, var };
        self.push(out.into_dyn(), Op::BatchNormTrain { x, gamma, beta }, ng, aux)
    }

    /// Batch statistics of a [`Tape::batch_norm_train`] node, for running-stat
    /// updates.
    pub fn bn_batch_stats(&self, id: NodeId) -> (Array1<f64>, Array1<f64>) {
        match &self.nodes[id].aux {
            Aux::BnTrain { mean, var, .. } => (mean.clone(), var.clone()),
            _ => panic!("node {id} is not a train-mode batch norm"),
        }
    }

    /// Batch norm with fixed (running) statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        running_mean: &Array1<f64>,
        running_var: &Array1<f64>,
    ) -> NodeId {
        let xv = self.as4(x).to_owned();
        let g = self.as1(gamma).to_owned();
        let be = self.as1(beta).to_owned();
        let (n, c, h, w) = (xv.shape()[0], xv.shape()[1], xv.shape()[2], xv.shape()[3]);
        let invstd = running_var.mapv(|v| 1.0 / (v + BATCH_NORM_EPS).sqrt());
        let mut xhat = Array4::zeros((n, c, h, w));
        let mut out = Array4::zeros((n, c, h, w));
        for s in 0..n {
            for ch in 0..c {
                for y in 0..h {
                    for xx in 0..w {
                        let xh = (xv[[s, ch, y, xx]] - running_mean[ch]) * invstd[ch];
                        xhat[[s, ch, y, xx]] = xh;
                        out[[s, ch, y, xx]] = g[ch] * xh + be[ch];
                    }
                }
            }
        }
        let ng = self.needs(x) || self.needs(gamma) || self.needs(beta);
        let aux = Aux::BnEval { invstd, xhat };
        self.push(out.into_dyn(), Op::BatchNormEval { x, gamma, beta }, ng, aux)
    }

    /// Nearest-neighbour 2x upsampling.
    pub fn upsample2(&mut self, x: NodeId) -> NodeId {
        let xv = self.as4(x);
        let (n, c, h, w) = (xv.shape()[0], xv.shape()[1], xv.shape()[2], xv.shape()[3]);
        let mut out = Array4::zeros((n, c, 2 * h, 2 * w));
        for s in 0..n {
            for ch in 0..c {
                for y in 0..h {
                    for xx in 0..w {
                        let v = xv[[s, ch, y, xx]];
                        out[[s, ch, 2 * y, 2 * xx]] = v;
                        out[[s, ch, 2 * y + 1, 2 * xx]] = v;
                        out[[s, ch, 2 * y, 2 * xx + 1]] = v;
                        out[[s, ch, 2 * y + 1, 2 * xx + 1]] = v;
                    }
                }
            }
        }
        let ng = self.needs(x);
        self.push(out.into_dyn(), Op::Upsample2(x), ng, Aux::None)
    }

    // ----- losses -----

    fn weighted_denom(weight: Option<&ArrayD<f64>>, n: usize) -> f64 {
        match weight {
            Some(w) => w.sum().max(1.0),
            None => n as f64,
        }
    }

    /// Weighted mean squared error: `sum(w * (p - t)^2) / max(sum(w), 1)`.
    /// Plain mean when `weight` is `None`. Target and weight are constants.
    pub fn mse_loss(&mut self, pred: NodeId, target: &ArrayD<f64>, weight: Option<&ArrayD<f64>>) -> NodeId {
        let p = &self.nodes[pred].value;
        assert_eq!(p.shape(), target.shape(), "mse target shape");
        if let Some(w) = weight {
            assert_eq!(p.shape(), w.shape(), "mse weight shape");
        }
        let denom = Self::weighted_denom(weight, p.len());
        let mut acc = 0.0;
        match weight {
            Some(w) => {
                for ((pv, tv), wv) in p.iter().zip(target.iter()).zip(w.iter()) {
                    let d = pv - tv;
                    acc += wv * d * d;
                }
            }
            None => {
                for (pv, tv) in p.iter().zip(target.iter()) {
                    let d = pv - tv;
                    acc += d * d;
                }
            }
        }
        let value = ndarray::arr1(&[acc / denom]).into_dyn();
        let ng = self.needs(pred);
        let aux = Aux::Loss { target: target.clone(), weight: weight.cloned(), denom };
        self.push(value, Op::MseLoss { pred }, ng, aux)
    }

    /// Weighted mean absolute error with the same weighting as [`Tape::mse_loss`].
    pub fn l1_loss(&mut self, pred: NodeId, target: &ArrayD<f64>, weight: Option<&ArrayD<f64>>) -> NodeId {
        let p = &self.nodes[pred].value;
        assert_eq!(p.shape(), target.shape(), "l1 target shape");
        if let Some(w) = weight {
            assert_eq!(p.shape(), w.shape(), "l1 weight shape");
        }
        let denom = Self::weighted_denom(weight, p.len());
        let mut acc = 0.0;
        match weight {
            Some(w) => {
                for ((pv, tv), wv) in p.iter().zip(target.iter()).zip(w.iter()) {
                    acc += wv * (pv - tv).abs();
                }
            }
            None => {
                for (pv, tv) in p.iter().zip(target.iter()) {
                    acc += (pv - tv).abs();
                }
            }
        }
        let value = ndarray::arr1(&[acc / denom]).into_dyn();
        let ng = self.needs(pred);
        let aux = Aux::Loss { target: target.clone(), weight: weight.cloned(), denom };
        self.push(value, Op::L1Loss { pred }, ng, aux)
    }

    /// Mean softmax cross-entropy over rows of `(n, classes)` logits.
    pub fn cross_entropy(&mut self, logits: NodeId, labels: &[usize]) -> NodeId {
        let lv = self.as2(logits);
        let (n, c) = (lv.shape()[0], lv.shape()[1]);
        assert_eq!(labels.len(), n, "one label per row");
        let mut probs = Array2::zeros((n, c));
        let mut loss = 0.0;
        for r in 0..n {
            assert!(labels[r] < c, "label out of range");
            let row = lv.row(r);
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for j in 0..c {
                let e = (row[j] - m).exp();
                probs[[r, j]] = e;
                sum += e;
            }
            for j in 0..c {
                probs[[r, j]] /= sum;
            }
            loss -= probs[[r, labels[r]]].ln();
        }
        let value = ndarray::arr1(&[loss / n as f64]).into_dyn();
        let ng = self.needs(logits);
        let aux = Aux::Ce { probs, labels: labels.to_vec() };
        self.push(value, Op::CrossEntropy { logits }, ng, aux)
    }

    pub fn mean_all(&mut self, x: NodeId) -> NodeId {
        let v = &self.nodes[x].value;
        let value = ndarray::arr1(&[v.sum() / v.len() as f64]).into_dyn();
        let ng = self.needs(x);
        self.push(value, Op::MeanAll(x), ng, Aux::None)
    }

    // ----- backward -----

    /// Reverse sweep from a scalar loss; returns parameter gradients.
    pub fn backward(&self, loss: NodeId, n_params: usize) -> Gradients {
        assert_eq!(self.nodes[loss].value.len(), 1, "backward needs a scalar loss");
        let mut adj: Vec<Option<ArrayD<f64>>> = vec![None; self.nodes.len()];
        adj[loss] = Some(ndarray::arr1(&[1.0]).into_dyn());
        let mut grads = Gradients::zeros(n_params);
        for id in (0..=loss).rev() {
            if !self.nodes[id].needs_grad {
                continue;
            }
            let Some(g) = adj[id].take() else { continue };
            self.backprop_node(id, &g, &mut adj, &mut grads);
        }
        grads
    }

    fn acc(&self, adj: &mut [Option<ArrayD<f64>>], id: NodeId, g: ArrayD<f64>) {
        if !self.nodes[id].needs_grad {
            return;
        }
        match &mut adj[id] {
            Some(a) => *a += &g,
            slot => *slot = Some(g),
        }
    }

    fn backprop_node(
        &self,
        id: NodeId,
        g: &ArrayD<f64>,
        adj: &mut [Option<ArrayD<f64>>],
        grads: &mut Gradients,
    ) {
        let node = &self.nodes[id];
        match &node.op {
            Op::Constant => {}
            Op::Param(pid) => grads.accumulate(*pid, g),
            Op::Add(a, b) => {
                self.acc(adj, *a, g.clone());
                self.acc(adj, *b, g.clone());
            }
            Op::AddScaled(a, b, alpha, beta) => {
                self.acc(adj, *a, g.mapv(|v| v * alpha));
                self.acc(adj, *b, g.mapv(|v| v * beta));
            }
            Op::Scale(a, c) => self.acc(adj, *a, g.mapv(|v| v * c)),
            Op::AddVec(x, v) => {
                self.acc(adj, *x, g.clone());
                let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
                let gv = g2.sum_axis(Axis(0)).insert_axis(Axis(0));
                self.acc(adj, *v, gv.into_dyn());
            }
            Op::MulVec(x, v) => {
                let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
                let xv = self.as2(*x);
                let vv = self.as2(*v);
                self.acc(adj, *x, (&g2 * &vv.row(0)).into_dyn());
                let gv = (&g2 * &xv).sum_axis(Axis(0)).insert_axis(Axis(0));
                self.acc(adj, *v, gv.into_dyn());
            }
            Op::Matmul(a, b) => {
                let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
                let av = self.as2(*a);
                let bv = self.as2(*b);
                self.acc(adj, *a, g2.dot(&bv.t()).into_dyn());
                self.acc(adj, *b, av.t().dot(&g2).into_dyn());
            }
            Op::Linear { x, w, b } => {
                let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
                let xv = self.as2(*x);
                let wv = self.as2(*w);
                self.acc(adj, *x, g2.dot(&wv.t()).into_dyn());
                self.acc(adj, *w, xv.t().dot(&g2).into_dyn());
                let gb = g2.sum_axis(Axis(0)).insert_axis(Axis(0));
                self.acc(adj, *b, gb.into_dyn());
            }
            Op::Relu(x) => {
                let xv = &self.nodes[*x].value;
                let gx = ndarray::Zip::from(g).and(xv).map_collect(|&gv, &v| if v > 0.0 { gv } else { 0.0 });
                self.acc(adj, *x, gx);
            }
            Op::Silu(x) => {
                let xv = &self.nodes[*x].value;
                let gx = ndarray::Zip::from(g).and(xv).map_collect(|&gv, &v| {
                    let s = sigmoid(v);
                    gv * (s + v * s * (1.0 - s))
                });
                self.acc(adj, *x, gx);
            }
            Op::Gelu(x) => {
                let xv = &self.nodes[*x].value;
                let gx = ndarray::Zip::from(g).and(xv).map_collect(|&gv, &v| {
                    let u = GELU_C * (v + GELU_A * v * v * v);
                    let t = u.tanh();
                    let du = GELU_C * (1.0 + 3.0 * GELU_A * v * v);
                    gv * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du)
                });
                self.acc(adj, *x, gx);
            }
            Op::Sigmoid(x) => {
                let yv = &node.value;
                let gx = ndarray::Zip::from(g).and(yv).map_collect(|&gv, &y| gv * y * (1.0 - y));
                self.acc(adj, *x, gx);
            }
            Op::LayerNorm(x) => {
                let Aux::Norm { invstd, xhat } = &node.aux else { unreachable!() };
                let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
                let (t, d) = (xhat.shape()[0], xhat.shape()[1]);
                let mut gx = Array2::zeros((t, d));
                for r in 0..t {
                    let grow = g2.row(r);
                    let xrow = xhat.row(r);
                    let mean_g = grow.sum() / d as f64;
                    let mean_gx = grow.iter().zip(xrow.iter()).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                    for c in 0..d {
                        gx[[r, c]] = invstd[r] * (grow[c] - mean_g - xrow[c] * mean_gx);
                    }
                }
                self.acc(adj, *x, gx.into_dyn());
            }
            Op::Modulate { x, shift, scale } => {
                let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
                let xv = self.as2(*x);
                let sc = self.as2(*scale);
                let gx = (&g2 * &sc.row(0).mapv(|v| 1.0 + v)).into_dyn();
                self.acc(adj, *x, gx);
                let gshift = g2.sum_axis(Axis(0)).insert_axis(Axis(0));
                self.acc(adj, *shift, gshift.into_dyn());
                let gscale = (&g2 * &xv).sum_axis(Axis(0)).insert_axis(Axis(0));
                self.acc(adj, *scale, gscale.into_dyn());
            }
            Op::Attention { q, k, v, heads } => {
                let Aux::AttnProbs(probs) = &node.aux else { unreachable!() };
                let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
                let qv = self.as2(*q);
                let kv = self.as2(*k);
                let vv = self.as2(*v);
                let (t, d) = (qv.shape()[0], qv.shape()[1]);
                let dh = d / heads;
                let scale = 1.0 / (dh as f64).sqrt();
                let mut gq = Array2::zeros((t, d));
                let mut gk = Array2::zeros((t, d));
                let mut gv = Array2::zeros((t, d));
                for h in 0..*heads {
                    let cols = h * dh..(h + 1) * dh;
                    let p = &probs[h];
                    let go = g2.slice(ndarray::s![.., cols.clone()]);
                    let qh = qv.slice(ndarray::s![.., cols.clone()]);
                    let kh = kv.slice(ndarray::s![.., cols.clone()]);
                    let vh = vv.slice(ndarray::s![.., cols.clone()]);
                    // dV = P^T dO
                    gv.slice_mut(ndarray::s![.., cols.clone()]).assign(&p.t().dot(&go));
                    // dP = dO V^T; dS = P * (dP - rowsum(dP * P))
                    let dp = go.dot(&vh.t());
                    let mut ds = Array2::zeros((t, t));
                    for r in 0..t {
                        let dot = dp.row(r).iter().zip(p.row(r).iter()).map(|(a, b)| a * b).sum::<f64>();
                        for cc in 0..t {
                            ds[[r, cc]] = p[[r, cc]] * (dp[[r, cc]] - dot);
                        }
                    }
                    ds *= scale;
                    gq.slice_mut(ndarray::s![.., cols.clone()]).assign(&ds.dot(&kh));
                    gk.slice_mut(ndarray::s![.., cols]).assign(&ds.t().dot(&qh));
                }
                self.acc(adj, *q, gq.into_dyn());
                self.acc(adj, *k, gk.into_dyn());
                self.acc(adj, *v, gv.into_dyn());
            }
            Op::SliceCols { x, start, len } => {
                let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
                let xs = self.nodes[*x].value.shape();
                let mut gx = Array2::zeros((xs[0], xs[1]));
                gx.slice_mut(ndarray::s![.., *start..*start + *len]).assign(&g2);
                self.acc(adj, *x, gx.into_dyn());
            }
            Op::Reshape(x) => {
                let shape = self.nodes[*x].value.shape().to_vec();
                let gx = g.clone().into_shape_with_order(IxDyn(&shape)).unwrap();
                self.acc(adj, *x, gx);
            }
            Op::MeanRows(x) => {
                let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
                let xs = self.nodes[*x].value.shape();
                let t = xs[0];
                let mut gx = Array2::zeros((t, xs[1]));
                let grow = g2.row(0).mapv(|v| v / t as f64);
                for r in 0..t {
                    gx.row_mut(r).assign(&grow);
                }
                self.acc(adj, *x, gx.into_dyn());
            }
            Op::Conv2d { x, w, b, pad } => {
                let Aux::Cols(cols_cache) = &node.aux else { unreachable!() };
                let g4 = g.view().into_dimensionality::<Ix4>().unwrap();
                let xv = self.as4(*x);
                let wv = self.as4(*w);
                let (n, ci, h, wd) = (xv.shape()[0], xv.shape()[1], xv.shape()[2], xv.shape()[3]);
                let (co, k) = (wv.shape()[0], wv.shape()[2]);
                let (ho, wo) = (h + 2 * pad - k + 1, wd + 2 * pad - k + 1);
                let wmat = wv.to_shape((co, ci * k * k)).unwrap().to_owned();
                let mut gw = Array2::<f64>::zeros((co, ci * k * k));
                let mut gb = Array1::<f64>::zeros(co);
                let mut gx = Array4::<f64>::zeros((n, ci, h, wd));
                for s in 0..n {
                    let mut gy = Array2::zeros((co, ho * wo));
                    for c in 0..co {
                        for oy in 0..ho {
                            for ox in 0..wo {
                                let v = g4[[s, c, oy, ox]];
                                gy[[c, oy * wo + ox]] = v;
                                gb[c] += v;
                            }
                        }
                    }
                    gw += &gy.dot(&cols_cache[s].t());
                    let gcols = wmat.t().dot(&gy);
                    col2im_acc(&gcols, k, *pad, &mut gx.index_axis_mut(Axis(0), s));
                }
                self.acc(adj, *x, gx.into_dyn());
                let gw4 = gw.into_shape_with_order((co, ci, k, k)).unwrap();
                self.acc(adj, *w, gw4.into_dyn());
                self.acc(adj, *b, gb.into_dyn());
            }
            Op::MaxPool2(x) => {
                let Aux::PoolArgmax(argmax) = &node.aux else { unreachable!() };
                let xs = self.nodes[*x].value.shape().to_vec();
                let mut gx = ArrayD::zeros(IxDyn(&xs));
                let gs = gx.as_slice_mut().unwrap();
                for (gv, &idx) in g.iter().zip(argmax.iter()) {
                    gs[idx] += gv;
                }
                self.acc(adj, *x, gx);
            }
            Op::BatchNormTrain { x, gamma, beta } => {
                let Aux::BnTrain { invstd, xhat, .. } = &node.aux else { unreachable!() };
                let g4 = g.view().into_dimensionality::<Ix4>().unwrap();
                let gm = self.as1(*gamma);
                let (n, c, h, w) = (xhat.shape()[0], xhat.shape()[1], xhat.shape()[2], xhat.shape()[3]);
                let m = (n * h * w) as f64;
                let mut dgamma = Array1::<f64>::zeros(c);
                let mut dbeta = Array1::<f64>::zeros(c);
                let mut sum_g = Array1::<f64>::zeros(c);
                let mut sum_gx = Array1::<f64>::zeros(c);
                for s in 0..n {
                    for ch in 0..c {
                        for y in 0..h {
                            for xx in 0..w {
                                let gv = g4[[s, ch, y, xx]];
                                let xh = xhat[[s, ch, y, xx]];
                                dbeta[ch] += gv;
                                dgamma[ch] += gv * xh;
                                sum_g[ch] += gv;
                                sum_gx[ch] += gv * xh;
                            }
                        }
                    }
                }
                let mut gx = Array4::zeros((n, c, h, w));
                for s in 0..n {
                    for ch in 0..c {
                        let coef = gm[ch] * invstd[ch] / m;
                        for y in 0..h {
                            for xx in 0..w {
                                let gv = g4[[s, ch, y, xx]];
                                let xh = xhat[[s, ch, y, xx]];
                                gx[[s, ch, y, xx]] = coef * (m * gv - sum_g[ch] - xh * sum_gx[ch]);
                            }
                        }
                    }
                }
                self.acc(adj, *x, gx.into_dyn());
                self.acc(adj, *gamma, dgamma.into_dyn());
                self.acc(adj, *beta, dbeta.into_dyn());
            }
            Op::BatchNormEval { x, gamma, beta } => {
                let Aux::BnEval { invstd, xhat } = &node.aux else { unreachable!() };
                let g4 = g.view().into_dimensionality::<Ix4>().unwrap();
                let gm = self.as1(*gamma);
                let (n, c, h, w) = (xhat.shape()[0], xhat.shape()[1], xhat.shape()[2], xhat.shape()[3]);
                let mut dgamma = Array1::zeros(c);
                let mut dbeta = Array1::zeros(c);
                let mut gx = Array4::zeros((n, c, h, w));
                for s in 0..n {
                    for ch in 0..c {
                        for y in 0..h {
                            for xx in 0..w {
                                let gv = g4[[s, ch, y, xx]];
                                dbeta[ch] += gv;
                                dgamma[ch] += gv * xhat[[s, ch, y, xx]];
                                gx[[s, ch, y, xx]] = gv * gm[ch] * invstd[ch];
                            }
                        }
                    }
                }
                self.acc(adj, *x, gx.into_dyn());
                self.acc(adj, *gamma, dgamma.into_dyn());
                self.acc(adj, *beta, dbeta.into_dyn());
            }
            Op::Upsample2(x) => {
                let g4 = g.view().into_dimensionality::<Ix4>().unwrap();
                let xs = self.nodes[*x].value.shape();
                let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
                let mut gx = Array4::zeros((n, c, h, w));
                for s in 0..n {
                    for ch in 0..c {
                        for y in 0..h {
                            for xx in 0..w {
                                gx[[s, ch, y, xx]] = g4[[s, ch, 2 * y, 2 * xx]]
                                    + g4[[s, ch, 2 * y + 1, 2 * xx]]
                                    + g4[[s, ch, 2 * y, 2 * xx + 1]]
                                    + g4[[s, ch, 2 * y + 1, 2 * xx + 1]];
                            }
                        }
                    }
                }
                self.acc(adj, *x, gx.into_dyn());
            }
            Op::MseLoss { pred } => {
                let Aux::Loss { target, weight, denom } = &node.aux else { unreachable!() };
                let gs = g.iter().next().copied().unwrap();
                let p = &self.nodes[*pred].value;
                let mut gp = ArrayD::zeros(p.raw_dim());
                for ((gv, pv), tv) in gp.iter_mut().zip(p.iter()).zip(target.iter()) {
                    *gv = gs * 2.0 * (pv - tv) / denom;
                }
                if let Some(w) = weight {
                    for (gv, wv) in gp.iter_mut().zip(w.iter()) {
                        *gv *= wv;
                    }
                }
                self.acc(adj, *pred, gp);
            }
            Op::L1Loss { pred } => {
                let Aux::Loss { target, weight, denom } = &node.aux else { unreachable!() };
                let gs = g.iter().next().copied().unwrap();
                let p = &self.nodes[*pred].value;
                let mut gp = ArrayD::zeros(p.raw_dim());
                for ((gv, pv), tv) in gp.iter_mut().zip(p.iter()).zip(target.iter()) {
                    // Subgradient at the kink is 0.
                    let s = if pv == tv { 0.0 } else { (pv - tv).signum() };
                    *gv = gs * s / denom;
                }
                if let Some(w) = weight {
                    for (gv, wv) in gp.iter_mut().zip(w.iter()) {
                        *gv *= wv;
                    }
                }
                self.acc(adj, *pred, gp);
            }
            Op::CrossEntropy { logits } => {
                let Aux::Ce { probs, labels } = &node.aux else { unreachable!() };
                let gs = g.iter().next().copied().unwrap();
                let n = labels.len();
                let mut gl = probs.clone();
                for (r, &lab) in labels.iter().enumerate() {
                    gl[[r, lab]] -= 1.0;
                }
                gl *= gs / n as f64;
                self.acc(adj, *logits, gl.into_dyn());
            }
            Op::MeanAll(x) => {
                let gs = g.iter().next().copied().unwrap();
                let xv = &self.nodes[*x].value;
                let gx = ArrayD::from_elem(xv.raw_dim(), gs / xv.len() as f64);
                self.acc(adj, *x, gx);
            }
        }
    }
}

/// Unfolds one `(c, h, w)` sample into a `(c*k*k, ho*wo)` patch matrix.
fn im2col(x: &ndarray::Array3<f64>, k: usize, pad: usize) -> Array2<f64> {
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (ho, wo) = (h + 2 * pad - k + 1, w + 2 * pad - k + 1);
    let mut cols = Array2::zeros((c * k * k, ho * wo));
    for ch in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ch * k + ky) * k + kx;
                for oy in 0..ho {
                    let sy = oy + ky;
                    if sy < pad || sy >= h + pad {
                        continue;
                    }
                    for ox in 0..wo {
                        let sx = ox + kx;
                        if sx < pad || sx >= w + pad {
                            continue;
                        }
                        cols[[row, oy * wo + ox]] = x[[ch, sy - pad, sx - pad]];
                    }
                }
            }
        }
    }
    cols
}

/// Scatters patch-matrix gradients back onto the `(c, h, w)` input.
fn col2im_acc(gcols: &Array2<f64>, k: usize, pad: usize, gx: &mut ndarray::ArrayViewMut3<'_, f64>) {
    let (c, h, w) = (gx.shape()[0], gx.shape()[1], gx.shape()[2]);
    let (ho, wo) = (h + 2 * pad - k + 1, w + 2 * pad - k + 1);
    for ch in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ch * k + ky) * k + kx;
                for oy in 0..ho {
                    let sy = oy + ky;
                    if sy < pad || sy >= h + pad {
                        continue;
                    }
                    for ox in 0..wo {
                        let sx = ox + kx;
                        if sx < pad || sx >= w + pad {
                            continue;
                        }
                        gx[[ch, sy - pad, sx - pad]] += gcols[[row, oy * wo + ox]];
                    }
                }
            }
        }
    }
}
