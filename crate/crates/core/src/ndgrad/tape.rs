use serde::{Deserialize, Serialize};

use super::kernels::{self, axis_extents, gemm, normal_cdf};
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Vector distance used by [`Tape::pairwise_distance`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    /// `1 - cos(z, w)`, in `[0, 2]`.
    Cosine,
    /// Squared Euclidean distance `‖z - w‖²`.
    Euclidean,
    /// `Σ |z - w|`.
    Manhattan,
}

impl std::str::FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cosine" => Ok(Metric::Cosine),
            "euclidean" => Ok(Metric::Euclidean),
            "manhattan" => Ok(Metric::Manhattan),
            other => Err(Error::Config(format!("unknown metric `{other}`"))),
        }
    }
}

impl std::fmt::Display for Metric {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Metric::Cosine => "cosine",
            Metric::Euclidean => "euclidean",
            Metric::Manhattan => "manhattan",
        })
    }
}

#[derive(Debug)]
pub(crate) enum Op {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
    },
    BatchMatMul {
        a: Var,
        b: Var,
        trans_b: bool,
    },
    Add {
        a: Var,
        b: Var,
    },
    Sub {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    AddBroadcast {
        a: Var,
        b: Var,
    },
    Scale {
        a: Var,
        c: f64,
    },
    Sum {
        a: Var,
    },
    Mean {
        a: Var,
    },
    Reshape {
        a: Var,
    },
    Permute {
        a: Var,
        perm: Vec<usize>,
    },
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    Slice {
        a: Var,
        axis: usize,
        start: usize,
    },
    Expand {
        a: Var,
    },
    Gelu {
        a: Var,
    },
    Softmax {
        a: Var,
        axis: usize,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
    Mse {
        pred: Var,
        target: Var,
    },
    Pairwise {
        z: Var,
        w: Var,
        metric: Metric,
        z_norm: Vec<f64>,
        w_norm: Vec<f64>,
    },
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        use Op::*;
        match self {
            Leaf => Vec::new(),
            MatMul { a, b }
            | BatchMatMul { a, b, .. }
            | Add { a, b }
            | Sub { a, b }
            | Mul { a, b }
            | AddBroadcast { a, b } => vec![*a, *b],
            Scale { a, .. }
            | Sum { a }
            | Mean { a }
            | Reshape { a }
            | Permute { a, .. }
            | Slice { a, .. }
            | Expand { a }
            | Gelu { a }
            | Softmax { a, .. } => vec![*a],
            Concat { parts, .. } => parts.clone(),
            LayerNorm { x, gain, bias, .. } => vec![*x, *gain, *bias],
            CrossEntropy { logits, .. } => vec![*logits],
            Mse { pred, target } => vec![*pred, *target],
            Pairwise { z, w, .. } => vec![*z, *w],
        }
    }
}

pub(crate) struct Node {
    pub(crate) value: Tensor,
    pub(crate) op: Op,
    pub(crate) requires_grad: bool,
}

/// Dynamic reverse-mode tape.
///
/// Every operation appends a node whose inputs were recorded earlier, so the
/// recording order is a topological order and [`Tape::backward`] simply walks
/// it in reverse. A fresh tape is built for every forward pass.
#[derive(Default)]
pub struct Tape {
    pub(crate) nodes: Vec<Node>,
    pub(crate) grads: Vec<Option<Vec<f64>>>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a leaf that receives a gradient on [`backward`](Self::backward).
    pub fn var(&mut self, value: Tensor) -> Var {
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

    /// Gradient accumulated by the last [`backward`](Self::backward), if any.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Input handles of the node behind `v`, in recording order.
    pub fn inputs(&self, v: Var) -> Vec<Var> {
        self.nodes[v.0].op.inputs()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn derived(&mut self, value: Tensor, op: Op) -> Var {
        let rg = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        self.push(value, op, rg)
    }

    fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    // ---------------------------------------------------------------- linear algebra

    /// `[m×k] · [k×n] → [m×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::dim(format!("matmul of {sa:?} and {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm(false, false, m, k, n, self.data(a), self.data(b), &mut out, false);
        let t = Tensor::new(&[m, n], out)?;
        Ok(self.derived(t, Op::MatMul { a, b }))
    }

    /// Batched product over a leading group axis: `[g×n×k] · [g×k×m]`, or
    /// `[g×n×k] · [g×m×k]ᵀ` when `trans_b` is set.
    pub fn batch_matmul(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let ok =
            sa.len() == 3 && sb.len() == 3 && sa[0] == sb[0] && if trans_b { sa[2] == sb[2] } else { sa[2] == sb[1] };
        if !ok {
            return Err(Error::dim(format!(
                "batch_matmul of {sa:?} and {sb:?} (trans_b={trans_b})"
            )));
        }
        let (g, n, k) = (sa[0], sa[1], sa[2]);
        let m = if trans_b { sb[1] } else { sb[2] };
        let mut out = vec![0.0; g * n * m];
        let (da, db) = (self.data(a), self.data(b));
        for i in 0..g {
            gemm(
                false,
                trans_b,
                n,
                k,
                m,
                &da[i * n * k..(i + 1) * n * k],
                &db[i * k * m..(i + 1) * k * m],
                &mut out[i * n * m..(i + 1) * n * m],
                false,
            );
        }
        let t = Tensor::new(&[g, n, m], out)?;
        Ok(self.derived(t, Op::BatchMatMul { a, b, trans_b }))
    }

    // ---------------------------------------------------------------- elementwise

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(format!(
                "{what} of {:?} and {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let data = self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(self.shape(a), data).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let t = self.zip_with(a, b, |x, y| x + y);
        Ok(self.derived(t, Op::Add { a, b }))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let t = self.zip_with(a, b, |x, y| x - y);
        Ok(self.derived(t, Op::Sub { a, b }))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let t = self.zip_with(a, b, |x, y| x * y);
        Ok(self.derived(t, Op::Mul { a, b }))
    }

    /// `a + b` where `b`'s shape is a trailing suffix of `a`'s (bias rows,
    /// positional tables).
    pub fn add_broadcast(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(Error::dim(format!("cannot broadcast {sb:?} onto {sa:?}")));
        }
        let tail = self.value(b).numel();
        let db = self.data(b);
        let data = self
            .data(a)
            .chunks(tail.max(1))
            .flat_map(|row| row.iter().zip(db).map(|(x, y)| x + y))
            .collect();
        let t = Tensor::new(sa, data)?;
        Ok(self.derived(t, Op::AddBroadcast { a, b }))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a);
        let t = Tensor::new(v.shape(), v.data().iter().map(|x| x * c).collect()).unwrap();
        self.derived(t, Op::Scale { a, c })
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.data(a).iter().sum();
        self.derived(Tensor::scalar(s), Op::Sum { a })
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).numel() as f64;
        let s: f64 = self.data(a).iter().sum();
        self.derived(Tensor::scalar(s / n), Op::Mean { a })
    }

    /// Exact GELU, `x·Φ(x)`.
    pub fn gelu(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let data = v.data().iter().map(|&x| x * normal_cdf(x)).collect();
        let t = Tensor::new(v.shape(), data).unwrap();
        self.derived(t, Op::Gelu { a })
    }

    // ---------------------------------------------------------------- shape

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).clone().reshape(shape)?;
        Ok(self.derived(t, Op::Reshape { a }))
    }

    /// Axis permutation; output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(a);
        let mut seen = vec![false; shape.len()];
        let valid = perm.len() == shape.len()
            && perm
                .iter()
                .all(|&p| p < seen.len() && !std::mem::replace(&mut seen[p], true));
        if !valid {
            return Err(Error::dim(format!("invalid permutation {perm:?} for {shape:?}")));
        }
        let (data, out_shape) = kernels::permute(self.data(a), shape, perm);
        let t = Tensor::new(&out_shape, data)?;
        Ok(self.derived(t, Op::Permute { a, perm: perm.to_vec() }))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::dim("concat of zero tensors"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::dim(format!("concat axis {axis} for {base:?}")));
        }
        let mut total = 0;
        for p in parts {
            let s = self.shape(*p);
            if s.len() != base.len() || s.iter().zip(&base).enumerate().any(|(i, (x, y))| i != axis && x != y) {
                return Err(Error::dim(format!("concat of {base:?} and {s:?} on axis {axis}")));
            }
            total += s[axis];
        }
        let (outer, _, inner) = axis_extents(&base, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for p in parts {
                let len = self.shape(*p)[axis] * inner;
                data.extend_from_slice(&self.data(*p)[o * len..(o + 1) * len]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let t = Tensor::new(&shape, data)?;
        Ok(self.derived(
            t,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
        ))
    }

    /// `len` entries starting at `start` along `axis`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(Error::dim(format!(
                "slice {start}..{} on axis {axis} of {shape:?}",
                start + len
            )));
        }
        let (outer, n, inner) = axis_extents(&shape, axis);
        let src = self.data(a);
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * n * inner + start * inner;
            data.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let t = Tensor::new(&out_shape, data)?;
        Ok(self.derived(t, Op::Slice { a, axis, start }))
    }

    /// Repeats `a` along a new leading axis of length `n`.
    pub fn expand(&mut self, a: Var, n: usize) -> Var {
        let v = self.value(a);
        let mut shape = vec![n];
        shape.extend_from_slice(v.shape());
        let data = v.data().repeat(n);
        let t = Tensor::new(&shape, data).unwrap();
        self.derived(t, Op::Expand { a })
    }

    // ---------------------------------------------------------------- normalisation

    /// Numerically stable softmax along `axis`.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(Error::dim(format!("softmax axis {axis} for {shape:?}")));
        }
        let (outer, n, inner) = axis_extents(&shape, axis);
        let src = self.data(a);
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| o * n * inner + j * inner + i;
                let max = (0..n).map(|j| src[at(j)]).fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for j in 0..n {
                    let e = (src[at(j)] - max).exp();
                    out[at(j)] = e;
                    z += e;
                }
                for j in 0..n {
                    out[at(j)] /= z;
                }
            }
        }
        let t = Tensor::new(&shape, out)?;
        Ok(self.derived(t, Op::Softmax { a, axis }))
    }

    /// Normalises each row over the last axis, then applies `gain`/`bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        if !(eps > 0.0) {
            return Err(Error::Config(format!("layer_norm eps must be positive, got {eps}")));
        }
        let shape = self.shape(x).to_vec();
        let d = *shape.last().ok_or_else(|| Error::dim("layer_norm of a scalar"))?;
        if self.shape(gain) != [d] || self.shape(bias) != [d] {
            return Err(Error::dim(format!(
                "layer_norm gain {:?} / bias {:?} for rows of {d}",
                self.shape(gain),
                self.shape(bias)
            )));
        }
        let (g, b) = (self.data(gain), self.data(bias));
        let src = self.data(x);
        let rows = src.len() / d;
        let mut xhat = vec![0.0; src.len()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; src.len()];
        for r in 0..rows {
            let row = &src[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..d {
                let h = (row[j] - mean) * is;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g[j] + b[j];
            }
        }
        let t = Tensor::new(&shape, out)?;
        Ok(self.derived(
            t,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
        ))
    }

    // ---------------------------------------------------------------- losses

    /// Mean cross-entropy of `[n×c]` logits against integer labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        if shape.len() != 2 || shape[0] != labels.len() {
            return Err(Error::dim(format!(
                "cross_entropy of {shape:?} logits with {} labels",
                labels.len()
            )));
        }
        let (n, c) = (shape[0], shape[1]);
        if let Some(bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::Data(format!("label {bad} out of range for {c} classes")));
        }
        let src = self.data(logits);
        let mut probs = vec![0.0; n * c];
        let mut loss = 0.0;
        for i in 0..n {
            let row = &src[i * c..(i + 1) * c];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - max).exp()).sum();
            let log_z = max + z.ln();
            for j in 0..c {
                probs[i * c + j] = (row[j] - log_z).exp();
            }
            loss += log_z - row[labels[i]];
        }
        let op = Op::CrossEntropy {
            logits,
            labels: labels.to_vec(),
            probs,
        };
        Ok(self.derived(Tensor::scalar(loss / n as f64), op))
    }

    /// Mean squared error over all elements.
    pub fn mse(&mut self, pred: Var, target: Var) -> Result<Var> {
        self.same_shape(pred, target, "mse")?;
        let n = self.value(pred).numel() as f64;
        let s: f64 = self
            .data(pred)
            .iter()
            .zip(self.data(target))
            .map(|(p, t)| (p - t) * (p - t))
            .sum();
        Ok(self.derived(Tensor::scalar(s / n), Op::Mse { pred, target }))
    }

    // ---------------------------------------------------------------- distances

    /// Distances between every row of `z: [b×d]` and every row of
    /// `w: [m×d]`, as a `[b×m]` matrix.
    ///
    /// Under [`Metric::Cosine`] a zero-norm row has distance exactly 1 to
    /// everything and passes no gradient.
    pub fn pairwise_distance(&mut self, z: Var, w: Var, metric: Metric) -> Result<Var> {
        let (sz, sw) = (self.shape(z), self.shape(w));
        if sz.len() != 2 || sw.len() != 2 || sz[1] != sw[1] {
            return Err(Error::dim(format!("pairwise_distance of {sz:?} and {sw:?}")));
        }
        let (b, m, d) = (sz[0], sw[0], sz[1]);
        let (dz, dw) = (self.data(z), self.data(w));
        let mut out = vec![0.0; b * m];
        let mut z_norm = Vec::new();
        let mut w_norm = Vec::new();
        match metric {
            Metric::Cosine => {
                z_norm = dz.chunks(d).map(|r| kernels::dot(r, r).sqrt()).collect();
                w_norm = dw.chunks(d).map(|r| kernels::dot(r, r).sqrt()).collect();
                if z_norm.iter().chain(&w_norm).any(|&n| n == 0.0) {
                    log::warn!("zero-norm vector under cosine distance; using distance 1");
                }
                gemm(false, true, b, d, m, dz, dw, &mut out, false);
                for i in 0..b {
                    for j in 0..m {
                        let denom = z_norm[i] * w_norm[j];
                        let cos = if denom > 0.0 {
                            (out[i * m + j] / denom).clamp(-1.0, 1.0)
                        } else {
                            0.0
                        };
                        out[i * m + j] = 1.0 - cos;
                    }
                }
            }
            Metric::Euclidean => {
                for (i, zr) in dz.chunks(d).enumerate() {
                    for (j, wr) in dw.chunks(d).enumerate() {
                        out[i * m + j] = zr.iter().zip(wr).map(|(x, y)| (x - y) * (x - y)).sum();
                    }
                }
            }
            Metric::Manhattan => {
                for (i, zr) in dz.chunks(d).enumerate() {
                    for (j, wr) in dw.chunks(d).enumerate() {
                        out[i * m + j] = zr.iter().zip(wr).map(|(x, y)| (x - y).abs()).sum();
                    }
                }
            }
        }
        let t = Tensor::new(&[b, m], out)?;
        Ok(self.derived(
            t,
            Op::Pairwise {
                z,
                w,
                metric,
                z_norm,
                w_norm,
            },
        ))
    }
}
