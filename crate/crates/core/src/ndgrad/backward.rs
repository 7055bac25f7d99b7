use super::kernels::{self, axis_extents, gemm, inverse_perm, normal_cdf, normal_pdf};
use super::tape::{Metric, Op, Tape, Var};
use crate::error::{Error, Result};

impl Tape {
    /// Propagates d(loss)/d(node) to every node that requires a gradient.
    ///
    /// Gradients from a previous call are discarded. Contributions from
    /// multiple uses of the same node accumulate additively.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
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
            self.propagate(i, &g);
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    fn accumulate(&mut self, v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let n = self.nodes[v.0].value.numel();
        let slot = self.grads[v.0].get_or_insert_with(|| vec![0.0; n]);
        f(slot);
    }

    fn add_to(&mut self, v: Var, g: &[f64], c: f64) {
        self.accumulate(v, |acc| kernels::axpy(c, g, acc));
    }

    fn propagate(&mut self, i: usize, g: &[f64]) {
        // Ops are moved out temporarily so saved intermediates can be read
        // while other nodes' gradients are mutated.
        let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
        match &op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                if self.requires_grad(*a) {
                    let bv = self.value(*b).data().to_vec();
                    self.accumulate(*a, |acc| gemm(false, true, m, n, k, g, &bv, acc, true));
                }
                if self.requires_grad(*b) {
                    let av = self.value(*a).data().to_vec();
                    self.accumulate(*b, |acc| gemm(true, false, k, m, n, &av, g, acc, true));
                }
            }
            Op::BatchMatMul { a, b, trans_b } => {
                let sa = self.shape(*a).to_vec();
                let sb = self.shape(*b).to_vec();
                let (groups, n, k) = (sa[0], sa[1], sa[2]);
                let m = if *trans_b { sb[1] } else { sb[2] };
                let (ga_len, gb_len, go_len) = (n * k, k * m, n * m);
                if self.requires_grad(*a) {
                    let bv = self.value(*b).data().to_vec();
                    self.accumulate(*a, |acc| {
                        for gi in 0..groups {
                            let go = &g[gi * go_len..(gi + 1) * go_len];
                            let bb = &bv[gi * gb_len..(gi + 1) * gb_len];
                            let out = &mut acc[gi * ga_len..(gi + 1) * ga_len];
                            // C = A·op(B): dA = dC·op(B)ᵀ
                            gemm(false, !*trans_b, n, m, k, go, bb, out, true);
                        }
                    });
                }
                if self.requires_grad(*b) {
                    let av = self.value(*a).data().to_vec();
                    let trans_b = *trans_b;
                    self.accumulate(*b, |acc| {
                        for gi in 0..groups {
                            let go = &g[gi * go_len..(gi + 1) * go_len];
                            let aa = &av[gi * ga_len..(gi + 1) * ga_len];
                            let out = &mut acc[gi * gb_len..(gi + 1) * gb_len];
                            if trans_b {
                                // B is m×k: dB = dCᵀ·A
                                gemm(true, false, m, n, k, go, aa, out, true);
                            } else {
                                // B is k×m: dB = Aᵀ·dC
                                gemm(true, false, k, n, m, aa, go, out, true);
                            }
                        }
                    });
                }
            }
            Op::Add { a, b } => {
                self.add_to(*a, g, 1.0);
                self.add_to(*b, g, 1.0);
            }
            Op::Sub { a, b } => {
                self.add_to(*a, g, 1.0);
                self.add_to(*b, g, -1.0);
            }
            Op::Mul { a, b } => {
                if self.requires_grad(*a) {
                    let bv = self.value(*b).data().to_vec();
                    self.accumulate(*a, |acc| {
                        for ((x, gi), bi) in acc.iter_mut().zip(g).zip(&bv) {
                            *x += gi * bi;
                        }
                    });
                }
                if self.requires_grad(*b) {
                    let av = self.value(*a).data().to_vec();
                    self.accumulate(*b, |acc| {
                        for ((x, gi), ai) in acc.iter_mut().zip(g).zip(&av) {
                            *x += gi * ai;
                        }
                    });
                }
            }
            Op::AddBroadcast { a, b } => {
                self.add_to(*a, g, 1.0);
                let tail = self.value(*b).numel().max(1);
                self.accumulate(*b, |acc| {
                    for row in g.chunks(tail) {
                        kernels::axpy(1.0, row, acc);
                    }
                });
            }
            Op::Scale { a, c } => self.add_to(*a, g, *c),
            Op::Sum { a } => {
                let g0 = g[0];
                self.accumulate(*a, |acc| acc.iter_mut().for_each(|x| *x += g0));
            }
            Op::Mean { a } => {
                let g0 = g[0] / self.value(*a).numel() as f64;
                self.accumulate(*a, |acc| acc.iter_mut().for_each(|x| *x += g0));
            }
            Op::Reshape { a } => self.add_to(*a, g, 1.0),
            Op::Permute { a, perm } => {
                let out_shape = self.nodes[i].value.shape().to_vec();
                let (back, _) = kernels::permute(g, &out_shape, &inverse_perm(perm));
                self.add_to(*a, &back, 1.0);
            }
            Op::Concat { parts, axis } => {
                let out_shape = self.nodes[i].value.shape().to_vec();
                let (outer, total, inner) = axis_extents(&out_shape, *axis);
                let mut offset = 0;
                for p in parts {
                    let len = self.shape(*p)[*axis];
                    self.accumulate(*p, |acc| {
                        for o in 0..outer {
                            let src = &g[(o * total + offset) * inner..(o * total + offset + len) * inner];
                            kernels::axpy(1.0, src, &mut acc[o * len * inner..(o + 1) * len * inner]);
                        }
                    });
                    offset += len;
                }
            }
            Op::Slice { a, axis, start } => {
                let in_shape = self.shape(*a).to_vec();
                let len = self.nodes[i].value.shape()[*axis];
                let (outer, n, inner) = axis_extents(&in_shape, *axis);
                self.accumulate(*a, |acc| {
                    for o in 0..outer {
                        let dst = o * n * inner + start * inner;
                        kernels::axpy(
                            1.0,
                            &g[o * len * inner..(o + 1) * len * inner],
                            &mut acc[dst..dst + len * inner],
                        );
                    }
                });
            }
            Op::Expand { a } => {
                let n = self.value(*a).numel().max(1);
                self.accumulate(*a, |acc| {
                    for rep in g.chunks(n) {
                        kernels::axpy(1.0, rep, acc);
                    }
                });
            }
            Op::Gelu { a } => {
                let xs = self.value(*a).data().to_vec();
                self.accumulate(*a, |acc| {
                    for ((x, gi), &xi) in acc.iter_mut().zip(g).zip(&xs) {
                        *x += gi * (normal_cdf(xi) + xi * normal_pdf(xi));
                    }
                });
            }
            Op::Softmax { a, axis } => {
                let y = self.nodes[i].value.data().to_vec();
                let (outer, n, inner) = axis_extents(self.nodes[i].value.shape(), *axis);
                self.accumulate(*a, |acc| {
                    for o in 0..outer {
                        for k in 0..inner {
                            let at = |j: usize| o * n * inner + j * inner + k;
                            let s: f64 = (0..n).map(|j| g[at(j)] * y[at(j)]).sum();
                            for j in 0..n {
                                acc[at(j)] += y[at(j)] * (g[at(j)] - s);
                            }
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let d = self.shape(*gain)[0];
                if self.requires_grad(*gain) {
                    self.accumulate(*gain, |acc| {
                        for (gr, hr) in g.chunks(d).zip(xhat.chunks(d)) {
                            for j in 0..d {
                                acc[j] += gr[j] * hr[j];
                            }
                        }
                    });
                }
                self.accumulate(*bias, |acc| {
                    for gr in g.chunks(d) {
                        kernels::axpy(1.0, gr, acc);
                    }
                });
                if self.requires_grad(*x) {
                    let gv = self.value(*gain).data().to_vec();
                    self.accumulate(*x, |acc| {
                        let mut gh = vec![0.0; d];
                        for (r, is) in inv_std.iter().enumerate() {
                            let gr = &g[r * d..(r + 1) * d];
                            let hr = &xhat[r * d..(r + 1) * d];
                            for j in 0..d {
                                gh[j] = gr[j] * gv[j];
                            }
                            let mean_gh = gh.iter().sum::<f64>() / d as f64;
                            let mean_ghh = kernels::dot(&gh, hr) / d as f64;
                            for j in 0..d {
                                acc[r * d + j] += is * (gh[j] - mean_gh - hr[j] * mean_ghh);
                            }
                        }
                    });
                }
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let n = labels.len();
                let c = probs.len() / n.max(1);
                let scale = g[0] / n as f64;
                self.accumulate(*logits, |acc| {
                    for (r, &label) in labels.iter().enumerate() {
                        for j in 0..c {
                            let onehot = if j == label { 1.0 } else { 0.0 };
                            acc[r * c + j] += scale * (probs[r * c + j] - onehot);
                        }
                    }
                });
            }
            Op::Mse { pred, target } => {
                let n = self.value(*pred).numel() as f64;
                let diff: Vec<f64> = self
                    .value(*pred)
                    .data()
                    .iter()
                    .zip(self.value(*target).data())
                    .map(|(p, t)| p - t)
                    .collect();
                let c = 2.0 * g[0] / n;
                self.add_to(*pred, &diff, c);
                self.add_to(*target, &diff, -c);
            }
            Op::Pairwise {
                z,
                w,
                metric,
                z_norm,
                w_norm,
            } => self.pairwise_backward(i, *z, *w, *metric, z_norm, w_norm, g),
        }
        self.nodes[i].op = op;
    }

    #[allow(clippy::too_many_arguments)]
    fn pairwise_backward(
        &mut self,
        node: usize,
        z: Var,
        w: Var,
        metric: Metric,
        z_norm: &[f64],
        w_norm: &[f64],
        g: &[f64],
    ) {
        let (b, d) = (self.shape(z)[0], self.shape(z)[1]);
        let m = self.shape(w)[0];
        let zv = self.value(z).data().to_vec();
        let wv = self.value(w).data().to_vec();
        match metric {
            Metric::Cosine => {
                // d = 1 - c, with ∂c/∂z = (ŵ - c·ẑ)/‖z‖ and symmetrically for w.
                let out = self.nodes[node].value.data();
                let mut gs = vec![0.0; b * m];
                let mut row_gc = vec![0.0; b];
                let mut col_gc = vec![0.0; m];
                for i in 0..b {
                    for j in 0..m {
                        let denom = z_norm[i] * w_norm[j];
                        if denom == 0.0 {
                            continue;
                        }
                        let cos = 1.0 - out[i * m + j];
                        // gs scales the raw dot product: ∂c/∂(z·w) = 1/(‖z‖‖w‖)
                        gs[i * m + j] = -g[i * m + j] / denom;
                        row_gc[i] -= g[i * m + j] * cos;
                        col_gc[j] -= g[i * m + j] * cos;
                    }
                }
                if self.requires_grad(z) {
                    self.accumulate(z, |acc| {
                        gemm(false, false, b, m, d, &gs, &wv, acc, true);
                        for i in 0..b {
                            if z_norm[i] > 0.0 {
                                let c = -row_gc[i] / (z_norm[i] * z_norm[i]);
                                kernels::axpy(c, &zv[i * d..(i + 1) * d], &mut acc[i * d..(i + 1) * d]);
                            }
                        }
                    });
                }
                if self.requires_grad(w) {
                    self.accumulate(w, |acc| {
                        gemm(true, false, m, b, d, &gs, &zv, acc, true);
                        for j in 0..m {
                            if w_norm[j] > 0.0 {
                                let c = -col_gc[j] / (w_norm[j] * w_norm[j]);
                                kernels::axpy(c, &wv[j * d..(j + 1) * d], &mut acc[j * d..(j + 1) * d]);
                            }
                        }
                    });
                }
            }
            Metric::Euclidean | Metric::Manhattan => {
                let deriv = |x: f64| match metric {
                    Metric::Euclidean => 2.0 * x,
                    _ => {
                        if x > 0.0 {
                            1.0
                        } else if x < 0.0 {
                            -1.0
                        } else {
                            0.0
                        }
                    }
                };
                let mut gz = vec![0.0; b * d];
                let mut gw = vec![0.0; m * d];
                for i in 0..b {
                    let zr = &zv[i * d..(i + 1) * d];
                    for j in 0..m {
                        let gij = g[i * m + j];
                        if gij == 0.0 {
                            continue;
                        }
                        let wr = &wv[j * d..(j + 1) * d];
                        for k in 0..d {
                            let t = gij * deriv(zr[k] - wr[k]);
                            gz[i * d + k] += t;
                            gw[j * d + k] -= t;
                        }
                    }
                }
                self.add_to(z, &gz, 1.0);
                self.add_to(w, &gw, 1.0);
            }
        }
    }
}
