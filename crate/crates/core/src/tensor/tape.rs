//! Define-by-run reverse-mode tape.
//!
//! Every primitive records a node in execution order when any input needs a
//! gradient; [`Tape::backward`] replays the nodes in exact reverse order and
//! accumulates additively, so a value consumed by m operations receives the
//! sum of m contributions. The tape is rebuilt on every forward pass — there
//! is no graph caching, which keeps adaptive-step solvers correct.
//!
//! A tape and its tensors are confined to one worker at a time (`Rc` makes
//! this structural); data parallelism happens with independent tapes whose
//! leaf gradients are summed afterwards.

use std::cell::RefCell;
use std::collections::HashMap;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use super::kernels::{
    col2im_add, conv_out_dim, gemm_nn, gemm_nt, gemm_tn, group_stats, im2col, softmax_rows,
};
use super::Tensor;
use crate::error::{GodeError, Result};
use crate::scalar::Scalar;

static TAPE_IDS: AtomicU64 = AtomicU64::new(1);

enum Op<S: Scalar> {
    Leaf,
    Const,
    Add {
        a: usize,
        b: usize,
    },
    Sub {
        a: usize,
        b: usize,
    },
    Mul {
        a: usize,
        b: usize,
    },
    Maximum {
        a: usize,
        b: usize,
    },
    Scale {
        x: usize,
        c: S,
    },
    AddScaled {
        a: usize,
        b: usize,
        c: S,
    },
    Lincomb {
        terms: Vec<(usize, S)>,
    },
    MatMul {
        a: usize,
        b: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    Reshape {
        x: usize,
    },
    PadSpatial {
        x: usize,
        pad: usize,
    },
    SliceSpatial {
        x: usize,
        oy: usize,
        ox: usize,
    },
    ReduceSum {
        x: usize,
    },
    ReduceMean {
        x: usize,
    },
    MaximumScalar {
        x: usize,
        c: S,
    },
    Exp {
        x: usize,
    },
    Ln {
        x: usize,
    },
    AddBias {
        x: usize,
        bias: usize,
    },
    Conv2d {
        x: usize,
        kernel: usize,
        bias: Option<usize>,
        stride: usize,
        pad: usize,
        cols: Rc<Vec<S>>,
    },
    GroupNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        groups: usize,
        mean: Rc<Vec<S>>,
        rstd: Rc<Vec<S>>,
    },
    GlobalAvgPool {
        x: usize,
    },
    ConcatChannel {
        a: usize,
        b: usize,
    },
    Softmax {
        x: usize,
    },
    CrossEntropy {
        logits: usize,
        labels: Rc<Vec<usize>>,
        probs: Rc<Vec<S>>,
    },
}

struct Node<S: Scalar> {
    op: Op<S>,
    value: Tensor<S>,
    needs_grad: bool,
}

struct TapeInner<S: Scalar> {
    nodes: Vec<Node<S>>,
    /// Memoized leaf/const registration keyed by the data allocation, so a
    /// parameter used by m operations owns exactly one node.
    interned: HashMap<usize, usize>,
    consumed: bool,
}

/// Recording context for one forward pass.
pub struct Tape<S: Scalar> {
    inner: Rc<RefCell<TapeInner<S>>>,
    id: u64,
    recording: bool,
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape {
            inner: Rc::new(RefCell::new(TapeInner {
                nodes: Vec::new(),
                interned: HashMap::new(),
                consumed: false,
            })),
            id: TAPE_IDS.fetch_add(1, Ordering::Relaxed),
            recording: true,
        }
    }

    /// Non-recording tape: forward values only. Evaluation paths use this to
    /// avoid retaining activations.
    pub fn inference() -> Self {
        let mut t = Self::new();
        t.recording = false;
        t
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn num_nodes(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    /// Smallest distance of any recorded rectifier input to its kink, or
    /// `None` when no such op was recorded. Central-difference gradient
    /// checks are only valid when this margin comfortably exceeds the probe
    /// step, so checkers use it to pick inputs where the loss is smooth.
    pub fn relu_kink_margin(&self) -> Option<f64> {
        let inner = self.inner.borrow();
        let mut margin: Option<f64> = None;
        for node in &inner.nodes {
            if let Op::MaximumScalar { x, c } = &node.op {
                let xd = inner.nodes[*x].value.data();
                for &v in xd.iter() {
                    let d = (v - *c).abs().to_f64();
                    margin = Some(margin.map_or(d, |m| m.min(d)));
                }
            }
        }
        margin
    }

    /// Largest reciprocal standard deviation recorded by any normalization
    /// node. A group whose variance sits near the epsilon floor makes the
    /// loss extremely curved there, which breaks finite-difference probes
    /// the same way a kink does; checkers bound this before trusting one.
    pub fn max_norm_rstd(&self) -> Option<f64> {
        let inner = self.inner.borrow();
        let mut worst: Option<f64> = None;
        for node in &inner.nodes {
            if let Op::GroupNorm { rstd, .. } = &node.op {
                for &v in rstd.iter() {
                    let r = v.to_f64();
                    worst = Some(worst.map_or(r, |m| m.max(r)));
                }
            }
        }
        worst
    }

    fn intern(&self, t: &Tensor<S>) -> usize {
        if let Some((tid, idx)) = t.node {
            if tid == self.id {
                return idx;
            }
        }
        let key = t.data_key();
        let mut inner = self.inner.borrow_mut();
        if let Some(&idx) = inner.interned.get(&key) {
            return idx;
        }
        let needs_grad = t.requires_grad();
        let op = if needs_grad { Op::Leaf } else { Op::Const };
        let idx = inner.nodes.len();
        inner.nodes.push(Node {
            op,
            value: t.clone(),
            needs_grad,
        });
        inner.interned.insert(key, idx);
        idx
    }

    /// Record `op` producing `out` from the given inputs. Returns the output
    /// with tape linkage when a gradient path exists.
    fn record(
        &self,
        mut out: Tensor<S>,
        make_op: impl FnOnce(&[usize]) -> Op<S>,
        inputs: &[&Tensor<S>],
    ) -> Tensor<S> {
        if !self.recording {
            return out;
        }
        let ids: Vec<usize> = inputs.iter().map(|t| self.intern(t)).collect();
        let needs_grad = {
            let inner = self.inner.borrow();
            ids.iter().any(|&i| inner.nodes[i].needs_grad)
        };
        if !needs_grad {
            return out;
        }
        let op = make_op(&ids);
        let mut inner = self.inner.borrow_mut();
        let idx = inner.nodes.len();
        inner.nodes.push(Node {
            op,
            value: out.clone(),
            needs_grad: true,
        });
        out.node = Some((self.id, idx));
        out
    }

    // ── elementwise ─────────────────────────────────────────────────

    pub fn add(&self, a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
        check_same_shape("add", a, b)?;
        let data: Vec<S> = a
            .data()
            .iter()
            .zip(b.data().iter())
            .map(|(&x, &y)| x + y)
            .collect();
        let out = Tensor::from_vec(a.shape().to_vec(), data)?;
        Ok(self.record(
            out,
            |ids| Op::Add {
                a: ids[0],
                b: ids[1],
            },
            &[a, b],
        ))
    }

    pub fn sub(&self, a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
        check_same_shape("sub", a, b)?;
        let data: Vec<S> = a
            .data()
            .iter()
            .zip(b.data().iter())
            .map(|(&x, &y)| x - y)
            .collect();
        let out = Tensor::from_vec(a.shape().to_vec(), data)?;
        Ok(self.record(
            out,
            |ids| Op::Sub {
                a: ids[0],
                b: ids[1],
            },
            &[a, b],
        ))
    }

    pub fn mul(&self, a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
        check_same_shape("mul", a, b)?;
        let data: Vec<S> = a
            .data()
            .iter()
            .zip(b.data().iter())
            .map(|(&x, &y)| x * y)
            .collect();
        let out = Tensor::from_vec(a.shape().to_vec(), data)?;
        Ok(self.record(
            out,
            |ids| Op::Mul {
                a: ids[0],
                b: ids[1],
            },
            &[a, b],
        ))
    }

    /// Elementwise max; ties route the gradient to the first argument.
    pub fn maximum(&self, a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
        check_same_shape("maximum", a, b)?;
        let data: Vec<S> = a
            .data()
            .iter()
            .zip(b.data().iter())
            .map(|(&x, &y)| x.max_s(y))
            .collect();
        let out = Tensor::from_vec(a.shape().to_vec(), data)?;
        Ok(self.record(
            out,
            |ids| Op::Maximum {
                a: ids[0],
                b: ids[1],
            },
            &[a, b],
        ))
    }

    pub fn scale(&self, x: &Tensor<S>, c: S) -> Result<Tensor<S>> {
        let data: Vec<S> = x.data().iter().map(|&v| v * c).collect();
        let out = Tensor::from_vec(x.shape().to_vec(), data)?;
        Ok(self.record(out, |ids| Op::Scale { x: ids[0], c }, &[x]))
    }

    /// `a + c*b`; the residual/Euler update in one node.
    pub fn add_scaled(&self, a: &Tensor<S>, b: &Tensor<S>, c: S) -> Result<Tensor<S>> {
        check_same_shape("add_scaled", a, b)?;
        let data: Vec<S> = a
            .data()
            .iter()
            .zip(b.data().iter())
            .map(|(&x, &y)| x + c * y)
            .collect();
        let out = Tensor::from_vec(a.shape().to_vec(), data)?;
        Ok(self.record(
            out,
            |ids| Op::AddScaled {
                a: ids[0],
                b: ids[1],
                c,
            },
            &[a, b],
        ))
    }

    /// Weighted sum of same-shape tensors. Zero-weight terms are dropped from
    /// both the value and the gradient, so a one-hot weight vector selects a
    /// term bit-exactly.
    pub fn lincomb(&self, xs: &[Tensor<S>], ws: &[S]) -> Result<Tensor<S>> {
        if xs.is_empty() || xs.len() != ws.len() {
            return Err(GodeError::Config(format!(
                "lincomb needs matching tensor/weight counts, got {} and {}",
                xs.len(),
                ws.len()
            )));
        }
        for x in &xs[1..] {
            check_same_shape("lincomb", &xs[0], x)?;
        }
        let active: Vec<(usize, S)> = ws
            .iter()
            .enumerate()
            .filter(|(_, &w)| w != S::ZERO)
            .map(|(i, &w)| (i, w))
            .collect();
        let numel = xs[0].numel();
        let mut data = vec![S::ZERO; numel];
        for &(i, w) in &active {
            for (d, &v) in data.iter_mut().zip(xs[i].data().iter()) {
                *d += w * v;
            }
        }
        let out = Tensor::from_vec(xs[0].shape().to_vec(), data)?;
        if !self.recording || active.is_empty() {
            return Ok(out);
        }
        let refs: Vec<&Tensor<S>> = active.iter().map(|&(i, _)| &xs[i]).collect();
        let weights: Vec<S> = active.iter().map(|&(_, w)| w).collect();
        Ok(self.record(
            out,
            |ids| Op::Lincomb {
                terms: ids.iter().copied().zip(weights).collect(),
            },
            &refs,
        ))
    }

    pub fn exp(&self, x: &Tensor<S>) -> Result<Tensor<S>> {
        let data: Vec<S> = x.data().iter().map(|&v| v.exp()).collect();
        check_finite("exp", &data)?;
        let out = Tensor::from_vec(x.shape().to_vec(), data)?;
        Ok(self.record(out, |ids| Op::Exp { x: ids[0] }, &[x]))
    }

    pub fn ln(&self, x: &Tensor<S>) -> Result<Tensor<S>> {
        let data: Vec<S> = x.data().iter().map(|&v| v.ln()).collect();
        check_finite("log", &data)?;
        let out = Tensor::from_vec(x.shape().to_vec(), data)?;
        Ok(self.record(out, |ids| Op::Ln { x: ids[0] }, &[x]))
    }

    /// Elementwise max with a constant; the subgradient at `x == c` is zero.
    pub fn maximum_scalar(&self, x: &Tensor<S>, c: S) -> Result<Tensor<S>> {
        let data: Vec<S> = x.data().iter().map(|&v| v.max_s(c)).collect();
        let out = Tensor::from_vec(x.shape().to_vec(), data)?;
        Ok(self.record(out, |ids| Op::MaximumScalar { x: ids[0], c }, &[x]))
    }

    pub fn relu(&self, x: &Tensor<S>) -> Result<Tensor<S>> {
        self.maximum_scalar(x, S::ZERO)
    }

    // ── shape ───────────────────────────────────────────────────────

    pub fn reshape(&self, x: &Tensor<S>, shape: Vec<usize>) -> Result<Tensor<S>> {
        let numel: usize = shape.iter().product();
        if numel != x.numel() {
            return Err(GodeError::ShapeMismatch {
                op: "reshape",
                lhs: x.shape().to_vec(),
                rhs: shape,
            });
        }
        let out = Tensor::from_vec(shape, x.to_vec())?;
        Ok(self.record(out, |ids| Op::Reshape { x: ids[0] }, &[x]))
    }

    /// Zero-pad the two trailing spatial axes of an NCHW tensor.
    pub fn pad_spatial(&self, x: &Tensor<S>, pad: usize) -> Result<Tensor<S>> {
        let (n, c, h, w) = dims4("pad", x)?;
        let (oh, ow) = (h + 2 * pad, w + 2 * pad);
        let xd = x.data();
        let mut data = vec![S::ZERO; n * c * oh * ow];
        for nc in 0..n * c {
            let src = &xd[nc * h * w..(nc + 1) * h * w];
            let dst = &mut data[nc * oh * ow..(nc + 1) * oh * ow];
            for y in 0..h {
                let drow = &mut dst[(y + pad) * ow + pad..(y + pad) * ow + pad + w];
                drow.copy_from_slice(&src[y * w..(y + 1) * w]);
            }
        }
        drop(xd);
        let out = Tensor::from_vec(vec![n, c, oh, ow], data)?;
        Ok(self.record(out, |ids| Op::PadSpatial { x: ids[0], pad }, &[x]))
    }

    /// Spatial crop of an NCHW tensor at offset (oy, ox) with size (ch, cw).
    pub fn slice_spatial(
        &self,
        x: &Tensor<S>,
        oy: usize,
        ox: usize,
        ch: usize,
        cw: usize,
    ) -> Result<Tensor<S>> {
        let (n, c, h, w) = dims4("slice", x)?;
        if oy + ch > h || ox + cw > w {
            return Err(GodeError::ShapeMismatch {
                op: "slice",
                lhs: x.shape().to_vec(),
                rhs: vec![oy, ox, ch, cw],
            });
        }
        let xd = x.data();
        let mut data = vec![S::ZERO; n * c * ch * cw];
        for nc in 0..n * c {
            let src = &xd[nc * h * w..(nc + 1) * h * w];
            let dst = &mut data[nc * ch * cw..(nc + 1) * ch * cw];
            for y in 0..ch {
                dst[y * cw..(y + 1) * cw]
                    .copy_from_slice(&src[(oy + y) * w + ox..(oy + y) * w + ox + cw]);
            }
        }
        drop(xd);
        let out = Tensor::from_vec(vec![n, c, ch, cw], data)?;
        Ok(self.record(out, |ids| Op::SliceSpatial { x: ids[0], oy, ox }, &[x]))
    }

    // ── reductions ──────────────────────────────────────────────────

    pub fn reduce_sum(&self, x: &Tensor<S>) -> Result<Tensor<S>> {
        let s: S = x.data().iter().copied().sum();
        let out = Tensor::scalar(s);
        Ok(self.record(out, |ids| Op::ReduceSum { x: ids[0] }, &[x]))
    }

    pub fn reduce_mean(&self, x: &Tensor<S>) -> Result<Tensor<S>> {
        let numel = x.numel();
        if numel == 0 {
            return Err(GodeError::Config("reduce_mean of empty tensor".into()));
        }
        let s: S = x.data().iter().copied().sum();
        let out = Tensor::scalar(s * S::from_f64(1.0 / numel as f64));
        Ok(self.record(out, |ids| Op::ReduceMean { x: ids[0] }, &[x]))
    }

    // ── linear algebra ──────────────────────────────────────────────

    pub fn matmul(&self, a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
        let (m, k) = dims2("matmul", a)?;
        let (k2, n) = dims2("matmul", b)?;
        if k != k2 {
            return Err(GodeError::ShapeMismatch {
                op: "matmul",
                lhs: a.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
        let mut data = vec![S::ZERO; m * n];
        gemm_nn(&a.data(), &b.data(), &mut data, m, k, n);
        check_finite("matmul", &data)?;
        let out = Tensor::from_vec(vec![m, n], data)?;
        Ok(self.record(
            out,
            |ids| Op::MatMul {
                a: ids[0],
                b: ids[1],
                m,
                k,
                n,
            },
            &[a, b],
        ))
    }

    /// Broadcast-add a `[C]` bias over axis 1 of `x`.
    pub fn add_bias(&self, x: &Tensor<S>, bias: &Tensor<S>) -> Result<Tensor<S>> {
        if x.shape().len() < 2 || bias.shape() != [x.shape()[1]] {
            return Err(GodeError::ShapeMismatch {
                op: "add_bias",
                lhs: x.shape().to_vec(),
                rhs: bias.shape().to_vec(),
            });
        }
        let n = x.shape()[0];
        let c = x.shape()[1];
        let inner: usize = x.shape()[2..].iter().product();
        let bd = bias.data();
        let mut data = x.to_vec();
        for ni in 0..n {
            for ci in 0..c {
                let seg = &mut data[(ni * c + ci) * inner..(ni * c + ci + 1) * inner];
                let bv = bd[ci];
                for v in seg.iter_mut() {
                    *v += bv;
                }
            }
        }
        drop(bd);
        let out = Tensor::from_vec(x.shape().to_vec(), data)?;
        Ok(self.record(
            out,
            |ids| Op::AddBias {
                x: ids[0],
                bias: ids[1],
            },
            &[x, bias],
        ))
    }

    // ── network primitives ──────────────────────────────────────────

    /// 2-D cross-correlation (no kernel flip) with optional bias.
    /// `x: [N,Ci,H,W]`, `kernel: [Co,Ci,kh,kw]`.
    pub fn conv2d(
        &self,
        x: &Tensor<S>,
        kernel: &Tensor<S>,
        bias: Option<&Tensor<S>>,
        stride: usize,
        pad: usize,
    ) -> Result<Tensor<S>> {
        let (n, ci, h, w) = dims4("conv2d", x)?;
        let ks = kernel.shape();
        if ks.len() != 4 || ks[1] != ci {
            return Err(GodeError::ShapeMismatch {
                op: "conv2d",
                lhs: x.shape().to_vec(),
                rhs: ks.to_vec(),
            });
        }
        let (co, kh, kw) = (ks[0], ks[2], ks[3]);
        if let Some(b) = bias {
            if b.shape() != [co] {
                return Err(GodeError::ShapeMismatch {
                    op: "conv2d bias",
                    lhs: vec![co],
                    rhs: b.shape().to_vec(),
                });
            }
        }
        let oh = conv_out_dim(h, kh, stride, pad).ok_or_else(|| GodeError::ShapeMismatch {
            op: "conv2d",
            lhs: x.shape().to_vec(),
            rhs: ks.to_vec(),
        })?;
        let ow = conv_out_dim(w, kw, stride, pad).ok_or_else(|| GodeError::ShapeMismatch {
            op: "conv2d",
            lhs: x.shape().to_vec(),
            rhs: ks.to_vec(),
        })?;
        let ckk = ci * kh * kw;
        let hw = oh * ow;
        let mut cols = vec![S::ZERO; n * ckk * hw];
        let mut data = vec![S::ZERO; n * co * hw];
        {
            let xd = x.data();
            let kd = kernel.data();
            for s in 0..n {
                let col_s = &mut cols[s * ckk * hw..(s + 1) * ckk * hw];
                im2col(
                    &xd[s * ci * h * w..(s + 1) * ci * h * w],
                    ci,
                    h,
                    w,
                    kh,
                    kw,
                    stride,
                    pad,
                    col_s,
                );
                gemm_nn(
                    &kd,
                    col_s,
                    &mut data[s * co * hw..(s + 1) * co * hw],
                    co,
                    ckk,
                    hw,
                );
            }
        }
        if let Some(b) = bias {
            let bd = b.data();
            for s in 0..n {
                for c in 0..co {
                    let seg = &mut data[(s * co + c) * hw..(s * co + c + 1) * hw];
                    let bv = bd[c];
                    for v in seg.iter_mut() {
                        *v += bv;
                    }
                }
            }
        }
        check_finite("conv2d", &data)?;
        let out = Tensor::from_vec(vec![n, co, oh, ow], data)?;
        let cols = Rc::new(cols);
        let mut inputs: Vec<&Tensor<S>> = vec![x, kernel];
        if let Some(b) = bias {
            inputs.push(b);
        }
        Ok(self.record(
            out,
            |ids| Op::Conv2d {
                x: ids[0],
                kernel: ids[1],
                bias: ids.get(2).copied(),
                stride,
                pad,
                cols,
            },
            &inputs,
        ))
    }

    /// Group normalization: per-sample, per-group standardization followed by
    /// a per-channel affine transform.
    pub fn group_norm(
        &self,
        x: &Tensor<S>,
        gamma: &Tensor<S>,
        beta: &Tensor<S>,
        groups: usize,
        eps: f64,
    ) -> Result<Tensor<S>> {
        let shape = x.shape().to_vec();
        if shape.len() < 2 {
            return Err(GodeError::Config(
                "group_norm expects [N,C,...] input".into(),
            ));
        }
        let (n, c) = (shape[0], shape[1]);
        if groups == 0 || c % groups != 0 {
            return Err(GodeError::Config(format!(
                "group_norm: {c} channels not divisible by {groups} groups"
            )));
        }
        if gamma.shape() != [c] || beta.shape() != [c] {
            return Err(GodeError::ShapeMismatch {
                op: "group_norm affine",
                lhs: vec![c],
                rhs: gamma.shape().to_vec(),
            });
        }
        let spatial: usize = shape[2..].iter().product();
        let cpg = c / groups;
        let gsize = cpg * spatial;
        let (mean, rstd) = group_stats(&x.data(), n, groups, gsize, eps);
        let mut data = vec![S::ZERO; x.numel()];
        {
            let xd = x.data();
            let gd = gamma.data();
            let bd = beta.data();
            for ni in 0..n {
                for gi in 0..groups {
                    let mu = mean[ni * groups + gi];
                    let rs = rstd[ni * groups + gi];
                    for cc in 0..cpg {
                        let ch = gi * cpg + cc;
                        let base = (ni * c + ch) * spatial;
                        let (ga, be) = (gd[ch], bd[ch]);
                        for i in 0..spatial {
                            data[base + i] = ga * ((xd[base + i] - mu) * rs) + be;
                        }
                    }
                }
            }
        }
        check_finite("group_norm", &data)?;
        let out = Tensor::from_vec(shape, data)?;
        let (mean, rstd) = (Rc::new(mean), Rc::new(rstd));
        Ok(self.record(
            out,
            |ids| Op::GroupNorm {
                x: ids[0],
                gamma: ids[1],
                beta: ids[2],
                groups,
                mean,
                rstd,
            },
            &[x, gamma, beta],
        ))
    }

    /// `[N,C,H,W] -> [N,C]` mean over the spatial axes.
    pub fn global_avg_pool(&self, x: &Tensor<S>) -> Result<Tensor<S>> {
        let (n, c, h, w) = dims4("global_avg_pool", x)?;
        let inv = S::from_f64(1.0 / (h * w) as f64);
        let xd = x.data();
        let mut data = vec![S::ZERO; n * c];
        for (i, v) in data.iter_mut().enumerate() {
            let seg = &xd[i * h * w..(i + 1) * h * w];
            let mut s = S::ZERO;
            for &u in seg {
                s += u;
            }
            *v = s * inv;
        }
        drop(xd);
        let out = Tensor::from_vec(vec![n, c], data)?;
        Ok(self.record(out, |ids| Op::GlobalAvgPool { x: ids[0] }, &[x]))
    }

    /// Concatenate along the channel axis.
    pub fn concat_channel(&self, a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
        let (n, ca, h, w) = dims4("concat_channel", a)?;
        let (n2, cb, h2, w2) = dims4("concat_channel", b)?;
        if n != n2 || h != h2 || w != w2 {
            return Err(GodeError::ShapeMismatch {
                op: "concat_channel",
                lhs: a.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
        let hw = h * w;
        let ad = a.data();
        let bd = b.data();
        let mut data = vec![S::ZERO; n * (ca + cb) * hw];
        for ni in 0..n {
            let dst = &mut data[ni * (ca + cb) * hw..(ni + 1) * (ca + cb) * hw];
            dst[..ca * hw].copy_from_slice(&ad[ni * ca * hw..(ni + 1) * ca * hw]);
            dst[ca * hw..].copy_from_slice(&bd[ni * cb * hw..(ni + 1) * cb * hw]);
        }
        drop(ad);
        drop(bd);
        let out = Tensor::from_vec(vec![n, ca + cb, h, w], data)?;
        Ok(self.record(
            out,
            |ids| Op::ConcatChannel {
                a: ids[0],
                b: ids[1],
            },
            &[a, b],
        ))
    }

    /// Softmax over the last axis.
    pub fn softmax(&self, x: &Tensor<S>) -> Result<Tensor<S>> {
        let shape = x.shape().to_vec();
        let k = *shape
            .last()
            .ok_or_else(|| GodeError::Config("softmax of a scalar".into()))?;
        let rows = x.numel() / k;
        let mut data = vec![S::ZERO; x.numel()];
        softmax_rows(&x.data(), rows, k, &mut data);
        check_finite("softmax", &data)?;
        let out = Tensor::from_vec(shape, data)?;
        Ok(self.record(out, |ids| Op::Softmax { x: ids[0] }, &[x]))
    }

    /// Mean negative log-likelihood of `labels` under softmax of `logits`
    /// (`[N,K]`), stabilized by max subtraction.
    pub fn cross_entropy(&self, logits: &Tensor<S>, labels: &[usize]) -> Result<Tensor<S>> {
        let (n, k) = dims2("cross_entropy", logits)?;
        if labels.len() != n {
            return Err(GodeError::ShapeMismatch {
                op: "cross_entropy",
                lhs: vec![n],
                rhs: vec![labels.len()],
            });
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(GodeError::Config(format!(
                "label {bad} out of range for {k} classes"
            )));
        }
        let ld = logits.data();
        let mut probs = vec![S::ZERO; n * k];
        softmax_rows(&ld, n, k, &mut probs);
        let mut loss = S::ZERO;
        for (r, &label) in labels.iter().enumerate() {
            let row = &ld[r * k..(r + 1) * k];
            let mut m = row[0];
            for &v in &row[1..] {
                m = m.max_s(v);
            }
            let mut z = S::ZERO;
            for &v in row {
                z += (v - m).exp();
            }
            loss += z.ln() + m - row[label];
        }
        drop(ld);
        loss *= S::from_f64(1.0 / n as f64);
        if !loss.is_finite() {
            return Err(GodeError::NonFinite {
                op: "cross_entropy",
            });
        }
        let out = Tensor::scalar(loss);
        let labels = Rc::new(labels.to_vec());
        let probs = Rc::new(probs);
        Ok(self.record(
            out,
            |ids| Op::CrossEntropy {
                logits: ids[0],
                labels,
                probs,
            },
            &[logits],
        ))
    }

    // ── backward ────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss. Populates the gradient accumulator of
    /// every leaf that contributed. A loss with no recorded history is a
    /// no-op. Calling twice on one tape is an error.
    pub fn backward(&self, loss: &Tensor<S>) -> Result<()> {
        if loss.numel() != 1 {
            return Err(GodeError::Autodiff(format!(
                "backward requires a scalar loss, got shape {:?}",
                loss.shape()
            )));
        }
        let mut inner = self.inner.borrow_mut();
        if inner.consumed {
            return Err(GodeError::Autodiff(
                "backward called twice on one tape without reset".into(),
            ));
        }
        inner.consumed = true;
        let Some((tid, root)) = loss.node else {
            return Ok(()); // constant loss: nothing reaches any leaf
        };
        if tid != self.id {
            return Err(GodeError::Autodiff(
                "loss was recorded on a different tape".into(),
            ));
        }
        let nodes = &inner.nodes;
        let mut grads: Vec<Option<Vec<S>>> = vec![None; nodes.len()];
        grads[root] = Some(vec![S::ONE]);

        for i in (0..=root).rev() {
            if grads[i].is_none() || !nodes[i].needs_grad {
                continue;
            }
            if matches!(nodes[i].op, Op::Leaf | Op::Const) {
                continue; // deposited after the sweep
            }
            let g = grads[i].take().expect("checked above");
            apply_rule(nodes, &mut grads, i, &g);
        }

        // Deterministic deposit order: tape order.
        for (i, node) in nodes.iter().enumerate() {
            if let (Op::Leaf, Some(g)) = (&node.op, &grads[i]) {
                if let Some(cell) = node.value.grad_cell() {
                    let mut acc = cell.borrow_mut();
                    for (a, &b) in acc.iter_mut().zip(g.iter()) {
                        *a += b;
                    }
                }
            }
        }
        Ok(())
    }
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

/// One node's contribution to its inputs' gradients.
fn apply_rule<S: Scalar>(nodes: &[Node<S>], grads: &mut [Option<Vec<S>>], i: usize, g: &[S]) {
    let want = |idx: usize| nodes[idx].needs_grad;
    let numel = |idx: usize| nodes[idx].value.numel();
    match &nodes[i].op {
        Op::Leaf | Op::Const => {}
        Op::Add { a, b } => {
            if want(*a) {
                axpy(slot(grads, *a, numel(*a)), g, S::ONE);
            }
            if want(*b) {
                axpy(slot(grads, *b, numel(*b)), g, S::ONE);
            }
        }
        Op::Sub { a, b } => {
            if want(*a) {
                axpy(slot(grads, *a, numel(*a)), g, S::ONE);
            }
            if want(*b) {
                axpy(slot(grads, *b, numel(*b)), g, -S::ONE);
            }
        }
        Op::Mul { a, b } => {
            if want(*a) {
                let bd = nodes[*b].value.data();
                let dst = slot(grads, *a, numel(*a));
                for ((d, &gv), &bv) in dst.iter_mut().zip(g).zip(bd.iter()) {
                    *d += gv * bv;
                }
            }
            if want(*b) {
                let ad = nodes[*a].value.data();
                let dst = slot(grads, *b, numel(*b));
                for ((d, &gv), &av) in dst.iter_mut().zip(g).zip(ad.iter()) {
                    *d += gv * av;
                }
            }
        }
        Op::Maximum { a, b } => {
            let ad = nodes[*a].value.data();
            let bd = nodes[*b].value.data();
            if want(*a) {
                let dst = slot(grads, *a, numel(*a));
                for (((d, &gv), &av), &bv) in dst.iter_mut().zip(g).zip(ad.iter()).zip(bd.iter()) {
                    if av >= bv {
                        *d += gv;
                    }
                }
            }
            if want(*b) {
                let dst = slot(grads, *b, numel(*b));
                for (((d, &gv), &av), &bv) in dst.iter_mut().zip(g).zip(ad.iter()).zip(bd.iter()) {
                    if av < bv {
                        *d += gv;
                    }
                }
            }
        }
        Op::Scale { x, c } => {
            if want(*x) {
                axpy(slot(grads, *x, numel(*x)), g, *c);
            }
        }
        Op::AddScaled { a, b, c } => {
            if want(*a) {
                axpy(slot(grads, *a, numel(*a)), g, S::ONE);
            }
            if want(*b) {
                axpy(slot(grads, *b, numel(*b)), g, *c);
            }
        }
        Op::Lincomb { terms } => {
            for &(x, w) in terms {
                if want(x) {
                    axpy(slot(grads, x, numel(x)), g, w);
                }
            }
        }
        Op::MatMul { a, b, m, k, n } => {
            if want(*a) {
                let bd = nodes[*b].value.data();
                gemm_nt(g, &bd, slot(grads, *a, numel(*a)), *m, *n, *k);
            }
            if want(*b) {
                let ad = nodes[*a].value.data();
                gemm_tn(&ad, g, slot(grads, *b, numel(*b)), *k, *m, *n);
            }
        }
        Op::Reshape { x } => {
            if want(*x) {
                axpy(slot(grads, *x, numel(*x)), g, S::ONE);
            }
        }
        Op::PadSpatial { x, pad } => {
            if want(*x) {
                let xs = nodes[*x].value.shape().to_vec();
                let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
                let ow = w + 2 * pad;
                let oh = h + 2 * pad;
                let dst = slot(grads, *x, numel(*x));
                for nc in 0..n * c {
                    let gsub = &g[nc * oh * ow..(nc + 1) * oh * ow];
                    let dsub = &mut dst[nc * h * w..(nc + 1) * h * w];
                    for y in 0..h {
                        let grow = &gsub[(y + pad) * ow + pad..(y + pad) * ow + pad + w];
                        for (d, &gv) in dsub[y * w..(y + 1) * w].iter_mut().zip(grow) {
                            *d += gv;
                        }
                    }
                }
            }
        }
        Op::SliceSpatial { x, oy, ox } => {
            if want(*x) {
                let xs = nodes[*x].value.shape().to_vec();
                let os = nodes[i].value.shape().to_vec();
                let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
                let (ch, cw) = (os[2], os[3]);
                let dst = slot(grads, *x, numel(*x));
                for nc in 0..n * c {
                    let gsub = &g[nc * ch * cw..(nc + 1) * ch * cw];
                    let dsub = &mut dst[nc * h * w..(nc + 1) * h * w];
                    for y in 0..ch {
                        let drow = &mut dsub[(oy + y) * w + ox..(oy + y) * w + ox + cw];
                        for (d, &gv) in drow.iter_mut().zip(&gsub[y * cw..(y + 1) * cw]) {
                            *d += gv;
                        }
                    }
                }
            }
        }
        Op::ReduceSum { x } => {
            if want(*x) {
                let dst = slot(grads, *x, numel(*x));
                let gv = g[0];
                for d in dst.iter_mut() {
                    *d += gv;
                }
            }
        }
        Op::ReduceMean { x } => {
            if want(*x) {
                let m = numel(*x);
                let dst = slot(grads, *x, m);
                let gv = g[0] * S::from_f64(1.0 / m as f64);
                for d in dst.iter_mut() {
                    *d += gv;
                }
            }
        }
        Op::MaximumScalar { x, c } => {
            if want(*x) {
                let xd = nodes[*x].value.data();
                let dst = slot(grads, *x, numel(*x));
                for ((d, &gv), &xv) in dst.iter_mut().zip(g).zip(xd.iter()) {
                    if xv > *c {
                        *d += gv;
                    }
                }
            }
        }
        Op::Exp { x } => {
            if want(*x) {
                let od = nodes[i].value.data();
                let dst = slot(grads, *x, numel(*x));
                for ((d, &gv), &ov) in dst.iter_mut().zip(g).zip(od.iter()) {
                    *d += gv * ov;
                }
            }
        }
        Op::Ln { x } => {
            if want(*x) {
                let xd = nodes[*x].value.data();
                let dst = slot(grads, *x, numel(*x));
                for ((d, &gv), &xv) in dst.iter_mut().zip(g).zip(xd.iter()) {
                    *d += gv / xv;
                }
            }
        }
        Op::AddBias { x, bias } => {
            if want(*x) {
                axpy(slot(grads, *x, numel(*x)), g, S::ONE);
            }
            if want(*bias) {
                let xs = nodes[*x].value.shape().to_vec();
                let (n, c) = (xs[0], xs[1]);
                let inner: usize = xs[2..].iter().product();
                let dst = slot(grads, *bias, c);
                for ni in 0..n {
                    for ci in 0..c {
                        let seg = &g[(ni * c + ci) * inner..(ni * c + ci + 1) * inner];
                        let mut s = S::ZERO;
                        for &v in seg {
                            s += v;
                        }
                        dst[ci] += s;
                    }
                }
            }
        }
        Op::Conv2d {
            x,
            kernel,
            bias,
            stride,
            pad,
            cols,
        } => {
            let xs = nodes[*x].value.shape().to_vec();
            let ks = nodes[*kernel].value.shape().to_vec();
            let (n, ci, h, w) = (xs[0], xs[1], xs[2], xs[3]);
            let (co, kh, kw) = (ks[0], ks[2], ks[3]);
            let ckk = ci * kh * kw;
            let oh = conv_out_dim(h, kh, *stride, *pad).unwrap();
            let ow = conv_out_dim(w, kw, *stride, *pad).unwrap();
            let hw = oh * ow;
            if want(*kernel) {
                let dst = slot(grads, *kernel, numel(*kernel));
                for s in 0..n {
                    gemm_nt(
                        &g[s * co * hw..(s + 1) * co * hw],
                        &cols[s * ckk * hw..(s + 1) * ckk * hw],
                        dst,
                        co,
                        hw,
                        ckk,
                    );
                }
            }
            if want(*x) {
                let kd = nodes[*kernel].value.data();
                let dst = slot(grads, *x, numel(*x));
                let mut dcols = vec![S::ZERO; ckk * hw];
                for s in 0..n {
                    for v in dcols.iter_mut() {
                        *v = S::ZERO;
                    }
                    gemm_tn(
                        &kd,
                        &g[s * co * hw..(s + 1) * co * hw],
                        &mut dcols,
                        ckk,
                        co,
                        hw,
                    );
                    col2im_add(
                        &dcols,
                        ci,
                        h,
                        w,
                        kh,
                        kw,
                        *stride,
                        *pad,
                        &mut dst[s * ci * h * w..(s + 1) * ci * h * w],
                    );
                }
            }
            if let Some(b) = bias {
                if want(*b) {
                    let dst = slot(grads, *b, co);
                    for s in 0..n {
                        for c in 0..co {
                            let seg = &g[(s * co + c) * hw..(s * co + c + 1) * hw];
                            let mut acc = S::ZERO;
                            for &v in seg {
                                acc += v;
                            }
                            dst[c] += acc;
                        }
                    }
                }
            }
        }
        Op::GroupNorm {
            x,
            gamma,
            beta,
            groups,
            mean,
            rstd,
        } => {
            let xs = nodes[*x].value.shape().to_vec();
            let (n, c) = (xs[0], xs[1]);
            let spatial: usize = xs[2..].iter().product();
            let cpg = c / groups;
            let gsize = cpg * spatial;
            let xd = nodes[*x].value.data();
            let gad = nodes[*gamma].value.data();
            if want(*beta) {
                let dst = slot(grads, *beta, c);
                for ni in 0..n {
                    for ci in 0..c {
                        let seg = &g[(ni * c + ci) * spatial..(ni * c + ci + 1) * spatial];
                        let mut s = S::ZERO;
                        for &v in seg {
                            s += v;
                        }
                        dst[ci] += s;
                    }
                }
            }
            if want(*gamma) {
                let dst = slot(grads, *gamma, c);
                for ni in 0..n {
                    for gi in 0..*groups {
                        let mu = mean[ni * groups + gi];
                        let rs = rstd[ni * groups + gi];
                        for cc in 0..cpg {
                            let ch = gi * cpg + cc;
                            let base = (ni * c + ch) * spatial;
                            let mut s = S::ZERO;
                            for k in 0..spatial {
                                s += g[base + k] * ((xd[base + k] - mu) * rs);
                            }
                            dst[ch] += s;
                        }
                    }
                }
            }
            if want(*x) {
                let inv_m = S::from_f64(1.0 / gsize as f64);
                let dst = slot(grads, *x, numel(*x));
                for ni in 0..n {
                    for gi in 0..*groups {
                        let mu = mean[ni * groups + gi];
                        let rs = rstd[ni * groups + gi];
                        // s1 = sum(dxhat), s2 = sum(dxhat * xhat) over the group
                        let mut s1 = S::ZERO;
                        let mut s2 = S::ZERO;
                        for cc in 0..cpg {
                            let ch = gi * cpg + cc;
                            let base = (ni * c + ch) * spatial;
                            let ga = gad[ch];
                            for k in 0..spatial {
                                let dxh = g[base + k] * ga;
                                s1 += dxh;
                                s2 += dxh * ((xd[base + k] - mu) * rs);
                            }
                        }
                        s1 *= inv_m;
                        s2 *= inv_m;
                        for cc in 0..cpg {
                            let ch = gi * cpg + cc;
                            let base = (ni * c + ch) * spatial;
                            let ga = gad[ch];
                            for k in 0..spatial {
                                let xh = (xd[base + k] - mu) * rs;
                                let dxh = g[base + k] * ga;
                                dst[base + k] += rs * (dxh - s1 - xh * s2);
                            }
                        }
                    }
                }
            }
        }
        Op::GlobalAvgPool { x } => {
            if want(*x) {
                let xs = nodes[*x].value.shape().to_vec();
                let hw: usize = xs[2] * xs[3];
                let inv = S::from_f64(1.0 / hw as f64);
                let dst = slot(grads, *x, numel(*x));
                for (nc, &gv) in g.iter().enumerate() {
                    let seg = &mut dst[nc * hw..(nc + 1) * hw];
                    let add = gv * inv;
                    for d in seg.iter_mut() {
                        *d += add;
                    }
                }
            }
        }
        Op::ConcatChannel { a, b } => {
            let as_ = nodes[*a].value.shape().to_vec();
            let bs = nodes[*b].value.shape().to_vec();
            let (n, ca, hw) = (as_[0], as_[1], as_[2] * as_[3]);
            let cb = bs[1];
            if want(*a) {
                let dst = slot(grads, *a, numel(*a));
                for ni in 0..n {
                    let src = &g[ni * (ca + cb) * hw..ni * (ca + cb) * hw + ca * hw];
                    for (d, &gv) in dst[ni * ca * hw..(ni + 1) * ca * hw].iter_mut().zip(src) {
                        *d += gv;
                    }
                }
            }
            if want(*b) {
                let dst = slot(grads, *b, numel(*b));
                for ni in 0..n {
                    let src = &g[ni * (ca + cb) * hw + ca * hw..(ni + 1) * (ca + cb) * hw];
                    for (d, &gv) in dst[ni * cb * hw..(ni + 1) * cb * hw].iter_mut().zip(src) {
                        *d += gv;
                    }
                }
            }
        }
        Op::Softmax { x } => {
            if want(*x) {
                let od = nodes[i].value.data();
                let shape = nodes[i].value.shape().to_vec();
                let k = *shape.last().unwrap();
                let rows = od.len() / k;
                let dst = slot(grads, *x, numel(*x));
                for r in 0..rows {
                    let y = &od[r * k..(r + 1) * k];
                    let gr = &g[r * k..(r + 1) * k];
                    let mut s = S::ZERO;
                    for (&gv, &yv) in gr.iter().zip(y) {
                        s += gv * yv;
                    }
                    for ((d, &gv), &yv) in dst[r * k..(r + 1) * k].iter_mut().zip(gr).zip(y) {
                        *d += yv * (gv - s);
                    }
                }
            }
        }
        Op::CrossEntropy {
            logits,
            labels,
            probs,
        } => {
            if want(*logits) {
                let n = labels.len();
                let k = numel(*logits) / n;
                let scale = g[0] * S::from_f64(1.0 / n as f64);
                let dst = slot(grads, *logits, numel(*logits));
                for (r, &label) in labels.iter().enumerate() {
                    for c in 0..k {
                        let indicator = if c == label { S::ONE } else { S::ZERO };
                        dst[r * k + c] += scale * (probs[r * k + c] - indicator);
                    }
                }
            }
        }
    }
}

fn slot<S: Scalar>(grads: &mut [Option<Vec<S>>], idx: usize, numel: usize) -> &mut Vec<S> {
    grads[idx].get_or_insert_with(|| vec![S::ZERO; numel])
}

fn axpy<S: Scalar>(dst: &mut [S], src: &[S], c: S) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += c * s;
    }
}

fn check_same_shape<S: Scalar>(op: &'static str, a: &Tensor<S>, b: &Tensor<S>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(GodeError::ShapeMismatch {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    Ok(())
}

fn check_finite<S: Scalar>(op: &'static str, data: &[S]) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(GodeError::NonFinite { op })
    }
}

fn dims2<S: Scalar>(op: &'static str, t: &Tensor<S>) -> Result<(usize, usize)> {
    match t.shape() {
        [a, b] => Ok((*a, *b)),
        _ => Err(GodeError::ShapeMismatch {
            op,
            lhs: t.shape().to_vec(),
            rhs: vec![0, 0],
        }),
    }
}

fn dims4<S: Scalar>(op: &'static str, t: &Tensor<S>) -> Result<(usize, usize, usize, usize)> {
    match t.shape() {
        [a, b, c, d] => Ok((*a, *b, *c, *d)),
        _ => Err(GodeError::ShapeMismatch {
            op,
            lhs: t.shape().to_vec(),
            rhs: vec![0, 0, 0, 0],
        }),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::fd::finite_difference_grad;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    fn randn(rng: &mut ChaCha12Rng, shape: Vec<usize>) -> Tensor<f64> {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
        Tensor::param(shape, data).unwrap()
    }

    #[test]
    fn add_elementwise() {
        let t = Tape::new();
        let a = Tensor::from_vec(vec![2], vec![1.0f64, 2.0]).unwrap();
        let b = Tensor::from_vec(vec![2], vec![3.0, 4.0]).unwrap();
        assert_eq!(t.add(&a, &b).unwrap().to_vec(), vec![4.0, 6.0]);
    }

    #[test]
    fn add_shape_mismatch_names_both_shapes() {
        let t = Tape::<f64>::new();
        let a = Tensor::zeros(vec![2, 3]);
        let b = Tensor::zeros(vec![3, 2]);
        let err = t.add(&a, &b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("[3, 2]"), "{err}");
    }

    #[test]
    fn matmul_identity() {
        let t = Tape::new();
        let eye =
            Tensor::from_vec(vec![3, 3], vec![1.0f64, 0., 0., 0., 1., 0., 0., 0., 1.]).unwrap();
        let a = Tensor::from_vec(vec![3, 3], (1..=9).map(|v| v as f64).collect()).unwrap();
        assert_eq!(t.matmul(&eye, &a).unwrap().to_vec(), a.to_vec());
    }

    #[test]
    fn reduce_sum_of_ones() {
        let t = Tape::new();
        let x = Tensor::<f64>::filled(vec![2, 3], 1.0);
        assert_eq!(t.reduce_sum(&x).unwrap().item(), 6.0);
    }

    #[test]
    fn backward_of_square_sum() {
        let t = Tape::new();
        let w = Tensor::param(vec![3], vec![1.0f64, 2.0, 3.0]).unwrap();
        let sq = t.mul(&w, &w).unwrap();
        let loss = t.reduce_sum(&sq).unwrap();
        t.backward(&loss).unwrap();
        assert_eq!(w.grad().unwrap(), vec![2.0, 4.0, 6.0]);
    }

    #[test]
    fn backward_on_constant_is_noop() {
        let t = Tape::<f64>::new();
        let c = Tensor::scalar(5.0);
        assert!(t.backward(&c).is_ok());
    }

    #[test]
    fn backward_twice_errors() {
        let t = Tape::new();
        let w = Tensor::param(vec![1], vec![2.0f64]).unwrap();
        let loss = t.reduce_sum(&t.mul(&w, &w).unwrap()).unwrap();
        t.backward(&loss).unwrap();
        assert!(t.backward(&loss).is_err());
    }

    #[test]
    fn backward_on_non_scalar_errors() {
        let t = Tape::new();
        let w = Tensor::param(vec![2], vec![1.0f64, 2.0]).unwrap();
        let y = t.mul(&w, &w).unwrap();
        assert!(t.backward(&y).is_err());
    }

    #[test]
    fn shared_input_accumulates_additively() {
        // y = w*w + w*w: each use contributes, total grad 4w.
        let t = Tape::new();
        let w = Tensor::param(vec![2], vec![1.5f64, -0.5]).unwrap();
        let a = t.mul(&w, &w).unwrap();
        let b = t.mul(&w, &w).unwrap();
        let loss = t.reduce_sum(&t.add(&a, &b).unwrap()).unwrap();
        t.backward(&loss).unwrap();
        assert_eq!(w.grad().unwrap(), vec![6.0, -2.0]);
    }

    #[test]
    fn inference_tape_records_nothing() {
        let t = Tape::inference();
        let w = Tensor::param(vec![2], vec![1.0f64, 2.0]).unwrap();
        let y = t.mul(&w, &w).unwrap();
        assert_eq!(t.num_nodes(), 0);
        let loss = t.reduce_sum(&y).unwrap();
        t.backward(&loss).unwrap(); // constant: no-op
        assert_eq!(w.grad().unwrap(), vec![0.0, 0.0]);
    }

    /// Every primitive's analytic gradient vs central differences on
    /// randomized small tensors, 100 seeds, 64-bit.
    #[test]
    fn primitive_grads_match_finite_differences() {
        let eps = 1e-4;
        let tol = 1e-5;
        for seed in 0..100u64 {
            let mut rng = ChaCha12Rng::seed_from_u64(seed);
            let kind = seed % 13;
            let x = randn(&mut rng, vec![2, 3]);
            let y = randn(&mut rng, vec![2, 3]);
            let f = |xt: &Tensor<f64>| -> f64 {
                let t = Tape::new();
                let out = match kind {
                    0 => t.add(xt, &y).unwrap(),
                    1 => t.sub(&y, xt).unwrap(),
                    2 => t.mul(xt, &y).unwrap(),
                    3 => t.maximum(xt, &y).unwrap(),
                    4 => t.scale(xt, 2.5).unwrap(),
                    5 => t.add_scaled(&y, xt, 0.05).unwrap(),
                    6 => t.lincomb(&[xt.clone(), y.clone()], &[0.75, 0.25]).unwrap(),
                    7 => t.exp(xt).unwrap(),
                    8 => t.maximum_scalar(xt, 0.0).unwrap(),
                    9 => t.reshape(xt, vec![6]).unwrap(),
                    10 => t
                        .pad_spatial(&t.reshape(xt, vec![1, 1, 2, 3]).unwrap(), 1)
                        .unwrap(),
                    11 => t
                        .slice_spatial(&t.reshape(xt, vec![1, 1, 2, 3]).unwrap(), 0, 1, 2, 2)
                        .unwrap(),
                    12 => t.softmax(xt).unwrap(),
                    _ => unreachable!(),
                };
                // weigh elements unevenly so reductions do not mask errors
                let wts: Vec<f64> = (0..out.numel()).map(|i| 0.3 + 0.1 * i as f64).collect();
                let wt = Tensor::from_vec(out.shape().to_vec(), wts).unwrap();
                t.reduce_sum(&t.mul(&out, &wt).unwrap()).unwrap().item()
            };
            let analytic = {
                let t = Tape::new();
                let out = match kind {
                    0 => t.add(&x, &y).unwrap(),
                    1 => t.sub(&y, &x).unwrap(),
                    2 => t.mul(&x, &y).unwrap(),
                    3 => t.maximum(&x, &y).unwrap(),
                    4 => t.scale(&x, 2.5).unwrap(),
                    5 => t.add_scaled(&y, &x, 0.05).unwrap(),
                    6 => t.lincomb(&[x.clone(), y.clone()], &[0.75, 0.25]).unwrap(),
                    7 => t.exp(&x).unwrap(),
                    8 => t.maximum_scalar(&x, 0.0).unwrap(),
                    9 => t.reshape(&x, vec![6]).unwrap(),
                    10 => t
                        .pad_spatial(&t.reshape(&x, vec![1, 1, 2, 3]).unwrap(), 1)
                        .unwrap(),
                    11 => t
                        .slice_spatial(&t.reshape(&x, vec![1, 1, 2, 3]).unwrap(), 0, 1, 2, 2)
                        .unwrap(),
                    12 => t.softmax(&x).unwrap(),
                    _ => unreachable!(),
                };
                let wts: Vec<f64> = (0..out.numel()).map(|i| 0.3 + 0.1 * i as f64).collect();
                let wt = Tensor::from_vec(out.shape().to_vec(), wts).unwrap();
                let loss = t.reduce_sum(&t.mul(&out, &wt).unwrap()).unwrap();
                x.zero_grad();
                t.backward(&loss).unwrap();
                x.grad().unwrap()
            };
            let numeric = finite_difference_grad(&mut |v| Ok(f(v)), &x, eps).unwrap();
            for (i, (&a, &n)) in analytic.iter().zip(numeric.iter()).enumerate() {
                let denom = a.abs().max(n.abs()).max(1e-6);
                assert!(
                    (a - n).abs() / denom < tol,
                    "seed {seed} kind {kind} coord {i}: analytic {a} vs fd {n}"
                );
            }
        }
    }

    #[test]
    fn backward_is_linear_in_the_loss() {
        // grad(a*f + b*g) == a*grad(f) + b*grad(g) to 1e-12
        let mut rng = ChaCha12Rng::seed_from_u64(42);
        for _ in 0..20 {
            let x = randn(&mut rng, vec![4]);
            let (a, b) = (
                rng.random::<f64>() * 2.0 - 1.0,
                rng.random::<f64>() * 2.0 - 1.0,
            );

            let grad_f = {
                let t = Tape::new();
                let loss = t.reduce_sum(&t.mul(&x, &x).unwrap()).unwrap();
                x.zero_grad();
                t.backward(&loss).unwrap();
                x.grad().unwrap()
            };
            let grad_g = {
                let t = Tape::new();
                let loss = t.reduce_sum(&t.exp(&x).unwrap()).unwrap();
                x.zero_grad();
                t.backward(&loss).unwrap();
                x.grad().unwrap()
            };
            let grad_combo = {
                let t = Tape::new();
                let f = t.reduce_sum(&t.mul(&x, &x).unwrap()).unwrap();
                let g = t.reduce_sum(&t.exp(&x).unwrap()).unwrap();
                let combo = t
                    .add(&t.scale(&f, a).unwrap(), &t.scale(&g, b).unwrap())
                    .unwrap();
                x.zero_grad();
                t.backward(&combo).unwrap();
                x.grad().unwrap()
            };
            for i in 0..4 {
                let expect = a * grad_f[i] + b * grad_g[i];
                assert!((grad_combo[i] - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn forward_is_bit_deterministic() {
        let run = || {
            let mut rng = ChaCha12Rng::seed_from_u64(9);
            let t = Tape::new();
            let x = randn(&mut rng, vec![2, 2, 4, 4]);
            let k = randn(&mut rng, vec![3, 2, 3, 3]);
            let y = t.conv2d(&x, &k, None, 1, 1).unwrap();
            let s = t.softmax(&t.global_avg_pool(&y).unwrap()).unwrap();
            s.to_vec()
        };
        let a = run();
        let b = run();
        assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn conv2d_one_by_one_identity_kernel() {
        let t = Tape::new();
        let x = Tensor::from_vec(vec![1, 1, 2, 2], vec![1.0f64, 2.0, 3.0, 4.0]).unwrap();
        let k = Tensor::from_vec(vec![1, 1, 1, 1], vec![1.0]).unwrap();
        let y = t.conv2d(&x, &k, None, 1, 0).unwrap();
        assert_eq!(y.to_vec(), x.to_vec());
    }

    #[test]
    fn conv2d_all_ones_kernel_on_centered_impulse() {
        // 3x3 ones kernel, pad 1, single centered 1 in a 3x3 field -> all ones.
        let t = Tape::new();
        let mut img = vec![0.0f64; 9];
        img[4] = 1.0;
        let x = Tensor::from_vec(vec![1, 1, 3, 3], img).unwrap();
        let k = Tensor::from_vec(vec![1, 1, 3, 3], vec![1.0; 9]).unwrap();
        let y = t.conv2d(&x, &k, None, 1, 1).unwrap();
        assert_eq!(y.to_vec(), vec![1.0; 9]);
    }

    #[test]
    fn conv2d_grads_match_finite_differences() {
        let eps = 1e-4;
        for seed in 0..50u64 {
            let mut rng = ChaCha12Rng::seed_from_u64(1000 + seed);
            let x = randn(&mut rng, vec![2, 2, 4, 4]);
            let k = randn(&mut rng, vec![3, 2, 3, 3]);
            let b = randn(&mut rng, vec![3]);
            let (stride, pad) = if seed % 2 == 0 { (1, 1) } else { (2, 1) };

            let loss_fn = |xs: &Tensor<f64>, ks: &Tensor<f64>, bs: &Tensor<f64>| -> f64 {
                let t = Tape::inference();
                let y = t.conv2d(xs, ks, Some(bs), stride, pad).unwrap();
                let wts: Vec<f64> = (0..y.numel())
                    .map(|i| ((i % 7) as f64) * 0.1 - 0.3)
                    .collect();
                let w = Tensor::from_vec(y.shape().to_vec(), wts).unwrap();
                t.reduce_sum(&t.mul(&y, &w).unwrap()).unwrap().item()
            };

            let t = Tape::new();
            let y = t.conv2d(&x, &k, Some(&b), stride, pad).unwrap();
            let wts: Vec<f64> = (0..y.numel())
                .map(|i| ((i % 7) as f64) * 0.1 - 0.3)
                .collect();
            let w = Tensor::from_vec(y.shape().to_vec(), wts).unwrap();
            let loss = t.reduce_sum(&t.mul(&y, &w).unwrap()).unwrap();
            for p in [&x, &k, &b] {
                p.zero_grad();
            }
            t.backward(&loss).unwrap();

            for (name, p, fd_fn) in [
                (
                    "x",
                    &x,
                    Box::new(|v: &Tensor<f64>| Ok(loss_fn(v, &k, &b)))
                        as Box<dyn FnMut(&Tensor<f64>) -> crate::error::Result<f64>>,
                ),
                ("k", &k, Box::new(|v: &Tensor<f64>| Ok(loss_fn(&x, v, &b)))),
                ("b", &b, Box::new(|v: &Tensor<f64>| Ok(loss_fn(&x, &k, v)))),
            ] {
                let mut fd_fn = fd_fn;
                let numeric = finite_difference_grad(&mut *fd_fn, p, eps).unwrap();
                let analytic = p.grad().unwrap();
                for i in 0..numeric.len() {
                    let denom = analytic[i].abs().max(numeric[i].abs()).max(1e-6);
                    assert!(
                        (analytic[i] - numeric[i]).abs() / denom < 1e-5,
                        "seed {seed} {name}[{i}]: {} vs {}",
                        analytic[i],
                        numeric[i]
                    );
                }
            }
        }
    }

    #[test]
    fn cross_entropy_uniform_logits_is_ln10() {
        let t = Tape::new();
        let logits = Tensor::<f64>::zeros(vec![4, 10]);
        let loss = t.cross_entropy(&logits, &[0, 3, 5, 9]).unwrap();
        assert!((loss.item() - 10.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_matches_per_sample_oracle() {
        // Direct per-sample computation, unstabilized, against the op.
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let n = 5;
        let k = 10;
        let data: Vec<f64> = (0..n * k)
            .map(|_| rng.random::<f64>() * 4.0 - 2.0)
            .collect();
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
        let mut oracle = 0.0;
        for r in 0..n {
            let row = &data[r * k..(r + 1) * k];
            let z: f64 = row.iter().map(|v| v.exp()).sum();
            oracle += -(row[labels[r]].exp() / z).ln();
        }
        oracle /= n as f64;
        let t = Tape::new();
        let logits = Tensor::from_vec(vec![n, k], data).unwrap();
        let loss = t.cross_entropy(&logits, &labels).unwrap();
        assert!((loss.item() - oracle).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_label_out_of_range() {
        let t = Tape::new();
        let logits = Tensor::<f64>::zeros(vec![1, 10]);
        assert!(t.cross_entropy(&logits, &[10]).is_err());
    }

    #[test]
    fn cross_entropy_and_group_norm_grads_match_fd() {
        let eps = 1e-4;
        for seed in 0..50u64 {
            let mut rng = ChaCha12Rng::seed_from_u64(500 + seed);
            let x = randn(&mut rng, vec![2, 4, 3, 3]);
            let gamma = randn(&mut rng, vec![4]);
            let beta = randn(&mut rng, vec![4]);
            let labels = vec![seed as usize % 4, (seed as usize + 2) % 4];
            let groups = if seed % 2 == 0 { 2 } else { 4 };

            let loss_fn = |xs: &Tensor<f64>, gs: &Tensor<f64>, bs: &Tensor<f64>| -> f64 {
                let t = Tape::inference();
                let y = t.group_norm(xs, gs, bs, groups, 1e-5).unwrap();
                let pooled = t.global_avg_pool(&y).unwrap();
                t.cross_entropy(&pooled, &labels).unwrap().item()
            };

            let t = Tape::new();
            let y = t.group_norm(&x, &gamma, &beta, groups, 1e-5).unwrap();
            let pooled = t.global_avg_pool(&y).unwrap();
            let loss = t.cross_entropy(&pooled, &labels).unwrap();
            for p in [&x, &gamma, &beta] {
                p.zero_grad();
            }
            t.backward(&loss).unwrap();

            for (name, p, mut fd_fn) in [
                (
                    "x",
                    &x,
                    Box::new(|v: &Tensor<f64>| Ok(loss_fn(v, &gamma, &beta)))
                        as Box<dyn FnMut(&Tensor<f64>) -> crate::error::Result<f64>>,
                ),
                (
                    "gamma",
                    &gamma,
                    Box::new(|v: &Tensor<f64>| Ok(loss_fn(&x, v, &beta))),
                ),
                (
                    "beta",
                    &beta,
                    Box::new(|v: &Tensor<f64>| Ok(loss_fn(&x, &gamma, v))),
                ),
            ] {
                let numeric = finite_difference_grad(&mut *fd_fn, p, eps).unwrap();
                let analytic = p.grad().unwrap();
                for i in 0..numeric.len() {
                    let denom = analytic[i].abs().max(numeric[i].abs()).max(1e-6);
                    assert!(
                        (analytic[i] - numeric[i]).abs() / denom < 1e-5,
                        "seed {seed} {name}[{i}]: {} vs {}",
                        analytic[i],
                        numeric[i]
                    );
                }
            }
        }
    }

    #[test]
    fn matmul_and_concat_grads_match_fd() {
        let eps = 1e-4;
        for seed in 0..30u64 {
            let mut rng = ChaCha12Rng::seed_from_u64(9000 + seed);
            let a = randn(&mut rng, vec![3, 4]);
            let b = randn(&mut rng, vec![4, 2]);
            let loss_fn = |av: &Tensor<f64>, bv: &Tensor<f64>| -> f64 {
                let t = Tape::inference();
                let y = t.matmul(av, bv).unwrap();
                let wts: Vec<f64> = (0..y.numel()).map(|i| 0.2 * i as f64 - 0.5).collect();
                let w = Tensor::from_vec(y.shape().to_vec(), wts).unwrap();
                t.reduce_sum(&t.mul(&y, &w).unwrap()).unwrap().item()
            };
            let t = Tape::new();
            let y = t.matmul(&a, &b).unwrap();
            let wts: Vec<f64> = (0..y.numel()).map(|i| 0.2 * i as f64 - 0.5).collect();
            let w = Tensor::from_vec(y.shape().to_vec(), wts).unwrap();
            let loss = t.reduce_sum(&t.mul(&y, &w).unwrap()).unwrap();
            a.zero_grad();
            b.zero_grad();
            t.backward(&loss).unwrap();
            let fd_a = finite_difference_grad(&mut |v| Ok(loss_fn(v, &b)), &a, eps).unwrap();
            let fd_b = finite_difference_grad(&mut |v| Ok(loss_fn(&a, v)), &b, eps).unwrap();
            for (an, nu) in a.grad().unwrap().iter().zip(&fd_a) {
                assert!((an - nu).abs() / an.abs().max(nu.abs()).max(1e-6) < 1e-5);
            }
            for (an, nu) in b.grad().unwrap().iter().zip(&fd_b) {
                assert!((an - nu).abs() / an.abs().max(nu.abs()).max(1e-6) < 1e-5);
            }
        }
    }
}
