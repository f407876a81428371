//! Reverse-mode differentiation over a fixed op set.
//!
//! A [`Tape`] owns every value computed through it. Ops append a node that
//! records its operands and whatever the backward rule needs; [`Tape::backward`]
//! walks the nodes in strict reverse creation order. Only nodes downstream of
//! a leaf created with `requires_grad` receive gradients.

mod gradcheck;

use std::cell::RefCell;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

pub use gradcheck::{central_difference, grad_check, max_relative_error, op_suite, probe, GradCheckReport, OpCheck, OP_TOLERANCE};

use crate::kernels::{self, ConvGeom};
use crate::pipeline::resize::{cubic_taps, CubicTaps};
use crate::ssm::{Discretization, ScanGrads, ScanView};
use crate::tensor::{Element, Result, Tensor, TensorError};
use crate::traj::Trajectory;

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a value on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    index: usize,
}

impl Var {
    pub fn index(&self) -> usize {
        self.index
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Unary {
    Silu,
    Gelu,
    Sigmoid,
    Softplus,
    Exp,
}

enum Op<T> {
    Leaf,
    Add(usize, usize),
    Mul(usize, usize),
    Scale(usize, T),
    Unary(usize, Unary),
    Linear {
        x: usize,
        w: usize,
        b: Option<usize>,
    },
    Conv2d {
        x: usize,
        w: usize,
        b: Option<usize>,
        geom: ConvGeom,
    },
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        mean: Vec<T>,
        rstd: Vec<T>,
    },
    GlobalAvgPool(usize),
    ChannelScale {
        x: usize,
        s: usize,
    },
    PixelShuffle {
        x: usize,
        r: usize,
    },
    SelectRows {
        x: usize,
        idx: Rc<[usize]>,
    },
    ConcatRows(usize, usize),
    NarrowLast {
        x: usize,
        start: usize,
    },
    NchwToTokens(usize),
    TokensToNchw(usize),
    Remap {
        x: usize,
        rows: Vec<usize>,
        cols: Vec<usize>,
    },
    Resize {
        x: usize,
        rows: Vec<CubicTaps>,
        cols: Vec<CubicTaps>,
    },
    L1(usize, usize),
    Sum(usize),
    Scan {
        u: usize,
        delta: usize,
        b: usize,
        c: usize,
        a_log: usize,
        d: usize,
        mode: Discretization,
    },
}

struct Node<T> {
    value: Rc<Tensor<T>>,
    op: Op<T>,
    requires_grad: bool,
}

struct Inner<T> {
    nodes: Vec<Node<T>>,
    backward_done: bool,
    scan_calls: usize,
}

/// Recording of one forward computation.
pub struct Tape<T: Element> {
    id: u64,
    inner: RefCell<Inner<T>>,
}

impl<T: Element> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Per-node gradients produced by [`Tape::backward`].
pub struct Gradients<T> {
    tape: u64,
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Element> Gradients<T> {
    /// Gradient of the loss with respect to `v`, if `v` requires one and is
    /// reachable from the loss.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        if v.tape != self.tape {
            return None;
        }
        self.grads.get(v.index).and_then(|g| g.as_ref())
    }
}

fn dims4(op: &'static str, s: &[usize]) -> Result<(usize, usize, usize, usize)> {
    match *s {
        [n, c, h, w] => Ok((n, c, h, w)),
        _ => Err(TensorError::shape(op, format!("expected NCHW, got {s:?}"))),
    }
}

fn dims3(op: &'static str, s: &[usize]) -> Result<(usize, usize, usize)> {
    match *s {
        [n, l, d] => Ok((n, l, d)),
        _ => Err(TensorError::shape(op, format!("expected [N, L, D], got {s:?}"))),
    }
}

fn add_into<T: Element>(dst: &mut [T], src: &[T]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d = *d + *s;
    }
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Tape {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            inner: RefCell::new(Inner {
                nodes: Vec::new(),
                backward_done: false,
                scan_calls: 0,
            }),
        }
    }

    fn check(&self, v: Var) -> Result<usize> {
        if v.tape != self.id {
            return Err(TensorError::ForeignVar);
        }
        Ok(v.index)
    }

    fn push(&self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        let mut inner = self.inner.borrow_mut();
        let index = inner.nodes.len();
        inner.nodes.push(Node {
            value: Rc::new(value),
            op,
            requires_grad,
        });
        Var { tape: self.id, index }
    }

    fn get(&self, v: Var) -> Result<(Rc<Tensor<T>>, bool)> {
        let i = self.check(v)?;
        let inner = self.inner.borrow();
        let n = &inner.nodes[i];
        Ok((n.value.clone(), n.requires_grad))
    }

    /// Constant input; no gradient is tracked for it.
    pub fn constant(&self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Leaf whose gradient is wanted.
    pub fn leaf(&self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> Result<Rc<Tensor<T>>> {
        Ok(self.get(v)?.0)
    }

    pub fn shape(&self, v: Var) -> Result<Vec<usize>> {
        Ok(self.get(v)?.0.shape().to_vec())
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Number of selective scans recorded so far.
    pub fn scan_calls(&self) -> usize {
        self.inner.borrow().scan_calls
    }

    fn binary_broadcast(&self, op: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Result<(Tensor<T>, bool)> {
        let (x, gx) = self.get(a)?;
        let (y, gy) = self.get(b)?;
        let out = if x.shape() == y.shape() {
            let data = x.data().iter().zip(y.data()).map(|(&p, &q)| f(p, q)).collect();
            Tensor::new(x.shape().to_vec(), data)?
        } else if y.numel() == 1 {
            let q = y.data()[0];
            x.map(|p| f(p, q))
        } else if x.numel() == 1 {
            let p = x.data()[0];
            y.map(|q| f(p, q))
        } else {
            return Err(TensorError::shape(op, format!("{:?} vs {:?}", x.shape(), y.shape())));
        };
        Ok((out, gx || gy))
    }

    /// Elementwise sum; operands share a shape or one is a single element.
    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        let (out, g) = self.binary_broadcast("add", a, b, |p, q| p + q)?;
        Ok(self.push(out, Op::Add(a.index, b.index), g))
    }

    /// Elementwise product; operands share a shape or one is a single element.
    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        let (out, g) = self.binary_broadcast("mul", a, b, |p, q| p * q)?;
        Ok(self.push(out, Op::Mul(a.index, b.index), g))
    }

    pub fn scale(&self, a: Var, c: f64) -> Result<Var> {
        let (x, g) = self.get(a)?;
        let c = T::from_f64_lossy(c);
        Ok(self.push(x.map(|v| v * c), Op::Scale(a.index, c), g))
    }

    fn unary(&self, a: Var, kind: Unary) -> Result<Var> {
        let (x, g) = self.get(a)?;
        let out = match kind {
            Unary::Silu => x.map(kernels::silu),
            Unary::Gelu => x.map(kernels::gelu),
            Unary::Sigmoid => x.map(kernels::sigmoid),
            Unary::Softplus => x.map(kernels::softplus),
            Unary::Exp => x.map(|v| v.exp()),
        };
        Ok(self.push(out, Op::Unary(a.index, kind), g))
    }

    pub fn silu(&self, a: Var) -> Result<Var> {
        self.unary(a, Unary::Silu)
    }

    pub fn gelu(&self, a: Var) -> Result<Var> {
        self.unary(a, Unary::Gelu)
    }

    pub fn sigmoid(&self, a: Var) -> Result<Var> {
        self.unary(a, Unary::Sigmoid)
    }

    pub fn softplus(&self, a: Var) -> Result<Var> {
        self.unary(a, Unary::Softplus)
    }

    pub fn exp(&self, a: Var) -> Result<Var> {
        self.unary(a, Unary::Exp)
    }

    /// Affine map over the last axis: `x[..., I] · wᵀ + b` with `w` of shape `O × I`.
    pub fn linear(&self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (xv, gx) = self.get(x)?;
        let (wv, gw) = self.get(w)?;
        let (o, i) = match *wv.shape() {
            [o, i] => (o, i),
            ref s => return Err(TensorError::shape("linear", format!("weight must be O×I, got {s:?}"))),
        };
        let last = xv.shape().last().copied().unwrap_or(0);
        if xv.rank() == 0 || last != i {
            return Err(TensorError::shape(
                "linear",
                format!("input {:?} inner dimension != weight {:?}", xv.shape(), wv.shape()),
            ));
        }
        let m = xv.numel() / i;
        let mut out = vec![T::zero(); m * o];
        kernels::gemm(m, i, o, T::one(), xv.data(), false, wv.data(), true, T::zero(), &mut out);
        let mut g = gx || gw;
        if let Some(b) = b {
            let (bv, gb) = self.get(b)?;
            if bv.shape() != [o] {
                return Err(TensorError::shape("linear", format!("bias {:?} vs {o} outputs", bv.shape())));
            }
            for row in out.chunks_mut(o) {
                add_into(row, bv.data());
            }
            g |= gb;
        }
        let mut shape = xv.shape().to_vec();
        *shape.last_mut().expect("rank >= 1") = o;
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::Linear {
                x: x.index,
                w: w.index,
                b: b.map(|b| b.index),
            },
            g,
        ))
    }

    /// Stride-1 cross-correlation. `x` is NCHW, `w` is `O × (C/groups) × K × K`.
    pub fn conv2d(&self, x: Var, w: Var, b: Option<Var>, pad: usize, groups: usize) -> Result<Var> {
        let (xv, gx) = self.get(x)?;
        let (wv, gw) = self.get(w)?;
        let (n, c, h, wd) = dims4("conv2d", xv.shape())?;
        let (o, ci, kh, kw) = dims4("conv2d", wv.shape())?;
        if kh != kw || kh % 2 == 0 {
            return Err(TensorError::shape("conv2d", format!("kernel must be square and odd, got {kh}x{kw}")));
        }
        if groups == 0 || ci * groups != c || o % groups != 0 {
            return Err(TensorError::shape(
                "conv2d",
                format!("input channels {c} vs weight in-channels {ci} x groups {groups}, out {o}"),
            ));
        }
        if h + 2 * pad < kh || wd + 2 * pad < kw {
            return Err(TensorError::shape("conv2d", format!("spatial {h}x{wd} smaller than kernel {kh}")));
        }
        if x == w || b.is_some_and(|b| b == x || b == w) {
            return Err(TensorError::Domain {
                op: "conv2d",
                detail: "operands must be distinct tape values".into(),
            });
        }
        let geom = ConvGeom {
            in_c: c,
            out_c: o,
            h,
            w: wd,
            k: kh,
            pad,
            groups,
        };
        let mut g = gx || gw;
        let bias = match b {
            Some(b) => {
                let (bv, gb) = self.get(b)?;
                if bv.shape() != [o] {
                    return Err(TensorError::shape("conv2d", format!("bias {:?} vs {o} outputs", bv.shape())));
                }
                g |= gb;
                Some(bv)
            }
            None => None,
        };
        let (oh, ow) = (geom.out_h(), geom.out_w());
        let mut out = vec![T::zero(); n * o * oh * ow];
        for (img, dst) in xv.data().chunks(c * h * wd).zip(out.chunks_mut(o * oh * ow)) {
            kernels::conv2d_forward(img, wv.data(), bias.as_deref().map(|t| t.data()), &geom, dst);
        }
        Ok(self.push(
            Tensor::new(vec![n, o, oh, ow], out)?,
            Op::Conv2d {
                x: x.index,
                w: w.index,
                b: b.map(|b| b.index),
                geom,
            },
            g,
        ))
    }

    /// Standardizes over the last axis then applies `gamma`, `beta`.
    pub fn layer_norm(&self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (xv, gx) = self.get(x)?;
        let (gv, gg) = self.get(gamma)?;
        let (bv, gb) = self.get(beta)?;
        let c = xv.shape().last().copied().unwrap_or(0);
        if c == 0 || gv.shape() != [c] || bv.shape() != [c] {
            return Err(TensorError::shape(
                "layer_norm",
                format!("channels {c} vs gamma {:?} / beta {:?}", gv.shape(), bv.shape()),
            ));
        }
        let rows = xv.numel() / c;
        let eps = T::from_f64_lossy(eps);
        let cn = T::from_usize(c).expect("channel count fits");
        let mut mean = Vec::with_capacity(rows);
        let mut rstd = Vec::with_capacity(rows);
        let mut out = vec![T::zero(); xv.numel()];
        for (row, dst) in xv.data().chunks(c).zip(out.chunks_mut(c)) {
            let mu = row.iter().copied().sum::<T>() / cn;
            let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<T>() / cn;
            let rs = T::one() / (var + eps).sqrt();
            for (k, d) in dst.iter_mut().enumerate() {
                *d = (row[k] - mu) * rs * gv.data()[k] + bv.data()[k];
            }
            mean.push(mu);
            rstd.push(rs);
        }
        Ok(self.push(
            Tensor::new(xv.shape().to_vec(), out)?,
            Op::LayerNorm {
                x: x.index,
                gamma: gamma.index,
                beta: beta.index,
                mean,
                rstd,
            },
            gx || gg || gb,
        ))
    }

    /// NCHW → NC11 spatial mean.
    pub fn global_avg_pool(&self, x: Var) -> Result<Var> {
        let (xv, g) = self.get(x)?;
        let (n, c, h, w) = dims4("global_avg_pool", xv.shape())?;
        let hw = T::from_usize(h * w).expect("fits");
        let out = xv.data().chunks(h * w).map(|p| p.iter().copied().sum::<T>() / hw).collect();
        Ok(self.push(Tensor::new(vec![n, c, 1, 1], out)?, Op::GlobalAvgPool(x.index), g))
    }

    /// Multiplies each NCHW plane by the matching NC11 entry of `s`.
    pub fn channel_scale(&self, x: Var, s: Var) -> Result<Var> {
        let (xv, gx) = self.get(x)?;
        let (sv, gs) = self.get(s)?;
        let (n, c, h, w) = dims4("channel_scale", xv.shape())?;
        if sv.shape() != [n, c, 1, 1] {
            return Err(TensorError::shape("channel_scale", format!("scale {:?} vs input {:?}", sv.shape(), xv.shape())));
        }
        let mut out = xv.data().to_vec();
        for (plane, &f) in out.chunks_mut(h * w).zip(sv.data()) {
            plane.iter_mut().for_each(|v| *v = *v * f);
        }
        Ok(self.push(
            Tensor::new(xv.shape().to_vec(), out)?,
            Op::ChannelScale { x: x.index, s: s.index },
            gx || gs,
        ))
    }

    /// `N,(C·r²),H,W → N,C,(H·r),(W·r)`.
    pub fn pixel_shuffle(&self, x: Var, r: usize) -> Result<Var> {
        let (xv, g) = self.get(x)?;
        let (n, c, h, w) = dims4("pixel_shuffle", xv.shape())?;
        if r == 0 || c % (r * r) != 0 {
            return Err(TensorError::shape("pixel_shuffle", format!("{c} channels not divisible by {r}²")));
        }
        let co = c / (r * r);
        let mut out = vec![T::zero(); xv.numel()];
        for (src, dst) in xv.data().chunks(c * h * w).zip(out.chunks_mut(c * h * w)) {
            kernels::pixel_shuffle(src, co, h, w, r, dst);
        }
        Ok(self.push(
            Tensor::new(vec![n, co, h * r, w * r], out)?,
            Op::PixelShuffle { x: x.index, r },
            g,
        ))
    }

    /// `out[n, k, :] = x[n, idx[k], :]` for an `[N, L, D]` token tensor.
    /// Indices may repeat or omit rows; the backward pass scatter-adds.
    pub fn select_rows(&self, x: Var, idx: Rc<[usize]>) -> Result<Var> {
        let (xv, g) = self.get(x)?;
        let (n, l, d) = dims3("select_rows", xv.shape())?;
        if let Some(&bad) = idx.iter().find(|&&i| i >= l) {
            return Err(TensorError::shape("select_rows", format!("index {bad} out of range for {l} rows")));
        }
        let mut out = Vec::with_capacity(n * idx.len() * d);
        for seq in xv.data().chunks(l * d) {
            for &i in idx.iter() {
                out.extend_from_slice(&seq[i * d..(i + 1) * d]);
            }
        }
        let k = idx.len();
        Ok(self.push(Tensor::new(vec![n, k, d], out)?, Op::SelectRows { x: x.index, idx }, g))
    }

    /// Reorders tokens along a trajectory: `out[k] = x[perm[k]]`.
    pub fn gather_tokens(&self, x: Var, t: &Trajectory) -> Result<Var> {
        self.check_traj_len(x, t)?;
        self.select_rows(x, t.perm().into())
    }

    /// Inverse of [`Tape::gather_tokens`].
    pub fn scatter_tokens(&self, x: Var, t: &Trajectory) -> Result<Var> {
        self.check_traj_len(x, t)?;
        self.select_rows(x, t.inv_perm().into())
    }

    fn check_traj_len(&self, x: Var, t: &Trajectory) -> Result<()> {
        let s = self.shape(x)?;
        let (_, l, _) = dims3("gather_tokens", &s)?;
        if l != t.len() {
            return Err(TensorError::shape(
                "gather_tokens",
                format!("trajectory covers {} tokens, sequence has {l}", t.len()),
            ));
        }
        Ok(())
    }

    /// Concatenates two `[N, L, D]` tensors along the token axis.
    pub fn concat_rows(&self, a: Var, b: Var) -> Result<Var> {
        let (av, ga) = self.get(a)?;
        let (bv, gb) = self.get(b)?;
        let (n, la, d) = dims3("concat_rows", av.shape())?;
        let (nb, lb, db) = dims3("concat_rows", bv.shape())?;
        if n != nb || d != db {
            return Err(TensorError::shape("concat_rows", format!("{:?} vs {:?}", av.shape(), bv.shape())));
        }
        let mut out = Vec::with_capacity(n * (la + lb) * d);
        for (sa, sb) in av.data().chunks(la * d).zip(bv.data().chunks(lb * d)) {
            out.extend_from_slice(sa);
            out.extend_from_slice(sb);
        }
        Ok(self.push(
            Tensor::new(vec![n, la + lb, d], out)?,
            Op::ConcatRows(a.index, b.index),
            ga || gb,
        ))
    }

    /// `x[..., start..start+len]`.
    pub fn narrow_last(&self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (xv, g) = self.get(x)?;
        let d = xv.shape().last().copied().unwrap_or(0);
        if start + len > d {
            return Err(TensorError::shape("narrow_last", format!("{start}+{len} exceeds last extent {d}")));
        }
        let mut out = Vec::with_capacity(xv.numel() / d.max(1) * len);
        for row in xv.data().chunks(d) {
            out.extend_from_slice(&row[start..start + len]);
        }
        let mut shape = xv.shape().to_vec();
        *shape.last_mut().expect("rank >= 1") = len;
        Ok(self.push(Tensor::new(shape, out)?, Op::NarrowLast { x: x.index, start }, g))
    }

    /// `[N, C, H, W] → [N, H·W, C]`.
    pub fn nchw_to_tokens(&self, x: Var) -> Result<Var> {
        let (xv, g) = self.get(x)?;
        let (n, c, h, w) = dims4("nchw_to_tokens", xv.shape())?;
        let out = transpose_blocks(xv.data(), n, c, h * w);
        Ok(self.push(Tensor::new(vec![n, h * w, c], out)?, Op::NchwToTokens(x.index), g))
    }

    /// `[N, H·W, C] → [N, C, H, W]`.
    pub fn tokens_to_nchw(&self, x: Var, h: usize, w: usize) -> Result<Var> {
        let (xv, g) = self.get(x)?;
        let (n, l, c) = dims3("tokens_to_nchw", xv.shape())?;
        if l != h * w {
            return Err(TensorError::shape("tokens_to_nchw", format!("{l} tokens cannot form {h}x{w}")));
        }
        let out = transpose_blocks(xv.data(), n, l, c);
        Ok(self.push(Tensor::new(vec![n, c, h, w], out)?, Op::TokensToNchw(x.index), g))
    }

    /// Spatial gather: `out[.., y, x] = in[.., rows[y], cols[x]]`.
    fn remap(&self, x: Var, rows: Vec<usize>, cols: Vec<usize>) -> Result<Var> {
        let (xv, g) = self.get(x)?;
        let (n, c, h, w) = dims4("remap", xv.shape())?;
        debug_assert!(rows.iter().all(|&r| r < h) && cols.iter().all(|&c| c < w));
        let (oh, ow) = (rows.len(), cols.len());
        let mut out = Vec::with_capacity(n * c * oh * ow);
        for plane in xv.data().chunks(h * w) {
            for &r in &rows {
                out.extend(cols.iter().map(|&cc| plane[r * w + cc]));
            }
        }
        Ok(self.push(Tensor::new(vec![n, c, oh, ow], out)?, Op::Remap { x: x.index, rows, cols }, g))
    }

    /// Reflection-pads the bottom and right edges of an NCHW tensor.
    pub fn pad_reflect(&self, x: Var, bottom: usize, right: usize) -> Result<Var> {
        let s = self.shape(x)?;
        let (_, _, h, w) = dims4("pad_reflect", &s)?;
        if (bottom > 0 && bottom >= h.max(2)) || (right > 0 && right >= w.max(2)) {
            return Err(TensorError::shape("pad_reflect", format!("padding ({bottom},{right}) too large for {h}x{w}")));
        }
        let reflect = |len: usize, i: usize| if i < len { i } else { 2 * (len - 1) - i };
        let rows = (0..h + bottom).map(|i| reflect(h, i)).collect();
        let cols = (0..w + right).map(|i| reflect(w, i)).collect();
        self.remap(x, rows, cols)
    }

    /// Keeps the top-left `h × w` region of an NCHW tensor.
    pub fn crop(&self, x: Var, h: usize, w: usize) -> Result<Var> {
        let s = self.shape(x)?;
        let (_, _, ih, iw) = dims4("crop", &s)?;
        if h > ih || w > iw {
            return Err(TensorError::shape("crop", format!("{h}x{w} exceeds {ih}x{iw}")));
        }
        self.remap(x, (0..h).collect(), (0..w).collect())
    }

    /// Bicubic resampling of NCHW planes to `out_h × out_w`.
    pub fn resize_bicubic(&self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let (xv, g) = self.get(x)?;
        let (n, c, h, w) = dims4("resize_bicubic", xv.shape())?;
        if out_h == 0 || out_w == 0 || h == 0 || w == 0 {
            return Err(TensorError::shape("resize_bicubic", format!("{h}x{w} → {out_h}x{out_w}")));
        }
        let rows = cubic_taps(h, out_h);
        let cols = cubic_taps(w, out_w);
        let mut out = vec![T::zero(); n * c * out_h * out_w];
        let mut tmp = vec![T::zero(); h * out_w];
        for (src, dst) in xv.data().chunks(h * w).zip(out.chunks_mut(out_h * out_w)) {
            for y in 0..h {
                for (ox, taps) in cols.iter().enumerate() {
                    tmp[y * out_w + ox] = taps
                        .iter()
                        .map(|&(i, wt)| T::from_f64_lossy(wt) * src[y * w + i])
                        .sum();
                }
            }
            for (oy, taps) in rows.iter().enumerate() {
                for ox in 0..out_w {
                    dst[oy * out_w + ox] = taps
                        .iter()
                        .map(|&(i, wt)| T::from_f64_lossy(wt) * tmp[i * out_w + ox])
                        .sum();
                }
            }
        }
        Ok(self.push(
            Tensor::new(vec![n, c, out_h, out_w], out)?,
            Op::Resize { x: x.index, rows, cols },
            g,
        ))
    }

    /// Mean absolute difference, rank-0 result.
    pub fn l1_loss(&self, a: Var, b: Var) -> Result<Var> {
        let (av, ga) = self.get(a)?;
        let (bv, gb) = self.get(b)?;
        if av.shape() != bv.shape() || av.numel() == 0 {
            return Err(TensorError::shape("l1_loss", format!("{:?} vs {:?}", av.shape(), bv.shape())));
        }
        let n = T::from_usize(av.numel()).expect("fits");
        let s = av.data().iter().zip(bv.data()).map(|(&p, &q)| (p - q).abs()).sum::<T>() / n;
        Ok(self.push(Tensor::scalar(s), Op::L1(a.index, b.index), ga || gb))
    }

    /// Sum of all elements, rank-0 result.
    pub fn sum(&self, x: Var) -> Result<Var> {
        let (xv, g) = self.get(x)?;
        let s = xv.data().iter().copied().sum::<T>();
        Ok(self.push(Tensor::scalar(s), Op::Sum(x.index), g))
    }

    /// Batched selective scan. `u`, `delta`: `[N, L, D]`; `b`, `c`: `[N, L, S]`;
    /// `a_log`: `[D, S]`; `d`: `[D]`.
    #[allow(clippy::too_many_arguments)]
    pub fn selective_scan(&self, u: Var, delta: Var, b: Var, c: Var, a_log: Var, d: Var, mode: Discretization) -> Result<Var> {
        let (uv, gu) = self.get(u)?;
        let (dv, gdl) = self.get(delta)?;
        let (bv, gb) = self.get(b)?;
        let (cv, gc) = self.get(c)?;
        let (av, ga) = self.get(a_log)?;
        let (ddv, gd) = self.get(d)?;
        let (n, l, din) = dims3("selective_scan", uv.shape())?;
        let ds = bv.shape().last().copied().unwrap_or(0);
        let mismatch = |what: &str, got: &[usize], want: &[usize]| {
            TensorError::shape("selective_scan", format!("{what} {got:?}, expected {want:?}"))
        };
        if dv.shape() != uv.shape() {
            return Err(mismatch("delta", dv.shape(), uv.shape()));
        }
        if bv.shape() != [n, l, ds] {
            return Err(mismatch("b", bv.shape(), &[n, l, ds]));
        }
        if cv.shape() != [n, l, ds] {
            return Err(mismatch("c", cv.shape(), &[n, l, ds]));
        }
        if av.shape() != [din, ds] {
            return Err(mismatch("a_log", av.shape(), &[din, ds]));
        }
        if ddv.shape() != [din] {
            return Err(mismatch("d", ddv.shape(), &[din]));
        }
        let ids = [u.index, delta.index, b.index, c.index, a_log.index, d.index];
        if (1..ids.len()).any(|i| ids[..i].contains(&ids[i])) {
            return Err(TensorError::Domain {
                op: "selective_scan",
                detail: "operands must be distinct tape values".into(),
            });
        }
        if let Some(bad) = dv.data().iter().find(|v| !(**v > T::zero())) {
            return Err(TensorError::Domain {
                op: "selective_scan",
                detail: format!("step size must be positive, found {bad}"),
            });
        }
        let a: Vec<T> = av.data().iter().map(|v| -v.exp()).collect();
        let mut y = vec![T::zero(); uv.numel()];
        for i in 0..n {
            let view = ScanView {
                len: l,
                din,
                ds,
                u: &uv.data()[i * l * din..(i + 1) * l * din],
                delta: &dv.data()[i * l * din..(i + 1) * l * din],
                b: &bv.data()[i * l * ds..(i + 1) * l * ds],
                c: &cv.data()[i * l * ds..(i + 1) * l * ds],
                a: &a,
                d: ddv.data(),
                mode,
            };
            view.forward(&mut y[i * l * din..(i + 1) * l * din], None);
        }
        self.inner.borrow_mut().scan_calls += 1;
        Ok(self.push(
            Tensor::new(uv.shape().to_vec(), y)?,
            Op::Scan {
                u: u.index,
                delta: delta.index,
                b: b.index,
                c: c.index,
                a_log: a_log.index,
                d: d.index,
                mode,
            },
            gu || gdl || gb || gc || ga || gd,
        ))
    }

    /// Accumulates `d loss / d v` for every tracked node. `loss` must hold a
    /// single element; a tape supports one backward pass.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let li = self.check(loss)?;
        {
            let mut inner = self.inner.borrow_mut();
            if inner.backward_done {
                return Err(TensorError::BackwardAlreadyRun);
            }
            let shape = inner.nodes[li].value.shape().to_vec();
            if inner.nodes[li].value.numel() != 1 {
                return Err(TensorError::NonScalarLoss(shape));
            }
            inner.backward_done = true;
        }
        let inner = self.inner.borrow();
        let nodes = &inner.nodes;
        let mut grads: Vec<Option<Vec<T>>> = Vec::new();
        grads.resize_with(li + 1, || None);
        if nodes[li].requires_grad {
            grads[li] = Some(vec![T::one()]);
        }
        for i in (0..=li).rev() {
            let Some(gy) = grads[i].take() else { continue };
            backward_node(nodes, i, &gy, &mut grads);
            grads[i] = Some(gy);
        }
        let grads = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| g.map(|g| Tensor::new(nodes[i].value.shape().to_vec(), g).expect("gradient shape")))
            .collect();
        Ok(Gradients { tape: self.id, grads })
    }
}

/// `[N, A, B] → [N, B, A]`.
fn transpose_blocks<T: Element>(x: &[T], n: usize, a: usize, b: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for k in 0..n {
        let src = &x[k * a * b..(k + 1) * a * b];
        let dst = &mut out[k * a * b..(k + 1) * a * b];
        for i in 0..a {
            for j in 0..b {
                dst[j * a + i] = src[i * b + j];
            }
        }
    }
    out
}

/// Returns the gradient buffer for node `i`, or `None` if it is untracked.
fn slot<'g, T: Element>(nodes: &[Node<T>], grads: &'g mut [Option<Vec<T>>], i: usize) -> Option<&'g mut Vec<T>> {
    if !nodes[i].requires_grad {
        return None;
    }
    Some(grads[i].get_or_insert_with(|| vec![T::zero(); nodes[i].value.numel()]))
}

fn backward_node<T: Element>(nodes: &[Node<T>], i: usize, gy: &[T], grads: &mut [Option<Vec<T>>]) {
    let out = &nodes[i].value;
    let val = |j: usize| -> &Tensor<T> { &nodes[j].value };
    match &nodes[i].op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            for &k in [a, b].iter() {
                let n = val(*k).numel();
                if let Some(g) = slot(nodes, grads, *k) {
                    if n == gy.len() {
                        add_into(g, gy);
                    } else {
                        g[0] = g[0] + gy.iter().copied().sum::<T>();
                    }
                }
            }
        }
        Op::Mul(a, b) => {
            for (k, other) in [(*a, *b), (*b, *a)] {
                let (xk, xo) = (val(k), val(other));
                if let Some(g) = slot(nodes, grads, k) {
                    let o_at = |j: usize| if xo.numel() == 1 { xo.data()[0] } else { xo.data()[j] };
                    if xk.numel() == gy.len() {
                        for (j, gv) in g.iter_mut().enumerate() {
                            *gv = *gv + gy[j] * o_at(j);
                        }
                    } else {
                        let s: T = gy.iter().enumerate().map(|(j, &d)| d * o_at(j)).sum();
                        g[0] = g[0] + s;
                    }
                }
            }
        }
        Op::Scale(a, c) => {
            if let Some(g) = slot(nodes, grads, *a) {
                for (gv, &d) in g.iter_mut().zip(gy) {
                    *gv = *gv + d * *c;
                }
            }
        }
        Op::Unary(a, kind) => {
            let x = val(*a).data();
            let y = out.data();
            if let Some(g) = slot(nodes, grads, *a) {
                for j in 0..g.len() {
                    let dydx = match kind {
                        Unary::Silu => kernels::silu_grad(x[j]),
                        Unary::Gelu => kernels::gelu_grad(x[j]),
                        Unary::Sigmoid => y[j] * (T::one() - y[j]),
                        Unary::Softplus => kernels::sigmoid(x[j]),
                        Unary::Exp => y[j],
                    };
                    g[j] = g[j] + gy[j] * dydx;
                }
            }
        }
        Op::Linear { x, w, b } => {
            let (xv, wv) = (val(*x), val(*w));
            let (o, inn) = (wv.shape()[0], wv.shape()[1]);
            let m = xv.numel() / inn;
            if let Some(g) = slot(nodes, grads, *x) {
                kernels::gemm(m, o, inn, T::one(), gy, false, wv.data(), false, T::one(), g);
            }
            if let Some(g) = slot(nodes, grads, *w) {
                kernels::gemm(o, m, inn, T::one(), gy, true, xv.data(), false, T::one(), g);
            }
            if let Some(b) = b {
                if let Some(g) = slot(nodes, grads, *b) {
                    for row in gy.chunks(o) {
                        add_into(g, row);
                    }
                }
            }
        }
        Op::Conv2d { x, w, b, geom } => {
            let (xv, wv) = (val(*x), val(*w));
            let in_sz = geom.in_c * geom.h * geom.w;
            let out_sz = geom.out_c * geom.out_h() * geom.out_w();
            let n = xv.numel() / in_sz;
            let mut dx = slot(nodes, grads, *x).map(std::mem::take);
            let mut dw = slot(nodes, grads, *w).map(std::mem::take);
            let mut db = b.and_then(|b| slot(nodes, grads, b)).map(std::mem::take);
            for k in 0..n {
                kernels::conv2d_backward(
                    &xv.data()[k * in_sz..(k + 1) * in_sz],
                    wv.data(),
                    &gy[k * out_sz..(k + 1) * out_sz],
                    geom,
                    dx.as_mut().map(|d| &mut d[k * in_sz..(k + 1) * in_sz]),
                    dw.as_deref_mut(),
                    db.as_deref_mut(),
                );
            }
            if let Some(d) = dx {
                grads[*x] = Some(d);
            }
            if let Some(d) = dw {
                grads[*w] = Some(d);
            }
            if let (Some(d), Some(b)) = (db, b) {
                grads[*b] = Some(d);
            }
        }
        Op::LayerNorm {
            x,
            gamma,
            beta,
            mean,
            rstd,
        } => {
            let (xv, gv) = (val(*x), val(*gamma));
            let c = gv.numel();
            let cn = T::from_usize(c).expect("fits");
            if let Some(g) = slot(nodes, grads, *beta) {
                for row in gy.chunks(c) {
                    add_into(g, row);
                }
            }
            if let Some(g) = slot(nodes, grads, *gamma) {
                for (r, (row, dyr)) in xv.data().chunks(c).zip(gy.chunks(c)).enumerate() {
                    for k in 0..c {
                        g[k] = g[k] + dyr[k] * (row[k] - mean[r]) * rstd[r];
                    }
                }
            }
            if let Some(g) = slot(nodes, grads, *x) {
                for (r, ((row, dyr), gr)) in xv.data().chunks(c).zip(gy.chunks(c)).zip(g.chunks_mut(c)).enumerate() {
                    let (mu, rs) = (mean[r], rstd[r]);
                    let mut s1 = T::zero();
                    let mut s2 = T::zero();
                    for k in 0..c {
                        let dxh = dyr[k] * gv.data()[k];
                        s1 = s1 + dxh;
                        s2 = s2 + dxh * (row[k] - mu) * rs;
                    }
                    let (m1, m2) = (s1 / cn, s2 / cn);
                    for k in 0..c {
                        let xh = (row[k] - mu) * rs;
                        let dxh = dyr[k] * gv.data()[k];
                        gr[k] = gr[k] + rs * (dxh - m1 - xh * m2);
                    }
                }
            }
        }
        Op::GlobalAvgPool(x) => {
            let s = val(*x).shape();
            let hw = s[2] * s[3];
            let inv = T::one() / T::from_usize(hw).expect("fits");
            if let Some(g) = slot(nodes, grads, *x) {
                for (plane, &d) in g.chunks_mut(hw).zip(gy) {
                    plane.iter_mut().for_each(|v| *v = *v + d * inv);
                }
            }
        }
        Op::ChannelScale { x, s } => {
            let (xv, sv) = (val(*x), val(*s));
            let hw = xv.shape()[2] * xv.shape()[3];
            if let Some(g) = slot(nodes, grads, *x) {
                for ((plane, dyp), &f) in g.chunks_mut(hw).zip(gy.chunks(hw)).zip(sv.data()) {
                    for (v, &d) in plane.iter_mut().zip(dyp) {
                        *v = *v + d * f;
                    }
                }
            }
            if let Some(g) = slot(nodes, grads, *s) {
                for ((gs, xp), dyp) in g.iter_mut().zip(xv.data().chunks(hw)).zip(gy.chunks(hw)) {
                    *gs = *gs + xp.iter().zip(dyp).map(|(&a, &b)| a * b).sum::<T>();
                }
            }
        }
        Op::PixelShuffle { x, r } => {
            let s = val(*x).shape();
            let (c, h, w) = (s[1], s[2], s[3]);
            if let Some(g) = slot(nodes, grads, *x) {
                let mut tmp = vec![T::zero(); c * h * w];
                for (dst, src) in g.chunks_mut(c * h * w).zip(gy.chunks(c * h * w)) {
                    kernels::pixel_unshuffle(src, c / (r * r), h, w, *r, &mut tmp);
                    add_into(dst, &tmp);
                }
            }
        }
        Op::SelectRows { x, idx } => {
            let s = val(*x).shape();
            let (l, d) = (s[1], s[2]);
            let k = idx.len();
            if let Some(g) = slot(nodes, grads, *x) {
                for (dst, src) in g.chunks_mut(l * d).zip(gy.chunks(k * d)) {
                    for (j, &row) in idx.iter().enumerate() {
                        add_into(&mut dst[row * d..(row + 1) * d], &src[j * d..(j + 1) * d]);
                    }
                }
            }
        }
        Op::ConcatRows(a, b) => {
            let (la, lb) = (val(*a).shape()[1], val(*b).shape()[1]);
            let d = val(*a).shape()[2];
            let per = (la + lb) * d;
            if let Some(g) = slot(nodes, grads, *a) {
                for (dst, src) in g.chunks_mut(la * d).zip(gy.chunks(per)) {
                    add_into(dst, &src[..la * d]);
                }
            }
            if let Some(g) = slot(nodes, grads, *b) {
                for (dst, src) in g.chunks_mut(lb * d).zip(gy.chunks(per)) {
                    add_into(dst, &src[la * d..]);
                }
            }
        }
        Op::NarrowLast { x, start } => {
            let d = *val(*x).shape().last().expect("rank >= 1");
            let len = *out.shape().last().expect("rank >= 1");
            if let Some(g) = slot(nodes, grads, *x) {
                for (dst, src) in g.chunks_mut(d).zip(gy.chunks(len)) {
                    add_into(&mut dst[*start..*start + len], src);
                }
            }
        }
        Op::NchwToTokens(x) => {
            let s = val(*x).shape();
            let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
            if let Some(g) = slot(nodes, grads, *x) {
                add_into(g, &transpose_blocks(gy, n, hw, c));
            }
        }
        Op::TokensToNchw(x) => {
            let s = val(*x).shape();
            let (n, l, c) = (s[0], s[1], s[2]);
            if let Some(g) = slot(nodes, grads, *x) {
                add_into(g, &transpose_blocks(gy, n, c, l));
            }
        }
        Op::Remap { x, rows, cols } => {
            let s = val(*x).shape();
            let (h, w) = (s[2], s[3]);
            let (oh, ow) = (rows.len(), cols.len());
            if let Some(g) = slot(nodes, grads, *x) {
                for (dst, src) in g.chunks_mut(h * w).zip(gy.chunks(oh * ow)) {
                    for (y, &r) in rows.iter().enumerate() {
                        for (xx, &cc) in cols.iter().enumerate() {
                            dst[r * w + cc] = dst[r * w + cc] + src[y * ow + xx];
                        }
                    }
                }
            }
        }
        Op::Resize { x, rows, cols } => {
            let s = val(*x).shape();
            let (h, w) = (s[2], s[3]);
            let (oh, ow) = (rows.len(), cols.len());
            if let Some(g) = slot(nodes, grads, *x) {
                let mut tmp = vec![T::zero(); h * ow];
                for (dst, src) in g.chunks_mut(h * w).zip(gy.chunks(oh * ow)) {
                    tmp.iter_mut().for_each(|v| *v = T::zero());
                    for (oy, taps) in rows.iter().enumerate() {
                        for &(iy, wt) in taps {
                            let wt = T::from_f64_lossy(wt);
                            for ox in 0..ow {
                                tmp[iy * ow + ox] = tmp[iy * ow + ox] + wt * src[oy * ow + ox];
                            }
                        }
                    }
                    for y in 0..h {
                        for (ox, taps) in cols.iter().enumerate() {
                            let d = tmp[y * ow + ox];
                            for &(ix, wt) in taps {
                                dst[y * w + ix] = dst[y * w + ix] + T::from_f64_lossy(wt) * d;
                            }
                        }
                    }
                }
            }
        }
        Op::L1(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            let scale = gy[0] / T::from_usize(av.numel()).expect("fits");
            let sign = |p: T, q: T| {
                if p > q {
                    T::one()
                } else if p < q {
                    -T::one()
                } else {
                    T::zero()
                }
            };
            if let Some(g) = slot(nodes, grads, *a) {
                for (j, gv) in g.iter_mut().enumerate() {
                    *gv = *gv + scale * sign(av.data()[j], bv.data()[j]);
                }
            }
            if let Some(g) = slot(nodes, grads, *b) {
                for (j, gv) in g.iter_mut().enumerate() {
                    *gv = *gv - scale * sign(av.data()[j], bv.data()[j]);
                }
            }
        }
        Op::Sum(x) => {
            if let Some(g) = slot(nodes, grads, *x) {
                g.iter_mut().for_each(|v| *v = *v + gy[0]);
            }
        }
        Op::Scan {
            u,
            delta,
            b,
            c,
            a_log,
            d,
            mode,
        } => {
            let uv = val(*u);
            let (n, l, din) = (uv.shape()[0], uv.shape()[1], uv.shape()[2]);
            let ds = val(*b).shape()[2];
            let av = val(*a_log);
            let a: Vec<T> = av.data().iter().map(|v| -v.exp()).collect();
            let take = |grads: &mut [Option<Vec<T>>], k: usize| slot(nodes, grads, k).map(std::mem::take);
            let mut gu = take(grads, *u);
            let mut gdl = take(grads, *delta);
            let mut gb = take(grads, *b);
            let mut gc = take(grads, *c);
            let mut ga = take(grads, *a_log);
            let mut gd = take(grads, *d);
            // Scratch for operands whose gradient is not tracked.
            let mut da = vec![T::zero(); din * ds];
            let mut dd = vec![T::zero(); din];
            let mut s_u = vec![T::zero(); l * din];
            let mut s_dl = vec![T::zero(); l * din];
            let mut s_b = vec![T::zero(); l * ds];
            let mut s_c = vec![T::zero(); l * ds];
            for k in 0..n {
                let (sd, ss) = (k * l * din..(k + 1) * l * din, k * l * ds..(k + 1) * l * ds);
                let view = ScanView {
                    len: l,
                    din,
                    ds,
                    u: &uv.data()[sd.clone()],
                    delta: &val(*delta).data()[sd.clone()],
                    b: &val(*b).data()[ss.clone()],
                    c: &val(*c).data()[ss.clone()],
                    a: &a,
                    d: val(*d).data(),
                    mode: *mode,
                };
                s_u.iter_mut().for_each(|v| *v = T::zero());
                s_dl.iter_mut().for_each(|v| *v = T::zero());
                s_b.iter_mut().for_each(|v| *v = T::zero());
                s_c.iter_mut().for_each(|v| *v = T::zero());
                view.backward(
                    &gy[sd.clone()],
                    &mut ScanGrads {
                        du: gu.as_mut().map(|g| &mut g[sd.clone()]).unwrap_or(&mut s_u),
                        ddelta: gdl.as_mut().map(|g| &mut g[sd.clone()]).unwrap_or(&mut s_dl),
                        db: gb.as_mut().map(|g| &mut g[ss.clone()]).unwrap_or(&mut s_b),
                        dc: gc.as_mut().map(|g| &mut g[ss.clone()]).unwrap_or(&mut s_c),
                        da: &mut da,
                        dd: &mut dd,
                    },
                );
            }
            if let Some(g) = ga.as_mut() {
                for ((gv, &dv), &av) in g.iter_mut().zip(&da).zip(&a) {
                    *gv = *gv + dv * av;
                }
            }
            if let Some(g) = gd.as_mut() {
                add_into(g, &dd);
            }
            for (k, g) in [(*u, gu), (*delta, gdl), (*b, gb), (*c, gc), (*a_log, ga), (*d, gd)] {
                if let Some(g) = g {
                    grads[k] = Some(g);
                }
            }
        }
    }
}
