//! Slice-level numeric kernels shared by the tape ops and plain callers.

use crate::tensor::Element;

/// Row-major GEMM: `c[m×n] = alpha * op(a) op(b) + beta * c`.
///
/// `trans_a` / `trans_b` select whether `a` is stored `m×k` (false) or `k×m`
/// (true), and likewise `b` as `k×n` or `n×k`.
#[allow(clippy::too_many_arguments)]
pub fn gemm<T: Element>(
    m: usize,
    k: usize,
    n: usize,
    alpha: T,
    a: &[T],
    trans_a: bool,
    b: &[T],
    trans_b: bool,
    beta: T,
    c: &mut [T],
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the asserts above bound every strided access.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Geometry of a stride-1 2D convolution over one image.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub in_c: usize,
    pub out_c: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub pad: usize,
    pub groups: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        self.h + 2 * self.pad + 1 - self.k
    }

    pub fn out_w(&self) -> usize {
        self.w + 2 * self.pad + 1 - self.k
    }

    fn cin_g(&self) -> usize {
        self.in_c / self.groups
    }

    fn cout_g(&self) -> usize {
        self.out_c / self.groups
    }
}

/// Output columns `ox` whose input column `ox + kx - pad` lies in `0..w`.
fn valid_cols(w: usize, ow: usize, kx: usize, pad: usize) -> (usize, usize) {
    let lo = pad.saturating_sub(kx).min(ow);
    let hi = (w + pad).saturating_sub(kx).min(ow).max(lo);
    (lo, hi)
}

/// Unfolds `cin` planes of `x` (each `h×w`) into a `(cin·k·k) × (oh·ow)` matrix.
fn im2col<T: Element>(x: &[T], g: &ConvGeom, cin: usize, col: &mut [T]) {
    let (h, w, k, pad) = (g.h, g.w, g.k, g.pad);
    let (oh, ow) = (g.out_h(), g.out_w());
    let mut row = 0;
    for c in 0..cin {
        let plane = &x[c * h * w..(c + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let (lo, hi) = valid_cols(w, ow, kx, pad);
                let dst = &mut col[row * oh * ow..(row + 1) * oh * ow];
                for oy in 0..oh {
                    let out_row = &mut dst[oy * ow..(oy + 1) * ow];
                    let iy = (oy + ky).wrapping_sub(pad);
                    if iy >= h || lo == hi {
                        out_row.fill(T::zero());
                        continue;
                    }
                    out_row[..lo].fill(T::zero());
                    out_row[hi..].fill(T::zero());
                    let start = iy * w + lo + kx - pad;
                    out_row[lo..hi].copy_from_slice(&plane[start..start + (hi - lo)]);
                }
                row += 1;
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates `col` back into `dx`.
fn col2im<T: Element>(col: &[T], g: &ConvGeom, cin: usize, dx: &mut [T]) {
    let (h, w, k, pad) = (g.h, g.w, g.k, g.pad);
    let (oh, ow) = (g.out_h(), g.out_w());
    let mut row = 0;
    for c in 0..cin {
        let plane = &mut dx[c * h * w..(c + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let (lo, hi) = valid_cols(w, ow, kx, pad);
                let src = &col[row * oh * ow..(row + 1) * oh * ow];
                for oy in 0..oh {
                    let iy = (oy + ky).wrapping_sub(pad);
                    if iy >= h || lo == hi {
                        continue;
                    }
                    let start = iy * w + lo + kx - pad;
                    let dst = &mut plane[start..start + (hi - lo)];
                    for (d, s) in dst.iter_mut().zip(&src[oy * ow + lo..oy * ow + hi]) {
                        *d = *d + *s;
                    }
                }
                row += 1;
            }
        }
    }
}

/// Forward convolution for one image: `x` is `in_c×h×w`, `wt` is
/// `out_c×(in_c/groups)×k×k`, output is `out_c×oh×ow`.
pub fn conv2d_forward<T: Element>(x: &[T], wt: &[T], bias: Option<&[T]>, g: &ConvGeom, out: &mut [T]) {
    let (cin_g, cout_g) = (g.cin_g(), g.cout_g());
    let (hw, ohw) = (g.h * g.w, g.out_h() * g.out_w());
    let kk = cin_g * g.k * g.k;
    let mut col = vec![T::zero(); kk * ohw];
    for grp in 0..g.groups {
        im2col(&x[grp * cin_g * hw..], g, cin_g, &mut col);
        let w_g = &wt[grp * cout_g * kk..(grp + 1) * cout_g * kk];
        let o_g = &mut out[grp * cout_g * ohw..(grp + 1) * cout_g * ohw];
        gemm(cout_g, kk, ohw, T::one(), w_g, false, &col, false, T::zero(), o_g);
    }
    if let Some(b) = bias {
        for (oc, &bv) in b.iter().enumerate() {
            for v in &mut out[oc * ohw..(oc + 1) * ohw] {
                *v = *v + bv;
            }
        }
    }
}

/// Backward convolution for one image. Gradients are accumulated.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward<T: Element>(
    x: &[T],
    wt: &[T],
    dy: &[T],
    g: &ConvGeom,
    dx: Option<&mut [T]>,
    dw: Option<&mut [T]>,
    db: Option<&mut [T]>,
) {
    let (cin_g, cout_g) = (g.cin_g(), g.cout_g());
    let (hw, ohw) = (g.h * g.w, g.out_h() * g.out_w());
    let kk = cin_g * g.k * g.k;
    if let Some(db) = db {
        for (oc, b) in db.iter_mut().enumerate() {
            *b = *b + dy[oc * ohw..(oc + 1) * ohw].iter().copied().sum::<T>();
        }
    }
    let mut col = vec![T::zero(); kk * ohw];
    if let Some(dw) = dw {
        for grp in 0..g.groups {
            im2col(&x[grp * cin_g * hw..], g, cin_g, &mut col);
            let dy_g = &dy[grp * cout_g * ohw..(grp + 1) * cout_g * ohw];
            let dw_g = &mut dw[grp * cout_g * kk..(grp + 1) * cout_g * kk];
            gemm(cout_g, ohw, kk, T::one(), dy_g, false, &col, true, T::one(), dw_g);
        }
    }
    if let Some(dx) = dx {
        for grp in 0..g.groups {
            let dy_g = &dy[grp * cout_g * ohw..(grp + 1) * cout_g * ohw];
            let w_g = &wt[grp * cout_g * kk..(grp + 1) * cout_g * kk];
            gemm(kk, cout_g, ohw, T::one(), w_g, true, dy_g, false, T::zero(), &mut col);
            col2im(&col, g, cin_g, &mut dx[grp * cin_g * hw..(grp + 1) * cin_g * hw]);
        }
    }
}

pub fn sigmoid<T: Element>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// `ln(1 + e^x)` without overflow for large `x`.
pub fn softplus<T: Element>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

pub fn silu<T: Element>(x: T) -> T {
    x * sigmoid(x)
}

pub fn silu_grad<T: Element>(x: T) -> T {
    let s = sigmoid(x);
    s * (T::one() + x * (T::one() - s))
}

const GELU_C: f64 = 0.044_715;
// sqrt(2/pi)
const GELU_K: f64 = 0.797_884_560_802_865_4;

/// GELU, tanh approximation.
pub fn gelu<T: Element>(x: T) -> T {
    let c = T::from_f64_lossy(GELU_C);
    let k = T::from_f64_lossy(GELU_K);
    let half = T::from_f64_lossy(0.5);
    half * x * (T::one() + (k * (x + c * x * x * x)).tanh())
}

pub fn gelu_grad<T: Element>(x: T) -> T {
    let c = T::from_f64_lossy(GELU_C);
    let k = T::from_f64_lossy(GELU_K);
    let half = T::from_f64_lossy(0.5);
    let three = T::from_f64_lossy(3.0);
    let t = (k * (x + c * x * x * x)).tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * k * (T::one() + three * c * x * x)
}

/// `out[n][c][h·r+dy][w·r+dx] = in[n][c·r²+dy·r+dx][h][w]` for one image.
pub fn pixel_shuffle<T: Element>(x: &[T], c_out: usize, h: usize, w: usize, r: usize, out: &mut [T]) {
    let (oh, ow) = (h * r, w * r);
    for c in 0..c_out {
        for dy in 0..r {
            for dx in 0..r {
                let src = &x[(c * r * r + dy * r + dx) * h * w..][..h * w];
                for y in 0..h {
                    let row = &mut out[c * oh * ow + (y * r + dy) * ow..][..ow];
                    for xx in 0..w {
                        row[xx * r + dx] = src[y * w + xx];
                    }
                }
            }
        }
    }
}

/// Inverse of [`pixel_shuffle`]; `h`, `w` are the low-resolution extents.
pub fn pixel_unshuffle<T: Element>(x: &[T], c_out: usize, h: usize, w: usize, r: usize, out: &mut [T]) {
    let (oh, ow) = (h * r, w * r);
    for c in 0..c_out {
        for dy in 0..r {
            for dx in 0..r {
                let dst = &mut out[(c * r * r + dy * r + dx) * h * w..][..h * w];
                for y in 0..h {
                    let row = &x[c * oh * ow + (y * r + dy) * ow..][..ow];
                    for xx in 0..w {
                        dst[y * w + xx] = row[xx * r + dx];
                    }
                }
            }
        }
    }
}
