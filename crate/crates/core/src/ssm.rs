//! Selective state-space scan.
//!
//! Per channel `d` and state `n`, with `a = -exp(a_log)`:
//!
//! ```text
//!   abar_t = exp(delta_t * a)
//!   bbar_t = (exp(delta_t * a) - 1) / a * B_t        (zero-order hold)
//!   h_t    = abar_t * h_{t-1} + bbar_t * u_t,        h_{-1} = 0
//!   y_t    = sum_n C_t[n] h_t[n] + D * u_t
//! ```
//!
//! The backward pass recomputes the states and runs the adjoint recurrence
//! in reverse, so it costs O(L) memory and time.

use std::fmt::Write as _;

use thiserror::Error;

use crate::tensor::{Element, Tensor};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SsmError {
    #[error("{what}: expected shape {expected:?}, found {found:?}")]
    Shape {
        what: &'static str,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("step size must be positive, found {value} at token {token}, channel {channel}")]
    NonPositiveDelta { token: usize, channel: usize, value: f64 },
    #[error("state matrix entry must be negative, found {0}")]
    NonNegativeA(f64),
    #[error("kernel form needs time-invariant delta, B and C; {0} varies over tokens")]
    TimeVarying(&'static str),
    #[error("token pair (p={p}, q={q}) invalid for sequence length {len}")]
    TokenPair { p: usize, q: usize, len: usize },
}

/// How `bbar` is obtained from `delta`, `a` and `B`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Discretization {
    /// `bbar = (exp(delta a) - 1) / a * B`.
    #[default]
    Zoh,
    /// `bbar = delta * B`, the first-order simplification.
    Euler,
}

/// Discretizes one (channel, state) entry. Returns `(abar, bbar)`.
pub fn discretize<T: Element>(delta: T, a: T, b: T, mode: Discretization) -> (T, T) {
    let em1 = (delta * a).exp_m1();
    let abar = em1 + T::one();
    let bbar = match mode {
        Discretization::Zoh => em1 / a * b,
        Discretization::Euler => delta * b,
    };
    (abar, bbar)
}

/// Static state-space parameters: `a_log` is `d_inner × d_state`, `d` is `d_inner`.
#[derive(Debug, Clone, PartialEq)]
pub struct SsmCore<T> {
    a_log: Tensor<T>,
    d: Tensor<T>,
}

impl<T: Element> SsmCore<T> {
    pub fn new(a_log: Tensor<T>, d: Tensor<T>) -> Result<Self, SsmError> {
        if a_log.rank() != 2 {
            return Err(SsmError::Shape {
                what: "a_log",
                expected: vec![0, 0],
                found: a_log.shape().to_vec(),
            });
        }
        if d.shape() != [a_log.shape()[0]] {
            return Err(SsmError::Shape {
                what: "d",
                expected: vec![a_log.shape()[0]],
                found: d.shape().to_vec(),
            });
        }
        Ok(SsmCore { a_log, d })
    }

    /// S4D-real initialization: `a[., k] = -(k + 1)`, `D = 1`.
    pub fn s4d(d_inner: usize, d_state: usize) -> Self {
        SsmCore {
            a_log: s4d_a_log(d_inner, d_state),
            d: Tensor::full(vec![d_inner], T::one()),
        }
    }

    /// Builds a core directly from (negative) `a` values.
    pub fn from_a(a: Tensor<T>, d: Tensor<T>) -> Result<Self, SsmError> {
        if let Some(bad) = a.data().iter().find(|v| **v >= T::zero()) {
            return Err(SsmError::NonNegativeA(bad.as_f64()));
        }
        Self::new(a.map(|v| (-v).ln()), d)
    }

    pub fn d_inner(&self) -> usize {
        self.a_log.shape()[0]
    }

    pub fn d_state(&self) -> usize {
        self.a_log.shape()[1]
    }

    pub fn a_log(&self) -> &Tensor<T> {
        &self.a_log
    }

    pub fn d(&self) -> &Tensor<T> {
        &self.d
    }

    /// `a = -exp(a_log)`, strictly negative.
    pub fn a(&self) -> Vec<T> {
        self.a_log.data().iter().map(|v| -v.exp()).collect()
    }
}

pub fn s4d_a_log<T: Element>(d_inner: usize, d_state: usize) -> Tensor<T> {
    let data = (0..d_inner)
        .flat_map(|_| (0..d_state).map(|k| T::from_f64_lossy(((k + 1) as f64).ln())))
        .collect();
    Tensor::new(vec![d_inner, d_state], data).expect("shape matches")
}

/// One token sequence: `u`, `delta` are `L × d_inner`; `b`, `c` are `L × d_state`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScanInputs<T> {
    pub u: Tensor<T>,
    pub delta: Tensor<T>,
    pub b: Tensor<T>,
    pub c: Tensor<T>,
}

impl<T: Element> ScanInputs<T> {
    pub fn new(u: Tensor<T>, delta: Tensor<T>, b: Tensor<T>, c: Tensor<T>) -> Result<Self, SsmError> {
        let check = |what, t: &Tensor<T>, expected: Vec<usize>| {
            if t.shape() == expected.as_slice() {
                Ok(())
            } else {
                Err(SsmError::Shape {
                    what,
                    expected,
                    found: t.shape().to_vec(),
                })
            }
        };
        if u.rank() != 2 {
            return Err(SsmError::Shape {
                what: "u",
                expected: vec![0, 0],
                found: u.shape().to_vec(),
            });
        }
        let (len, din) = (u.shape()[0], u.shape()[1]);
        check("delta", &delta, vec![len, din])?;
        let ds = if b.rank() == 2 { b.shape()[1] } else { 0 };
        check("b", &b, vec![len, ds])?;
        check("c", &c, vec![len, ds])?;
        for (i, v) in delta.data().iter().enumerate() {
            if !(*v > T::zero()) {
                return Err(SsmError::NonPositiveDelta {
                    token: i / din,
                    channel: i % din,
                    value: v.as_f64(),
                });
            }
        }
        Ok(ScanInputs { u, delta, b, c })
    }

    pub fn len(&self) -> usize {
        self.u.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn d_inner(&self) -> usize {
        self.u.shape()[1]
    }

    pub fn d_state(&self) -> usize {
        self.b.shape()[1]
    }

    fn check_core(&self, core: &SsmCore<T>) -> Result<(), SsmError> {
        if core.d_inner() != self.d_inner() || core.d_state() != self.d_state() {
            return Err(SsmError::Shape {
                what: "core",
                expected: vec![self.d_inner(), self.d_state()],
                found: core.a_log.shape().to_vec(),
            });
        }
        Ok(())
    }
}

/// Slice view of one scan problem, shared by the plain API and the tape op.
pub(crate) struct ScanView<'a, T> {
    pub len: usize,
    pub din: usize,
    pub ds: usize,
    pub u: &'a [T],
    pub delta: &'a [T],
    pub b: &'a [T],
    pub c: &'a [T],
    /// Negative state coefficients, `din × ds`.
    pub a: &'a [T],
    pub d: &'a [T],
    pub mode: Discretization,
}

impl<T: Element> ScanView<'_, T> {
    /// Runs the recurrence, writing `y` (`len × din`) and, when given, every
    /// state `h_t` and every `exp(delta a) - 1` (both `len × din × ds`).
    pub fn forward(&self, y: &mut [T], states: Option<&mut Vec<T>>) {
        self.forward_cached(y, states, None);
    }

    fn inv_a(&self) -> Vec<T> {
        self.a.iter().map(|&a| T::one() / a).collect()
    }

    /// Like [`ScanView::forward`]; caches are appended to, one block per step.
    fn forward_cached(&self, y: &mut [T], mut states: Option<&mut Vec<T>>, mut em1s: Option<&mut Vec<T>>) {
        let (din, ds) = (self.din, self.ds);
        let blk = din * ds;
        let inv_a = self.inv_a();
        let mut h = vec![T::zero(); blk];
        let mut em1 = vec![T::zero(); blk];
        let mut gain = vec![T::zero(); blk];
        for t in 0..self.len {
            let brow = &self.b[t * ds..(t + 1) * ds];
            let crow = &self.c[t * ds..(t + 1) * ds];
            let drow = &self.delta[t * din..(t + 1) * din];
            for (d, &dt) in drow.iter().enumerate() {
                for (e, &a) in em1[d * ds..(d + 1) * ds].iter_mut().zip(&self.a[d * ds..(d + 1) * ds]) {
                    *e = dt * a;
                }
            }
            T::expm1_in_place(&mut em1);
            match self.mode {
                Discretization::Zoh => {
                    for ((g, &e), &ia) in gain.iter_mut().zip(&em1).zip(&inv_a) {
                        *g = e * ia;
                    }
                }
                Discretization::Euler => {
                    for (d, &dt) in drow.iter().enumerate() {
                        gain[d * ds..(d + 1) * ds].fill(dt);
                    }
                }
            }
            for d in 0..din {
                let x = self.u[t * din + d];
                let r = d * ds..(d + 1) * ds;
                let (erow, grow, hrow) = (&em1[r.clone()], &gain[r.clone()], &mut h[r]);
                let mut acc = T::zero();
                for n in 0..ds {
                    let hv = (erow[n] + T::one()) * hrow[n] + grow[n] * brow[n] * x;
                    hrow[n] = hv;
                    acc = acc + crow[n] * hv;
                }
                y[t * din + d] = acc + self.d[d] * x;
            }
            if let Some(s) = states.as_deref_mut() {
                s.extend_from_slice(&h);
            }
            if let Some(e) = em1s.as_deref_mut() {
                e.extend_from_slice(&em1);
            }
        }
    }

    /// Accumulates gradients of `sum(dy * y)` into the provided buffers.
    /// `da` receives the gradient with respect to `a` (not `a_log`).
    pub fn backward(&self, dy: &[T], g: &mut ScanGrads<'_, T>) {
        let (len, din, ds) = (self.len, self.din, self.ds);
        let blk = din * ds;
        let mut states = Vec::with_capacity(len * blk);
        let mut em1s = Vec::with_capacity(len * blk);
        let mut y = vec![T::zero(); len * din];
        self.forward_cached(&mut y, Some(&mut states), Some(&mut em1s));
        let inv_a = self.inv_a();

        // carried adjoint: abar_{t+1} * dh_{t+1}
        let mut carry = vec![T::zero(); blk];
        let zeros = vec![T::zero(); blk];
        for t in (0..len).rev() {
            let brow = &self.b[t * ds..(t + 1) * ds];
            let crow = &self.c[t * ds..(t + 1) * ds];
            let hs = &states[t * blk..(t + 1) * blk];
            let hprevs = if t > 0 { &states[(t - 1) * blk..t * blk] } else { &zeros[..] };
            let es = &em1s[t * blk..(t + 1) * blk];
            let dc = &mut g.dc[t * ds..(t + 1) * ds];
            let db = &mut g.db[t * ds..(t + 1) * ds];
            for d in 0..din {
                let idx = t * din + d;
                let (x, dt, dyv) = (self.u[idx], self.delta[idx], dy[idx]);
                let mut dx = self.d[d] * dyv;
                g.dd[d] = g.dd[d] + dyv * x;
                let mut ddt = T::zero();
                let r = d * ds..(d + 1) * ds;
                let (arow, iarow) = (&self.a[r.clone()], &inv_a[r.clone()]);
                let (erow, hrow, prow) = (&es[r.clone()], &hs[r.clone()], &hprevs[r.clone()]);
                let (carow, darow) = (&mut carry[r.clone()], &mut g.da[r]);
                for n in 0..ds {
                    let an = arow[n];
                    let em1 = erow[n];
                    let abar = em1 + T::one();
                    dc[n] = dc[n] + dyv * hrow[n];
                    let dh = carow[n] + crow[n] * dyv;
                    let dabar = dh * prow[n];
                    let dbbar = dh * x;
                    let (gfac, dg_ddt, dg_da) = match self.mode {
                        Discretization::Zoh => {
                            let gf = em1 * iarow[n];
                            (gf, abar, (dt * abar - gf) * iarow[n])
                        }
                        Discretization::Euler => (dt, T::one(), T::zero()),
                    };
                    dx = dx + dh * gfac * brow[n];
                    db[n] = db[n] + dbbar * gfac;
                    let dgv = dbbar * brow[n];
                    ddt = ddt + dabar * an * abar + dgv * dg_ddt;
                    darow[n] = darow[n] + dabar * dt * abar + dgv * dg_da;
                    carow[n] = dh * abar;
                }
                g.du[idx] = g.du[idx] + dx;
                g.ddelta[idx] = g.ddelta[idx] + ddt;
            }
        }
    }
}

/// Gradient accumulators matching the layout of a [`ScanView`].
pub(crate) struct ScanGrads<'a, T> {
    pub du: &'a mut [T],
    pub ddelta: &'a mut [T],
    pub db: &'a mut [T],
    pub dc: &'a mut [T],
    pub da: &'a mut [T],
    pub dd: &'a mut [T],
}

/// Runs the scan over one sequence. Returns `y` with shape `L × d_inner`.
pub fn selective_scan<T: Element>(core: &SsmCore<T>, inp: &ScanInputs<T>) -> Result<Tensor<T>, SsmError> {
    selective_scan_with(core, inp, Discretization::Zoh)
}

pub fn selective_scan_with<T: Element>(
    core: &SsmCore<T>,
    inp: &ScanInputs<T>,
    mode: Discretization,
) -> Result<Tensor<T>, SsmError> {
    inp.check_core(core)?;
    let a = core.a();
    let view = ScanView {
        len: inp.len(),
        din: inp.d_inner(),
        ds: inp.d_state(),
        u: inp.u.data(),
        delta: inp.delta.data(),
        b: inp.b.data(),
        c: inp.c.data(),
        a: &a,
        d: core.d.data(),
        mode,
    };
    let mut y = vec![T::zero(); inp.len() * inp.d_inner()];
    view.forward(&mut y, None);
    Ok(Tensor::new(vec![inp.len(), inp.d_inner()], y).expect("shape matches"))
}

/// Gradients of `sum(dy * y)` for every scan operand.
#[derive(Debug, Clone, PartialEq)]
pub struct ScanGradients<T> {
    pub u: Tensor<T>,
    pub delta: Tensor<T>,
    pub b: Tensor<T>,
    pub c: Tensor<T>,
    pub a_log: Tensor<T>,
    pub d: Tensor<T>,
}

pub fn selective_scan_backward<T: Element>(
    core: &SsmCore<T>,
    inp: &ScanInputs<T>,
    dy: &Tensor<T>,
    mode: Discretization,
) -> Result<ScanGradients<T>, SsmError> {
    inp.check_core(core)?;
    if dy.shape() != inp.u.shape() {
        return Err(SsmError::Shape {
            what: "dy",
            expected: inp.u.shape().to_vec(),
            found: dy.shape().to_vec(),
        });
    }
    let a = core.a();
    let view = ScanView {
        len: inp.len(),
        din: inp.d_inner(),
        ds: inp.d_state(),
        u: inp.u.data(),
        delta: inp.delta.data(),
        b: inp.b.data(),
        c: inp.c.data(),
        a: &a,
        d: core.d.data(),
        mode,
    };
    let mut du = Tensor::zeros(inp.u.shape().to_vec());
    let mut ddelta = Tensor::zeros(inp.u.shape().to_vec());
    let mut db = Tensor::zeros(inp.b.shape().to_vec());
    let mut dc = Tensor::zeros(inp.c.shape().to_vec());
    let mut da = Tensor::zeros(core.a_log.shape().to_vec());
    let mut dd = Tensor::zeros(core.d.shape().to_vec());
    view.backward(
        dy.data(),
        &mut ScanGrads {
            du: du.data_mut(),
            ddelta: ddelta.data_mut(),
            db: db.data_mut(),
            dc: dc.data_mut(),
            da: da.data_mut(),
            dd: dd.data_mut(),
        },
    );
    // chain through a = -exp(a_log): da/da_log = a
    for (g, &av) in da.data_mut().iter_mut().zip(&a) {
        *g = *g * av;
    }
    Ok(ScanGradients {
        u: du,
        delta: ddelta,
        b: db,
        c: dc,
        a_log: da,
        d: dd,
    })
}

/// Convolution kernel of a time-invariant scan: `kbar` is `L × d_inner`,
/// `kbar[j][d] = sum_n C[n] abar[d,n]^j bbar[d,n]`.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelMatrix<T> {
    pub kbar: Tensor<T>,
}

impl<T: Element> KernelMatrix<T> {
    /// Kernel for constant per-channel `delta` (`d_inner`) and constant `b`, `c` (`d_state`).
    pub fn materialize(core: &SsmCore<T>, delta: &[T], b: &[T], c: &[T], len: usize) -> Result<Self, SsmError> {
        Self::materialize_with(core, delta, b, c, len, Discretization::Zoh)
    }

    pub fn materialize_with(
        core: &SsmCore<T>,
        delta: &[T],
        b: &[T],
        c: &[T],
        len: usize,
        mode: Discretization,
    ) -> Result<Self, SsmError> {
        let (din, ds) = (core.d_inner(), core.d_state());
        if delta.len() != din || b.len() != ds || c.len() != ds {
            return Err(SsmError::Shape {
                what: "kernel parameters",
                expected: vec![din, ds, ds],
                found: vec![delta.len(), b.len(), c.len()],
            });
        }
        let a = core.a();
        let mut kbar = vec![T::zero(); len * din];
        for d in 0..din {
            for n in 0..ds {
                let (abar, bbar) = discretize(delta[d], a[d * ds + n], b[n], mode);
                let mut term = c[n] * bbar;
                for j in 0..len {
                    kbar[j * din + d] = kbar[j * din + d] + term;
                    term = term * abar;
                }
            }
        }
        Ok(KernelMatrix {
            kbar: Tensor::new(vec![len, din], kbar).expect("shape matches"),
        })
    }

    /// Kernel for a scan problem whose delta, B and C are constant over tokens.
    pub fn from_inputs(core: &SsmCore<T>, inp: &ScanInputs<T>) -> Result<Self, SsmError> {
        inp.check_core(core)?;
        let first_row = |t: &Tensor<T>, what| -> Result<Vec<T>, SsmError> {
            let w = t.shape()[1];
            let row = &t.data()[..w];
            if t.data().chunks(w).any(|r| r != row) {
                return Err(SsmError::TimeVarying(what));
            }
            Ok(row.to_vec())
        };
        if inp.is_empty() {
            return Ok(KernelMatrix {
                kbar: Tensor::zeros(vec![0, inp.d_inner()]),
            });
        }
        let delta = first_row(&inp.delta, "delta")?;
        let b = first_row(&inp.b, "B")?;
        let c = first_row(&inp.c, "C")?;
        Self::materialize(core, &delta, &b, &c, inp.len())
    }

    pub fn len(&self) -> usize {
        self.kbar.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Causal convolution `y_t = sum_{j<=t} kbar[j] u_{t-j} + D u_t`.
    pub fn apply(&self, u: &Tensor<T>, d: &Tensor<T>) -> Result<Tensor<T>, SsmError> {
        let din = self.kbar.shape()[1];
        if u.rank() != 2 || u.shape()[1] != din || u.shape()[0] > self.len() {
            return Err(SsmError::Shape {
                what: "u",
                expected: vec![self.len(), din],
                found: u.shape().to_vec(),
            });
        }
        let len = u.shape()[0];
        let (k, x) = (self.kbar.data(), u.data());
        let mut y = vec![T::zero(); len * din];
        for t in 0..len {
            for ch in 0..din {
                let mut acc = d.data()[ch] * x[t * din + ch];
                for j in 0..=t {
                    acc = acc + k[j * din + ch] * x[(t - j) * din + ch];
                }
                y[t * din + ch] = acc;
            }
        }
        Ok(Tensor::new(vec![len, din], y).expect("shape matches"))
    }
}

/// Per-channel `dy_q / du_p` with delta, B and C held fixed:
/// `C_q . (prod_{i=p+1..q} abar_i) bbar_p`, plus `D` when `p == q`.
///
/// The product starts at `p + 1` because `h_p` already includes `bbar_p u_p`;
/// this is the bound implied by the recurrence.
pub fn contribution<T: Element>(core: &SsmCore<T>, inp: &ScanInputs<T>, p: usize, q: usize) -> Result<Vec<T>, SsmError> {
    contribution_with(core, inp, p, q, Discretization::Zoh)
}

pub fn contribution_with<T: Element>(
    core: &SsmCore<T>,
    inp: &ScanInputs<T>,
    p: usize,
    q: usize,
    mode: Discretization,
) -> Result<Vec<T>, SsmError> {
    inp.check_core(core)?;
    if p > q || q >= inp.len() {
        return Err(SsmError::TokenPair { p, q, len: inp.len() });
    }
    let (din, ds) = (inp.d_inner(), inp.d_state());
    let a = core.a();
    let (delta, b, c) = (inp.delta.data(), inp.b.data(), inp.c.data());
    let mut out = Vec::with_capacity(din);
    for d in 0..din {
        // sum_{i=p+1..q} delta_i
        let span: T = (p + 1..=q).map(|i| delta[i * din + d]).sum();
        let mut acc = T::zero();
        for n in 0..ds {
            let an = a[d * ds + n];
            let (_, bbar) = discretize(delta[p * din + d], an, b[p * ds + n], mode);
            acc = acc + c[q * ds + n] * (span * an).exp() * bbar;
        }
        if p == q {
            acc = acc + core.d.data()[d];
        }
        out.push(acc);
    }
    Ok(out)
}

/// `|contribution(p, q)|` for `q = p..L-1`; entry `[q - p][channel]`.
pub fn decay_profile<T: Element>(core: &SsmCore<T>, inp: &ScanInputs<T>, p: usize) -> Result<Vec<Vec<T>>, SsmError> {
    if p >= inp.len() {
        return Err(SsmError::TokenPair { p, q: p, len: inp.len() });
    }
    (p..inp.len())
        .map(|q| contribution(core, inp, p, q).map(|v| v.into_iter().map(|x| x.abs()).collect()))
        .collect()
}

/// CSV rows `p,q,channel,magnitude` for a profile produced by [`decay_profile`].
pub fn decay_profile_csv<T: Element>(p: usize, profile: &[Vec<T>]) -> String {
    let mut s = String::from("p,q,channel,magnitude\n");
    for (off, row) in profile.iter().enumerate() {
        for (ch, m) in row.iter().enumerate() {
            let _ = writeln!(s, "{},{},{},{:e}", p, p + off, ch, m.as_f64());
        }
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t2(rows: usize, cols: usize, v: &[f64]) -> Tensor<f64> {
        Tensor::new(vec![rows, cols], v.to_vec()).unwrap()
    }

    #[test]
    fn discretize_closed_forms() {
        let (abar, bbar) = discretize(2f64.ln(), -1.0, 1.0, Discretization::Zoh);
        assert!((abar - 0.5).abs() < 1e-15);
        assert!((bbar - 0.5).abs() < 1e-15);

        let (abar, bbar) = discretize(1.0f64, -2.0, 3.0, Discretization::Zoh);
        assert!((abar - (-2.0f64).exp()).abs() < 1e-15);
        assert!((abar - 0.135_335).abs() < 1e-6);
        assert!((bbar - 1.296_997).abs() < 1e-6);

        let (abar, bbar) = discretize(1e-12f64, -3.0, 2.0, Discretization::Zoh);
        assert!((abar - 1.0).abs() <= 1e-9);
        assert!(bbar.abs() <= 1e-9);
    }

    #[test]
    fn euler_variant_is_delta_b() {
        let (_, bbar) = discretize(0.25f64, -2.0, 3.0, Discretization::Euler);
        assert_eq!(bbar, 0.75);
    }

    #[test]
    fn single_step_unroll() {
        let core = SsmCore::from_a(t2(1, 1, &[-2.0]), Tensor::new(vec![1], vec![0.7]).unwrap()).unwrap();
        let inp = ScanInputs::new(t2(1, 1, &[1.5]), t2(1, 1, &[0.3]), t2(1, 1, &[0.9]), t2(1, 1, &[-1.1])).unwrap();
        let y = selective_scan(&core, &inp).unwrap();
        let (_, bbar) = discretize(0.3, -2.0, 0.9, Discretization::Zoh);
        let expected = -1.1 * bbar * 1.5 + 0.7 * 1.5;
        assert!((y.data()[0] - expected).abs() < 1e-15);
    }

    #[test]
    fn zero_input_gives_zero_output() {
        let core = SsmCore::<f64>::s4d(3, 4);
        let inp = ScanInputs::new(
            Tensor::zeros(vec![5, 3]),
            Tensor::full(vec![5, 3], 0.1),
            Tensor::full(vec![5, 4], 1.0),
            Tensor::full(vec![5, 4], 1.0),
        )
        .unwrap();
        let y = selective_scan(&core, &inp).unwrap();
        assert!(y.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn rejects_bad_inputs() {
        let err = ScanInputs::new(t2(2, 1, &[1.0, 1.0]), t2(2, 1, &[0.1, 0.0]), t2(2, 1, &[1.0, 1.0]), t2(2, 1, &[1.0, 1.0]))
            .unwrap_err();
        assert!(matches!(err, SsmError::NonPositiveDelta { token: 1, .. }));
        let err = ScanInputs::new(t2(2, 1, &[1.0, 1.0]), t2(1, 1, &[0.1]), t2(2, 1, &[1.0, 1.0]), t2(2, 1, &[1.0, 1.0]))
            .unwrap_err();
        assert!(matches!(err, SsmError::Shape { what: "delta", .. }));
        assert!(SsmCore::from_a(t2(1, 1, &[0.0]), Tensor::zeros(vec![1])).is_err());
    }

    #[test]
    fn kernel_geometric_powers() {
        // a = -ln 2 with delta = 1 gives abar = 0.5; pick b so bbar = 1.
        let a = -(2f64.ln());
        let core = SsmCore::from_a(t2(1, 1, &[a]), Tensor::zeros(vec![1])).unwrap();
        let (_, bbar_unit) = discretize(1.0, a, 1.0, Discretization::Zoh);
        let k = KernelMatrix::materialize(&core, &[1.0], &[1.0 / bbar_unit], &[1.0], 3).unwrap();
        let got = k.kbar.data();
        for (g, e) in got.iter().zip([1.0, 0.5, 0.25]) {
            assert!((g - e).abs() < 1e-14, "{got:?}");
        }
        let k1 = KernelMatrix::materialize(&core, &[1.0], &[2.0], &[3.0], 1).unwrap();
        assert!((k1.kbar.data()[0] - 3.0 * 2.0 * bbar_unit).abs() < 1e-14);
    }

    #[test]
    fn kernel_rejects_time_varying() {
        let core = SsmCore::<f64>::s4d(1, 1);
        let inp = ScanInputs::new(t2(2, 1, &[1.0, 2.0]), t2(2, 1, &[0.1, 0.2]), t2(2, 1, &[1.0, 1.0]), t2(2, 1, &[1.0, 1.0]))
            .unwrap();
        assert_eq!(KernelMatrix::from_inputs(&core, &inp), Err(SsmError::TimeVarying("delta")));
    }

    #[test]
    fn contribution_closed_forms() {
        // scalar state, delta a = -1 everywhere, C = 1, bbar = 1 → e^{-2} at distance 2
        let a = -1.0;
        let core = SsmCore::from_a(t2(1, 1, &[a]), Tensor::zeros(vec![1])).unwrap();
        let (_, bbar_unit) = discretize(1.0, a, 1.0, Discretization::Zoh);
        let b = 1.0 / bbar_unit;
        let inp = ScanInputs::new(
            t2(4, 1, &[0.0; 4]),
            t2(4, 1, &[1.0; 4]),
            t2(4, 1, &[b; 4]),
            t2(4, 1, &[1.0; 4]),
        )
        .unwrap();
        let v = contribution(&core, &inp, 1, 3).unwrap();
        assert!((v[0] - (-2.0f64).exp()).abs() < 1e-14);
        assert!((v[0] - 0.135_335).abs() < 1e-6);
        // p == q: C bbar + D
        let core_d = SsmCore::from_a(t2(1, 1, &[a]), Tensor::new(vec![1], vec![0.25]).unwrap()).unwrap();
        let v = contribution(&core_d, &inp, 2, 2).unwrap();
        assert!((v[0] - 1.25).abs() < 1e-14);
        assert!(matches!(contribution(&core, &inp, 3, 1), Err(SsmError::TokenPair { .. })));
    }

    #[test]
    fn decay_csv_rows() {
        let core = SsmCore::<f64>::s4d(2, 1);
        let inp = ScanInputs::new(
            Tensor::zeros(vec![3, 2]),
            Tensor::full(vec![3, 2], 0.5),
            Tensor::full(vec![3, 1], 1.0),
            Tensor::full(vec![3, 1], 1.0),
        )
        .unwrap();
        let prof = decay_profile(&core, &inp, 1).unwrap();
        assert_eq!(prof.len(), 2);
        let csv = decay_profile_csv(1, &prof);
        let lines: Vec<_> = csv.lines().collect();
        assert_eq!(lines[0], "p,q,channel,magnitude");
        assert_eq!(lines.len(), 1 + 2 * 2);
        assert!(lines[1].starts_with("1,1,0,"));
        assert!(lines[4].starts_with("1,2,1,"));
    }
}
