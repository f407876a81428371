//! Central finite-difference checks against tape gradients.

use std::rc::Rc;

use rand::Rng;

use super::{Tape, Var};
use crate::rng::named_rng;
use crate::ssm::Discretization;
use crate::tensor::{Result, Tensor};
use crate::traj::{Direction, Trajectory};

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// `max_i |g_i - fd_i| / max(1, |fd_i|)`.
    pub max_rel_err: f64,
    pub worst_index: usize,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
}

/// `(f(x + eps e_i) - f(x - eps e_i)) / (2 eps)` for every coordinate.
pub fn central_difference(x: &[f64], eps: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            probe[i] = x[i] + eps;
            let hi = f(&probe);
            probe[i] = x[i] - eps;
            let lo = f(&probe);
            probe[i] = x[i];
            (hi - lo) / (2.0 * eps)
        })
        .collect()
}

/// Returns `(max error, index)` with error `|a - n| / max(1, |n|)`.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> (f64, usize) {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / n.abs().max(1.0))
        .enumerate()
        .fold((0.0, 0), |(best, bi), (i, e)| if e > best || e.is_nan() { (e, i) } else { (best, bi) })
}

/// Compares the tape gradient of the scalar `f(x)` with central differences.
pub fn grad_check<F>(f: F, x: &Tensor<f64>, eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&Tape<f64>, Var) -> Result<Var>,
{
    let tape = Tape::new();
    let xv = tape.leaf(x.clone());
    let loss = f(&tape, xv)?;
    let grads = tape.backward(loss)?;
    let analytic = grads
        .get(xv)
        .map(|g| g.data().to_vec())
        .unwrap_or_else(|| vec![0.0; x.numel()]);

    let mut failure = None;
    let numeric = central_difference(x.data(), eps, |probe| {
        let t = Tape::new();
        let input = t.constant(Tensor::new(x.shape().to_vec(), probe.to_vec()).expect("same shape"));
        match f(&t, input).and_then(|l| t.value(l)) {
            Ok(v) => v.data()[0],
            Err(e) => {
                failure.get_or_insert(e);
                f64::NAN
            }
        }
    });
    if let Some(e) = failure {
        return Err(e);
    }
    let (max_rel_err, worst_index) = max_relative_error(&analytic, &numeric);
    Ok(GradCheckReport {
        max_rel_err,
        worst_index,
        analytic,
        numeric,
    })
}

/// Tolerance for single-op checks at `eps = 1e-5`.
pub const OP_TOLERANCE: f64 = 1e-5;

/// One named entry of [`op_suite`].
#[derive(Debug, Clone)]
pub struct OpCheck {
    pub name: &'static str,
    pub report: GradCheckReport,
}

fn uniform(rng: &mut impl Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(lo..hi)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches")
}

/// Scalar probe `Σ y ⊙ r` with fixed pseudo-random `r`, so every output
/// element reaches the loss with a distinct weight.
pub fn probe(t: &Tape<f64>, y: Var) -> Result<Var> {
    let shape = t.shape(y)?;
    let mut rng = named_rng(0x5eed, "probe");
    let r = t.constant(uniform(&mut rng, &shape, -1.0, 1.0));
    let p = t.mul(y, r)?;
    t.sum(p)
}

type OpFn = Box<dyn Fn(&Tape<f64>, Var) -> Result<Var>>;

/// Checks every differentiable op against central differences, one operand
/// at a time with the others held constant.
pub fn op_suite(seed: u64, eps: f64) -> Result<Vec<OpCheck>> {
    let mut rng = named_rng(seed, "op_suite");
    let mut cases: Vec<(&'static str, Tensor<f64>, OpFn)> = Vec::new();
    macro_rules! case {
        ($name:expr, $x:expr, |$t:ident, $v:ident| $body:expr) => {
            cases.push(($name, $x, Box::new(move |$t: &Tape<f64>, $v: Var| -> Result<Var> { probe($t, $body) })));
        };
    }

    let other = uniform(&mut rng, &[2, 3], -1.0, 1.0);
    let o = other.clone();
    case!("add", uniform(&mut rng, &[2, 3], -1.0, 1.0), |t, x| t.add(x, t.constant(o.clone()))?);
    case!("add_scalar", uniform(&mut rng, &[], -1.0, 1.0), |t, x| {
        let c = t.constant(other.clone());
        t.add(c, x)?
    });
    let o = uniform(&mut rng, &[2, 3], -1.0, 1.0);
    case!("mul", uniform(&mut rng, &[2, 3], -1.0, 1.0), |t, x| t.mul(x, t.constant(o.clone()))?);
    case!("mul_self", uniform(&mut rng, &[2, 3], -1.0, 1.0), |t, x| t.mul(x, x)?);
    case!("scale", uniform(&mut rng, &[4], -1.0, 1.0), |t, x| t.scale(x, -1.7)?);
    case!("silu", uniform(&mut rng, &[6], -3.0, 3.0), |t, x| t.silu(x)?);
    case!("gelu", uniform(&mut rng, &[6], -3.0, 3.0), |t, x| t.gelu(x)?);
    case!("sigmoid", uniform(&mut rng, &[6], -3.0, 3.0), |t, x| t.sigmoid(x)?);
    case!("softplus", uniform(&mut rng, &[6], -3.0, 3.0), |t, x| t.softplus(x)?);
    case!("exp", uniform(&mut rng, &[6], -2.0, 1.0), |t, x| t.exp(x)?);

    let (lx, lw, lb) = (
        uniform(&mut rng, &[2, 3, 4], -1.0, 1.0),
        uniform(&mut rng, &[5, 4], -1.0, 1.0),
        uniform(&mut rng, &[5], -1.0, 1.0),
    );
    let (w, b) = (lw.clone(), lb.clone());
    case!("linear.x", lx.clone(), |t, x| t.linear(x, t.constant(w.clone()), Some(t.constant(b.clone())))?);
    let (xx, b) = (lx.clone(), lb.clone());
    case!("linear.w", lw.clone(), |t, w| t.linear(t.constant(xx.clone()), w, Some(t.constant(b.clone())))?);
    let (xx, w) = (lx, lw);
    case!("linear.b", lb, |t, b| t.linear(t.constant(xx.clone()), t.constant(w.clone()), Some(b))?);

    let (cx, cw, cb) = (
        uniform(&mut rng, &[2, 3, 5, 4], -1.0, 1.0),
        uniform(&mut rng, &[4, 3, 3, 3], -0.5, 0.5),
        uniform(&mut rng, &[4], -1.0, 1.0),
    );
    let (w, b) = (cw.clone(), cb.clone());
    case!("conv2d.x", cx.clone(), |t, x| t.conv2d(x, t.constant(w.clone()), Some(t.constant(b.clone())), 1, 1)?);
    let (xx, b) = (cx.clone(), cb.clone());
    case!("conv2d.w", cw.clone(), |t, w| t.conv2d(t.constant(xx.clone()), w, Some(t.constant(b.clone())), 1, 1)?);
    let (xx, w) = (cx.clone(), cw);
    case!("conv2d.b", cb, |t, b| t.conv2d(t.constant(xx.clone()), t.constant(w.clone()), Some(b), 1, 1)?);
    let dw = uniform(&mut rng, &[3, 1, 3, 3], -0.5, 0.5);
    let w = dw.clone();
    case!("conv2d_depthwise.x", cx.clone(), |t, x| t.conv2d(x, t.constant(w.clone()), None, 1, 3)?);
    let xx = cx.clone();
    case!("conv2d_depthwise.w", dw, |t, w| t.conv2d(t.constant(xx.clone()), w, None, 1, 3)?);
    let pw = uniform(&mut rng, &[2, 3, 1, 1], -1.0, 1.0);
    case!("conv2d_1x1.x", cx.clone(), |t, x| t.conv2d(x, t.constant(pw.clone()), None, 0, 1)?);

    let (nx, ng, nb) = (
        uniform(&mut rng, &[3, 5], -2.0, 2.0),
        uniform(&mut rng, &[5], 0.5, 1.5),
        uniform(&mut rng, &[5], -0.5, 0.5),
    );
    let (g, b) = (ng.clone(), nb.clone());
    case!("layer_norm.x", nx.clone(), |t, x| t.layer_norm(x, t.constant(g.clone()), t.constant(b.clone()), 1e-6)?);
    let (xx, b) = (nx.clone(), nb.clone());
    case!("layer_norm.gamma", ng.clone(), |t, g| t.layer_norm(t.constant(xx.clone()), g, t.constant(b.clone()), 1e-6)?);
    let (xx, g) = (nx, ng);
    case!("layer_norm.beta", nb, |t, b| t.layer_norm(t.constant(xx.clone()), t.constant(g.clone()), b, 1e-6)?);

    case!("global_avg_pool", cx.clone(), |t, x| t.global_avg_pool(x)?);
    let s = uniform(&mut rng, &[2, 3, 1, 1], -1.0, 1.0);
    let ss = s.clone();
    case!("channel_scale.x", cx.clone(), |t, x| t.channel_scale(x, t.constant(ss.clone()))?);
    let xx = cx.clone();
    case!("channel_scale.s", s, |t, s| t.channel_scale(t.constant(xx.clone()), s)?);
    case!("pixel_shuffle", uniform(&mut rng, &[1, 8, 2, 3], -1.0, 1.0), |t, x| t.pixel_shuffle(x, 2)?);

    let tokens = uniform(&mut rng, &[2, 6, 3], -1.0, 1.0);
    let idx: Rc<[usize]> = Rc::from(vec![4, 0, 4, 5, 1]);
    case!("select_rows", tokens.clone(), |t, x| t.select_rows(x, idx.clone())?);
    let traj = Trajectory::window_raster(2, 3, 2, Direction::Vertical).expect("valid window");
    let tr = traj.clone();
    case!("gather_tokens", tokens.clone(), |t, x| t.gather_tokens(x, &tr)?);
    case!("scatter_tokens", tokens.clone(), |t, x| t.scatter_tokens(x, &traj)?);
    let tail = uniform(&mut rng, &[2, 4, 3], -1.0, 1.0);
    let tl = tail.clone();
    case!("concat_rows.a", tokens.clone(), |t, x| t.concat_rows(x, t.constant(tl.clone()))?);
    let hd = tokens.clone();
    case!("concat_rows.b", tail, |t, x| t.concat_rows(t.constant(hd.clone()), x)?);
    case!("narrow_last", tokens.clone(), |t, x| t.narrow_last(x, 1, 2)?);
    case!("nchw_to_tokens", cx.clone(), |t, x| t.nchw_to_tokens(x)?);
    case!("tokens_to_nchw", tokens, |t, x| t.tokens_to_nchw(x, 2, 3)?);
    case!("pad_reflect", cx.clone(), |t, x| t.pad_reflect(x, 1, 2)?);
    case!("crop", cx.clone(), |t, x| t.crop(x, 3, 2)?);
    case!("resize_bicubic_down", cx.clone(), |t, x| t.resize_bicubic(x, 2, 3)?);
    case!("resize_bicubic_up", cx, |t, x| t.resize_bicubic(x, 7, 6)?);

    // differences of at least 0.2 keep every probe away from the kink
    let target = uniform(&mut rng, &[2, 4], -1.0, 1.0);
    let shift: Vec<f64> = (0..8).map(|_| rng.random_range(0.2..1.0) * if rng.random::<bool>() { 1.0 } else { -1.0 }).collect();
    let l1x = Tensor::new(vec![2, 4], target.data().iter().zip(&shift).map(|(a, s)| a + s).collect()).expect("shape");
    cases.push((
        "l1_loss",
        l1x,
        Box::new(move |t: &Tape<f64>, x: Var| t.l1_loss(x, t.constant(target.clone()))),
    ));
    cases.push(("sum", uniform(&mut rng, &[3, 2], -1.0, 1.0), Box::new(|t: &Tape<f64>, x: Var| t.sum(x))));

    let (n, l, din, ds) = (2, 5, 3, 2);
    let scan_args = [
        uniform(&mut rng, &[n, l, din], -1.0, 1.0),
        uniform(&mut rng, &[n, l, din], 0.15, 0.8),
        uniform(&mut rng, &[n, l, ds], -1.0, 1.0),
        uniform(&mut rng, &[n, l, ds], -1.0, 1.0),
        uniform(&mut rng, &[din, ds], -0.5, 1.0),
        uniform(&mut rng, &[din], -1.0, 1.0),
    ];
    const SCAN_NAMES: [[&str; 6]; 2] = [
        ["scan.u", "scan.delta", "scan.b", "scan.c", "scan.a_log", "scan.d"],
        ["scan_euler.u", "scan_euler.delta", "scan_euler.b", "scan_euler.c", "scan_euler.a_log", "scan_euler.d"],
    ];
    for (names, mode) in SCAN_NAMES.iter().zip([Discretization::Zoh, Discretization::Euler]) {
        for (slot, name) in names.iter().enumerate() {
            let args = scan_args.clone();
            cases.push((
                name,
                scan_args[slot].clone(),
                Box::new(move |t: &Tape<f64>, x: Var| {
                    let v: Vec<Var> = (0..6)
                        .map(|k| if k == slot { x } else { t.constant(args[k].clone()) })
                        .collect();
                    probe(t, t.selective_scan(v[0], v[1], v[2], v[3], v[4], v[5], mode)?)
                }),
            ));
        }
    }

    cases
        .into_iter()
        .map(|(name, x, f)| Ok(OpCheck { name, report: grad_check(f, &x, eps)? }))
        .collect()
}
