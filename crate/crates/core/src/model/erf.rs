//! Effective receptive fields: input-gradient magnitude of the center output.

use std::fmt;

use rand::Rng;

use super::layers::{Builder, Ctx, Linear, DT_INIT_RANGE, LINEAR_STD};
use super::net::MambaCsr;
use super::params::{Init, ParamId, ParamStore};
use super::{ModelError, Result};
use crate::autodiff::{Tape, Var};
use crate::pipeline::GrayU8;
use crate::rng::named_rng;
use crate::ssm::Discretization;
use crate::tensor::{Element, Tensor};
use crate::traj::{Direction, Trajectory};

/// Spatial center of an `h × w` map.
pub fn center(h: usize, w: usize) -> (usize, usize) {
    (h / 2, w / 2)
}

/// ERF of `f` at `input` (`[1, C, H, W]`): for every output channel, one
/// backward pass from the center activation; absolute input gradients are
/// summed over input channels, averaged over output channels and normalized
/// to sum 1. Returned row-major with the input's `H × W` extent.
pub fn erf_from_fn<T: Element>(input: &Tensor<T>, f: impl Fn(&Tape<T>, Var) -> Result<Var>) -> Result<Vec<f64>> {
    let s = input.shape();
    if s.len() != 4 || s[0] != 1 {
        return Err(ModelError::Config(format!("erf input must be [1, C, H, W], got {s:?}")));
    }
    let (cin, h, w) = (s[1], s[2], s[3]);
    let mut acc = vec![0.0; h * w];
    let mut c = 0;
    let mut cout = 1;
    while c < cout {
        let tape = Tape::new();
        let x = tape.leaf(input.clone());
        let y = f(&tape, x)?;
        let ys = tape.shape(y)?;
        if ys.len() != 4 || ys[0] != 1 {
            return Err(ModelError::Config(format!("erf output must be [1, C, H, W], got {ys:?}")));
        }
        cout = ys[1];
        let (oh, ow) = (ys[2], ys[3]);
        let (cy, cx) = center(oh, ow);
        let mut mask = Tensor::<T>::zeros(ys.clone());
        mask.data_mut()[(c * oh + cy) * ow + cx] = T::one();
        let picked = tape.sum(tape.mul(y, tape.constant(mask))?)?;
        let grads = tape.backward(picked)?;
        if let Some(g) = grads.get(x) {
            for ci in 0..cin {
                for (a, v) in acc.iter_mut().zip(&g.data()[ci * h * w..(ci + 1) * h * w]) {
                    *a += v.to_f64().unwrap_or(f64::NAN).abs() / cout as f64;
                }
            }
        }
        c += 1;
    }
    let total: f64 = acc.iter().sum();
    if !(total.is_finite() && total > 0.0) {
        return Err(ModelError::Config(format!("receptive field mass is {total}")));
    }
    acc.iter_mut().for_each(|a| *a /= total);
    Ok(acc)
}

fn seeded_input<T: Element>(seed: u64, c: usize, size: usize) -> Tensor<T> {
    let mut rng = named_rng(seed, "erf.input");
    let v: Vec<f64> = (0..c * size * size).map(|_| rng.random::<f64>()).collect();
    Tensor::from_f64(vec![1, c, size, size], &v).expect("shape matches data")
}

/// ERF of the full network on a seeded `size × size` input.
pub fn erf_map<T: Element>(model: &MambaCsr<T>, size: usize, seed: u64) -> Result<Vec<f64>> {
    let x = seeded_input::<T>(seed, 3, size);
    erf_from_fn(&x, |tape, xi| {
        let vars = model.params.bind_frozen(tape);
        model.forward(tape, &vars, xi)
    })
}

/// Scan arrangement of a [`ScanProbe`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ProbeKind {
    /// Row-major scan and its flip.
    Sequential,
    /// Windowed row-major scan and its flip.
    Window,
    /// Windowed horizontal pair followed by a sequential vertical pair.
    Hierarchical,
    /// A single row-major scan with no flip.
    ForwardOnly,
}

impl ProbeKind {
    pub const PANELS: [ProbeKind; 3] = [ProbeKind::Sequential, ProbeKind::Window, ProbeKind::Hierarchical];

    fn stages(self, h: usize, w: usize, window: usize) -> Result<Vec<Vec<Trajectory>>> {
        let pair = |t: Trajectory| {
            let f = t.flip();
            vec![t, f]
        };
        let seq = |d| Trajectory::raster(h, w, d);
        let win = |d| Trajectory::window_raster(h, w, window, d);
        Ok(match self {
            ProbeKind::Sequential => vec![pair(seq(Direction::Horizontal))],
            ProbeKind::Window => vec![pair(win(Direction::Horizontal)?)],
            ProbeKind::Hierarchical => vec![pair(win(Direction::Horizontal)?), pair(seq(Direction::Vertical))],
            ProbeKind::ForwardOnly => vec![vec![seq(Direction::Horizontal)]],
        })
    }
}

impl fmt::Display for ProbeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ProbeKind::Sequential => "sequential",
            ProbeKind::Window => "window",
            ProbeKind::Hierarchical => "hierarchical",
            ProbeKind::ForwardOnly => "forward-only",
        })
    }
}

#[derive(Debug, Clone)]
struct ProbeStage {
    x_proj: Linear,
    dt_proj: Linear,
    a_log: Vec<ParamId>,
    d: Vec<ParamId>,
    trajs: Vec<Trajectory>,
}

/// Single-channel pure-scan model on a fixed `h × w` grid: a pointwise lift,
/// one or two scan stages and a pointwise readout.
#[derive(Debug, Clone)]
pub struct ScanProbe {
    pub kind: ProbeKind,
    pub height: usize,
    pub width: usize,
    pub params: ParamStore<f64>,
    lift: Linear,
    stages: Vec<ProbeStage>,
    readout: Linear,
}

const PROBE_INNER: usize = 4;
const PROBE_STATE: usize = 4;

impl ScanProbe {
    pub fn new(kind: ProbeKind, height: usize, width: usize, window: usize, seed: u64) -> Result<Self> {
        let (di, ds) = (PROBE_INNER, PROBE_STATE);
        let mut params = ParamStore::new();
        let mut bd = Builder {
            store: &mut params,
            rng: named_rng(seed, "erf.probe"),
        };
        let lift = Linear {
            w: bd.param("lift.weight".into(), &[di, 1], Init::TruncNormal(1.0))?,
            b: None,
        };
        let mut stages = Vec::new();
        for (s, trajs) in kind.stages(height, width, window)?.into_iter().enumerate() {
            let x_proj = Linear {
                w: bd.param(format!("stage{s}.x_proj.weight"), &[1 + 2 * ds, di], Init::TruncNormal(0.5))?,
                b: None,
            };
            let (lo, hi) = DT_INIT_RANGE;
            let dt_proj = Linear {
                w: bd.param(format!("stage{s}.dt_proj.weight"), &[di, 1], Init::TruncNormal(LINEAR_STD))?,
                b: Some(bd.param(format!("stage{s}.dt_proj.bias"), &[di], Init::InvSoftplusLogUniform(lo, hi))?),
            };
            let mut a_log = Vec::new();
            let mut d = Vec::new();
            for k in 0..trajs.len() {
                a_log.push(bd.param(format!("stage{s}.dir{k}.A_log"), &[di, ds], Init::S4dLog)?);
                d.push(bd.param(format!("stage{s}.dir{k}.D"), &[di], Init::Ones)?);
            }
            stages.push(ProbeStage {
                x_proj,
                dt_proj,
                a_log,
                d,
                trajs,
            });
        }
        let readout = Linear {
            w: bd.param("readout.weight".into(), &[1, di], Init::TruncNormal(1.0))?,
            b: None,
        };
        Ok(ScanProbe {
            kind,
            height,
            width,
            params,
            lift,
            stages,
            readout,
        })
    }

    /// Number of scans one forward pass runs.
    pub fn scan_count(&self) -> usize {
        self.stages.iter().map(|s| s.trajs.len()).sum()
    }

    /// `x`: `[1, 1, H, W]` → `[1, 1, H, W]`.
    pub fn forward(&self, tape: &Tape<f64>, vars: &[Var], x: Var) -> Result<Var> {
        let cx = Ctx { tape, vars };
        let t = tape;
        let ds = PROBE_STATE;
        let mut u = self.lift.forward(&cx, t.nchw_to_tokens(x)?)?;
        for st in &self.stages {
            let dbl = st.x_proj.forward(&cx, u)?;
            let dt = t.narrow_last(dbl, 0, 1)?;
            let b = t.narrow_last(dbl, 1, ds)?;
            let c = t.narrow_last(dbl, 1 + ds, ds)?;
            let delta = t.softplus(st.dt_proj.forward(&cx, dt)?)?;
            let mut acc: Option<Var> = None;
            for (k, traj) in st.trajs.iter().enumerate() {
                let g = |v: Var| t.gather_tokens(v, traj);
                let y = t.selective_scan(
                    g(u)?,
                    g(delta)?,
                    g(b)?,
                    g(c)?,
                    cx.v(st.a_log[k]),
                    cx.v(st.d[k]),
                    Discretization::Zoh,
                )?;
                let y = t.scatter_tokens(y, traj)?;
                acc = Some(match acc {
                    Some(a) => t.add(a, y)?,
                    None => y,
                });
            }
            u = acc.expect("every stage has a trajectory");
        }
        let y = self.readout.forward(&cx, u)?;
        Ok(t.tokens_to_nchw(y, self.height, self.width)?)
    }

    /// ERF on a seeded input.
    pub fn erf(&self, seed: u64) -> Result<Vec<f64>> {
        if self.height != self.width {
            return Err(ModelError::Config("probe ERF uses square grids".into()));
        }
        let x = seeded_input::<f64>(seed, 1, self.height);
        erf_from_fn(&x, |tape, xi| {
            let vars = self.params.bind_frozen(tape);
            self.forward(tape, &vars, xi)
        })
    }
}

/// Side-by-side panels, each scaled so its maximum is white, separated by a
/// two-pixel mid-gray gutter.
pub fn erf_panel(maps: &[&[f64]], h: usize, w: usize) -> Result<GrayU8> {
    const GUTTER: usize = 2;
    if maps.is_empty() || maps.iter().any(|m| m.len() != h * w) {
        return Err(ModelError::Config(format!("every panel must hold {h}x{w} values")));
    }
    let n = maps.len();
    let width = n * w + (n - 1) * GUTTER;
    let mut data = vec![128u8; h * width];
    for (p, m) in maps.iter().enumerate() {
        let max = m.iter().copied().fold(0.0, f64::max);
        let x0 = p * (w + GUTTER);
        for y in 0..h {
            for x in 0..w {
                let v = if max > 0.0 { m[y * w + x] / max } else { 0.0 };
                data[y * width + x0 + x] = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
            }
        }
    }
    Ok(GrayU8::new(h, width, data)?)
}

/// One ERF map per probe kind.
pub type ProbeMaps = Vec<(ProbeKind, Vec<f64>)>;

/// ERF maps for the three comparison probes plus the combined panel image.
pub fn probe_report(size: usize, window: usize, seed: u64) -> Result<(ProbeMaps, GrayU8)> {
    let mut maps = Vec::new();
    for kind in ProbeKind::PANELS {
        let probe = ScanProbe::new(kind, size, size, window, seed)?;
        maps.push((kind, probe.erf(seed)?));
    }
    let refs: Vec<&[f64]> = maps.iter().map(|(_, m)| m.as_slice()).collect();
    let panel = erf_panel(&refs, size, size)?;
    Ok((maps, panel))
}
