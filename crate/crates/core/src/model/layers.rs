//! Building blocks: convolution, projections, the two-direction scan module,
//! channel attention, residual blocks and groups, and cross-scale fusion.

use std::rc::Rc;

use rand_chacha::ChaCha8Rng;

use super::params::{Init, ParamId, ParamStore};
use super::{ModelConfig, Result, ScanMode};
use crate::autodiff::{Tape, Var};
use crate::ssm::Discretization;
use crate::tensor::Element;
use crate::traj::{cross_scale_interleave, schedule_for_block, Direction, ScanSchedule, Trajectory};

pub const LN_EPS: f64 = 1e-6;
pub const LINEAR_STD: f64 = 0.02;
pub const DT_INIT_RANGE: (f64, f64) = (1e-3, 0.1);

/// Creates parameters in a fixed order from one random stream.
pub struct Builder<'a, T: Element> {
    pub store: &'a mut ParamStore<T>,
    pub rng: ChaCha8Rng,
}

impl<T: Element> Builder<'_, T> {
    pub fn param(&mut self, name: String, shape: &[usize], init: Init) -> Result<ParamId> {
        let value = init.sample(&mut self.rng, shape);
        self.store.add(name, value)
    }
}

/// Parameters bound to a tape, indexed by [`ParamId`].
#[derive(Clone, Copy)]
pub struct Ctx<'a, T: Element> {
    pub tape: &'a Tape<T>,
    pub vars: &'a [Var],
}

impl<T: Element> Ctx<'_, T> {
    pub fn v(&self, id: ParamId) -> Var {
        self.vars[id.index()]
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    pub fn build<T: Element>(bd: &mut Builder<T>, name: &str, inp: usize, out: usize, bias: bool) -> Result<Self> {
        let w = bd.param(format!("{name}.weight"), &[out, inp], Init::TruncNormal(LINEAR_STD))?;
        let b = if bias {
            Some(bd.param(format!("{name}.bias"), &[out], Init::Zeros)?)
        } else {
            None
        };
        Ok(Linear { w, b })
    }

    pub fn forward<T: Element>(&self, cx: &Ctx<T>, x: Var) -> Result<Var> {
        Ok(cx.tape.linear(x, cx.v(self.w), self.b.map(|b| cx.v(b)))?)
    }
}

/// Stride-1 convolution with size-preserving zero padding.
#[derive(Debug, Clone)]
pub struct Conv {
    pub w: ParamId,
    pub b: ParamId,
    pub in_c: usize,
    pub out_c: usize,
    pub k: usize,
    pub groups: usize,
}

impl Conv {
    pub fn build<T: Element>(
        bd: &mut Builder<T>,
        name: &str,
        in_c: usize,
        out_c: usize,
        k: usize,
        groups: usize,
    ) -> Result<Self> {
        let fan_in = in_c / groups * k * k;
        let w = bd.param(format!("{name}.weight"), &[out_c, in_c / groups, k, k], Init::FanIn(fan_in))?;
        let b = bd.param(format!("{name}.bias"), &[out_c], Init::Zeros)?;
        Ok(Conv {
            w,
            b,
            in_c,
            out_c,
            k,
            groups,
        })
    }

    pub fn forward<T: Element>(&self, cx: &Ctx<T>, x: Var) -> Result<Var> {
        Ok(cx.tape.conv2d(x, cx.v(self.w), Some(cx.v(self.b)), self.k / 2, self.groups)?)
    }

    /// Multiply-accumulates on an `h × w` map.
    pub fn macs(&self, h: usize, w: usize) -> u64 {
        (h * w * self.out_c * (self.in_c / self.groups) * self.k * self.k) as u64
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn build<T: Element>(bd: &mut Builder<T>, name: &str, c: usize) -> Result<Self> {
        Ok(LayerNorm {
            gamma: bd.param(format!("{name}.weight"), &[c], Init::Ones)?,
            beta: bd.param(format!("{name}.bias"), &[c], Init::Zeros)?,
        })
    }

    pub fn forward<T: Element>(&self, cx: &Ctx<T>, x: Var) -> Result<Var> {
        Ok(cx.tape.layer_norm(x, cx.v(self.gamma), cx.v(self.beta), LN_EPS)?)
    }
}

/// Scan settings shared by every block of a network.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ScanPlan {
    pub mode: ScanMode,
    pub window: usize,
    pub seq_window: usize,
}

impl ScanPlan {
    pub fn from_config(cfg: &ModelConfig) -> Self {
        ScanPlan {
            mode: cfg.scan_mode,
            window: cfg.window,
            seq_window: cfg.seq_window,
        }
    }

    /// Trajectories for global block `k` on an `h × w` grid.
    pub fn trajectories(&self, k: usize, h: usize, w: usize) -> Result<Vec<Trajectory>> {
        let s = schedule_for_block(k, self.window);
        let mut out = s.pair(h, w, self.seq_window)?.to_vec();
        if self.mode == ScanMode::FourDir {
            let other = match s.direction {
                Direction::Horizontal => Direction::Vertical,
                Direction::Vertical => Direction::Horizontal,
            };
            let s2 = ScanSchedule { direction: other, ..s };
            out.extend(s2.pair(h, w, self.seq_window)?);
        }
        Ok(out)
    }

    /// Plain raster trajectories over a pseudo-grid, used by the fusion block.
    pub fn raster_trajectories(&self, h: usize, w: usize) -> Vec<Trajectory> {
        let t = Trajectory::raster(h, w, Direction::Horizontal);
        let f = t.flip();
        let mut out = vec![t, f];
        if self.mode == ScanMode::FourDir {
            let v = Trajectory::raster(h, w, Direction::Vertical);
            let vf = v.flip();
            out.extend([v, vf]);
        }
        out
    }
}

/// Two-dimensional selective scan module with local windows.
#[derive(Debug, Clone)]
pub struct Ss2d {
    pub in_proj: Linear,
    pub dw: Conv,
    pub x_proj: Linear,
    pub dt_proj: Linear,
    pub a_log: Vec<ParamId>,
    pub d: Vec<ParamId>,
    pub out_norm: LayerNorm,
    pub out_proj: Linear,
    pub d_inner: usize,
    pub d_state: usize,
    pub dt_rank: usize,
}

impl Ss2d {
    pub fn build<T: Element>(bd: &mut Builder<T>, name: &str, cfg: &ModelConfig) -> Result<Self> {
        let (c, di, ds, r) = (cfg.channels, cfg.d_inner(), cfg.d_state, cfg.dt_rank());
        let in_proj = Linear::build(bd, &format!("{name}.in_proj"), c, 2 * di, false)?;
        let dw = Conv::build(bd, &format!("{name}.conv"), di, di, 3, di)?;
        let x_proj = Linear::build(bd, &format!("{name}.x_proj"), di, r + 2 * ds, false)?;
        let dt_w = bd.param(format!("{name}.dt_proj.weight"), &[di, r], Init::TruncNormal(LINEAR_STD))?;
        let (lo, hi) = DT_INIT_RANGE;
        let dt_b = bd.param(format!("{name}.dt_proj.bias"), &[di], Init::InvSoftplusLogUniform(lo, hi))?;
        let dt_proj = Linear { w: dt_w, b: Some(dt_b) };
        let mut a_log = Vec::new();
        let mut d = Vec::new();
        for k in 0..cfg.scan_mode.scans_per_block() {
            a_log.push(bd.param(format!("{name}.dir{k}.A_log"), &[di, ds], Init::S4dLog)?);
            d.push(bd.param(format!("{name}.dir{k}.D"), &[di], Init::Ones)?);
        }
        let out_norm = LayerNorm::build(bd, &format!("{name}.out_norm"), di)?;
        let out_proj = Linear::build(bd, &format!("{name}.out_proj"), di, c, false)?;
        Ok(Ss2d {
            in_proj,
            dw,
            x_proj,
            dt_proj,
            a_log,
            d,
            out_norm,
            out_proj,
            d_inner: di,
            d_state: ds,
            dt_rank: r,
        })
    }

    /// `x`: `[N, h·w, C]` tokens; one scan per trajectory, outputs summed.
    pub fn forward<T: Element>(&self, cx: &Ctx<T>, x: Var, h: usize, w: usize, trajs: &[Trajectory]) -> Result<Var> {
        let t = cx.tape;
        let (di, ds, r) = (self.d_inner, self.d_state, self.dt_rank);
        assert_eq!(trajs.len(), self.a_log.len(), "one trajectory per direction slot");
        let xz = self.in_proj.forward(cx, x)?;
        let xs = t.narrow_last(xz, 0, di)?;
        let z = t.narrow_last(xz, di, di)?;
        let xs = t.tokens_to_nchw(xs, h, w)?;
        let xs = t.silu(self.dw.forward(cx, xs)?)?;
        let xs = t.nchw_to_tokens(xs)?;
        // per-token projections commute with token reordering, so they run once
        let dbl = self.x_proj.forward(cx, xs)?;
        let dt = t.narrow_last(dbl, 0, r)?;
        let b = t.narrow_last(dbl, r, ds)?;
        let c = t.narrow_last(dbl, r + ds, ds)?;
        let delta = t.softplus(self.dt_proj.forward(cx, dt)?)?;
        let mut acc: Option<Var> = None;
        for (k, traj) in trajs.iter().enumerate() {
            let g = |v: Var| t.gather_tokens(v, traj);
            let y = t.selective_scan(
                g(xs)?,
                g(delta)?,
                g(b)?,
                g(c)?,
                cx.v(self.a_log[k]),
                cx.v(self.d[k]),
                Discretization::Zoh,
            )?;
            let y = t.scatter_tokens(y, traj)?;
            acc = Some(match acc {
                Some(a) => t.add(a, y)?,
                None => y,
            });
        }
        let y = self.out_norm.forward(cx, acc.expect("at least one trajectory"))?;
        let y = t.mul(y, t.silu(z)?)?;
        self.out_proj.forward(cx, y)
    }
}

/// Channel attention: two 3×3 convs then squeeze-and-excite rescaling.
#[derive(Debug, Clone)]
pub struct Cab {
    pub conv1: Conv,
    pub conv2: Conv,
    pub down: Conv,
    pub up: Conv,
}

impl Cab {
    pub fn build<T: Element>(bd: &mut Builder<T>, name: &str, cfg: &ModelConfig) -> Result<Self> {
        let (c, hid) = (cfg.channels, cfg.cab_hidden());
        Ok(Cab {
            conv1: Conv::build(bd, &format!("{name}.conv1"), c, c, 3, 1)?,
            conv2: Conv::build(bd, &format!("{name}.conv2"), c, c, 3, 1)?,
            down: Conv::build(bd, &format!("{name}.down"), c, hid, 1, 1)?,
            up: Conv::build(bd, &format!("{name}.up"), hid, c, 1, 1)?,
        })
    }

    /// Returns `(features, attention)` for an NCHW input.
    pub fn forward_parts<T: Element>(&self, cx: &Ctx<T>, x: Var) -> Result<(Var, Var)> {
        let t = cx.tape;
        let f = t.gelu(self.conv1.forward(cx, x)?)?;
        let f = self.conv2.forward(cx, f)?;
        let s = t.global_avg_pool(f)?;
        let s = t.gelu(self.down.forward(cx, s)?)?;
        let s = t.sigmoid(self.up.forward(cx, s)?)?;
        Ok((t.channel_scale(f, s)?, s))
    }

    pub fn forward<T: Element>(&self, cx: &Ctx<T>, x: Var) -> Result<Var> {
        Ok(self.forward_parts(cx, x)?.0)
    }
}

#[derive(Debug, Clone)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn build<T: Element>(bd: &mut Builder<T>, name: &str, cfg: &ModelConfig) -> Result<Self> {
        Ok(Mlp {
            fc1: Linear::build(bd, &format!("{name}.fc1"), cfg.channels, cfg.mlp_hidden(), true)?,
            fc2: Linear::build(bd, &format!("{name}.fc2"), cfg.mlp_hidden(), cfg.channels, true)?,
        })
    }

    pub fn forward<T: Element>(&self, cx: &Ctx<T>, x: Var) -> Result<Var> {
        let h = cx.tape.gelu(self.fc1.forward(cx, x)?)?;
        self.fc2.forward(cx, h)
    }
}

/// Residual block: `F = CAB(LN x) + SS2D(LN x) + s1·x`, `out = s2·F + MLP(LN F)`.
#[derive(Debug, Clone)]
pub struct Rlmb {
    pub ln1: LayerNorm,
    pub ss2d: Ss2d,
    pub cab: Cab,
    pub s1: ParamId,
    pub s2: ParamId,
    pub ln2: LayerNorm,
    pub mlp: Mlp,
}

impl Rlmb {
    pub fn build<T: Element>(bd: &mut Builder<T>, name: &str, cfg: &ModelConfig) -> Result<Self> {
        Ok(Rlmb {
            ln1: LayerNorm::build(bd, &format!("{name}.ln1"), cfg.channels)?,
            ss2d: Ss2d::build(bd, &format!("{name}.ss2d"), cfg)?,
            cab: Cab::build(bd, &format!("{name}.cab"), cfg)?,
            s1: bd.param(format!("{name}.s1"), &[], Init::Ones)?,
            s2: bd.param(format!("{name}.s2"), &[], Init::Ones)?,
            ln2: LayerNorm::build(bd, &format!("{name}.ln2"), cfg.channels)?,
            mlp: Mlp::build(bd, &format!("{name}.mlp"), cfg)?,
        })
    }

    /// `x`: `[N, h·w, C]` tokens.
    pub fn forward<T: Element>(&self, cx: &Ctx<T>, x: Var, h: usize, w: usize, trajs: &[Trajectory]) -> Result<Var> {
        let t = cx.tape;
        let xn = self.ln1.forward(cx, x)?;
        let a = self.ss2d.forward(cx, xn, h, w, trajs)?;
        let c = self.cab.forward(cx, t.tokens_to_nchw(xn, h, w)?)?;
        let c = t.nchw_to_tokens(c)?;
        let f = t.add(t.add(a, c)?, t.mul(x, cx.v(self.s1))?)?;
        let m = self.mlp.forward(cx, self.ln2.forward(cx, f)?)?;
        Ok(t.add(t.mul(f, cx.v(self.s2))?, m)?)
    }
}

/// Residual group: blocks, a 3×3 conv, and a skip from the group input.
#[derive(Debug, Clone)]
pub struct Rlmg {
    pub blocks: Vec<Rlmb>,
    pub conv: Conv,
}

impl Rlmg {
    pub fn build<T: Element>(bd: &mut Builder<T>, name: &str, cfg: &ModelConfig) -> Result<Self> {
        let blocks = (0..cfg.blocks_per_group)
            .map(|b| Rlmb::build(bd, &format!("{name}.blocks.{b}"), cfg))
            .collect::<Result<_>>()?;
        let conv = Conv::build(bd, &format!("{name}.conv"), cfg.channels, cfg.channels, 3, 1)?;
        Ok(Rlmg { blocks, conv })
    }

    /// `x`: NCHW. Block `b` uses the schedule of global index `first_block + b`.
    pub fn forward<T: Element>(&self, cx: &Ctx<T>, x: Var, plan: &ScanPlan, first_block: usize) -> Result<Var> {
        let t = cx.tape;
        let shape = t.shape(x)?;
        let (h, w) = (shape[2], shape[3]);
        let mut y = t.nchw_to_tokens(x)?;
        for (b, block) in self.blocks.iter().enumerate() {
            let trajs = plan.trajectories(first_block + b, h, w)?;
            y = block.forward(cx, y, h, w, &trajs)?;
        }
        let y = self.conv.forward(cx, t.tokens_to_nchw(y, h, w)?)?;
        Ok(t.add(y, x)?)
    }
}

/// Interleaves half-scale tokens with their four aligned full-scale tokens,
/// runs `block` over the sequence, keeps the full-scale positions and adds
/// them to `orig`. Both inputs are NCHW; `orig` has even extents.
pub fn cross_scale_fuse<T: Element>(cx: &Ctx<T>, block: &Rlmb, orig: Var, down: Var, plan: &ScanPlan) -> Result<Var> {
    let t = cx.tape;
    let os = t.shape(orig)?;
    let ds = t.shape(down)?;
    let (h, w) = (os[2], os[3]);
    if ds[1] != os[1] || ds[2] * 2 != h || ds[3] * 2 != w {
        return Err(crate::tensor::TensorError::shape(
            "cross_scale_fuse",
            format!("down {ds:?} does not align with orig {os:?}"),
        )
        .into());
    }
    let layout = cross_scale_interleave(h, w)?;
    let stacked = t.concat_rows(t.nchw_to_tokens(down)?, t.nchw_to_tokens(orig)?)?;
    let seq = t.select_rows(stacked, Rc::from(layout.gather_indices()))?;
    // the sequence is laid out as an (h/2) × (5w/2) grid for the block's convolutions
    let (gh, gw) = (h / 2, 5 * w / 2);
    let trajs = plan.raster_trajectories(gh, gw);
    let fused = block.forward(cx, seq, gh, gw, &trajs)?;
    let kept = t.select_rows(fused, Rc::from(layout.orig_slots()))?;
    Ok(t.add(orig, t.tokens_to_nchw(kept, h, w)?)?)
}
