//! The full restoration network.

use super::layers::{cross_scale_fuse, Builder, Conv, Ctx, Rlmb, Rlmg, ScanPlan};
use super::params::{load_checkpoint, save_checkpoint, ParamStore};
use super::{ModelConfig, ModelError, Result};
use crate::autodiff::{central_difference, max_relative_error, probe, GradCheckReport, Tape, Var};
use crate::pipeline::ImageU8;
use crate::rng::named_rng;
use crate::tensor::{Element, Tensor};

/// Half-scale branch: its own shallow conv and group, plus the fusion block.
#[derive(Debug, Clone)]
pub struct CrossBranch {
    pub sfe: Conv,
    pub group: Rlmg,
    pub fusion: Rlmb,
}

#[derive(Debug, Clone)]
pub struct MambaCsr<T: Element> {
    pub config: ModelConfig,
    pub params: ParamStore<T>,
    pub sfe: Conv,
    pub groups: Vec<Rlmg>,
    pub tail: Conv,
    pub head: Conv,
    pub out: Conv,
    pub cross: Option<CrossBranch>,
}

impl<T: Element> MambaCsr<T> {
    /// Builds and initializes a network; values are drawn in f64 and cast, so
    /// the same seed gives matching weights at either precision.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let c = config.channels;
        let mut params = ParamStore::new();
        let mut bd = Builder {
            store: &mut params,
            rng: named_rng(seed, "model.init"),
        };
        let sfe = Conv::build(&mut bd, "sfe", 3, c, 3, 1)?;
        let groups = (0..config.groups)
            .map(|g| Rlmg::build(&mut bd, &format!("groups.{g}"), &config))
            .collect::<Result<Vec<_>>>()?;
        let tail = Conv::build(&mut bd, "tail", c, c, 3, 1)?;
        let head = Conv::build(&mut bd, "head", c, c * config.scale * config.scale, 3, 1)?;
        let out = Conv::build(&mut bd, "out", c, 3, 3, 1)?;
        let cross = if config.cross_scale {
            Some(CrossBranch {
                sfe: Conv::build(&mut bd, "cross.sfe", 3, c, 3, 1)?,
                group: Rlmg::build(&mut bd, "cross.group", &config)?,
                fusion: Rlmb::build(&mut bd, "cross.fusion", &config)?,
            })
        } else {
            None
        };
        Ok(MambaCsr {
            config,
            params,
            sfe,
            groups,
            tail,
            head,
            out,
            cross,
        })
    }

    /// Same network with parameters converted to another precision.
    pub fn cast<U: Element>(&self) -> MambaCsr<U> {
        MambaCsr {
            config: self.config.clone(),
            params: self.params.cast(),
            sfe: self.sfe.clone(),
            groups: self.groups.clone(),
            tail: self.tail.clone(),
            head: self.head.clone(),
            out: self.out.clone(),
            cross: self.cross.clone(),
        }
    }

    pub fn plan(&self) -> ScanPlan {
        ScanPlan::from_config(&self.config)
    }

    /// `x`: `[N, 3, H, W]` → `[N, 3, s·H, s·W]`, with `vars` from
    /// [`ParamStore::bind`] or [`ParamStore::bind_frozen`] on `tape`.
    pub fn forward(&self, tape: &Tape<T>, vars: &[Var], x: Var) -> Result<Var> {
        let cx = Ctx { tape, vars };
        let t = tape;
        let shape = t.shape(x)?;
        if shape.len() != 4 || shape[1] != 3 || shape[2] == 0 || shape[3] == 0 {
            return Err(ModelError::Config(format!("expected [N, 3, H, W] input with H, W > 0, got {shape:?}")));
        }
        let (h0, w0) = (shape[2], shape[3]);
        let plan = self.plan();
        let s = self.config.scale;

        let (pb, pr) = if self.cross.is_some() { (h0 % 2, w0 % 2) } else { (0, 0) };
        let (h, w) = (h0 + pb, w0 + pr);
        let mut x = x;
        if pb + pr > 0 {
            if h0 == 1 || w0 == 1 {
                return Err(ModelError::Config(format!("cross-scale branch needs extents of at least 2, got {h0}x{w0}")));
            }
            x = t.pad_reflect(x, pb, pr)?;
        }

        let f0 = self.sfe.forward(&cx, x)?;
        let down = match &self.cross {
            Some(cb) => {
                let xd = t.resize_bicubic(x, h / 2, w / 2)?;
                let fd = cb.sfe.forward(&cx, xd)?;
                Some(cb.group.forward(&cx, fd, &plan, 0)?)
            }
            None => None,
        };
        let bpg = self.config.blocks_per_group;
        let mut f = f0;
        for (g, group) in self.groups.iter().enumerate() {
            f = group.forward(&cx, f, &plan, g * bpg)?;
            if g == 0 {
                if let (Some(cb), Some(d)) = (&self.cross, down) {
                    f = cross_scale_fuse(&cx, &cb.fusion, f, d, &plan)?;
                }
            }
        }
        let f1 = t.add(self.tail.forward(&cx, f)?, f0)?;
        let up = t.pixel_shuffle(self.head.forward(&cx, f1)?, s)?;
        let y = self.out.forward(&cx, up)?;
        if (h, w) != (h0, w0) {
            Ok(t.crop(y, h0 * s, w0 * s)?)
        } else {
            Ok(y)
        }
    }

    /// Forward pass without gradient tracking.
    pub fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let tape = Tape::new();
        let vars = self.params.bind_frozen(&tape);
        let xi = tape.constant(x.clone());
        let y = self.forward(&tape, &vars, xi)?;
        Ok(tape.value(y)?.as_ref().clone())
    }

    pub fn restore_image(&self, img: &ImageU8) -> Result<ImageU8> {
        Ok(ImageU8::from_tensor(&self.infer(&img.to_tensor())?)?)
    }

    pub fn save(&self) -> Result<Vec<u8>> {
        save_checkpoint(&self.params)
    }

    /// Builds the network for `config` and fills it from checkpoint bytes.
    pub fn load(config: ModelConfig, bytes: &[u8]) -> Result<Self> {
        let mut m = Self::new(config, 0)?;
        m.params.assign(load_checkpoint(bytes)?)?;
        Ok(m)
    }
}

impl MambaCsr<f64> {
    fn probe_loss(&self, params: &ParamStore<f64>, x: &Tensor<f64>) -> Result<f64> {
        let tape = Tape::new();
        let vars = params.bind_frozen(&tape);
        let xv = tape.constant(x.clone());
        let y = self.forward(&tape, &vars, xv)?;
        let l = probe(&tape, y)?;
        Ok(tape.value(l)?.data()[0])
    }

    /// Compares analytic gradients of a random-weighted output sum against
    /// central differences, for the input (named `"input"`) and every
    /// parameter tensor.
    pub fn grad_check(&self, x: &Tensor<f64>, eps: f64) -> Result<Vec<(String, GradCheckReport)>> {
        let tape = Tape::new();
        let vars = self.params.bind(&tape);
        let xv = tape.leaf(x.clone());
        let y = self.forward(&tape, &vars, xv)?;
        let loss = probe(&tape, y)?;
        let grads = tape.backward(loss)?;
        let analytic = |v: Var, n: usize| grads.get(v).map_or_else(|| vec![0.0; n], |g| g.data().to_vec());

        let mut failed: Option<ModelError> = None;
        let mut record = |r: Result<f64>| match r {
            Ok(v) => v,
            Err(e) => {
                failed.get_or_insert(e);
                f64::NAN
            }
        };
        let mut out = Vec::new();
        let num = central_difference(x.data(), eps, |d| {
            let xp = Tensor::new(x.shape().to_vec(), d.to_vec()).expect("same shape");
            record(self.probe_loss(&self.params, &xp))
        });
        out.push(("input".to_string(), report(analytic(xv, x.numel()), num)));
        for id in self.params.ids() {
            let base = self.params.get(id).clone();
            let mut store = self.params.clone();
            let num = central_difference(base.data(), eps, |d| {
                store.get_mut(id).data_mut().copy_from_slice(d);
                record(self.probe_loss(&store, x))
            });
            out.push((self.params.name(id).to_string(), report(analytic(vars[id.index()], base.numel()), num)));
        }
        match failed {
            Some(e) => Err(e),
            None => Ok(out),
        }
    }
}

fn report(analytic: Vec<f64>, numeric: Vec<f64>) -> GradCheckReport {
    let (max_rel_err, worst_index) = max_relative_error(&analytic, &numeric);
    GradCheckReport {
        max_rel_err,
        worst_index,
        analytic,
        numeric,
    }
}
