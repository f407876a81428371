//! Adam and the single-image overfitting loop.

use log::{debug, info};

use super::net::MambaCsr;
use super::params::ParamStore;
use super::{ModelError, Result};
use crate::autodiff::{Gradients, Tape, Var};
use crate::pipeline::augment::crop;
use crate::pipeline::jpeg::{degrade, DegradeSpec};
use crate::pipeline::ImageU8;
use crate::tensor::{Element, Tensor};

#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.99,
            eps: 1e-8,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> u32 {
        self.step
    }

    /// Updates each tensor in place from its gradient; `None` leaves it as is.
    pub fn update<T: Element>(&mut self, params: &mut [&mut Tensor<T>], grads: &[Option<&Tensor<T>>]) {
        assert_eq!(params.len(), grads.len(), "one gradient slot per parameter");
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![0.0; p.numel()]).collect();
            self.v = self.m.clone();
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let Some(g) = g else { continue };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, (pv, gv)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                let gv = gv.to_f64().unwrap_or(f64::NAN);
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * gv;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * gv * gv;
                let upd = self.lr * (m[j] / bc1) / ((v[j] / bc2).sqrt() + self.eps);
                let nv = pv.to_f64().unwrap_or(f64::NAN) - upd;
                *pv = T::from_f64(nv).unwrap_or_else(T::nan);
            }
        }
    }

    pub fn step_store<T: Element>(&mut self, store: &mut ParamStore<T>, vars: &[Var], grads: &Gradients<T>) {
        let gs: Vec<Option<Tensor<T>>> = vars.iter().map(|v| grads.get(*v).cloned()).collect();
        let refs: Vec<Option<&Tensor<T>>> = gs.iter().map(Option::as_ref).collect();
        let mut ps: Vec<&mut Tensor<T>> = store.values_mut().collect();
        self.update(&mut ps, &refs);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyTrainReport {
    /// L1 loss before each update.
    pub losses: Vec<f64>,
    pub lr_height: usize,
    pub lr_width: usize,
}

impl ToyTrainReport {
    pub fn initial(&self) -> f64 {
        self.losses.first().copied().unwrap_or(f64::NAN)
    }

    pub fn best(&self) -> f64 {
        self.losses.iter().copied().fold(f64::INFINITY, f64::min)
    }

    /// First step whose loss is at most `fraction` of the initial loss.
    pub fn reached(&self, fraction: f64) -> Option<usize> {
        let target = fraction * self.initial();
        self.losses.iter().position(|&l| l <= target)
    }
}

/// Degrades `hr` once and fits `model` to map the result back onto `hr`
/// with Adam on the L1 loss.
pub fn train_toy<T: Element>(
    model: &mut MambaCsr<T>,
    hr: &ImageU8,
    spec: &DegradeSpec,
    steps: usize,
    lr: f64,
) -> Result<ToyTrainReport> {
    let s = spec.scale;
    if s != model.config.scale {
        return Err(ModelError::Config(format!(
            "degradation scale {s} does not match model scale {}",
            model.config.scale
        )));
    }
    let (h, w) = (hr.height() / s * s, hr.width() / s * s);
    if h == 0 || w == 0 {
        return Err(ModelError::Config(format!("HR image {}x{} smaller than scale {s}", hr.height(), hr.width())));
    }
    let hr = crop(hr, 0, 0, h, w)?;
    let lr_img = degrade(&hr, spec)?;
    let x = lr_img.to_tensor::<T>();
    let target = hr.to_tensor::<T>();
    info!(
        "train_toy: lr {}x{} -> hr {h}x{w}, {} params, {steps} steps at lr {lr}",
        lr_img.height(),
        lr_img.width(),
        model.params.numel()
    );
    let mut opt = Adam::new(lr);
    let mut losses = Vec::with_capacity(steps);
    for step in 0..steps {
        let tape = Tape::new();
        let vars = model.params.bind(&tape);
        let xi = tape.constant(x.clone());
        let yi = tape.constant(target.clone());
        let y = model.forward(&tape, &vars, xi)?;
        let loss = tape.l1_loss(y, yi)?;
        let value = tape.value(loss)?.item().and_then(|v| v.to_f64()).unwrap_or(f64::NAN);
        if !value.is_finite() {
            return Err(ModelError::NonFiniteLoss { step, value });
        }
        losses.push(value);
        let grads = tape.backward(loss)?;
        opt.step_store(&mut model.params, &vars, &grads);
        if step % 50 == 0 || step + 1 == steps {
            info!("step {step}: l1 {value:.6}");
        } else {
            debug!("step {step}: l1 {value:.6}");
        }
    }
    Ok(ToyTrainReport {
        losses,
        lr_height: lr_img.height(),
        lr_width: lr_img.width(),
    })
}
