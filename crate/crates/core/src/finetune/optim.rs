//! AdamW, global-norm clipping and the inverse-square-root LR decay.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::params::global_norm;
use crate::real::Real;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct AdamW<R> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    t: u64,
    m: BTreeMap<String, Tensor<R>>,
    v: BTreeMap<String, Tensor<R>>,
}

impl<R: Real> AdamW<R> {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        AdamW {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            t: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    /// One update of every tensor visited by `visit`, at learning rate
    /// `lr * lr_mult`. Tensors without a gradient are left alone.
    pub fn step(
        &mut self,
        grads: &BTreeMap<String, Tensor<R>>,
        lr_mult: f64,
        visit: impl FnOnce(&mut dyn FnMut(&str, &mut Tensor<R>)),
    ) -> Result<()> {
        for (k, g) in grads {
            if !g.all_finite() {
                return Err(Error::NonFiniteInput(format!("gradient for `{k}` is non-finite")));
            }
        }
        self.t += 1;
        let lr = self.lr * lr_mult;
        let (b1, b2) = (self.beta1, self.beta2);
        let bc1 = 1.0 - b1.powi(self.t as i32);
        let bc2 = 1.0 - b2.powi(self.t as i32);
        let (eps, wd) = (self.eps, self.weight_decay);
        let (ms, vs) = (&mut self.m, &mut self.v);
        let mut update = |name: &str, p: &mut Tensor<R>| {
            let Some(g) = grads.get(name) else { return };
            let m = ms.entry(name.to_string()).or_insert_with(|| Tensor::zeros(g.shape()));
            let v = vs.entry(name.to_string()).or_insert_with(|| Tensor::zeros(g.shape()));
            let it = p
                .data_mut()
                .iter_mut()
                .zip(m.data_mut().iter_mut())
                .zip(v.data_mut().iter_mut())
                .zip(g.data());
            for (((pi, mi), vi), &gi) in it {
                let gf = gi.as_f64();
                let mf = b1 * mi.as_f64() + (1.0 - b1) * gf;
                let vf = b2 * vi.as_f64() + (1.0 - b2) * gf * gf;
                *mi = R::lit(mf);
                *vi = R::lit(vf);
                let mut x = pi.as_f64();
                x -= lr * wd * x;
                x -= lr * (mf / bc1) / ((vf / bc2).sqrt() + eps);
                *pi = R::lit(x);
            }
        };
        visit(&mut update);
        Ok(())
    }
}

/// Rescales `grads` in place to global norm at most `c`; returns the norm
/// before clipping.
pub fn clip_global_norm<R: Real>(grads: &mut BTreeMap<String, Tensor<R>>, c: f64) -> f64 {
    let n = global_norm(grads);
    if c > 0.0 && n > c {
        let s = R::lit(c / n);
        for g in grads.values_mut() {
            g.scale_in_place(s);
        }
    }
    n
}

/// `min(10 / sqrt(step), 1)` for 1-based `step`.
pub fn lr_multiplier(step: u64, decay: bool) -> f64 {
    if !decay || step == 0 {
        return 1.0;
    }
    (10.0 / (step as f64).sqrt()).min(1.0)
}
