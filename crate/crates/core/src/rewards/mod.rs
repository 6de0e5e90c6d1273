//! Differentiable rewards on `[3, h, w]` images in `[0, 1]`.
//!
//! Samples live in `[-1, 1]`; [`to_image`] maps them into reward space.

pub mod jpeg;
pub mod net;

use std::sync::Arc;

use crate::denoiser::Context;
use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::{Graph, Tensor, Var};

pub use jpeg::{psnr, JpegCodec, Rounding};
pub use net::{ConvNet, ConvNetConfig};

/// `clamp((x + 1) / 2, 0, 1)`.
pub fn to_image<R: Real>(g: &mut Graph<'_, R>, x0: Var) -> Var {
    let y = g.add_scalar(x0, R::one());
    let y = g.scale(y, R::lit(0.5));
    g.clamp(y, R::zero(), R::one())
}

pub fn to_image_value<R: Real>(x0: &Tensor<R>) -> Tensor<R> {
    x0.map(|v| ((v + R::one()) * R::lit(0.5)).max(R::zero()).min(R::one()))
}

/// Flat source indices of a `k * 90` degree counter-clockwise rotation of a
/// `[c, n, n]` image: `out[c, i, j] = x[c, j, n-1-i]` for one turn.
pub fn rotation_index(c: usize, n: usize, k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..c * n * n).collect();
    for _ in 0..k % 4 {
        let prev = idx.clone();
        for ch in 0..c {
            for i in 0..n {
                for j in 0..n {
                    idx[(ch * n + i) * n + j] = prev[(ch * n + j) * n + (n - 1 - i)];
                }
            }
        }
    }
    idx
}

/// Mean over 90, 180 and 270 degrees of `||x - rot(x)||^2`.
pub fn rotation_anticorr_reward<R: Real>(g: &mut Graph<'_, R>, x: Var) -> Result<Var> {
    let s = g.shape(x).to_vec();
    if s.len() != 3 || s[1] != s[2] {
        return Err(Error::Shape {
            op: "rotation_reward",
            detail: format!("needs a square [c, n, n] image, got {s:?}"),
        });
    }
    let mut total = None;
    for k in 1..4 {
        let r = g.gather(x, rotation_index(s[0], s[1], k).into(), &s);
        let d = g.sub(x, r);
        let sq = g.mul(d, d);
        let sum = g.sum(sq);
        total = Some(match total {
            None => sum,
            Some(t) => g.add(t, sum),
        });
    }
    Ok(g.scale(total.expect("three rotations"), R::lit(1.0 / 3.0)))
}

/// `log p(target | x)` under a frozen classifier.
pub fn classifier_reward<R: Real>(g: &mut Graph<'_, R>, net: &ConvNet<R>, x: Var, target: usize) -> Result<Var> {
    if target >= net.config.outputs {
        return Err(Error::invalid(format!(
            "target class {target} outside 0..{}",
            net.config.outputs
        )));
    }
    let logits = net.forward_frozen(g, x)?;
    let nll = net::neg_log_prob(g, logits, target);
    Ok(g.neg(nll))
}

/// The frozen scorer's scalar output.
pub fn scorer_reward<R: Real>(g: &mut Graph<'_, R>, net: &ConvNet<R>, x: Var) -> Result<Var> {
    if net.config.outputs != 1 {
        return Err(Error::invalid("scorer must have a single output"));
    }
    let y = net.forward_frozen(g, x)?;
    Ok(g.sum(y))
}

#[derive(Clone, Debug)]
pub enum RewardKind<R> {
    Jpeg(JpegCodec),
    /// Negated compressibility.
    Incompressibility(JpegCodec),
    Classifier { net: Arc<ConvNet<R>>, target: usize },
    Rotation,
    Scorer(Arc<ConvNet<R>>),
}

/// A named reward with its weight in a linear combination. All rewards
/// are maximized.
#[derive(Clone, Debug)]
pub struct RewardFn<R> {
    pub name: String,
    pub weight: f64,
    pub kind: RewardKind<R>,
}

impl<R: Real> RewardFn<R> {
    pub fn new(name: impl Into<String>, weight: f64, kind: RewardKind<R>) -> Self {
        RewardFn {
            name: name.into(),
            weight,
            kind,
        }
    }

    pub fn jpeg(quality: u32) -> Result<Self> {
        Ok(Self::new("jpeg", 1.0, RewardKind::Jpeg(JpegCodec::new(quality)?)))
    }

    pub fn incompressibility(quality: u32) -> Result<Self> {
        Ok(Self::new(
            "incompressibility",
            1.0,
            RewardKind::Incompressibility(JpegCodec::new(quality)?),
        ))
    }

    pub fn rotation() -> Self {
        Self::new("rotation", 1.0, RewardKind::Rotation)
    }

    pub fn weighted(mut self, w: f64) -> Self {
        self.weight = w;
        self
    }

    /// Unweighted reward of an image in `[0, 1]`.
    pub fn eval(&self, g: &mut Graph<'_, R>, image: Var, _c: Context) -> Result<Var> {
        match &self.kind {
            RewardKind::Jpeg(codec) => codec.reward(g, image),
            RewardKind::Incompressibility(codec) => {
                let r = codec.reward(g, image)?;
                Ok(g.neg(r))
            }
            RewardKind::Classifier { net, target } => classifier_reward(g, net, image, *target),
            RewardKind::Rotation => rotation_anticorr_reward(g, image),
            RewardKind::Scorer(net) => scorer_reward(g, net, image),
        }
    }

    pub fn eval_value(&self, image: &Tensor<R>, c: Context) -> Result<f64> {
        let mut g = Graph::new();
        let x = g.constant(image.clone());
        let r = self.eval(&mut g, x, c)?;
        g.check()?;
        let v = g.value(r).item().as_f64();
        if !v.is_finite() {
            return Err(Error::NonFiniteInput(format!("reward `{}` is non-finite", self.name)));
        }
        Ok(v)
    }
}

/// `sum_i w_i r_i(image, c)`.
pub fn combine_rewards<R: Real>(g: &mut Graph<'_, R>, rewards: &[RewardFn<R>], image: Var, c: Context) -> Result<Var> {
    if rewards.is_empty() {
        return Err(Error::invalid("no rewards to combine"));
    }
    let mut total: Option<Var> = None;
    for r in rewards {
        let v = r.eval(g, image, c)?;
        let v = g.scale(v, R::lit(r.weight));
        total = Some(match total {
            None => v,
            Some(t) => g.add(t, v),
        });
    }
    Ok(total.expect("non-empty"))
}

pub fn combine_rewards_value<R: Real>(rewards: &[RewardFn<R>], image: &Tensor<R>, c: Context) -> Result<f64> {
    let mut g = Graph::new();
    let x = g.constant(image.clone());
    let r = combine_rewards(&mut g, rewards, x, c)?;
    g.check()?;
    Ok(g.value(r).item().as_f64())
}
