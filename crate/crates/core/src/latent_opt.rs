//! Reward ascent on the initial latent with the model held fixed.

use std::collections::BTreeMap;

use crate::denoiser::{Context, DenoiserParams};
use crate::error::{Error, Result};
use crate::finetune::AdamW;
use crate::real::Real;
use crate::rewards::{combine_rewards, to_image, RewardFn};
use crate::sampler::{sample, sample_on_tape, SampleConfig, SampleTrace, Truncation};
use crate::schedule::NoiseSchedule;
use crate::tensor::{Graph, Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct DoodlConfig {
    pub steps: usize,
    pub lr: f64,
    pub guidance: f64,
    pub checkpoint: bool,
}

impl Default for DoodlConfig {
    fn default() -> Self {
        DoodlConfig {
            steps: 20,
            lr: 0.05,
            guidance: 7.5,
            checkpoint: true,
        }
    }
}

/// Optimizer state over `x_T`.
#[derive(Clone, Debug)]
pub struct LatentOptState<R> {
    pub x_t: Tensor<R>,
    pub opt: AdamW<R>,
    pub step: usize,
    /// Reward of the latent before each update, then of the final latent.
    pub rewards: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct DoodlResult<R> {
    /// Highest-reward latent seen, with its sample trace.
    pub best_latent: Tensor<R>,
    pub best_reward: f64,
    pub trace: SampleTrace<R>,
    pub final_latent: Tensor<R>,
    /// `steps + 1` entries: reward at every visited latent.
    pub curve: Vec<f64>,
}

/// Rescales `x` to norm `sqrt(numel)`.
pub fn renormalize<R: Real>(x: &mut Tensor<R>) {
    let n = x.norm_sq().as_f64().sqrt();
    if n > 0.0 {
        x.scale_in_place(R::lit((x.numel() as f64).sqrt() / n));
    }
}

const LATENT: &str = "x_T";

/// Reward ascent with a caller-supplied differentiable reward of the image
/// in `[0, 1]`.
pub fn doodl_optimize_with<R: Real>(
    params: &DenoiserParams<R>,
    schedule: &NoiseSchedule,
    c: Context,
    x_init: &Tensor<R>,
    reward: &dyn Fn(&mut Graph<'_, R>, Var, Context) -> Result<Var>,
    cfg: &DoodlConfig,
) -> Result<DoodlResult<R>> {
    if x_init.shape() != params.config.image_shape() {
        return Err(Error::Shape {
            op: "doodl",
            detail: format!("latent {:?}, expected {:?}", x_init.shape(), params.config.image_shape()),
        });
    }
    let mut st = LatentOptState {
        x_t: x_init.clone(),
        opt: AdamW::new(cfg.lr, 0.0),
        step: 0,
        rewards: Vec::new(),
    };
    let sc = SampleConfig {
        guidance: cfg.guidance,
        truncation: Truncation::None,
        checkpoint: cfg.checkpoint,
    };
    let mut best = (f64::NEG_INFINITY, x_init.clone());
    for it in 0..=cfg.steps {
        let mut g = Graph::new();
        let xv = g.param(st.x_t.clone());
        let (ts, _) = sample_on_tape(&mut g, params, schedule, None, c, xv, &sc)?;
        let img = to_image(&mut g, ts.x0);
        let r = reward(&mut g, img, c)?;
        g.check()?;
        let rv = g.value(r).item().as_f64();
        if !rv.is_finite() {
            return Err(Error::NonFiniteInput("reward is non-finite".into()));
        }
        st.rewards.push(rv);
        if rv > best.0 {
            best = (rv, st.x_t.clone());
        }
        if it == cfg.steps {
            break;
        }
        let neg = g.neg(r);
        let grads = g.backward(neg)?;
        let gx = grads.wrt(xv).clone();
        if !gx.all_finite() {
            return Err(Error::NonFiniteInput("latent gradient is non-finite".into()));
        }
        let gmap = BTreeMap::from([(LATENT.to_string(), gx)]);
        let x = &mut st.x_t;
        st.opt.step(&gmap, 1.0, |f| f(LATENT, x))?;
        renormalize(&mut st.x_t);
        st.step += 1;
    }
    let trace = sample(params, schedule, c, &best.1, cfg.guidance)?;
    Ok(DoodlResult {
        best_latent: best.1,
        best_reward: best.0,
        trace,
        final_latent: st.x_t,
        curve: st.rewards,
    })
}

/// Reward ascent on a weighted sum of rewards.
pub fn doodl_optimize<R: Real>(
    params: &DenoiserParams<R>,
    schedule: &NoiseSchedule,
    c: Context,
    x_init: &Tensor<R>,
    rewards: &[RewardFn<R>],
    cfg: &DoodlConfig,
) -> Result<DoodlResult<R>> {
    doodl_optimize_with(params, schedule, c, x_init, &|g, img, c| combine_rewards(g, rewards, img, c), cfg)
}
