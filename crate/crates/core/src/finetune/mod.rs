//! Pretraining loss and the reward fine-tuning engine.
//!
//! One engine covers four estimators that differ only in where the
//! sampler's backward pass is cut and which terms enter the objective:
//! full-chain backprop, truncation to the last `K` steps, the low-variance
//! variant with `n` extra re-noised one-step terms, and early termination
//! at a random step in `1..=m`.

pub mod optim;

use std::collections::BTreeMap;
use std::time::Instant;

use crate::denoiser::{AdapterVars, Context, DenoiserParams, Weights};
use crate::error::{Error, Result};
use crate::params::{accumulate, dot_all, global_norm, scale_all};
use crate::real::Real;
use crate::rewards::{combine_rewards, combine_rewards_value, to_image, to_image_value, RewardFn};
use crate::rng::{KeyedRng, Purpose};
use crate::sampler::{ddim_step_value, sample_on_tape, SampleConfig, Truncation};
use crate::schedule::NoiseSchedule;
use crate::tensor::{Graph, Tensor, Var};

pub use optim::{clip_global_norm, lr_multiplier, AdamW};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Mode {
    Draft,
    DraftK,
    DraftLv,
    Refl,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::Draft => "DRAFT",
            Mode::DraftK => "DRAFT_K",
            Mode::DraftLv => "DRAFT_LV",
            Mode::Refl => "REFL",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.trim().to_ascii_uppercase().replace('-', "_").as_str() {
            "DRAFT" => Some(Mode::Draft),
            "DRAFT_K" => Some(Mode::DraftK),
            "DRAFT_LV" => Some(Mode::DraftLv),
            "REFL" => Some(Mode::Refl),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FinetuneConfig {
    pub mode: Mode,
    pub k: usize,
    pub m: usize,
    pub n: usize,
    pub guidance_w: f64,
    pub lr: f64,
    pub batch: usize,
    pub steps: u64,
    pub weight_decay: f64,
    pub clip_norm: f64,
    pub beta_kl: f64,
    pub lora_rank: usize,
    pub lr_decay: bool,
    /// Divide the `n + 1` low-variance reward terms by `n + 1`.
    pub normalize_lv: bool,
    /// Per-step checkpointing of the differentiable sampler steps.
    pub checkpoint: bool,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig {
            mode: Mode::DraftK,
            k: 1,
            m: 20,
            n: 2,
            guidance_w: 7.5,
            lr: 4e-4,
            batch: 4,
            steps: 2000,
            weight_decay: 0.1,
            clip_norm: 1.0,
            beta_kl: 0.0,
            lora_rank: 8,
            lr_decay: false,
            normalize_lv: false,
            checkpoint: true,
        }
    }
}

impl FinetuneConfig {
    pub fn with_mode(mut self, mode: Mode) -> Self {
        self.mode = mode;
        self
    }

    pub fn validate(&self, sampler_steps: usize) -> Result<()> {
        let s = sampler_steps;
        if self.mode == Mode::DraftK && !(1..=s).contains(&self.k) {
            return Err(Error::invalid(format!("K = {} outside 1..={s}", self.k)));
        }
        if self.mode == Mode::Refl && !(1..=s).contains(&self.m) {
            return Err(Error::invalid(format!("m = {} outside 1..={s}", self.m)));
        }
        if self.batch == 0 {
            return Err(Error::invalid("batch must be positive"));
        }
        if self.lora_rank == 0 {
            return Err(Error::invalid("lora_rank must be positive"));
        }
        let reals = [
            ("guidance_w", self.guidance_w),
            ("lr", self.lr),
            ("weight_decay", self.weight_decay),
            ("clip_norm", self.clip_norm),
            ("beta_kl", self.beta_kl),
        ];
        for (name, v) in reals {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::invalid(format!("{name} must be finite and non-negative, got {v}")));
            }
        }
        Ok(())
    }

    /// Sampler truncation for one example. ReFL draws its stopping step
    /// from `1..=m`.
    pub fn truncation(&self, rng: &KeyedRng, step: u64, index: u64) -> Truncation {
        match self.mode {
            Mode::Draft => Truncation::None,
            Mode::DraftK => Truncation::StopGradAt(self.k),
            Mode::DraftLv => Truncation::StopGradAt(1),
            Mode::Refl => Truncation::Refl(rng.int_in(1, self.m as u64, Purpose::ReflTruncate, step, index) as usize),
        }
    }

    fn sample_config(&self, truncation: Truncation) -> SampleConfig {
        SampleConfig {
            guidance: self.guidance_w,
            truncation,
            checkpoint: self.checkpoint,
        }
    }

    fn lv_terms(&self) -> usize {
        if self.mode == Mode::DraftLv {
            self.n
        } else {
            0
        }
    }
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRecord {
    pub step: u64,
    pub reward_mean: Option<f64>,
    pub reward_std: Option<f64>,
    pub kl_mean: Option<f64>,
    pub grad_norm: f64,
    pub loss: Option<f64>,
    pub lr: f64,
    pub wall_ms: f64,
}

/// Population mean and standard deviation.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let v = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n;
    (m, v.sqrt())
}

fn lv_index(index: u64, j: usize) -> u64 {
    (index << 20) | j as u64
}

fn check_grads<R: Real>(grads: &BTreeMap<String, Tensor<R>>) -> Result<()> {
    for (k, g) in grads {
        if !g.all_finite() {
            return Err(Error::NonFiniteInput(format!("gradient for `{k}` is non-finite")));
        }
    }
    Ok(())
}

/// `beta * ||eps_ft - eps_pre||^2`.
pub fn kl_penalty<R: Real>(g: &mut Graph<'_, R>, eps_ft: Var, eps_pre: Var, beta: f64) -> Var {
    let d = g.sub(eps_ft, eps_pre);
    let sq = g.mul(d, d);
    let s = g.sum(sq);
    g.scale(s, R::lit(beta))
}

/// KL surrogate at latent `x` (already cut from the graph): guided noise of
/// the adapted model against the frozen base model at timestep `t`.
#[allow(clippy::too_many_arguments)]
pub fn kl_term<'a, R: Real>(
    g: &mut Graph<'a, R>,
    params: &DenoiserParams<R>,
    adapters: Option<&AdapterVars>,
    x: Var,
    c: Context,
    t: usize,
    guidance: f64,
    beta: f64,
) -> Result<Var> {
    let wts = params.weights(g, None, adapters);
    let e_ft = params.cfg_eps(g, &wts, x, c, t, guidance)?;
    let e_pre = params.without_adapters().cfg_value(g.value(x), c, t, guidance)?;
    let e_pre = g.constant(e_pre);
    Ok(kl_penalty(g, e_ft, e_pre, beta))
}

/// One re-noised one-step reward term: `x1 = a1 x0 + s1 eps`, then the
/// reward of `(x1 - s1 eps_theta(x1)) / a1`.
#[allow(clippy::too_many_arguments)]
fn lv_reward<R: Real>(
    g: &mut Graph<'_, R>,
    params: &DenoiserParams<R>,
    wts: &Weights,
    schedule: &NoiseSchedule,
    rewards: &[RewardFn<R>],
    x0_cut: Var,
    noise: Tensor<R>,
    c: Context,
    guidance: f64,
) -> Result<Var> {
    let t1 = schedule.grid()[1];
    let (a1, s1) = (schedule.alpha(t1), schedule.sigma(t1));
    let e = g.constant(noise);
    let x1 = schedule.forward_noise_var(g, x0_cut, t1, e)?;
    let ep = params.cfg_eps(g, wts, x1, c, t1, guidance)?;
    let se = g.scale(ep, R::lit(s1));
    let num = g.sub(x1, se);
    let xh = g.scale(num, R::lit(1.0 / a1));
    let img = to_image(g, xh);
    combine_rewards(g, rewards, img, c)
}

/// Adapter gradient of the objective for one example.
#[derive(Clone, Debug)]
pub struct ExampleGrad<R> {
    pub grads: BTreeMap<String, Tensor<R>>,
    /// Reward of the sampled image (excluding low-variance terms).
    pub reward: f64,
    pub kl: f64,
    pub objective: f64,
    pub truncation: Truncation,
}

/// Gradient of `-r(x0, c) [- sum of LV terms] [+ KL]` with respect to the
/// adapters, for the example keyed `(step, index)`.
#[allow(clippy::too_many_arguments)]
pub fn example_grad<R: Real>(
    params: &DenoiserParams<R>,
    schedule: &NoiseSchedule,
    cfg: &FinetuneConfig,
    rewards: &[RewardFn<R>],
    c: Context,
    rng: &KeyedRng,
    step: u64,
    index: u64,
) -> Result<ExampleGrad<R>> {
    let adapters = params
        .adapters
        .as_ref()
        .ok_or_else(|| Error::invalid("fine-tuning needs adapters"))?;
    let shape = params.config.image_shape();
    let trunc = cfg.truncation(rng, step, index);
    let mut g = Graph::new();
    let av = adapters.bind(&mut g, true);
    let xt = g.constant(rng.normal::<R>(&shape, Purpose::InitialLatent, step, index));
    let (ts, _) = sample_on_tape(&mut g, params, schedule, Some(&av), c, xt, &cfg.sample_config(trunc))?;
    let img = to_image(&mut g, ts.x0);
    let r = combine_rewards(&mut g, rewards, img, c)?;
    let reward = g.value(r).item().as_f64();
    if !reward.is_finite() {
        return Err(Error::NonFiniteInput("reward is non-finite".into()));
    }

    let n = cfg.lv_terms();
    let mut obj = if n == 0 {
        g.neg(r)
    } else {
        let x0_cut = g.stop_grad(ts.x0);
        let wts = params.weights(&mut g, None, Some(&av));
        let mut total = r;
        for j in 0..n {
            let noise = rng.normal::<R>(&shape, Purpose::LvNoise, step, lv_index(index, j));
            let rj = lv_reward(&mut g, params, &wts, schedule, rewards, x0_cut, noise, c, cfg.guidance_w)?;
            total = g.add(total, rj);
        }
        if cfg.normalize_lv {
            total = g.scale(total, R::lit(1.0 / (n + 1) as f64));
        }
        g.neg(total)
    };

    let mut kl = 0.0;
    if cfg.beta_kl > 0.0 {
        let last = match trunc {
            Truncation::Refl(t) => t,
            _ => 1,
        };
        let x = g.stop_grad(ts.final_input);
        let t = schedule.grid()[last];
        let p = kl_term(&mut g, params, Some(&av), x, c, t, cfg.guidance_w, cfg.beta_kl)?;
        kl = g.value(p).item().as_f64();
        obj = g.add(obj, p);
    }
    g.check()?;
    let objective = g.value(obj).item().as_f64();
    let grads = g.backward(obj)?;
    let grads = av.collect_grads(&grads);
    check_grads(&grads)?;
    Ok(ExampleGrad {
        grads,
        reward,
        kl,
        objective,
        truncation: trunc,
    })
}

/// Batch-mean adapter gradient and per-example statistics.
#[derive(Clone, Debug)]
pub struct RewardGrad<R> {
    pub grads: BTreeMap<String, Tensor<R>>,
    pub rewards: Vec<f64>,
    pub kl: Vec<f64>,
    pub objective: f64,
}

/// Gradients for a batch of contexts, merged in index order and averaged.
pub fn reward_grad<R: Real>(
    params: &DenoiserParams<R>,
    schedule: &NoiseSchedule,
    cfg: &FinetuneConfig,
    rewards: &[RewardFn<R>],
    contexts: &[Context],
    rng: &KeyedRng,
    step: u64,
) -> Result<RewardGrad<R>> {
    cfg.validate(schedule.steps())?;
    if contexts.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    let mut acc = BTreeMap::new();
    let (mut rs, mut kls, mut obj) = (Vec::new(), Vec::new(), 0.0);
    for (i, &c) in contexts.iter().enumerate() {
        let ex = example_grad(params, schedule, cfg, rewards, c, rng, step, i as u64)?;
        accumulate(&mut acc, ex.grads);
        rs.push(ex.reward);
        kls.push(ex.kl);
        obj += ex.objective;
    }
    let b = contexts.len() as f64;
    scale_all(&mut acc, R::lit(1.0 / b));
    Ok(RewardGrad {
        grads: acc,
        rewards: rs,
        kl: kls,
        objective: obj / b,
    })
}

/// Forward-only value of the batch objective that [`reward_grad`]
/// differentiates. Everything the estimator cuts with `stop_grad` (steps
/// above the truncation point, the clean sample that seeds the
/// low-variance terms, the latent the KL term is evaluated at) follows
/// `prefix`; the differentiable path follows `params`.
pub fn objective_value<R: Real>(
    params: &DenoiserParams<R>,
    prefix: &DenoiserParams<R>,
    schedule: &NoiseSchedule,
    cfg: &FinetuneConfig,
    rewards: &[RewardFn<R>],
    contexts: &[Context],
    rng: &KeyedRng,
    step: u64,
) -> Result<f64> {
    cfg.validate(schedule.steps())?;
    let s = schedule.steps();
    let shape = params.config.image_shape();
    let w = cfg.guidance_w;
    let mut total = 0.0;
    for (i, &c) in contexts.iter().enumerate() {
        let index = i as u64;
        let trunc = cfg.truncation(rng, step, index);
        let (grad_from, refl) = match trunc {
            Truncation::None => (s, None),
            Truncation::StopGradAt(k) => (k, None),
            Truncation::Refl(k) => (k, Some(k)),
        };
        let mut x = rng.normal::<R>(&shape, Purpose::InitialLatent, step, index);
        for k in ((grad_from + 1)..=s).rev() {
            x = ddim_step_value(prefix, schedule, &x, c, k, w)?.0;
        }
        let last = refl.unwrap_or(1);
        // Values that the estimator cuts with stop_grad follow `prefix`.
        let mut cut = x.clone();
        let mut final_input = x.clone();
        for k in (last..=grad_from).rev() {
            final_input = cut.clone();
            let (xp, xh) = ddim_step_value(params, schedule, &x, c, k, w)?;
            let (cp, ch) = ddim_step_value(prefix, schedule, &cut, c, k, w)?;
            let early = refl == Some(k);
            x = if early { xh } else { xp };
            cut = if early { ch } else { cp };
        }
        let mut r = combine_rewards_value(rewards, &to_image_value(&x), c)?;
        let n = cfg.lv_terms();
        if n > 0 {
            let t1 = schedule.grid()[1];
            let (a1, s1) = (schedule.alpha(t1), schedule.sigma(t1));
            for j in 0..n {
                let noise = rng.normal::<R>(&shape, Purpose::LvNoise, step, lv_index(index, j));
                let x1 = schedule.forward_noise(&cut, t1, &noise)?;
                let e = params.cfg_value(&x1, c, t1, w)?;
                let xh = x1.zip_map(&e, |xv, ev| (xv - R::lit(s1) * ev) * R::lit(1.0 / a1));
                r += combine_rewards_value(rewards, &to_image_value(&xh), c)?;
            }
            if cfg.normalize_lv {
                r /= (n + 1) as f64;
            }
        }
        let mut obj = -r;
        if cfg.beta_kl > 0.0 {
            let t = schedule.grid()[last];
            let e_ft = params.cfg_value(&final_input, c, t, w)?;
            let e_pre = params.without_adapters().cfg_value(&final_input, c, t, w)?;
            let d: f64 = e_ft
                .data()
                .iter()
                .zip(e_pre.data())
                .map(|(a, b)| (a.as_f64() - b.as_f64()).powi(2))
                .sum();
            obj += cfg.beta_kl * d;
        }
        total += obj;
    }
    Ok(total / contexts.len() as f64)
}

/// Reward fine-tuning loop state: adapters, optimizer moments and step
/// counter.
pub struct Finetuner<R: Real> {
    pub params: DenoiserParams<R>,
    pub schedule: NoiseSchedule,
    pub config: FinetuneConfig,
    pub rewards: Vec<RewardFn<R>>,
    /// Contexts sampled uniformly for each batch element.
    pub prompts: Vec<Context>,
    rng: KeyedRng,
    opt: AdamW<R>,
    step: u64,
}

impl<R: Real> Finetuner<R> {
    /// Starts from `base` with fresh adapters of rank `config.lora_rank`.
    pub fn new(
        base: &DenoiserParams<R>,
        schedule: NoiseSchedule,
        config: FinetuneConfig,
        rewards: Vec<RewardFn<R>>,
        prompts: Vec<Context>,
        seed: u64,
    ) -> Result<Self> {
        let params = base.without_adapters().with_fresh_adapters(config.lora_rank, seed)?;
        Self::resume(params, schedule, config, rewards, prompts, seed)
    }

    /// Continues from `params`, which must already carry adapters.
    pub fn resume(
        params: DenoiserParams<R>,
        schedule: NoiseSchedule,
        config: FinetuneConfig,
        rewards: Vec<RewardFn<R>>,
        prompts: Vec<Context>,
        seed: u64,
    ) -> Result<Self> {
        config.validate(schedule.steps())?;
        if prompts.is_empty() || prompts.iter().any(|c| c.is_null()) {
            return Err(Error::invalid("prompts must be non-empty class contexts"));
        }
        if rewards.is_empty() {
            return Err(Error::invalid("no rewards configured"));
        }
        if params.adapters.is_none() {
            return Err(Error::invalid("fine-tuning needs adapters"));
        }
        let opt = AdamW::new(config.lr, config.weight_decay);
        Ok(Finetuner {
            params,
            schedule,
            config,
            rewards,
            prompts,
            rng: KeyedRng::new(seed),
            opt,
            step: 0,
        })
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Contexts used by optimizer step `step`.
    pub fn batch_contexts(&self, step: u64) -> Vec<Context> {
        let hi = self.prompts.len() as u64 - 1;
        (0..self.config.batch as u64)
            .map(|i| self.prompts[self.rng.int_in(0, hi, Purpose::PromptSample, step, i) as usize])
            .collect()
    }

    /// One optimizer step.
    pub fn step(&mut self) -> Result<MetricsRecord> {
        let start = Instant::now();
        self.step += 1;
        let step = self.step;
        let contexts = self.batch_contexts(step);
        let mut rg = reward_grad(
            &self.params,
            &self.schedule,
            &self.config,
            &self.rewards,
            &contexts,
            &self.rng,
            step,
        )?;
        let grad_norm = clip_global_norm(&mut rg.grads, self.config.clip_norm);
        let mult = lr_multiplier(step, self.config.lr_decay);
        let adapters = self.params.adapters.as_mut().expect("checked at construction");
        self.opt.step(&rg.grads, mult, |f| adapters.for_each_mut(|n, t| f(n, t)))?;
        let (rm, rs) = mean_std(&rg.rewards);
        let kl = (self.config.beta_kl > 0.0).then(|| mean_std(&rg.kl).0);
        Ok(MetricsRecord {
            step,
            reward_mean: Some(rm),
            reward_std: Some(rs),
            kl_mean: kl,
            grad_norm,
            loss: None,
            lr: self.config.lr * mult,
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
        })
    }
}

/// Mean squared error between predicted and true noise.
pub fn diffusion_loss<R: Real>(g: &mut Graph<'_, R>, pred: Var, eps: Var) -> Var {
    let d = g.sub(pred, eps);
    let sq = g.mul(d, d);
    g.mean(sq)
}

#[derive(Clone, Debug, PartialEq)]
pub struct PretrainConfig {
    pub lr: f64,
    pub batch: usize,
    pub steps: u64,
    pub weight_decay: f64,
    pub clip_norm: f64,
    /// Probability of replacing the context by the null token.
    pub context_dropout: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            lr: 2e-3,
            batch: 16,
            steps: 3000,
            weight_decay: 0.0,
            clip_norm: 1.0,
            context_dropout: 0.1,
        }
    }
}

/// Batch-mean noise-prediction loss and base-weight gradients. Each
/// example draws `t ~ U{1..n_train}`, `eps ~ N(0, I)` and a context
/// dropout coin keyed by `(step, index)`.
pub fn pretrain_loss_grad<R: Real>(
    params: &DenoiserParams<R>,
    schedule: &NoiseSchedule,
    batch: &[(&Tensor<R>, Context)],
    context_dropout: f64,
    rng: &KeyedRng,
    step: u64,
) -> Result<(f64, BTreeMap<String, Tensor<R>>)> {
    if batch.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    params.config.check_schedule(schedule)?;
    let base_only = params.without_adapters();
    let mut g = Graph::new();
    let bound = base_only.base.bind(&mut g, true);
    let wts = base_only.weights(&mut g, Some(&bound), None);
    let mut total: Option<Var> = None;
    for (i, &(x0, c)) in batch.iter().enumerate() {
        let i = i as u64;
        let t = rng.int_in(1, schedule.n_train() as u64, Purpose::PretrainTimestep, step, i) as usize;
        let eps = rng.normal::<R>(x0.shape(), Purpose::PretrainNoise, step, i);
        let c = if rng.uniform(Purpose::ContextDropout, step, i) < context_dropout {
            Context::NULL
        } else {
            c
        };
        let xt = g.constant(schedule.forward_noise(x0, t, &eps)?);
        let pred = base_only.eps_theta(&mut g, &wts, xt, c, t)?;
        let ev = g.constant(eps);
        let l = diffusion_loss(&mut g, pred, ev);
        total = Some(match total {
            None => l,
            Some(s) => g.add(s, l),
        });
    }
    let loss = g.scale(total.expect("non-empty"), R::lit(1.0 / batch.len() as f64));
    g.check()?;
    let value = g.value(loss).item().as_f64();
    if !value.is_finite() {
        return Err(Error::NonFiniteInput("pretraining loss is non-finite".into()));
    }
    let grads = g.backward(loss)?;
    let grads = bound.collect_grads(&grads);
    check_grads(&grads)?;
    Ok((value, grads))
}

/// Base-model training state.
pub struct Pretrainer<R: Real> {
    pub params: DenoiserParams<R>,
    pub schedule: NoiseSchedule,
    pub config: PretrainConfig,
    rng: KeyedRng,
    opt: AdamW<R>,
    step: u64,
}

impl<R: Real> Pretrainer<R> {
    pub fn new(params: DenoiserParams<R>, schedule: NoiseSchedule, config: PretrainConfig, seed: u64) -> Self {
        let opt = AdamW::new(config.lr, config.weight_decay);
        Pretrainer {
            params,
            schedule,
            config,
            rng: KeyedRng::new(seed),
            opt,
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, batch: &[(&Tensor<R>, Context)]) -> Result<MetricsRecord> {
        let start = Instant::now();
        self.step += 1;
        let (loss, mut grads) = pretrain_loss_grad(
            &self.params,
            &self.schedule,
            batch,
            self.config.context_dropout,
            &self.rng,
            self.step,
        )?;
        let grad_norm = clip_global_norm(&mut grads, self.config.clip_norm);
        let base = &mut self.params.base;
        self.opt.step(&grads, 1.0, |f| {
            for name in grads.keys() {
                if let Some(t) = base.get_mut(name) {
                    f(name, t);
                }
            }
        })?;
        Ok(MetricsRecord {
            step: self.step,
            reward_mean: None,
            reward_std: None,
            kl_mean: None,
            grad_norm,
            loss: Some(loss),
            lr: self.config.lr,
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
        })
    }
}

/// Gradient statistics for one truncation depth.
#[derive(Clone, Debug, PartialEq)]
pub struct KDiag {
    pub k: usize,
    pub grad_norm: f64,
    /// Angle to the `K = 1` gradient in radians; `None` when either
    /// gradient has zero norm.
    pub angle_to_k1: Option<f64>,
}

impl KDiag {
    pub fn angle_deg(&self) -> Option<f64> {
        self.angle_to_k1.map(f64::to_degrees)
    }
}

/// Worst relative error between the analytic adapter gradient and
/// fourth-order central differences of [`objective_value`], over every
/// `stride`-th coordinate.
#[allow(clippy::too_many_arguments)]
pub fn fd_check(
    params: &DenoiserParams<f64>,
    schedule: &NoiseSchedule,
    cfg: &FinetuneConfig,
    rewards: &[RewardFn<f64>],
    contexts: &[Context],
    rng: &KeyedRng,
    stride: usize,
    eps: f64,
) -> Result<f64> {
    let analytic = reward_grad(params, schedule, cfg, rewards, contexts, rng, 0)?.grads;
    let mut worst: f64 = 0.0;
    for (name, g) in &analytic {
        let mut num = Tensor::zeros(g.shape());
        let mut ana = Tensor::zeros(g.shape());
        for i in (0..g.numel()).step_by(stride.max(1)) {
            let f = |d: f64| -> Result<f64> {
                let mut q = params.clone();
                if let Some(a) = q.adapters.as_mut() {
                    a.for_each_mut(|n, t| {
                        if n == name {
                            t.data_mut()[i] += d;
                        }
                    });
                }
                objective_value(&q, params, schedule, cfg, rewards, contexts, rng, 0)
            };
            num.data_mut()[i] = (8.0 * (f(eps)? - f(-eps)?) - (f(2.0 * eps)? - f(-2.0 * eps)?)) / (12.0 * eps);
            ana.data_mut()[i] = g.data()[i];
        }
        worst = worst.max(crate::tensor::gradcheck::max_rel_err(&ana, &num));
    }
    Ok(worst)
}

/// `arccos(<a, b> / (|a| |b|))`, or `None` for a zero vector.
pub fn grad_angle<R: Real>(a: &BTreeMap<String, Tensor<R>>, b: &BTreeMap<String, Tensor<R>>) -> Option<f64> {
    let (na, nb) = (global_norm(a), global_norm(b));
    if na == 0.0 || nb == 0.0 {
        return None;
    }
    Some((dot_all(a, b) / (na * nb)).clamp(-1.0, 1.0).acos())
}

/// Adapter-gradient norms and angles to the `K = 1` gradient for each `K`
/// in `ks`, all on the same trajectories (`x_T` keyed by `(step, index)`).
pub fn k_diagnostics<R: Real>(
    params: &DenoiserParams<R>,
    schedule: &NoiseSchedule,
    base_cfg: &FinetuneConfig,
    rewards: &[RewardFn<R>],
    contexts: &[Context],
    ks: &[usize],
    rng: &KeyedRng,
    step: u64,
) -> Result<Vec<KDiag>> {
    let grad_for = |k: usize| -> Result<BTreeMap<String, Tensor<R>>> {
        let mut cfg = base_cfg.clone().with_mode(Mode::DraftK);
        cfg.k = k;
        Ok(reward_grad(params, schedule, &cfg, rewards, contexts, rng, step)?.grads)
    };
    let g1 = grad_for(1)?;
    let mut out = Vec::new();
    for &k in ks {
        let gk = if k == 1 { g1.clone() } else { grad_for(k)? };
        out.push(KDiag {
            k,
            grad_norm: global_norm(&gk),
            angle_to_k1: if k == 1 { Some(0.0) } else { grad_angle(&gk, &g1) },
        });
    }
    Ok(out)
}
