//! End-to-end stages: pretraining, reward-model training, fine-tuning and
//! evaluation.

use std::collections::BTreeMap;
use std::sync::Arc;

use anyhow::{ensure, Result};
use draft_lab_core::denoiser::{AdapterSet, Context, DenoiserConfig, DenoiserParams};
use draft_lab_core::finetune::{
    fd_check, k_diagnostics, mean_std, AdamW, FinetuneConfig, Finetuner, MetricsRecord, Mode, Pretrainer,
};
use draft_lab_core::latent_opt::doodl_optimize;
use draft_lab_core::rewards::net::{classifier_loss_grad, regression_loss_grad};
use draft_lab_core::rewards::{to_image_value, ConvNet, ConvNetConfig, RewardFn, RewardKind};
use draft_lab_core::rng::{KeyedRng, Purpose};
use draft_lab_core::sampler::sample;
use draft_lab_core::{NoiseSchedule, Real, Tensor};
use serde::Serialize;

use crate::checkpoint::load_convnet;
use crate::config::LabConfig;
use crate::dataset::{area_score, class_name, SyntheticDataset};

/// Indices of minibatch `step`, drawn with replacement.
pub fn minibatch(rng: &KeyedRng, n: usize, batch: usize, step: u64) -> Vec<usize> {
    (0..batch as u64)
        .map(|i| rng.int_in(0, n as u64 - 1, Purpose::Minibatch, step, i) as usize)
        .collect()
}

/// Trains a fresh base model; `on_step` sees every record.
pub fn pretrain<R: Real>(
    cfg: &LabConfig,
    data: &SyntheticDataset,
    seed: u64,
    mut on_step: impl FnMut(&MetricsRecord) -> Result<()>,
) -> Result<DenoiserParams<R>> {
    ensure!(!data.is_empty(), "empty dataset");
    let params = DenoiserParams::<R>::init(cfg.denoiser_config(), seed)?;
    let pc = cfg.pretrain_config();
    let inputs = data.model_inputs::<R>();
    let labels = data.labels();
    let rng = KeyedRng::new(seed);
    let mut tr = Pretrainer::new(params, cfg.schedule()?, pc.clone(), seed);
    for step in 1..=pc.steps {
        let idx = minibatch(&rng, inputs.len(), pc.batch, step);
        let batch: Vec<(&Tensor<R>, Context)> = idx
            .iter()
            .map(|&i| (&inputs[i], labels[i].map_or(Context::NULL, Context::class)))
            .collect();
        let rec = tr.step(&batch)?;
        on_step(&rec)?;
    }
    Ok(tr.params)
}

fn net_step<R: Real>(net: &mut ConvNet<R>, opt: &mut AdamW<R>, grads: &BTreeMap<String, Tensor<R>>) -> Result<()> {
    let params = &mut net.params;
    opt.step(grads, 1.0, |f| {
        for name in grads.keys() {
            if let Some(t) = params.get_mut(name) {
                f(name, t);
            }
        }
    })?;
    Ok(())
}

pub fn accuracy<R: Real>(net: &ConvNet<R>, images: &[Tensor<R>], labels: &[usize]) -> Result<f64> {
    let mut hits = 0;
    for (x, &l) in images.iter().zip(labels) {
        if argmax(&net.predict(x)?) == l {
            hits += 1;
        }
    }
    Ok(hits as f64 / images.len().max(1) as f64)
}

pub fn argmax<R: Real>(t: &Tensor<R>) -> usize {
    let mut best = 0;
    for (i, v) in t.data().iter().enumerate() {
        if *v > t.data()[best] {
            best = i;
        }
    }
    best
}

/// Classifier on `[0, 1]` images; returns the net and its training loss
/// per step.
pub fn train_classifier<R: Real>(
    cfg: &LabConfig,
    data: &SyntheticDataset,
    seed: u64,
    mut on_step: impl FnMut(u64, f64) -> Result<()>,
) -> Result<ConvNet<R>> {
    let mut net = ConvNet::init(cfg.net_config(crate::dataset::NUM_CLASSES), seed)?;
    let images = data.images::<R>();
    let labels: Vec<usize> = data.labels().into_iter().map(|l| l.expect("labelled dataset")).collect();
    let rng = KeyedRng::new(seed);
    let mut opt = AdamW::new(cfg.classifier_lr, 0.0);
    for step in 1..=cfg.classifier_steps {
        let idx = minibatch(&rng, images.len(), cfg.classifier_batch, step);
        let batch: Vec<(&Tensor<R>, usize)> = idx.iter().map(|&i| (&images[i], labels[i])).collect();
        let (loss, grads) = classifier_loss_grad(&net, &batch)?;
        net_step(&mut net, &mut opt, &grads)?;
        on_step(step, loss)?;
    }
    Ok(net)
}

/// Regressor of the area score on `[0, 1]` images.
pub fn train_scorer<R: Real>(
    cfg: &LabConfig,
    data: &SyntheticDataset,
    seed: u64,
    mut on_step: impl FnMut(u64, f64) -> Result<()>,
) -> Result<ConvNet<R>> {
    let mut net = ConvNet::init(cfg.net_config(1), seed)?;
    let images = data.images::<R>();
    let targets: Vec<f64> = data.items.iter().map(|i| area_score(i.area)).collect();
    let rng = KeyedRng::new(seed);
    let mut opt = AdamW::new(cfg.scorer_lr, 0.0);
    for step in 1..=cfg.scorer_steps {
        let idx = minibatch(&rng, images.len(), cfg.scorer_batch, step);
        let batch: Vec<(&Tensor<R>, f64)> = idx.iter().map(|&i| (&images[i], targets[i])).collect();
        let (loss, grads) = regression_loss_grad(&net, &batch)?;
        net_step(&mut net, &mut opt, &grads)?;
        on_step(step, loss)?;
    }
    Ok(net)
}

pub fn scorer_mse<R: Real>(net: &ConvNet<R>, data: &SyntheticDataset) -> Result<f64> {
    let mut se = 0.0;
    for it in &data.items {
        let y = net.predict(&it.image.cast::<R>())?.data()[0].as_f64();
        se += (y - area_score(it.area)).powi(2);
    }
    Ok(se / data.len().max(1) as f64)
}

/// Reward functions named in the config, loading frozen nets on demand.
pub fn build_rewards<R: Real>(cfg: &LabConfig) -> Result<Vec<RewardFn<R>>> {
    let mut out = Vec::new();
    let mut classifier: Option<Arc<ConvNet<R>>> = None;
    let mut scorer: Option<Arc<ConvNet<R>>> = None;
    for spec in cfg.reward_specs()? {
        let kind = match spec.name.as_str() {
            "jpeg" => RewardFn::<R>::jpeg(cfg.jpeg_quality)?.kind,
            "incompressibility" => RewardFn::<R>::incompressibility(cfg.jpeg_quality)?.kind,
            "rotation" => RewardKind::Rotation,
            "classifier" => {
                if classifier.is_none() {
                    let p = cfg.require_path("classifier_checkpoint", &cfg.classifier_checkpoint)?;
                    classifier = Some(Arc::new(load_convnet(&p)?));
                }
                RewardKind::Classifier {
                    net: classifier.clone().expect("loaded"),
                    target: cfg.target_class,
                }
            }
            "scorer" => {
                if scorer.is_none() {
                    let p = cfg.require_path("scorer_checkpoint", &cfg.scorer_checkpoint)?;
                    scorer = Some(Arc::new(load_convnet(&p)?));
                }
                RewardKind::Scorer(scorer.clone().expect("loaded"))
            }
            other => unreachable!("validated reward name {other}"),
        };
        out.push(RewardFn::new(spec.name, spec.weight, kind));
    }
    Ok(out)
}

pub fn prompts(cfg: &LabConfig) -> Vec<Context> {
    cfg.prompts.iter().map(|&p| Context::class(p)).collect()
}

/// Fine-tunes fresh adapters on `base`.
pub fn finetune<R: Real>(
    cfg: &LabConfig,
    base: &DenoiserParams<R>,
    rewards: Vec<RewardFn<R>>,
    seed: u64,
    mut on_step: impl FnMut(&MetricsRecord) -> Result<()>,
) -> Result<DenoiserParams<R>> {
    let fc = cfg.finetune_config()?;
    let steps = fc.steps;
    let mut ft = Finetuner::new(base, cfg.schedule()?, fc, rewards, prompts(cfg), seed)?;
    for _ in 0..steps {
        let rec = ft.step()?;
        on_step(&rec)?;
    }
    Ok(ft.params)
}

/// Evaluation draw `j`: context `prompts[j % len]` and latent keyed by the
/// pool seed.
pub fn eval_draw<R: Real>(params: &DenoiserParams<R>, prompts: &[Context], seed: u64, j: usize) -> (Context, Tensor<R>) {
    let c = prompts[j % prompts.len()];
    let x = KeyedRng::new(seed).normal(&params.config.image_shape(), Purpose::EvalLatent, 0, j as u64);
    (c, x)
}

/// Generated images in `[0, 1]` for the fixed evaluation pool.
pub fn eval_samples<R: Real>(
    params: &DenoiserParams<R>,
    schedule: &NoiseSchedule,
    prompts: &[Context],
    n: usize,
    guidance: f64,
    seed: u64,
) -> Result<Vec<(Context, Tensor<R>)>> {
    ensure!(n > 0, "n_samples must be positive");
    ensure!(!prompts.is_empty(), "no prompts");
    (0..n)
        .map(|j| {
            let (c, x) = eval_draw(params, prompts, seed, j);
            let tr = sample(params, schedule, c, &x, guidance)?;
            Ok((c, to_image_value(&tr.x0)))
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalSummary {
    pub n_samples: usize,
    pub rewards: BTreeMap<String, Stat>,
    /// Class name to per-reward mean.
    pub per_class: BTreeMap<String, BTreeMap<String, f64>>,
}

impl EvalSummary {
    pub fn mean(&self, reward: &str) -> f64 {
        self.rewards[reward].mean
    }
}

/// Scores pre-generated images with each reward separately.
pub fn summarize<R: Real>(images: &[(Context, Tensor<R>)], rewards: &[RewardFn<R>]) -> Result<EvalSummary> {
    let mut per_reward: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    let mut per_class: BTreeMap<String, BTreeMap<String, Vec<f64>>> = BTreeMap::new();
    for (c, img) in images {
        for r in rewards {
            let v = r.eval_value(img, *c)?;
            per_reward.entry(r.name.clone()).or_default().push(v);
            per_class
                .entry(class_name(c.id()))
                .or_default()
                .entry(r.name.clone())
                .or_default()
                .push(v);
        }
    }
    Ok(EvalSummary {
        n_samples: images.len(),
        rewards: per_reward
            .into_iter()
            .map(|(k, v)| {
                let (mean, std) = mean_std(&v);
                (k, Stat { mean, std })
            })
            .collect(),
        per_class: per_class
            .into_iter()
            .map(|(c, m)| (c, m.into_iter().map(|(k, v)| (k, mean_std(&v).0)).collect()))
            .collect(),
    })
}

pub fn eval_model<R: Real>(
    params: &DenoiserParams<R>,
    schedule: &NoiseSchedule,
    rewards: &[RewardFn<R>],
    prompts: &[Context],
    n_samples: usize,
    guidance: f64,
    seed: u64,
) -> Result<EvalSummary> {
    let imgs = eval_samples(params, schedule, prompts, n_samples, guidance, seed)?;
    summarize(&imgs, rewards)
}

/// Micro denoiser used by the gradient check: 8x8 images, one block.
pub fn micro_config() -> DenoiserConfig {
    DenoiserConfig {
        image_channels: 3,
        height: 8,
        width: 8,
        channels: 4,
        blocks: 1,
        emb_dim: 4,
        num_classes: 3,
        n_train: 1000,
    }
}

/// Micro model with rank-2 adapters whose `B` factors are non-zero, so
/// both factors carry gradient.
pub fn micro_model(seed: u64) -> Result<DenoiserParams<f64>> {
    let cfg = micro_config();
    let p = DenoiserParams::<f64>::init(cfg.clone(), seed)?;
    let mut set = AdapterSet::init(&cfg, 2, seed.wrapping_add(1))?;
    let rng = KeyedRng::new(seed.wrapping_add(2));
    let mut i = 0;
    set.for_each_mut(|name, t| {
        if name.ends_with("/B") {
            *t = rng.normal(t.shape(), Purpose::Probe, 0, i);
            t.scale_in_place(0.2);
        }
        i += 1;
    });
    Ok(p.with_adapters(Some(set)))
}

/// Smooth rewards on 8x8 images: rotation plus a random frozen scorer.
pub fn micro_rewards(seed: u64) -> Result<Vec<RewardFn<f64>>> {
    let net = ConvNet::init(
        ConvNetConfig {
            in_channels: 3,
            height: 8,
            width: 8,
            channels: vec![3],
            outputs: 1,
        },
        seed,
    )?;
    Ok(vec![
        RewardFn::rotation().weighted(0.5),
        RewardFn::new("scorer", 1.0, RewardKind::Scorer(Arc::new(net))),
    ])
}

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckRow {
    pub mode: String,
    pub k: usize,
    pub max_rel_err: f64,
}

/// Finite-difference check of every estimator on the micro model in f64
/// with five sampler steps.
pub fn grad_check(seed: u64, stride: usize) -> Result<Vec<GradCheckRow>> {
    let params = micro_model(seed)?;
    let rewards = micro_rewards(seed.wrapping_add(9))?;
    let schedule = NoiseSchedule::new(1000, 5)?;
    let contexts = [Context::class(1), Context::class(2)];
    let rng = KeyedRng::new(seed.wrapping_add(3));
    let base = FinetuneConfig {
        m: 5,
        batch: contexts.len(),
        guidance_w: 2.0,
        ..FinetuneConfig::default()
    };
    let mut cases = vec![("DRAFT", Mode::Draft, 5)];
    for k in [1, 2, 5] {
        cases.push(("DRAFT_K", Mode::DraftK, k));
    }
    cases.push(("DRAFT_LV", Mode::DraftLv, 1));
    cases.push(("REFL", Mode::Refl, 1));
    cases
        .into_iter()
        .map(|(name, mode, k)| {
            let mut cfg = base.clone().with_mode(mode);
            cfg.k = k;
            let err = fd_check(&params, &schedule, &cfg, &rewards, &contexts, &rng, stride, 1e-3)?;
            Ok(GradCheckRow {
                mode: name.to_string(),
                k,
                max_rel_err: err,
            })
        })
        .collect()
}

#[derive(Clone, Debug, Serialize)]
pub struct DiagRow {
    pub batch: u64,
    pub k: usize,
    pub grad_norm: f64,
    pub angle_deg: Option<f64>,
}

#[derive(Clone, Debug, Serialize)]
pub struct DiagSummary {
    pub k: usize,
    pub median_grad_norm: f64,
    pub median_angle_deg: Option<f64>,
}

pub fn median(v: &[f64]) -> f64 {
    let mut s: Vec<f64> = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}

/// Gradient norms and angles against `K = 1` over `diag_batches`
/// batches, with fresh adapters on `base`.
pub fn diag_k<R: Real>(
    cfg: &LabConfig,
    base: &DenoiserParams<R>,
    rewards: &[RewardFn<R>],
    seed: u64,
) -> Result<(Vec<DiagRow>, Vec<DiagSummary>)> {
    cfg.validate_diag()?;
    let schedule = cfg.schedule()?;
    let mut fc = cfg.finetune_config()?;
    fc.batch = cfg.diag_batch;
    let params = base.without_adapters().with_fresh_adapters(fc.lora_rank, seed)?;
    let rng = KeyedRng::new(seed);
    let prompts = prompts(cfg);
    let hi = prompts.len() as u64 - 1;
    let mut rows = Vec::new();
    for b in 0..cfg.diag_batches as u64 {
        let ctx: Vec<Context> = (0..cfg.diag_batch as u64)
            .map(|i| prompts[rng.int_in(0, hi, Purpose::PromptSample, b, i) as usize])
            .collect();
        for d in k_diagnostics(&params, &schedule, &fc, rewards, &ctx, &cfg.diag_ks, &rng, b)? {
            rows.push(DiagRow {
                batch: b,
                k: d.k,
                grad_norm: d.grad_norm,
                angle_deg: d.angle_deg(),
            });
        }
    }
    let summary = cfg
        .diag_ks
        .iter()
        .map(|&k| {
            let of_k: Vec<&DiagRow> = rows.iter().filter(|r| r.k == k).collect();
            let norms: Vec<f64> = of_k.iter().map(|r| r.grad_norm).collect();
            let angles: Vec<f64> = of_k.iter().filter_map(|r| r.angle_deg).collect();
            DiagSummary {
                k,
                median_grad_norm: median(&norms),
                median_angle_deg: (!angles.is_empty()).then(|| median(&angles)),
            }
        })
        .collect();
    Ok((rows, summary))
}

#[derive(Clone, Debug, Serialize)]
pub struct DoodlRow {
    pub index: usize,
    pub class: usize,
    pub initial_reward: f64,
    pub best_reward: f64,
    pub curve: Vec<f64>,
}

/// Latent optimization of the first `n` evaluation draws. Returns the rows
/// and the best images in `[0, 1]`.
pub fn doodl_run<R: Real>(
    cfg: &LabConfig,
    params: &DenoiserParams<R>,
    rewards: &[RewardFn<R>],
    n: usize,
    seed: u64,
) -> Result<(Vec<DoodlRow>, Vec<Tensor<R>>)> {
    let schedule = cfg.schedule()?;
    let prompts = prompts(cfg);
    let dc = cfg.doodl_config();
    let mut rows = Vec::new();
    let mut images = Vec::new();
    for j in 0..n {
        let (c, x) = eval_draw(params, &prompts, seed, j);
        let res = doodl_optimize(params, &schedule, c, &x, rewards, &dc)?;
        rows.push(DoodlRow {
            index: j,
            class: c.id(),
            initial_reward: res.curve[0],
            best_reward: res.best_reward,
            curve: res.curve.clone(),
        });
        images.push(to_image_value(&res.trace.x0));
    }
    Ok((rows, images))
}
