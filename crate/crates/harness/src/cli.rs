//! Command-line front end.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, ensure, Result};
use clap::{Args, Parser, Subcommand};
use draft_lab_core::denoiser::{lora_mix, DenoiserParams};
use draft_lab_core::{Precision, Real, Tensor};
use serde::Serialize;

use crate::checkpoint::{convnet_to_checkpoint, load_denoiser, save_denoiser};
use crate::config::LabConfig;
use crate::dataset::{gen_dataset, gen_scorer_dataset};
use crate::image_io::{grid, write_png, write_ppm};
use crate::manifest::RunManifest;
use crate::metrics::{write_jsonl, MetricsWriter};
use crate::pipeline::{self, EvalSummary};

/// Failure of the numerics rather than of the inputs; exits with code 2.
#[derive(Debug)]
pub struct NumericalFailure(pub String);

impl fmt::Display for NumericalFailure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for NumericalFailure {}

/// 2 for numerical failures anywhere in the chain, else 1.
pub fn exit_code(e: &anyhow::Error) -> u8 {
    let numerical = e.chain().any(|c| {
        c.downcast_ref::<NumericalFailure>().is_some()
            || c.downcast_ref::<draft_lab_core::Error>().is_some_and(|x| x.is_numerical())
    });
    if numerical {
        2
    } else {
        1
    }
}

#[derive(Parser, Debug)]
#[command(name = "draft-lab", version, about = "Reward fine-tuning lab for a small conditional diffusion model")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Cmd,
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// TOML config; defaults apply when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
}

#[derive(Args, Debug, Clone)]
pub struct ModelArg {
    /// Denoiser checkpoint; falls back to `finetuned_checkpoint`, then
    /// `base_checkpoint`.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
pub enum Cmd {
    /// Train the base denoiser on the synthetic dataset.
    Pretrain(Common),
    /// Train the frozen shape/color classifier.
    TrainClassifier(Common),
    /// Train the frozen area scorer.
    TrainScorer(Common),
    /// Reward fine-tuning of LoRA adapters on the base model.
    Finetune(Common),
    /// Write samples from the evaluation latent pool.
    Sample {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        model: ModelArg,
        /// Number of samples (default `eval_samples`).
        #[arg(long)]
        n: Option<usize>,
        /// Also write PNG files.
        #[arg(long)]
        png: bool,
    },
    /// Reward statistics on the evaluation latent pool.
    Eval {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        model: ModelArg,
    },
    /// Gradient norms and angles for several truncation depths.
    DiagK {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        model: ModelArg,
    },
    /// Per-sample latent optimization.
    Doodl {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        model: ModelArg,
        #[arg(long, default_value_t = 4)]
        latents: usize,
    },
    /// Finite-difference check of every estimator on a micro model.
    GradCheck {
        #[command(flatten)]
        common: Common,
        /// Check every `stride`-th coordinate.
        #[arg(long, default_value_t = 1)]
        stride: usize,
    },
    /// Evaluate a fine-tuned model at several adapter scales.
    LoraScale {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        model: ModelArg,
        #[arg(long, value_delimiter = ',', default_values_t = [0.0, 0.5, 1.0])]
        alphas: Vec<f64>,
    },
    /// Evaluate mixtures of `finetuned_checkpoint` and `mix_checkpoint`.
    LoraMix {
        #[command(flatten)]
        common: Common,
        /// `alpha:beta` pairs.
        #[arg(long, value_delimiter = ',', default_values_t = ["1:0".to_string(), "0:1".to_string(), "0.5:0.5".to_string()])]
        weights: Vec<String>,
    },
}

impl Cmd {
    fn name(&self) -> &'static str {
        match self {
            Cmd::Pretrain(_) => "pretrain",
            Cmd::TrainClassifier(_) => "train-classifier",
            Cmd::TrainScorer(_) => "train-scorer",
            Cmd::Finetune(_) => "finetune",
            Cmd::Sample { .. } => "sample",
            Cmd::Eval { .. } => "eval",
            Cmd::DiagK { .. } => "diag-k",
            Cmd::Doodl { .. } => "doodl",
            Cmd::GradCheck { .. } => "grad-check",
            Cmd::LoraScale { .. } => "lora-scale",
            Cmd::LoraMix { .. } => "lora-mix",
        }
    }

    fn common(&self) -> &Common {
        match self {
            Cmd::Pretrain(c) | Cmd::TrainClassifier(c) | Cmd::TrainScorer(c) | Cmd::Finetune(c) => c,
            Cmd::Sample { common, .. }
            | Cmd::Eval { common, .. }
            | Cmd::DiagK { common, .. }
            | Cmd::Doodl { common, .. }
            | Cmd::GradCheck { common, .. }
            | Cmd::LoraScale { common, .. }
            | Cmd::LoraMix { common, .. } => common,
        }
    }
}

/// Parses arguments and runs; usage errors exit with 1.
pub fn main_with_args(args: impl IntoIterator<Item = String>) -> ExitCode {
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

pub fn run(cli: Cli) -> Result<()> {
    let common = cli.command.common().clone();
    let cfg = match &common.config {
        Some(p) => LabConfig::load(p)?,
        None => LabConfig::default(),
    };
    match cfg.precision()? {
        Precision::F32 => run_typed::<f32>(&cli.command, &cfg, &common),
        Precision::F64 => run_typed::<f64>(&cli.command, &cfg, &common),
    }
}

fn model_path(cfg: &LabConfig, m: &ModelArg) -> Result<PathBuf> {
    if let Some(p) = &m.checkpoint {
        return Ok(p.clone());
    }
    match (&cfg.finetuned_checkpoint, &cfg.base_checkpoint) {
        (Some(p), _) | (None, Some(p)) => Ok(cfg.resolve(p)),
        (None, None) => bail!("no model: pass --checkpoint or set `finetuned_checkpoint` or `base_checkpoint`"),
    }
}

fn base_model<R: Real>(cfg: &LabConfig, m: Option<&ModelArg>) -> Result<DenoiserParams<R>> {
    let p = match m.and_then(|m| m.checkpoint.clone()) {
        Some(p) => p,
        None => cfg.require_path("base_checkpoint", &cfg.base_checkpoint)?,
    };
    load_denoiser(&p)
}

fn write_json<T: Serialize>(path: &Path, v: &T) -> Result<()> {
    if let Some(d) = path.parent() {
        fs::create_dir_all(d)?;
    }
    fs::write(path, serde_json::to_string_pretty(v)? + "\n")?;
    Ok(())
}

fn write_images<R: Real>(dir: &Path, stem: &str, images: &[Tensor<R>], png: bool) -> Result<()> {
    for (j, img) in images.iter().enumerate() {
        write_ppm(&dir.join(format!("{stem}_{j:03}.ppm")), img)?;
        if png {
            write_png(&dir.join(format!("{stem}_{j:03}.png")), img)?;
        }
    }
    let cols = (images.len() as f64).sqrt().ceil() as usize;
    let g = grid(images, cols.max(1))?;
    write_ppm(&dir.join(format!("{stem}_grid.ppm")), &g)?;
    if png {
        write_png(&dir.join(format!("{stem}_grid.png")), &g)?;
    }
    Ok(())
}

fn print_summary(label: &str, s: &EvalSummary) {
    for (name, st) in &s.rewards {
        println!("{label} {name}: mean {:.6} std {:.6} (n = {})", st.mean, st.std, s.n_samples);
    }
}

#[derive(Serialize)]
struct LossLine {
    step: u64,
    loss: f64,
}

#[derive(Serialize)]
struct ScaledSummary {
    alpha: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    beta: Option<f64>,
    summary: EvalSummary,
}

fn finite(v: f64, what: &str) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(NumericalFailure(format!("non-finite {what}")).into())
    }
}

fn run_typed<R: Real>(cmd: &Cmd, cfg: &LabConfig, common: &Common) -> Result<()> {
    let (seed, out) = (common.seed, common.out.as_path());
    fs::create_dir_all(out)?;
    let mut manifest = RunManifest::new(cmd.name(), cfg, seed)?;
    let schedule = cfg.schedule()?;
    let prompts = pipeline::prompts(cfg);
    match cmd {
        Cmd::Pretrain(_) => {
            let data = gen_dataset(cfg.dataset_seed, cfg.dataset_size);
            let mut w = MetricsWriter::create(out, "pretrain")?;
            let params = pipeline::pretrain::<R>(cfg, &data, seed, |m| w.write(m))?;
            w.finish()?;
            save_denoiser(&params, &out.join("base.ckpt"))?;
            manifest.artifact("metrics", "pretrain.jsonl");
            manifest.artifact("checkpoint", "base.ckpt");
            println!("pretrain: wrote {}", out.join("base.ckpt").display());
        }
        Cmd::TrainClassifier(_) => {
            let data = gen_dataset(cfg.dataset_seed, cfg.dataset_size);
            let mut losses = Vec::new();
            let net = pipeline::train_classifier::<R>(cfg, &data, seed, |step, loss| {
                finite(loss, "classifier loss")?;
                losses.push(LossLine { step, loss });
                Ok(())
            })?;
            write_jsonl(&out.join("classifier.jsonl"), &losses)?;
            let held = gen_dataset(cfg.dataset_seed.wrapping_add(1), 512);
            let labels = |d: &crate::dataset::SyntheticDataset| -> Vec<usize> {
                d.labels().into_iter().map(|l| l.unwrap_or(usize::MAX)).collect()
            };
            let train_acc = pipeline::accuracy(&net, &data.images::<R>(), &labels(&data))?;
            let held_acc = pipeline::accuracy(&net, &held.images::<R>(), &labels(&held))?;
            write_json(
                &out.join("classifier_eval.json"),
                &serde_json::json!({ "train_accuracy": train_acc, "heldout_accuracy": held_acc }),
            )?;
            convnet_to_checkpoint(&net, "classifier").save(&out.join("classifier.ckpt"))?;
            manifest.artifact("checkpoint", "classifier.ckpt");
            manifest.artifact("metrics", "classifier.jsonl");
            println!("train-classifier: train accuracy {train_acc:.4}, held-out accuracy {held_acc:.4}");
        }
        Cmd::TrainScorer(_) => {
            let data = gen_scorer_dataset(cfg.dataset_seed, cfg.dataset_size, cfg.scorer_bg_fraction);
            let mut losses = Vec::new();
            let net = pipeline::train_scorer::<R>(cfg, &data, seed, |step, loss| {
                finite(loss, "scorer loss")?;
                losses.push(LossLine { step, loss });
                Ok(())
            })?;
            write_jsonl(&out.join("scorer.jsonl"), &losses)?;
            let held = gen_scorer_dataset(cfg.dataset_seed.wrapping_add(1), 512, cfg.scorer_bg_fraction);
            let mse = pipeline::scorer_mse(&net, &held)?;
            write_json(&out.join("scorer_eval.json"), &serde_json::json!({ "heldout_mse": mse }))?;
            convnet_to_checkpoint(&net, "scorer").save(&out.join("scorer.ckpt"))?;
            manifest.artifact("checkpoint", "scorer.ckpt");
            manifest.artifact("metrics", "scorer.jsonl");
            println!("train-scorer: held-out mse {mse:.4}");
        }
        Cmd::Finetune(_) => {
            let base = base_model::<R>(cfg, None)?;
            let rewards = pipeline::build_rewards::<R>(cfg)?;
            let mut w = MetricsWriter::create(out, "finetune")?;
            let params = pipeline::finetune(cfg, &base, rewards, seed, |m| w.write(m))?;
            w.finish()?;
            save_denoiser(&params, &out.join("finetuned.ckpt"))?;
            manifest.artifact("metrics", "finetune.jsonl");
            manifest.artifact("checkpoint", "finetuned.ckpt");
            println!("finetune: wrote {}", out.join("finetuned.ckpt").display());
        }
        Cmd::Sample { model, n, png, .. } => {
            let params = load_denoiser::<R>(&model_path(cfg, model)?)?;
            let n = n.unwrap_or(cfg.eval_samples);
            let imgs = pipeline::eval_samples(&params, &schedule, &prompts, n, cfg.guidance_w, cfg.eval_seed)?;
            let imgs: Vec<Tensor<R>> = imgs.into_iter().map(|(_, i)| i).collect();
            write_images(out, "sample", &imgs, *png)?;
            manifest.artifact("grid", "sample_grid.ppm");
            println!("sample: wrote {n} images to {}", out.display());
        }
        Cmd::Eval { model, .. } => {
            let params = load_denoiser::<R>(&model_path(cfg, model)?)?;
            let rewards = pipeline::build_rewards::<R>(cfg)?;
            let s = pipeline::eval_model(&params, &schedule, &rewards, &prompts, cfg.eval_samples, cfg.guidance_w, cfg.eval_seed)?;
            write_json(&out.join("eval.json"), &s)?;
            manifest.artifact("summary", "eval.json");
            print_summary("eval", &s);
        }
        Cmd::DiagK { model, .. } => {
            let base = base_model::<R>(cfg, Some(model))?;
            let rewards = pipeline::build_rewards::<R>(cfg)?;
            let (rows, summary) = pipeline::diag_k(cfg, &base, &rewards, seed)?;
            write_jsonl(&out.join("diag_k.jsonl"), &rows)?;
            write_json(&out.join("diag_k_summary.json"), &summary)?;
            manifest.artifact("rows", "diag_k.jsonl");
            manifest.artifact("summary", "diag_k_summary.json");
            for s in &summary {
                let angle = s.median_angle_deg.map_or("n/a".to_string(), |a| format!("{a:.3} deg"));
                println!("diag-k K={}: median norm {:.6e}, median angle to K=1 {angle}", s.k, s.median_grad_norm);
            }
        }
        Cmd::Doodl { model, latents, .. } => {
            let params = load_denoiser::<R>(&model_path(cfg, model)?)?;
            let rewards = pipeline::build_rewards::<R>(cfg)?;
            let (rows, imgs) = pipeline::doodl_run(cfg, &params, &rewards, *latents, cfg.eval_seed)?;
            write_jsonl(&out.join("doodl.jsonl"), &rows)?;
            write_images(out, "doodl", &imgs, false)?;
            manifest.artifact("rows", "doodl.jsonl");
            let improved = rows.iter().filter(|r| r.best_reward > r.initial_reward).count();
            println!("doodl: improved {improved}/{} latents", rows.len());
        }
        Cmd::GradCheck { stride, .. } => {
            ensure!(*stride > 0, "stride must be positive");
            let rows = pipeline::grad_check(seed, *stride)?;
            write_jsonl(&out.join("grad_check.jsonl"), &rows)?;
            manifest.artifact("rows", "grad_check.jsonl");
            let mut worst: f64 = 0.0;
            for r in &rows {
                println!("grad-check {} K={}: max rel err {:.3e}", r.mode, r.k, r.max_rel_err);
                worst = worst.max(if r.max_rel_err.is_nan() { f64::INFINITY } else { r.max_rel_err });
            }
            manifest.write(out)?;
            if worst > 1e-3 {
                return Err(NumericalFailure(format!("gradient check failed: max rel err {worst:.3e} > 1e-3")).into());
            }
            return Ok(());
        }
        Cmd::LoraScale { model, alphas, .. } => {
            let params = load_denoiser::<R>(&model_path(cfg, model)?)?;
            ensure!(params.adapters.is_some(), "lora-scale needs a checkpoint with adapters");
            let rewards = pipeline::build_rewards::<R>(cfg)?;
            let mut rows = Vec::new();
            for &a in alphas {
                ensure!(a.is_finite(), "alpha must be finite");
                let p = params.lora_scale_set(a);
                let imgs = pipeline::eval_samples(&p, &schedule, &prompts, cfg.eval_samples, cfg.guidance_w, cfg.eval_seed)?;
                let s = pipeline::summarize(&imgs, &rewards)?;
                print_summary(&format!("lora-scale alpha={a}"), &s);
                let imgs: Vec<Tensor<R>> = imgs.into_iter().map(|(_, i)| i).collect();
                write_images(&out.join(format!("alpha_{a}")), "sample", &imgs, false)?;
                rows.push(ScaledSummary {
                    alpha: a,
                    beta: None,
                    summary: s,
                });
            }
            write_jsonl(&out.join("lora_scale.jsonl"), &rows)?;
            manifest.artifact("rows", "lora_scale.jsonl");
        }
        Cmd::LoraMix { weights, .. } => {
            let a = load_denoiser::<R>(&cfg.require_path("finetuned_checkpoint", &cfg.finetuned_checkpoint)?)?;
            let b = load_denoiser::<R>(&cfg.require_path("mix_checkpoint", &cfg.mix_checkpoint)?)?;
            ensure!(a.base == b.base && a.config == b.config, "mixed checkpoints must share one base model");
            let (aa, ba) = match (&a.adapters, &b.adapters) {
                (Some(x), Some(y)) => (x, y),
                _ => bail!("lora-mix needs two checkpoints with adapters"),
            };
            let rewards = pipeline::build_rewards::<R>(cfg)?;
            let mut rows = Vec::new();
            for w in weights {
                let (al, be) = parse_pair(w)?;
                let mixed = a.with_adapters(Some(lora_mix(aa, ba, al * a.lora_scale, be * b.lora_scale)?)).lora_scale_set(1.0);
                let imgs = pipeline::eval_samples(&mixed, &schedule, &prompts, cfg.eval_samples, cfg.guidance_w, cfg.eval_seed)?;
                let s = pipeline::summarize(&imgs, &rewards)?;
                print_summary(&format!("lora-mix {al}:{be}"), &s);
                let imgs: Vec<Tensor<R>> = imgs.into_iter().map(|(_, i)| i).collect();
                write_images(&out.join(format!("mix_{al}_{be}")), "sample", &imgs, false)?;
                rows.push(ScaledSummary {
                    alpha: al,
                    beta: Some(be),
                    summary: s,
                });
            }
            write_jsonl(&out.join("lora_mix.jsonl"), &rows)?;
            manifest.artifact("rows", "lora_mix.jsonl");
        }
    }
    manifest.write(out)
}

fn parse_pair(s: &str) -> Result<(f64, f64)> {
    let (a, b) = s.split_once(':').ok_or_else(|| anyhow!("expected `alpha:beta`, got `{s}`"))?;
    let (a, b): (f64, f64) = (a.trim().parse()?, b.trim().parse()?);
    ensure!(a.is_finite() && b.is_finite(), "mix weights must be finite");
    Ok((a, b))
}
