//! Flat `key = value` run configuration (TOML syntax). Unknown keys are
//! rejected. Paths are resolved against the config file's directory.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, ensure, Context as _, Result};
use draft_lab_core::denoiser::DenoiserConfig;
use draft_lab_core::finetune::{FinetuneConfig, Mode, PretrainConfig};
use draft_lab_core::latent_opt::DoodlConfig;
use draft_lab_core::rewards::ConvNetConfig;
use draft_lab_core::{NoiseSchedule, Precision};
use serde::{Deserialize, Serialize};

use crate::dataset::{NUM_CLASSES, SIZE};

pub const PRECISION_ENV: &str = "DRAFT_LAB_PRECISION";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LabConfig {
    pub precision: String,

    pub channels: usize,
    pub blocks: usize,
    pub emb_dim: usize,
    pub n_train: usize,
    pub sampler_steps: usize,

    pub dataset_size: usize,
    pub dataset_seed: u64,

    pub pretrain_steps: u64,
    pub pretrain_lr: f64,
    pub pretrain_batch: usize,
    pub pretrain_clip: f64,
    pub context_dropout: f64,

    pub net_channels: Vec<usize>,
    pub classifier_steps: u64,
    pub classifier_lr: f64,
    pub classifier_batch: usize,
    pub scorer_steps: u64,
    pub scorer_lr: f64,
    pub scorer_batch: usize,
    pub scorer_bg_fraction: f64,

    pub mode: String,
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
    pub normalize_lv: bool,
    pub checkpoint: bool,

    /// `name` or `name:weight`; names are `jpeg`, `incompressibility`,
    /// `rotation`, `classifier`, `scorer`.
    pub rewards: Vec<String>,
    pub jpeg_quality: u32,
    pub target_class: usize,
    /// Class ids sampled as prompts during fine-tuning and evaluation.
    pub prompts: Vec<usize>,

    pub base_checkpoint: Option<String>,
    pub classifier_checkpoint: Option<String>,
    pub scorer_checkpoint: Option<String>,
    pub finetuned_checkpoint: Option<String>,
    /// Second adapter set for `lora-mix`.
    pub mix_checkpoint: Option<String>,

    pub eval_samples: usize,
    pub eval_seed: u64,

    pub diag_ks: Vec<usize>,
    pub diag_batches: usize,
    pub diag_batch: usize,

    pub doodl_steps: usize,
    pub doodl_lr: f64,

    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl Default for LabConfig {
    fn default() -> Self {
        let ft = FinetuneConfig::default();
        let pt = PretrainConfig::default();
        let dn = DenoiserConfig::default();
        LabConfig {
            precision: "f32".into(),
            channels: dn.channels,
            blocks: dn.blocks,
            emb_dim: dn.emb_dim,
            n_train: 1000,
            sampler_steps: 50,
            dataset_size: 8000,
            dataset_seed: 0,
            pretrain_steps: pt.steps,
            pretrain_lr: pt.lr,
            pretrain_batch: pt.batch,
            pretrain_clip: pt.clip_norm,
            context_dropout: pt.context_dropout,
            net_channels: ConvNetConfig::image(1).channels,
            classifier_steps: 1500,
            classifier_lr: 3e-3,
            classifier_batch: 32,
            scorer_steps: 1500,
            scorer_lr: 3e-3,
            scorer_batch: 32,
            scorer_bg_fraction: 0.1,
            mode: ft.mode.name().into(),
            k: ft.k,
            m: ft.m,
            n: ft.n,
            guidance_w: ft.guidance_w,
            lr: ft.lr,
            batch: ft.batch,
            steps: ft.steps,
            weight_decay: ft.weight_decay,
            clip_norm: ft.clip_norm,
            beta_kl: ft.beta_kl,
            lora_rank: ft.lora_rank,
            lr_decay: ft.lr_decay,
            normalize_lv: ft.normalize_lv,
            checkpoint: ft.checkpoint,
            rewards: vec!["jpeg".into()],
            jpeg_quality: 50,
            target_class: 4,
            prompts: (0..NUM_CLASSES).collect(),
            base_checkpoint: None,
            classifier_checkpoint: None,
            scorer_checkpoint: None,
            finetuned_checkpoint: None,
            mix_checkpoint: None,
            eval_samples: 64,
            eval_seed: 1234,
            diag_ks: vec![1, 5, 10, 30, 50],
            diag_batches: 20,
            diag_batch: 2,
            doodl_steps: 20,
            doodl_lr: 0.05,
            base_dir: PathBuf::new(),
        }
    }
}

/// A parsed `name[:weight]` reward entry.
#[derive(Clone, Debug, PartialEq)]
pub struct RewardSpec {
    pub name: String,
    pub weight: f64,
}

pub const REWARD_NAMES: [&str; 5] = ["jpeg", "incompressibility", "rotation", "classifier", "scorer"];

pub fn parse_reward(s: &str) -> Result<RewardSpec> {
    let (name, weight) = match s.split_once(':') {
        Some((n, w)) => (n.trim(), w.trim().parse::<f64>().map_err(|_| anyhow!("bad reward weight in `{s}`"))?),
        None => (s.trim(), 1.0),
    };
    ensure!(REWARD_NAMES.contains(&name), "unknown reward `{name}`");
    ensure!(weight.is_finite(), "reward weight must be finite");
    Ok(RewardSpec {
        name: name.to_string(),
        weight,
    })
}

impl LabConfig {
    pub fn from_toml(text: &str, base_dir: &Path) -> Result<Self> {
        let mut cfg: LabConfig = toml::from_str(text).context("invalid config")?;
        cfg.base_dir = base_dir.to_path_buf();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::from_toml(&text, &dir).with_context(|| format!("in {}", path.display()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Explicit environment override, else the config value.
    pub fn precision(&self) -> Result<Precision> {
        let s = std::env::var(PRECISION_ENV).unwrap_or_else(|_| self.precision.clone());
        Precision::parse(&s).ok_or_else(|| anyhow!("unknown precision `{s}`"))
    }

    pub fn validate(&self) -> Result<()> {
        Precision::parse(&self.precision).ok_or_else(|| anyhow!("unknown precision `{}`", self.precision))?;
        self.denoiser_config().validate()?;
        self.schedule()?;
        self.finetune_config()?.validate(self.sampler_steps)?;
        for r in &self.rewards {
            parse_reward(r)?;
        }
        ensure!(!self.rewards.is_empty(), "at least one reward is required");
        ensure!(self.jpeg_quality >= 10 && self.jpeg_quality <= 95, "jpeg_quality must lie in 10..=95");
        ensure!(self.target_class < NUM_CLASSES, "target_class outside 0..{NUM_CLASSES}");
        ensure!(!self.prompts.is_empty(), "prompts must not be empty");
        ensure!(self.prompts.iter().all(|&p| p < NUM_CLASSES), "prompt class outside 0..{NUM_CLASSES}");
        ensure!(self.dataset_size > 0, "dataset_size must be positive");
        ensure!(self.pretrain_batch > 0 && self.classifier_batch > 0 && self.scorer_batch > 0, "batch sizes must be positive");
        ensure!((0.0..=1.0).contains(&self.context_dropout), "context_dropout must lie in [0, 1]");
        ensure!((0.0..1.0).contains(&self.scorer_bg_fraction), "scorer_bg_fraction must lie in [0, 1)");
        ensure!(!self.net_channels.is_empty(), "net_channels must not be empty");
        ensure!(self.diag_batch > 0, "diag_batch must be positive");
        for (name, v) in [("pretrain_lr", self.pretrain_lr), ("doodl_lr", self.doodl_lr), ("classifier_lr", self.classifier_lr), ("scorer_lr", self.scorer_lr)] {
            ensure!(v.is_finite() && v > 0.0, "{name} must be positive");
        }
        Ok(())
    }

    pub fn validate_diag(&self) -> Result<()> {
        ensure!(!self.diag_ks.is_empty(), "diag_ks must not be empty");
        for &k in &self.diag_ks {
            ensure!((1..=self.sampler_steps).contains(&k), "diag K = {k} outside 1..={}", self.sampler_steps);
        }
        Ok(())
    }

    pub fn denoiser_config(&self) -> DenoiserConfig {
        DenoiserConfig {
            image_channels: 3,
            height: SIZE,
            width: SIZE,
            channels: self.channels,
            blocks: self.blocks,
            emb_dim: self.emb_dim,
            num_classes: NUM_CLASSES,
            n_train: self.n_train,
        }
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        Ok(NoiseSchedule::new(self.n_train, self.sampler_steps)?)
    }

    pub fn finetune_config(&self) -> Result<FinetuneConfig> {
        let mode = Mode::parse(&self.mode).ok_or_else(|| anyhow!("unknown mode `{}`", self.mode))?;
        Ok(FinetuneConfig {
            mode,
            k: self.k,
            m: self.m,
            n: self.n,
            guidance_w: self.guidance_w,
            lr: self.lr,
            batch: self.batch,
            steps: self.steps,
            weight_decay: self.weight_decay,
            clip_norm: self.clip_norm,
            beta_kl: self.beta_kl,
            lora_rank: self.lora_rank,
            lr_decay: self.lr_decay,
            normalize_lv: self.normalize_lv,
            checkpoint: self.checkpoint,
        })
    }

    pub fn pretrain_config(&self) -> PretrainConfig {
        PretrainConfig {
            lr: self.pretrain_lr,
            batch: self.pretrain_batch,
            steps: self.pretrain_steps,
            weight_decay: 0.0,
            clip_norm: self.pretrain_clip,
            context_dropout: self.context_dropout,
        }
    }

    pub fn doodl_config(&self) -> DoodlConfig {
        DoodlConfig {
            steps: self.doodl_steps,
            lr: self.doodl_lr,
            guidance: self.guidance_w,
            checkpoint: self.checkpoint,
        }
    }

    pub fn net_config(&self, outputs: usize) -> ConvNetConfig {
        ConvNetConfig {
            in_channels: 3,
            height: SIZE,
            width: SIZE,
            channels: self.net_channels.clone(),
            outputs,
        }
    }

    pub fn reward_specs(&self) -> Result<Vec<RewardSpec>> {
        self.rewards.iter().map(|r| parse_reward(r)).collect()
    }

    pub fn resolve(&self, p: &str) -> PathBuf {
        let path = Path::new(p);
        if path.is_absolute() {
            path.to_path_buf()
        } else {
            self.base_dir.join(path)
        }
    }

    /// Resolved path of a required checkpoint key.
    pub fn require_path(&self, key: &str, value: &Option<String>) -> Result<PathBuf> {
        match value {
            Some(p) => Ok(self.resolve(p)),
            None => bail!("config key `{key}` is required for this command"),
        }
    }
}
