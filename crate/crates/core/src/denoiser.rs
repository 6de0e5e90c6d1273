//! Conditional noise predictor with low-rank adapters and classifier-free
//! guidance.
//!
//! The network is a residual stack of 3x3 convolutions. A sinusoidal time
//! embedding and a learned class embedding are summed, passed through SiLU,
//! and projected per block onto the block's channels.

use std::collections::BTreeMap;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::params::{BoundParams, ParamStore};
use crate::real::Real;
use crate::rng::{KeyedRng, Purpose};
use crate::schedule::{cosine_alpha, sigma_of, NoiseSchedule};
use crate::tensor::{Gradients, Graph, Tensor, Var};

/// Class index of the unconditional token.
pub const NULL_TOKEN: usize = usize::MAX;

/// Conditioning signal: a class id or the empty token.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Context(usize);

impl Context {
    pub const NULL: Context = Context(NULL_TOKEN);

    pub const fn class(id: usize) -> Self {
        Context(id)
    }

    pub fn id(self) -> usize {
        self.0
    }

    pub fn is_null(self) -> bool {
        self.0 == NULL_TOKEN
    }

    /// Embedding row; the null token uses the row after the last class.
    pub fn row(self, num_classes: usize) -> Result<usize> {
        if self.is_null() {
            Ok(num_classes)
        } else if self.0 < num_classes {
            Ok(self.0)
        } else {
            Err(Error::invalid(format!("class {} outside 0..{num_classes}", self.0)))
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DenoiserConfig {
    pub image_channels: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub blocks: usize,
    pub emb_dim: usize,
    pub num_classes: usize,
    /// Training timesteps of the noise schedule the model is conditioned on.
    pub n_train: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        DenoiserConfig {
            image_channels: 3,
            height: 24,
            width: 24,
            channels: 32,
            blocks: 4,
            emb_dim: 32,
            num_classes: 8,
            n_train: 1000,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerKind {
    /// Flattened `[cout, cin*9]` kernel.
    Conv3x3,
    Linear,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerSpec {
    pub name: String,
    pub kind: LayerKind,
    pub d_in: usize,
    pub d_out: usize,
}

impl DenoiserConfig {
    pub fn image_shape(&self) -> [usize; 3] {
        [self.image_channels, self.height, self.width]
    }

    pub fn image_numel(&self) -> usize {
        self.image_channels * self.height * self.width
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_channels == 0 || self.height == 0 || self.width == 0 {
            return Err(Error::invalid("image dimensions must be positive"));
        }
        if self.channels == 0 || self.num_classes == 0 {
            return Err(Error::invalid("channels and num_classes must be positive"));
        }
        if self.emb_dim < 2 || self.emb_dim % 2 != 0 {
            return Err(Error::invalid("emb_dim must be even and >= 2"));
        }
        if self.n_train == 0 {
            return Err(Error::invalid("n_train must be positive"));
        }
        Ok(())
    }

    pub fn check_schedule(&self, schedule: &NoiseSchedule) -> Result<()> {
        if schedule.n_train() != self.n_train {
            return Err(Error::invalid(format!(
                "schedule has {} training steps, model expects {}",
                schedule.n_train(),
                self.n_train
            )));
        }
        Ok(())
    }

    /// Weight-bearing layers in forward order.
    pub fn layers(&self) -> Vec<LayerSpec> {
        let conv = |name: String, cin: usize, cout: usize| LayerSpec {
            name,
            kind: LayerKind::Conv3x3,
            d_in: cin * 9,
            d_out: cout,
        };
        let c = self.channels;
        let mut v = vec![conv("conv_in".into(), self.image_channels, c)];
        for b in 0..self.blocks {
            v.push(LayerSpec {
                name: format!("block{b}.proj"),
                kind: LayerKind::Linear,
                d_in: self.emb_dim,
                d_out: c,
            });
            v.push(conv(format!("block{b}.conv1"), c, c));
            v.push(conv(format!("block{b}.conv2"), c, c));
        }
        v.push(conv("conv_out".into(), c, self.image_channels));
        v
    }
}

/// Sinusoidal embedding of a timestep, `[sin(t f_i), cos(t f_i)]` with
/// geometric frequencies `f_i = 10000^(-i/half)`.
pub fn time_embedding<R: Real>(t: usize, dim: usize) -> Tensor<R> {
    let half = dim / 2;
    let mut v = vec![R::zero(); dim];
    for i in 0..half {
        let f = (-(10000f64.ln()) * i as f64 / half as f64).exp();
        let a = t as f64 * f;
        v[i] = R::lit(a.sin());
        v[half + i] = R::lit(a.cos());
    }
    Tensor::from_vec(vec![dim], v).expect("time embedding shape")
}

/// Adapter weights: trainable factors, or a merged product produced by
/// mixing.
#[derive(Clone, Debug, PartialEq)]
pub enum AdapterWeights<R> {
    /// `a: [r, d_in]`, `b: [d_out, r]`.
    Factored { a: Tensor<R>, b: Tensor<R> },
    /// `[d_out, d_in]`.
    Merged { delta: Tensor<R> },
}

#[derive(Clone, Debug, PartialEq)]
pub struct LoraAdapter<R> {
    pub layer_name: String,
    pub rank: usize,
    pub weights: AdapterWeights<R>,
}

impl<R: Real> LoraAdapter<R> {
    /// `B A` (or the stored delta), shape `[d_out, d_in]`.
    pub fn delta(&self) -> Tensor<R> {
        match &self.weights {
            AdapterWeights::Factored { a, b } => {
                let (dout, r, din) = (b.shape()[0], b.shape()[1], a.shape()[1]);
                let d = crate::tensor::kernels::matmul(b.data(), a.data(), dout, r, din);
                Tensor::from_vec(vec![dout, din], d).expect("delta shape")
            }
            AdapterWeights::Merged { delta } => delta.clone(),
        }
    }

    pub fn numel(&self) -> usize {
        match &self.weights {
            AdapterWeights::Factored { a, b } => a.numel() + b.numel(),
            AdapterWeights::Merged { delta } => delta.numel(),
        }
    }
}

/// Adapters for a set of layers, kept in forward order.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct AdapterSet<R> {
    adapters: Vec<LoraAdapter<R>>,
}

/// Adapter tensors bound on a tape, aligned with their [`AdapterSet`].
#[derive(Clone, Debug)]
pub struct AdapterVars {
    entries: Vec<(String, AdapterVar)>,
}

#[derive(Clone, Copy, Debug)]
enum AdapterVar {
    Factored { a: Var, b: Var },
    Merged { delta: Var },
}

impl AdapterVars {
    /// All vars in a fixed order, for use as checkpoint segment inputs.
    pub fn flat(&self) -> Vec<Var> {
        let mut v = Vec::new();
        for (_, e) in &self.entries {
            match *e {
                AdapterVar::Factored { a, b } => {
                    v.push(a);
                    v.push(b);
                }
                AdapterVar::Merged { delta } => v.push(delta),
            }
        }
        v
    }

    /// Same structure over a different set of vars (e.g. segment leaves).
    pub fn rebind(&self, flat: &[Var]) -> AdapterVars {
        let mut it = flat.iter().copied();
        let mut next = || it.next().expect("adapter var count mismatch");
        let entries = self
            .entries
            .iter()
            .map(|(name, e)| {
                let e = match e {
                    AdapterVar::Factored { .. } => AdapterVar::Factored { a: next(), b: next() },
                    AdapterVar::Merged { .. } => AdapterVar::Merged { delta: next() },
                };
                (name.clone(), e)
            })
            .collect();
        AdapterVars { entries }
    }

    /// Gradients keyed by adapter tensor name.
    pub fn collect_grads<R: Real>(&self, grads: &Gradients<R>) -> BTreeMap<String, Tensor<R>> {
        let mut out = BTreeMap::new();
        for (name, e) in &self.entries {
            match *e {
                AdapterVar::Factored { a, b } => {
                    out.insert(format!("lora/{name}/A"), grads.wrt(a).clone());
                    out.insert(format!("lora/{name}/B"), grads.wrt(b).clone());
                }
                AdapterVar::Merged { delta } => {
                    out.insert(format!("lora/{name}/delta"), grads.wrt(delta).clone());
                }
            }
        }
        out
    }

    fn get(&self, layer: &str) -> Option<AdapterVar> {
        self.entries.iter().find(|(n, _)| n == layer).map(|(_, e)| *e)
    }
}

impl<R: Real> AdapterSet<R> {
    pub fn new(adapters: Vec<LoraAdapter<R>>) -> Self {
        AdapterSet { adapters }
    }

    /// Rank-`rank` adapters on every layer, `A ~ N(0, 1/d_in)` and `B = 0`.
    /// Per-layer rank is capped at `min(d_in, d_out)`.
    pub fn init(config: &DenoiserConfig, rank: usize, seed: u64) -> Result<Self> {
        if rank == 0 {
            return Err(Error::invalid("LoRA rank must be >= 1"));
        }
        let rng = KeyedRng::new(seed);
        let adapters = config
            .layers()
            .into_iter()
            .enumerate()
            .map(|(i, l)| {
                let r = rank.min(l.d_in).min(l.d_out);
                let mut a = rng.normal::<R>(&[r, l.d_in], Purpose::ParamInit, 1, i as u64);
                a.scale_in_place(R::lit(1.0 / (l.d_in as f64).sqrt()));
                LoraAdapter {
                    layer_name: l.name,
                    rank: r,
                    weights: AdapterWeights::Factored {
                        a,
                        b: Tensor::zeros(&[l.d_out, r]),
                    },
                }
            })
            .collect();
        Ok(AdapterSet { adapters })
    }

    pub fn adapters(&self) -> &[LoraAdapter<R>] {
        &self.adapters
    }

    pub fn len(&self) -> usize {
        self.adapters.len()
    }

    pub fn is_empty(&self) -> bool {
        self.adapters.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.adapters.iter().map(|a| a.numel()).sum()
    }

    pub fn get(&self, layer: &str) -> Option<&LoraAdapter<R>> {
        self.adapters.iter().find(|a| a.layer_name == layer)
    }

    /// Places the adapter tensors on the tape; trainable leaves or constants.
    pub fn bind(&self, g: &mut Graph<'_, R>, trainable: bool) -> AdapterVars {
        let mut put = |t: &Tensor<R>| {
            if trainable {
                g.param(t.clone())
            } else {
                g.constant(t.clone())
            }
        };
        let entries = self
            .adapters
            .iter()
            .map(|ad| {
                let e = match &ad.weights {
                    AdapterWeights::Factored { a, b } => AdapterVar::Factored { a: put(a), b: put(b) },
                    AdapterWeights::Merged { delta } => AdapterVar::Merged { delta: put(delta) },
                };
                (ad.layer_name.clone(), e)
            })
            .collect();
        AdapterVars { entries }
    }

    /// Tensors keyed `lora/<layer>/{A,B,delta}`.
    pub fn to_named(&self) -> BTreeMap<String, Tensor<R>> {
        let mut out = BTreeMap::new();
        for ad in &self.adapters {
            match &ad.weights {
                AdapterWeights::Factored { a, b } => {
                    out.insert(format!("lora/{}/A", ad.layer_name), a.clone());
                    out.insert(format!("lora/{}/B", ad.layer_name), b.clone());
                }
                AdapterWeights::Merged { delta } => {
                    out.insert(format!("lora/{}/delta", ad.layer_name), delta.clone());
                }
            }
        }
        out
    }

    /// Inverse of [`AdapterSet::to_named`]; layer order follows `config`.
    pub fn from_named(config: &DenoiserConfig, named: &BTreeMap<String, Tensor<R>>) -> Result<Self> {
        let mut adapters = Vec::new();
        for l in config.layers() {
            let get = |s: &str| named.get(&format!("lora/{}/{s}", l.name));
            let ad = match (get("A"), get("B"), get("delta")) {
                (Some(a), Some(b), None) => {
                    let r = a.shape()[0];
                    if a.shape() != [r, l.d_in] || b.shape() != [l.d_out, r] {
                        return Err(Error::AdapterMismatch(format!("bad factor shapes for {}", l.name)));
                    }
                    LoraAdapter {
                        layer_name: l.name.clone(),
                        rank: r,
                        weights: AdapterWeights::Factored { a: a.clone(), b: b.clone() },
                    }
                }
                (None, None, Some(d)) => {
                    if d.shape() != [l.d_out, l.d_in] {
                        return Err(Error::AdapterMismatch(format!("bad delta shape for {}", l.name)));
                    }
                    LoraAdapter {
                        layer_name: l.name.clone(),
                        rank: l.d_in.min(l.d_out),
                        weights: AdapterWeights::Merged { delta: d.clone() },
                    }
                }
                (None, None, None) => continue,
                _ => return Err(Error::AdapterMismatch(format!("incomplete adapter for {}", l.name))),
            };
            adapters.push(ad);
        }
        let used: usize = adapters
            .iter()
            .map(|a| match a.weights {
                AdapterWeights::Factored { .. } => 2,
                AdapterWeights::Merged { .. } => 1,
            })
            .sum();
        if used != named.len() {
            return Err(Error::AdapterMismatch("unrecognized adapter tensors".into()));
        }
        Ok(AdapterSet { adapters })
    }

    /// Applies `f(name, tensor)` to every trainable tensor in place.
    pub fn for_each_mut(&mut self, mut f: impl FnMut(&str, &mut Tensor<R>)) {
        for ad in &mut self.adapters {
            match &mut ad.weights {
                AdapterWeights::Factored { a, b } => {
                    f(&format!("lora/{}/A", ad.layer_name), a);
                    f(&format!("lora/{}/B", ad.layer_name), b);
                }
                AdapterWeights::Merged { delta } => f(&format!("lora/{}/delta", ad.layer_name), delta),
            }
        }
    }

    pub fn cast<S: Real>(&self) -> AdapterSet<S> {
        AdapterSet {
            adapters: self
                .adapters
                .iter()
                .map(|ad| LoraAdapter {
                    layer_name: ad.layer_name.clone(),
                    rank: ad.rank,
                    weights: match &ad.weights {
                        AdapterWeights::Factored { a, b } => AdapterWeights::Factored { a: a.cast(), b: b.cast() },
                        AdapterWeights::Merged { delta } => AdapterWeights::Merged { delta: delta.cast() },
                    },
                })
                .collect(),
        }
    }
}

/// `alpha * (B_a A_a) + beta * (B_b A_b)` per layer, stored as merged deltas.
pub fn lora_mix<R: Real>(a: &AdapterSet<R>, b: &AdapterSet<R>, alpha: f64, beta: f64) -> Result<AdapterSet<R>> {
    if a.adapters.len() != b.adapters.len() {
        return Err(Error::AdapterMismatch(format!(
            "{} layers vs {} layers",
            a.adapters.len(),
            b.adapters.len()
        )));
    }
    let (al, be) = (R::lit(alpha), R::lit(beta));
    let adapters = a
        .adapters
        .iter()
        .zip(&b.adapters)
        .map(|(x, y)| {
            if x.layer_name != y.layer_name {
                return Err(Error::AdapterMismatch(format!(
                    "layer {} vs {}",
                    x.layer_name, y.layer_name
                )));
            }
            if x.rank != y.rank {
                return Err(Error::AdapterMismatch(format!(
                    "rank {} vs {} on {}",
                    x.rank, y.rank, x.layer_name
                )));
            }
            let (dx, dy) = (x.delta(), y.delta());
            let delta = dx.zip_map(&dy, |p, q| al * p + be * q);
            // A sum of two rank-r products is no longer rank r in general.
            let full = delta.shape()[0].min(delta.shape()[1]);
            Ok(LoraAdapter {
                layer_name: x.layer_name.clone(),
                rank: full,
                weights: AdapterWeights::Merged { delta },
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(AdapterSet { adapters })
}

/// Frozen base weights, optional adapters and the adapter scale.
#[derive(Clone, Debug, PartialEq)]
pub struct DenoiserParams<R> {
    pub config: DenoiserConfig,
    pub base: ParamStore<R>,
    pub adapters: Option<AdapterSet<R>>,
    pub lora_scale: f64,
}

/// Effective per-call weights on one tape.
pub struct Weights {
    layers: BTreeMap<String, (Var, Var)>,
    class_embed: Var,
}

impl<R: Real> DenoiserParams<R> {
    /// He-style normal initialization keyed by `seed`; the last conv of each
    /// block and the output conv start small so the stack begins near the
    /// identity.
    pub fn init(config: DenoiserConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let rng = KeyedRng::new(seed);
        let mut base = ParamStore::new();
        for (i, l) in config.layers().into_iter().enumerate() {
            let gain = if l.name.ends_with("conv2") || l.name == "conv_out" {
                0.1
            } else {
                (2.0f64).sqrt()
            };
            let mut w = rng.normal::<R>(&[l.d_out, l.d_in], Purpose::ParamInit, 0, i as u64);
            w.scale_in_place(R::lit(gain / (l.d_in as f64).sqrt()));
            base.insert(format!("{}.weight", l.name), w);
            base.insert(format!("{}.bias", l.name), Tensor::zeros(&[l.d_out]));
        }
        let emb = rng.normal::<R>(
            &[config.num_classes + 1, config.emb_dim],
            Purpose::ParamInit,
            0,
            u32::MAX as u64,
        );
        base.insert("class_embed", emb);
        Ok(DenoiserParams {
            config,
            base,
            adapters: None,
            lora_scale: 1.0,
        })
    }

    pub fn from_parts(config: DenoiserConfig, base: ParamStore<R>, adapters: Option<AdapterSet<R>>) -> Result<Self> {
        config.validate()?;
        for l in config.layers() {
            let w = base.require(&format!("{}.weight", l.name))?;
            let b = base.require(&format!("{}.bias", l.name))?;
            if w.shape() != [l.d_out, l.d_in] || b.shape() != [l.d_out] {
                return Err(Error::invalid(format!("bad shapes for layer {}", l.name)));
            }
        }
        let e = base.require("class_embed")?;
        if e.shape() != [config.num_classes + 1, config.emb_dim] {
            return Err(Error::invalid("bad class_embed shape"));
        }
        Ok(DenoiserParams {
            config,
            base,
            adapters,
            lora_scale: 1.0,
        })
    }

    pub fn base_param_count(&self) -> usize {
        self.base.numel()
    }

    /// Copy with fresh adapters (`B = 0`).
    pub fn with_fresh_adapters(&self, rank: usize, seed: u64) -> Result<Self> {
        let mut p = self.clone();
        p.adapters = Some(AdapterSet::init(&self.config, rank, seed)?);
        p.lora_scale = 1.0;
        Ok(p)
    }

    pub fn with_adapters(&self, adapters: Option<AdapterSet<R>>) -> Self {
        let mut p = self.clone();
        p.adapters = adapters;
        p
    }

    pub fn without_adapters(&self) -> Self {
        self.with_adapters(None)
    }

    /// Copy whose adapter contribution is scaled by `alpha`.
    pub fn lora_scale_set(&self, alpha: f64) -> Self {
        let mut p = self.clone();
        p.lora_scale = alpha;
        p
    }

    /// Whether the adapter path contributes at all.
    pub fn adapters_active(&self) -> bool {
        self.lora_scale != 0.0 && self.adapters.as_ref().is_some_and(|a| !a.is_empty())
    }

    /// Effective weights `W0 + s (B A)`, built once per denoiser step and
    /// shared by every branch evaluated in that step.
    ///
    /// `base` defaults to the stored weights as constants; `adapters`
    /// defaults to the stored adapters as constants. Adapters are skipped
    /// entirely when the scale is zero.
    pub fn weights(&self, g: &mut Graph<'_, R>, base: Option<&BoundParams>, adapters: Option<&AdapterVars>) -> Weights {
        let owned_base;
        let base = match base {
            Some(b) => b,
            None => {
                owned_base = self.base.bind(g, false);
                &owned_base
            }
        };
        let owned_ad;
        let adapters = if !self.adapters_active() {
            None
        } else {
            match adapters {
                Some(a) => Some(a),
                None => {
                    owned_ad = self.adapters.as_ref().map(|a| a.bind(g, false));
                    owned_ad.as_ref()
                }
            }
        };
        let s = R::lit(self.lora_scale);
        let mut layers = BTreeMap::new();
        for l in self.config.layers() {
            let w0 = base.get(&format!("{}.weight", l.name));
            let bias = base.get(&format!("{}.bias", l.name));
            let w = match adapters.and_then(|a| a.get(&l.name)) {
                None => w0,
                Some(av) => {
                    let d = match av {
                        AdapterVar::Factored { a, b } => g.matmul(b, a),
                        AdapterVar::Merged { delta } => delta,
                    };
                    let d = g.scale(d, s);
                    g.add(w0, d)
                }
            };
            layers.insert(l.name, (w, bias));
        }
        Weights {
            layers,
            class_embed: base.get("class_embed"),
        }
    }

    fn check_input(&self, g: &Graph<'_, R>, x: Var) -> Result<()> {
        let want = self.config.image_shape();
        if g.shape(x) != want {
            return Err(Error::Shape {
                op: "eps_theta",
                detail: format!("input {:?}, expected {want:?}", g.shape(x)),
            });
        }
        Ok(())
    }

    /// Predicted noise for `x_t` under context `c` at schedule index `t`:
    /// `sigma_t x_t + alpha_t F(x_t, c, t)` for the conv net `F`.
    pub fn eps_theta(&self, g: &mut Graph<'_, R>, w: &Weights, x: Var, c: Context, t: usize) -> Result<Var> {
        self.check_input(g, x)?;
        let cfg = &self.config;
        if t > cfg.n_train {
            return Err(Error::invalid(format!("timestep {t} outside 0..={}", cfg.n_train)));
        }
        let alpha = cosine_alpha(t, cfg.n_train);
        let row = c.row(cfg.num_classes)?;
        let temb = g.constant(time_embedding(t, cfg.emb_dim));
        let cemb = g.embedding(w.class_embed, row);
        let e = g.add(temb, cemb);
        let e = g.silu(e);
        let e = g.reshape(e, &[cfg.emb_dim, 1]);
        let layer = |name: &str| w.layers[name];

        let (wi, bi) = layer("conv_in");
        let h = g.conv3x3(x, wi);
        let mut h = g.add_channel(h, bi);
        for b in 0..cfg.blocks {
            let (wp, bp) = layer(&format!("block{b}.proj"));
            let p = g.matmul(wp, e);
            let p = g.reshape(p, &[cfg.channels]);
            let p = g.add(p, bp);
            let u = g.add_channel(h, p);
            let u = g.silu(u);
            let (w1, b1) = layer(&format!("block{b}.conv1"));
            let r = g.conv3x3(u, w1);
            let r = g.add_channel(r, b1);
            let r = g.silu(r);
            let (w2, b2) = layer(&format!("block{b}.conv2"));
            let r = g.conv3x3(r, w2);
            let r = g.add_channel(r, b2);
            h = g.add(h, r);
        }
        let h = g.silu(h);
        let (wo, bo) = layer("conv_out");
        let out = g.conv3x3(h, wo);
        let out = g.add_channel(out, bo);
        let skip = g.scale(x, R::lit(sigma_of(alpha)));
        let out = g.scale(out, R::lit(alpha));
        Ok(g.add(skip, out))
    }

    /// [`DenoiserParams::eps_theta`] restricted to the sampler grid, as used
    /// during fine-tuning.
    pub fn eps_theta_on_grid(
        &self,
        g: &mut Graph<'_, R>,
        w: &Weights,
        x: Var,
        c: Context,
        t: usize,
        schedule: &NoiseSchedule,
    ) -> Result<Var> {
        if !schedule.is_on_grid(t) {
            return Err(Error::invalid(format!("timestep {t} is not on the sampler grid")));
        }
        self.eps_theta(g, w, x, c, t)
    }

    /// Guided noise `(1 + w) eps(x, c) - w eps(x, null)`. With `w = 0` the
    /// conditional branch is returned as is.
    pub fn cfg_eps(&self, g: &mut Graph<'_, R>, wts: &Weights, x: Var, c: Context, t: usize, w: f64) -> Result<Var> {
        if c.is_null() {
            return Err(Error::invalid("guidance needs a class context, got the null token"));
        }
        let ec = self.eps_theta(g, wts, x, c, t)?;
        if w == 0.0 {
            return Ok(ec);
        }
        let eu = self.eps_theta(g, wts, x, Context::NULL, t)?;
        Ok(combine_guidance(g, ec, eu, w))
    }

    /// Forward-only evaluation of [`DenoiserParams::eps_theta`].
    pub fn eps_value(&self, x: &Tensor<R>, c: Context, t: usize) -> Result<Tensor<R>> {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let w = self.weights(&mut g, None, None);
        let e = self.eps_theta(&mut g, &w, xv, c, t)?;
        g.check()?;
        Ok(g.value(e).clone())
    }

    /// Forward-only evaluation of [`DenoiserParams::cfg_eps`].
    pub fn cfg_value(&self, x: &Tensor<R>, c: Context, t: usize, w: f64) -> Result<Tensor<R>> {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let wts = self.weights(&mut g, None, None);
        let e = self.cfg_eps(&mut g, &wts, xv, c, t, w)?;
        g.check()?;
        Ok(g.value(e).clone())
    }

    pub fn cast<S: Real>(&self) -> DenoiserParams<S> {
        DenoiserParams {
            config: self.config.clone(),
            base: self.base.cast(),
            adapters: self.adapters.as_ref().map(|a| a.cast()),
            lora_scale: self.lora_scale,
        }
    }

    /// Digest of base weights and adapters.
    pub fn fingerprint(&self) -> u64 {
        let mut h = self.base.fingerprint();
        if let Some(a) = &self.adapters {
            for (k, v) in a.to_named() {
                for b in k.bytes() {
                    h = (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3);
                }
                h = (h ^ v.fingerprint()).wrapping_mul(0x0000_0100_0000_01b3);
            }
        }
        h
    }
}

/// `(1 + w) ec - w eu`.
pub fn combine_guidance<R: Real>(g: &mut Graph<'_, R>, ec: Var, eu: Var, w: f64) -> Var {
    let a = g.scale(ec, R::lit(1.0 + w));
    let b = g.scale(eu, R::lit(w));
    g.sub(a, b)
}

/// Shared handle for segment closures.
pub type SharedParams<R> = Arc<DenoiserParams<R>>;
