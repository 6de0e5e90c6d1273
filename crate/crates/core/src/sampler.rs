//! Deterministic DDIM sampling with stop-gradient truncation, per-step
//! checkpointing and early termination, plus an ancestral sampler and
//! adapter windows for evaluation.

use std::rc::Rc;

use crate::denoiser::{AdapterVars, Context, DenoiserParams};
use crate::error::{Error, Result};
use crate::real::Real;
use crate::rng::{KeyedRng, Purpose};
use crate::schedule::NoiseSchedule;
use crate::tensor::{Graph, SegmentOutputs, Tensor, Var};

/// Where the backward pass is cut.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Truncation {
    /// Gradient through every step, including into `x_T`.
    None,
    /// `stop_grad` on the latent entering step `K`; backprop covers the
    /// last `K` steps.
    StopGradAt(usize),
    /// `stop_grad` at step `t`, then return the one-step prediction there.
    Refl(usize),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SampleConfig {
    pub guidance: f64,
    pub truncation: Truncation,
    /// Wrap each differentiable step in a checkpoint segment.
    pub checkpoint: bool,
}

impl SampleConfig {
    pub fn new(guidance: f64, truncation: Truncation) -> Self {
        SampleConfig {
            guidance,
            truncation,
            checkpoint: true,
        }
    }
}

/// Latents in generation order (`latents[0] = x_T`) and the one-step
/// predictions of each executed step.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleTrace<R> {
    pub latents: Vec<Tensor<R>>,
    pub xhat0: Vec<Tensor<R>>,
    pub stop_grad_step: Option<usize>,
    pub guidance_w: f64,
    /// Set when sampling stopped early at this step.
    pub truncated_at: Option<usize>,
    pub steps: usize,
    pub x0: Tensor<R>,
}

impl<R: Real> SampleTrace<R> {
    /// Latent at sampler index `k` (`S` is the initial draw).
    pub fn latent(&self, k: usize) -> Option<&Tensor<R>> {
        self.steps.checked_sub(k).and_then(|i| self.latents.get(i))
    }

    pub fn bit_eq(&self, other: &Self) -> bool {
        self.latents.len() == other.latents.len()
            && self.latents.iter().zip(&other.latents).all(|(a, b)| a.bit_eq(b))
            && self.xhat0.len() == other.xhat0.len()
            && self.xhat0.iter().zip(&other.xhat0).all(|(a, b)| a.bit_eq(b))
            && self.x0.bit_eq(&other.x0)
    }
}

/// Differentiable handles produced by [`sample_on_tape`].
#[derive(Clone, Copy, Debug)]
pub struct TapeSample {
    pub x0: Var,
    /// Latent entering the final executed step.
    pub final_input: Var,
}

/// The two DDIM formulas sharing one noise prediction:
/// `xhat0 = (x - s_t eps) / a_t`, `x_prev = a_p xhat0 + s_p eps`.
pub fn ddim_update<R: Real>(g: &mut Graph<'_, R>, x: Var, eps: Var, now: (f64, f64), prev: (f64, f64)) -> (Var, Var) {
    let se = g.scale(eps, R::lit(now.1));
    let d = g.sub(x, se);
    let xhat0 = g.div_scalar(d, R::lit(now.0));
    let a = g.scale(xhat0, R::lit(prev.0));
    let b = g.scale(eps, R::lit(prev.1));
    (g.add(a, b), xhat0)
}

fn coeffs(schedule: &NoiseSchedule, k: usize) -> Result<(usize, (f64, f64), (f64, f64))> {
    let (t, tp) = schedule.step_indices(k)?;
    Ok((
        t,
        (schedule.alpha(t), schedule.sigma(t)),
        (schedule.alpha(tp), schedule.sigma(tp)),
    ))
}

fn check_finite<R: Real>(g: &Graph<'_, R>, vars: &[Var], op: &'static str) -> Result<()> {
    g.check()?;
    for &v in vars {
        if !g.value(v).all_finite() {
            return Err(Error::NonFinite { op, node: v.index() });
        }
    }
    Ok(())
}

/// One guided DDIM step `k` on the tape; returns `(x_{k-1}, xhat0)`.
#[allow(clippy::too_many_arguments)]
pub fn ddim_step<R: Real>(
    g: &mut Graph<'_, R>,
    params: &DenoiserParams<R>,
    schedule: &NoiseSchedule,
    adapters: Option<&AdapterVars>,
    x: Var,
    c: Context,
    k: usize,
    guidance: f64,
) -> Result<(Var, Var)> {
    params.config.check_schedule(schedule)?;
    let (t, now, prev) = coeffs(schedule, k)?;
    let w = params.weights(g, None, adapters);
    let eps = params.cfg_eps(g, &w, x, c, t, guidance)?;
    check_finite(g, &[eps], "eps")?;
    let (xp, xhat0) = ddim_update(g, x, eps, now, prev);
    check_finite(g, &[xhat0, xp], "xhat0")?;
    Ok((xp, xhat0))
}

/// Forward-only [`ddim_step`]; the tape is dropped before returning.
pub fn ddim_step_value<R: Real>(
    params: &DenoiserParams<R>,
    schedule: &NoiseSchedule,
    x: &Tensor<R>,
    c: Context,
    k: usize,
    guidance: f64,
) -> Result<(Tensor<R>, Tensor<R>)> {
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let (xp, xh) = ddim_step(&mut g, params, schedule, None, xv, c, k, guidance)?;
    Ok((g.value(xp).clone(), g.value(xh).clone()))
}

fn validate(schedule: &NoiseSchedule, tr: Truncation) -> Result<()> {
    let s = schedule.steps();
    match tr {
        Truncation::None => Ok(()),
        Truncation::StopGradAt(k) | Truncation::Refl(k) if k >= 1 && k <= s => Ok(()),
        Truncation::StopGradAt(k) | Truncation::Refl(k) => {
            Err(Error::invalid(format!("truncation step {k} outside 1..={s}")))
        }
    }
}

/// Runs the sampler on `g` from the latent `x_t` and returns the
/// differentiable final image.
///
/// Steps above the truncation point only produce values that are cut by
/// `stop_grad`, so they run forward-only on throwaway tapes. `adapters`
/// are the adapter tensors as they appear on `g` (typically trainable
/// leaves); `None` evaluates the stored adapters as constants.
pub fn sample_on_tape<'a, R: Real>(
    g: &mut Graph<'a, R>,
    params: &'a DenoiserParams<R>,
    schedule: &'a NoiseSchedule,
    adapters: Option<&AdapterVars>,
    c: Context,
    x_t: Var,
    config: &SampleConfig,
) -> Result<(TapeSample, SampleTrace<R>)> {
    validate(schedule, config.truncation)?;
    let s = schedule.steps();
    let (grad_from, stop_at, refl) = match config.truncation {
        Truncation::None => (s, None, None),
        Truncation::StopGradAt(k) => (k, Some(k), None),
        Truncation::Refl(k) => (k, Some(k), Some(k)),
    };
    let mut latents = vec![g.value(x_t).clone()];
    let mut xhat0s = Vec::new();

    let mut x = x_t;
    if grad_from < s {
        let mut v = g.value(x_t).clone();
        for k in ((grad_from + 1)..=s).rev() {
            let (xp, xh) = ddim_step_value(params, schedule, &v, c, k, config.guidance)?;
            xhat0s.push(xh);
            latents.push(xp.clone());
            v = xp;
        }
        x = g.constant(v);
    }
    if stop_at.is_some() {
        x = g.stop_grad(x);
    }

    let adapter_flat: Vec<Var> = if params.adapters_active() {
        adapters.map(|a| a.flat()).unwrap_or_default()
    } else {
        Vec::new()
    };
    let template = adapters.cloned();
    let last = refl.unwrap_or(1);
    let mut final_input = x;
    for k in (last..=grad_from).rev() {
        final_input = x;
        let early = refl == Some(k);
        let (out, xh_value) = if config.checkpoint {
            let mut inputs = vec![x];
            inputs.extend_from_slice(&adapter_flat);
            let tpl = template.clone();
            let guidance = config.guidance;
            let body = Rc::new(move |ig: &mut Graph<'a, R>, leaves: &[Var]| -> Result<SegmentOutputs> {
                let av = tpl.as_ref().filter(|_| leaves.len() > 1).map(|t| t.rebind(&leaves[1..]));
                let (xp, xh) = ddim_step(ig, params, schedule, av.as_ref(), leaves[0], c, k, guidance)?;
                Ok(if early {
                    SegmentOutputs::new(vec![xh])
                } else {
                    SegmentOutputs {
                        outputs: vec![xp],
                        aux: vec![xh],
                    }
                })
            });
            let (outs, aux) = g.checkpoint(&inputs, body)?;
            let xh = match aux.into_iter().next() {
                Some(t) => t,
                None => g.value(outs[0]).clone(),
            };
            (outs[0], xh)
        } else {
            let ad = if adapter_flat.is_empty() { None } else { adapters };
            let (xp, xh) = ddim_step(g, params, schedule, ad, x, c, k, config.guidance)?;
            (if early { xh } else { xp }, g.value(xh).clone())
        };
        x = out;
        xhat0s.push(xh_value);
        if !early {
            latents.push(g.value(x).clone());
        }
    }
    let trace = SampleTrace {
        latents,
        xhat0: xhat0s,
        stop_grad_step: stop_at,
        guidance_w: config.guidance,
        truncated_at: refl,
        steps: s,
        x0: g.value(x).clone(),
    };
    Ok((TapeSample { x0: x, final_input }, trace))
}

/// Forward-only DDIM sampling with adapters applied on the steps where
/// `use_adapters(k)` holds.
pub fn sample_masked<R: Real>(
    params: &DenoiserParams<R>,
    schedule: &NoiseSchedule,
    c: Context,
    x_t: &Tensor<R>,
    guidance: f64,
    use_adapters: impl Fn(usize) -> bool,
) -> Result<SampleTrace<R>> {
    let base = params.without_adapters();
    let mut latents = vec![x_t.clone()];
    let mut xhat0 = Vec::new();
    let mut v = x_t.clone();
    for k in (1..=schedule.steps()).rev() {
        let p = if use_adapters(k) { params } else { &base };
        let (xp, xh) = ddim_step_value(p, schedule, &v, c, k, guidance)?;
        xhat0.push(xh);
        latents.push(xp.clone());
        v = xp;
    }
    Ok(SampleTrace {
        latents,
        xhat0,
        stop_grad_step: None,
        guidance_w: guidance,
        truncated_at: None,
        steps: schedule.steps(),
        x0: v,
    })
}

/// Forward-only DDIM sampling with the stored adapters.
pub fn sample<R: Real>(
    params: &DenoiserParams<R>,
    schedule: &NoiseSchedule,
    c: Context,
    x_t: &Tensor<R>,
    guidance: f64,
) -> Result<SampleTrace<R>> {
    sample_masked(params, schedule, c, x_t, guidance, |_| true)
}

/// Which sampler steps see the adapters.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LoraWindow {
    /// The last `M` steps (`k <= M`).
    Start(usize),
    /// The first `M` steps (`k > S - M`).
    End(usize),
}

impl LoraWindow {
    pub fn contains(self, k: usize, steps: usize) -> bool {
        match self {
            LoraWindow::Start(m) => k <= m,
            LoraWindow::End(m) => k + m > steps,
        }
    }
}

pub fn lora_window_sample<R: Real>(
    params: &DenoiserParams<R>,
    schedule: &NoiseSchedule,
    c: Context,
    x_t: &Tensor<R>,
    guidance: f64,
    window: LoraWindow,
) -> Result<SampleTrace<R>> {
    let s = schedule.steps();
    let (LoraWindow::Start(m) | LoraWindow::End(m)) = window;
    if m > s {
        return Err(Error::invalid(format!("window {m} exceeds {s} steps")));
    }
    sample_masked(params, schedule, c, x_t, guidance, |k| window.contains(k, s))
}

/// Noise injected by the ancestral sampler.
#[derive(Clone, Copy, Debug)]
pub enum AncestralNoise {
    /// Per-step draws keyed by `(seed, step)` under `index`.
    Keyed { rng: KeyedRng, index: u64 },
    Zero,
}

/// Stochastic sampler with the DDIM `eta` family of step variances; `eta = 1`
/// is the DDPM posterior and `eta = 0` with no noise is DDIM.
pub fn ancestral_sample<R: Real>(
    params: &DenoiserParams<R>,
    schedule: &NoiseSchedule,
    c: Context,
    x_t: &Tensor<R>,
    guidance: f64,
    eta: f64,
    noise: AncestralNoise,
) -> Result<SampleTrace<R>> {
    if !(eta >= 0.0) {
        return Err(Error::invalid("eta must be non-negative"));
    }
    let mut latents = vec![x_t.clone()];
    let mut xhat0s = Vec::new();
    let mut v = x_t.clone();
    for k in (1..=schedule.steps()).rev() {
        let (t, now, prev) = coeffs(schedule, k)?;
        let mut g = Graph::new();
        let x = g.constant(v.clone());
        let w = params.weights(&mut g, None, None);
        let eps = params.cfg_eps(&mut g, &w, x, c, t, guidance)?;
        check_finite(&g, &[eps], "eps")?;
        let (a, s) = now;
        let (ap, sp) = prev;
        let var = if s > 0.0 {
            (sp * sp / (s * s)) * (1.0 - (a * a) / (ap * ap))
        } else {
            0.0
        };
        let sd = eta * var.max(0.0).sqrt();
        let c_eps = if sd == 0.0 { sp } else { (sp * sp - sd * sd).max(0.0).sqrt() };
        let (xp, xh) = ddim_update(&mut g, x, eps, now, (ap, c_eps));
        check_finite(&g, &[xh, xp], "xhat0")?;
        let mut next = g.value(xp).clone();
        if let (AncestralNoise::Keyed { rng, index }, true) = (noise, sd > 0.0) {
            let z: Tensor<R> = rng.normal(next.shape(), Purpose::AncestralNoise, k as u64, index);
            next.axpy(R::lit(sd), &z);
        }
        xhat0s.push(g.value(xh).clone());
        latents.push(next.clone());
        v = next;
    }
    Ok(SampleTrace {
        latents,
        xhat0: xhat0s,
        stop_grad_step: None,
        guidance_w: guidance,
        truncated_at: None,
        steps: schedule.steps(),
        x0: v,
    })
}
