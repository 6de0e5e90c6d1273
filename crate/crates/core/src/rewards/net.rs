//! Small convolutional networks used as the toy classifier and scorer.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::params::{BoundParams, ParamStore};
use crate::real::Real;
use crate::rng::{KeyedRng, Purpose};
use crate::tensor::{Graph, Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct ConvNetConfig {
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    /// Output channels of each 3x3 conv layer.
    pub channels: Vec<usize>,
    pub outputs: usize,
}

impl ConvNetConfig {
    /// Default backbone on 24x24 RGB images.
    pub fn image(outputs: usize) -> Self {
        ConvNetConfig {
            in_channels: 3,
            height: 24,
            width: 24,
            channels: vec![16, 16, 16],
            outputs,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels.is_empty() || self.channels.contains(&0) || self.outputs == 0 {
            return Err(Error::invalid("conv net needs non-empty layers and outputs"));
        }
        Ok(())
    }
}

/// Stacked 3x3 conv + SiLU layers, global mean pooling and a linear head.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvNet<R> {
    pub config: ConvNetConfig,
    pub params: ParamStore<R>,
}

impl<R: Real> ConvNet<R> {
    pub fn init(config: ConvNetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let rng = KeyedRng::new(seed);
        let mut params = ParamStore::new();
        let mut cin = config.in_channels;
        for (i, &c) in config.channels.iter().enumerate() {
            let mut w = rng.normal::<R>(&[c, cin * 9], Purpose::ParamInit, 2, i as u64);
            w.scale_in_place(R::lit((2.0 / (cin * 9) as f64).sqrt()));
            params.insert(format!("conv{i}.weight"), w);
            params.insert(format!("conv{i}.bias"), Tensor::zeros(&[c]));
            cin = c;
        }
        let mut w = rng.normal::<R>(&[config.outputs, cin], Purpose::ParamInit, 3, 0);
        w.scale_in_place(R::lit(1.0 / (cin as f64).sqrt()));
        params.insert("head.weight", w);
        params.insert("head.bias", Tensor::zeros(&[config.outputs]));
        Ok(ConvNet { config, params })
    }

    pub fn from_params(config: ConvNetConfig, params: ParamStore<R>) -> Result<Self> {
        config.validate()?;
        let mut cin = config.in_channels;
        for (i, &c) in config.channels.iter().enumerate() {
            let w = params.require(&format!("conv{i}.weight"))?;
            let b = params.require(&format!("conv{i}.bias"))?;
            if w.shape() != [c, cin * 9] || b.shape() != [c] {
                return Err(Error::invalid(format!("bad shapes for conv{i}")));
            }
            cin = c;
        }
        let w = params.require("head.weight")?;
        let b = params.require("head.bias")?;
        if w.shape() != [config.outputs, cin] || b.shape() != [config.outputs] {
            return Err(Error::invalid("bad head shapes"));
        }
        if params.len() != 2 * config.channels.len() + 2 {
            return Err(Error::invalid("unexpected tensors in conv net parameters"));
        }
        Ok(ConvNet { config, params })
    }

    /// Output vector `[outputs]` for one `[c, h, w]` image.
    pub fn forward(&self, g: &mut Graph<'_, R>, p: &BoundParams, x: Var) -> Result<Var> {
        let cfg = &self.config;
        let want = [cfg.in_channels, cfg.height, cfg.width];
        if g.shape(x) != want {
            return Err(Error::Shape {
                op: "conv_net",
                detail: format!("input {:?}, expected {want:?}", g.shape(x)),
            });
        }
        let hw = cfg.height * cfg.width;
        let mut h = x;
        for i in 0..cfg.channels.len() {
            let y = g.conv3x3(h, p.get(&format!("conv{i}.weight")));
            let y = g.add_channel(y, p.get(&format!("conv{i}.bias")));
            h = g.silu(y);
        }
        let c = *cfg.channels.last().expect("validated");
        let flat = g.reshape(h, &[c, hw]);
        let pool = g.constant(Tensor::full(&[hw, 1], R::lit(1.0 / hw as f64)));
        let pooled = g.matmul(flat, pool);
        let out = g.matmul(p.get("head.weight"), pooled);
        let out = g.reshape(out, &[cfg.outputs]);
        Ok(g.add(out, p.get("head.bias")))
    }

    /// Forward pass with the weights frozen as constants.
    pub fn forward_frozen(&self, g: &mut Graph<'_, R>, x: Var) -> Result<Var> {
        let p = self.params.bind(g, false);
        self.forward(g, &p, x)
    }

    pub fn predict(&self, x: &Tensor<R>) -> Result<Tensor<R>> {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let y = self.forward_frozen(&mut g, xv)?;
        g.check()?;
        Ok(g.value(y).clone())
    }

    pub fn cast<S: Real>(&self) -> ConvNet<S> {
        ConvNet {
            config: self.config.clone(),
            params: self.params.cast(),
        }
    }
}

/// Mean cross-entropy of `logits` against `label`, and the parameter
/// gradients, for a batch of images.
pub fn classifier_loss_grad<R: Real>(
    net: &ConvNet<R>,
    batch: &[(&Tensor<R>, usize)],
) -> Result<(f64, BTreeMap<String, Tensor<R>>)> {
    let mut g = Graph::new();
    let p = net.params.bind(&mut g, true);
    let mut total = None;
    for &(x, label) in batch {
        if label >= net.config.outputs {
            return Err(Error::invalid(format!("label {label} outside 0..{}", net.config.outputs)));
        }
        let xv = g.constant(x.clone());
        let logits = net.forward(&mut g, &p, xv)?;
        let nll = neg_log_prob(&mut g, logits, label);
        total = Some(match total {
            None => nll,
            Some(t) => g.add(t, nll),
        });
    }
    let total = total.ok_or_else(|| Error::invalid("empty batch"))?;
    let loss = g.scale(total, R::lit(1.0 / batch.len() as f64));
    let value = g.value(loss).item().as_f64();
    let grads = g.backward(loss)?;
    Ok((value, p.collect_grads(&grads)))
}

/// Mean squared error against scalar targets.
pub fn regression_loss_grad<R: Real>(
    net: &ConvNet<R>,
    batch: &[(&Tensor<R>, f64)],
) -> Result<(f64, BTreeMap<String, Tensor<R>>)> {
    let mut g = Graph::new();
    let p = net.params.bind(&mut g, true);
    let mut total = None;
    for &(x, target) in batch {
        let xv = g.constant(x.clone());
        let y = net.forward(&mut g, &p, xv)?;
        let d = g.add_scalar(y, R::lit(-target));
        let sq = g.mul(d, d);
        let s = g.sum(sq);
        total = Some(match total {
            None => s,
            Some(t) => g.add(t, s),
        });
    }
    let total = total.ok_or_else(|| Error::invalid("empty batch"))?;
    let loss = g.scale(total, R::lit(1.0 / batch.len() as f64));
    let value = g.value(loss).item().as_f64();
    let grads = g.backward(loss)?;
    Ok((value, p.collect_grads(&grads)))
}

/// `-log softmax(logits)[label]` as a scalar.
pub fn neg_log_prob<R: Real>(g: &mut Graph<'_, R>, logits: Var, label: usize) -> Var {
    let lp = g.log_softmax(logits);
    let pick = g.gather(lp, vec![label].into(), &[1]);
    let s = g.sum(pick);
    g.neg(s)
}
