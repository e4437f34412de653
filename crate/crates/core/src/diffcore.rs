//! Forward evaluation, parameter gradients and the input gradient of the
//! gradient-matching objective.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::data::ChannelNorm;
use crate::error::{Error, Result};
use crate::grads::{LayerGradients, LayerMask};
use crate::models::{build_forward, build_loss, one_hot, BnMode, ModelState, Noise};
use crate::rng::RandomStream;
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DistanceKind {
    Euclidean,
    Cosine,
}

/// How the total-variation prior reduces the absolute differences.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum TvReduction {
    Sum,
    /// Mean horizontal plus mean vertical difference.
    #[default]
    Mean,
}

fn noise_for<T: Real>(model: &ModelState<T>, batch: usize, rng: Option<&mut RandomStream>) -> Result<Noise<T>> {
    match (model.has_privacy(), rng) {
        (false, _) => Ok(Noise::none()),
        (true, Some(rng)) => Noise::sample(&model.spec, batch, rng),
        (true, None) => {
            Err(Error::InvalidInput("model contains a variational module and needs a random stream".into()))
        }
    }
}

fn softmax_rows<T: Real>(logits: &Tensor<T>) -> Tensor<T> {
    crate::autodiff::kernels::log_softmax_rows(logits).map(|v| v.exp())
}

/// Softmax prediction and the post-activation output of every block.
///
/// `x` is `[C, H, W]` or a batch `[N, C, H, W]`; batch-norm layers use their
/// running statistics.
pub fn forward_eval<T: Real>(
    model: &ModelState<T>,
    x: &Tensor<T>,
    rng: Option<&mut RandomStream>,
) -> Result<(Tensor<T>, BTreeMap<usize, Tensor<T>>)> {
    let xb = model.batch_input(x)?;
    let noise = noise_for(model, xb.shape()[0], rng)?;
    forward_eval_with(model, &xb, &noise)
}

pub fn forward_eval_with<T: Real>(
    model: &ModelState<T>,
    xb: &Tensor<T>,
    noise: &Noise<T>,
) -> Result<(Tensor<T>, BTreeMap<usize, Tensor<T>>)> {
    let mut g = Graph::new();
    let params: Vec<Var> = model.params.iter().map(|p| g.leaf(p.clone())).collect();
    let xv = g.leaf(xb.clone());
    let pass = build_forward(&mut g, model, &params, xv, noise, BnMode::Eval)?;
    let logits = g.value(pass.logits);
    if !logits.all_finite() {
        return Err(Error::NumericalFailure("non-finite activation in forward pass".into()));
    }
    let probs = softmax_rows(logits);
    let latents = pass.latents.iter().map(|&(p, v)| (p, g.value(v).clone())).collect();
    Ok((probs, latents))
}

/// Loss and parameter gradients of one sample.
pub fn param_gradients<T: Real>(
    model: &ModelState<T>,
    x: &Tensor<T>,
    y: usize,
    rng: Option<&mut RandomStream>,
) -> Result<(f64, LayerGradients<T>)> {
    let xb = model.batch_input(x)?;
    let noise = noise_for(model, xb.shape()[0], rng)?;
    let labels = vec![y; xb.shape()[0]];
    let out = batch_gradients(model, &xb, &labels, &noise)?;
    Ok((out.loss, out.grads))
}

pub struct BatchGradients<T> {
    pub loss: f64,
    pub grads: LayerGradients<T>,
    /// Batch-norm statistics used in the forward pass, if any.
    pub batch_stats: Vec<(Tensor<T>, Tensor<T>)>,
}

/// Mean loss and gradients over a batch `[N, C, H, W]` with frozen noise.
pub fn batch_gradients<T: Real>(
    model: &ModelState<T>,
    xb: &Tensor<T>,
    labels: &[usize],
    noise: &Noise<T>,
) -> Result<BatchGradients<T>> {
    if labels.len() != xb.shape()[0] {
        return Err(Error::InvalidInput(format!("{} labels for a batch of {}", labels.len(), xb.shape()[0])));
    }
    let targets = one_hot(labels, model.spec.num_classes)?;
    let mut g = Graph::new();
    let params: Vec<Var> = model.params.iter().map(|p| g.leaf(p.clone())).collect();
    let xv = g.leaf(xb.clone());
    let pass = build_forward(&mut g, model, &params, xv, noise, BnMode::Train)?;
    let loss = build_loss(&mut g, &pass, &targets);
    let lv = g.value(loss).item().as_f64();
    if !lv.is_finite() {
        return Err(Error::NumericalFailure("loss is not finite".into()));
    }
    let gv = g.grad(loss, &params);
    let grads = model.wrap(gv.iter().map(|&v| g.value(v).clone()).collect());
    if !grads.all_finite() {
        return Err(Error::NumericalFailure("non-finite parameter gradient".into()));
    }
    Ok(BatchGradients { loss: lv, grads, batch_stats: pass.batch_stats })
}

/// Everything the gradient-matching objective depends on besides the dummy.
#[derive(Debug, Clone)]
pub struct Objective<'a, T> {
    pub target: &'a LayerGradients<T>,
    pub mask: &'a LayerMask,
    pub distance: DistanceKind,
    pub tv_weight: f64,
    pub tv_reduction: TvReduction,
    /// Weight of the squared distance between the dummy prediction and the
    /// one-hot label; zero disables the term.
    pub label_weight: f64,
    /// When set, the optimized variable is the standardized image `z` with
    /// pixels `mean + std * z`; the prior and the gradient refer to `z`.
    pub input_norm: Option<&'a ChannelNorm>,
}

pub struct InputGradient<T> {
    /// Value of the full objective.
    pub loss: f64,
    /// Gradient-distance part of `loss`.
    pub distance: f64,
    pub grad: Tensor<T>,
    /// Parameter gradients produced by the dummy.
    pub dummy_grads: LayerGradients<T>,
}

/// Derivative of the reconstruction objective with respect to `x_dummy`,
/// differentiating through the parameter gradients. `noise` is the frozen
/// draw of this evaluation.
pub fn attack_input_gradient<T: Real>(
    model: &ModelState<T>,
    x_dummy: &Tensor<T>,
    y: usize,
    objective: &Objective<'_, T>,
    noise: &Noise<T>,
) -> Result<InputGradient<T>> {
    let layout = model.layout();
    let dummy_layout = model.wrap(layout.iter().map(|s| Tensor::zeros(&s.shape)).collect());
    dummy_layout.check_layout(objective.target)?;
    let layers = dummy_layout.layers().len();
    objective.mask.validate(layers)?;
    let layer_of = dummy_layout.layer_indices();

    let xb = model.batch_input(x_dummy)?;
    let targets = one_hot(&[y], model.spec.num_classes)?;
    let mut g = Graph::new();
    let params: Vec<Var> = model.params.iter().map(|p| g.leaf(p.clone())).collect();
    let zv = g.leaf(xb);
    let xv = match objective.input_norm {
        None => zv,
        Some(norm) => {
            let (sc, sh) = norm.expand::<T>(g.shape(zv))?;
            let sc = g.leaf(sc);
            let sh = g.leaf(sh);
            let x = g.mul(zv, sc);
            g.add(x, sh)
        }
    };
    let pass = build_forward(&mut g, model, &params, xv, noise, BnMode::Train)?;
    let loss = build_loss(&mut g, &pass, &targets);
    let dg = g.grad(loss, &params);

    let selected: Vec<usize> = (0..dg.len()).filter(|&i| objective.mask.includes(layer_of[i])).collect();
    let dist = match objective.distance {
        DistanceKind::Euclidean => {
            let mut acc: Option<Var> = None;
            for &i in &selected {
                let t = g.leaf(objective.target.entries[i].value.clone());
                let d = g.sub(dg[i], t);
                let d2 = g.square(d);
                let s = g.sum_all(d2);
                acc = Some(match acc {
                    None => s,
                    Some(a) => g.add(a, s),
                });
            }
            acc.unwrap()
        }
        DistanceKind::Cosine => {
            let target_norm = selected
                .iter()
                .flat_map(|&i| objective.target.entries[i].value.data())
                .map(|v| v.as_f64() * v.as_f64())
                .sum::<f64>()
                .sqrt();
            let dummy_norm_sq: f64 =
                selected.iter().flat_map(|&i| g.value(dg[i]).data()).map(|v| v.as_f64() * v.as_f64()).sum();
            if target_norm == 0.0 || dummy_norm_sq == 0.0 {
                return Err(Error::DegenerateGradient("zero-norm gradient under cosine distance".into()));
            }
            let mut dot: Option<Var> = None;
            let mut nsq: Option<Var> = None;
            for &i in &selected {
                let t = g.leaf(objective.target.entries[i].value.clone());
                let p = g.mul(dg[i], t);
                let p = g.sum_all(p);
                let q = g.square(dg[i]);
                let q = g.sum_all(q);
                dot = Some(match dot {
                    None => p,
                    Some(a) => g.add(a, p),
                });
                nsq = Some(match nsq {
                    None => q,
                    Some(a) => g.add(a, q),
                });
            }
            let inv = g.powf(nsq.unwrap(), -0.5);
            let cos = g.mul(dot.unwrap(), inv);
            let cos = g.scale(cos, -1.0 / target_norm);
            g.offset(cos, 1.0)
        }
    };
    let distance = g.value(dist).item().as_f64();
    let mut total = dist;
    if objective.tv_weight > 0.0 {
        let s = g.shape(zv).to_vec();
        let planes = (s[0] * s[1]) as f64;
        let (h, w) = (s[2] as f64, s[3] as f64);
        let (wx, wy) = match objective.tv_reduction {
            TvReduction::Sum => (1.0, 1.0),
            TvReduction::Mean => (1.0 / (planes * h * (w - 1.0)).max(1.0), 1.0 / (planes * (h - 1.0) * w).max(1.0)),
        };
        let tv = g.total_variation_weighted(zv, wx * objective.tv_weight, wy * objective.tv_weight);
        total = g.add(total, tv);
    }
    if objective.label_weight > 0.0 {
        let ls = g.log_softmax(pass.logits);
        let p = g.exp(ls);
        let t = g.leaf(targets);
        let d = g.sub(p, t);
        let d2 = g.square(d);
        let s = g.sum_all(d2);
        let s = g.scale(s, objective.label_weight);
        total = g.add(total, s);
    }
    let loss_value = g.value(total).item().as_f64();
    if !loss_value.is_finite() {
        return Err(Error::NumericalFailure("reconstruction loss is not finite".into()));
    }
    let gx = g.grad(total, &[zv])[0];
    let grad = g.value(gx).clone().reshaped(x_dummy.shape());
    if !grad.all_finite() {
        return Err(Error::NumericalFailure("non-finite input gradient".into()));
    }
    let dummy_grads = model.wrap(dg.iter().map(|&v| g.value(v).clone()).collect());
    Ok(InputGradient { loss: loss_value, distance, grad, dummy_grads })
}
