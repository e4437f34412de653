//! Variational bottlenecks: the fully connected PRECODE module and the
//! shape-preserving convolutional variational bottleneck (CVB).
//!
//! Both encode a feature map `z` into a Gaussian `N(mu, sigma)` with
//! `sigma = exp(logvar / 2)`, draw `b = mu + sigma * eps` and decode `b` back
//! to the shape of `z`. Neither carries bias parameters. The log-variance
//! encoder output is shifted by [`LOGVAR_SHIFT`], so an untrained module
//! starts with `sigma` near `exp(-3)`.

use serde::{Deserialize, Serialize};

use crate::autodiff::{ConvGeom, Graph, Var};
use crate::error::{Error, Result};
use crate::rng::RandomStream;
use crate::tensor::{Real, Tensor};

pub const LOGVAR_SHIFT: f64 = 6.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum PrivacyKind {
    /// Fully connected encoder with `2 * bottleneck` outputs.
    Precode { bottleneck: usize },
    /// Convolutional encoder with `kernel x kernel` kernels and
    /// `round(scale * channels)` bottleneck channels.
    Cvb { kernel: usize, scale: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrivacyModuleSpec {
    #[serde(flatten)]
    pub kind: PrivacyKind,
    /// Insertion point: the module follows block `position`.
    pub position: usize,
    /// Weight of the KL term in the training loss.
    #[serde(default = "default_beta")]
    pub beta: f64,
}

fn default_beta() -> f64 {
    0.1
}

impl PrivacyModuleSpec {
    pub fn precode(position: usize, bottleneck: usize, beta: f64) -> Self {
        PrivacyModuleSpec { kind: PrivacyKind::Precode { bottleneck }, position, beta }
    }

    pub fn cvb(position: usize, kernel: usize, scale: f64, beta: f64) -> Self {
        PrivacyModuleSpec { kind: PrivacyKind::Cvb { kernel, scale }, position, beta }
    }

    pub fn is_cvb(&self) -> bool {
        matches!(self.kind, PrivacyKind::Cvb { .. })
    }

    pub fn label(&self) -> &'static str {
        match self.kind {
            PrivacyKind::Precode { .. } => "vb",
            PrivacyKind::Cvb { .. } => "cvb",
        }
    }

    /// Bottleneck channels of a CVB placed on a `channels`-channel map.
    pub fn cvb_channels(scale: f64, channels: usize) -> usize {
        ((scale * channels as f64).round() as usize).max(1)
    }

    pub(crate) fn validate(&self, feature: &[usize]) -> Result<()> {
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(Error::InvalidSpec(format!("beta must be >= 0, got {}", self.beta)));
        }
        match self.kind {
            PrivacyKind::Precode { bottleneck } => {
                if bottleneck == 0 {
                    return Err(Error::InvalidSpec("PRECODE bottleneck must be >= 1".into()));
                }
            }
            PrivacyKind::Cvb { kernel, scale } => {
                if feature.len() != 3 {
                    return Err(Error::InvalidSpec("CVB needs a spatial feature map insertion point".into()));
                }
                if kernel == 0 || kernel % 2 == 0 {
                    return Err(Error::InvalidSpec(format!("CVB kernel must be odd, got {kernel}")));
                }
                if kernel > feature[1].min(feature[2]) {
                    return Err(Error::InvalidSpec(format!(
                        "CVB kernel {kernel} exceeds feature map {}x{}",
                        feature[1], feature[2]
                    )));
                }
                if !(scale > 0.0 && scale.is_finite()) {
                    return Err(Error::InvalidSpec(format!("CVB scale must be > 0, got {scale}")));
                }
            }
        }
        Ok(())
    }

    /// Parameter shapes `(suffix, shape)` for a module on a feature of shape
    /// `feature` (`[C, H, W]` or `[F]`).
    pub(crate) fn param_shapes(&self, feature: &[usize]) -> Vec<(&'static str, Vec<usize>)> {
        match self.kind {
            PrivacyKind::Precode { bottleneck } => {
                let f: usize = feature.iter().product();
                vec![("enc", vec![2 * bottleneck, f]), ("dec", vec![f, bottleneck])]
            }
            PrivacyKind::Cvb { kernel, scale } => {
                let c = feature[0];
                let ke = Self::cvb_channels(scale, c);
                vec![
                    ("enc_mu", vec![ke, c, kernel, kernel]),
                    ("enc_logvar", vec![ke, c, kernel, kernel]),
                    ("dec", vec![c, ke, 1, 1]),
                ]
            }
        }
    }

    /// Shape of the latent sample `b` (without batch dimension).
    pub(crate) fn latent_shape(&self, feature: &[usize]) -> Vec<usize> {
        match self.kind {
            PrivacyKind::Precode { bottleneck } => vec![bottleneck],
            PrivacyKind::Cvb { scale, .. } => {
                vec![Self::cvb_channels(scale, feature[0]), feature[1], feature[2]]
            }
        }
    }
}

/// Mean and log-variance of a latent Gaussian.
#[derive(Debug, Clone)]
pub struct LatentStats<T> {
    pub mu: Tensor<T>,
    pub logvar: Tensor<T>,
}

impl<T: Real> LatentStats<T> {
    pub fn new(mu: Tensor<T>, logvar: Tensor<T>) -> Result<Self> {
        if mu.shape() != logvar.shape() {
            return Err(Error::InvalidInput(format!(
                "mu {:?} and logvar {:?} differ in shape",
                mu.shape(),
                logvar.shape()
            )));
        }
        Ok(LatentStats { mu, logvar })
    }

    pub fn sigma(&self) -> Tensor<T> {
        let half = T::of(0.5);
        self.logvar.map(|v| (v * half).exp())
    }
}

/// Graph handles of a module's latent statistics.
#[derive(Debug, Clone, Copy)]
pub struct StatsVars {
    pub mu: Var,
    pub logvar: Var,
}

/// `b = mu + exp(logvar / 2) * eps`.
pub fn reparameterize<T: Real>(g: &mut Graph<T>, stats: StatsVars, eps: &Tensor<T>) -> Var {
    let half = g.scale(stats.logvar, 0.5);
    let sigma = g.exp(half);
    let e = g.leaf(eps.clone());
    let noise = g.mul(sigma, e);
    g.add(stats.mu, noise)
}

/// Fully connected bottleneck on `z` of shape `[N, ...]`; output has the
/// shape of `z`.
pub fn precode_block<T: Real>(g: &mut Graph<T>, z: Var, enc: Var, dec: Var, eps: &Tensor<T>) -> (Var, StatsVars) {
    let shape = g.shape(z).to_vec();
    let n = shape[0];
    let f: usize = shape[1..].iter().product();
    let k = g.shape(enc)[0] / 2;
    let flat = g.reshape(z, &[n, f]);
    let e = g.matmul(flat, enc, false, true);
    let stats = StatsVars {
        mu: g.slice_cols(e, 0, k),
        logvar: {
            let raw = g.slice_cols(e, k, k);
            g.offset(raw, -LOGVAR_SHIFT)
        },
    };
    let b = reparameterize(g, stats, eps);
    let zhat = g.matmul(b, dec, false, true);
    (g.reshape(zhat, &shape), stats)
}

/// Convolutional bottleneck on `z` of shape `[N, C, H, W]`: stride-1,
/// zero-padded encoders and a 1x1 decoder back to `C` channels.
pub fn cvb_block<T: Real>(
    g: &mut Graph<T>,
    z: Var,
    enc_mu: Var,
    enc_logvar: Var,
    dec: Var,
    eps: &Tensor<T>,
) -> (Var, StatsVars) {
    let k = g.shape(enc_mu)[2];
    let same = ConvGeom { stride: 1, pad: (k - 1) / 2 };
    let stats = StatsVars {
        mu: g.conv2d(z, enc_mu, same),
        logvar: {
            let raw = g.conv2d(z, enc_logvar, same);
            g.offset(raw, -LOGVAR_SHIFT)
        },
    };
    let b = reparameterize(g, stats, eps);
    let zhat = g.conv2d(b, dec, ConvGeom { stride: 1, pad: 0 });
    (zhat, stats)
}

/// Normalization of the summed KL divergence.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KlReduction {
    /// Divide by the batch size.
    PerSample,
    /// Divide by the number of latent entries in the batch.
    PerEntry,
}

/// Reduction of the KL term inside the training loss. Summing over a large
/// latent map lets the deterministic KL gradient dominate the task gradient
/// of the encoder and everything below it.
pub const TRAINING_KL: KlReduction = KlReduction::PerEntry;

/// `0.5 * sum(mu^2 + exp(logvar) - logvar - 1)` on the graph, reduced as
/// requested.
pub fn kl_graph<T: Real>(g: &mut Graph<T>, stats: StatsVars, reduction: KlReduction) -> Var {
    let m = match reduction {
        KlReduction::PerSample => g.shape(stats.mu)[0],
        KlReduction::PerEntry => crate::tensor::numel(g.shape(stats.mu)),
    } as f64;
    let mu2 = g.square(stats.mu);
    let var = g.exp(stats.logvar);
    let a = g.add(mu2, var);
    let b = g.sub(a, stats.logvar);
    let c = g.offset(b, -1.0);
    let s = g.sum_all(c);
    g.scale(s, 0.5 / m)
}

/// KL divergence of `N(mu, sigma)` from `N(0, 1)`, summed over latent
/// entries and averaged over the leading batch dimension.
pub fn kl_loss<T: Real>(stats: &LatentStats<T>) -> Result<f64> {
    kl_value(stats, KlReduction::PerSample)
}

pub fn kl_value<T: Real>(stats: &LatentStats<T>, reduction: KlReduction) -> Result<f64> {
    let n = match reduction {
        KlReduction::PerSample => stats.mu.shape().first().copied().unwrap_or(1),
        KlReduction::PerEntry => stats.mu.len(),
    }
    .max(1) as f64;
    let mut total = 0.0;
    for (&m, &lv) in stats.mu.data().iter().zip(stats.logvar.data()) {
        let (m, lv) = (m.as_f64(), lv.as_f64());
        total += m * m + lv.exp() - lv - 1.0;
    }
    let kl = 0.5 * total / n;
    if !kl.is_finite() {
        return Err(Error::NumericalFailure("KL divergence is not finite".into()));
    }
    Ok(kl.max(0.0))
}

/// Task loss extended by the weighted KL term.
pub fn extended_loss(task_loss: f64, kl: f64, beta: f64) -> f64 {
    task_loss + beta * kl
}

/// Parameters of a standalone PRECODE module.
#[derive(Debug, Clone)]
pub struct VbParams<T> {
    /// `[2K, F]`, rows `0..K` produce `mu`, rows `K..2K` the log-variance.
    pub enc: Tensor<T>,
    /// `[F, K]`.
    pub dec: Tensor<T>,
}

/// Parameters of a standalone CVB module.
#[derive(Debug, Clone)]
pub struct CvbParams<T> {
    pub enc_mu: Tensor<T>,
    pub enc_logvar: Tensor<T>,
    pub dec: Tensor<T>,
}

/// Source of the reparameterization noise.
pub enum Eps<'a, T> {
    Draw(&'a mut RandomStream),
    Fixed(&'a Tensor<T>),
}

impl<T: Real> Eps<'_, T> {
    fn realize(self, shape: &[usize]) -> Result<Tensor<T>> {
        match self {
            Eps::Draw(rng) => Ok(rng.normal_tensor(shape)),
            Eps::Fixed(t) => {
                if t.shape() != shape {
                    return Err(Error::InvalidInput(format!("noise shape {:?}, expected {:?}", t.shape(), shape)));
                }
                Ok(t.clone())
            }
        }
    }
}

/// PRECODE forward on a single flat vector `z`.
pub fn vb_forward<T: Real>(
    z: &Tensor<T>,
    params: &VbParams<T>,
    eps: Eps<'_, T>,
) -> Result<(Tensor<T>, LatentStats<T>)> {
    let f = params.enc.shape()[1];
    if z.len() != f || params.dec.shape() != [f, params.enc.shape()[0] / 2] {
        return Err(Error::InvalidInput(format!("vector of length {} does not fit an encoder of width {f}", z.len())));
    }
    let k = params.enc.shape()[0] / 2;
    let noise = eps.realize(&[1, k])?;
    let mut g = Graph::new();
    let zv = g.leaf(z.clone().reshaped(&[1, f]));
    let enc = g.leaf(params.enc.clone());
    let dec = g.leaf(params.dec.clone());
    let (zhat, stats) = precode_block(&mut g, zv, enc, dec, &noise);
    let out = g.value(zhat).clone().reshaped(&[f]);
    let stats = LatentStats::new(g.value(stats.mu).clone(), g.value(stats.logvar).clone())?;
    Ok((out, stats))
}

/// CVB forward on a single `[C, H, W]` feature map.
pub fn cvb_forward<T: Real>(
    z: &Tensor<T>,
    params: &CvbParams<T>,
    eps: Eps<'_, T>,
) -> Result<(Tensor<T>, LatentStats<T>)> {
    let zs = z.shape();
    let ws = params.enc_mu.shape();
    if zs.len() != 3 || ws.len() != 4 || ws[1] != zs[0] || params.enc_logvar.shape() != ws {
        return Err(Error::InvalidSpec(format!("feature map {:?} incompatible with encoder {:?}", zs, ws)));
    }
    let (k, ke) = (ws[2], ws[0]);
    if k % 2 == 0 || k > zs[1].min(zs[2]) {
        return Err(Error::InvalidSpec(format!("kernel {k} invalid for a {}x{} map", zs[1], zs[2])));
    }
    if params.dec.shape() != [zs[0], ke, 1, 1] {
        return Err(Error::InvalidSpec(format!(
            "decoder {:?} must map {ke} channels back to {}",
            params.dec.shape(),
            zs[0]
        )));
    }
    let noise = eps.realize(&[1, ke, zs[1], zs[2]])?;
    let mut g = Graph::new();
    let zv = g.leaf(z.clone().reshaped(&[1, zs[0], zs[1], zs[2]]));
    let em = g.leaf(params.enc_mu.clone());
    let el = g.leaf(params.enc_logvar.clone());
    let d = g.leaf(params.dec.clone());
    let (zhat, stats) = cvb_block(&mut g, zv, em, el, d, &noise);
    let out = g.value(zhat).clone().reshaped(zs);
    let stats = LatentStats::new(g.value(stats.mu).clone(), g.value(stats.logvar).clone())?;
    Ok((out, stats))
}
