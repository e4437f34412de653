//! Defenses: gradient perturbation (clipping plus Gaussian noise, magnitude
//! pruning) and the variational modules as model modifications.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grads::LayerGradients;
use crate::models::ModelSpec;
use crate::privacy::PrivacyModuleSpec;
use crate::rng::RandomStream;
use crate::tensor::Real;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DefenseSpec {
    #[default]
    None,
    /// Per-sample clipping to global norm `clip`, then Gaussian noise of
    /// standard deviation `clip * noise_multiplier` on the sum.
    NoisyGradients {
        clip: f64,
        noise_multiplier: f64,
    },
    /// Zero the `ratio` fraction of smallest-magnitude entries per array.
    Compression {
        ratio: f64,
    },
    Precode {
        module: PrivacyModuleSpec,
    },
    Cvb {
        module: PrivacyModuleSpec,
    },
}

impl DefenseSpec {
    pub fn validate(&self) -> Result<()> {
        match *self {
            DefenseSpec::NoisyGradients { clip, noise_multiplier } => {
                if !(clip > 0.0) || !(noise_multiplier >= 0.0) {
                    return Err(Error::InvalidSpec(format!(
                        "need clip > 0 and noise multiplier >= 0, got ({clip}, {noise_multiplier})"
                    )));
                }
            }
            DefenseSpec::Compression { ratio } => {
                if !(0.0..1.0).contains(&ratio) {
                    return Err(Error::InvalidSpec(format!("pruning ratio {ratio} outside [0, 1)")));
                }
            }
            DefenseSpec::Precode { module } if module.is_cvb() => {
                return Err(Error::InvalidSpec("PRECODE defense given a CVB module".into()))
            }
            DefenseSpec::Cvb { module } if !module.is_cvb() => {
                return Err(Error::InvalidSpec("CVB defense given a PRECODE module".into()))
            }
            _ => {}
        }
        Ok(())
    }

    /// Short identifier used in reports.
    pub fn name(&self) -> &'static str {
        match self {
            DefenseSpec::None => "none",
            DefenseSpec::NoisyGradients { .. } => "dp",
            DefenseSpec::Compression { .. } => "gc",
            DefenseSpec::Precode { .. } => "precode",
            DefenseSpec::Cvb { .. } => "cvb",
        }
    }

    /// Parameter summary used in reports, e.g. `C=20;sigma=0.1`.
    pub fn params_label(&self) -> String {
        use crate::privacy::PrivacyKind;
        match self {
            DefenseSpec::None => String::new(),
            DefenseSpec::NoisyGradients { clip, noise_multiplier } => {
                format!("C={clip};sigma={noise_multiplier}")
            }
            DefenseSpec::Compression { ratio } => format!("p={ratio}"),
            DefenseSpec::Precode { module } | DefenseSpec::Cvb { module } => match module.kind {
                PrivacyKind::Precode { bottleneck } => {
                    format!("P={};K={bottleneck};beta={}", module.position, module.beta)
                }
                PrivacyKind::Cvb { kernel, scale } => {
                    format!("P={};kE={kernel};sE={scale};beta={}", module.position, module.beta)
                }
            },
        }
    }

    /// The model as trained and attacked under this defense.
    pub fn apply_to_model(&self, spec: &ModelSpec) -> ModelSpec {
        match self {
            DefenseSpec::Precode { module } | DefenseSpec::Cvb { module } => spec.clone().with_privacy(*module),
            _ => spec.clone(),
        }
    }

    /// Perturbs an exchanged gradient-like message (a single sample).
    pub fn perturb<T: Real>(&self, g: &LayerGradients<T>, rng: &mut RandomStream) -> Result<LayerGradients<T>> {
        match *self {
            DefenseSpec::NoisyGradients { clip, noise_multiplier } => {
                noisy_gradients(std::slice::from_ref(g), clip, noise_multiplier, rng)
            }
            DefenseSpec::Compression { ratio } => compress_gradients(g, ratio),
            _ => Ok(g.clone()),
        }
    }
}

/// Clips each sample to global L2 norm `clip`, sums, adds
/// `N(0, (clip * sigma)^2)` per entry and divides by the batch size.
pub fn noisy_gradients<T: Real>(
    per_sample: &[LayerGradients<T>],
    clip: f64,
    sigma: f64,
    rng: &mut RandomStream,
) -> Result<LayerGradients<T>> {
    let first = per_sample.first().ok_or_else(|| Error::InvalidInput("empty batch".into()))?;
    if !(clip > 0.0) || !(sigma >= 0.0) {
        return Err(Error::InvalidInput(format!("invalid clip {clip} or sigma {sigma}")));
    }
    let mut sum = first.zeros_like();
    for g in per_sample {
        let norm = g.norm_sq().sqrt();
        let factor = if norm > clip { clip / norm } else { 1.0 };
        sum.add_assign(&g.scaled(factor))?;
    }
    let b = per_sample.len() as f64;
    let std = clip * sigma;
    for e in &mut sum.entries {
        for v in e.value.data_mut() {
            let noisy = v.as_f64() + if std > 0.0 { std * rng.normal() } else { 0.0 };
            *v = T::of(noisy / b);
        }
    }
    Ok(sum)
}

/// Sets the `floor(p * n)` smallest-magnitude entries of every parameter
/// array to zero. Ties go to the earlier index.
pub fn compress_gradients<T: Real>(g: &LayerGradients<T>, p: f64) -> Result<LayerGradients<T>> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::InvalidInput(format!("pruning ratio {p} outside [0, 1)")));
    }
    let mut out = g.clone();
    for e in &mut out.entries {
        let n = e.value.len();
        let k = (p * n as f64).floor() as usize;
        if k == 0 {
            continue;
        }
        let data = e.value.data_mut();
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| {
            let (x, y) = (data[a].as_f64().abs(), data[b].as_f64().abs());
            x.total_cmp(&y).then(a.cmp(&b))
        });
        for &i in &order[..k] {
            data[i] = T::zero();
        }
    }
    Ok(out)
}
