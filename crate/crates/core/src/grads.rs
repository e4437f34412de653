//! Per-layer gradient collections and layer masks.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParamKind {
    Weight,
    Bias,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradEntry<T> {
    pub layer: String,
    pub kind: ParamKind,
    pub value: Tensor<T>,
}

/// Gradients in parameter-layout order: one entry per (layer, kind).
#[derive(Debug, Clone, PartialEq)]
pub struct LayerGradients<T> {
    pub entries: Vec<GradEntry<T>>,
}

impl<T: Real> LayerGradients<T> {
    pub fn new(entries: Vec<GradEntry<T>>) -> Self {
        LayerGradients { entries }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Distinct layer names in order of first appearance.
    pub fn layers(&self) -> Vec<&str> {
        let mut out: Vec<&str> = Vec::new();
        for e in &self.entries {
            if out.last() != Some(&e.layer.as_str()) && !out.contains(&e.layer.as_str()) {
                out.push(&e.layer);
            }
        }
        out
    }

    /// Index into [`Self::layers`] for every entry.
    pub fn layer_indices(&self) -> Vec<usize> {
        let layers = self.layers();
        self.entries.iter().map(|e| layers.iter().position(|l| *l == e.layer).unwrap()).collect()
    }

    pub fn get(&self, layer: &str, kind: ParamKind) -> Option<&Tensor<T>> {
        self.entries.iter().find(|e| e.layer == layer && e.kind == kind).map(|e| &e.value)
    }

    pub fn get_mut(&mut self, layer: &str, kind: ParamKind) -> Option<&mut Tensor<T>> {
        self.entries.iter_mut().find(|e| e.layer == layer && e.kind == kind).map(|e| &mut e.value)
    }

    pub fn numel(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    /// Squared L2 norm over all entries, accumulated in f64.
    pub fn norm_sq(&self) -> f64 {
        self.entries.iter().flat_map(|e| e.value.data()).map(|v| v.as_f64() * v.as_f64()).sum()
    }

    pub fn same_layout<U: Real>(&self, other: &LayerGradients<U>) -> bool {
        self.entries.len() == other.entries.len()
            && self
                .entries
                .iter()
                .zip(&other.entries)
                .all(|(a, b)| a.layer == b.layer && a.kind == b.kind && a.value.shape() == b.value.shape())
    }

    pub fn check_layout<U: Real>(&self, other: &LayerGradients<U>) -> Result<()> {
        if self.same_layout(other) {
            Ok(())
        } else {
            Err(Error::LayoutMismatch(format!(
                "{} entries vs {} entries or differing shapes",
                self.entries.len(),
                other.entries.len()
            )))
        }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        LayerGradients {
            entries: self
                .entries
                .iter()
                .map(|e| GradEntry { layer: e.layer.clone(), kind: e.kind, value: e.value.map(&f) })
                .collect(),
        }
    }

    pub fn zeros_like(&self) -> Self {
        self.map(|_| T::zero())
    }

    pub fn scaled(&self, c: f64) -> Self {
        let c = T::of(c);
        self.map(|v| v * c)
    }

    /// `self += other`; layouts must match.
    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        self.check_layout(other)?;
        for (a, b) in self.entries.iter_mut().zip(&other.entries) {
            for (x, &y) in a.value.data_mut().iter_mut().zip(b.value.data()) {
                *x += y;
            }
        }
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        self.entries.iter().all(|e| e.value.all_finite())
    }

    pub fn cast<U: Real>(&self) -> LayerGradients<U> {
        LayerGradients {
            entries: self
                .entries
                .iter()
                .map(|e| GradEntry { layer: e.layer.clone(), kind: e.kind, value: e.value.cast() })
                .collect(),
        }
    }
}

/// Per-layer selection; index `i` refers to the `i`-th distinct layer of a
/// gradient layout.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerMask(pub Vec<bool>);

impl LayerMask {
    pub fn all(layers: usize) -> Self {
        LayerMask(vec![true; layers])
    }

    /// Mask selecting every layer except those named in `excluded`.
    pub fn excluding(layers: &[&str], excluded: &[&str]) -> Self {
        LayerMask(layers.iter().map(|l| !excluded.contains(l)).collect())
    }

    pub fn includes(&self, layer: usize) -> bool {
        self.0.get(layer).copied().unwrap_or(false)
    }

    pub fn count(&self) -> usize {
        self.0.iter().filter(|&&b| b).count()
    }

    pub fn validate(&self, layers: usize) -> Result<()> {
        if self.0.len() != layers {
            return Err(Error::InvalidMask(format!("mask has {} entries, layout has {layers} layers", self.0.len())));
        }
        if self.count() == 0 {
            return Err(Error::InvalidMask("mask selects no layer".into()));
        }
        Ok(())
    }
}
