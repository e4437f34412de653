//! Experiment configuration, read from TOML.

use std::path::{Path, PathBuf};

use gradleak_core::attacks::{layer_names, AttackKind, AttackSpec, LabelMode};
use gradleak_core::data::ChannelNorm;
use gradleak_core::defenses::DefenseSpec;
use gradleak_core::diffcore::{DistanceKind, TvReduction};
use gradleak_core::fedsim::FedConfig;
use gradleak_core::models::{Family, InputShape};
use gradleak_core::tensor::Precision;
use gradleak_core::{LayerMask, ModelSpec, PrivacyModuleSpec};
use serde::{Deserialize, Serialize};

use crate::datasets::DatasetConfig;
use crate::error::{LabError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub family: Family,
    pub dense_bias: bool,
    /// MLP hidden widths.
    pub hidden: Vec<usize>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig { family: Family::Cnn, dense_bias: true, hidden: vec![1024; 4] }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum DefenseKind {
    #[default]
    None,
    Dp,
    Gc,
    Precode,
    Cvb,
}

/// Flat defense section; only the keys of the selected kind are used.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DefenseConfig {
    pub kind: DefenseKind,
    pub clip: f64,
    pub noise_multiplier: f64,
    pub ratio: f64,
    pub position: usize,
    /// PRECODE bottleneck size; half the channels at the insertion point
    /// when unset.
    pub bottleneck: Option<usize>,
    pub kernel: usize,
    pub scale: f64,
    /// KL weight; 0.1 for CVB and 0.01 for PRECODE when unset.
    pub beta: Option<f64>,
}

impl Default for DefenseConfig {
    fn default() -> Self {
        DefenseConfig {
            kind: DefenseKind::None,
            clip: 20.0,
            noise_multiplier: 0.1,
            ratio: 0.99,
            position: 1,
            bottleneck: None,
            kernel: 5,
            scale: 0.5,
            beta: None,
        }
    }
}

impl DefenseConfig {
    pub fn to_spec(&self, base: &ModelSpec) -> Result<DefenseSpec> {
        let spec = match self.kind {
            DefenseKind::None => DefenseSpec::None,
            DefenseKind::Dp => DefenseSpec::NoisyGradients { clip: self.clip, noise_multiplier: self.noise_multiplier },
            DefenseKind::Gc => DefenseSpec::Compression { ratio: self.ratio },
            DefenseKind::Precode => {
                let k = match self.bottleneck {
                    Some(k) => k,
                    None => {
                        let points = base.insertion_points()?;
                        let (_, feature) = points
                            .iter()
                            .find(|(p, _)| *p == self.position)
                            .ok_or_else(|| LabError::Config(format!("no insertion point {}", self.position)))?;
                        (feature[0] / 2).max(1)
                    }
                };
                DefenseSpec::Precode { module: PrivacyModuleSpec::precode(self.position, k, self.beta.unwrap_or(0.01)) }
            }
            DefenseKind::Cvb => DefenseSpec::Cvb {
                module: PrivacyModuleSpec::cvb(self.position, self.kernel, self.scale, self.beta.unwrap_or(0.1)),
            },
        };
        spec.validate()?;
        Ok(spec)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttackConfig {
    /// Label in reports; defaults to the attack kind.
    pub name: Option<String>,
    pub kind: AttackKind,
    pub max_iters: usize,
    pub lr: f64,
    pub plateau: usize,
    pub stagnation: usize,
    pub tv_weight: Option<f64>,
    pub tv_reduction: TvReduction,
    pub distance: Option<DistanceKind>,
    pub label: LabelMode,
    /// Optimize in coordinates standardized by the training set's channel
    /// statistics.
    pub standardize: bool,
    pub boxed: bool,
    /// Layers left out of the gradient distance; overrides the preset mask.
    pub exclude_layers: Vec<String>,
    pub trajectory: bool,
    pub tracked: Vec<(String, usize)>,
}

impl Default for AttackConfig {
    fn default() -> Self {
        AttackConfig {
            name: None,
            kind: AttackKind::Ig,
            max_iters: 20_000,
            lr: 1.0,
            plateau: 400,
            stagnation: 4000,
            tv_weight: None,
            tv_reduction: TvReduction::Mean,
            distance: None,
            label: LabelMode::Known,
            standardize: true,
            boxed: false,
            exclude_layers: Vec::new(),
            trajectory: false,
            tracked: Vec::new(),
        }
    }
}

impl AttackConfig {
    pub fn label(&self) -> String {
        self.name.clone().unwrap_or_else(|| {
            serde_json::to_value(self.kind).ok().and_then(|v| v.as_str().map(str::to_string)).unwrap_or_default()
        })
    }

    pub fn to_spec(&self, model: &ModelSpec, norm: Option<&ChannelNorm>) -> Result<AttackSpec> {
        let mut spec = AttackSpec::preset(self.kind).with_max_iters(self.max_iters);
        spec.schedule.lr = self.lr;
        spec.schedule.plateau = self.plateau;
        spec.schedule.stagnation = self.stagnation;
        if let Some(tv) = self.tv_weight {
            spec.tv_weight = tv;
        }
        spec.tv_reduction = self.tv_reduction;
        if let Some(d) = self.distance {
            spec.distance = d;
        }
        spec.label_mode = self.label;
        spec.boxed = self.boxed;
        if self.standardize {
            spec.input_norm = norm.cloned();
        }
        if !self.exclude_layers.is_empty() {
            let names = layer_names(model)?;
            if let Some(bad) = self.exclude_layers.iter().find(|l| !names.contains(l)) {
                return Err(LabError::Config(format!("unknown layer {bad} in exclude_layers")));
            }
            let refs: Vec<&str> = names.iter().map(String::as_str).collect();
            let excluded: Vec<&str> = self.exclude_layers.iter().map(String::as_str).collect();
            let mask = LayerMask::excluding(&refs, &excluded);
            mask.validate(names.len())?;
            spec.mask = Some(mask);
        }
        spec.record_trajectory = self.trajectory;
        spec.tracked = self.tracked.clone();
        Ok(spec)
    }
}

/// Federated training settings; the defense and seed come from the
/// experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FedSection {
    pub num_clients: usize,
    pub rounds: usize,
    pub local_epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub val_fraction: f64,
    pub patience: usize,
}

impl Default for FedSection {
    fn default() -> Self {
        let d = FedConfig::default();
        FedSection {
            num_clients: d.num_clients,
            rounds: d.rounds,
            local_epochs: d.local_epochs,
            batch_size: d.batch_size,
            lr: d.lr,
            beta1: d.betas.0,
            beta2: d.betas.1,
            val_fraction: d.val_fraction,
            patience: d.patience,
        }
    }
}

/// Grid over privacy-module hyperparameters; an empty axis keeps the base
/// value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub position: Vec<usize>,
    pub kernel: Vec<usize>,
    pub scale: Vec<f64>,
    pub beta: Vec<f64>,
    pub bottleneck: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub seed: u64,
    /// 32 or 64.
    pub precision: u32,
    pub out: PathBuf,
    pub victims: usize,
    /// Client whose training split supplies the victims.
    pub victim_client: usize,
    /// Run federated training before attacking; otherwise the round-0 model
    /// (or `checkpoint`) is attacked.
    pub train: bool,
    pub checkpoint: Option<PathBuf>,
    pub dataset: DatasetConfig,
    pub model: ModelConfig,
    pub defense: DefenseConfig,
    pub fed: FedSection,
    pub attack: Vec<AttackConfig>,
    pub sweep: Option<SweepConfig>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            name: "experiment".into(),
            seed: 0,
            precision: 32,
            out: PathBuf::from("out"),
            victims: 128,
            victim_client: 0,
            train: false,
            checkpoint: None,
            dataset: DatasetConfig::default(),
            model: ModelConfig::default(),
            defense: DefenseConfig::default(),
            fed: FedSection::default(),
            attack: vec![AttackConfig::default()],
            sweep: None,
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text)?;
        cfg.precision()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn precision(&self) -> Result<Precision> {
        Precision::from_bits(self.precision).map_err(|e| LabError::Config(e.to_string()))
    }

    /// Model without defenses for a dataset of the given image shape.
    pub fn base_model(&self, image_shape: [usize; 3], num_classes: usize) -> ModelSpec {
        let input = InputShape::new(image_shape[1], image_shape[2], image_shape[0]);
        match self.model.family {
            Family::Cnn => ModelSpec::cnn(input, num_classes),
            Family::Mlp => ModelSpec::mlp(input, num_classes).with_hidden(self.model.hidden.clone()),
        }
        .with_dense_bias(self.model.dense_bias)
    }

    pub fn fed_config(&self, defense: DefenseSpec) -> FedConfig {
        let f = &self.fed;
        FedConfig {
            num_clients: f.num_clients,
            rounds: f.rounds,
            local_epochs: f.local_epochs,
            batch_size: f.batch_size,
            lr: f.lr,
            betas: (f.beta1, f.beta2),
            val_fraction: f.val_fraction,
            patience: f.patience,
            defense,
            seed: self.seed,
        }
    }

    /// One configuration per grid point of `sweep`, named after its
    /// coordinates and writing to a subdirectory of `out`. A configured
    /// checkpoint becomes one checkpoint per grid point in that directory.
    pub fn expand_sweep(&self) -> Vec<ExperimentConfig> {
        let Some(sweep) = &self.sweep else {
            return vec![self.clone()];
        };
        let d = &self.defense;
        let axis = |v: &Vec<f64>, base: f64| if v.is_empty() { vec![base] } else { v.clone() };
        let uaxis = |v: &Vec<usize>, base: usize| if v.is_empty() { vec![base] } else { v.clone() };
        let bottlenecks: Vec<Option<usize>> = if sweep.bottleneck.is_empty() {
            vec![d.bottleneck]
        } else {
            sweep.bottleneck.iter().map(|&k| Some(k)).collect()
        };
        let betas: Vec<Option<f64>> =
            if sweep.beta.is_empty() { vec![d.beta] } else { sweep.beta.iter().map(|&b| Some(b)).collect() };
        let mut out = Vec::new();
        for &position in &uaxis(&sweep.position, d.position) {
            for &kernel in &uaxis(&sweep.kernel, d.kernel) {
                for &scale in &axis(&sweep.scale, d.scale) {
                    for &beta in &betas {
                        for &bottleneck in &bottlenecks {
                            let mut c = self.clone();
                            c.sweep = None;
                            c.defense.position = position;
                            c.defense.kernel = kernel;
                            c.defense.scale = scale;
                            c.defense.beta = beta;
                            c.defense.bottleneck = bottleneck;
                            let tag = format!(
                                "P{position}_k{kernel}_s{scale}_b{}{}",
                                beta.map_or("default".to_string(), |b| b.to_string()),
                                bottleneck.map_or(String::new(), |k| format!("_K{k}"))
                            );
                            c.name = format!("{}-{tag}", self.name);
                            c.out = self.out.join(&tag);
                            if self.checkpoint.is_some() {
                                c.checkpoint = Some(c.out.join("model.ckpt"));
                            }
                            out.push(c);
                        }
                    }
                }
            }
        }
        out
    }
}
