//! Orchestration: train or load a model, sample victims, attack them and
//! collect everything into a [`ResultsBundle`].

use std::path::Path;

use gradleak_core::attacks::{run_attack, AttackSpec, StopReason, TrajectoryRecord};
use gradleak_core::checkpoint;
use gradleak_core::data::{DataSplit, Dataset};
use gradleak_core::defenses::DefenseSpec;
use gradleak_core::diffcore::param_gradients;
use gradleak_core::fedsim::{partition_dataset, run_federation_from, RoundLog};
use gradleak_core::metrics::{asr, ImageMetrics, MetricReport, ASR_THRESHOLD};
use gradleak_core::models::build_model;
use gradleak_core::tensor::Precision;
use gradleak_core::{count_parameters, Error, LayerGradients, ModelSpec, ModelState, RandomStream, Real, Tensor};
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::datasets::load_dataset;
use crate::error::{LabError, Result};

/// `n` distinct entries of `split`, drawn without replacement.
pub fn sample_victims(split: &[usize], n: usize, seed: u64) -> Result<Vec<usize>> {
    if n > split.len() {
        return Err(LabError::Config(format!(
            "{n} victims requested but the client holds {} training images",
            split.len()
        )));
    }
    let perm = RandomStream::new(seed).permutation(split.len());
    Ok(perm[..n].iter().map(|&i| split[i]).collect())
}

/// A victim image with the gradient message it produced.
pub struct VictimGradient<T> {
    pub index: usize,
    pub label: usize,
    pub image: Tensor<T>,
    pub grads: LayerGradients<T>,
}

/// Random stream of one victim, keyed by its dataset index so results do
/// not depend on the order victims are processed in.
fn victim_stream(seed: u64, index: usize) -> RandomStream {
    RandomStream::new(seed).indexed("victim", index as u64)
}

/// Batch-1 training-step gradient of each victim, perturbed by `defense`.
pub fn victim_gradients<T: Real>(
    model: &ModelState<T>,
    data: &Dataset,
    victims: &[usize],
    defense: &DefenseSpec,
    seed: u64,
) -> Result<Vec<VictimGradient<T>>> {
    victims
        .iter()
        .map(|&index| {
            let mut rng = victim_stream(seed, index);
            let image: Tensor<T> = data.image(index);
            let label = data.label(index);
            let (_, g) = param_gradients(model, &image, label, Some(&mut rng))?;
            let grads = defense.perturb(&g, &mut rng)?;
            Ok(VictimGradient { index, label, image, grads })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VictimRecord {
    pub index: usize,
    pub label: usize,
    /// Label the attack used (known or recovered).
    pub attack_label: Option<usize>,
    pub metrics: Option<ImageMetrics>,
    pub iterations: usize,
    pub stop: Option<StopReason>,
    pub final_loss: Option<f64>,
    pub best_loss: Option<f64>,
    pub error: Option<String>,
    pub numerical_failure: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trajectory: Option<TrajectoryRecord>,
}

impl VictimRecord {
    /// SSIM used for the success ratio; failed attacks count as 0.
    pub fn ssim_or_zero(&self) -> f64 {
        self.metrics.map_or(0.0, |m| m.ssim)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackSummary {
    pub ssim_mean: f64,
    pub ssim_std: f64,
    pub asr: f64,
    pub psnr_mean: Option<f64>,
    pub mse_mean: f64,
    pub failed: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackOutcome {
    pub name: String,
    pub spec: AttackSpec,
    pub summary: AttackSummary,
    pub victims: Vec<VictimRecord>,
    /// Flattened `[C, H, W]` reconstructions in pixel space, one per victim
    /// (zeros for failed victims). Stored beside the JSON as raw arrays.
    #[serde(skip)]
    pub reconstructions: Vec<Vec<f32>>,
}

impl AttackOutcome {
    pub fn report(&self) -> Result<Option<MetricReport>> {
        let done: Vec<ImageMetrics> = self.victims.iter().filter_map(|v| v.metrics).collect();
        if done.is_empty() {
            return Ok(None);
        }
        Ok(Some(MetricReport::from_victims(done)?))
    }
}

fn summarize(victims: &[VictimRecord]) -> Result<AttackSummary> {
    let done: Vec<ImageMetrics> = victims.iter().filter_map(|v| v.metrics).collect();
    let failed = victims.len() - done.len();
    let ssims: Vec<f64> = victims.iter().map(VictimRecord::ssim_or_zero).collect();
    let asr = asr(&ssims, ASR_THRESHOLD)?;
    if done.is_empty() {
        return Ok(AttackSummary {
            ssim_mean: f64::NAN,
            ssim_std: f64::NAN,
            asr,
            psnr_mean: None,
            mse_mean: f64::NAN,
            failed,
        });
    }
    let r = MetricReport::from_victims(done)?;
    Ok(AttackSummary {
        ssim_mean: r.ssim_mean,
        ssim_std: r.ssim_std,
        asr,
        psnr_mean: r.psnr_mean,
        mse_mean: r.mse_mean,
        failed,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub seed: u64,
    pub precision: u32,
    pub version: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultsBundle {
    pub config: ExperimentConfig,
    pub manifest: Manifest,
    pub defense: DefenseSpec,
    pub model: ModelSpec,
    pub params: usize,
    pub base_params: usize,
    /// Test accuracy of the attacked model when it was trained here.
    pub accuracy: Option<f64>,
    pub rounds: Vec<RoundLog>,
    pub image_shape: [usize; 3],
    pub victims: Vec<usize>,
    pub attacks: Vec<AttackOutcome>,
    /// Flattened victim images, aligned with `victims`.
    #[serde(skip)]
    pub truths: Vec<Vec<f32>>,
}

impl ResultsBundle {
    pub fn any_numerical_failure(&self) -> bool {
        self.attacks.iter().flat_map(|a| &a.victims).any(|v| v.numerical_failure)
    }
}

/// A model ready to be attacked, with its training history.
pub struct Trained<T> {
    pub state: ModelState<T>,
    pub rounds: Vec<RoundLog>,
    pub accuracy: Option<f64>,
}

/// Model and defense described by `config` for the loaded data.
pub fn resolve_model(config: &ExperimentConfig, data: &DataSplit) -> Result<(ModelSpec, ModelSpec, DefenseSpec)> {
    let base = config.base_model(data.train.image_shape, data.train.num_classes);
    let defense = config.defense.to_spec(&base)?;
    let spec = defense.apply_to_model(&base);
    spec.validate()?;
    Ok((base, spec, defense))
}

/// Loads `config.checkpoint` when it exists, trains when `config.train` is
/// set (saving to `config.checkpoint` if given), and otherwise builds the
/// round-0 model.
pub fn prepare_model<T: Real>(config: &ExperimentConfig, data: &DataSplit) -> Result<Trained<T>> {
    let (_, spec, defense) = resolve_model(config, data)?;
    if let Some(path) = config.checkpoint.as_deref().filter(|p| p.is_file()) {
        let state: ModelState<T> = checkpoint::load(path)?;
        if state.spec != spec {
            return Err(LabError::Config(format!("checkpoint {} holds a different model", path.display())));
        }
        return Ok(Trained { state, rounds: Vec::new(), accuracy: None });
    }
    let state = build_model(&spec, RandomStream::new(config.seed).substream("model").seed())?;
    if !config.train {
        return Ok(Trained { state, rounds: Vec::new(), accuracy: None });
    }
    let fed = run_federation_from(&config.fed_config(defense), state, data)?;
    let accuracy = fed.history.get(fed.best_round).map(|r| r.test_accuracy);
    if let Some(path) = config.checkpoint.as_deref() {
        save_checkpoint(&fed.state, path)?;
    }
    Ok(Trained { state: fed.state, rounds: fed.history, accuracy })
}

pub fn save_checkpoint<T: Real>(state: &ModelState<T>, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    Ok(checkpoint::save(state, path)?)
}

pub fn run_experiment(config: &ExperimentConfig) -> Result<ResultsBundle> {
    let data = load_dataset(&config.dataset)?;
    match config.precision()? {
        Precision::F32 => run_with::<f32>(config, &data),
        Precision::F64 => run_with::<f64>(config, &data),
    }
}

pub fn run_with<T: Real>(config: &ExperimentConfig, data: &DataSplit) -> Result<ResultsBundle> {
    let trained = prepare_model::<T>(config, data)?;
    attack_model(config, data, trained)
}

/// Victim sampling, attacks and metrics against an already prepared model.
pub fn attack_model<T: Real>(
    config: &ExperimentConfig,
    data: &DataSplit,
    trained: Trained<T>,
) -> Result<ResultsBundle> {
    let (base, spec, defense) = resolve_model(config, data)?;
    let model = trained.state;
    let root = RandomStream::new(config.seed);
    let partition = partition_dataset(
        data.train.len(),
        config.fed.num_clients,
        config.fed.val_fraction,
        root.substream("partition").seed(),
    )?;
    let client = partition
        .get(config.victim_client)
        .ok_or_else(|| LabError::Config(format!("victim client {} of {}", config.victim_client, partition.len())))?;
    let victims = sample_victims(&client.train, config.victims, root.substream("victims").seed())?;
    let grads = victim_gradients(&model, &data.train, &victims, &defense, config.seed)?;
    let norm = if config.attack.iter().any(|a| a.standardize) { Some(data.train.channel_norm()?) } else { None };
    let mut attacks = Vec::new();
    for ac in &config.attack {
        let aspec = ac.to_spec(&spec, norm.as_ref())?;
        attacks.push(attack_victims(&model, &grads, &aspec, ac.label(), config.seed)?);
    }
    Ok(ResultsBundle {
        config: config.clone(),
        manifest: Manifest {
            seed: config.seed,
            precision: T::PRECISION.bits(),
            version: env!("CARGO_PKG_VERSION").to_string(),
        },
        defense,
        params: count_parameters(&spec)?,
        base_params: count_parameters(&base)?,
        model: spec,
        accuracy: trained.accuracy,
        rounds: trained.rounds,
        image_shape: data.train.image_shape,
        truths: grads.iter().map(|v| v.image.to_f64_vec().iter().map(|&x| x as f32).collect()).collect(),
        victims,
        attacks,
    })
}

/// Attacks every victim independently. Failures are recorded per victim
/// and count as unsuccessful.
pub fn attack_victims<T: Real>(
    model: &ModelState<T>,
    victims: &[VictimGradient<T>],
    spec: &AttackSpec,
    name: String,
    seed: u64,
) -> Result<AttackOutcome> {
    let mut records = Vec::with_capacity(victims.len());
    let mut reconstructions = Vec::with_capacity(victims.len());
    for v in victims {
        let rng = victim_stream(seed, v.index).substream("attack");
        match run_attack(model, &v.grads, v.image.shape(), Some(v.label), spec, &rng) {
            Ok(mut res) => {
                let metrics = res.score(&v.image)?;
                reconstructions.push(res.reconstruction.to_f64_vec().iter().map(|&x| x as f32).collect());
                records.push(VictimRecord {
                    index: v.index,
                    label: v.label,
                    attack_label: Some(res.label),
                    metrics: Some(metrics),
                    iterations: res.iterations,
                    stop: Some(res.stop),
                    final_loss: Some(res.final_loss),
                    best_loss: Some(res.best_loss),
                    error: None,
                    numerical_failure: false,
                    trajectory: res.trajectory.take(),
                });
            }
            Err(e) => {
                reconstructions.push(vec![0.0; v.image.len()]);
                records.push(VictimRecord {
                    index: v.index,
                    label: v.label,
                    attack_label: None,
                    metrics: None,
                    iterations: 0,
                    stop: None,
                    final_loss: None,
                    best_loss: None,
                    numerical_failure: matches!(e, Error::NumericalFailure(_)),
                    error: Some(e.to_string()),
                    trajectory: None,
                });
            }
        }
    }
    Ok(AttackOutcome { name, spec: spec.clone(), summary: summarize(&records)?, victims: records, reconstructions })
}

/// Runs every grid point of the sweep, reusing checkpoints that exist.
pub fn run_sweep(config: &ExperimentConfig) -> Result<Vec<ResultsBundle>> {
    config.expand_sweep().iter().map(run_experiment).collect()
}
