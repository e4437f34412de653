//! Federated Averaging over IID client partitions.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::data::{DataSplit, Dataset};
use crate::defenses::DefenseSpec;
use crate::diffcore::batch_gradients;
use crate::error::{Error, Result};
use crate::grads::LayerGradients;
use crate::models::{build_forward, build_model, one_hot, BnMode, ModelSpec, ModelState, Noise, BN_MOMENTUM};
use crate::rng::RandomStream;
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FedConfig {
    pub num_clients: usize,
    pub rounds: usize,
    pub local_epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub betas: (f64, f64),
    pub val_fraction: f64,
    /// Rounds without a new best mean validation loss before stopping;
    /// 0 disables early stopping.
    pub patience: usize,
    pub defense: DefenseSpec,
    pub seed: u64,
}

impl Default for FedConfig {
    fn default() -> Self {
        FedConfig {
            num_clients: 10,
            rounds: 300,
            local_epochs: 1,
            batch_size: 64,
            lr: 1e-3,
            betas: (0.9, 0.999),
            val_fraction: 0.1,
            patience: 40,
            defense: DefenseSpec::None,
            seed: 0,
        }
    }
}

impl FedConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_clients == 0 || self.batch_size == 0 || self.local_epochs == 0 {
            return Err(Error::InvalidSpec("clients, batch size and epochs must be >= 1".into()));
        }
        if self.patience > self.rounds {
            return Err(Error::InvalidSpec(format!("patience {} exceeds rounds {}", self.patience, self.rounds)));
        }
        if !(0.0..1.0).contains(&self.val_fraction) || !(self.lr >= 0.0) {
            return Err(Error::InvalidSpec("val fraction must be in [0, 1) and lr >= 0".into()));
        }
        self.defense.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClientSplit {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
}

/// Shuffles `n` indices, drops the remainder of `n / num_clients`, and cuts
/// every client's share into train and validation parts.
pub fn partition_dataset(n: usize, num_clients: usize, val_fraction: f64, seed: u64) -> Result<Vec<ClientSplit>> {
    if num_clients == 0 {
        return Err(Error::InvalidInput("no clients".into()));
    }
    let per = n / num_clients;
    let val = (val_fraction * per as f64).round() as usize;
    if per == 0 || val >= per {
        return Err(Error::InvalidInput(format!("{n} samples are too few for {num_clients} clients")));
    }
    let perm = RandomStream::new(seed).permutation(n);
    Ok(perm[..per * num_clients]
        .chunks(per)
        .map(|c| ClientSplit { train: c[val..].to_vec(), val: c[..val].to_vec() })
        .collect())
}

pub struct LocalUpdate<T> {
    pub delta: LayerGradients<T>,
    pub buffers: Vec<Tensor<T>>,
    pub train_loss: f64,
}

struct AdamState<T> {
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
    t: i32,
}

/// Local epochs of Adam on `idx` starting from `global`; returns the
/// parameter delta `local - global`.
pub fn local_train<T: Real>(
    global: &ModelState<T>,
    data: &Dataset,
    idx: &[usize],
    config: &FedConfig,
    rng: &mut RandomStream,
) -> Result<LocalUpdate<T>> {
    if idx.is_empty() {
        return Err(Error::InvalidInput("client has no training data".into()));
    }
    let mut local = global.clone();
    let mut adam = AdamState {
        m: local.params.iter().map(|p| Tensor::<T>::zeros(p.shape())).collect(),
        v: local.params.iter().map(|p| Tensor::<T>::zeros(p.shape())).collect(),
        t: 0,
    };
    let (b1, b2) = config.betas;
    let mut loss_sum = 0.0;
    let mut steps = 0usize;
    for _ in 0..config.local_epochs {
        let order: Vec<usize> = rng.permutation(idx.len()).into_iter().map(|i| idx[i]).collect();
        for chunk in order.chunks(config.batch_size) {
            let (x, labels) = data.batch::<T>(chunk);
            let noise = Noise::sample(&local.spec, chunk.len(), rng)?;
            let out = batch_gradients(&local, &x, &labels, &noise)?;
            loss_sum += out.loss;
            steps += 1;
            adam.t += 1;
            let c1 = 1.0 - b1.powi(adam.t);
            let c2 = 1.0 - b2.powi(adam.t);
            for (k, g) in out.grads.entries.iter().enumerate() {
                let p = local.params[k].data_mut();
                let m = adam.m[k].data_mut();
                let v = adam.v[k].data_mut();
                for i in 0..p.len() {
                    let gi = g.value.data()[i].as_f64();
                    let mi = b1 * m[i].as_f64() + (1.0 - b1) * gi;
                    let vi = b2 * v[i].as_f64() + (1.0 - b2) * gi * gi;
                    m[i] = T::of(mi);
                    v[i] = T::of(vi);
                    let upd = config.lr * (mi / c1) / ((vi / c2).sqrt() + 1e-8);
                    p[i] -= T::of(upd);
                }
            }
            if !out.batch_stats.is_empty() {
                let n = chunk.len() as f64;
                let mom = T::of(BN_MOMENTUM);
                let unbias = T::of(n / (n - 1.0));
                for (l, (mean, var)) in out.batch_stats.iter().enumerate() {
                    let rm = local.buffers[2 * l].zip_map(mean, |r, b| r + mom * (b - r));
                    let rv = local.buffers[2 * l + 1].zip_map(var, |r, b| r + mom * (b * unbias - r));
                    local.buffers[2 * l] = rm;
                    local.buffers[2 * l + 1] = rv;
                }
            }
        }
    }
    let delta = global.wrap(local.params.iter().zip(&global.params).map(|(l, g)| l.zip_map(g, |a, b| a - b)).collect());
    if !delta.all_finite() {
        return Err(Error::NumericalFailure("local training diverged".into()));
    }
    Ok(LocalUpdate { delta, buffers: local.buffers, train_loss: loss_sum / steps as f64 })
}

/// `global + mean(deltas)`, summed in the given order.
pub fn aggregate<T: Real>(global: &ModelState<T>, deltas: &[LayerGradients<T>]) -> Result<ModelState<T>> {
    let first = deltas.first().ok_or_else(|| Error::InvalidInput("no client updates".into()))?;
    let reference = global.params_as_grads();
    let mut sum = first.zeros_like();
    for d in deltas {
        reference.check_layout(d)?;
        sum.add_assign(d)?;
    }
    let k = T::of(1.0 / deltas.len() as f64);
    let mut out = global.clone();
    for (p, s) in out.params.iter_mut().zip(&sum.entries) {
        *p = p.zip_map(&s.value, |a, b| a + b * k);
    }
    Ok(out)
}

/// Mean cross-entropy and accuracy of `state` on `idx` (running batch-norm
/// statistics, fresh variational noise).
pub fn evaluate<T: Real>(
    state: &ModelState<T>,
    data: &Dataset,
    idx: &[usize],
    rng: &mut RandomStream,
) -> Result<(f64, f64)> {
    if idx.is_empty() {
        return Err(Error::InvalidInput("nothing to evaluate".into()));
    }
    let mut loss = 0.0;
    let mut correct = 0usize;
    for chunk in idx.chunks(256) {
        let (x, labels) = data.batch::<T>(chunk);
        let noise = Noise::sample(&state.spec, chunk.len(), rng)?;
        let mut g = Graph::new();
        let params: Vec<_> = state.params.iter().map(|p| g.leaf(p.clone())).collect();
        let xv = g.leaf(x);
        let pass = build_forward(&mut g, state, &params, xv, &noise, BnMode::Eval)?;
        let ls = g.log_softmax(pass.logits);
        let lsv = g.value(ls);
        let k = state.spec.num_classes;
        let targets = one_hot::<T>(&labels, k)?;
        for (r, &y) in labels.iter().enumerate() {
            let row = &lsv.data()[r * k..(r + 1) * k];
            loss -= row.iter().zip(&targets.data()[r * k..(r + 1) * k]).map(|(a, b)| (*a * *b).as_f64()).sum::<f64>();
            let pred = (0..k).max_by(|&a, &b| row[a].as_f64().total_cmp(&row[b].as_f64())).unwrap();
            correct += usize::from(pred == y);
        }
    }
    if !loss.is_finite() {
        return Err(Error::NumericalFailure("evaluation loss is not finite".into()));
    }
    Ok((loss / idx.len() as f64, correct as f64 / idx.len() as f64))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundLog {
    pub round: usize,
    pub train_loss: Vec<f64>,
    pub val_loss: Vec<f64>,
    pub test_accuracy: f64,
    pub wall_time: f64,
}

impl RoundLog {
    pub fn mean_val_loss(&self) -> f64 {
        self.val_loss.iter().sum::<f64>() / self.val_loss.len().max(1) as f64
    }
}

pub struct Federation<T> {
    /// State with the lowest mean validation loss.
    pub state: ModelState<T>,
    pub best_round: usize,
    pub history: Vec<RoundLog>,
    pub partition: Vec<ClientSplit>,
}

/// Builds the model from `config.seed` and runs [`run_federation_from`].
pub fn run_federation<T: Real>(config: &FedConfig, spec: &ModelSpec, data: &DataSplit) -> Result<Federation<T>> {
    let root = RandomStream::new(config.seed);
    let state = build_model(spec, root.substream("model").seed())?;
    run_federation_from(config, state, data)
}

pub fn run_federation_from<T: Real>(
    config: &FedConfig,
    initial: ModelState<T>,
    data: &DataSplit,
) -> Result<Federation<T>> {
    config.validate()?;
    let root = RandomStream::new(config.seed);
    let partition = partition_dataset(
        data.train.len(),
        config.num_clients,
        config.val_fraction,
        root.substream("partition").seed(),
    )?;
    if partition.iter().any(|c| c.train.len() < config.batch_size) {
        return Err(Error::InvalidSpec(format!("batch size {} exceeds a client's training split", config.batch_size)));
    }
    let test_idx: Vec<usize> = (0..data.test.len()).collect();
    let mut state = initial;
    let mut best = (f64::INFINITY, state.clone(), 0usize);
    let mut history = Vec::new();
    let mut since_best = 0usize;
    for round in 0..config.rounds {
        let started = Instant::now();
        let mut deltas = Vec::with_capacity(partition.len());
        let mut buffers: Vec<Vec<Tensor<T>>> = Vec::new();
        let mut train_loss = Vec::new();
        for (c, split) in partition.iter().enumerate() {
            let mut rng = root.substream(&format!("round{round}/client{c}"));
            let upd = local_train(&state, &data.train, &split.train, config, &mut rng)?;
            let msg = config.defense.perturb(&upd.delta, &mut rng)?;
            deltas.push(msg);
            buffers.push(upd.buffers);
            train_loss.push(upd.train_loss);
        }
        state = aggregate(&state, &deltas)?;
        if !state.buffers.is_empty() {
            let k = T::of(1.0 / buffers.len() as f64);
            for (j, slot) in state.buffers.iter_mut().enumerate() {
                let mut acc = Tensor::zeros(slot.shape());
                for b in &buffers {
                    acc = acc.zip_map(&b[j], |a, x| a + x);
                }
                *slot = acc.map(|v| v * k);
            }
        }
        let mut eval_rng = root.substream(&format!("round{round}/eval"));
        let mut val_loss = Vec::new();
        for split in &partition {
            let idx = if split.val.is_empty() { &split.train } else { &split.val };
            val_loss.push(evaluate(&state, &data.train, idx, &mut eval_rng)?.0);
        }
        let test_accuracy =
            if test_idx.is_empty() { f64::NAN } else { evaluate(&state, &data.test, &test_idx, &mut eval_rng)?.1 };
        let log = RoundLog { round, train_loss, val_loss, test_accuracy, wall_time: started.elapsed().as_secs_f64() };
        let mean_val = log.mean_val_loss();
        history.push(log);
        if mean_val < best.0 {
            best = (mean_val, state.clone(), round);
            since_best = 0;
        } else {
            since_best += 1;
        }
        if config.patience > 0 && since_best >= config.patience {
            break;
        }
    }
    Ok(Federation { state: best.1, best_round: best.2, history, partition })
}
