//! Gradient inversion: iterative attacks (iDLG, CPL, IG and the layer-masking
//! Ignore attack), label recovery and the analytic dense-layer attack.

use serde::{Deserialize, Serialize};

use crate::data::ChannelNorm;
use crate::diffcore::{attack_input_gradient, DistanceKind, Objective, TvReduction};
use crate::error::{Error, Result};
use crate::grads::{LayerGradients, LayerMask, ParamKind};
use crate::metrics::ImageMetrics;
use crate::models::{LayerRole, ModelSpec, ModelState, Noise};
use crate::rng::RandomStream;
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttackKind {
    Idlg,
    Cpl,
    Ig,
    Ignore,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LabelMode {
    Known,
    Recovered,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Schedule {
    pub lr: f64,
    /// Iterations without a new best loss before the learning rate decays.
    pub plateau: usize,
    pub decay: f64,
    pub loss_floor: f64,
    /// Iterations without a new best loss before the attack stops.
    pub stagnation: usize,
    pub max_iters: usize,
}

impl Default for Schedule {
    fn default() -> Self {
        Schedule { lr: 1.0, plateau: 400, decay: 0.1, loss_floor: 1e-5, stagnation: 4000, max_iters: 20_000 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackSpec {
    pub kind: AttackKind,
    pub distance: DistanceKind,
    pub tv_weight: f64,
    #[serde(default)]
    pub tv_reduction: TvReduction,
    pub cpl_label_weight: f64,
    pub label_mode: LabelMode,
    /// Explicit layer mask; `None` selects all layers, or the Ignore mask for
    /// [`AttackKind::Ignore`].
    #[serde(default)]
    pub mask: Option<LayerMask>,
    #[serde(default)]
    pub schedule: Schedule,
    #[serde(default)]
    pub record_trajectory: bool,
    /// Gradient entries `(layer, flat index)` whose values are recorded.
    #[serde(default)]
    pub tracked: Vec<(String, usize)>,
    /// Optimize in standardized coordinates of these channel statistics.
    #[serde(default)]
    pub input_norm: Option<ChannelNorm>,
    /// Project the dummy onto the valid pixel range after every step.
    #[serde(default)]
    pub boxed: bool,
}

impl AttackSpec {
    pub fn preset(kind: AttackKind) -> Self {
        let (distance, tv_weight, cpl) = match kind {
            AttackKind::Idlg => (DistanceKind::Euclidean, 0.0, 0.0),
            AttackKind::Cpl => (DistanceKind::Euclidean, 0.0, 1.0),
            AttackKind::Ig | AttackKind::Ignore => (DistanceKind::Cosine, 0.01, 0.0),
        };
        AttackSpec {
            kind,
            distance,
            tv_weight,
            tv_reduction: TvReduction::Mean,
            cpl_label_weight: cpl,
            label_mode: LabelMode::Known,
            mask: None,
            schedule: Schedule::default(),
            record_trajectory: false,
            tracked: Vec::new(),
            input_norm: None,
            boxed: false,
        }
    }

    pub fn with_max_iters(mut self, n: usize) -> Self {
        self.schedule.max_iters = n;
        self
    }

    pub fn with_mask(mut self, mask: LayerMask) -> Self {
        self.mask = Some(mask);
        self
    }

    pub fn with_trajectory(mut self) -> Self {
        self.record_trajectory = true;
        self
    }

    pub fn resolve_mask(&self, spec: &ModelSpec) -> Result<LayerMask> {
        if let Some(m) = &self.mask {
            return Ok(m.clone());
        }
        match self.kind {
            AttackKind::Ignore => ignore_mask(spec),
            _ => Ok(LayerMask::all(layer_names(spec)?.len())),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    LossFloor,
    Stagnation,
    MaxIters,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackedEntry {
    pub layer: String,
    pub index: usize,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrajectoryRecord {
    pub layers: Vec<String>,
    /// `cosines[l][t]`: cosine similarity of layer `l` after step `t`.
    pub cosines: Vec<Vec<f64>>,
    pub losses: Vec<f64>,
    pub tracked: Vec<TrackedEntry>,
}

impl TrajectoryRecord {
    pub fn new(layers: Vec<String>, tracked: &[(String, usize)]) -> Self {
        TrajectoryRecord {
            cosines: vec![Vec::new(); layers.len()],
            layers,
            losses: Vec::new(),
            tracked: tracked
                .iter()
                .map(|(layer, index)| TrackedEntry { layer: layer.clone(), index: *index, values: Vec::new() })
                .collect(),
        }
    }

    /// Appends one iteration of dummy gradients compared with `target`.
    pub fn record<T: Real>(&mut self, dummy: &LayerGradients<T>, target: &LayerGradients<T>, loss: f64) {
        for (l, cos) in per_layer_cosine(dummy, target).into_iter().enumerate() {
            self.cosines[l].push(cos);
        }
        self.losses.push(loss);
        for t in &mut self.tracked {
            let v = dummy
                .entries
                .iter()
                .filter(|e| e.layer == t.layer)
                .flat_map(|e| e.value.data())
                .nth(t.index)
                .map_or(f64::NAN, |v| v.as_f64());
            t.values.push(v);
        }
    }

    pub fn len(&self) -> usize {
        self.losses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.losses.is_empty()
    }

    pub fn series(&self, layer: &str) -> Option<&[f64]> {
        self.layers.iter().position(|l| l == layer).map(|i| self.cosines[i].as_slice())
    }
}

/// Cosine similarity per layer (weight and bias concatenated). Two zero
/// vectors count as identical; one zero vector gives 0.
pub fn per_layer_cosine<T: Real>(a: &LayerGradients<T>, b: &LayerGradients<T>) -> Vec<f64> {
    let idx = a.layer_indices();
    let n = a.layers().len();
    let mut dot = vec![0.0; n];
    let mut na = vec![0.0; n];
    let mut nb = vec![0.0; n];
    for ((ea, eb), &l) in a.entries.iter().zip(&b.entries).zip(&idx) {
        for (&x, &y) in ea.value.data().iter().zip(eb.value.data()) {
            let (x, y) = (x.as_f64(), y.as_f64());
            dot[l] += x * y;
            na[l] += x * x;
            nb[l] += y * y;
        }
    }
    (0..n)
        .map(|l| match (na[l] == 0.0, nb[l] == 0.0) {
            (true, true) => 1.0,
            (true, false) | (false, true) => 0.0,
            _ => (dot[l] / (na[l].sqrt() * nb[l].sqrt())).clamp(-1.0, 1.0),
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackResult<T> {
    #[serde(skip)]
    pub reconstruction: Tensor<T>,
    pub label: usize,
    /// Objective value at the last evaluated iterate.
    pub final_loss: f64,
    pub best_loss: f64,
    /// Optimizer steps taken.
    pub iterations: usize,
    pub stop: StopReason,
    pub metrics: Option<ImageMetrics>,
    pub trajectory: Option<TrajectoryRecord>,
}

impl<T: Real> AttackResult<T> {
    pub fn score(&mut self, truth: &Tensor<T>) -> Result<ImageMetrics> {
        let recon = self.reconstruction.clone().reshaped(truth.shape());
        let m = ImageMetrics::compute(truth, &recon)?;
        self.metrics = Some(m);
        Ok(m)
    }
}

/// I.i.d. standard normal dummy input.
pub fn init_dummy<T: Real>(shape: &[usize], seed: u64) -> Tensor<T> {
    RandomStream::new(seed).normal_tensor(shape)
}

/// Distinct layer names of a model's parameter layout.
pub fn layer_names(spec: &ModelSpec) -> Result<Vec<String>> {
    let mut out: Vec<String> = Vec::new();
    for s in spec.layout()? {
        if !out.contains(&s.layer) {
            out.push(s.layer);
        }
    }
    Ok(out)
}

/// Distance between dummy gradients `a` and target gradients `b` over the
/// masked layers. Cosine distance uses one global cosine over the
/// concatenation of the selected layers.
pub fn gradient_distance<T: Real>(
    a: &LayerGradients<T>,
    b: &LayerGradients<T>,
    mask: &LayerMask,
    kind: DistanceKind,
) -> Result<f64> {
    a.check_layout(b)?;
    mask.validate(a.layers().len())?;
    let idx = a.layer_indices();
    let pairs = a
        .entries
        .iter()
        .zip(&b.entries)
        .zip(&idx)
        .filter(|(_, &l)| mask.includes(l))
        .flat_map(|((ea, eb), _)| ea.value.data().iter().zip(eb.value.data()))
        .map(|(&x, &y)| (x.as_f64(), y.as_f64()));
    match kind {
        DistanceKind::Euclidean => Ok(pairs.map(|(x, y)| (x - y) * (x - y)).sum()),
        DistanceKind::Cosine => {
            let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
            for (x, y) in pairs {
                dot += x * y;
                na += x * x;
                nb += y * y;
            }
            if na == 0.0 || nb == 0.0 {
                return Err(Error::DegenerateGradient("zero-norm gradient under cosine distance".into()));
            }
            Ok(1.0 - dot / (na.sqrt() * nb.sqrt()))
        }
    }
}

/// Anisotropic total variation of a `[C, H, W]` (or batched) image.
pub fn total_variation<T: Real>(img: &Tensor<T>) -> f64 {
    let s = img.shape();
    let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
    let d = img.data();
    let mut tv = 0.0;
    for plane in d.chunks(h * w) {
        for i in 0..h {
            for j in 0..w {
                let v = plane[i * w + j].as_f64();
                if j + 1 < w {
                    tv += (plane[i * w + j + 1].as_f64() - v).abs();
                }
                if i + 1 < h {
                    tv += (plane[(i + 1) * w + j].as_f64() - v).abs();
                }
            }
        }
    }
    tv
}

/// Squared Euclidean distance between a probability vector and the one-hot
/// encoding of `label`.
pub fn cpl_label_term(prediction: &[f64], label: usize) -> f64 {
    prediction
        .iter()
        .enumerate()
        .map(|(i, &p)| {
            let t = if i == label { 1.0 } else { 0.0 };
            (p - t) * (p - t)
        })
        .sum()
}

/// Label of a single-sample cross-entropy gradient: the only row of the
/// classifier weight gradient (`[classes, features]`) with a negative sum.
pub fn recover_label<T: Real>(classifier_weight_grad: &Tensor<T>) -> Result<usize> {
    let s = classifier_weight_grad.shape();
    if s.len() != 2 {
        return Err(Error::InvalidInput(format!("expected a matrix, got {s:?}")));
    }
    let negative: Vec<usize> = classifier_weight_grad
        .data()
        .chunks(s[1])
        .enumerate()
        .filter(|(_, row)| row.iter().map(|v| v.as_f64()).sum::<f64>() < 0.0)
        .map(|(i, _)| i)
        .collect();
    match negative.as_slice() {
        [i] => Ok(*i),
        other => Err(Error::AmbiguousLabel(other.len())),
    }
}

/// Mask keeping every layer up to and including the encoder of the first
/// privacy module, and dropping its decoder and everything after.
pub fn ignore_mask(spec: &ModelSpec) -> Result<LayerMask> {
    let layout = spec.layout()?;
    let names = layer_names(spec)?;
    let decoder = layout
        .iter()
        .find(|s| s.role == LayerRole::Decoder(0))
        .ok_or_else(|| Error::InvalidSpec("Ignore attack needs a variational module".into()))?;
    let cut = names.iter().position(|n| *n == decoder.layer).unwrap();
    Ok(LayerMask((0..names.len()).map(|i| i < cut).collect()))
}

/// Input of a biased dense layer from its single-sample gradients:
/// `x = dW[i] / db[i]` for the bias entry of largest magnitude.
pub fn analytic_fc_input<T: Real>(dw: &Tensor<T>, db: Option<&Tensor<T>>) -> Result<Tensor<T>> {
    let db = db.ok_or(Error::NoBias)?;
    let s = dw.shape();
    if s.len() != 2 || db.shape() != [s[0]] {
        return Err(Error::InvalidInput(format!(
            "weight gradient {:?} and bias gradient {:?} do not match",
            s,
            db.shape()
        )));
    }
    let (i, b) = db
        .data()
        .iter()
        .enumerate()
        .filter(|(_, v)| v.as_f64() != 0.0)
        .max_by(|a, b| a.1.as_f64().abs().total_cmp(&b.1.as_f64().abs()))
        .ok_or(Error::NoUsableRow)?;
    let row = &dw.data()[i * s[1]..(i + 1) * s[1]];
    Tensor::new(vec![s[1]], row.iter().map(|&v| v / *b).collect())
}

/// [`analytic_fc_input`] applied to a named dense layer of a gradient set.
pub fn analytic_layer_input<T: Real>(grads: &LayerGradients<T>, layer: &str) -> Result<Tensor<T>> {
    let dw = grads.get(layer, ParamKind::Weight).ok_or_else(|| Error::InvalidInput(format!("no layer {layer}")))?;
    analytic_fc_input(dw, grads.get(layer, ParamKind::Bias))
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    const B1: f64 = 0.9;
    const B2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(n: usize) -> Self {
        Adam { m: vec![0.0; n], v: vec![0.0; n], t: 0 }
    }

    fn step<T: Real>(&mut self, x: &mut [T], g: &[T], lr: f64) {
        self.t += 1;
        let c1 = 1.0 - Self::B1.powi(self.t);
        let c2 = 1.0 - Self::B2.powi(self.t);
        for i in 0..x.len() {
            let gi = g[i].as_f64();
            self.m[i] = Self::B1 * self.m[i] + (1.0 - Self::B1) * gi;
            self.v[i] = Self::B2 * self.v[i] + (1.0 - Self::B2) * gi * gi;
            let upd = lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + Self::EPS);
            x[i] -= T::of(upd);
        }
    }
}

/// Minimizes the gradient-matching objective over a dummy input with Adam.
///
/// Variational modules draw fresh noise every iteration; the draw is frozen
/// within one iteration. The returned reconstruction is the last iterate.
pub fn run_attack<T: Real>(
    model: &ModelState<T>,
    target: &LayerGradients<T>,
    victim_shape: &[usize],
    label: Option<usize>,
    spec: &AttackSpec,
    rng: &RandomStream,
) -> Result<AttackResult<T>> {
    run_attack_from(model, target, label, spec, rng, init_dummy(victim_shape, rng.substream("dummy").seed()))
}

/// [`run_attack`] starting from a given dummy, expressed in standardized
/// coordinates when the spec carries an input normalization.
pub fn run_attack_from<T: Real>(
    model: &ModelState<T>,
    target: &LayerGradients<T>,
    label: Option<usize>,
    spec: &AttackSpec,
    rng: &RandomStream,
    dummy: Tensor<T>,
) -> Result<AttackResult<T>> {
    if spec.kind == AttackKind::Ignore && !model.has_privacy() {
        return Err(Error::InvalidSpec("Ignore attack needs a variational module".into()));
    }
    let mask = spec.resolve_mask(&model.spec)?;
    let label = match (spec.label_mode, label) {
        (LabelMode::Known, Some(y)) => y,
        (LabelMode::Known, None) => return Err(Error::InvalidInput("label mode is known but no label given".into())),
        (LabelMode::Recovered, _) => {
            let layer = model.spec.classifier_layer();
            let w = target
                .get(&layer, ParamKind::Weight)
                .ok_or_else(|| Error::InvalidInput(format!("no classifier gradient {layer}")))?;
            recover_label(w)?
        }
    };
    let objective = Objective {
        target,
        mask: &mask,
        distance: spec.distance,
        tv_weight: spec.tv_weight,
        tv_reduction: spec.tv_reduction,
        label_weight: if spec.kind == AttackKind::Cpl { spec.cpl_label_weight } else { 0.0 },
        input_norm: spec.input_norm.as_ref(),
    };
    let bounds = match &spec.input_norm {
        Some(norm) => {
            let (s, m) = norm.expand::<T>(dummy.shape())?;
            let lo = s.data().iter().zip(m.data()).map(|(&s, &m)| -m / s).collect::<Vec<T>>();
            let hi = s.data().iter().zip(m.data()).map(|(&s, &m)| (T::one() - m) / s).collect::<Vec<T>>();
            (lo, hi)
        }
        None => (vec![T::zero(); dummy.len()], vec![T::one(); dummy.len()]),
    };
    let sched = spec.schedule;
    let mut noise_rng = rng.substream("noise");
    let mut x = dummy;
    let mut adam = Adam::new(x.len());
    let mut lr = sched.lr;
    let mut best = f64::INFINITY;
    let (mut since_best, mut since_decay) = (0usize, 0usize);
    let mut trajectory = spec
        .record_trajectory
        .then(|| TrajectoryRecord::new(target.layers().iter().map(|s| s.to_string()).collect(), &spec.tracked));
    let mut last;
    let mut iterations = 0;
    let stop = loop {
        let noise = if model.has_privacy() { Noise::sample(&model.spec, 1, &mut noise_rng)? } else { Noise::none() };
        let eval = attack_input_gradient(model, &x, label, &objective, &noise)?;
        last = eval.loss;
        if eval.loss < best {
            best = eval.loss;
            since_best = 0;
            since_decay = 0;
        } else {
            since_best += 1;
            since_decay += 1;
        }
        if eval.loss < sched.loss_floor {
            break StopReason::LossFloor;
        }
        if since_best >= sched.stagnation {
            break StopReason::Stagnation;
        }
        if iterations >= sched.max_iters {
            break StopReason::MaxIters;
        }
        if since_decay >= sched.plateau {
            lr *= sched.decay;
            since_decay = 0;
        }
        adam.step(x.data_mut(), eval.grad.data(), lr);
        if spec.boxed {
            for ((v, &lo), &hi) in x.data_mut().iter_mut().zip(&bounds.0).zip(&bounds.1) {
                *v = v.max(lo).min(hi);
            }
        }
        iterations += 1;
        if let Some(t) = trajectory.as_mut() {
            t.record(&eval.dummy_grads, target, eval.loss);
        }
        if !x.all_finite() {
            return Err(Error::NumericalFailure("dummy diverged".into()));
        }
    };
    let reconstruction = match &spec.input_norm {
        Some(norm) => norm.to_pixels(&x)?,
        None => x,
    };
    Ok(AttackResult {
        reconstruction,
        label,
        final_loss: last,
        best_loss: best,
        iterations,
        stop,
        metrics: None,
        trajectory,
    })
}
