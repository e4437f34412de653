//! Architecture registry: the three-layer CNN and the batch-normalized MLP,
//! privacy-module placements, parameter layout and initialization.
//!
//! Tensors are channel-first. A feature map written `h x w x c` elsewhere is
//! stored as `[c, h, w]` here, and a batch as `[n, c, h, w]`.

use serde::{Deserialize, Serialize};

use crate::autodiff::{ConvGeom, Graph, Var};
use crate::error::{Error, Result};
use crate::grads::{GradEntry, LayerGradients, ParamKind};
use crate::privacy::{cvb_block, kl_graph, precode_block, PrivacyKind, PrivacyModuleSpec, StatsVars, TRAINING_KL};
use crate::rng::RandomStream;
use crate::tensor::{numel, Real, Tensor};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    Cnn,
    Mlp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputShape {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl InputShape {
    pub fn new(height: usize, width: usize, channels: usize) -> Self {
        InputShape { height, width, channels }
    }

    /// `[C, H, W]`.
    pub fn chw(&self) -> [usize; 3] {
        [self.channels, self.height, self.width]
    }

    pub fn numel(&self) -> usize {
        self.height * self.width * self.channels
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub family: Family,
    pub input: InputShape,
    pub num_classes: usize,
    #[serde(default = "default_conv_channels")]
    pub conv_channels: Vec<usize>,
    #[serde(default = "default_kernel")]
    pub kernel: usize,
    #[serde(default = "default_stride")]
    pub stride: usize,
    #[serde(default = "default_hidden")]
    pub hidden: Vec<usize>,
    #[serde(default = "yes")]
    pub batch_norm: bool,
    #[serde(default = "yes")]
    pub conv_bias: bool,
    #[serde(default = "yes")]
    pub dense_bias: bool,
    #[serde(default)]
    pub privacy: Vec<PrivacyModuleSpec>,
}

fn default_conv_channels() -> Vec<usize> {
    vec![16, 32, 64]
}
fn default_kernel() -> usize {
    5
}
fn default_stride() -> usize {
    2
}
fn default_hidden() -> Vec<usize> {
    vec![1024; 4]
}
fn yes() -> bool {
    true
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerRole {
    Conv,
    Dense,
    BatchNorm,
    /// Encoder of the privacy module with this index in `ModelSpec::privacy`.
    Encoder(usize),
    Decoder(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamSlot {
    pub layer: String,
    pub kind: ParamKind,
    pub shape: Vec<usize>,
    pub role: LayerRole,
}

impl ParamSlot {
    fn fan_in(&self) -> usize {
        self.shape[1..].iter().product::<usize>().max(1)
    }
}

enum Block {
    Conv { index: usize },
    Dense { index: usize },
}

impl ModelSpec {
    /// The three-layer CNN: 5x5 valid convolutions with stride 2, channels
    /// 16/32/64, ReLU, and a dense classifier.
    pub fn cnn(input: InputShape, num_classes: usize) -> Self {
        ModelSpec {
            family: Family::Cnn,
            input,
            num_classes,
            conv_channels: default_conv_channels(),
            kernel: default_kernel(),
            stride: default_stride(),
            hidden: Vec::new(),
            batch_norm: false,
            conv_bias: true,
            dense_bias: true,
            privacy: Vec::new(),
        }
    }

    /// Four dense layers of 1024 units with batch normalization and ReLU,
    /// followed by a dense output layer.
    pub fn mlp(input: InputShape, num_classes: usize) -> Self {
        ModelSpec {
            family: Family::Mlp,
            input,
            num_classes,
            conv_channels: Vec::new(),
            kernel: default_kernel(),
            stride: default_stride(),
            hidden: default_hidden(),
            batch_norm: true,
            conv_bias: true,
            dense_bias: true,
            privacy: Vec::new(),
        }
    }

    pub fn with_privacy(mut self, module: PrivacyModuleSpec) -> Self {
        self.privacy.push(module);
        self
    }

    pub fn with_dense_bias(mut self, on: bool) -> Self {
        self.dense_bias = on;
        self
    }

    pub fn with_hidden(mut self, hidden: Vec<usize>) -> Self {
        self.hidden = hidden;
        self
    }

    fn blocks(&self) -> Vec<Block> {
        match self.family {
            Family::Cnn => (0..self.conv_channels.len()).map(|index| Block::Conv { index }).collect(),
            Family::Mlp => (0..self.hidden.len()).map(|index| Block::Dense { index }).collect(),
        }
    }

    fn conv_geom(&self) -> ConvGeom {
        ConvGeom { stride: self.stride, pad: 0 }
    }

    /// Post-activation feature shape after every block, `[C, H, W]` for the
    /// CNN and `[F]` for the MLP. Positions are 1-based.
    pub fn insertion_points(&self) -> Result<Vec<(usize, Vec<usize>)>> {
        if self.input.numel() == 0 {
            return Err(Error::InvalidSpec("input shape has a zero dimension".into()));
        }
        if self.num_classes < 2 {
            return Err(Error::InvalidSpec("need at least two classes".into()));
        }
        let mut out = Vec::new();
        match self.family {
            Family::Cnn => {
                if self.conv_channels.is_empty() || self.kernel == 0 {
                    return Err(Error::InvalidSpec("CNN needs conv layers and a kernel".into()));
                }
                let [_, mut h, mut w] = self.input.chw();
                let geom = self.conv_geom();
                for (i, &oc) in self.conv_channels.iter().enumerate() {
                    let (Some(oh), Some(ow)) = (geom.out_dim(h, self.kernel), geom.out_dim(w, self.kernel)) else {
                        return Err(Error::InvalidSpec(format!(
                            "conv{} kernel {} does not fit a {h}x{w} map",
                            i + 1,
                            self.kernel
                        )));
                    };
                    if oc == 0 {
                        return Err(Error::InvalidSpec(format!("conv{} has no channels", i + 1)));
                    }
                    (h, w) = (oh, ow);
                    out.push((i + 1, vec![oc, h, w]));
                }
            }
            Family::Mlp => {
                if self.hidden.is_empty() || self.hidden.contains(&0) {
                    return Err(Error::InvalidSpec("MLP hidden widths must be positive".into()));
                }
                for (i, &h) in self.hidden.iter().enumerate() {
                    out.push((i + 1, vec![h]));
                }
            }
        }
        Ok(out)
    }

    /// Checks geometry and privacy placements.
    pub fn validate(&self) -> Result<Vec<(usize, Vec<usize>)>> {
        let points = self.insertion_points()?;
        for (i, m) in self.privacy.iter().enumerate() {
            let Some((_, feature)) = points.iter().find(|(p, _)| *p == m.position) else {
                return Err(Error::InvalidSpec(format!(
                    "privacy module at position {} but insertion points are 1..={}",
                    m.position,
                    points.len()
                )));
            };
            m.validate(feature)?;
            if self.privacy[..i].iter().any(|o| o.position == m.position) {
                return Err(Error::InvalidSpec(format!("more than one privacy module at position {}", m.position)));
            }
        }
        Ok(points)
    }

    fn module_name(&self, m: &PrivacyModuleSpec) -> String {
        format!("{}{}", m.label(), m.position)
    }

    /// Parameter arrays in forward order.
    pub fn layout(&self) -> Result<Vec<ParamSlot>> {
        let points = self.validate()?;
        let mut slots = Vec::new();
        let slot = |layer: String, kind, shape: Vec<usize>, role| ParamSlot { layer, kind, shape, role };
        let mut prev = self.input.chw().to_vec();
        for (block, (pos, feature)) in self.blocks().into_iter().zip(&points) {
            match block {
                Block::Conv { index } => {
                    let name = format!("conv{}", index + 1);
                    let w = vec![feature[0], prev[0], self.kernel, self.kernel];
                    slots.push(slot(name.clone(), ParamKind::Weight, w, LayerRole::Conv));
                    if self.conv_bias {
                        slots.push(slot(name, ParamKind::Bias, vec![feature[0]], LayerRole::Conv));
                    }
                }
                Block::Dense { index } => {
                    let name = format!("fc{}", index + 1);
                    let fan_in = numel(&prev);
                    slots.push(slot(name.clone(), ParamKind::Weight, vec![feature[0], fan_in], LayerRole::Dense));
                    if self.dense_bias {
                        slots.push(slot(name, ParamKind::Bias, vec![feature[0]], LayerRole::Dense));
                    }
                    if self.batch_norm {
                        let bn = format!("bn{}", index + 1);
                        slots.push(slot(bn.clone(), ParamKind::Weight, vec![feature[0]], LayerRole::BatchNorm));
                        slots.push(slot(bn, ParamKind::Bias, vec![feature[0]], LayerRole::BatchNorm));
                    }
                }
            }
            for (mi, m) in self.privacy.iter().enumerate().filter(|(_, m)| m.position == *pos) {
                let base = self.module_name(m);
                for (suffix, shape) in m.param_shapes(feature) {
                    let role = if suffix == "dec" { LayerRole::Decoder(mi) } else { LayerRole::Encoder(mi) };
                    slots.push(slot(format!("{base}.{suffix}"), ParamKind::Weight, shape, role));
                }
            }
            prev = feature.clone();
        }
        let out = format!("fc{}", points.len() + 1);
        slots.push(slot(out.clone(), ParamKind::Weight, vec![self.num_classes, numel(&prev)], LayerRole::Dense));
        if self.dense_bias {
            slots.push(slot(out, ParamKind::Bias, vec![self.num_classes], LayerRole::Dense));
        }
        Ok(slots)
    }

    /// Name of the final dense layer.
    pub fn classifier_layer(&self) -> String {
        let blocks = match self.family {
            Family::Cnn => self.conv_channels.len(),
            Family::Mlp => self.hidden.len(),
        };
        format!("fc{}", blocks + 1)
    }

    /// Widths of the batch-norm layers, in order.
    pub fn batch_norm_widths(&self) -> Vec<usize> {
        if self.family == Family::Mlp && self.batch_norm {
            self.hidden.clone()
        } else {
            Vec::new()
        }
    }

    /// Latent sample shape (without batch dimension) of every privacy module.
    pub fn latent_shapes(&self) -> Result<Vec<Vec<usize>>> {
        let points = self.validate()?;
        Ok(self
            .privacy
            .iter()
            .map(|m| {
                let feature = &points.iter().find(|(p, _)| *p == m.position).unwrap().1;
                m.latent_shape(feature)
            })
            .collect())
    }
}

/// Exact number of trainable scalars, privacy modules included.
pub fn count_parameters(spec: &ModelSpec) -> Result<usize> {
    Ok(spec.layout()?.iter().map(|s| numel(&s.shape)).sum())
}

/// Concrete parameters of a [`ModelSpec`].
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState<T> {
    pub spec: ModelSpec,
    pub seed: u64,
    /// One array per [`ParamSlot`] of `spec.layout()`.
    pub params: Vec<Tensor<T>>,
    /// Batch-norm running mean and variance, two arrays per BN layer.
    pub buffers: Vec<Tensor<T>>,
}

/// Weights uniform in `+-1/sqrt(fan_in)`, biases zero, batch-norm scales one.
pub fn build_model<T: Real>(spec: &ModelSpec, seed: u64) -> Result<ModelState<T>> {
    let layout = spec.layout()?;
    let root = RandomStream::new(seed);
    let params = layout
        .iter()
        .map(|slot| match (slot.kind, slot.role) {
            (ParamKind::Bias, _) => Tensor::zeros(&slot.shape),
            (ParamKind::Weight, LayerRole::BatchNorm) => Tensor::full(&slot.shape, T::one()),
            (ParamKind::Weight, _) => {
                let mut rng = root.substream(&slot.layer);
                let bound = 1.0 / (slot.fan_in() as f64).sqrt();
                let data = (0..numel(&slot.shape)).map(|_| T::of(rng.uniform_range(-bound, bound))).collect();
                Tensor::new(slot.shape.clone(), data).unwrap()
            }
        })
        .collect();
    let buffers = spec
        .batch_norm_widths()
        .into_iter()
        .flat_map(|w| [Tensor::zeros(&[w]), Tensor::full(&[w], T::one())])
        .collect();
    Ok(ModelState { spec: spec.clone(), seed, params, buffers })
}

impl<T: Real> ModelState<T> {
    pub fn layout(&self) -> Vec<ParamSlot> {
        self.spec.layout().expect("state built from a valid spec")
    }

    pub fn num_params(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    pub fn has_privacy(&self) -> bool {
        !self.spec.privacy.is_empty()
    }

    /// Arrays laid out as gradients of this model.
    pub fn wrap(&self, arrays: Vec<Tensor<T>>) -> LayerGradients<T> {
        LayerGradients::new(
            self.layout()
                .into_iter()
                .zip(arrays)
                .map(|(s, value)| GradEntry { layer: s.layer, kind: s.kind, value })
                .collect(),
        )
    }

    pub fn params_as_grads(&self) -> LayerGradients<T> {
        self.wrap(self.params.clone())
    }

    pub fn cast<U: Real>(&self) -> ModelState<U> {
        ModelState {
            spec: self.spec.clone(),
            seed: self.seed,
            params: self.params.iter().map(Tensor::cast).collect(),
            buffers: self.buffers.iter().map(Tensor::cast).collect(),
        }
    }

    /// `[C, H, W]` or `[N, C, H, W]` to `[N, C, H, W]`, checking the shape.
    pub fn batch_input(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let chw = self.spec.input.chw();
        match x.shape() {
            s if s == chw => Ok(x.clone().reshaped(&[1, chw[0], chw[1], chw[2]])),
            [n, rest @ ..] if rest == chw && *n > 0 => Ok(x.clone()),
            s => Err(Error::InvalidInput(format!("input shape {s:?}, model expects {chw:?}"))),
        }
    }
}

/// Frozen reparameterization noise: one array per privacy module, shaped
/// `[N, latent...]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Noise<T> {
    pub eps: Vec<Tensor<T>>,
}

impl<T: Real> Noise<T> {
    pub fn sample(spec: &ModelSpec, batch: usize, rng: &mut RandomStream) -> Result<Self> {
        let eps = spec
            .latent_shapes()?
            .into_iter()
            .map(|s| {
                let mut shape = vec![batch];
                shape.extend(s);
                rng.normal_tensor(&shape)
            })
            .collect();
        Ok(Noise { eps })
    }

    pub fn zeros(spec: &ModelSpec, batch: usize) -> Result<Self> {
        let eps = spec
            .latent_shapes()?
            .into_iter()
            .map(|s| {
                let mut shape = vec![batch];
                shape.extend(s);
                Tensor::zeros(&shape)
            })
            .collect();
        Ok(Noise { eps })
    }

    pub fn none() -> Self {
        Noise { eps: Vec::new() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnMode {
    /// Batch statistics when the batch has more than one sample, running
    /// statistics otherwise.
    Train,
    /// Running statistics.
    Eval,
}

pub struct ForwardPass<T> {
    pub logits: Var,
    /// Post-activation output of every block, by 1-based position.
    pub latents: Vec<(usize, Var)>,
    /// Latent statistics and KL weight of every privacy module.
    pub stats: Vec<(StatsVars, f64)>,
    /// Biased batch mean and variance of each batch-norm layer, present when
    /// batch statistics were used.
    pub batch_stats: Vec<(Tensor<T>, Tensor<T>)>,
}

/// Records the forward pass of `state` on `x` (`[N, C, H, W]`). `params`
/// are graph handles for `state.params`, in layout order.
pub fn build_forward<T: Real>(
    g: &mut Graph<T>,
    state: &ModelState<T>,
    params: &[Var],
    x: Var,
    noise: &Noise<T>,
    mode: BnMode,
) -> Result<ForwardPass<T>> {
    let spec = &state.spec;
    let layout = state.layout();
    if params.len() != layout.len() {
        return Err(Error::LayoutMismatch(format!("{} parameter handles for {} arrays", params.len(), layout.len())));
    }
    if noise.eps.len() != spec.privacy.len() {
        return Err(Error::InvalidInput(format!(
            "{} noise arrays for {} privacy modules",
            noise.eps.len(),
            spec.privacy.len()
        )));
    }
    let n = g.shape(x)[0];
    let chw = spec.input.chw();
    if g.shape(x) != [n, chw[0], chw[1], chw[2]] {
        return Err(Error::InvalidInput(format!(
            "input shape {:?}, model expects [N, {}, {}, {}]",
            g.shape(x),
            chw[0],
            chw[1],
            chw[2]
        )));
    }
    let lookup = |layer: &str, kind: ParamKind| {
        layout.iter().position(|s| s.layer == layer && s.kind == kind).map(|i| params[i])
    };
    let mut pass = ForwardPass { logits: x, latents: Vec::new(), stats: Vec::new(), batch_stats: Vec::new() };
    let mut h = x;
    let blocks = spec.blocks();
    if spec.family == Family::Mlp {
        h = g.reshape(h, &[n, spec.input.numel()]);
    }
    for (bi, block) in blocks.iter().enumerate() {
        let pos = bi + 1;
        match *block {
            Block::Conv { index } => {
                let name = format!("conv{}", index + 1);
                let w = lookup(&name, ParamKind::Weight).unwrap();
                h = g.conv2d(h, w, spec.conv_geom());
                if let Some(b) = lookup(&name, ParamKind::Bias) {
                    h = g.add_bias(h, b);
                }
            }
            Block::Dense { index } => {
                let name = format!("fc{}", index + 1);
                let w = lookup(&name, ParamKind::Weight).unwrap();
                h = g.matmul(h, w, false, true);
                if let Some(b) = lookup(&name, ParamKind::Bias) {
                    h = g.add_bias(h, b);
                }
                if spec.batch_norm {
                    let bn = format!("bn{}", index + 1);
                    let gamma = lookup(&bn, ParamKind::Weight).unwrap();
                    let beta = lookup(&bn, ParamKind::Bias).unwrap();
                    let running = (&state.buffers[2 * index], &state.buffers[2 * index + 1]);
                    let batch = mode == BnMode::Train && n > 1;
                    h = batch_norm(g, h, gamma, beta, running, batch, &mut pass.batch_stats);
                }
            }
        }
        h = g.relu(h);
        pass.latents.push((pos, h));
        for (mi, m) in spec.privacy.iter().enumerate().filter(|(_, m)| m.position == pos) {
            let base = spec.module_name(m);
            let get = |suffix: &str| lookup(&format!("{base}.{suffix}"), ParamKind::Weight).unwrap();
            let eps = &noise.eps[mi];
            let (out, stats) = match m.kind {
                PrivacyKind::Precode { .. } => precode_block(g, h, get("enc"), get("dec"), eps),
                PrivacyKind::Cvb { .. } => cvb_block(g, h, get("enc_mu"), get("enc_logvar"), get("dec"), eps),
            };
            h = out;
            pass.stats.push((stats, m.beta));
        }
    }
    let f: usize = g.shape(h)[1..].iter().product();
    h = g.reshape(h, &[n, f]);
    let out = spec.classifier_layer();
    h = g.matmul(h, lookup(&out, ParamKind::Weight).unwrap(), false, true);
    if let Some(b) = lookup(&out, ParamKind::Bias) {
        h = g.add_bias(h, b);
    }
    pass.logits = h;
    Ok(pass)
}

fn batch_norm<T: Real>(
    g: &mut Graph<T>,
    x: Var,
    gamma: Var,
    beta: Var,
    running: (&Tensor<T>, &Tensor<T>),
    batch: bool,
    record: &mut Vec<(Tensor<T>, Tensor<T>)>,
) -> Var {
    let shape = g.shape(x).to_vec();
    let n = shape[0] as f64;
    let (centered, inv) = if batch {
        let s = g.reduce_bias(x);
        let mean = g.scale(s, 1.0 / n);
        let mb = g.broadcast_bias(mean, &shape);
        let centered = g.sub(x, mb);
        let sq = g.square(centered);
        let ss = g.reduce_bias(sq);
        let var = g.scale(ss, 1.0 / n);
        record.push((g.value(mean).clone(), g.value(var).clone()));
        let ve = g.offset(var, BN_EPS);
        (centered, g.powf(ve, -0.5))
    } else {
        let eps = T::of(BN_EPS);
        let mean = g.leaf(running.0.clone());
        let inv = g.leaf(running.1.map(|v| (v + eps).sqrt().recip()));
        let mb = g.broadcast_bias(mean, &shape);
        (g.sub(x, mb), inv)
    };
    let ib = g.broadcast_bias(inv, &shape);
    let xhat = g.mul(centered, ib);
    let gb = g.broadcast_bias(gamma, &shape);
    let y = g.mul(xhat, gb);
    g.add_bias(y, beta)
}

/// One-hot `[N, K]` targets.
pub fn one_hot<T: Real>(labels: &[usize], classes: usize) -> Result<Tensor<T>> {
    let mut t = Tensor::zeros(&[labels.len(), classes]);
    for (i, &y) in labels.iter().enumerate() {
        if y >= classes {
            return Err(Error::InvalidInput(format!("label {y} outside 0..{classes}")));
        }
        t.data_mut()[i * classes + y] = T::one();
    }
    Ok(t)
}

/// Mean cross-entropy of the logits plus `beta * KL` of every privacy module,
/// the KL averaged over latent entries.
pub fn build_loss<T: Real>(g: &mut Graph<T>, pass: &ForwardPass<T>, targets: &Tensor<T>) -> Var {
    let n = g.shape(pass.logits)[0] as f64;
    let ls = g.log_softmax(pass.logits);
    let t = g.leaf(targets.clone());
    let picked = g.mul(ls, t);
    let s = g.sum_all(picked);
    let mut loss = g.scale(s, -1.0 / n);
    for &(stats, beta) in &pass.stats {
        if beta > 0.0 {
            let kl = kl_graph(g, stats, TRAINING_KL);
            let weighted = g.scale(kl, beta);
            loss = g.add(loss, weighted);
        }
    }
    loss
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cifar() -> InputShape {
        InputShape::new(32, 32, 3)
    }

    #[test]
    fn baseline_cnn_layout() {
        let spec = ModelSpec::cnn(cifar(), 10);
        let layout = spec.layout().unwrap();
        assert_eq!(layout.len(), 8);
        assert_eq!(count_parameters(&spec).unwrap(), 65_962);
        let points = spec.insertion_points().unwrap();
        assert_eq!(points, vec![(1, vec![16, 14, 14]), (2, vec![32, 5, 5]), (3, vec![64, 1, 1])]);
    }

    #[test]
    fn precode_counts() {
        for (p, k, total) in [(1, 8, 141_226), (2, 16, 104_362), (3, 32, 72_106)] {
            let spec = ModelSpec::cnn(cifar(), 10).with_privacy(PrivacyModuleSpec::precode(p, k, 0.01));
            assert_eq!(count_parameters(&spec).unwrap(), total, "P={p}");
        }
    }

    #[test]
    fn cvb_adds_three_bias_free_arrays() {
        let base = ModelSpec::cnn(cifar(), 10);
        for (k, extra) in [(3, 2_432), (5, 6_528), (7, 12_672)] {
            let spec = base.clone().with_privacy(PrivacyModuleSpec::cvb(1, k, 0.5, 0.1));
            let layout = spec.layout().unwrap();
            assert_eq!(layout.len(), 11);
            assert!(layout[2..5].iter().all(|s| s.kind == ParamKind::Weight));
            assert_eq!(count_parameters(&spec).unwrap() - 65_962, extra);
        }
    }

    #[test]
    fn invalid_geometry_is_rejected() {
        let tiny = ModelSpec::cnn(InputShape::new(8, 8, 1), 10);
        assert!(matches!(tiny.layout(), Err(Error::InvalidSpec(_))));
        let bad = ModelSpec::cnn(cifar(), 10).with_privacy(PrivacyModuleSpec::cvb(3, 3, 0.5, 0.1));
        assert!(matches!(bad.layout(), Err(Error::InvalidSpec(_))));
        let missing = ModelSpec::cnn(cifar(), 10).with_privacy(PrivacyModuleSpec::precode(4, 8, 0.1));
        assert!(matches!(missing.layout(), Err(Error::InvalidSpec(_))));
    }

    #[test]
    fn mlp_layout_and_bias_flag() {
        let spec = ModelSpec::mlp(InputShape::new(32, 32, 1), 10);
        let points = spec.insertion_points().unwrap();
        assert_eq!(points.len(), 4);
        assert!(points.iter().all(|(_, s)| s == &vec![1024]));
        let no_bias = spec.clone().with_dense_bias(false);
        assert!(no_bias.layout().unwrap().iter().all(|s| s.role != LayerRole::Dense || s.kind == ParamKind::Weight));
    }

    #[test]
    fn build_is_deterministic() {
        let spec = ModelSpec::cnn(cifar(), 10).with_privacy(PrivacyModuleSpec::precode(3, 32, 0.01));
        let a = build_model::<f32>(&spec, 5).unwrap();
        let b = build_model::<f32>(&spec, 5).unwrap();
        assert_eq!(a, b);
        let c = build_model::<f32>(&spec, 6).unwrap();
        assert_ne!(a.params, c.params);
        assert_eq!(a.num_params(), count_parameters(&spec).unwrap());
    }

    #[test]
    fn forward_shapes() {
        let spec = ModelSpec::cnn(cifar(), 10).with_privacy(PrivacyModuleSpec::cvb(1, 5, 0.5, 0.1));
        let state = build_model::<f64>(&spec, 1).unwrap();
        let mut g = Graph::new();
        let params: Vec<Var> = state.params.iter().map(|p| g.leaf(p.clone())).collect();
        let x = g.leaf(RandomStream::new(2).normal_tensor(&[2, 3, 32, 32]));
        let noise = Noise::sample(&spec, 2, &mut RandomStream::new(3)).unwrap();
        let pass = build_forward(&mut g, &state, &params, x, &noise, BnMode::Train).unwrap();
        assert_eq!(g.shape(pass.logits), &[2, 10]);
        let shapes: Vec<_> = pass.latents.iter().map(|(_, v)| g.shape(*v).to_vec()).collect();
        assert_eq!(shapes, vec![vec![2, 16, 14, 14], vec![2, 32, 5, 5], vec![2, 64, 1, 1]]);
        assert_eq!(g.shape(pass.stats[0].0.mu), &[2, 8, 14, 14]);
    }

    #[test]
    fn batch_norm_train_mode_normalizes() {
        let spec = ModelSpec::mlp(InputShape::new(2, 2, 1), 3).with_hidden(vec![5]);
        let state = build_model::<f64>(&spec, 1).unwrap();
        let mut g = Graph::new();
        let params: Vec<Var> = state.params.iter().map(|p| g.leaf(p.clone())).collect();
        let x = g.leaf(RandomStream::new(4).normal_tensor(&[6, 1, 2, 2]));
        let pass = build_forward(&mut g, &state, &params, x, &Noise::none(), BnMode::Train).unwrap();
        assert_eq!(pass.batch_stats.len(), 1);
        // Pre-ReLU values are standardized, so each column has at least one
        // positive and one zeroed entry.
        let h = g.value(pass.latents[0].1);
        for j in 0..5 {
            let col: Vec<f64> = (0..6).map(|i| h.data()[i * 5 + j]).collect();
            assert!(col.iter().any(|&v| v > 0.0) && col.contains(&0.0));
        }
    }
}
