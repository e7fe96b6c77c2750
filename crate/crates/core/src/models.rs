//! ML-CSC-Net classifiers, the TL-WSEBP block, the WSEBP-VGG13 skeleton,
//! and the training/evaluation loops.
//!
//! Every pursuit is recorded on a [`Tape`] with the same operation order as
//! the solvers in [`crate::pursuit`], so tape forwards reproduce solver
//! outputs bit for bit.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::conv::{self, ConvDictionary, ConvGeometry};
use crate::data::{parse_key_values, read_tensor_file, write_tensor_file, write_text, Dataset};
use crate::error::{Error, Result};
use crate::grad::{ParamSet, Tape, Var};
use crate::pursuit::{
    wsebp_forward, AnchorPolicy, Layer, LayerParams, MlcscModel, Pursuit, Shrinkage, MIN_BETA,
};
use crate::tensor::Tensor;

/// How β is set when a net is built for training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BetaInit {
    /// β = 1.
    One,
    /// β = power-iteration bound on Dᵢᵀ Dᵢ.
    #[default]
    Spectral,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetConfig {
    /// Atoms per layer, m₁ … m_L.
    pub channels: Vec<usize>,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    /// `[c, h, w]`.
    pub input_shape: [usize; 3],
    pub num_classes: usize,
    pub pursuit: Pursuit,
    #[serde(default = "relu")]
    pub shrinkage: Shrinkage,
    #[serde(default)]
    pub beta_init: BetaInit,
    /// When false, β keeps its initial value during training.
    #[serde(default = "yes")]
    pub learn_beta: bool,
}

fn relu() -> Shrinkage {
    Shrinkage::Relu
}

fn yes() -> bool {
    true
}

impl NetConfig {
    fn preset(channels: &[usize], hw: usize, classes: usize) -> NetConfig {
        NetConfig {
            channels: channels.to_vec(),
            kernel: 4,
            stride: 2,
            padding: 1,
            input_shape: [3, hw, hw],
            num_classes: classes,
            pursuit: Pursuit::Wsebp {
                anchor: AnchorPolicy::Analysis,
            },
            shrinkage: Shrinkage::Relu,
            beta_init: BetaInit::Spectral,
            learn_beta: true,
        }
    }

    pub fn cifar10() -> NetConfig {
        Self::preset(&[16, 32, 64, 128], 32, 10)
    }

    pub fn cifar100() -> NetConfig {
        Self::preset(&[16, 32, 64], 32, 100)
    }

    pub fn covid19() -> NetConfig {
        Self::preset(&[32, 64, 128, 256], 64, 4)
    }

    pub fn crack() -> NetConfig {
        Self::preset(&[8, 16, 32], 64, 2)
    }

    /// Two-layer net on 8×8 inputs used for gradient checks.
    pub fn desk() -> NetConfig {
        NetConfig {
            input_shape: [3, 8, 8],
            ..Self::preset(&[8, 16], 8, 3)
        }
    }

    pub fn by_name(name: &str) -> Result<NetConfig> {
        match name {
            "cifar10" => Ok(Self::cifar10()),
            "cifar100" => Ok(Self::cifar100()),
            "covid19" => Ok(Self::covid19()),
            "crack" => Ok(Self::crack()),
            "desk" => Ok(Self::desk()),
            other => Err(Error::Config(format!("unknown preset '{other}'"))),
        }
    }

    pub fn with_pursuit(mut self, pursuit: Pursuit) -> Self {
        self.pursuit = pursuit;
        self
    }

    pub fn geometries(&self) -> Vec<ConvGeometry> {
        let mut prev = self.input_shape[0];
        self.channels
            .iter()
            .map(|&m| {
                let g = ConvGeometry::new(prev, m, self.kernel, self.stride, self.padding);
                prev = m;
                g
            })
            .collect()
    }

    /// `[c, h, w]` of every representation Γ₁ … Γ_L.
    pub fn code_shapes(&self) -> Result<Vec<[usize; 3]>> {
        self.validate()?;
        let mut shape = self.input_shape;
        self.geometries()
            .iter()
            .map(|g| {
                shape = g.code_shape(&shape)?;
                Ok(shape)
            })
            .collect()
    }

    pub fn feature_dim(&self) -> Result<usize> {
        Ok(self.code_shapes()?.last().unwrap().iter().product())
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels.is_empty() || self.channels.contains(&0) {
            return Err(Error::Config(
                "layer channels must be nonempty and positive".into(),
            ));
        }
        if self.input_shape.contains(&0) {
            return Err(Error::Config("input shape must be positive".into()));
        }
        if self.num_classes < 2 {
            return Err(Error::Config("need at least two classes".into()));
        }
        let mut shape = self.input_shape;
        for (i, g) in self.geometries().iter().enumerate() {
            g.validate()?;
            shape = g.code_shape(&shape).map_err(|e| {
                Error::Dimension(format!("spatial size collapses at layer {}: {e}", i + 1))
            })?;
        }
        if let Pursuit::Wsebp {
            anchor: AnchorPolicy::Literal,
        } = self.pursuit
        {
            let first = self.geometries()[0].code_shape(&self.input_shape)?;
            if first != self.input_shape {
                return Err(Error::Config(format!(
                    "literal anchor needs layer-1 codes {first:?} shaped like the input {:?}",
                    self.input_shape
                )));
            }
        }
        Ok(())
    }
}

/// Fully connected layer `logits = W·f + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierHead {
    /// `[classes, features]`
    pub weight: Tensor,
    /// `[classes]`
    pub bias: Tensor,
}

impl ClassifierHead {
    pub fn random<R: Rng + ?Sized>(classes: usize, features: usize, rng: &mut R) -> ClassifierHead {
        ClassifierHead {
            weight: Tensor::randn(&[classes, features], (1.0 / features as f64).sqrt(), rng),
            bias: Tensor::zeros(&[classes]),
        }
    }

    pub fn classes(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn features(&self) -> usize {
        self.weight.shape()[1]
    }

    /// Logits `[n, classes]` for features `[n, …]`.
    pub fn apply(&self, features: &Tensor) -> Result<Tensor> {
        let n = features.shape()[0];
        let f = features.len() / n;
        if f != self.features() {
            return Err(Error::Dimension(format!(
                "head expects {} features, got {f}",
                self.features()
            )));
        }
        let t = self.classes();
        let mut out = vec![0.0; n * t];
        conv::gemm(
            n,
            f,
            t,
            features.data(),
            false,
            self.weight.data(),
            true,
            &mut out,
            false,
        );
        for row in out.chunks_mut(t) {
            for (o, b) in row.iter_mut().zip(self.bias.data()) {
                *o += b;
            }
        }
        Ok(Tensor::from_parts(vec![n, t], out))
    }
}

/// ML-CSC encoder followed by a classifier head.
#[derive(Debug, Clone, PartialEq)]
pub struct Net {
    pub config: NetConfig,
    pub model: MlcscModel,
    pub head: ClassifierHead,
}

/// Random dictionaries (He init), ξ = 0, β = 1, Gaussian head with zero bias.
pub fn build_mlcsc_net<R: Rng + ?Sized>(config: &NetConfig, rng: &mut R) -> Result<Net> {
    config.validate()?;
    let layers = config
        .geometries()
        .into_iter()
        .map(|g| {
            Ok(Layer {
                params: LayerParams::neutral(g.atoms),
                dict: ConvDictionary::random(g, rng)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let model = MlcscModel::new(layers)?.with_shrinkage(config.shrinkage);
    let head = ClassifierHead::random(config.num_classes, config.feature_dim()?, rng);
    Ok(Net {
        config: config.clone(),
        model,
        head,
    })
}

impl Net {
    /// Parameters named `layerN.weight|xi|beta`, `head.weight`, `head.bias`.
    pub fn params(&self) -> ParamSet {
        let mut p = ParamSet::new();
        for (i, l) in self.model.layers().iter().enumerate() {
            p.push(format!("layer{}.weight", i + 1), l.dict.weights().clone());
            p.push(
                format!("layer{}.xi", i + 1),
                Tensor::from_vec(l.params.xi.clone()),
            );
            p.push(
                format!("layer{}.beta", i + 1),
                Tensor::scalar(l.params.beta),
            );
        }
        p.push("head.weight", self.head.weight.clone());
        p.push("head.bias", self.head.bias.clone());
        p
    }

    pub fn set_params(&mut self, p: &ParamSet) -> Result<()> {
        let expected = self.params();
        if p.names() != expected.names() {
            return Err(Error::Format(format!(
                "parameter names {:?} do not match the net {:?}",
                p.names(),
                expected.names()
            )));
        }
        for (a, b) in p.values().iter().zip(expected.values()) {
            a.same_shape(b)?;
        }
        let v = p.values();
        for i in 0..self.model.depth() {
            let layer = self.model.layer_mut(i);
            layer.dict.set_weights(v[3 * i].clone())?;
            layer.params = LayerParams::new(v[3 * i + 1].data().to_vec(), v[3 * i + 2].data()[0])?;
        }
        let k = 3 * self.model.depth();
        self.head.weight = v[k].clone();
        self.head.bias = v[k + 1].clone();
        Ok(())
    }

    /// Sets every β to the spectral bound of its layer's Dᵀ D.
    pub fn init_beta_from_spectrum(&mut self) -> Result<()> {
        self.model
            .set_beta_from_spectrum(&self.config.input_shape, 100, 1e-6)
    }

    /// Pursuit forward, flatten, affine head. `batch` is `[n, c, h, w]`.
    pub fn forward_classify(&self, batch: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let vars = self.params().record(&mut tape);
        let x = tape.leaf(batch.clone());
        let logits = record_logits(&mut tape, &self.config, &vars, x)?;
        Ok(tape.value(logits).clone())
    }

    /// Representations Γ₁ … Γ_L of a batch as computed on the tape.
    pub fn encode(&self, batch: &Tensor) -> Result<Vec<Tensor>> {
        let mut tape = Tape::new();
        let vars = self.params().record(&mut tape);
        let x = tape.leaf(batch.clone());
        let reps = record_encoder(&mut tape, &self.config, &vars, x)?;
        Ok(reps.iter().map(|&v| tape.value(v).clone()).collect())
    }
}

/// Total scalar count: dictionaries, ξ, β, head weights and bias.
pub fn param_count(net: &Net) -> usize {
    net.params().scalar_count()
}

/// Count for a config without materializing weights.
pub fn config_param_count(config: &NetConfig) -> Result<usize> {
    config.validate()?;
    let conv: usize = config
        .geometries()
        .iter()
        .map(|g| g.weight_count() + g.atoms + 1)
        .sum();
    let features = config.feature_dim()?;
    Ok(conv + config.num_classes * (features + 1))
}

fn hw(tape: &Tape, v: Var) -> (usize, usize) {
    let s = tape.value(v).shape();
    (s[2], s[3])
}

struct LayerVars {
    w: Var,
    xi: Var,
    beta: Var,
    geom: ConvGeometry,
}

fn layer_vars(config: &NetConfig, vars: &[Var]) -> Result<Vec<LayerVars>> {
    let geoms = config.geometries();
    if vars.len() != 3 * geoms.len() + 2 {
        return Err(Error::Dimension(format!(
            "{} parameter handles for a {}-layer net",
            vars.len(),
            geoms.len()
        )));
    }
    Ok(geoms
        .into_iter()
        .enumerate()
        .map(|(i, geom)| LayerVars {
            w: vars[3 * i],
            xi: vars[3 * i + 1],
            beta: vars[3 * i + 2],
            geom,
        })
        .collect())
}

fn shrink(tape: &mut Tape, s: Shrinkage, z: Var, xi: Var) -> Result<Var> {
    match s {
        Shrinkage::Soft => tape.soft_threshold(z, xi),
        Shrinkage::Relu => {
            let b = tape.bias_add(z, xi)?;
            Ok(tape.relu(b))
        }
    }
}

fn lta_layer(tape: &mut Tape, l: &LayerVars, prev: Var) -> Result<Var> {
    let a = tape.analyze(l.w, prev, l.geom)?;
    let b = tape.bias_add(a, l.xi)?;
    Ok(tape.relu(b))
}

fn threshold_pass(tape: &mut Tape, s: Shrinkage, l: &LayerVars, prev: Var) -> Result<Var> {
    let a = tape.analyze(l.w, prev, l.geom)?;
    shrink(tape, s, a, l.xi)
}

fn ista_step(tape: &mut Tape, s: Shrinkage, l: &LayerVars, gamma: Var, target: Var) -> Result<Var> {
    let synth = tape.synthesize(l.w, gamma, l.geom, hw(tape, target))?;
    let residual = tape.sub(synth, target)?;
    let grad = tape.analyze(l.w, residual, l.geom)?;
    let step = tape.inv_scale(grad, l.beta)?;
    let z = tape.sub(gamma, step)?;
    shrink(tape, s, z, l.xi)
}

/// Z + α·Dᵀ(prev − D·Z) followed by ReLU(· + ξ).
fn wsebp_layer(
    tape: &mut Tape,
    l: &LayerVars,
    prev: Var,
    x: Var,
    anchor: AnchorPolicy,
) -> Result<Var> {
    let analysis = tape.analyze(l.w, prev, l.geom)?;
    let pre = match anchor {
        AnchorPolicy::Zero => tape.inv_scale(analysis, l.beta)?,
        AnchorPolicy::Analysis | AnchorPolicy::Literal => {
            let z = if anchor == AnchorPolicy::Analysis {
                analysis
            } else {
                x
            };
            if tape.value(z).shape() != tape.value(analysis).shape() {
                return Err(Error::Dimension(format!(
                    "literal anchor: input {:?} does not match codes {:?}",
                    tape.value(z).shape(),
                    tape.value(analysis).shape()
                )));
            }
            let synth = tape.synthesize(l.w, z, l.geom, hw(tape, prev))?;
            let residual = tape.sub(prev, synth)?;
            let corr = tape.analyze(l.w, residual, l.geom)?;
            let scaled = tape.inv_scale(corr, l.beta)?;
            tape.add(z, scaled)?
        }
    };
    let b = tape.bias_add(pre, l.xi)?;
    Ok(tape.relu(b))
}

/// Records the configured pursuit on `x` (`[n, c, h, w]`) and returns
/// handles to Γ₁ … Γ_L.
pub fn record_encoder(
    tape: &mut Tape,
    config: &NetConfig,
    vars: &[Var],
    x: Var,
) -> Result<Vec<Var>> {
    let layers = layer_vars(config, vars)?;
    let s = config.shrinkage;
    let mut reps: Vec<Var> = Vec::with_capacity(layers.len());
    match config.pursuit {
        Pursuit::Lta => {
            for l in &layers {
                let prev = reps.last().copied().unwrap_or(x);
                reps.push(lta_layer(tape, l, prev)?);
            }
        }
        Pursuit::Lbp { iters } => {
            for l in &layers {
                let prev = reps.last().copied().unwrap_or(x);
                let mut g = threshold_pass(tape, s, l, prev)?;
                for _ in 0..iters {
                    g = ista_step(tape, s, l, g, prev)?;
                }
                reps.push(g);
            }
        }
        Pursuit::MlIsta { iters } => {
            for l in &layers {
                let prev = reps.last().copied().unwrap_or(x);
                reps.push(threshold_pass(tape, s, l, prev)?);
            }
            let depth = layers.len();
            for _ in 0..iters {
                let mut hats = vec![reps[depth - 1]; depth];
                for i in (0..depth - 1).rev() {
                    let size = hw(tape, reps[i]);
                    let l = &layers[i + 1];
                    hats[i] = tape.synthesize(l.w, hats[i + 1], l.geom, size)?;
                }
                for i in 0..depth {
                    let prev = if i == 0 { x } else { reps[i - 1] };
                    reps[i] = ista_step(tape, s, &layers[i], hats[i], prev)?;
                }
            }
        }
        Pursuit::Wsebp { anchor } => {
            for l in &layers {
                let prev = reps.last().copied().unwrap_or(x);
                reps.push(wsebp_layer(tape, l, prev, x, anchor)?);
            }
        }
    }
    Ok(reps)
}

/// Encoder, flatten and affine head; returns the logits handle.
pub fn record_logits(tape: &mut Tape, config: &NetConfig, vars: &[Var], x: Var) -> Result<Var> {
    let reps = record_encoder(tape, config, vars, x)?;
    let flat = tape.flatten(*reps.last().unwrap())?;
    let k = vars.len();
    tape.affine(flat, vars[k - 2], vars[k - 1])
}

/// Mean cross-entropy of a labelled batch; returns `(logits, loss)` handles.
pub fn record_loss(
    tape: &mut Tape,
    config: &NetConfig,
    vars: &[Var],
    x: Var,
    labels: &[usize],
) -> Result<(Var, Var)> {
    let logits = record_logits(tape, config, vars, x)?;
    let loss = tape.softmax_cross_entropy(logits, labels)?;
    Ok((logits, loss))
}

/// Two-layer WSEBP unit (3×3, stride 1, padding 1) replacing a pair of
/// stacked convolutions.
#[derive(Debug, Clone, PartialEq)]
pub struct TlWsebpBlock {
    pub model: MlcscModel,
    pub anchor: AnchorPolicy,
}

impl TlWsebpBlock {
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(wsebp_forward(&self.model, x, self.anchor)?
            .representations
            .pop()
            .unwrap())
    }
}

pub fn build_tl_wsebp_block<R: Rng + ?Sized>(
    in_channels: usize,
    out_channels: usize,
    kernel: usize,
    anchor: AnchorPolicy,
    rng: &mut R,
) -> Result<TlWsebpBlock> {
    if in_channels == 0 || out_channels == 0 {
        return Err(Error::Parameter("block channels must be positive".into()));
    }
    if kernel.is_multiple_of(2) {
        return Err(Error::Parameter(
            "block kernel must be odd to preserve size".into(),
        ));
    }
    let model = MlcscModel::random(
        &[in_channels, out_channels, out_channels],
        kernel,
        1,
        kernel / 2,
        rng,
    )?
    .with_shrinkage(Shrinkage::Relu);
    Ok(TlWsebpBlock { model, anchor })
}

/// VGG13 with each two-conv stage replaced by a TL-WSEBP block, 2×2 max
/// pooling after every stage, and a fully connected head.
#[derive(Debug, Clone, PartialEq)]
pub struct WsebpVgg13 {
    pub stages: Vec<TlWsebpBlock>,
    pub head: ClassifierHead,
}

pub const VGG13_STAGES: [usize; 5] = [64, 128, 256, 512, 512];

pub fn build_wsebp_vgg13<R: Rng + ?Sized>(num_classes: usize, rng: &mut R) -> Result<WsebpVgg13> {
    let mut prev = 3;
    let mut stages = Vec::with_capacity(VGG13_STAGES.len());
    for &c in &VGG13_STAGES {
        stages.push(build_tl_wsebp_block(
            prev,
            c,
            3,
            AnchorPolicy::Analysis,
            rng,
        )?);
        prev = c;
    }
    // 32×32 input pooled five times leaves 1×1.
    let head = ClassifierHead::random(num_classes, prev, rng);
    Ok(WsebpVgg13 { stages, head })
}

impl WsebpVgg13 {
    pub fn set_anchor(&mut self, anchor: AnchorPolicy) {
        for s in &mut self.stages {
            s.anchor = anchor;
        }
    }

    /// Logits `[n, classes]` for a batch `[n, 3, 32, 32]`.
    pub fn forward(&self, batch: &Tensor) -> Result<Tensor> {
        let mut x = batch.clone();
        for s in &self.stages {
            x = max_pool2(&s.forward(&x)?)?;
        }
        self.head.apply(&x)
    }

    pub fn param_count(&self) -> usize {
        let conv: usize = self
            .stages
            .iter()
            .flat_map(|s| s.model.layers())
            .map(|l| l.dict.weights().len() + l.params.xi.len() + 1)
            .sum();
        conv + self.head.weight.len() + self.head.bias.len()
    }
}

/// 2×2 max pooling with stride 2 over `[n, c, h, w]` (odd edges dropped).
pub fn max_pool2(x: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = match x.shape() {
        [n, c, h, w] => (*n, *c, *h, *w),
        s => {
            return Err(Error::Dimension(format!(
                "max_pool2 needs [n, c, h, w], got {s:?}"
            )))
        }
    };
    let (oh, ow) = (h / 2, w / 2);
    if oh == 0 || ow == 0 {
        return Err(Error::Dimension(format!("cannot pool a {h}x{w} map")));
    }
    let src = x.data();
    let mut out = Vec::with_capacity(n * c * oh * ow);
    for plane in src.chunks(h * w) {
        for i in 0..oh {
            for j in 0..ow {
                let at = |di: usize, dj: usize| plane[(2 * i + di) * w + 2 * j + dj];
                out.push(at(0, 0).max(at(0, 1)).max(at(1, 0)).max(at(1, 1)));
            }
        }
    }
    Ok(Tensor::from_parts(vec![n, c, oh, ow], out))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Epochs at which the learning rate is multiplied by `gamma`.
    pub milestones: Vec<usize>,
    pub gamma: f64,
    pub seed: u64,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config("momentum must lie in [0, 1)".into()));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::Config(
                "batch size and epochs must be positive".into(),
            ));
        }
        if self.milestones.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config(
                "milestones must be strictly increasing".into(),
            ));
        }
        if !(self.gamma > 0.0) {
            return Err(Error::Config("decay factor must be positive".into()));
        }
        Ok(())
    }

    /// Learning rate in effect during `epoch` (0-based).
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let passed = self.milestones.iter().filter(|&&m| m <= epoch).count();
        self.lr * self.gamma.powi(passed as i32)
    }
}

/// SGD with momentum: v ← μv + g, w ← w − lr·v.
#[derive(Debug, Clone, PartialEq)]
pub struct Sgd {
    pub momentum: f64,
    velocity: Vec<Tensor>,
}

impl Sgd {
    pub fn new(params: &ParamSet, momentum: f64) -> Sgd {
        Sgd {
            momentum,
            velocity: params
                .values()
                .iter()
                .map(|v| Tensor::zeros(v.shape()))
                .collect(),
        }
    }

    /// Updates every parameter whose `frozen` flag is false.
    pub fn step(
        &mut self,
        params: &mut ParamSet,
        grads: &[Tensor],
        lr: f64,
        frozen: &[bool],
    ) -> Result<()> {
        for (i, (p, g)) in params.values_mut().iter_mut().zip(grads).enumerate() {
            if frozen.get(i).copied().unwrap_or(false) {
                continue;
            }
            let v = &mut self.velocity[i];
            for (vv, gg) in v.data_mut().iter_mut().zip(g.data()) {
                *vv = self.momentum * *vv + gg;
            }
            p.axpy(-lr, v)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochMetrics {
    pub mean_loss: f64,
    pub accuracy: f64,
    pub lr: f64,
}

/// Per-epoch shuffle; depends only on the seed and epoch index.
pub fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng =
        ChaCha8Rng::seed_from_u64(seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    order.shuffle(&mut rng);
    order
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// One epoch of mini-batch SGD over a seeded shuffle of `data`.
pub fn train_epoch(
    net: &mut Net,
    opt: &mut Sgd,
    data: &Dataset,
    cfg: &TrainConfig,
    epoch: usize,
) -> Result<EpochMetrics> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Input("empty training set".into()));
    }
    let lr = cfg.lr_at(epoch);
    let mut params = net.params();
    let frozen: Vec<bool> = params
        .names()
        .iter()
        .map(|n| n.ends_with(".beta") && !net.config.learn_beta)
        .collect();
    let order = epoch_order(data.len(), cfg.seed, epoch);
    let (mut loss_sum, mut correct) = (0.0, 0usize);
    for (b, idx) in order.chunks(cfg.batch_size).enumerate() {
        let x = data.images.select_outer(idx)?;
        let labels: Vec<usize> = idx.iter().map(|&i| data.labels[i]).collect();
        let mut tape = Tape::new();
        let vars = params.record(&mut tape);
        let xv = tape.leaf(x);
        let (logits, loss) = record_loss(&mut tape, &net.config, &vars, xv, &labels)?;
        let loss_value = tape.value(loss).data()[0];
        for (row, &y) in tape
            .value(logits)
            .data()
            .chunks(net.config.num_classes)
            .zip(&labels)
        {
            correct += (argmax(row) == y) as usize;
        }
        let grads = tape.backward(loss, &Tensor::scalar(1.0))?;
        drop(tape);
        let grads: Vec<Tensor> = vars
            .iter()
            .zip(params.values())
            .map(|(v, p)| grads.get_or_zeros(*v, p))
            .collect();
        let max_grad = grads.iter().fold(0.0f64, |m, g| {
            g.data().iter().fold(m, |m, v| {
                if v.is_finite() {
                    m.max(v.abs())
                } else {
                    f64::INFINITY
                }
            })
        });
        if !loss_value.is_finite() || !max_grad.is_finite() {
            return Err(Error::NonFinite { batch: b, max_grad });
        }
        loss_sum += loss_value * idx.len() as f64;
        opt.step(&mut params, &grads, lr, &frozen)?;
        project(&mut params, net.config.shrinkage);
        if !net.config.learn_beta {
            // fixed β tracks the bound of the updated weights
            net.set_params(&params)?;
            net.init_beta_from_spectrum()?;
            params = net.params();
        }
    }
    net.set_params(&params)?;
    Ok(EpochMetrics {
        mean_loss: loss_sum / data.len() as f64,
        accuracy: correct as f64 / data.len() as f64,
        lr,
    })
}

/// Keeps β ≥ [`MIN_BETA`] and, under soft shrinkage, ξ ≥ 0.
fn project(params: &mut ParamSet, shrinkage: Shrinkage) {
    let names = params.names().to_vec();
    for (name, v) in names.iter().zip(params.values_mut()) {
        if name.ends_with(".beta") {
            v.data_mut().iter_mut().for_each(|b| *b = b.max(MIN_BETA));
        } else if name.ends_with(".xi") && shrinkage == Shrinkage::Soft {
            v.data_mut().iter_mut().for_each(|x| *x = x.max(0.0));
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalResult {
    pub accuracy: f64,
    pub correct: usize,
    pub total: usize,
    pub per_class_correct: Vec<usize>,
    pub per_class_total: Vec<usize>,
}

/// Accuracy of argmax predictions (ties go to the lowest class index).
pub fn evaluate(net: &Net, data: &Dataset, batch_size: usize) -> Result<EvalResult> {
    if data.is_empty() {
        return Err(Error::Input("empty evaluation set".into()));
    }
    let mut preds = Vec::with_capacity(data.len());
    let all: Vec<usize> = (0..data.len()).collect();
    for idx in all.chunks(batch_size.max(1)) {
        let logits = net.forward_classify(&data.images.select_outer(idx)?)?;
        preds.extend(logits.data().chunks(net.config.num_classes).map(argmax));
    }
    Ok(score(&preds, &data.labels, data.classes))
}

/// Accuracy of logits `[n, classes]` against labels.
pub fn evaluate_logits(logits: &Tensor, labels: &[usize]) -> Result<EvalResult> {
    let t = match logits.shape() {
        [n, t] if *n == labels.len() => *t,
        s => {
            return Err(Error::Dimension(format!(
                "logits {s:?} for {} labels",
                labels.len()
            )))
        }
    };
    if labels.is_empty() {
        return Err(Error::Input("empty evaluation set".into()));
    }
    let preds: Vec<usize> = logits.data().chunks(t).map(argmax).collect();
    Ok(score(&preds, labels, t))
}

fn score(preds: &[usize], labels: &[usize], classes: usize) -> EvalResult {
    let mut per_class_correct = vec![0; classes];
    let mut per_class_total = vec![0; classes];
    for (&p, &y) in preds.iter().zip(labels) {
        per_class_total[y] += 1;
        if p == y {
            per_class_correct[y] += 1;
        }
    }
    let correct: usize = per_class_correct.iter().sum();
    EvalResult {
        accuracy: correct as f64 / labels.len() as f64,
        correct,
        total: labels.len(),
        per_class_correct,
        per_class_total,
    }
}

const MANIFEST: &str = "manifest.txt";

/// Writes one tensor file per parameter plus a `key=value` manifest holding
/// the config and any extra entries (epoch, metric, …).
pub fn save_checkpoint(dir: impl AsRef<Path>, net: &Net, extra: &[(&str, String)]) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let params = net.params();
    for (name, value) in params.iter() {
        write_tensor_file(dir.join(format!("{name}.mlct")), value)?;
    }
    let config = serde_json::to_string(&net.config).map_err(|e| Error::Format(e.to_string()))?;
    let mut text = format!("config={config}\nparams={}\n", params.names().join(","));
    for (k, v) in extra {
        text.push_str(&format!("{k}={v}\n"));
    }
    write_text(&dir.join(MANIFEST), &text)
}

/// Loads a checkpoint; returns the net and the manifest entries.
pub fn load_checkpoint(dir: impl AsRef<Path>) -> Result<(Net, Vec<(String, String)>)> {
    let dir = dir.as_ref();
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let kv = parse_key_values(&text)?;
    let config_json = kv
        .iter()
        .find(|(k, _)| k == "config")
        .ok_or_else(|| Error::Format("manifest has no config".into()))?;
    let config: NetConfig =
        serde_json::from_str(&config_json.1).map_err(|e| Error::Format(e.to_string()))?;
    let mut net = build_mlcsc_net(&config, &mut ChaCha8Rng::seed_from_u64(0))?;
    let mut params = ParamSet::new();
    for name in net.params().names() {
        params.push(
            name.clone(),
            read_tensor_file(dir.join(format!("{name}.mlct")))?,
        );
    }
    net.set_params(&params)?;
    Ok((net, kv))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pursuit::mlista_forward;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn preset_param_counts() {
        assert_eq!(config_param_count(&NetConfig::cifar10()).unwrap(), 178_174);
        assert_eq!(config_param_count(&NetConfig::cifar100()).unwrap(), 144_343);
        assert_eq!(config_param_count(&NetConfig::covid19()).unwrap(), 706_536);
        assert_eq!(config_param_count(&NetConfig::crack()).unwrap(), 14_781);
        let net = build_mlcsc_net(&NetConfig::crack(), &mut rng(0)).unwrap();
        assert_eq!(param_count(&net), 14_781);
    }

    #[test]
    fn cifar10_code_shapes() {
        let shapes = NetConfig::cifar10().code_shapes().unwrap();
        assert_eq!(
            shapes,
            vec![[16, 16, 16], [32, 8, 8], [64, 4, 4], [128, 2, 2]]
        );
    }

    #[test]
    fn spatial_collapse_is_rejected() {
        let cfg = NetConfig {
            input_shape: [3, 4, 4],
            ..NetConfig::cifar10()
        };
        assert!(matches!(cfg.validate(), Err(Error::Dimension(_))));
    }

    #[test]
    fn zero_image_gives_head_bias() {
        let mut net = build_mlcsc_net(&NetConfig::desk(), &mut rng(1)).unwrap();
        net.head.bias = Tensor::from_vec(vec![0.5, -1.0, 2.0]);
        let logits = net.forward_classify(&Tensor::zeros(&[2, 3, 8, 8])).unwrap();
        assert_eq!(logits.data(), &[0.5, -1.0, 2.0, 0.5, -1.0, 2.0]);
    }

    #[test]
    fn tape_encoder_matches_pursuit_module() {
        let mut r = rng(2);
        let x = Tensor::randn(&[2, 3, 8, 8], 1.0, &mut r);
        for pursuit in [
            Pursuit::Lta,
            Pursuit::Lbp { iters: 3 },
            Pursuit::MlIsta { iters: 2 },
            Pursuit::Wsebp {
                anchor: AnchorPolicy::Zero,
            },
            Pursuit::Wsebp {
                anchor: AnchorPolicy::Analysis,
            },
        ] {
            for shrinkage in [Shrinkage::Relu, Shrinkage::Soft] {
                let cfg = NetConfig {
                    shrinkage,
                    ..NetConfig::desk().with_pursuit(pursuit)
                };
                let mut net = build_mlcsc_net(&cfg, &mut r).unwrap();
                net.model.set_beta(2.5);
                net.model.set_xi(0.05);
                let tape_reps = net.encode(&x).unwrap();
                let solver = pursuit.run(&net.model, &x).unwrap().representations;
                assert_eq!(tape_reps, solver, "{pursuit:?} {shrinkage:?}");
            }
        }
    }

    #[test]
    fn zero_budget_logits_agree() {
        let x = Tensor::randn(&[3, 3, 8, 8], 1.0, &mut rng(3));
        let base = build_mlcsc_net(&NetConfig::desk(), &mut rng(4)).unwrap();
        let logits = |p: Pursuit| {
            let mut n = base.clone();
            n.config.pursuit = p;
            n.forward_classify(&x).unwrap()
        };
        let lta = logits(Pursuit::Lta);
        assert_eq!(lta, logits(Pursuit::MlIsta { iters: 0 }));
        assert_eq!(lta, logits(Pursuit::Lbp { iters: 0 }));
        assert_eq!(
            lta,
            logits(Pursuit::Wsebp {
                anchor: AnchorPolicy::Zero
            })
        );
    }

    #[test]
    fn single_image_equals_batch_row() {
        let net = build_mlcsc_net(&NetConfig::desk(), &mut rng(5)).unwrap();
        let x = Tensor::randn(&[4, 3, 8, 8], 1.0, &mut rng(6));
        let all = net.forward_classify(&x).unwrap();
        for i in 0..4 {
            let one = net
                .forward_classify(&x.select_outer(&[i]).unwrap())
                .unwrap();
            assert_eq!(one.data(), &all.data()[3 * i..3 * i + 3]);
        }
    }

    #[test]
    fn tl_block_preserves_size_and_chains() {
        let mut r = rng(7);
        let block = build_tl_wsebp_block(3, 5, 3, AnchorPolicy::Analysis, &mut r).unwrap();
        let x = Tensor::randn(&[2, 3, 6, 6], 1.0, &mut r);
        let y = block.forward(&x).unwrap();
        assert_eq!(y.shape(), &[2, 5, 6, 6]);
        let first = MlcscModel::new(vec![block.model.layer(0).clone()]).unwrap();
        let second = MlcscModel::new(vec![block.model.layer(1).clone()]).unwrap();
        let g1 = wsebp_forward(&first, &x, AnchorPolicy::Analysis)
            .unwrap()
            .representations
            .pop()
            .unwrap();
        let g2 = wsebp_forward(&second, &g1, AnchorPolicy::Analysis)
            .unwrap()
            .representations
            .pop()
            .unwrap();
        assert_eq!(y, g2);
    }

    #[test]
    fn tl_block_zero_anchor_is_scaled_conv_relu() {
        let mut r = rng(8);
        let mut block = build_tl_wsebp_block(2, 4, 3, AnchorPolicy::Zero, &mut r).unwrap();
        block.model.set_beta(2.0);
        let x = Tensor::randn(&[1, 2, 5, 5], 1.0, &mut r);
        let mut expect = x.clone();
        for l in block.model.layers() {
            expect = l
                .dict
                .analyze(&expect)
                .unwrap()
                .scale(0.5)
                .map(|v| v.max(0.0));
        }
        assert_eq!(block.forward(&x).unwrap(), expect);
    }

    #[test]
    fn vgg13_forward_shape() {
        let mut r = rng(9);
        let vgg = build_wsebp_vgg13(10, &mut r).unwrap();
        assert_eq!(vgg.stages.len(), 5);
        let x = Tensor::randn(&[1, 3, 32, 32], 1.0, &mut r);
        assert_eq!(vgg.forward(&x).unwrap().shape(), &[1, 10]);
    }

    #[test]
    fn max_pool_picks_block_maxima() {
        let x = Tensor::new(
            vec![1, 1, 2, 4],
            vec![1.0, 5.0, -1.0, -2.0, 3.0, 2.0, -3.0, -0.5],
        )
        .unwrap();
        assert_eq!(max_pool2(&x).unwrap().data(), &[5.0, -0.5]);
    }

    #[test]
    fn plain_sgd_step() {
        let mut p = ParamSet::new();
        p.push("w", Tensor::scalar(2.0));
        let mut opt = Sgd::new(&p, 0.0);
        // ∇ ½‖w‖² = w
        let g = vec![p.values()[0].clone()];
        opt.step(&mut p, &g, 0.1, &[]).unwrap();
        assert!((p.values()[0].data()[0] - 1.8).abs() < 1e-15);
    }

    #[test]
    fn cifar10_schedule() {
        let cfg = TrainConfig {
            lr: 0.005,
            momentum: 0.9,
            batch_size: 128,
            epochs: 200,
            milestones: vec![100, 150],
            gamma: 0.2,
            seed: 0,
        };
        let close = |a: f64, b: f64| (a - b).abs() <= 1e-15;
        assert!(close(cfg.lr_at(99), 0.005));
        assert!(close(cfg.lr_at(100), 0.001));
        assert!(close(cfg.lr_at(150), 0.0002));
        let bad = TrainConfig {
            milestones: vec![100, 100],
            ..cfg
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn evaluation_tie_break_and_shift_invariance() {
        let logits = Tensor::new(vec![2, 3], vec![1.0, 1.0, 0.0, 0.0, 2.0, 2.0]).unwrap();
        let r = evaluate_logits(&logits, &[0, 1]).unwrap();
        assert_eq!(r.accuracy, 1.0);
        let shifted = evaluate_logits(&logits.map(|v| v + 7.0), &[0, 1]).unwrap();
        assert_eq!(r, shifted);
        assert!(evaluate_logits(&Tensor::zeros(&[1, 3]), &[]).is_err());
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let net = build_mlcsc_net(&NetConfig::desk(), &mut rng(10)).unwrap();
        save_checkpoint(dir.path(), &net, &[("epoch", "3".into())]).unwrap();
        let (loaded, kv) = load_checkpoint(dir.path()).unwrap();
        assert!(kv.contains(&("epoch".into(), "3".into())));
        for (a, b) in loaded.params().values().iter().zip(net.params().values()) {
            let rounded = b.map(|v| v as f32 as f64);
            assert_eq!(a, &rounded);
        }
    }

    #[test]
    fn mlista_net_matches_solver_with_budget() {
        let mut r = rng(11);
        let cfg = NetConfig::desk().with_pursuit(Pursuit::MlIsta { iters: 4 });
        let net = build_mlcsc_net(&cfg, &mut r).unwrap();
        let x = Tensor::randn(&[1, 3, 8, 8], 1.0, &mut r);
        assert_eq!(
            net.encode(&x).unwrap(),
            mlista_forward(&net.model, &x, 4).unwrap().representations
        );
    }
}
