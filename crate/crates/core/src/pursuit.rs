//! Forward pursuit solvers for multi-layer convolutional sparse coding.
//!
//! Every solver is a pure function of `(model, x)`. Inputs may be a single
//! signal `[c, h, w]` or a batch `[n, c, h, w]`; objective traces sum over
//! the batch.

use std::time::Instant;

use rand::Rng;

use crate::conv::{ConvDictionary, ConvGeometry};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Entries with magnitude above this count towards ‖γ‖₀.
pub const NONZERO_TOL: f64 = 1e-12;

/// Lower clamp for β.
pub const MIN_BETA: f64 = 1e-4;

/// Proximal step used inside LBP and ML-ISTA updates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Shrinkage {
    /// Two-sided soft threshold `S_ξ`; ξ is a nonnegative threshold.
    #[default]
    Soft,
    /// One-sided `ReLU(x + ξ)`; ξ is a bias, usually nonpositive.
    Relu,
}

/// Initial point of each WSEBP layer update.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnchorPolicy {
    /// Z = 0: the update collapses to a scaled thresholding pass.
    Zero,
    /// Z = Dᵢᵀ Γᵢ₋₁, the anchor that stays dimensionally valid across layers.
    #[default]
    Analysis,
    /// Z = x, only when the layer's code space has the shape of the input.
    Literal,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    /// Per-atom threshold or bias.
    pub xi: Vec<f64>,
    pub beta: f64,
}

impl LayerParams {
    pub fn new(xi: Vec<f64>, beta: f64) -> Result<Self> {
        let p = LayerParams { xi, beta };
        p.validate()?;
        Ok(p)
    }

    /// ξ = 0, β = 1.
    pub fn neutral(atoms: usize) -> Self {
        LayerParams {
            xi: vec![0.0; atoms],
            beta: 1.0,
        }
    }

    pub fn alpha(&self) -> f64 {
        1.0 / self.beta
    }

    fn validate(&self) -> Result<()> {
        if !(self.beta > 0.0) || !self.beta.is_finite() {
            return Err(Error::Parameter(format!(
                "beta must be positive, got {}",
                self.beta
            )));
        }
        if self.xi.iter().any(|v| !v.is_finite()) {
            return Err(Error::Parameter("xi must be finite".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub dict: ConvDictionary,
    pub params: LayerParams,
}

/// An ordered stack of layers with chained channel counts.
#[derive(Debug, Clone, PartialEq)]
pub struct MlcscModel {
    layers: Vec<Layer>,
    shrinkage: Shrinkage,
}

impl MlcscModel {
    pub fn new(layers: Vec<Layer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Parameter("a model needs at least one layer".into()));
        }
        for (i, layer) in layers.iter().enumerate() {
            layer.params.validate()?;
            if layer.params.xi.len() != layer.dict.atoms() {
                return Err(Error::Dimension(format!(
                    "layer {}: xi has {} entries for {} atoms",
                    i + 1,
                    layer.params.xi.len(),
                    layer.dict.atoms()
                )));
            }
        }
        for (i, pair) in layers.windows(2).enumerate() {
            if pair[0].dict.atoms() != pair[1].dict.in_channels() {
                return Err(Error::Dimension(format!(
                    "layer {} has {} atoms but layer {} expects {} channels",
                    i + 1,
                    pair[0].dict.atoms(),
                    i + 2,
                    pair[1].dict.in_channels()
                )));
            }
        }
        Ok(MlcscModel {
            layers,
            shrinkage: Shrinkage::default(),
        })
    }

    /// Random dictionaries for `channels = [c₀, m₁, …, m_L]` sharing one
    /// geometry, with ξ = 0 and β = 1.
    pub fn random<R: Rng + ?Sized>(
        channels: &[usize],
        kernel: usize,
        stride: usize,
        padding: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if channels.len() < 2 {
            return Err(Error::Parameter(
                "channel plan needs at least two entries".into(),
            ));
        }
        let layers = channels
            .windows(2)
            .map(|w| {
                let dict = ConvDictionary::random(
                    ConvGeometry::new(w[0], w[1], kernel, stride, padding),
                    rng,
                )?;
                Ok(Layer {
                    params: LayerParams::neutral(w[1]),
                    dict,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        MlcscModel::new(layers)
    }

    pub fn with_shrinkage(mut self, shrinkage: Shrinkage) -> Self {
        self.shrinkage = shrinkage;
        self
    }

    pub fn shrinkage(&self) -> Shrinkage {
        self.shrinkage
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layer(&self, i: usize) -> &Layer {
        &self.layers[i]
    }

    pub fn layer_mut(&mut self, i: usize) -> &mut Layer {
        &mut self.layers[i]
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn set_beta(&mut self, beta: f64) {
        for l in &mut self.layers {
            l.params.beta = beta;
        }
    }

    pub fn set_xi(&mut self, xi: f64) {
        for l in &mut self.layers {
            l.params.xi.iter_mut().for_each(|v| *v = xi);
        }
    }

    /// Sets every β to the power-iteration bound for a signal of `input_shape`.
    pub fn set_beta_from_spectrum(
        &mut self,
        input_shape: &[usize],
        max_iters: usize,
        tol: f64,
    ) -> Result<()> {
        let mut shape = input_shape.to_vec();
        for l in &mut self.layers {
            let est = l.dict.estimate_spectral_bound(&shape, max_iters, tol)?;
            l.params.beta = est.bound;
            shape = l.dict.geometry().code_shape(&shape)?.to_vec();
        }
        Ok(())
    }

    /// Per-layer representation shapes for a single signal of `input_shape`.
    pub fn code_shapes(&self, input_shape: &[usize]) -> Result<Vec<Vec<usize>>> {
        let mut shape = input_shape.to_vec();
        let mut out = Vec::with_capacity(self.depth());
        for l in &self.layers {
            shape = l.dict.geometry().code_shape(&shape)?.to_vec();
            out.push(shape.clone());
        }
        Ok(out)
    }

    /// λ weights per atom implied by ξ and β (ξ = λ/β).
    fn lambdas(&self, i: usize) -> Vec<f64> {
        let p = &self.layers[i].params;
        match self.shrinkage {
            Shrinkage::Soft => p.xi.iter().map(|x| x * p.beta).collect(),
            Shrinkage::Relu => p.xi.iter().map(|x| -x * p.beta).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PursuitResult {
    /// Γ₁ … Γ_L.
    pub representations: Vec<Tensor>,
    /// One objective value per update applied to each layer.
    pub objective_trace: Vec<Vec<f64>>,
    /// Wall-clock seconds spent in the solver.
    pub elapsed: f64,
}

impl PursuitResult {
    pub fn last(&self) -> &Tensor {
        self.representations.last().expect("at least one layer")
    }
}

/// Pursuit selection with an iteration budget.
///
/// For `Lbp` and `MlIsta` the budget counts iterations after the shared
/// zeroth (thresholding) pass, so `iters = 0` reproduces LTA for both.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(tag = "algorithm", rename_all = "snake_case")]
pub enum Pursuit {
    Lta,
    Lbp { iters: usize },
    MlIsta { iters: usize },
    Wsebp { anchor: AnchorPolicy },
}

impl Pursuit {
    pub fn name(&self) -> &'static str {
        match self {
            Pursuit::Lta => "LTA",
            Pursuit::Lbp { .. } => "LBP",
            Pursuit::MlIsta { .. } => "ML-ISTA",
            Pursuit::Wsebp { .. } => "WSEBP",
        }
    }

    pub fn run(&self, model: &MlcscModel, x: &Tensor) -> Result<PursuitResult> {
        match *self {
            Pursuit::Lta => lta_forward(model, x),
            Pursuit::Lbp { iters } => lbp_forward_warm(model, x, iters),
            Pursuit::MlIsta { iters } => mlista_forward(model, x, iters),
            Pursuit::Wsebp { anchor } => wsebp_forward(model, x, anchor),
        }
    }
}

/// `(outer, channels, inner)` view of a tensor for per-channel broadcasting.
pub(crate) fn channel_layout(shape: &[usize]) -> (usize, usize, usize) {
    match shape {
        [n] => (1, *n, 1),
        [c, s] => (1, *c, *s),
        [c, h, w] => (1, *c, h * w),
        [n, c, h, w] => (*n, *c, h * w),
        _ => unreachable!("tensor rank is 1..=4"),
    }
}

fn per_channel(x: &Tensor, v: &[f64], f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
    let (outer, channels, inner) = channel_layout(x.shape());
    if v.len() != 1 && v.len() != channels {
        return Err(Error::Dimension(format!(
            "per-channel parameter has {} entries for {} channels",
            v.len(),
            channels
        )));
    }
    let mut out = x.clone();
    let data = out.data_mut();
    for o in 0..outer {
        for c in 0..channels {
            let p = if v.len() == 1 { v[0] } else { v[c] };
            let base = (o * channels + c) * inner;
            for e in &mut data[base..base + inner] {
                *e = f(*e, p);
            }
        }
    }
    Ok(out)
}

/// `sign(x)·max(|x| − ξ, 0)` with ξ scalar (length 1) or per channel.
pub fn soft_threshold(x: &Tensor, xi: &[f64]) -> Result<Tensor> {
    if let Some(bad) = xi.iter().find(|v| !(**v >= 0.0)) {
        return Err(Error::Parameter(format!(
            "soft threshold must be nonnegative, got {bad}"
        )));
    }
    per_channel(x, xi, soft)
}

/// `max(x + b, 0)` with `b` scalar (length 1) or per channel.
pub fn shifted_relu(x: &Tensor, b: &[f64]) -> Result<Tensor> {
    per_channel(x, b, |v, b| (v + b).max(0.0))
}

#[inline]
pub(crate) fn soft(v: f64, t: f64) -> f64 {
    if v > t {
        v - t
    } else if v < -t {
        v + t
    } else {
        0.0
    }
}

fn shrink(model: &MlcscModel, z: &Tensor, xi: &[f64]) -> Result<Tensor> {
    match model.shrinkage {
        Shrinkage::Soft => soft_threshold(z, xi),
        Shrinkage::Relu => shifted_relu(z, xi),
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LayerObjective {
    /// ½‖u − Dγ‖² + λ‖γ‖₁
    pub value: f64,
    /// ‖γ‖₀ at tolerance [`NONZERO_TOL`].
    pub nonzeros: usize,
}

/// ½‖u − D·γ‖₂² + λ‖γ‖₁ for a scalar λ ≥ 0.
pub fn layer_objective(
    u: &Tensor,
    dict: &ConvDictionary,
    gamma: &Tensor,
    lambda: f64,
) -> Result<LayerObjective> {
    if !(lambda >= 0.0) {
        return Err(Error::Parameter(format!(
            "lambda must be nonnegative, got {lambda}"
        )));
    }
    weighted_objective(u, dict, gamma, &[lambda])
}

/// Objective with per-atom λ weights (length 1 or `atoms`).
pub fn weighted_objective(
    u: &Tensor,
    dict: &ConvDictionary,
    gamma: &Tensor,
    lambdas: &[f64],
) -> Result<LayerObjective> {
    let hw = signal_hw(u)?;
    let recon = dict.synthesize(gamma, Some(hw))?;
    let fit = 0.5 * u.sub(&recon)?.sq_norm();
    let (outer, channels, inner) = channel_layout(gamma.shape());
    if lambdas.len() != 1 && lambdas.len() != channels {
        return Err(Error::Dimension("lambda weights do not match atoms".into()));
    }
    let data = gamma.data();
    let mut penalty = 0.0;
    for o in 0..outer {
        for c in 0..channels {
            let lam = if lambdas.len() == 1 {
                lambdas[0]
            } else {
                lambdas[c]
            };
            let base = (o * channels + c) * inner;
            penalty += lam
                * data[base..base + inner]
                    .iter()
                    .map(|v| v.abs())
                    .sum::<f64>();
        }
    }
    Ok(LayerObjective {
        value: fit + penalty,
        nonzeros: gamma.count_nonzero(NONZERO_TOL),
    })
}

fn signal_hw(t: &Tensor) -> Result<(usize, usize)> {
    match t.shape() {
        [_, h, w] | [_, _, h, w] => Ok((*h, *w)),
        s => Err(Error::Dimension(format!(
            "expected an image or batch, got {s:?}"
        ))),
    }
}

fn channels_of(t: &Tensor) -> usize {
    match t.shape() {
        [_, c, _, _] => *c,
        s => s[0],
    }
}

fn check_input(model: &MlcscModel, x: &Tensor) -> Result<()> {
    x.check_finite()?;
    signal_hw(x)?;
    let expected = model.layers[0].dict.in_channels();
    if channels_of(x) != expected {
        return Err(Error::Dimension(format!(
            "input has {} channels, first layer expects {expected}",
            channels_of(x)
        )));
    }
    Ok(())
}

fn objective(model: &MlcscModel, i: usize, prev: &Tensor, gamma: &Tensor) -> Result<f64> {
    Ok(weighted_objective(prev, &model.layers[i].dict, gamma, &model.lambdas(i))?.value)
}

/// Layered thresholding: Γᵢ = ReLU(Dᵢᵀ Γᵢ₋₁ + ξᵢ).
pub fn lta_forward(model: &MlcscModel, x: &Tensor) -> Result<PursuitResult> {
    check_input(model, x)?;
    let start = Instant::now();
    let mut reps = Vec::with_capacity(model.depth());
    let mut trace = Vec::with_capacity(model.depth());
    let mut prev = x.clone();
    for (i, layer) in model.layers.iter().enumerate() {
        let g = shifted_relu(&layer.dict.analyze(&prev)?, &layer.params.xi)?;
        trace.push(vec![objective(model, i, &prev, &g)?]);
        prev = g.clone();
        reps.push(g);
    }
    Ok(PursuitResult {
        representations: reps,
        objective_trace: trace,
        elapsed: start.elapsed().as_secs_f64(),
    })
}

/// The zeroth pass shared by LBP and ML-ISTA budgets: thresholding of
/// Dᵢᵀ Γᵢ₋₁ with the model's shrinkage.
fn threshold_pass(model: &MlcscModel, i: usize, prev: &Tensor) -> Result<Tensor> {
    let layer = &model.layers[i];
    shrink(model, &layer.dict.analyze(prev)?, &layer.params.xi)
}

/// One proximal-gradient step Γ ← shrink(Γ − α Dᵀ(DΓ − target)).
fn ista_step(model: &MlcscModel, i: usize, gamma: &Tensor, target: &Tensor) -> Result<Tensor> {
    let layer = &model.layers[i];
    let alpha = layer.params.alpha();
    let residual = layer
        .dict
        .synthesize(gamma, Some(signal_hw(target)?))?
        .sub(target)?;
    let grad = layer.dict.analyze(&residual)?;
    let z = gamma.zip_map(&grad, |g, d| g - alpha * d)?;
    shrink(model, &z, &layer.params.xi)
}

/// First step from Γ⁰ = 0, i.e. shrink(α·Dᵀ target).
fn ista_first_step(model: &MlcscModel, i: usize, target: &Tensor) -> Result<Tensor> {
    let layer = &model.layers[i];
    let alpha = layer.params.alpha();
    let z = layer.dict.analyze(target)?.scale(alpha);
    shrink(model, &z, &layer.params.xi)
}

/// Layered basis pursuit: `iters` ISTA steps per layer from Γ⁰ = 0.
pub fn lbp_forward(model: &MlcscModel, x: &Tensor, iters: usize) -> Result<PursuitResult> {
    if iters < 1 {
        return Err(Error::Parameter("LBP needs at least one iteration".into()));
    }
    lbp_impl(model, x, iters, false)
}

/// LBP started from the thresholding pass, followed by `iters` ISTA steps.
/// With `iters = 0` this is the thresholding pass alone.
pub fn lbp_forward_warm(model: &MlcscModel, x: &Tensor, iters: usize) -> Result<PursuitResult> {
    lbp_impl(model, x, iters, true)
}

fn lbp_impl(model: &MlcscModel, x: &Tensor, iters: usize, warm: bool) -> Result<PursuitResult> {
    check_input(model, x)?;
    let start = Instant::now();
    let mut reps = Vec::with_capacity(model.depth());
    let mut trace = Vec::with_capacity(model.depth());
    let mut prev = x.clone();
    for i in 0..model.depth() {
        let mut layer_trace = Vec::with_capacity(iters + 1);
        let (mut gamma, remaining) = if warm {
            (threshold_pass(model, i, &prev)?, iters)
        } else {
            (ista_first_step(model, i, &prev)?, iters - 1)
        };
        layer_trace.push(objective(model, i, &prev, &gamma)?);
        for _ in 0..remaining {
            gamma = ista_step(model, i, &gamma, &prev)?;
            layer_trace.push(objective(model, i, &prev, &gamma)?);
        }
        trace.push(layer_trace);
        prev = gamma.clone();
        reps.push(gamma);
    }
    Ok(PursuitResult {
        representations: reps,
        objective_trace: trace,
        elapsed: start.elapsed().as_secs_f64(),
    })
}

/// D_{i+1} ⋯ D_L · γ_L for `0 ≤ i ≤ L` (layers are 1-based here; `i = 0`
/// maps all the way to signal space). Intermediate sizes are inferred.
pub fn effective_dictionary_apply(
    model: &MlcscModel,
    i: usize,
    gamma_l: &Tensor,
) -> Result<Tensor> {
    let depth = model.depth();
    if i > depth {
        return Err(Error::Parameter(format!(
            "layer index {i} out of range 0..={depth}"
        )));
    }
    let mut g = gamma_l.clone();
    for layer in model.layers[i..].iter().rev() {
        g = layer.dict.synthesize(&g, None)?;
    }
    Ok(g)
}

/// Γ̂ᵢ = D_(i,L) Γ_L for every layer, with sizes taken from `reps`.
fn effective_chain(model: &MlcscModel, reps: &[Tensor]) -> Result<Vec<Tensor>> {
    let depth = model.depth();
    let mut hats = vec![reps[depth - 1].clone(); depth];
    for i in (0..depth - 1).rev() {
        let hw = signal_hw(&reps[i])?;
        hats[i] = model.layers[i + 1]
            .dict
            .synthesize(&hats[i + 1], Some(hw))?;
    }
    Ok(hats)
}

/// Multi-layer ISTA. `iters = 0` returns the thresholding pass (the LTA
/// solution under ReLU shrinkage). Each global iteration rebuilds every Γ̂ᵢ
/// from the current Γ_L, then updates layers 1…L in order, feeding each
/// update the freshly updated Γᵢ₋₁.
pub fn mlista_forward(model: &MlcscModel, x: &Tensor, iters: usize) -> Result<PursuitResult> {
    check_input(model, x)?;
    let start = Instant::now();
    let depth = model.depth();
    let mut reps: Vec<Tensor> = Vec::with_capacity(depth);
    let mut trace = Vec::with_capacity(depth);
    for i in 0..depth {
        let prev = if i == 0 { x } else { &reps[i - 1] };
        let g = threshold_pass(model, i, prev)?;
        trace.push(vec![objective(model, i, prev, &g)?]);
        reps.push(g);
    }
    for _ in 0..iters {
        let hats = effective_chain(model, &reps)?;
        for (i, hat) in hats.iter().enumerate() {
            let prev = if i == 0 { x } else { &reps[i - 1] };
            let g = ista_step(model, i, hat, prev)?;
            let obj = objective(model, i, prev, &g)?;
            trace[i].push(obj);
            reps[i] = g;
        }
    }
    Ok(PursuitResult {
        representations: reps,
        objective_trace: trace,
        elapsed: start.elapsed().as_secs_f64(),
    })
}

/// WSEBP: a single pass Γᵢ = ReLU(Z + αᵢ Dᵢᵀ(Γᵢ₋₁ − Dᵢ Z) + ξᵢ) with the
/// anchor Z chosen by `policy`.
pub fn wsebp_forward(
    model: &MlcscModel,
    x: &Tensor,
    policy: AnchorPolicy,
) -> Result<PursuitResult> {
    check_input(model, x)?;
    let start = Instant::now();
    let mut reps = Vec::with_capacity(model.depth());
    let mut trace = Vec::with_capacity(model.depth());
    let mut prev = x.clone();
    for (i, layer) in model.layers.iter().enumerate() {
        let g = wsebp_layer(layer, &prev, x, policy, i)?;
        trace.push(vec![objective(model, i, &prev, &g)?]);
        prev = g.clone();
        reps.push(g);
    }
    Ok(PursuitResult {
        representations: reps,
        objective_trace: trace,
        elapsed: start.elapsed().as_secs_f64(),
    })
}

pub(crate) fn wsebp_layer(
    layer: &Layer,
    prev: &Tensor,
    x: &Tensor,
    policy: AnchorPolicy,
    index: usize,
) -> Result<Tensor> {
    let alpha = layer.params.alpha();
    let analysis = layer.dict.analyze(prev)?;
    let pre = match policy {
        AnchorPolicy::Zero => analysis.scale(alpha),
        AnchorPolicy::Analysis => anchored(layer, prev, &analysis, alpha)?,
        AnchorPolicy::Literal => {
            if x.shape() != analysis.shape() {
                return Err(Error::Dimension(format!(
                    "literal anchor needs layer {} codes shaped like the input: input {:?}, codes {:?}; \
                     the signal cannot stand in for a representation of different size",
                    index + 1,
                    x.shape(),
                    analysis.shape()
                )));
            }
            anchored(layer, prev, x, alpha)?
        }
    };
    shifted_relu(&pre, &layer.params.xi)
}

/// Z + α·Dᵀ(prev − D·Z)
fn anchored(layer: &Layer, prev: &Tensor, z: &Tensor, alpha: f64) -> Result<Tensor> {
    let residual = prev.sub(&layer.dict.synthesize(z, Some(signal_hw(prev)?))?)?;
    let corr = layer.dict.analyze(&residual)?;
    z.zip_map(&corr, |a, b| a + alpha * b)
}

/// Synthesizes Γᵢ (1-based `from_layer`) down to signal space.
pub fn reconstruct(model: &MlcscModel, reps: &[Tensor], from_layer: usize) -> Result<Tensor> {
    if from_layer < 1 || from_layer > model.depth() || from_layer > reps.len() {
        return Err(Error::Parameter(format!(
            "layer index {from_layer} out of range 1..={}",
            model.depth().min(reps.len())
        )));
    }
    let mut g = reps[from_layer - 1].clone();
    for i in (0..from_layer).rev() {
        let hw = if i == 0 {
            None
        } else {
            Some(signal_hw(&reps[i - 1])?)
        };
        g = model.layers[i].dict.synthesize(&g, hw)?;
    }
    Ok(g)
}

/// ‖x − x̂‖² / ‖x‖². Returns 0 when both are zero.
pub fn nmse(x: &Tensor, x_hat: &Tensor) -> Result<f64> {
    let err = x.sub(x_hat)?.sq_norm();
    let base = x.sq_norm();
    if base == 0.0 {
        return Ok(if err == 0.0 { 0.0 } else { f64::INFINITY });
    }
    Ok(err / base)
}
