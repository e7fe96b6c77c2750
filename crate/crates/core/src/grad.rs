//! Reverse-mode differentiation over the closed operation set used by the
//! solvers and classifiers.
//!
//! A [`Tape`] is filled eagerly: every recording call computes its value and
//! appends a node. [`Tape::backward`] walks the nodes in reverse and returns
//! gradients for every node. Convolution nodes work on batches
//! `[n, c, h, w]`.

use std::collections::BTreeSet;
use std::io::Write;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::conv::{self, ConvGeometry};
use crate::error::{Error, Result};
use crate::pursuit::{channel_layout, soft};
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Analyze {
        w: Var,
        x: Var,
        geom: ConvGeometry,
    },
    Synthesize {
        w: Var,
        g: Var,
        geom: ConvGeometry,
    },
    Add(Var, Var),
    Sub(Var, Var),
    BiasAdd {
        x: Var,
        bias: Var,
    },
    Scale {
        x: Var,
        c: f64,
    },
    InvScale {
        x: Var,
        beta: Var,
    },
    Relu(Var),
    SoftThreshold {
        x: Var,
        xi: Var,
    },
    Flatten(Var),
    Affine {
        x: Var,
        w: Var,
        b: Var,
    },
    SoftmaxCrossEntropy {
        logits: Var,
        probs: Vec<f64>,
        labels: Vec<usize>,
    },
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    value: Tensor,
}

/// Execution record of one forward pass.
#[derive(Debug, Clone, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Named parameter tensors, in a fixed order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamSet {
    names: Vec<String>,
    values: Vec<Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, value: Tensor) {
        self.names.push(name.into());
        self.values.push(value);
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn values(&self) -> &[Tensor] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Tensor] {
        &mut self.values
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| &self.values[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    pub fn scalar_count(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    /// Records every parameter as a leaf.
    pub fn record(&self, tape: &mut Tape) -> Vec<Var> {
        self.values.iter().map(|v| tape.leaf(v.clone())).collect()
    }
}

/// Gradients indexed by node.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient for `v`, or zeros shaped like `like` when nothing flowed back.
    pub fn get_or_zeros(&self, v: Var, like: &Tensor) -> Tensor {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(like.shape()))
    }
}

fn hw4(t: &Tensor, what: &str) -> Result<(usize, usize, usize, usize)> {
    match t.shape() {
        [n, c, h, w] => Ok((*n, *c, *h, *w)),
        s => Err(Error::Dimension(format!(
            "{what}: expected [n, c, h, w], got {s:?}"
        ))),
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, op: Op, value: Tensor) -> Var {
        self.nodes.push(Node { op, value });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(Op::Leaf, value)
    }

    fn check_weights(&self, w: Var, geom: &ConvGeometry) -> Result<()> {
        geom.validate()?;
        if self.value(w).shape() != geom.weight_shape() {
            return Err(Error::Dimension(format!(
                "weights {:?} do not match geometry {:?}",
                self.value(w).shape(),
                geom.weight_shape()
            )));
        }
        Ok(())
    }

    /// Dᵀx for a batch `x` of shape `[n, c, h, w]`.
    pub fn analyze(&mut self, w: Var, x: Var, geom: ConvGeometry) -> Result<Var> {
        self.check_weights(w, &geom)?;
        let (n, c, h, wd) = hw4(self.value(x), "analyze")?;
        if c != geom.in_channels {
            return Err(Error::Dimension(format!(
                "analyze: input has {c} channels, dictionary expects {}",
                geom.in_channels
            )));
        }
        let (oh, ow) = geom.output_hw(h, wd)?;
        let data = conv::analyze_batch(&geom, self.value(w).data(), self.value(x).data(), n, h, wd);
        let value = Tensor::from_parts(vec![n, geom.atoms, oh, ow], data);
        Ok(self.push(Op::Analyze { w, x, geom }, value))
    }

    /// Dg for a batch of codes, producing signals of spatial size `out_hw`.
    pub fn synthesize(
        &mut self,
        w: Var,
        g: Var,
        geom: ConvGeometry,
        out_hw: (usize, usize),
    ) -> Result<Var> {
        self.check_weights(w, &geom)?;
        let (n, m, gh, gw) = hw4(self.value(g), "synthesize")?;
        if m != geom.atoms {
            return Err(Error::Dimension(format!(
                "synthesize: code has {m} channels, dictionary has {} atoms",
                geom.atoms
            )));
        }
        let (h, wd) = out_hw;
        if geom.output_hw(h, wd)? != (gh, gw) {
            return Err(Error::Dimension(format!(
                "synthesize: signal {h}x{wd} does not map to code {gh}x{gw}"
            )));
        }
        let data =
            conv::synthesize_batch(&geom, self.value(w).data(), self.value(g).data(), n, h, wd);
        let value = Tensor::from_parts(vec![n, geom.in_channels, h, wd], data);
        Ok(self.push(Op::Synthesize { w, g, geom }, value))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).add(self.value(b))?;
        Ok(self.push(Op::Add(a, b), value))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).sub(self.value(b))?;
        Ok(self.push(Op::Sub(a, b), value))
    }

    /// Adds a per-channel bias (length = channel count, or 1).
    pub fn bias_add(&mut self, x: Var, bias: Var) -> Result<Var> {
        let value = per_channel(self.value(x), self.value(bias).data(), |v, b| v + b)?;
        Ok(self.push(Op::BiasAdd { x, bias }, value))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let value = self.value(x).scale(c);
        self.push(Op::Scale { x, c }, value)
    }

    /// `x · (1/β)` with β a one-element tensor.
    pub fn inv_scale(&mut self, x: Var, beta: Var) -> Result<Var> {
        let b = scalar_of(self.value(beta))?;
        if !(b > 0.0) {
            return Err(Error::Parameter(format!("beta must be positive, got {b}")));
        }
        let alpha = 1.0 / b;
        let value = self.value(x).scale(alpha);
        Ok(self.push(Op::InvScale { x, beta }, value))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.max(0.0));
        self.push(Op::Relu(x), value)
    }

    pub fn soft_threshold(&mut self, x: Var, xi: Var) -> Result<Var> {
        if self.value(xi).data().iter().any(|v| !(*v >= 0.0)) {
            return Err(Error::Parameter(
                "soft threshold must be nonnegative".into(),
            ));
        }
        let value = per_channel(self.value(x), self.value(xi).data(), soft)?;
        Ok(self.push(Op::SoftThreshold { x, xi }, value))
    }

    /// `[n, …] → [n, prod(…)]`.
    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let n = t.shape()[0];
        let value = t.clone().reshape(&[n, t.len() / n])?;
        Ok(self.push(Op::Flatten(x), value))
    }

    /// `x·Wᵀ + b` with `x: [n, f]`, `W: [t, f]`, `b: [t]`.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xs, ws, bs) = (
            self.value(x).shape(),
            self.value(w).shape(),
            self.value(b).shape(),
        );
        let (n, f) = match xs {
            [n, f] => (*n, *f),
            s => {
                return Err(Error::Dimension(format!(
                    "affine: input must be [n, f], got {s:?}"
                )))
            }
        };
        let t = match ws {
            [t, f2] if *f2 == f => *t,
            s => {
                return Err(Error::Dimension(format!(
                    "affine: weights {s:?} do not fit {f} features"
                )))
            }
        };
        if bs != [t] {
            return Err(Error::Dimension(format!(
                "affine: bias {bs:?} does not fit {t} outputs"
            )));
        }
        let mut out = vec![0.0; n * t];
        conv::gemm(
            n,
            f,
            t,
            self.value(x).data(),
            false,
            self.value(w).data(),
            true,
            &mut out,
            false,
        );
        let bias = self.value(b).data();
        for row in out.chunks_mut(t) {
            for (o, bb) in row.iter_mut().zip(bias) {
                *o += bb;
            }
        }
        let value = Tensor::from_parts(vec![n, t], out);
        Ok(self.push(Op::Affine { x, w, b }, value))
    }

    /// Mean softmax cross-entropy over the batch; output has shape `[1]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let l = self.value(logits);
        let (n, t) = match l.shape() {
            [n, t] => (*n, *t),
            s => {
                return Err(Error::Dimension(format!(
                    "logits must be [n, classes], got {s:?}"
                )))
            }
        };
        if labels.len() != n {
            return Err(Error::Dimension(format!(
                "{} labels for {n} rows",
                labels.len()
            )));
        }
        if let Some(bad) = labels.iter().find(|&&y| y >= t) {
            return Err(Error::Input(format!(
                "label {bad} out of range for {t} classes"
            )));
        }
        let mut probs = vec![0.0; n * t];
        let mut loss = 0.0;
        for (i, row) in l.data().chunks(t).enumerate() {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
            let log_z = max + sum.ln();
            for (p, v) in probs[i * t..(i + 1) * t].iter_mut().zip(row) {
                *p = (v - log_z).exp();
            }
            loss += log_z - row[labels[i]];
        }
        let value = Tensor::from_parts(vec![1], vec![loss / n as f64]);
        Ok(self.push(
            Op::SoftmaxCrossEntropy {
                logits,
                probs,
                labels: labels.to_vec(),
            },
            value,
        ))
    }

    /// Smallest distance of any ReLU or soft-threshold input to its kink.
    pub fn kink_margin(&self) -> f64 {
        let mut margin = f64::INFINITY;
        for node in &self.nodes {
            match &node.op {
                Op::Relu(x) => {
                    for v in self.value(*x).data() {
                        margin = margin.min(v.abs());
                    }
                }
                Op::SoftThreshold { x, xi } => {
                    let t = self.value(*x);
                    let xi = self.value(*xi).data();
                    let (outer, ch, inner) = channel_layout(t.shape());
                    for o in 0..outer {
                        for c in 0..ch {
                            let th = if xi.len() == 1 { xi[0] } else { xi[c] };
                            let base = (o * ch + c) * inner;
                            for v in &t.data()[base..base + inner] {
                                margin = margin.min((v.abs() - th).abs());
                            }
                        }
                    }
                }
                _ => {}
            }
        }
        margin
    }

    /// Reverse sweep from `output` seeded with `cotangent`.
    pub fn backward(&self, output: Var, cotangent: &Tensor) -> Result<Gradients> {
        if output.0 >= self.nodes.len() {
            return Err(Error::Input("output is not on this tape".into()));
        }
        self.value(output).same_shape(cotangent)?;
        let mut grads: Vec<Option<Tensor>> = vec![None; output.0 + 1];
        grads[output.0] = Some(cotangent.clone());
        for idx in (0..=output.0).rev() {
            let Some(gy) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => {
                    grads[idx] = Some(gy);
                }
                Op::Analyze { w, x, geom } => {
                    let (n, _, h, wd) = hw4(self.value(*x), "analyze")?;
                    let dx =
                        conv::synthesize_batch(geom, self.value(*w).data(), gy.data(), n, h, wd);
                    accumulate(
                        &mut grads,
                        *x,
                        Tensor::from_parts(self.value(*x).shape().to_vec(), dx),
                    );
                    let dw =
                        conv::weight_grad_batch(geom, gy.data(), self.value(*x).data(), n, h, wd);
                    accumulate(
                        &mut grads,
                        *w,
                        Tensor::from_parts(self.value(*w).shape().to_vec(), dw),
                    );
                }
                Op::Synthesize { w, g, geom } => {
                    let (n, _, h, wd) = hw4(&node.value, "synthesize")?;
                    let dg = conv::analyze_batch(geom, self.value(*w).data(), gy.data(), n, h, wd);
                    accumulate(
                        &mut grads,
                        *g,
                        Tensor::from_parts(self.value(*g).shape().to_vec(), dg),
                    );
                    let dw =
                        conv::weight_grad_batch(geom, self.value(*g).data(), gy.data(), n, h, wd);
                    accumulate(
                        &mut grads,
                        *w,
                        Tensor::from_parts(self.value(*w).shape().to_vec(), dw),
                    );
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, gy.clone());
                    accumulate(&mut grads, *b, gy);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, *b, gy.scale(-1.0));
                    accumulate(&mut grads, *a, gy);
                }
                Op::BiasAdd { x, bias } => {
                    let db = channel_sums(&gy, self.value(*bias).len(), |g, _| g, None);
                    accumulate(
                        &mut grads,
                        *bias,
                        Tensor::from_parts(self.value(*bias).shape().to_vec(), db),
                    );
                    accumulate(&mut grads, *x, gy);
                }
                Op::Scale { x, c } => accumulate(&mut grads, *x, gy.scale(*c)),
                Op::InvScale { x, beta } => {
                    let b = scalar_of(self.value(*beta))?;
                    let alpha = 1.0 / b;
                    let db = -gy.dot(self.value(*x))? / (b * b);
                    accumulate(
                        &mut grads,
                        *beta,
                        Tensor::from_parts(self.value(*beta).shape().to_vec(), vec![db]),
                    );
                    accumulate(&mut grads, *x, gy.scale(alpha));
                }
                Op::Relu(x) => {
                    let dx = gy.zip_map(self.value(*x), |g, v| if v > 0.0 { g } else { 0.0 })?;
                    accumulate(&mut grads, *x, dx);
                }
                Op::SoftThreshold { x, xi } => {
                    let xv = self.value(*x);
                    let xis = self.value(*xi).data();
                    let dxi = channel_sums(
                        &gy,
                        xis.len(),
                        |g, v| if v > 0.0 { -g } else { g },
                        Some((xv, xis)),
                    );
                    let dx = soft_mask(&gy, xv, xis);
                    accumulate(
                        &mut grads,
                        *xi,
                        Tensor::from_parts(self.value(*xi).shape().to_vec(), dxi),
                    );
                    accumulate(&mut grads, *x, dx);
                }
                Op::Flatten(x) => {
                    let dx = gy.reshape(self.value(*x).shape())?;
                    accumulate(&mut grads, *x, dx);
                }
                Op::Affine { x, w, b } => {
                    let (n, f) = (self.value(*x).shape()[0], self.value(*x).shape()[1]);
                    let t = self.value(*w).shape()[0];
                    let mut dx = vec![0.0; n * f];
                    conv::gemm(
                        n,
                        t,
                        f,
                        gy.data(),
                        false,
                        self.value(*w).data(),
                        false,
                        &mut dx,
                        false,
                    );
                    let mut dw = vec![0.0; t * f];
                    conv::gemm(
                        t,
                        n,
                        f,
                        gy.data(),
                        true,
                        self.value(*x).data(),
                        false,
                        &mut dw,
                        false,
                    );
                    let mut db = vec![0.0; t];
                    for row in gy.data().chunks(t) {
                        for (d, g) in db.iter_mut().zip(row) {
                            *d += g;
                        }
                    }
                    accumulate(&mut grads, *x, Tensor::from_parts(vec![n, f], dx));
                    accumulate(&mut grads, *w, Tensor::from_parts(vec![t, f], dw));
                    accumulate(&mut grads, *b, Tensor::from_parts(vec![t], db));
                }
                Op::SoftmaxCrossEntropy {
                    logits,
                    probs,
                    labels,
                } => {
                    let scale = gy.data()[0] / labels.len() as f64;
                    let t = probs.len() / labels.len();
                    let mut d = probs.clone();
                    for (i, &y) in labels.iter().enumerate() {
                        d[i * t + y] -= 1.0;
                    }
                    d.iter_mut().for_each(|v| *v *= scale);
                    accumulate(
                        &mut grads,
                        *logits,
                        Tensor::from_parts(vec![labels.len(), t], d),
                    );
                }
            }
        }
        Ok(Gradients { grads })
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(existing) => existing
            .axpy(1.0, &g)
            .expect("gradient shapes agree with node values"),
        slot => *slot = Some(g),
    }
}

fn scalar_of(t: &Tensor) -> Result<f64> {
    if t.len() != 1 {
        return Err(Error::Dimension(format!(
            "expected a scalar, got {:?}",
            t.shape()
        )));
    }
    Ok(t.data()[0])
}

fn per_channel(x: &Tensor, v: &[f64], f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
    let (outer, ch, inner) = channel_layout(x.shape());
    if v.len() != 1 && v.len() != ch {
        return Err(Error::Dimension(format!(
            "per-channel parameter has {} entries for {ch} channels",
            v.len()
        )));
    }
    let mut out = x.clone();
    let data = out.data_mut();
    for o in 0..outer {
        for c in 0..ch {
            let p = if v.len() == 1 { v[0] } else { v[c] };
            let base = (o * ch + c) * inner;
            for e in &mut data[base..base + inner] {
                *e = f(*e, p);
            }
        }
    }
    Ok(out)
}

/// Per-channel sums of `f(g, x)` over entries; with `mask` only entries
/// outside the soft-threshold dead zone contribute.
fn channel_sums(
    g: &Tensor,
    len: usize,
    f: impl Fn(f64, f64) -> f64,
    mask: Option<(&Tensor, &[f64])>,
) -> Vec<f64> {
    let (outer, ch, inner) = channel_layout(g.shape());
    let mut out = vec![0.0; len];
    for o in 0..outer {
        for c in 0..ch {
            let slot = if len == 1 { 0 } else { c };
            let base = (o * ch + c) * inner;
            for k in base..base + inner {
                let gv = g.data()[k];
                match mask {
                    None => out[slot] += f(gv, 0.0),
                    Some((x, xi)) => {
                        let th = if xi.len() == 1 { xi[0] } else { xi[c] };
                        let xv = x.data()[k];
                        if xv.abs() > th {
                            out[slot] += f(gv, xv);
                        }
                    }
                }
            }
        }
    }
    out
}

fn soft_mask(g: &Tensor, x: &Tensor, xi: &[f64]) -> Tensor {
    let (outer, ch, inner) = channel_layout(g.shape());
    let mut out = g.clone();
    let data = out.data_mut();
    for o in 0..outer {
        for c in 0..ch {
            let th = if xi.len() == 1 { xi[0] } else { xi[c] };
            let base = (o * ch + c) * inner;
            let xs = &x.data()[base..base + inner];
            for (d, v) in data[base..base + inner].iter_mut().zip(xs) {
                if v.abs() <= th {
                    *d = 0.0;
                }
            }
        }
    }
    out
}

/// Runs `build` on a fresh tape and returns the scalar loss with its tape.
pub fn forward<F>(params: &ParamSet, build: &F) -> Result<(Tape, Vec<Var>, Var)>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars = params.record(&mut tape);
    let out = build(&mut tape, &vars)?;
    Ok((tape, vars, out))
}

/// Loss value and per-parameter gradients of a scalar-valued graph.
pub fn value_and_grad<F>(params: &ParamSet, build: &F) -> Result<(f64, Vec<Tensor>)>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let (tape, vars, out) = forward(params, build)?;
    let loss = scalar_of(tape.value(out))?;
    let grads = tape.backward(out, &Tensor::full(tape.value(out).shape(), 1.0))?;
    let per_param = vars
        .iter()
        .zip(params.values())
        .map(|(v, p)| grads.get_or_zeros(*v, p))
        .collect();
    Ok((loss, per_param))
}

/// Smallest pre-activation distance to a kink accepted by [`gradcheck`].
pub const KINK_MARGIN: f64 = 1e-3;

/// Denominator floor for relative errors of near-zero gradients.
pub const REL_ERR_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct GradEntry {
    pub name: String,
    pub max_rel_err: f64,
    pub coords_checked: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradReport {
    pub entries: Vec<GradEntry>,
    pub epsilon: f64,
    /// Free-form description of the evaluation point.
    pub point: String,
    pub kink_margin: f64,
}

impl GradReport {
    pub fn max_rel_err(&self) -> f64 {
        self.entries.iter().fold(0.0, |m, e| m.max(e.max_rel_err))
    }

    pub fn passes(&self, tol: f64) -> bool {
        self.entries.iter().all(|e| e.max_rel_err <= tol)
    }

    /// CSV with header `parameter,max_rel_err,epsilon`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["parameter", "max_rel_err", "epsilon"])?;
        for e in &self.entries {
            w.write_record([
                e.name.clone(),
                format!("{:e}", e.max_rel_err),
                format!("{:e}", self.epsilon),
            ])?;
        }
        w.flush().map_err(|e| Error::io("<csv>", e))?;
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct GradcheckOptions {
    pub epsilon: f64,
    /// Coordinates sampled per parameter tensor (all of them when smaller).
    pub coords_per_tensor: usize,
    pub seed: u64,
    /// Restrict to these parameter names; `None` checks all.
    pub subset: Option<Vec<String>>,
    pub point: String,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        GradcheckOptions {
            epsilon: 1e-5,
            coords_per_tensor: 25,
            seed: 0,
            subset: None,
            point: String::new(),
        }
    }
}

/// Compares reverse-mode gradients against central differences.
///
/// Fails with a parameter error when the point lies within [`KINK_MARGIN`]
/// of a ReLU/soft-threshold kink; callers resample and retry.
pub fn gradcheck<F>(params: &ParamSet, build: &F, opts: &GradcheckOptions) -> Result<GradReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if !(opts.epsilon > 0.0) {
        return Err(Error::Parameter("epsilon must be positive".into()));
    }
    let (tape, vars, out) = forward(params, build)?;
    let margin = tape.kink_margin();
    if margin < KINK_MARGIN {
        return Err(Error::Parameter(format!(
            "evaluation point is {margin:e} from a kink (need {KINK_MARGIN:e})"
        )));
    }
    scalar_of(tape.value(out))?;
    let grads = tape.backward(out, &Tensor::full(tape.value(out).shape(), 1.0))?;
    drop(tape);

    let selected: Option<BTreeSet<&str>> = opts
        .subset
        .as_ref()
        .map(|s| s.iter().map(String::as_str).collect());
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut entries = Vec::new();
    let mut probe = params.clone();
    for (pi, (name, value)) in params.iter().enumerate() {
        if let Some(sel) = &selected {
            if !sel.contains(name) {
                continue;
            }
        }
        let analytic = grads.get_or_zeros(vars[pi], value);
        let count = opts.coords_per_tensor.min(value.len());
        let mut coords = sample(&mut rng, value.len(), count).into_vec();
        coords.sort_unstable();
        let mut worst: f64 = 0.0;
        for &k in &coords {
            let orig = value.data()[k];
            probe.values_mut()[pi].data_mut()[k] = orig + opts.epsilon;
            let plus = eval_loss(&probe, build)?;
            probe.values_mut()[pi].data_mut()[k] = orig - opts.epsilon;
            let minus = eval_loss(&probe, build)?;
            probe.values_mut()[pi].data_mut()[k] = orig;
            let numeric = (plus - minus) / (2.0 * opts.epsilon);
            let a = analytic.data()[k];
            let denom = a.abs().max(numeric.abs()).max(REL_ERR_FLOOR);
            worst = worst.max((a - numeric).abs() / denom);
        }
        entries.push(GradEntry {
            name: name.to_string(),
            max_rel_err: worst,
            coords_checked: count,
        });
    }
    Ok(GradReport {
        entries,
        epsilon: opts.epsilon,
        point: opts.point.clone(),
        kink_margin: margin,
    })
}

fn eval_loss<F>(params: &ParamSet, build: &F) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let (tape, _, out) = forward(params, build)?;
    let v = scalar_of(tape.value(out))?;
    if !v.is_finite() {
        return Err(Error::Input("non-finite loss at a perturbed point".into()));
    }
    Ok(v)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn relu_forward() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2], &[-1.0, 2.0]));
        let y = tape.relu(x);
        assert_eq!(tape.value(y).data(), &[0.0, 2.0]);
    }

    #[test]
    fn affine_identity_is_identity() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2, 2], &[1.0, -2.0, 3.0, 4.5]));
        let w = tape.leaf(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let b = tape.leaf(Tensor::zeros(&[2]));
        let y = tape.affine(x, w, b).unwrap();
        assert_eq!(tape.value(y), tape.value(x));
    }

    #[test]
    fn half_squared_norm_gradient() {
        // ½‖x‖² = ½⟨x, x⟩ via an identity affine map and the dot trick:
        // d/dx of ½ Σ xᵢ² is x, obtained by backpropagating cotangent x
        // through the identity.
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[1, 2], &[3.0, 4.0]));
        let w = tape.leaf(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let b = tape.leaf(Tensor::zeros(&[2]));
        let y = tape.affine(x, w, b).unwrap();
        let cot = tape.value(y).clone();
        let g = tape.backward(y, &cot).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[3.0, 4.0]);
    }

    #[test]
    fn synthesize_gradient_is_analysis_of_cotangent() {
        let geom = ConvGeometry::new(2, 3, 3, 2, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let wt = Tensor::randn(&geom.weight_shape(), 1.0, &mut rng);
        let code = Tensor::randn(&[1, 3, 3, 3], 1.0, &mut rng);
        let mut tape = Tape::new();
        let w = tape.leaf(wt.clone());
        let g = tape.leaf(code);
        let y = tape.synthesize(w, g, geom, (6, 6)).unwrap();
        let cot = Tensor::randn(&[1, 2, 6, 6], 1.0, &mut rng);
        let grads = tape.backward(y, &cot).unwrap();
        let dict = crate::ConvDictionary::new(geom, wt).unwrap();
        assert_eq!(grads.get(g).unwrap(), &dict.analyze(&cot).unwrap());
    }

    #[test]
    fn softmax_ce_uniform_logits() {
        let mut tape = Tape::new();
        let l = tape.leaf(Tensor::zeros(&[2, 4]));
        let loss = tape.softmax_cross_entropy(l, &[0, 3]).unwrap();
        assert!((tape.value(loss).data()[0] - 4f64.ln()).abs() < 1e-15);
        assert!(tape.softmax_cross_entropy(l, &[0, 4]).is_err());
    }

    /// ⟨c, flatten(Dᵀx)⟩ + b as a 1×1 affine readout: linear in every parameter.
    fn linear_params(rng: &mut ChaCha8Rng) -> (ParamSet, Tensor, ConvGeometry) {
        let geom = ConvGeometry::new(2, 3, 3, 1, 1);
        let mut p = ParamSet::new();
        p.push("dict", Tensor::randn(&geom.weight_shape(), 1.0, rng));
        p.push("readout", Tensor::randn(&[1, 3 * 16], 1.0, rng));
        p.push("bias", Tensor::randn(&[1], 1.0, rng));
        (p, Tensor::randn(&[1, 2, 4, 4], 1.0, rng), geom)
    }

    #[test]
    fn gradcheck_linear_graph_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (params, x, geom) = linear_params(&mut rng);
        let build = |tape: &mut Tape, v: &[Var]| -> Result<Var> {
            let xi = tape.leaf(x.clone());
            let a = tape.analyze(v[0], xi, geom)?;
            let f = tape.flatten(a)?;
            tape.affine(f, v[1], v[2])
        };
        let report = gradcheck(&params, &build, &GradcheckOptions::default()).unwrap();
        assert_eq!(report.entries.len(), 3);
        assert!(report.max_rel_err() <= 1e-9, "{report:?}");
    }

    #[test]
    fn gradcheck_softmax_cross_entropy() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut params = ParamSet::new();
        params.push("logits", Tensor::randn(&[5, 3], 1.5, &mut rng));
        let labels = [0, 2, 1, 1, 0];
        let build = |tape: &mut Tape, v: &[Var]| tape.softmax_cross_entropy(v[0], &labels);
        let report = gradcheck(&params, &build, &GradcheckOptions::default()).unwrap();
        assert!(report.max_rel_err() <= 1e-6, "{report:?}");
    }

    #[test]
    fn gradcheck_rejects_kinks() {
        let mut params = ParamSet::new();
        params.push("x", Tensor::from_vec(vec![0.0, 1.0]));
        let build = |tape: &mut Tape, v: &[Var]| -> Result<Var> {
            let r = tape.relu(v[0]);
            let r = tape.value(r).clone().reshape(&[1, 2])?;
            let rv = tape.leaf(r);
            let w = tape.leaf(Tensor::full(&[1, 2], 1.0));
            let b = tape.leaf(Tensor::zeros(&[1]));
            tape.affine(rv, w, b)
        };
        assert!(matches!(
            gradcheck(&params, &build, &GradcheckOptions::default()),
            Err(Error::Parameter(_))
        ));
    }

    #[test]
    fn inverse_scale_gradient_wrt_beta() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(vec![2.0, -1.0]));
        let beta = tape.leaf(Tensor::scalar(4.0));
        let y = tape.inv_scale(x, beta).unwrap();
        assert_eq!(tape.value(y).data(), &[0.5, -0.25]);
        let g = tape.backward(y, &Tensor::from_vec(vec![1.0, 1.0])).unwrap();
        // d/dβ Σ x/β = −Σx/β² = −1/16
        assert!((g.get(beta).unwrap().data()[0] + 1.0 / 16.0).abs() < 1e-15);
        assert_eq!(g.get(x).unwrap().data(), &[0.25, 0.25]);
    }

    #[test]
    fn soft_threshold_gradient_wrt_xi() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(vec![2.0, -3.0, 0.1]));
        let xi = tape.leaf(Tensor::scalar(0.5));
        let y = tape.soft_threshold(x, xi).unwrap();
        assert_eq!(tape.value(y).data(), &[1.5, -2.5, 0.0]);
        let g = tape
            .backward(y, &Tensor::from_vec(vec![1.0, 1.0, 1.0]))
            .unwrap();
        assert_eq!(g.get(xi).unwrap().data(), &[0.0]);
        assert_eq!(g.get(x).unwrap().data(), &[1.0, 1.0, 0.0]);
    }

    #[test]
    fn backward_is_linear_in_losses() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut params = ParamSet::new();
        params.push("logits", Tensor::randn(&[4, 3], 1.0, &mut rng));
        let f = |tape: &mut Tape, v: &[Var]| tape.softmax_cross_entropy(v[0], &[0, 1, 2, 0]);
        let g = |tape: &mut Tape, v: &[Var]| tape.softmax_cross_entropy(v[0], &[2, 2, 1, 1]);
        let both = |tape: &mut Tape, v: &[Var]| -> Result<Var> {
            let a = f(tape, v)?;
            let b = g(tape, v)?;
            tape.add(a, b)
        };
        let (_, ga) = value_and_grad(&params, &f).unwrap();
        let (_, gb) = value_and_grad(&params, &g).unwrap();
        let (_, gab) = value_and_grad(&params, &both).unwrap();
        let sum = ga[0].add(&gb[0]).unwrap();
        assert!(gab[0].max_abs_diff(&sum).unwrap() <= 1e-12);
    }

    #[test]
    fn report_csv_layout() {
        let r = GradReport {
            entries: vec![GradEntry {
                name: "layer1.weight".into(),
                max_rel_err: 1.5e-7,
                coords_checked: 25,
            }],
            epsilon: 1e-5,
            point: String::new(),
            kink_margin: 1.0,
        };
        let mut buf = Vec::new();
        r.write_csv(&mut buf).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "parameter,max_rel_err,epsilon\nlayer1.weight,1.5e-7,1e-5\n"
        );
    }
}
