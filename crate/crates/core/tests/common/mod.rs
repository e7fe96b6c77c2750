//! Dense-matrix transcriptions of the solvers, built on nalgebra and the
//! `materialize` matrices only.
#![allow(dead_code)]

use mlcsc_core::{ConvDictionary, ConvGeometry, Layer, LayerParams, MlcscModel, Shrinkage, Tensor};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Analysis matrix A with A·vec(u) = vec(Dᵀu).
pub fn dense(dict: &ConvDictionary, input_shape: &[usize]) -> DMatrix<f64> {
    let m = dict.materialize(input_shape).unwrap();
    DMatrix::from_fn(m.rows, m.cols, |r, c| m.get(r, c))
}

pub fn vec_of(t: &Tensor) -> DVector<f64> {
    DVector::from_column_slice(t.data())
}

pub fn max_abs_diff(a: &DVector<f64>, b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).fold(0.0, |m, (x, y)| m.max((x - y).abs()))
}

/// Per-entry threshold/bias vector for a code of `channels` blocks.
pub fn expand(xi: &[f64], len: usize) -> Vec<f64> {
    let per = len / xi.len();
    (0..len).map(|i| xi[i / per]).collect()
}

pub fn shrink(z: &DVector<f64>, xi: &[f64], s: Shrinkage) -> DVector<f64> {
    let t = expand(xi, z.len());
    DVector::from_iterator(
        z.len(),
        z.iter().zip(&t).map(|(&v, &t)| match s {
            Shrinkage::Soft => v.signum() * (v.abs() - t).max(0.0),
            Shrinkage::Relu => (v + t).max(0.0),
        }),
    )
}

pub fn relu_bias(z: &DVector<f64>, xi: &[f64]) -> DVector<f64> {
    shrink(z, xi, Shrinkage::Relu)
}

/// Dense analysis matrices of every layer for input shape `input`.
pub fn layer_matrices(model: &MlcscModel, input: &[usize]) -> Vec<DMatrix<f64>> {
    let shapes = model.code_shapes(input).unwrap();
    let mut prev = input.to_vec();
    model
        .layers()
        .iter()
        .zip(shapes)
        .map(|(l, s)| {
            let m = dense(&l.dict, &prev);
            prev = s;
            m
        })
        .collect()
}

/// Layered ISTA from zero, `iters` steps per layer.
pub fn dense_lbp(model: &MlcscModel, x: &Tensor, iters: usize) -> Vec<DVector<f64>> {
    let ms = layer_matrices(model, x.shape());
    let mut prev = vec_of(x);
    let mut out = Vec::new();
    for (m, l) in ms.iter().zip(model.layers()) {
        let alpha = 1.0 / l.params.beta;
        let mut g = DVector::zeros(m.nrows());
        for _ in 0..iters {
            let grad = m * (m.transpose() * &g - &prev);
            g = shrink(&(&g - grad * alpha), &l.params.xi, model.shrinkage());
        }
        prev = g.clone();
        out.push(g);
    }
    out
}

/// Multi-layer ISTA: thresholding pass, then `iters` global iterations.
pub fn dense_mlista(model: &MlcscModel, x: &Tensor, iters: usize) -> Vec<DVector<f64>> {
    let ms = layer_matrices(model, x.shape());
    let s = model.shrinkage();
    let xv = vec_of(x);
    let layers = model.layers();
    let mut g: Vec<DVector<f64>> = Vec::new();
    for (i, m) in ms.iter().enumerate() {
        let prev = if i == 0 { &xv } else { &g[i - 1] };
        g.push(shrink(&(m * prev), &layers[i].params.xi, s));
    }
    let depth = ms.len();
    for _ in 0..iters {
        let mut hats = vec![g[depth - 1].clone(); depth];
        for i in (0..depth - 1).rev() {
            hats[i] = ms[i + 1].transpose() * &hats[i + 1];
        }
        for i in 0..depth {
            let prev = if i == 0 { xv.clone() } else { g[i - 1].clone() };
            let alpha = 1.0 / layers[i].params.beta;
            let grad = &ms[i] * (ms[i].transpose() * &hats[i] - prev);
            g[i] = shrink(&(&hats[i] - grad * alpha), &layers[i].params.xi, s);
        }
    }
    g
}

/// WSEBP with the analysis anchor Z = A·Γᵢ₋₁.
pub fn dense_wsebp_analysis(model: &MlcscModel, x: &Tensor) -> Vec<DVector<f64>> {
    let ms = layer_matrices(model, x.shape());
    let mut prev = vec_of(x);
    let mut out = Vec::new();
    for (m, l) in ms.iter().zip(model.layers()) {
        let alpha = 1.0 / l.params.beta;
        let z = m * &prev;
        let pre = &z + (m * (&prev - m.transpose() * &z)) * alpha;
        let g = relu_bias(&pre, &l.params.xi);
        prev = g.clone();
        out.push(g);
    }
    out
}

/// Single-layer WSEBP with the signal itself as anchor:
/// ReLU(x + α·A(x − Aᵀx) + ξ).
pub fn dense_wsebp_literal(model: &MlcscModel, x: &Tensor) -> DVector<f64> {
    let m = dense(&model.layer(0).dict, x.shape());
    let xv = vec_of(x);
    let alpha = 1.0 / model.layer(0).params.beta;
    let pre = &xv + (&m * (&xv - m.transpose() * &xv)) * alpha;
    relu_bias(&pre, &model.layer(0).params.xi)
}

/// λ_max(AᵀA) from a symmetric eigendecomposition of the smaller Gram matrix.
pub fn lambda_max(a: &DMatrix<f64>) -> f64 {
    let gram = if a.nrows() <= a.ncols() {
        a * a.transpose()
    } else {
        a.transpose() * a
    };
    gram.symmetric_eigen()
        .eigenvalues
        .iter()
        .cloned()
        .fold(f64::MIN, f64::max)
}

/// A random geometry valid for a `[c, h, w]` input, or `None`.
pub fn random_geometry<R: Rng>(
    r: &mut R,
    c: usize,
    h: usize,
    w: usize,
    max_atoms: usize,
    max_kernel: usize,
) -> Option<ConvGeometry> {
    let g = ConvGeometry::new(
        c,
        r.random_range(1..=max_atoms),
        r.random_range(1..=max_kernel),
        r.random_range(1..=2),
        r.random_range(0..=1),
    );
    g.output_hw(h, w).ok().map(|_| g)
}

/// Random model of depth ≤ `max_depth` and its input shape. ξ and β are
/// left neutral.
pub fn random_model<R: Rng>(
    r: &mut R,
    max_depth: usize,
    max_atoms: usize,
    max_hw: usize,
) -> (MlcscModel, [usize; 3]) {
    loop {
        let c0 = r.random_range(1..=3);
        let h = r.random_range(4..=max_hw);
        let w = r.random_range(4..=max_hw);
        let depth = r.random_range(1..=max_depth);
        let mut shape = [c0, h, w];
        let mut layers = Vec::new();
        for _ in 0..depth {
            let Some(g) = random_geometry(r, shape[0], shape[1], shape[2], max_atoms, 4) else {
                break;
            };
            shape = g.code_shape(&shape).unwrap();
            layers.push(Layer {
                params: LayerParams::neutral(g.atoms),
                dict: ConvDictionary::random(g, r).unwrap(),
            });
        }
        if layers.len() == depth {
            return (MlcscModel::new(layers).unwrap(), [c0, h, w]);
        }
    }
}

/// Random per-atom ξ in `[lo, hi)` on every layer.
pub fn randomize_xi<R: Rng>(model: &mut MlcscModel, r: &mut R, lo: f64, hi: f64) {
    for i in 0..model.depth() {
        for v in &mut model.layer_mut(i).params.xi {
            *v = r.random_range(lo..hi);
        }
    }
}
