//! Convolutional dictionaries as explicit linear operators.
//!
//! `analyze` applies Dᵀ (strided cross-correlation with the atoms) and
//! `synthesize` applies D, its exact adjoint. Both accept a single image
//! `[c, h, w]` or a batch `[n, c, h, w]`; batches are processed sample by
//! sample with the same kernel, so a batch row is bit-identical to the
//! corresponding single-image call.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Default cap on `rows * cols` for [`ConvDictionary::materialize`].
pub const MATERIALIZE_CAP: usize = 10_000_000;

/// Multiplier applied to the Rayleigh quotient from power iteration.
pub const SPECTRAL_SAFETY: f64 = 1.01;

/// Bound reported for an all-zero operator.
pub const SPECTRAL_FLOOR: f64 = 1e-12;

const SPECTRAL_SEED: u64 = 0x005e_ed0f_d1c7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Boundary {
    ZeroPad,
    /// Periodic wrap-around; only defined for stride 1.
    Circular,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub in_channels: usize,
    pub atoms: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub boundary: Boundary,
}

impl ConvGeometry {
    pub fn new(
        in_channels: usize,
        atoms: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Self {
        ConvGeometry {
            in_channels,
            atoms,
            kernel,
            stride,
            padding,
            boundary: Boundary::ZeroPad,
        }
    }

    pub fn circular(mut self) -> Self {
        self.boundary = Boundary::Circular;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.atoms == 0 || self.kernel == 0 || self.stride == 0 {
            return Err(Error::Parameter(format!(
                "channels, kernel and stride must be positive: {self:?}"
            )));
        }
        if self.boundary == Boundary::Circular && self.stride != 1 {
            return Err(Error::Parameter(
                "circular boundary requires stride 1".into(),
            ));
        }
        Ok(())
    }

    pub fn weight_shape(&self) -> [usize; 4] {
        [self.atoms, self.in_channels, self.kernel, self.kernel]
    }

    /// Length of one atom: `in_channels * kernel²`.
    pub fn patch_len(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    pub fn weight_count(&self) -> usize {
        self.atoms * self.patch_len()
    }

    fn out_extent(&self, n: usize) -> Result<usize> {
        match self.boundary {
            Boundary::Circular => Ok(n),
            Boundary::ZeroPad => {
                let padded = n + 2 * self.padding;
                if padded < self.kernel {
                    return Err(Error::Dimension(format!(
                        "extent {n} with padding {} is smaller than kernel {}",
                        self.padding, self.kernel
                    )));
                }
                Ok((padded - self.kernel) / self.stride + 1)
            }
        }
    }

    /// Code-space spatial size for a signal of size `(h, w)`.
    pub fn output_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        Ok((self.out_extent(h)?, self.out_extent(w)?))
    }

    fn in_extent(&self, n: usize) -> Result<usize> {
        match self.boundary {
            Boundary::Circular => Ok(n),
            Boundary::ZeroPad => {
                let full = (n - 1) * self.stride + self.kernel;
                if full <= 2 * self.padding {
                    return Err(Error::Dimension(format!(
                        "cannot infer a positive signal extent from code extent {n}"
                    )));
                }
                Ok(full - 2 * self.padding)
            }
        }
    }

    /// Smallest signal size whose code size is `(h, w)`.
    pub fn input_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        Ok((self.in_extent(h)?, self.in_extent(w)?))
    }

    /// Full code shape `[atoms, h', w']` for a signal shape `[c, h, w]`.
    pub fn code_shape(&self, signal: &[usize]) -> Result<[usize; 3]> {
        let [c, h, w] = as_chw(signal)?;
        if c != self.in_channels {
            return Err(Error::Dimension(format!(
                "signal has {c} channels, dictionary expects {}",
                self.in_channels
            )));
        }
        let (oh, ow) = self.output_hw(h, w)?;
        Ok([self.atoms, oh, ow])
    }

    /// Maps an output position and kernel offset to an input coordinate.
    #[inline]
    fn source(&self, out: usize, offset: usize, extent: usize) -> Option<usize> {
        let pos = (out * self.stride + offset) as isize - self.padding as isize;
        match self.boundary {
            Boundary::ZeroPad => {
                if pos >= 0 && (pos as usize) < extent {
                    Some(pos as usize)
                } else {
                    None
                }
            }
            Boundary::Circular => Some(pos.rem_euclid(extent as isize) as usize),
        }
    }
}

pub(crate) fn as_chw(shape: &[usize]) -> Result<[usize; 3]> {
    match shape {
        [c, h, w] => Ok([*c, *h, *w]),
        _ => Err(Error::Dimension(format!(
            "expected [channels, height, width], got {shape:?}"
        ))),
    }
}

/// Splits a rank-3 or rank-4 shape into `(batch, [c, h, w], batched)`.
fn split_batch(shape: &[usize]) -> Result<(usize, [usize; 3], bool)> {
    match shape {
        [c, h, w] => Ok((1, [*c, *h, *w], false)),
        [n, c, h, w] => Ok((*n, [*c, *h, *w], true)),
        _ => Err(Error::Dimension(format!(
            "expected [c, h, w] or [n, c, h, w], got {shape:?}"
        ))),
    }
}

/// Row-major matrix product `c (+)= op(a) · op(b)` with `op(a)` of size m×k
/// and `op(b)` of size k×n.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    let (rsa, csa) = if a_trans {
        (1, m as isize)
    } else {
        (k as isize, 1)
    };
    let (rsb, csb) = if b_trans {
        (1, k as isize)
    } else {
        (n as isize, 1)
    };
    let beta = if accumulate { 1.0 } else { 0.0 };
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    // SAFETY: slice lengths cover the strided extents asserted above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Single-sample kernels shared by the solvers and the gradient engine.
pub(crate) mod kernel {
    use super::*;

    /// Unfolds `input` (`[c, h, w]`) into columns `[c·k·k, oh·ow]`.
    pub fn im2col(
        g: &ConvGeometry,
        input: &[f64],
        h: usize,
        w: usize,
        oh: usize,
        ow: usize,
    ) -> Vec<f64> {
        let k = g.kernel;
        let p = oh * ow;
        let mut cols = vec![0.0; g.patch_len() * p];
        for c in 0..g.in_channels {
            let plane = &input[c * h * w..(c + 1) * h * w];
            for dy in 0..k {
                for dx in 0..k {
                    let row = (c * k + dy) * k + dx;
                    let dst = &mut cols[row * p..(row + 1) * p];
                    for oy in 0..oh {
                        let Some(iy) = g.source(oy, dy, h) else {
                            continue;
                        };
                        for ox in 0..ow {
                            if let Some(ix) = g.source(ox, dx, w) {
                                dst[oy * ow + ox] = plane[iy * w + ix];
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    /// Scatter-adds columns back into an image, the adjoint of `im2col`.
    pub fn col2im(
        g: &ConvGeometry,
        cols: &[f64],
        h: usize,
        w: usize,
        oh: usize,
        ow: usize,
        out: &mut [f64],
    ) {
        let k = g.kernel;
        let p = oh * ow;
        for c in 0..g.in_channels {
            let plane = &mut out[c * h * w..(c + 1) * h * w];
            for dy in 0..k {
                for dx in 0..k {
                    let row = (c * k + dy) * k + dx;
                    let src = &cols[row * p..(row + 1) * p];
                    for oy in 0..oh {
                        let Some(iy) = g.source(oy, dy, h) else {
                            continue;
                        };
                        for ox in 0..ow {
                            if let Some(ix) = g.source(ox, dx, w) {
                                plane[iy * w + ix] += src[oy * ow + ox];
                            }
                        }
                    }
                }
            }
        }
    }

    pub fn analyze(
        g: &ConvGeometry,
        weights: &[f64],
        input: &[f64],
        h: usize,
        w: usize,
        out: &mut [f64],
    ) {
        let (oh, ow) = g.output_hw(h, w).expect("validated geometry");
        let cols = im2col(g, input, h, w, oh, ow);
        gemm(
            g.atoms,
            g.patch_len(),
            oh * ow,
            weights,
            false,
            &cols,
            false,
            out,
            false,
        );
    }

    /// `out` must be zero-initialised, shape `[c, h, w]`.
    pub fn synthesize(
        g: &ConvGeometry,
        weights: &[f64],
        code: &[f64],
        h: usize,
        w: usize,
        out: &mut [f64],
    ) {
        let (oh, ow) = g.output_hw(h, w).expect("validated geometry");
        let mut cols = vec![0.0; g.patch_len() * oh * ow];
        gemm(
            g.patch_len(),
            g.atoms,
            oh * ow,
            weights,
            true,
            code,
            false,
            &mut cols,
            false,
        );
        col2im(g, &cols, h, w, oh, ow, out);
    }

    /// `dw += code_side · im2col(signal_side)ᵀ`; serves both the analysis
    /// weight gradient (code_side = output cotangent, signal_side = input)
    /// and the synthesis one (code_side = code, signal_side = cotangent).
    pub fn weight_grad(
        g: &ConvGeometry,
        code_side: &[f64],
        signal_side: &[f64],
        h: usize,
        w: usize,
        dw: &mut [f64],
    ) {
        let (oh, ow) = g.output_hw(h, w).expect("validated geometry");
        let cols = im2col(g, signal_side, h, w, oh, ow);
        gemm(
            g.atoms,
            oh * ow,
            g.patch_len(),
            code_side,
            false,
            &cols,
            true,
            dw,
            true,
        );
    }
}

/// Samples per partial sum when reducing weight gradients over a batch.
/// Fixed so that results do not depend on the worker count.
const GRAD_CHUNK: usize = 8;

/// Batched analysis over `[n, c, h, w]` data laid out contiguously.
pub(crate) fn analyze_batch(
    g: &ConvGeometry,
    weights: &[f64],
    input: &[f64],
    n: usize,
    h: usize,
    w: usize,
) -> Vec<f64> {
    let (oh, ow) = g.output_hw(h, w).expect("validated geometry");
    let in_len = g.in_channels * h * w;
    let out_len = g.atoms * oh * ow;
    let mut out = vec![0.0; n * out_len];
    out.par_chunks_mut(out_len)
        .zip(input.par_chunks(in_len))
        .for_each(|(o, x)| kernel::analyze(g, weights, x, h, w, o));
    out
}

pub(crate) fn synthesize_batch(
    g: &ConvGeometry,
    weights: &[f64],
    code: &[f64],
    n: usize,
    h: usize,
    w: usize,
) -> Vec<f64> {
    let (oh, ow) = g.output_hw(h, w).expect("validated geometry");
    let sig_len = g.in_channels * h * w;
    let code_len = g.atoms * oh * ow;
    let mut out = vec![0.0; n * sig_len];
    out.par_chunks_mut(sig_len)
        .zip(code.par_chunks(code_len))
        .for_each(|(o, z)| kernel::synthesize(g, weights, z, h, w, o));
    out
}

/// Sum over the batch of per-sample weight gradients, in fixed order.
pub(crate) fn weight_grad_batch(
    g: &ConvGeometry,
    code_side: &[f64],
    signal_side: &[f64],
    n: usize,
    h: usize,
    w: usize,
) -> Vec<f64> {
    let (oh, ow) = g.output_hw(h, w).expect("validated geometry");
    let sig_len = g.in_channels * h * w;
    let code_len = g.atoms * oh * ow;
    let nw = g.weight_count();
    let partials: Vec<Vec<f64>> = (0..n.div_ceil(GRAD_CHUNK))
        .into_par_iter()
        .map(|chunk| {
            let mut dw = vec![0.0; nw];
            for i in chunk * GRAD_CHUNK..((chunk + 1) * GRAD_CHUNK).min(n) {
                kernel::weight_grad(
                    g,
                    &code_side[i * code_len..(i + 1) * code_len],
                    &signal_side[i * sig_len..(i + 1) * sig_len],
                    h,
                    w,
                    &mut dw,
                );
            }
            dw
        })
        .collect();
    let mut total = vec![0.0; nw];
    for p in &partials {
        for (t, v) in total.iter_mut().zip(p) {
            *t += v;
        }
    }
    total
}

/// Dense row-major matrix, used for the materialized operator.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseMatrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl DenseMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        DenseMatrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.cols);
        (0..self.rows)
            .map(|r| self.row(r).iter().zip(x).map(|(a, b)| a * b).sum())
            .collect()
    }

    pub fn transpose_matvec(&self, y: &[f64]) -> Vec<f64> {
        assert_eq!(y.len(), self.rows);
        let mut out = vec![0.0; self.cols];
        for (r, &yr) in y.iter().enumerate() {
            for (o, a) in out.iter_mut().zip(self.row(r)) {
                *o += a * yr;
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpectralEstimate {
    /// Safety-scaled estimate of λ_max(DᵀD).
    pub bound: f64,
    pub iterations_used: usize,
    /// Relative change of the Rayleigh quotient at the last iteration.
    pub residual: f64,
    /// Set when the operator is identically zero.
    pub degenerate: bool,
}

/// A layer dictionary: geometry plus weights of shape `[atoms, in_channels, k, k]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvDictionary {
    geom: ConvGeometry,
    weights: Tensor,
}

impl ConvDictionary {
    pub fn new(geom: ConvGeometry, weights: Tensor) -> Result<Self> {
        geom.validate()?;
        if weights.shape() != geom.weight_shape() {
            return Err(Error::Dimension(format!(
                "weights have shape {:?}, geometry needs {:?}",
                weights.shape(),
                geom.weight_shape()
            )));
        }
        weights.check_finite()?;
        Ok(ConvDictionary { geom, weights })
    }

    /// Gaussian atoms with std `sqrt(2 / (in_channels * k²))`.
    pub fn random<R: Rng + ?Sized>(geom: ConvGeometry, rng: &mut R) -> Result<Self> {
        geom.validate()?;
        let std = (2.0 / geom.patch_len() as f64).sqrt();
        let weights = Tensor::randn(&geom.weight_shape(), std, rng);
        Ok(ConvDictionary { geom, weights })
    }

    /// 1×1 dictionary with a single scalar weight on one channel.
    pub fn scalar(weight: f64) -> Self {
        ConvDictionary {
            geom: ConvGeometry::new(1, 1, 1, 1, 0),
            weights: Tensor::from_parts(vec![1, 1, 1, 1], vec![weight]),
        }
    }

    /// 1×1 identity over `channels` channels.
    pub fn identity(channels: usize) -> Self {
        let mut data = vec![0.0; channels * channels];
        for c in 0..channels {
            data[c * channels + c] = 1.0;
        }
        ConvDictionary {
            geom: ConvGeometry::new(channels, channels, 1, 1, 0),
            weights: Tensor::from_parts(vec![channels, channels, 1, 1], data),
        }
    }

    pub fn geometry(&self) -> &ConvGeometry {
        &self.geom
    }

    pub fn weights(&self) -> &Tensor {
        &self.weights
    }

    pub fn set_weights(&mut self, weights: Tensor) -> Result<()> {
        *self = ConvDictionary::new(self.geom, weights)?;
        Ok(())
    }

    pub fn in_channels(&self) -> usize {
        self.geom.in_channels
    }

    pub fn atoms(&self) -> usize {
        self.geom.atoms
    }

    /// Rescales every atom to unit Euclidean norm. Zero atoms are left alone.
    pub fn normalize_atoms(&mut self) {
        let len = self.geom.patch_len();
        for atom in self.weights.data_mut().chunks_mut(len) {
            let norm = atom.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > 0.0 {
                atom.iter_mut().for_each(|v| *v /= norm);
            }
        }
    }

    pub fn atoms_unit_norm(&self, tol: f64) -> bool {
        self.weights
            .data()
            .chunks(self.geom.patch_len())
            .all(|a| (a.iter().map(|v| v * v).sum::<f64>().sqrt() - 1.0).abs() <= tol)
    }

    /// Largest |⟨a_i, a_j⟩| over distinct unit-normalised atoms (unshifted).
    pub fn mutual_coherence(&self) -> f64 {
        let len = self.geom.patch_len();
        let atoms: Vec<Vec<f64>> = self
            .weights
            .data()
            .chunks(len)
            .map(|a| {
                let n = a
                    .iter()
                    .map(|v| v * v)
                    .sum::<f64>()
                    .sqrt()
                    .max(f64::MIN_POSITIVE);
                a.iter().map(|v| v / n).collect()
            })
            .collect();
        let mut worst: f64 = 0.0;
        for i in 0..atoms.len() {
            for j in i + 1..atoms.len() {
                let d: f64 = atoms[i].iter().zip(&atoms[j]).map(|(a, b)| a * b).sum();
                worst = worst.max(d.abs());
            }
        }
        worst
    }

    /// Dᵀu: strided cross-correlation of `u` with every atom.
    pub fn analyze(&self, u: &Tensor) -> Result<Tensor> {
        let (n, [c, h, w], batched) = split_batch(u.shape())?;
        if c != self.geom.in_channels {
            return Err(Error::Dimension(format!(
                "input has {c} channels, dictionary expects {}",
                self.geom.in_channels
            )));
        }
        u.check_finite()?;
        let (oh, ow) = self.geom.output_hw(h, w)?;
        let data = analyze_batch(&self.geom, self.weights.data(), u.data(), n, h, w);
        let shape = if batched {
            vec![n, self.geom.atoms, oh, ow]
        } else {
            vec![self.geom.atoms, oh, ow]
        };
        Ok(Tensor::from_parts(shape, data))
    }

    /// Dγ, the adjoint of [`analyze`](Self::analyze).
    ///
    /// Without `out_hw` the smallest consistent signal size
    /// `(h' - 1)·s - 2p + k` is used. A supplied size must map back to the
    /// code size under the analysis geometry.
    pub fn synthesize(&self, gamma: &Tensor, out_hw: Option<(usize, usize)>) -> Result<Tensor> {
        let (n, [m, gh, gw], batched) = split_batch(gamma.shape())?;
        if m != self.geom.atoms {
            return Err(Error::Dimension(format!(
                "code has {m} channels, dictionary has {} atoms",
                self.geom.atoms
            )));
        }
        gamma.check_finite()?;
        let (h, w) = self.resolve_signal_hw(gh, gw, out_hw)?;
        let data = synthesize_batch(&self.geom, self.weights.data(), gamma.data(), n, h, w);
        let c = self.geom.in_channels;
        let shape = if batched {
            vec![n, c, h, w]
        } else {
            vec![c, h, w]
        };
        Ok(Tensor::from_parts(shape, data))
    }

    pub(crate) fn resolve_signal_hw(
        &self,
        gh: usize,
        gw: usize,
        out_hw: Option<(usize, usize)>,
    ) -> Result<(usize, usize)> {
        match out_hw {
            Some((h, w)) => {
                if self.geom.output_hw(h, w)? != (gh, gw) {
                    return Err(Error::Dimension(format!(
                        "signal size {h}x{w} does not produce code size {gh}x{gw}"
                    )));
                }
                Ok((h, w))
            }
            None => {
                let (h, w) = self.geom.input_hw(gh, gw)?;
                if self.geom.output_hw(h, w)? != (gh, gw) {
                    return Err(Error::Dimension(format!(
                        "no signal size is consistent with code size {gh}x{gw}; supply one"
                    )));
                }
                Ok((h, w))
            }
        }
    }

    /// Dense matrix `A` with `A·vec(u) = vec(analyze(u))`, built directly from
    /// the index arithmetic of the correlation.
    pub fn materialize(&self, input_shape: &[usize]) -> Result<DenseMatrix> {
        self.materialize_capped(input_shape, MATERIALIZE_CAP)
    }

    pub fn materialize_capped(&self, input_shape: &[usize], cap: usize) -> Result<DenseMatrix> {
        let [m, oh, ow] = self.geom.code_shape(input_shape)?;
        let [c, h, w] = as_chw(input_shape)?;
        let rows = m * oh * ow;
        let cols = c * h * w;
        if rows.saturating_mul(cols) > cap {
            return Err(Error::Resource(format!(
                "materializing {rows}x{cols} exceeds cap of {cap} entries"
            )));
        }
        let k = self.geom.kernel;
        let wts = self.weights.data();
        let mut a = DenseMatrix::zeros(rows, cols);
        for atom in 0..m {
            for oy in 0..oh {
                for ox in 0..ow {
                    let r = (atom * oh + oy) * ow + ox;
                    for ch in 0..c {
                        for dy in 0..k {
                            let Some(iy) = self.geom.source(oy, dy, h) else {
                                continue;
                            };
                            for dx in 0..k {
                                let Some(ix) = self.geom.source(ox, dx, w) else {
                                    continue;
                                };
                                let col = (ch * h + iy) * w + ix;
                                a.data[r * cols + col] += wts[((atom * c + ch) * k + dy) * k + dx];
                            }
                        }
                    }
                }
            }
        }
        Ok(a)
    }

    /// Power iteration on `v ↦ analyze(synthesize(v))` over the code space
    /// of a signal with shape `input_shape`.
    pub fn estimate_spectral_bound(
        &self,
        input_shape: &[usize],
        max_iters: usize,
        tol: f64,
    ) -> Result<SpectralEstimate> {
        self.estimate_spectral_bound_seeded(input_shape, max_iters, tol, SPECTRAL_SEED)
    }

    pub fn estimate_spectral_bound_seeded(
        &self,
        input_shape: &[usize],
        max_iters: usize,
        tol: f64,
        seed: u64,
    ) -> Result<SpectralEstimate> {
        if max_iters < 1 {
            return Err(Error::Parameter("max_iters must be >= 1".into()));
        }
        if !(tol > 0.0) {
            return Err(Error::Parameter("tol must be positive".into()));
        }
        let code_shape = self.geom.code_shape(input_shape)?;
        let [_, h, w] = as_chw(input_shape)?;
        let degenerate = SpectralEstimate {
            bound: SPECTRAL_FLOOR,
            iterations_used: 0,
            residual: 0.0,
            degenerate: true,
        };
        if self.weights.data().iter().all(|&v| v == 0.0) {
            return Ok(degenerate);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut v = Tensor::randn(&code_shape, 1.0, &mut rng);
        let n0 = v.norm();
        v = v.scale(1.0 / n0);
        let mut lambda = 0.0;
        let mut residual = f64::INFINITY;
        let mut used = 0;
        for it in 1..=max_iters {
            used = it;
            let av = self.analyze(&self.synthesize(&v, Some((h, w)))?)?;
            let next = v.dot(&av)?;
            let norm = av.norm();
            if norm == 0.0 || next <= 0.0 {
                return Ok(SpectralEstimate {
                    iterations_used: it,
                    ..degenerate
                });
            }
            residual = if it == 1 {
                f64::INFINITY
            } else {
                (next - lambda).abs() / next
            };
            lambda = next;
            v = av.scale(1.0 / norm);
            if residual < tol {
                break;
            }
        }
        Ok(SpectralEstimate {
            bound: lambda * SPECTRAL_SAFETY,
            iterations_used: used,
            residual,
            degenerate: false,
        })
    }
}
