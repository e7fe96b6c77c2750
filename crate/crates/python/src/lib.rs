//! Python bindings. Tensors cross the boundary as a shape list plus a flat
//! row-major list of floats; no numpy dependency.

use mlcsc_core::data::{self, SynthSpec};
use mlcsc_core::models::{config_param_count, NetConfig};
use mlcsc_core::{pursuit, AnchorPolicy, ConvGeometry, Error, Shrinkage};
use pyo3::exceptions::{PyOSError, PyValueError};
use pyo3::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io { .. } => PyOSError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

#[pyclass(name = "Tensor", module = "mlcsc", skip_from_py_object)]
#[derive(Clone)]
pub struct PyTensor(mlcsc_core::Tensor);

#[pymethods]
impl PyTensor {
    #[new]
    fn new(shape: Vec<usize>, data: Vec<f64>) -> PyResult<Self> {
        mlcsc_core::Tensor::new(shape, data)
            .map(PyTensor)
            .map_err(py_err)
    }

    #[staticmethod]
    #[pyo3(signature = (shape, std=1.0, seed=0))]
    fn randn(shape: Vec<usize>, std: f64, seed: u64) -> Self {
        PyTensor(mlcsc_core::Tensor::randn(&shape, std, &mut rng(seed)))
    }

    #[getter]
    fn shape(&self) -> Vec<usize> {
        self.0.shape().to_vec()
    }

    fn tolist(&self) -> Vec<f64> {
        self.0.data().to_vec()
    }

    fn norm(&self) -> f64 {
        self.0.norm()
    }

    fn dot(&self, other: PyRef<'_, PyTensor>) -> PyResult<f64> {
        self.0.dot(&other.0).map_err(py_err)
    }

    fn count_nonzero(&self, tol: f64) -> usize {
        self.0.count_nonzero(tol)
    }

    fn __len__(&self) -> usize {
        self.0.len()
    }

    fn __repr__(&self) -> String {
        format!("Tensor(shape={:?})", self.0.shape())
    }
}

#[pyclass(name = "ConvDictionary", module = "mlcsc")]
pub struct PyConvDictionary(mlcsc_core::ConvDictionary);

#[pymethods]
impl PyConvDictionary {
    /// Random dictionary with unit-variance taps.
    #[staticmethod]
    #[pyo3(signature = (in_channels, atoms, kernel, stride=1, padding=0, circular=false, seed=0))]
    fn random(
        in_channels: usize,
        atoms: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        circular: bool,
        seed: u64,
    ) -> PyResult<Self> {
        let mut g = ConvGeometry::new(in_channels, atoms, kernel, stride, padding);
        if circular {
            g = g.circular();
        }
        mlcsc_core::ConvDictionary::random(g, &mut rng(seed))
            .map(PyConvDictionary)
            .map_err(py_err)
    }

    #[staticmethod]
    #[pyo3(signature = (weights, stride=1, padding=0))]
    fn from_weights(weights: PyRef<'_, PyTensor>, stride: usize, padding: usize) -> PyResult<Self> {
        let s = weights.0.shape();
        if s.len() != 4 {
            return Err(PyValueError::new_err(
                "weights must be [atoms, channels, k, k]",
            ));
        }
        let g = ConvGeometry::new(s[1], s[0], s[2], stride, padding);
        mlcsc_core::ConvDictionary::new(g, weights.0.clone())
            .map(PyConvDictionary)
            .map_err(py_err)
    }

    /// Dᵀu.
    fn analyze(&self, u: PyRef<'_, PyTensor>) -> PyResult<PyTensor> {
        self.0.analyze(&u.0).map(PyTensor).map_err(py_err)
    }

    /// DΓ, the adjoint of `analyze`.
    #[pyo3(signature = (gamma, out_hw=None))]
    fn synthesize(
        &self,
        gamma: PyRef<'_, PyTensor>,
        out_hw: Option<(usize, usize)>,
    ) -> PyResult<PyTensor> {
        self.0
            .synthesize(&gamma.0, out_hw)
            .map(PyTensor)
            .map_err(py_err)
    }

    #[pyo3(signature = (input_shape, max_iters=100, tol=1e-6))]
    fn spectral_bound(&self, input_shape: Vec<usize>, max_iters: usize, tol: f64) -> PyResult<f64> {
        self.0
            .estimate_spectral_bound(&input_shape, max_iters, tol)
            .map(|e| e.bound)
            .map_err(py_err)
    }

    fn mutual_coherence(&self) -> f64 {
        self.0.mutual_coherence()
    }

    #[getter]
    fn weights(&self) -> PyTensor {
        PyTensor(self.0.weights().clone())
    }
}

#[pyclass(name = "Model", module = "mlcsc")]
pub struct PyModel(mlcsc_core::MlcscModel);

#[pymethods]
impl PyModel {
    /// Random model for `channels = [c0, m1, ..., mL]` sharing one geometry.
    #[staticmethod]
    #[pyo3(signature = (channels, kernel, stride=1, padding=0, soft=false, seed=0))]
    fn random(
        channels: Vec<usize>,
        kernel: usize,
        stride: usize,
        padding: usize,
        soft: bool,
        seed: u64,
    ) -> PyResult<Self> {
        let m = mlcsc_core::MlcscModel::random(&channels, kernel, stride, padding, &mut rng(seed))
            .map_err(py_err)?;
        Ok(PyModel(m.with_shrinkage(if soft {
            Shrinkage::Soft
        } else {
            Shrinkage::Relu
        })))
    }

    #[getter]
    fn depth(&self) -> usize {
        self.0.depth()
    }

    fn dictionary(&self, layer: usize) -> PyResult<PyConvDictionary> {
        self.0
            .layers()
            .get(layer)
            .map(|l| PyConvDictionary(l.dict.clone()))
            .ok_or_else(|| PyValueError::new_err(format!("no layer {layer}")))
    }

    /// "soft" (ξ is a threshold) or "relu" (ξ is a bias).
    fn set_shrinkage(&mut self, mode: &str) -> PyResult<()> {
        let s = match mode {
            "soft" => Shrinkage::Soft,
            "relu" => Shrinkage::Relu,
            other => {
                return Err(PyValueError::new_err(format!(
                    "unknown shrinkage '{other}'"
                )))
            }
        };
        self.0 = self.0.clone().with_shrinkage(s);
        Ok(())
    }

    fn set_xi(&mut self, xi: f64) {
        self.0.set_xi(xi);
    }

    fn set_beta(&mut self, beta: f64) {
        self.0.set_beta(beta);
    }

    #[pyo3(signature = (input_shape, max_iters=100, tol=1e-6))]
    fn set_beta_from_spectrum(
        &mut self,
        input_shape: Vec<usize>,
        max_iters: usize,
        tol: f64,
    ) -> PyResult<()> {
        self.0
            .set_beta_from_spectrum(&input_shape, max_iters, tol)
            .map_err(py_err)
    }

    fn betas(&self) -> Vec<f64> {
        self.0.layers().iter().map(|l| l.params.beta).collect()
    }
}

fn reps(r: mlcsc_core::Result<mlcsc_core::PursuitResult>) -> PyResult<Vec<PyTensor>> {
    r.map(|r| r.representations.into_iter().map(PyTensor).collect())
        .map_err(py_err)
}

fn anchor(name: &str) -> PyResult<AnchorPolicy> {
    match name {
        "zero" => Ok(AnchorPolicy::Zero),
        "analysis" => Ok(AnchorPolicy::Analysis),
        "literal" => Ok(AnchorPolicy::Literal),
        other => Err(PyValueError::new_err(format!("unknown anchor '{other}'"))),
    }
}

#[pyfunction]
fn lta(model: PyRef<'_, PyModel>, x: PyRef<'_, PyTensor>) -> PyResult<Vec<PyTensor>> {
    reps(pursuit::lta_forward(&model.0, &x.0))
}

/// Layered ISTA; `warm` starts from the thresholding pass so iters=0 is LTA.
#[pyfunction]
#[pyo3(signature = (model, x, iters, warm=true))]
fn lbp(
    model: PyRef<'_, PyModel>,
    x: PyRef<'_, PyTensor>,
    iters: usize,
    warm: bool,
) -> PyResult<Vec<PyTensor>> {
    if warm {
        reps(pursuit::lbp_forward_warm(&model.0, &x.0, iters))
    } else {
        reps(pursuit::lbp_forward(&model.0, &x.0, iters))
    }
}

#[pyfunction]
fn ml_ista(
    model: PyRef<'_, PyModel>,
    x: PyRef<'_, PyTensor>,
    iters: usize,
) -> PyResult<Vec<PyTensor>> {
    reps(pursuit::mlista_forward(&model.0, &x.0, iters))
}

#[pyfunction]
#[pyo3(signature = (model, x, anchor_policy="analysis"))]
fn wsebp(
    model: PyRef<'_, PyModel>,
    x: PyRef<'_, PyTensor>,
    anchor_policy: &str,
) -> PyResult<Vec<PyTensor>> {
    reps(pursuit::wsebp_forward(
        &model.0,
        &x.0,
        anchor(anchor_policy)?,
    ))
}

/// x̂ = D₁ ⋯ D_i Γ_i from the layer-`from_layer` representation.
#[pyfunction]
fn reconstruct(
    model: PyRef<'_, PyModel>,
    reps: Vec<PyRef<'_, PyTensor>>,
    from_layer: usize,
) -> PyResult<PyTensor> {
    let reps: Vec<_> = reps.iter().map(|t| t.0.clone()).collect();
    pursuit::reconstruct(&model.0, &reps, from_layer)
        .map(PyTensor)
        .map_err(py_err)
}

#[pyfunction]
fn nmse(x: PyRef<'_, PyTensor>, x_hat: PyRef<'_, PyTensor>) -> PyResult<f64> {
    pursuit::nmse(&x.0, &x_hat.0).map_err(py_err)
}

/// Seeded synthetic problem; returns (model, signal, true codes, support).
#[pyfunction]
#[pyo3(signature = (channels, kernel, spatial, sparsity, stride=1, padding=0, sigma=0.0, seed=0))]
#[allow(clippy::too_many_arguments)]
fn synthetic_problem(
    channels: Vec<usize>,
    kernel: usize,
    spatial: (usize, usize),
    sparsity: usize,
    stride: usize,
    padding: usize,
    sigma: f64,
    seed: u64,
) -> PyResult<(PyModel, PyTensor, Vec<PyTensor>, Vec<usize>)> {
    let spec = SynthSpec {
        channels,
        kernel,
        stride,
        padding,
        spatial,
        sparsity,
        sigma,
    };
    let p = data::synth_sparse_problem(&spec, seed).map_err(py_err)?;
    Ok((
        PyModel(p.model),
        PyTensor(p.signal),
        p.codes.into_iter().map(PyTensor).collect(),
        p.support,
    ))
}

/// Trainable parameter count of a preset classifier.
#[pyfunction]
fn param_count(preset: &str) -> PyResult<usize> {
    config_param_count(&NetConfig::by_name(preset).map_err(py_err)?).map_err(py_err)
}

#[pyfunction]
fn read_tensor(path: &str) -> PyResult<PyTensor> {
    data::read_tensor_file(path).map(PyTensor).map_err(py_err)
}

#[pyfunction]
fn write_tensor(path: &str, t: PyRef<'_, PyTensor>) -> PyResult<()> {
    data::write_tensor_file(path, &t.0).map_err(py_err)
}

#[pymodule]
fn mlcsc(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyTensor>()?;
    m.add_class::<PyConvDictionary>()?;
    m.add_class::<PyModel>()?;
    for f in [
        wrap_pyfunction!(lta, m)?,
        wrap_pyfunction!(lbp, m)?,
        wrap_pyfunction!(ml_ista, m)?,
        wrap_pyfunction!(wsebp, m)?,
        wrap_pyfunction!(reconstruct, m)?,
        wrap_pyfunction!(nmse, m)?,
        wrap_pyfunction!(synthetic_problem, m)?,
        wrap_pyfunction!(param_count, m)?,
        wrap_pyfunction!(read_tensor, m)?,
        wrap_pyfunction!(write_tensor, m)?,
    ] {
        m.add_function(f)?;
    }
    Ok(())
}
