//! Datasets, splits, synthetic sparse-coding problems and the `MLCT`
//! tensor file format.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::conv::{ConvDictionary, ConvGeometry};
use crate::error::{Error, Result};
use crate::pursuit::{Layer, LayerParams, MlcscModel};
use crate::tensor::Tensor;

pub const TENSOR_MAGIC: &[u8; 4] = b"MLCT";
pub const TENSOR_VERSION: u8 = 1;

/// Serializes a tensor: magic, version, rank, little-endian `u32` extents,
/// then little-endian `f32` values in row-major order.
pub fn encode_tensor(t: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(6 + 4 * t.rank() + 4 * t.len());
    out.extend_from_slice(TENSOR_MAGIC);
    out.push(TENSOR_VERSION);
    out.push(t.rank() as u8);
    for &e in t.shape() {
        out.extend_from_slice(&(e as u32).to_le_bytes());
    }
    for &v in t.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

pub fn decode_tensor(bytes: &[u8]) -> Result<Tensor> {
    if bytes.len() < 6 {
        return Err(Error::Format("tensor file truncated in header".into()));
    }
    if &bytes[..4] != TENSOR_MAGIC {
        return Err(Error::Format(format!("bad magic {:?}", &bytes[..4])));
    }
    if bytes[4] != TENSOR_VERSION {
        return Err(Error::Format(format!("unsupported version {}", bytes[4])));
    }
    let rank = bytes[5] as usize;
    let header = 6 + 4 * rank;
    if bytes.len() < header {
        return Err(Error::Format("tensor file truncated in extents".into()));
    }
    let shape: Vec<usize> = bytes[6..header]
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().unwrap()) as usize)
        .collect();
    let count: usize = shape.iter().product();
    let expected = header + 4 * count;
    if bytes.len() != expected {
        return Err(Error::Format(format!(
            "tensor payload is {} bytes, expected {}",
            bytes.len() - header,
            expected - header
        )));
    }
    let data = bytes[header..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    Tensor::new(shape, data).map_err(|e| Error::Format(e.to_string()))
}

pub fn write_tensor_file(path: impl AsRef<Path>, t: &Tensor) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_tensor(t)).map_err(|e| Error::io(path, e))
}

pub fn read_tensor_file(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_tensor(&bytes)
}

/// Labeled images `[n, c, h, w]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub classes: usize,
}

impl Dataset {
    pub fn new(
        name: impl Into<String>,
        images: Tensor,
        labels: Vec<usize>,
        classes: usize,
    ) -> Result<Self> {
        let n = match images.shape() {
            [n, _, _, _] => *n,
            s => {
                return Err(Error::Dimension(format!(
                    "images must be [n, c, h, w], got {s:?}"
                )))
            }
        };
        if labels.len() != n {
            return Err(Error::Dimension(format!(
                "{} labels for {n} images",
                labels.len()
            )));
        }
        if let Some(bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::Input(format!(
                "label {bad} out of range for {classes} classes"
            )));
        }
        Ok(Dataset {
            name: name.into(),
            images,
            labels,
            classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `[c, h, w]` of one image.
    pub fn image_shape(&self) -> &[usize] {
        &self.images.shape()[1..]
    }

    pub fn subset(&self, indices: &[usize], name: impl Into<String>) -> Result<Dataset> {
        if indices.is_empty() {
            return Err(Error::Input("empty subset".into()));
        }
        Ok(Dataset {
            name: name.into(),
            images: self.images.select_outer(indices)?,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            classes: self.classes,
        })
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }

    /// Images plus labels as an `MLCT` pair: `<stem>.images.mlct` and
    /// `<stem>.labels.mlct`.
    pub fn write_tensor_files(&self, dir: impl AsRef<Path>, stem: &str) -> Result<()> {
        let dir = dir.as_ref();
        write_tensor_file(dir.join(format!("{stem}.images.mlct")), &self.images)?;
        let labels = Tensor::from_vec(self.labels.iter().map(|&l| l as f64).collect());
        write_tensor_file(dir.join(format!("{stem}.labels.mlct")), &labels)
    }

    /// Reads a dataset exported with [`write_tensor_files`](Self::write_tensor_files)
    /// (e.g. pre-resized COVID-19 or Crack images).
    pub fn read_tensor_files(dir: impl AsRef<Path>, stem: &str, classes: usize) -> Result<Dataset> {
        let dir = dir.as_ref();
        let images = read_tensor_file(dir.join(format!("{stem}.images.mlct")))?;
        let labels = read_tensor_file(dir.join(format!("{stem}.labels.mlct")))?;
        let labels = labels
            .data()
            .iter()
            .map(|&v| {
                if v < 0.0 || v.fract() != 0.0 {
                    Err(Error::Format(format!("label {v} is not a class index")))
                } else {
                    Ok(v as usize)
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Dataset::new(stem, images, labels, classes)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CifarVariant {
    Cifar10,
    Cifar100,
}

impl CifarVariant {
    pub fn record_len(self) -> usize {
        match self {
            CifarVariant::Cifar10 => 3073,
            CifarVariant::Cifar100 => 3074,
        }
    }

    pub fn classes(self) -> usize {
        match self {
            CifarVariant::Cifar10 => 10,
            CifarVariant::Cifar100 => 100,
        }
    }
}

const CIFAR_PIXELS: usize = 3 * 32 * 32;

/// Parses CIFAR binary records from memory; pixels are mapped to `[0, 1]`.
pub fn parse_cifar(bytes: &[u8], variant: CifarVariant) -> Result<(Vec<f64>, Vec<usize>)> {
    let rec = variant.record_len();
    if bytes.is_empty() || !bytes.len().is_multiple_of(rec) {
        return Err(Error::Format(format!(
            "{} bytes is not a positive multiple of the {rec}-byte record",
            bytes.len()
        )));
    }
    let n = bytes.len() / rec;
    let mut pixels = Vec::with_capacity(n * CIFAR_PIXELS);
    let mut labels = Vec::with_capacity(n);
    for (i, r) in bytes.chunks_exact(rec).enumerate() {
        // CIFAR-100 records carry the coarse label first; the fine label is used.
        let label = r[rec - CIFAR_PIXELS - 1] as usize;
        if label >= variant.classes() {
            return Err(Error::Format(format!(
                "record {i}: label {label} out of range"
            )));
        }
        labels.push(label);
        pixels.extend(r[rec - CIFAR_PIXELS..].iter().map(|&b| b as f64 / 255.0));
    }
    Ok((pixels, labels))
}

pub fn load_cifar<P: AsRef<Path>>(paths: &[P], variant: CifarVariant) -> Result<Dataset> {
    let mut pixels = Vec::new();
    let mut labels = Vec::new();
    for p in paths {
        let p = p.as_ref();
        let bytes = fs::read(p).map_err(|e| Error::io(p, e))?;
        let (px, lb) = parse_cifar(&bytes, variant)
            .map_err(|e| Error::Format(format!("{}: {e}", p.display())))?;
        pixels.extend(px);
        labels.extend(lb);
    }
    let n = labels.len();
    if n == 0 {
        return Err(Error::Input("no CIFAR files given".into()));
    }
    let name = match variant {
        CifarVariant::Cifar10 => "cifar10",
        CifarVariant::Cifar100 => "cifar100",
    };
    Dataset::new(
        name,
        Tensor::from_parts(vec![n, 3, 32, 32], pixels),
        labels,
        variant.classes(),
    )
}

/// Seeded disjoint split into consecutive chunks of a random permutation.
pub fn split(ds: &Dataset, sizes: &[usize], seed: u64) -> Result<Vec<Dataset>> {
    let total: usize = sizes.iter().sum();
    if total > ds.len() {
        return Err(Error::Parameter(format!(
            "split sizes sum to {total} but the dataset has {} samples",
            ds.len()
        )));
    }
    let perm = split_indices(ds.len(), seed);
    let mut out = Vec::with_capacity(sizes.len());
    let mut start = 0;
    for (k, &s) in sizes.iter().enumerate() {
        let mut idx = perm[start..start + s].to_vec();
        idx.sort_unstable();
        out.push(ds.subset(&idx, format!("{}-part{k}", ds.name))?);
        start += s;
    }
    Ok(out)
}

/// The permutation used by [`split`].
pub fn split_indices(n: usize, seed: u64) -> Vec<usize> {
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    perm
}

/// Per-channel mean and standard deviation.
#[derive(Debug, Clone, PartialEq)]
pub struct Normalization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalization {
    pub fn fit(ds: &Dataset) -> Normalization {
        let c = ds.image_shape()[0];
        let plane: usize = ds.image_shape()[1..].iter().product();
        let mut sum = vec![0.0; c];
        let mut sq = vec![0.0; c];
        for img in ds.images.data().chunks(c * plane) {
            for ch in 0..c {
                for v in &img[ch * plane..(ch + 1) * plane] {
                    sum[ch] += v;
                    sq[ch] += v * v;
                }
            }
        }
        let count = (ds.len() * plane) as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / count).collect();
        let std = sq
            .iter()
            .zip(&mean)
            .map(|(s, m)| (s / count - m * m).max(0.0).sqrt().max(1e-8))
            .collect();
        Normalization { mean, std }
    }

    pub fn apply(&self, ds: &Dataset) -> Dataset {
        let c = ds.image_shape()[0];
        let plane: usize = ds.image_shape()[1..].iter().product();
        let mut images = ds.images.clone();
        for img in images.data_mut().chunks_mut(c * plane) {
            for ch in 0..c {
                for v in &mut img[ch * plane..(ch + 1) * plane] {
                    *v = (*v - self.mean[ch]) / self.std[ch];
                }
            }
        }
        Dataset {
            images,
            ..ds.clone()
        }
    }
}

/// Plain-text `key=value` manifest describing a prepared dataset.
pub fn dataset_manifest(parts: &[(&str, &Dataset)], norm: &Normalization) -> String {
    let mut s = String::new();
    if let Some((_, first)) = parts.first() {
        s.push_str(&format!("name={}\n", first.name));
        s.push_str(&format!("classes={}\n", first.classes));
    }
    for (key, ds) in parts {
        s.push_str(&format!("count.{key}={}\n", ds.len()));
    }
    s.push_str(&format!("norm.mean={}\n", join(&norm.mean)));
    s.push_str(&format!("norm.std={}\n", join(&norm.std)));
    s
}

fn join(v: &[f64]) -> String {
    v.iter()
        .map(|x| format!("{x:e}"))
        .collect::<Vec<_>>()
        .join(",")
}

/// Geometry and size of a synthetic multi-layer problem.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    /// `[c₀, m₁, …, m_L]`.
    pub channels: Vec<usize>,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    /// Signal height and width.
    pub spatial: (usize, usize),
    /// Nonzeros in Γ_L.
    pub sparsity: usize,
    pub sigma: f64,
}

/// A generated instance X = D₁⋯D_L Γ_L (+ noise).
#[derive(Debug, Clone)]
pub struct SynthProblem {
    pub model: MlcscModel,
    /// Γ₁ … Γ_L with Γᵢ₋₁ = Dᵢ Γᵢ.
    pub codes: Vec<Tensor>,
    /// Flat indices of the nonzeros of Γ_L.
    pub support: Vec<usize>,
    pub clean: Tensor,
    pub signal: Tensor,
    pub sigma: f64,
}

pub fn synth_sparse_problem(spec: &SynthSpec, seed: u64) -> Result<SynthProblem> {
    if spec.channels.len() < 2 {
        return Err(Error::Parameter(
            "channel plan needs at least two entries".into(),
        ));
    }
    if !(spec.sigma >= 0.0) {
        return Err(Error::Parameter("noise level must be nonnegative".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut layers = Vec::new();
    for w in spec.channels.windows(2) {
        let geom = ConvGeometry::new(w[0], w[1], spec.kernel, spec.stride, spec.padding);
        let mut dict = ConvDictionary::random(geom, &mut rng)?;
        dict.normalize_atoms();
        layers.push(Layer {
            dict,
            params: LayerParams::neutral(w[1]),
        });
    }
    let model = MlcscModel::new(layers)?;
    let input_shape = [spec.channels[0], spec.spatial.0, spec.spatial.1];
    let shapes = model.code_shapes(&input_shape)?;
    let last_shape = shapes.last().unwrap().clone();
    let dim: usize = last_shape.iter().product();
    if spec.sparsity > dim {
        return Err(Error::Parameter(format!(
            "sparsity {} exceeds code dimension {dim}",
            spec.sparsity
        )));
    }
    let mut support = sample(&mut rng, dim, spec.sparsity).into_vec();
    support.sort_unstable();
    let mut gamma_l = Tensor::zeros(&last_shape);
    for &s in &support {
        gamma_l.data_mut()[s] = rng.random_range(0.5..1.5);
    }
    let depth = model.depth();
    let mut codes = vec![gamma_l; depth];
    for i in (0..depth - 1).rev() {
        let hw = (shapes[i][1], shapes[i][2]);
        codes[i] = model
            .layer(i + 1)
            .dict
            .synthesize(&codes[i + 1], Some(hw))?;
    }
    let clean = model
        .layer(0)
        .dict
        .synthesize(&codes[0], Some(spec.spatial))?;
    let noise = Tensor::randn(clean.shape(), spec.sigma, &mut rng);
    let signal = clean.add(&noise)?;
    Ok(SynthProblem {
        model,
        codes,
        support,
        clean,
        signal,
        sigma: spec.sigma,
    })
}

pub(crate) fn write_text(path: &Path, text: &str) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}

/// Parses `key=value` lines, ignoring blanks and `#` comments.
pub fn parse_key_values(text: &str) -> Result<Vec<(String, String)>> {
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(|l| {
            l.split_once('=')
                .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
                .ok_or_else(|| Error::Format(format!("manifest line without '=': {l}")))
        })
        .collect()
}
