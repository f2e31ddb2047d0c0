//! Desk-scale learner: synthetic template images, a softmax classifier with
//! an optional ReLU hidden layer, analytic gradients and SGD.

use std::io::{Read, Write};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::rng::{derive_seed, SplitMix64};

/// Ordered `(name, dims)` records describing how a flat vector is laid out.
pub type ShapeDescriptor = Vec<(String, Vec<usize>)>;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub values: Vec<f64>,
    pub shape: ShapeDescriptor,
}

fn element_count(dims: &[usize]) -> usize {
    dims.iter().product()
}

pub fn flatten(tensors: &[Tensor]) -> Result<ModelParams> {
    let mut values = Vec::new();
    let mut shape = Vec::with_capacity(tensors.len());
    for t in tensors {
        if element_count(&t.dims) != t.data.len() {
            return Err(Error::Parameter(format!(
                "tensor {} has {} values but dims {:?}",
                t.name,
                t.data.len(),
                t.dims
            )));
        }
        values.extend_from_slice(&t.data);
        shape.push((t.name.clone(), t.dims.clone()));
    }
    Ok(ModelParams { values, shape })
}

pub fn unflatten(flat: &[f64], shape: &[(String, Vec<usize>)]) -> Result<Vec<Tensor>> {
    let total: usize = shape.iter().map(|(_, d)| element_count(d)).sum();
    if total != flat.len() {
        return Err(Error::Parameter(format!(
            "descriptor covers {total} values, vector has {}",
            flat.len()
        )));
    }
    let mut offset = 0;
    Ok(shape
        .iter()
        .map(|(name, dims)| {
            let len = element_count(dims);
            let t = Tensor { name: name.clone(), dims: dims.clone(), data: flat[offset..offset + len].to_vec() };
            offset += len;
            t
        })
        .collect())
}

impl ModelParams {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn clip(&mut self, bound: f64) {
        for v in &mut self.values {
            *v = v.clamp(-bound, bound);
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Writes the descriptor then the values.
    ///
    /// Layout (all little-endian): `u32` record count; per record `u32` name
    /// length, UTF-8 name, `u32` rank, `u64` per dim; then every coordinate
    /// as an 8-byte float.
    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        write_tensors(w, &unflatten(&self.values, &self.shape)?)
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        flatten(&read_tensors(r)?)
    }
}

pub fn write_tensors<W: Write>(w: &mut W, tensors: &[Tensor]) -> Result<()> {
    w.write_all(&(tensors.len() as u32).to_le_bytes())?;
    for t in tensors {
        w.write_all(&(t.name.len() as u32).to_le_bytes())?;
        w.write_all(t.name.as_bytes())?;
        w.write_all(&(t.dims.len() as u32).to_le_bytes())?;
        for &d in &t.dims {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
    }
    for t in tensors {
        for v in &t.data {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_tensors<R: Read>(r: &mut R) -> Result<Vec<Tensor>> {
    fn u32_le<R: Read>(r: &mut R) -> Result<u32> {
        let mut b = [0u8; 4];
        r.read_exact(&mut b)?;
        Ok(u32::from_le_bytes(b))
    }
    fn u64_le<R: Read>(r: &mut R) -> Result<u64> {
        let mut b = [0u8; 8];
        r.read_exact(&mut b)?;
        Ok(u64::from_le_bytes(b))
    }
    let count = u32_le(r)? as usize;
    let mut shape = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        let name_len = u32_le(r)? as usize;
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|e| Error::Parameter(format!("tensor name: {e}")))?;
        let rank = u32_le(r)? as usize;
        let dims = (0..rank).map(|_| u64_le(r).map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        shape.push((name, dims));
    }
    let mut tensors = Vec::with_capacity(shape.len());
    for (name, dims) in shape {
        let mut data = vec![0.0; element_count(&dims)];
        for v in &mut data {
            *v = f64::from_bits(u64_le(r)?);
        }
        tensors.push(Tensor { name, dims, data });
    }
    Ok(tensors)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticDataset {
    /// Row-major `side × side` images with pixels in `[0, 1]`.
    pub images: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
    pub side: usize,
    pub classes: usize,
    pub seed: u64,
}

/// Per-class templates, uniform in `[0, 1]`.
pub fn class_templates(seed: u64, side: usize, classes: usize) -> Vec<Vec<f64>> {
    let mut rng = SplitMix64::new(derive_seed(seed, &[0x7e3d]));
    (0..classes).map(|_| (0..side * side).map(|_| rng.next_f64()).collect()).collect()
}

pub fn gen_synthetic(seed: u64, n: usize, side: usize, classes: usize) -> Result<SyntheticDataset> {
    gen_synthetic_with_noise(seed, n, side, classes, 0.15)
}

/// Class `c` = `template_c` + N(0, sigma²) pixel noise, clamped to `[0, 1]`.
/// Labels cycle through the classes so every class has `n / classes` samples
/// (±1).
pub fn gen_synthetic_with_noise(
    seed: u64,
    n: usize,
    side: usize,
    classes: usize,
    sigma: f64,
) -> Result<SyntheticDataset> {
    if classes < 2 {
        return Err(Error::Parameter(format!("need at least 2 classes, got {classes}")));
    }
    if n < classes {
        return Err(Error::Parameter(format!("need n >= classes ({n} < {classes})")));
    }
    if side == 0 || !(sigma >= 0.0) {
        return Err(Error::Parameter("side must be positive and sigma non-negative".into()));
    }
    let templates = class_templates(seed, side, classes);
    let mut rng = rand::rngs::StdRng::seed_from_u64(derive_seed(seed, &[0x5a3b]));
    let normal = if sigma > 0.0 { Some(Normal::new(0.0, sigma).expect("finite sigma")) } else { None };
    let mut images = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let c = i % classes;
        let img = templates[c]
            .iter()
            .map(|&t| match &normal {
                Some(d) => (t + d.sample(&mut rng)).clamp(0.0, 1.0),
                None => t,
            })
            .collect();
        images.push(img);
        labels.push(c);
    }
    Ok(SyntheticDataset { images, labels, side, classes, seed })
}

impl SyntheticDataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.side * self.side
    }

    /// Contiguous slice `[start, end)` as its own dataset.
    pub fn subset(&self, start: usize, end: usize) -> SyntheticDataset {
        SyntheticDataset {
            images: self.images[start..end].to_vec(),
            labels: self.labels[start..end].to_vec(),
            side: self.side,
            classes: self.classes,
            seed: self.seed,
        }
    }

    /// `parts` contiguous shards of near-equal size.
    pub fn shard(&self, parts: usize) -> Vec<SyntheticDataset> {
        let n = self.len();
        (0..parts).map(|k| self.subset(k * n / parts, (k + 1) * n / parts)).collect()
    }

    pub fn to_tensors(&self) -> Vec<Tensor> {
        vec![
            Tensor {
                name: "images".into(),
                dims: vec![self.len(), self.dim()],
                data: self.images.iter().flatten().copied().collect(),
            },
            Tensor { name: "labels".into(), dims: vec![self.len()], data: self.labels.iter().map(|&l| l as f64).collect() },
        ]
    }
}

/// Softmax regression or a single ReLU hidden layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Architecture {
    Logistic { inputs: usize, classes: usize },
    Mlp { inputs: usize, hidden: usize, classes: usize },
}

impl Architecture {
    pub fn inputs(&self) -> usize {
        match *self {
            Architecture::Logistic { inputs, .. } | Architecture::Mlp { inputs, .. } => inputs,
        }
    }

    pub fn classes(&self) -> usize {
        match *self {
            Architecture::Logistic { classes, .. } | Architecture::Mlp { classes, .. } => classes,
        }
    }

    pub fn shape(&self) -> ShapeDescriptor {
        match *self {
            Architecture::Logistic { inputs, classes } => {
                vec![("w".into(), vec![classes, inputs]), ("b".into(), vec![classes])]
            }
            Architecture::Mlp { inputs, hidden, classes } => vec![
                ("w1".into(), vec![hidden, inputs]),
                ("b1".into(), vec![hidden]),
                ("w2".into(), vec![classes, hidden]),
                ("b2".into(), vec![classes]),
            ],
        }
    }

    pub fn param_count(&self) -> usize {
        self.shape().iter().map(|(_, d)| element_count(d)).sum()
    }

    /// Logistic models start at zero; hidden layers get a seeded uniform
    /// fan-in initialisation.
    pub fn init(&self, seed: u64) -> ModelParams {
        let mut values = vec![0.0; self.param_count()];
        if let Architecture::Mlp { inputs, hidden, classes } = *self {
            let mut rng = SplitMix64::new(seed);
            let a1 = (1.0 / inputs as f64).sqrt();
            let a2 = (1.0 / hidden as f64).sqrt();
            let (w1, rest) = values.split_at_mut(hidden * inputs);
            for v in w1 {
                *v = (2.0 * rng.next_f64() - 1.0) * a1;
            }
            let w2 = &mut rest[hidden..hidden + classes * hidden];
            for v in w2 {
                *v = (2.0 * rng.next_f64() - 1.0) * a2;
            }
        }
        ModelParams { values, shape: self.shape() }
    }

    fn check(&self, params: &ModelParams, input_dim: usize) -> Result<()> {
        if params.values.len() != self.param_count() || params.shape != self.shape() {
            return Err(Error::Parameter("parameters do not match the architecture".into()));
        }
        if input_dim != self.inputs() {
            return Err(Error::Parameter(format!(
                "model expects {} inputs, data has {input_dim}",
                self.inputs()
            )));
        }
        Ok(())
    }

    /// Class logits for one input.
    pub fn logits(&self, params: &[f64], x: &[f64]) -> Vec<f64> {
        match *self {
            Architecture::Logistic { inputs, classes } => {
                let (w, b) = params.split_at(classes * inputs);
                affine(w, b, x)
            }
            Architecture::Mlp { inputs, hidden, classes } => {
                let (w1, rest) = params.split_at(hidden * inputs);
                let (b1, rest) = rest.split_at(hidden);
                let (w2, b2) = rest.split_at(classes * hidden);
                let h: Vec<f64> = affine(w1, b1, x).into_iter().map(|a| a.max(0.0)).collect();
                affine(w2, b2, &h)
            }
        }
    }

    pub fn predict(&self, params: &[f64], x: &[f64]) -> usize {
        argmax(&self.logits(params, x))
    }

    /// Cross-entropy of one sample and its gradient, accumulated into `grad`
    /// with weight `scale`.
    pub fn loss_and_grad(&self, params: &[f64], x: &[f64], label: usize, scale: f64, grad: &mut [f64]) -> f64 {
        match *self {
            Architecture::Logistic { inputs, classes } => {
                let (w, b) = params.split_at(classes * inputs);
                let p = softmax(&affine(w, b, x));
                let (gw, gb) = grad.split_at_mut(classes * inputs);
                for c in 0..classes {
                    let delta = p[c] - if c == label { 1.0 } else { 0.0 };
                    gb[c] += scale * delta;
                    for (g, xi) in gw[c * inputs..(c + 1) * inputs].iter_mut().zip(x) {
                        *g += scale * delta * xi;
                    }
                }
                -p[label].max(f64::MIN_POSITIVE).ln()
            }
            Architecture::Mlp { inputs, hidden, classes } => {
                let (w1, rest) = params.split_at(hidden * inputs);
                let (b1, rest) = rest.split_at(hidden);
                let (w2, b2) = rest.split_at(classes * hidden);
                let pre = affine(w1, b1, x);
                let h: Vec<f64> = pre.iter().map(|a| a.max(0.0)).collect();
                let p = softmax(&affine(w2, b2, &h));
                let (gw1, grest) = grad.split_at_mut(hidden * inputs);
                let (gb1, grest) = grest.split_at_mut(hidden);
                let (gw2, gb2) = grest.split_at_mut(classes * hidden);
                let mut back = vec![0.0; hidden];
                for c in 0..classes {
                    let delta = p[c] - if c == label { 1.0 } else { 0.0 };
                    gb2[c] += scale * delta;
                    for j in 0..hidden {
                        gw2[c * hidden + j] += scale * delta * h[j];
                        back[j] += delta * w2[c * hidden + j];
                    }
                }
                for j in 0..hidden {
                    if pre[j] <= 0.0 {
                        continue;
                    }
                    gb1[j] += scale * back[j];
                    for (g, xi) in gw1[j * inputs..(j + 1) * inputs].iter_mut().zip(x) {
                        *g += scale * back[j] * xi;
                    }
                }
                -p[label].max(f64::MIN_POSITIVE).ln()
            }
        }
    }

    /// Gradient of the cross-entropy of a single sample.
    pub fn sample_gradient(&self, params: &[f64], x: &[f64], label: usize) -> (f64, Vec<f64>) {
        let mut grad = vec![0.0; params.len()];
        let loss = self.loss_and_grad(params, x, label, 1.0, &mut grad);
        (loss, grad)
    }

    pub fn loss(&self, params: &[f64], x: &[f64], label: usize) -> f64 {
        let p = softmax(&self.logits(params, x));
        -p[label].max(f64::MIN_POSITIVE).ln()
    }
}

fn affine(w: &[f64], b: &[f64], x: &[f64]) -> Vec<f64> {
    b.iter()
        .enumerate()
        .map(|(r, &bias)| bias + w[r * x.len()..(r + 1) * x.len()].iter().zip(x).map(|(a, b)| a * b).sum::<f64>())
        .collect()
}

pub fn softmax(z: &[f64]) -> Vec<f64> {
    let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - max).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub clip_bound_c: f64,
    /// Seeds the per-epoch shuffle.
    pub shuffle_seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig { learning_rate: 0.1, epochs: 1, batch_size: 8, clip_bound_c: 1.0, shuffle_seed: 0 }
    }
}

/// Mini-batch SGD on mean cross-entropy; the result is clipped to `[-C, C]`.
pub fn train_local(
    arch: &Architecture,
    params: &ModelParams,
    data: &SyntheticDataset,
    cfg: &TrainConfig,
) -> Result<ModelParams> {
    arch.check(params, data.dim())?;
    if cfg.batch_size == 0 || !(cfg.learning_rate > 0.0) || !(cfg.clip_bound_c > 0.0) {
        return Err(Error::Parameter("batch size, learning rate and clip bound must be positive".into()));
    }
    let mut out = params.clone();
    if cfg.epochs == 0 || data.is_empty() {
        return Ok(out);
    }
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut rng = SplitMix64::new(cfg.shuffle_seed);
    let mut grad = vec![0.0; out.values.len()];
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            grad.iter_mut().for_each(|g| *g = 0.0);
            let scale = 1.0 / batch.len() as f64;
            for &i in batch {
                epoch_loss += arch.loss_and_grad(&out.values, &data.images[i], data.labels[i], scale, &mut grad);
            }
            for (w, g) in out.values.iter_mut().zip(&grad) {
                *w -= cfg.learning_rate * g;
            }
        }
        if !epoch_loss.is_finite() || out.values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NumericDivergence(format!("non-finite loss in epoch {epoch}")));
        }
    }
    out.clip(cfg.clip_bound_c);
    Ok(out)
}

/// Fraction of argmax-correct predictions.
pub fn evaluate(arch: &Architecture, params: &ModelParams, data: &SyntheticDataset) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Parameter("cannot evaluate on an empty dataset".into()));
    }
    arch.check(params, data.dim())?;
    let correct = data
        .images
        .iter()
        .zip(&data.labels)
        .filter(|(x, &y)| arch.predict(&params.values, x) == y)
        .count();
    Ok(correct as f64 / data.len() as f64)
}

/// Draws `count` distinct coordinates uniformly.
pub fn sample_coordinates<R: Rng>(len: usize, count: usize, rng: &mut R) -> Vec<usize> {
    rand::seq::index::sample(rng, len, count.min(len)).into_vec()
}
