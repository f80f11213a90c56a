//! Candidate fitness: one-epoch proxy training on a small dataset, or a
//! planted closed-form surrogate with known optimum.

use std::fs;
use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::{cross_entropy, instantiate, AdamW, ModelInstance, Tensor};
use crate::ir::{Attr, Hyperparams, LayerKind, NetworkDef, Optimizer};
use crate::netdsl;
use crate::verifier::verify_net;

pub const CFTD_MAGIC: &[u8; 4] = b"CFTD";
pub const CFTD_VERSION: u32 = 1;
const HEADER_LEN: usize = 4 + 7 * 4;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("candidate must verify as valid before evaluation: {0}")]
    VerificationRequired(String),
    #[error("dataset does not match the network: {0}")]
    DataMismatch(String),
    #[error("surrogate needs at least two convs and one hidden linear layer")]
    TopologyUnsupported,
    #[error("invalid hyperparameters")]
    InvalidHyperparams,
}

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("malformed dataset at byte {offset}: {message}")]
    Format { offset: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

fn format_err(offset: usize, message: impl Into<String>) -> DatasetError {
    DatasetError::Format { offset, message: message.into() }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub images: Tensor,
    pub labels: Vec<u16>,
    pub num_classes: usize,
    /// Sorted validation indices; every other index is a training sample.
    pub val: Vec<usize>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `(C, H, W)` of one sample.
    pub fn sample_shape(&self) -> (usize, usize, usize) {
        (self.images.shape[1], self.images.shape[2], self.images.shape[3])
    }

    pub fn train(&self) -> Vec<usize> {
        let mut is_val = vec![false; self.len()];
        for &i in &self.val {
            is_val[i] = true;
        }
        (0..self.len()).filter(|&i| !is_val[i]).collect()
    }

    /// Gathers the samples at `idx` into one batch tensor.
    pub fn batch(&self, idx: &[usize]) -> (Tensor, Vec<usize>) {
        let (c, h, w) = self.sample_shape();
        let row = c * h * w;
        let mut data = Vec::with_capacity(idx.len() * row);
        for &i in idx {
            data.extend_from_slice(&self.images.data[i * row..(i + 1) * row]);
        }
        (Tensor::from_vec(&[idx.len(), c, h, w], data), idx.iter().map(|&i| self.labels[i] as usize).collect())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let (c, h, w) = self.sample_shape();
        let mut out = Vec::with_capacity(HEADER_LEN + self.images.data.len() * 4 + self.len() * 2 + self.val.len() * 4);
        out.extend_from_slice(CFTD_MAGIC);
        for v in [CFTD_VERSION, self.len() as u32, c as u32, h as u32, w as u32, self.num_classes as u32, self.val.len() as u32] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for v in &self.images.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for l in &self.labels {
            out.extend_from_slice(&l.to_le_bytes());
        }
        for &i in &self.val {
            out.extend_from_slice(&(i as u32).to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Dataset, DatasetError> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != CFTD_MAGIC {
            return Err(format_err(0, "bad magic, expected CFTD"));
        }
        let version = r.u32()?;
        if version != CFTD_VERSION {
            return Err(format_err(4, format!("unsupported version {version}")));
        }
        let mut header = [0usize; 6];
        for (i, slot) in header.iter_mut().enumerate() {
            let v = r.u32()? as usize;
            if v == 0 && i < 5 {
                return Err(format_err(r.pos - 4, "header field must be positive"));
            }
            *slot = v;
        }
        let [n, c, h, w, num_classes, n_val] = header;
        if n_val > n {
            return Err(format_err(r.pos - 4, format!("{n_val} validation indices for {n} samples")));
        }
        let numel = n
            .checked_mul(c * h * w)
            .filter(|m| m.checked_mul(4).is_some_and(|b| b <= bytes.len()))
            .ok_or_else(|| format_err(HEADER_LEN, "image payload larger than the file"))?;
        let images = r.take(numel * 4)?.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect();
        let mut labels = Vec::with_capacity(n);
        for _ in 0..n {
            let at = r.pos;
            let l = u16::from_le_bytes(r.take(2)?.try_into().unwrap());
            if l as usize >= num_classes {
                return Err(format_err(at, format!("label {l} outside 0..{num_classes}")));
            }
            labels.push(l);
        }
        let mut val = Vec::with_capacity(n_val);
        let mut seen = vec![false; n];
        for _ in 0..n_val {
            let at = r.pos;
            let i = r.u32()? as usize;
            if i >= n || seen[i] {
                return Err(format_err(at, format!("validation index {i} is out of range or repeated")));
            }
            seen[i] = true;
            val.push(i);
        }
        if r.pos != bytes.len() {
            return Err(format_err(r.pos, "trailing bytes after validation indices"));
        }
        val.sort_unstable();
        Ok(Dataset { images: Tensor::from_vec(&[n, c, h, w], images), labels, num_classes, val })
    }

    pub fn save(&self, path: &Path) -> Result<(), DatasetError> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, len: usize) -> Result<&'a [u8], DatasetError> {
        if self.bytes.len() - self.pos < len {
            return Err(format_err(self.bytes.len(), format!("truncated: needed {len} more bytes at {}", self.pos)));
        }
        let out = &self.bytes[self.pos..self.pos + len];
        self.pos += len;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32, DatasetError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

pub fn load_dataset(path: &Path) -> Result<Dataset, DatasetError> {
    Dataset::from_bytes(&fs::read(path)?)
}

/// Parameters of the synthetic prototype-plus-noise generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub samples: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub classes: usize,
    pub n_val: usize,
    /// Side of the coarse prototype grid that is upsampled to full resolution.
    pub grid: usize,
    pub noise: f32,
    pub seed: u64,
}

impl SyntheticSpec {
    /// The `toy100` fixture: 1,000 samples of 3x32x32 over 100 classes.
    pub fn toy100() -> Self {
        SyntheticSpec { samples: 1000, channels: 3, height: 32, width: 32, classes: 100, n_val: 200, grid: 4, noise: 1.0, seed: 100 }
    }

    /// Two well separated classes on 1x8x8 inputs.
    pub fn blobs() -> Self {
        SyntheticSpec { samples: 400, channels: 1, height: 8, width: 8, classes: 2, n_val: 100, grid: 2, noise: 0.5, seed: 2 }
    }
}

/// Each class gets a random coarse pattern per channel; samples are the
/// upsampled pattern plus Gaussian noise. Labels cycle through the classes in
/// a shuffled order and the validation split is a uniform subset.
pub fn synthetic(spec: &SyntheticSpec) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (c, h, w, g) = (spec.channels, spec.height, spec.width, spec.grid.max(1));
    let protos: Vec<f32> = (0..spec.classes * c * g * g).map(|_| StandardNormal.sample(&mut rng)).collect();
    let mut labels: Vec<u16> = (0..spec.samples).map(|i| (i % spec.classes) as u16).collect();
    labels.shuffle(&mut rng);
    let mut data = Vec::with_capacity(spec.samples * c * h * w);
    for &label in &labels {
        let proto = &protos[label as usize * c * g * g..(label as usize + 1) * c * g * g];
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    let base = proto[(ch * g + y * g / h) * g + x * g / w];
                    let noise: f32 = StandardNormal.sample(&mut rng);
                    data.push(base + spec.noise * noise);
                }
            }
        }
    }
    let mut val = index::sample(&mut rng, spec.samples, spec.n_val.min(spec.samples)).into_vec();
    val.sort_unstable();
    Dataset { images: Tensor::from_vec(&[spec.samples, c, h, w], data), labels, num_classes: spec.classes, val }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvaluatorKind {
    Micro,
    Surrogate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub accuracy: f64,
    pub params: u64,
    pub wall_time: f64,
    pub evaluator_kind: EvaluatorKind,
}

/// Top-1 accuracy on the validation split in inference mode.
pub fn validation_accuracy(model: &mut ModelInstance, data: &Dataset, batch_size: usize) -> Result<f64, EvalError> {
    if data.val.is_empty() {
        return Err(EvalError::DataMismatch("empty validation split".into()));
    }
    let mut correct = 0usize;
    for chunk in data.val.chunks(batch_size.max(1)) {
        let (x, y) = data.batch(chunk);
        let logits = model.forward(&x, false).map_err(|e| EvalError::DataMismatch(e.to_string()))?;
        let k = logits.shape[1];
        for (row, &label) in logits.data.chunks(k).zip(&y) {
            let pred = row.iter().enumerate().fold(0, |best, (i, v)| if *v > row[best] { i } else { best });
            correct += usize::from(pred == label);
        }
    }
    Ok(correct as f64 / data.val.len() as f64)
}

/// Trains for `hp.epochs` epochs from a fresh init and reports validation accuracy.
pub fn train_proxy(src: &str, hp: &Hyperparams, data: &Dataset, seed: u64) -> Result<EvalResult, EvalError> {
    let net = netdsl::parse(src).map_err(|e| EvalError::VerificationRequired(e.to_string()))?;
    train_net(&net, hp, data, seed)
}

pub fn train_net(net: &NetworkDef, hp: &Hyperparams, data: &Dataset, seed: u64) -> Result<EvalResult, EvalError> {
    let started = Instant::now();
    if !hp.is_valid() {
        return Err(EvalError::InvalidHyperparams);
    }
    let report = verify_net(net);
    if !report.is_valid() {
        return Err(EvalError::VerificationRequired(report.verdict.to_string()));
    }
    let i = net.input_shape;
    if data.sample_shape() != (i.channels as usize, i.height as usize, i.width as usize) {
        return Err(EvalError::DataMismatch(format!(
            "network expects {}x{}x{}, dataset has {:?}",
            i.channels,
            i.height,
            i.width,
            data.sample_shape()
        )));
    }
    if data.num_classes as u64 != net.num_classes {
        return Err(EvalError::DataMismatch(format!(
            "network predicts {} classes, dataset has {}",
            net.num_classes, data.num_classes
        )));
    }
    let mut model = instantiate(net, seed).map_err(|e| EvalError::DataMismatch(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7a11);
    let mut train = data.train();
    let lr = hp.learning_rate as f32;
    let mut adamw = AdamW::new(lr);
    for _ in 0..hp.epochs {
        train.shuffle(&mut rng);
        for chunk in train.chunks(hp.batch_size as usize) {
            let (x, y) = data.batch(chunk);
            let logits = model.forward(&x, true).map_err(|e| EvalError::DataMismatch(e.to_string()))?;
            let (_, grad) = cross_entropy(&logits, &y).map_err(|e| EvalError::DataMismatch(e.to_string()))?;
            model.backward(&grad).map_err(|e| EvalError::DataMismatch(e.to_string()))?;
            match hp.optimizer {
                Optimizer::Sgd => {
                    model.sgd_step(lr);
                }
                Optimizer::AdamW => adamw.step(&mut model),
            }
        }
    }
    let accuracy = validation_accuracy(&mut model, data, hp.batch_size as usize)?;
    Ok(EvalResult {
        accuracy,
        params: net.count_params(),
        wall_time: started.elapsed().as_secs_f64(),
        evaluator_kind: EvaluatorKind::Micro,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SurrogateConfig {
    pub base: f64,
    pub last_layer_gain: f64,
    pub early_penalty: f64,
    pub noise_sigma: f64,
    pub w_ref_early: f64,
    pub w_ref_last: f64,
    pub rng_seed: u64,
}

impl Default for SurrogateConfig {
    fn default() -> Self {
        SurrogateConfig {
            base: 0.15,
            last_layer_gain: 0.05,
            early_penalty: 0.03,
            noise_sigma: 0.01,
            w_ref_early: 64.0,
            w_ref_last: 256.0,
            rng_seed: 0,
        }
    }
}

impl SurrogateConfig {
    pub fn noiseless() -> Self {
        SurrogateConfig { noise_sigma: 0.0, ..Self::default() }
    }
}

/// `(w_2, w_last)`: the second conv's output channels in topological order
/// and the widest hidden linear layer.
pub fn surrogate_widths(net: &NetworkDef) -> Result<(u64, u64), EvalError> {
    let order = net.topo_order().map_err(|_| EvalError::TopologyUnsupported)?;
    let sink = net.sink().map(|s| s.id.clone());
    let convs: Vec<u64> = order
        .iter()
        .map(|&i| &net.layers[i])
        .filter(|l| l.kind == LayerKind::Conv2d)
        .map(|l| l.get(Attr::OutChannels))
        .collect();
    let w_last = net
        .layers
        .iter()
        .filter(|l| l.kind == LayerKind::Linear && Some(&l.id) != sink.as_ref())
        .map(|l| l.get(Attr::OutFeatures))
        .max();
    match (convs.get(1), w_last) {
        (Some(&w2), Some(wl)) => Ok((w2, wl)),
        _ => Err(EvalError::TopologyUnsupported),
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Standard normal draw determined by the width vector and seed.
fn hashed_normal(net: &NetworkDef, seed: u64) -> f64 {
    let mut h = splitmix64(seed);
    for (_, w) in net.width_vector() {
        h = splitmix64(h ^ w);
    }
    let u1 = ((splitmix64(h) >> 11) as f64 + 0.5) / (1u64 << 53) as f64;
    let u2 = ((splitmix64(h ^ 0x5eed) >> 11) as f64) / (1u64 << 53) as f64;
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

pub fn surrogate_accuracy(w2: u64, w_last: u64, cfg: &SurrogateConfig, noise: f64) -> f64 {
    let gain = cfg.last_layer_gain * (w_last as f64 / cfg.w_ref_last).log2();
    let penalty = cfg.early_penalty * (w2 as f64 / cfg.w_ref_early).log2().abs();
    (cfg.base + gain - penalty + noise).clamp(0.0, 1.0)
}

pub fn surrogate_eval(net: &NetworkDef, cfg: &SurrogateConfig) -> Result<EvalResult, EvalError> {
    let started = Instant::now();
    let (w2, w_last) = surrogate_widths(net)?;
    let noise = if cfg.noise_sigma > 0.0 { cfg.noise_sigma * hashed_normal(net, cfg.rng_seed) } else { 0.0 };
    Ok(EvalResult {
        accuracy: surrogate_accuracy(w2, w_last, cfg, noise),
        params: net.count_params(),
        wall_time: started.elapsed().as_secs_f64(),
        evaluator_kind: EvaluatorKind::Surrogate,
    })
}

/// A configured fitness function shared across evaluation workers.
#[derive(Debug, Clone)]
pub enum Evaluator {
    Surrogate(SurrogateConfig),
    Micro { data: Arc<Dataset>, seed: u64 },
}

impl Evaluator {
    pub fn kind(&self) -> EvaluatorKind {
        match self {
            Evaluator::Surrogate(_) => EvaluatorKind::Surrogate,
            Evaluator::Micro { .. } => EvaluatorKind::Micro,
        }
    }

    /// Evaluates an already verified network.
    pub fn evaluate(&self, net: &NetworkDef, hp: &Hyperparams) -> Result<EvalResult, EvalError> {
        match self {
            Evaluator::Surrogate(cfg) => surrogate_eval(net, cfg),
            Evaluator::Micro { data, seed } => train_net(net, hp, data, *seed),
        }
    }

    /// Short tag stored with records so pairs never mix datasets.
    pub fn dataset_tag(&self) -> String {
        match self {
            Evaluator::Surrogate(cfg) => format!("surrogate-{}", cfg.rng_seed),
            Evaluator::Micro { data, .. } => {
                let (c, h, w) = data.sample_shape();
                format!("cftd-{}x{}x{}x{}-{}", data.len(), c, h, w, data.num_classes)
            }
        }
    }
}
