//! Minimal dense execution engine: forward, reverse-mode backward over the
//! layer DAG, and SGD / AdamW updates.
//!
//! Tensors are row-major `f32` in NCHW order. Convolutions are direct loops;
//! internally they run channel-innermost so the hot loops are contiguous
//! axpy/dot kernels. All reductions accumulate in a fixed order, so results
//! are bitwise reproducible.

use std::collections::BTreeMap;

use rand::distributions::{Distribution, Uniform};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::graph::ShapeError;
use crate::ir::{Attr, LayerKind, NetworkDef, INPUT};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EngineError {
    #[error("runtime shape mismatch at `{layer}`: {detail}")]
    ShapeMismatch { layer: String, detail: String },
    #[error(transparent)]
    Inference(#[from] ShapeError),
    #[error("backward called without a training-mode forward pass")]
    NoForwardCache,
    #[error("labels: {0}")]
    Labels(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        Tensor { shape: shape.to_vec(), data: vec![0.0; shape.iter().product()] }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f32>) -> Self {
        assert_eq!(shape.iter().product::<usize>(), data.len(), "tensor data does not match shape {shape:?}");
        Tensor { shape: shape.to_vec(), data }
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn batch(&self) -> usize {
        self.shape[0]
    }

    /// Elements per batch item.
    pub fn row_len(&self) -> usize {
        self.shape[1..].iter().product()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs(&self) -> f32 {
        self.data.iter().fold(0.0f32, |m, v| m.max(v.abs()))
    }

    /// Standard-normal tensor from a seeded stream.
    pub fn randn(shape: &[usize], seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..shape.iter().product::<usize>()).map(|_| rng.sample::<f32, _>(rand_distr::StandardNormal)).collect();
        Tensor::from_vec(shape, data)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
}

impl Param {
    fn new(name: String, value: Tensor) -> Self {
        let grad = Tensor::zeros(&value.shape);
        Param { name, value, grad }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Src {
    Input,
    Layer(usize),
}

#[derive(Debug, Clone)]
enum Aux {
    None,
    /// ReLU / dropout multiplier per element.
    Mask(Vec<f32>),
    /// Max-pool winner index (into the input) per output element.
    Argmax(Vec<usize>),
    /// Batchnorm normalized input and per-channel inverse std.
    Norm { xhat: Vec<f32>, inv_std: Vec<f32> },
    /// Conv weights in `[k][k][cin][ocg]` layout as used by the forward pass.
    ConvWeights(Vec<f32>),
}

#[derive(Debug, Clone)]
struct Cache {
    input: Tensor,
    outputs: Vec<Tensor>,
    aux: Vec<Aux>,
    training: bool,
}

/// A network with materialized parameters.
#[derive(Debug, Clone)]
pub struct ModelInstance {
    net: NetworkDef,
    order: Vec<usize>,
    sources: Vec<Vec<Src>>,
    sink: usize,
    /// Parameters per layer index (weight then bias, or gamma then beta).
    params: Vec<Vec<Param>>,
    running: Vec<Option<(Vec<f32>, Vec<f32>)>>,
    rng: ChaCha8Rng,
    cache: Option<Cache>,
}

pub const BN_EPS: f32 = 1e-5;
pub const BN_MOMENTUM: f32 = 0.1;

/// Builds a model with Kaiming-uniform weights (bound `sqrt(6 / fan_in)`),
/// zero biases and identity batchnorm.
pub fn instantiate(net: &NetworkDef, seed: u64) -> Result<ModelInstance, EngineError> {
    crate::graph::infer_shapes(net)?;
    let order = net.topo_order().expect("validated");
    let index: BTreeMap<&str, usize> = net.layers.iter().enumerate().map(|(i, l)| (l.id.as_str(), i)).collect();
    let sources = net
        .layers
        .iter()
        .map(|l| net.inputs_of(&l.id).iter().map(|p| if *p == INPUT { Src::Input } else { Src::Layer(index[p]) }).collect())
        .collect();
    let sink = index[net.sink().expect("validated").id.as_str()];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = Vec::with_capacity(net.layers.len());
    let mut running = Vec::with_capacity(net.layers.len());
    for l in &net.layers {
        let mut kaiming = |shape: &[usize], fan_in: usize| {
            let bound = (6.0 / fan_in as f64).sqrt() as f32;
            let data = Uniform::new_inclusive(-bound, bound).sample_iter(&mut rng).take(shape.iter().product()).collect();
            Tensor::from_vec(shape, data)
        };
        let (layer_params, buffers) = match l.kind {
            LayerKind::Conv2d => {
                let (cin, cout, k, g) = dims(l, &[Attr::InChannels, Attr::OutChannels, Attr::Kernel, Attr::Groups]);
                let w = kaiming(&[cout, cin / g, k, k], cin / g * k * k);
                (vec![Param::new(format!("{}.weight", l.id), w), Param::new(format!("{}.bias", l.id), Tensor::zeros(&[cout]))], None)
            }
            LayerKind::Linear => {
                let (fin, fout, _, _) = dims(l, &[Attr::InFeatures, Attr::OutFeatures]);
                let w = kaiming(&[fout, fin], fin);
                (vec![Param::new(format!("{}.weight", l.id), w), Param::new(format!("{}.bias", l.id), Tensor::zeros(&[fout]))], None)
            }
            LayerKind::BatchNorm2d => {
                let c = l.get(Attr::NumFeatures) as usize;
                (
                    vec![
                        Param::new(format!("{}.weight", l.id), Tensor::from_vec(&[c], vec![1.0; c])),
                        Param::new(format!("{}.bias", l.id), Tensor::zeros(&[c])),
                    ],
                    Some((vec![0.0; c], vec![1.0; c])),
                )
            }
            _ => (Vec::new(), None),
        };
        params.push(layer_params);
        running.push(buffers);
    }
    let dropout_rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    Ok(ModelInstance { net: net.clone(), order, sources, sink, params, running, rng: dropout_rng, cache: None })
}

fn dims(l: &crate::ir::LayerSpec, attrs: &[Attr]) -> (usize, usize, usize, usize) {
    let v: Vec<usize> = attrs.iter().map(|a| l.get(*a) as usize).collect();
    (v[0], v[1], v.get(2).copied().unwrap_or(0), v.get(3).copied().unwrap_or(0))
}

/// Number of window placements along one axis, counted directly.
fn placements(size: usize, kernel: usize, stride: usize, padding: usize) -> usize {
    (0..).take_while(|o| o * stride + kernel <= size + 2 * padding).count()
}

#[inline(always)]
fn axpy(y: &mut [f32], a: f32, x: &[f32]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

#[inline(always)]
fn dot(a: &[f32], b: &[f32]) -> f32 {
    let mut acc = [0.0f32; 8];
    let chunks = a.len() / 8;
    for c in 0..chunks {
        let (x, y) = (&a[c * 8..c * 8 + 8], &b[c * 8..c * 8 + 8]);
        for i in 0..8 {
            acc[i] += x[i] * y[i];
        }
    }
    let mut tail = 0.0;
    for i in chunks * 8..a.len() {
        tail += a[i] * b[i];
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

/// `[c][h*w]` -> `[h*w][c]`.
fn to_channels_last(x: &[f32], c: usize, hw: usize) -> Vec<f32> {
    let mut out = vec![0.0; x.len()];
    for ci in 0..c {
        for p in 0..hw {
            out[p * c + ci] = x[ci * hw + p];
        }
    }
    out
}

fn from_channels_last(x: &[f32], c: usize, hw: usize, out: &mut [f32]) {
    for p in 0..hw {
        for ci in 0..c {
            out[ci * hw + p] = x[p * c + ci];
        }
    }
}

const NO_TAP: u32 = u32::MAX;
/// Output pixels processed together so each weight row is loaded once per tile.
const PIXEL_TILE: usize = 8;

struct ConvGeom {
    cin: usize,
    cout: usize,
    k: usize,
    s: usize,
    p: usize,
    g: usize,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
}

impl ConvGeom {
    fn icg(&self) -> usize {
        self.cin / self.g
    }

    fn ocg(&self) -> usize {
        self.cout / self.g
    }

    /// Weight `[cout][icg][k][k]` -> `[k][k][cin][ocg]`.
    fn weight_channels_last(&self, w: &[f32]) -> Vec<f32> {
        let (icg, ocg, kk) = (self.icg(), self.ocg(), self.k * self.k);
        let mut out = Vec::with_capacity(w.len());
        for t in 0..kk {
            for gi in 0..self.g {
                for il in 0..icg {
                    for ol in 0..ocg {
                        out.push(w[((gi * ocg + ol) * icg + il) * kk + t]);
                    }
                }
            }
        }
        out
    }

    fn add_weight_grad(&self, gw_t: &[f32], grad: &mut [f32]) {
        let (icg, ocg, kk) = (self.icg(), self.ocg(), self.k * self.k);
        let mut i = 0;
        for gi in 0..self.g {
            for ol in 0..ocg {
                for il in 0..icg {
                    let ic = gi * icg + il;
                    for t in 0..kk {
                        grad[i] += gw_t[(t * self.cin + ic) * ocg + ol];
                        i += 1;
                    }
                }
            }
        }
    }

    /// Input coordinate for an output coordinate and kernel offset, if inside the image.
    fn src(&self, o: usize, kk: usize, size: usize) -> Option<usize> {
        let pos = (o * self.s + kk) as isize - self.p as isize;
        (pos >= 0 && (pos as usize) < size).then_some(pos as usize)
    }

    /// `[out pixel][ky * k + kx]` -> input pixel index, or `NO_TAP` inside the padding.
    fn taps(&self) -> Vec<u32> {
        let mut taps = Vec::with_capacity(self.oh * self.ow * self.k * self.k);
        for oy in 0..self.oh {
            for ox in 0..self.ow {
                for ky in 0..self.k {
                    for kx in 0..self.k {
                        let pix = self.src(oy, ky, self.h).zip(self.src(ox, kx, self.w));
                        taps.push(pix.map_or(NO_TAP, |(iy, ix)| (iy * self.w + ix) as u32));
                    }
                }
            }
        }
        taps
    }
}

/// Dispatches to an AVX2 build of the same kernel when the CPU has it. The
/// kernel uses no fused multiply-add, so both builds agree bit for bit.
fn conv_forward(geom: &ConvGeom, x: &Tensor, weight: &[f32], bias: &[f32]) -> (Tensor, Vec<f32>) {
    #[cfg(target_arch = "x86_64")]
    if std::arch::is_x86_feature_detected!("avx2") {
        // SAFETY: the required feature was detected at runtime.
        return unsafe { conv_forward_avx2(geom, x, weight, bias) };
    }
    conv_forward_kernel(geom, x, weight, bias)
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn conv_forward_avx2(geom: &ConvGeom, x: &Tensor, weight: &[f32], bias: &[f32]) -> (Tensor, Vec<f32>) {
    conv_forward_kernel(geom, x, weight, bias)
}

#[inline(always)]
fn conv_forward_kernel(geom: &ConvGeom, x: &Tensor, weight: &[f32], bias: &[f32]) -> (Tensor, Vec<f32>) {
    let n = x.batch();
    let (cin, cout, icg, ocg, kk) = (geom.cin, geom.cout, geom.icg(), geom.ocg(), geom.k * geom.k);
    let (hw, ohw) = (geom.h * geom.w, geom.oh * geom.ow);
    let w_t = geom.weight_channels_last(weight);
    let taps = geom.taps();
    let mut out = Tensor::zeros(&[n, cout, geom.oh, geom.ow]);
    let mut out_t = vec![0.0f32; ohw * cout];
    for b in 0..n {
        let x_t = to_channels_last(&x.data[b * cin * hw..(b + 1) * cin * hw], cin, hw);
        for p0 in (0..ohw).step_by(PIXEL_TILE) {
            let p1 = (p0 + PIXEL_TILE).min(ohw);
            for p in p0..p1 {
                out_t[p * cout..(p + 1) * cout].copy_from_slice(bias);
            }
            for t in 0..kk {
                for gi in 0..geom.g {
                    for ic in gi * icg..(gi + 1) * icg {
                        let wrow = &w_t[(t * cin + ic) * ocg..(t * cin + ic + 1) * ocg];
                        for p in p0..p1 {
                            let src = taps[p * kk + t];
                            if src == NO_TAP {
                                continue;
                            }
                            let v = x_t[src as usize * cin + ic];
                            let o = p * cout + gi * ocg;
                            axpy(&mut out_t[o..o + ocg], v, wrow);
                        }
                    }
                }
            }
        }
        from_channels_last(&out_t, cout, ohw, &mut out.data[b * cout * ohw..(b + 1) * cout * ohw]);
    }
    (out, w_t)
}

/// Returns the input gradient; accumulates weight and bias gradients.
fn conv_backward(geom: &ConvGeom, x: &Tensor, w_t: &[f32], gout: &Tensor, gw: &mut [f32], gb: &mut [f32]) -> Tensor {
    #[cfg(target_arch = "x86_64")]
    if std::arch::is_x86_feature_detected!("avx2") {
        // SAFETY: the required feature was detected at runtime.
        return unsafe { conv_backward_avx2(geom, x, w_t, gout, gw, gb) };
    }
    conv_backward_kernel(geom, x, w_t, gout, gw, gb)
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn conv_backward_avx2(geom: &ConvGeom, x: &Tensor, w_t: &[f32], gout: &Tensor, gw: &mut [f32], gb: &mut [f32]) -> Tensor {
    conv_backward_kernel(geom, x, w_t, gout, gw, gb)
}

#[inline(always)]
fn conv_backward_kernel(geom: &ConvGeom, x: &Tensor, w_t: &[f32], gout: &Tensor, gw: &mut [f32], gb: &mut [f32]) -> Tensor {
    let n = x.batch();
    let (cin, cout, icg, ocg, kk) = (geom.cin, geom.cout, geom.icg(), geom.ocg(), geom.k * geom.k);
    let (hw, ohw) = (geom.h * geom.w, geom.oh * geom.ow);
    let taps = geom.taps();
    let mut gw_t = vec![0.0f32; w_t.len()];
    let mut gx = Tensor::zeros(&x.shape);
    for b in 0..n {
        let x_t = to_channels_last(&x.data[b * cin * hw..(b + 1) * cin * hw], cin, hw);
        let g_t = to_channels_last(&gout.data[b * cout * ohw..(b + 1) * cout * ohw], cout, ohw);
        let mut gx_t = vec![0.0f32; hw * cin];
        for oc in 0..cout {
            gb[oc] += gout.data[b * cout * ohw + oc * ohw..b * cout * ohw + (oc + 1) * ohw].iter().sum::<f32>();
        }
        for p0 in (0..ohw).step_by(PIXEL_TILE) {
            let p1 = (p0 + PIXEL_TILE).min(ohw);
            for t in 0..kk {
                for gi in 0..geom.g {
                    for ic in gi * icg..(gi + 1) * icg {
                        let widx = (t * cin + ic) * ocg;
                        let wrow = &w_t[widx..widx + ocg];
                        let gwrow = &mut gw_t[widx..widx + ocg];
                        for p in p0..p1 {
                            let src = taps[p * kk + t];
                            if src == NO_TAP {
                                continue;
                            }
                            let xi = src as usize * cin + ic;
                            let grow = &g_t[p * cout + gi * ocg..p * cout + (gi + 1) * ocg];
                            axpy(gwrow, x_t[xi], grow);
                            gx_t[xi] += dot(wrow, grow);
                        }
                    }
                }
            }
        }
        from_channels_last(&gx_t, cin, hw, &mut gx.data[b * cin * hw..(b + 1) * cin * hw]);
    }
    geom.add_weight_grad(&gw_t, gw);
    gx
}

fn mismatch(layer: &str, detail: String) -> EngineError {
    EngineError::ShapeMismatch { layer: layer.to_string(), detail }
}

impl ModelInstance {
    pub fn net(&self) -> &NetworkDef {
        &self.net
    }

    pub fn params(&self) -> impl Iterator<Item = &Param> {
        self.params.iter().flatten()
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut().flatten()
    }

    pub fn param_count(&self) -> usize {
        self.params().map(|p| p.value.numel()).sum()
    }

    /// Parameters of one layer, by id.
    pub fn layer_params_mut(&mut self, id: &str) -> Option<&mut Vec<Param>> {
        let idx = self.net.layers.iter().position(|l| l.id == id)?;
        Some(&mut self.params[idx])
    }

    pub fn zero_grad(&mut self) {
        for p in self.params_mut() {
            p.grad.data.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    /// Per-layer output shapes (batch dimension dropped) of the last forward pass.
    pub fn activation_shapes(&self) -> BTreeMap<String, Vec<usize>> {
        let Some(cache) = &self.cache else { return BTreeMap::new() };
        self.net.layers.iter().zip(&cache.outputs).map(|(l, t)| (l.id.clone(), t.shape[1..].to_vec())).collect()
    }

    /// Output tensor of a layer from the last forward pass.
    pub fn activation(&self, id: &str) -> Option<&Tensor> {
        let idx = self.net.layers.iter().position(|l| l.id == id)?;
        self.cache.as_ref().map(|c| &c.outputs[idx])
    }

    /// Runs the network on `[N, C, H, W]` and returns `[N, num_classes]` logits.
    pub fn forward(&mut self, batch: &Tensor, training: bool) -> Result<Tensor, EngineError> {
        let i = self.net.input_shape;
        let expected = [i.channels as usize, i.height as usize, i.width as usize];
        if batch.shape.len() != 4 || batch.shape[1..] != expected {
            return Err(mismatch(INPUT, format!("expected [N, {}, {}, {}], got {:?}", expected[0], expected[1], expected[2], batch.shape)));
        }
        let placeholder = Tensor::zeros(&[0]);
        let mut outputs: Vec<Tensor> = vec![placeholder; self.net.layers.len()];
        let mut aux: Vec<Aux> = vec![Aux::None; self.net.layers.len()];
        for pos in 0..self.order.len() {
            let idx = self.order[pos];
            let ins: Vec<&Tensor> = self.sources[idx]
                .iter()
                .map(|s| match s {
                    Src::Input => batch,
                    Src::Layer(j) => &outputs[*j],
                })
                .collect();
            let (out, a) = self.forward_layer(idx, &ins, training)?;
            outputs[idx] = out;
            aux[idx] = a;
        }
        let logits = outputs[self.sink].clone();
        self.cache = Some(Cache { input: batch.clone(), outputs, aux, training });
        Ok(logits)
    }

    fn forward_layer(&mut self, idx: usize, ins: &[&Tensor], training: bool) -> Result<(Tensor, Aux), EngineError> {
        let l = &self.net.layers[idx];
        let id = l.id.as_str();
        let x = ins[0];
        let n = x.batch();
        let spatial = |t: &Tensor| -> Result<(usize, usize, usize), EngineError> {
            match t.shape.as_slice() {
                [_, c, h, w] => Ok((*c, *h, *w)),
                other => Err(mismatch(id, format!("expected a 4-d feature map, got {other:?}"))),
            }
        };
        match l.kind {
            LayerKind::Conv2d => {
                let (c, h, w) = spatial(x)?;
                let (cin, cout, k, g) = dims(l, &[Attr::InChannels, Attr::OutChannels, Attr::Kernel, Attr::Groups]);
                let (s, p) = (l.get(Attr::Stride) as usize, l.get(Attr::Padding) as usize);
                if c != cin {
                    return Err(mismatch(id, format!("conv expects {cin} channels, got {c}")));
                }
                let (oh, ow) = (placements(h, k, s, p), placements(w, k, s, p));
                if oh == 0 || ow == 0 {
                    return Err(mismatch(id, format!("kernel {k} does not fit {h}x{w} with padding {p}")));
                }
                let geom = ConvGeom { cin, cout, k, s, p, g, h, w, oh, ow };
                let ps = &self.params[idx];
                let (out, w_t) = conv_forward(&geom, x, &ps[0].value.data, &ps[1].value.data);
                Ok((out, Aux::ConvWeights(w_t)))
            }
            LayerKind::Linear => {
                let (fin, fout, _, _) = dims(l, &[Attr::InFeatures, Attr::OutFeatures]);
                if x.shape.len() != 2 || x.shape[1] != fin {
                    return Err(mismatch(id, format!("linear expects [N, {fin}], got {:?}", x.shape)));
                }
                let ps = &self.params[idx];
                let (wt, bias) = (&ps[0].value.data, &ps[1].value.data);
                let mut out = Tensor::zeros(&[n, fout]);
                for b in 0..n {
                    let row = &x.data[b * fin..(b + 1) * fin];
                    for o in 0..fout {
                        out.data[b * fout + o] = dot(&wt[o * fin..(o + 1) * fin], row) + bias[o];
                    }
                }
                Ok((out, Aux::None))
            }
            LayerKind::BatchNorm2d => {
                let (c, h, w) = spatial(x)?;
                let nf = l.get(Attr::NumFeatures) as usize;
                if c != nf {
                    return Err(mismatch(id, format!("batchnorm expects {nf} channels, got {c}")));
                }
                let hw = h * w;
                let m = (n * hw) as f32;
                let (gamma, beta) = (self.params[idx][0].value.data.clone(), self.params[idx][1].value.data.clone());
                let mut out = Tensor::zeros(&x.shape);
                let mut xhat = vec![0.0f32; x.numel()];
                let mut inv_std = vec![0.0f32; c];
                let (run_mean, run_var) = self.running[idx].as_mut().expect("batchnorm buffers");
                for ch in 0..c {
                    let (mean, var) = if training {
                        let mut sum = 0.0f64;
                        for b in 0..n {
                            sum += x.data[(b * c + ch) * hw..(b * c + ch + 1) * hw].iter().map(|v| *v as f64).sum::<f64>();
                        }
                        let mean = sum / m as f64;
                        let mut sq = 0.0f64;
                        for b in 0..n {
                            sq += x.data[(b * c + ch) * hw..(b * c + ch + 1) * hw].iter().map(|v| (*v as f64 - mean).powi(2)).sum::<f64>();
                        }
                        let var = sq / m as f64;
                        let unbiased = if m > 1.0 { sq / (m as f64 - 1.0) } else { var };
                        run_mean[ch] = (1.0 - BN_MOMENTUM) * run_mean[ch] + BN_MOMENTUM * mean as f32;
                        run_var[ch] = (1.0 - BN_MOMENTUM) * run_var[ch] + BN_MOMENTUM * unbiased as f32;
                        (mean as f32, var as f32)
                    } else {
                        (run_mean[ch], run_var[ch])
                    };
                    let is = 1.0 / (var + BN_EPS).sqrt();
                    inv_std[ch] = is;
                    for b in 0..n {
                        let base = (b * c + ch) * hw;
                        for j in base..base + hw {
                            let xh = (x.data[j] - mean) * is;
                            xhat[j] = xh;
                            out.data[j] = gamma[ch] * xh + beta[ch];
                        }
                    }
                }
                Ok((out, Aux::Norm { xhat, inv_std }))
            }
            LayerKind::ReLU => {
                let mask: Vec<f32> = x.data.iter().map(|v| if *v > 0.0 { 1.0 } else { 0.0 }).collect();
                let data = x.data.iter().map(|v| v.max(0.0)).collect();
                Ok((Tensor::from_vec(&x.shape, data), Aux::Mask(mask)))
            }
            LayerKind::Dropout => {
                if !training || l.rate == 0.0 {
                    return Ok((x.clone(), Aux::Mask(vec![1.0; x.numel()])));
                }
                let keep = 1.0 - l.rate;
                let scale = (1.0 / keep) as f32;
                let mask: Vec<f32> =
                    (0..x.numel()).map(|_| if self.rng.gen::<f64>() < keep { scale } else { 0.0 }).collect();
                let data = x.data.iter().zip(&mask).map(|(v, m)| v * m).collect();
                Ok((Tensor::from_vec(&x.shape, data), Aux::Mask(mask)))
            }
            LayerKind::MaxPool2d => {
                let (c, h, w) = spatial(x)?;
                let (k, s) = (l.get(Attr::Kernel) as usize, l.get(Attr::Stride) as usize);
                let (oh, ow) = (placements(h, k, s, 0), placements(w, k, s, 0));
                if oh == 0 || ow == 0 {
                    return Err(mismatch(id, format!("pool window {k} does not fit {h}x{w}")));
                }
                let mut out = Tensor::zeros(&[n, c, oh, ow]);
                let mut arg = vec![0usize; out.numel()];
                for plane in 0..n * c {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let mut best = f32::NEG_INFINITY;
                            let mut at = 0;
                            for ky in 0..k {
                                for kx in 0..k {
                                    let j = plane * h * w + (oy * s + ky) * w + ox * s + kx;
                                    if x.data[j] > best || (ky == 0 && kx == 0) {
                                        best = x.data[j];
                                        at = j;
                                    }
                                }
                            }
                            let o = (plane * oh + oy) * ow + ox;
                            out.data[o] = best;
                            arg[o] = at;
                        }
                    }
                }
                Ok((out, Aux::Argmax(arg)))
            }
            LayerKind::AdaptiveAvgPool2d => {
                let (c, h, w) = spatial(x)?;
                let (oh, ow) = (l.get(Attr::Height) as usize, l.get(Attr::Width) as usize);
                let mut out = Tensor::zeros(&[n, c, oh, ow]);
                for plane in 0..n * c {
                    for oy in 0..oh {
                        let (y0, y1) = adaptive_range(oy, h, oh);
                        for ox in 0..ow {
                            let (x0, x1) = adaptive_range(ox, w, ow);
                            let mut sum = 0.0;
                            for yy in y0..y1 {
                                for xx in x0..x1 {
                                    sum += x.data[plane * h * w + yy * w + xx];
                                }
                            }
                            out.data[(plane * oh + oy) * ow + ox] = sum / ((y1 - y0) * (x1 - x0)) as f32;
                        }
                    }
                }
                Ok((out, Aux::None))
            }
            LayerKind::Flatten => {
                let row = x.row_len();
                Ok((Tensor::from_vec(&[n, row], x.data.clone()), Aux::None))
            }
            LayerKind::Add => {
                let mut out = x.clone();
                for other in &ins[1..] {
                    if other.shape != x.shape {
                        return Err(mismatch(id, format!("add operands {:?} and {:?}", x.shape, other.shape)));
                    }
                    out.data.iter_mut().zip(&other.data).for_each(|(a, b)| *a += b);
                }
                Ok((out, Aux::None))
            }
            LayerKind::Concat => {
                let (_, h, w) = spatial(x)?;
                let mut total = 0;
                for t in ins {
                    let (c, h2, w2) = spatial(t)?;
                    if (h2, w2) != (h, w) {
                        return Err(mismatch(id, format!("concat spatial {h}x{w} vs {h2}x{w2}")));
                    }
                    total += c;
                }
                let hw = h * w;
                let mut out = Tensor::zeros(&[n, total, h, w]);
                for b in 0..n {
                    let mut off = 0;
                    for t in ins {
                        let c = t.shape[1];
                        out.data[(b * total + off) * hw..(b * total + off + c) * hw]
                            .copy_from_slice(&t.data[b * c * hw..(b + 1) * c * hw]);
                        off += c;
                    }
                }
                Ok((out, Aux::None))
            }
        }
    }

    /// Back-propagates `loss_grad` (gradient w.r.t. the logits) and
    /// overwrites every parameter gradient.
    pub fn backward(&mut self, loss_grad: &Tensor) -> Result<(), EngineError> {
        let cache = self.cache.take().ok_or(EngineError::NoForwardCache)?;
        let result = self.backward_with(&cache, loss_grad);
        self.cache = Some(cache);
        result
    }

    fn backward_with(&mut self, cache: &Cache, loss_grad: &Tensor) -> Result<(), EngineError> {
        if loss_grad.shape != cache.outputs[self.sink].shape {
            return Err(mismatch(&self.net.layers[self.sink].id, format!("loss gradient shape {:?}", loss_grad.shape)));
        }
        self.zero_grad();
        let mut grads: Vec<Option<Tensor>> = vec![None; self.net.layers.len()];
        grads[self.sink] = Some(loss_grad.clone());
        for pos in (0..self.order.len()).rev() {
            let idx = self.order[pos];
            let Some(g) = grads[idx].take() else { continue };
            let ins: Vec<&Tensor> = self.sources[idx]
                .iter()
                .map(|s| match s {
                    Src::Input => &cache.input,
                    Src::Layer(j) => &cache.outputs[*j],
                })
                .collect();
            let input_grads = self.backward_layer(idx, &ins, &cache.aux[idx], &g, cache.training);
            for (src, gi) in self.sources[idx].clone().into_iter().zip(input_grads) {
                if let Src::Layer(j) = src {
                    match &mut grads[j] {
                        Some(acc) => acc.data.iter_mut().zip(&gi.data).for_each(|(a, b)| *a += b),
                        slot @ None => *slot = Some(gi),
                    }
                }
            }
        }
        Ok(())
    }

    fn backward_layer(&mut self, idx: usize, ins: &[&Tensor], aux: &Aux, g: &Tensor, training: bool) -> Vec<Tensor> {
        let l = self.net.layers[idx].clone();
        let x = ins[0];
        let n = x.batch();
        match l.kind {
            LayerKind::Conv2d => {
                let (cin, cout, k, groups) = dims(&l, &[Attr::InChannels, Attr::OutChannels, Attr::Kernel, Attr::Groups]);
                let (s, p) = (l.get(Attr::Stride) as usize, l.get(Attr::Padding) as usize);
                let (h, w) = (x.shape[2], x.shape[3]);
                let geom = ConvGeom { cin, cout, k, s, p, g: groups, h, w, oh: g.shape[2], ow: g.shape[3] };
                let Aux::ConvWeights(w_t) = aux else { unreachable!("conv cache") };
                let (wparam, bparam) = self.params[idx].split_at_mut(1);
                vec![conv_backward(&geom, x, w_t, g, &mut wparam[0].grad.data, &mut bparam[0].grad.data)]
            }
            LayerKind::Linear => {
                let (fin, fout) = (x.shape[1], g.shape[1]);
                let ps = &mut self.params[idx];
                let mut gx = Tensor::zeros(&x.shape);
                for b in 0..n {
                    let xrow = &x.data[b * fin..(b + 1) * fin];
                    for o in 0..fout {
                        let go = g.data[b * fout + o];
                        ps[1].grad.data[o] += go;
                        axpy(&mut ps[0].grad.data[o * fin..(o + 1) * fin], go, xrow);
                        axpy(&mut gx.data[b * fin..(b + 1) * fin], go, &ps[0].value.data[o * fin..(o + 1) * fin]);
                    }
                }
                vec![gx]
            }
            LayerKind::BatchNorm2d => {
                let Aux::Norm { xhat, inv_std } = aux else { unreachable!("batchnorm cache") };
                let (c, hw) = (x.shape[1], x.shape[2] * x.shape[3]);
                let m = (n * hw) as f32;
                let gamma = self.params[idx][0].value.data.clone();
                let mut gx = Tensor::zeros(&x.shape);
                for ch in 0..c {
                    let (mut sum_g, mut sum_gx) = (0.0f32, 0.0f32);
                    for b in 0..n {
                        let base = (b * c + ch) * hw;
                        for j in base..base + hw {
                            sum_g += g.data[j];
                            sum_gx += g.data[j] * xhat[j];
                        }
                    }
                    self.params[idx][0].grad.data[ch] += sum_gx;
                    self.params[idx][1].grad.data[ch] += sum_g;
                    let scale = gamma[ch] * inv_std[ch];
                    for b in 0..n {
                        let base = (b * c + ch) * hw;
                        for j in base..base + hw {
                            gx.data[j] = if training {
                                scale / m * (m * g.data[j] - sum_g - xhat[j] * sum_gx)
                            } else {
                                scale * g.data[j]
                            };
                        }
                    }
                }
                vec![gx]
            }
            LayerKind::ReLU | LayerKind::Dropout => {
                let Aux::Mask(mask) = aux else { unreachable!("mask cache") };
                vec![Tensor::from_vec(&x.shape, g.data.iter().zip(mask).map(|(a, b)| a * b).collect())]
            }
            LayerKind::MaxPool2d => {
                let Aux::Argmax(arg) = aux else { unreachable!("argmax cache") };
                let mut gx = Tensor::zeros(&x.shape);
                for (o, &src) in arg.iter().enumerate() {
                    gx.data[src] += g.data[o];
                }
                vec![gx]
            }
            LayerKind::AdaptiveAvgPool2d => {
                let (c, h, w) = (x.shape[1], x.shape[2], x.shape[3]);
                let (oh, ow) = (g.shape[2], g.shape[3]);
                let mut gx = Tensor::zeros(&x.shape);
                for plane in 0..n * c {
                    for oy in 0..oh {
                        let (y0, y1) = adaptive_range(oy, h, oh);
                        for ox in 0..ow {
                            let (x0, x1) = adaptive_range(ox, w, ow);
                            let share = g.data[(plane * oh + oy) * ow + ox] / ((y1 - y0) * (x1 - x0)) as f32;
                            for yy in y0..y1 {
                                for xx in x0..x1 {
                                    gx.data[plane * h * w + yy * w + xx] += share;
                                }
                            }
                        }
                    }
                }
                vec![gx]
            }
            LayerKind::Flatten => vec![Tensor::from_vec(&x.shape, g.data.clone())],
            LayerKind::Add => ins.iter().map(|_| g.clone()).collect(),
            LayerKind::Concat => {
                let (total, hw) = (g.shape[1], g.shape[2] * g.shape[3]);
                let mut off = 0;
                ins.iter()
                    .map(|t| {
                        let c = t.shape[1];
                        let mut gi = Tensor::zeros(&t.shape);
                        for b in 0..n {
                            gi.data[b * c * hw..(b + 1) * c * hw]
                                .copy_from_slice(&g.data[(b * total + off) * hw..(b * total + off + c) * hw]);
                        }
                        off += c;
                        gi
                    })
                    .collect()
            }
        }
    }

    /// Plain gradient step `p <- p - lr * grad`; reports the largest
    /// absolute change per layer.
    pub fn sgd_step(&mut self, lr: f32) -> DeltaReport {
        let mut per_layer = BTreeMap::new();
        for (l, ps) in self.net.layers.iter().zip(self.params.iter_mut()) {
            if ps.is_empty() {
                continue;
            }
            let mut max_delta = 0.0f32;
            for p in ps.iter_mut() {
                for (v, g) in p.value.data.iter_mut().zip(&p.grad.data) {
                    let new = *v - lr * g;
                    max_delta = max_delta.max((new - *v).abs());
                    *v = new;
                }
            }
            per_layer.insert(l.id.clone(), max_delta);
        }
        DeltaReport { max_abs_delta: per_layer }
    }
}

fn adaptive_range(i: usize, size: usize, out: usize) -> (usize, usize) {
    let start = i * size / out;
    let end = ((i + 1) * size).div_ceil(out);
    (start, end.max(start + 1).min(size.max(1)))
}

/// Largest absolute parameter change per layer after an update.
#[derive(Debug, Clone, PartialEq)]
pub struct DeltaReport {
    pub max_abs_delta: BTreeMap<String, f32>,
}

impl DeltaReport {
    pub fn any_changed(&self) -> bool {
        self.max_abs_delta.values().any(|d| *d > 0.0)
    }
}

/// Decoupled-weight-decay Adam.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub weight_decay: f32,
    step: i32,
    moments: Vec<(Vec<f32>, Vec<f32>)>,
}

impl AdamW {
    pub fn new(lr: f32) -> Self {
        AdamW { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.01, step: 0, moments: Vec::new() }
    }

    pub fn step(&mut self, model: &mut ModelInstance) {
        if self.moments.is_empty() {
            self.moments = model.params().map(|p| (vec![0.0; p.value.numel()], vec![0.0; p.value.numel()])).collect();
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step);
        let bc2 = 1.0 - self.beta2.powi(self.step);
        for (p, (m, v)) in model.params_mut().zip(self.moments.iter_mut()) {
            for i in 0..p.value.data.len() {
                let g = p.grad.data[i];
                p.value.data[i] -= self.lr * self.weight_decay * p.value.data[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                let (mh, vh) = (m[i] / bc1, v[i] / bc2);
                p.value.data[i] -= self.lr * mh / (vh.sqrt() + self.eps);
            }
        }
    }
}

/// Row-wise softmax of `[N, K]` logits.
pub fn softmax(logits: &Tensor) -> Tensor {
    let k = logits.shape[1];
    let mut out = logits.clone();
    for row in out.data.chunks_mut(k) {
        let max = row.iter().fold(f32::NEG_INFINITY, |m, v| m.max(*v));
        let mut sum = 0.0f32;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        row.iter_mut().for_each(|v| *v /= sum);
    }
    out
}

/// Mean cross-entropy over the batch and its gradient w.r.t. the logits.
pub fn cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<(f32, Tensor), EngineError> {
    let (n, k) = (logits.shape[0], logits.shape[1]);
    if labels.len() != n {
        return Err(EngineError::Labels(format!("{} labels for a batch of {n}", labels.len())));
    }
    if let Some(bad) = labels.iter().find(|&&y| y >= k) {
        return Err(EngineError::Labels(format!("label {bad} out of range for {k} classes")));
    }
    let mut grad = softmax(logits);
    let mut loss = 0.0f64;
    for (b, &y) in labels.iter().enumerate() {
        loss -= (grad.data[b * k + y].max(f32::MIN_POSITIVE) as f64).ln();
        grad.data[b * k + y] -= 1.0;
    }
    grad.data.iter_mut().for_each(|g| *g /= n as f32);
    Ok(((loss / n as f64) as f32, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ir::{Edge, InputShape, LayerSpec};

    fn chain(name: &str, input: (u64, u64, u64), classes: u64, layers: Vec<LayerSpec>) -> NetworkDef {
        let mut edges = Vec::new();
        let mut prev = INPUT.to_string();
        for l in &layers {
            edges.push(Edge { producer: prev.clone(), consumer: l.id.clone(), slot: 0 });
            prev = l.id.clone();
        }
        NetworkDef {
            name: name.into(),
            input_shape: InputShape { channels: input.0, height: input.1, width: input.2 },
            num_classes: classes,
            layers,
            edges,
        }
    }

    #[test]
    fn linear_param_shapes() {
        let net = chain("l", (10, 1, 1), 5, vec![LayerSpec::new("f", LayerKind::Flatten), LayerSpec::linear("out", 10, 5)]);
        let m = instantiate(&net, 0).unwrap();
        let shapes: Vec<Vec<usize>> = m.params().map(|p| p.value.shape.clone()).collect();
        assert_eq!(shapes, vec![vec![5, 10], vec![5]]);
        assert_eq!(m.param_count(), 55);
        assert_eq!(m.param_count() as u64, net.count_params());
    }

    #[test]
    fn same_seed_same_params() {
        let net = chain("c", (3, 6, 6), 4, vec![
            LayerSpec::conv("c", 3, 5, 3, 1, 1, 1),
            LayerSpec::new("f", LayerKind::Flatten),
            LayerSpec::linear("out", 180, 4),
        ]);
        let a = instantiate(&net, 9).unwrap();
        let b = instantiate(&net, 9).unwrap();
        let c = instantiate(&net, 10).unwrap();
        let bits = |m: &ModelInstance| m.params().flat_map(|p| p.value.data.iter().map(|v| v.to_bits())).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
        assert_ne!(bits(&a), bits(&c));
        let bound = (6.0f32 / 27.0).sqrt();
        assert!(a.params().next().unwrap().value.data.iter().all(|v| v.abs() <= bound));
    }

    #[test]
    fn zero_input_relu_stack_gives_zero_logits() {
        let net = chain("z", (2, 3, 3), 3, vec![
            LayerSpec::new("r1", LayerKind::ReLU),
            LayerSpec::new("r2", LayerKind::ReLU),
            LayerSpec::new("f", LayerKind::Flatten),
            LayerSpec::linear("out", 18, 3),
        ]);
        let mut m = instantiate(&net, 1).unwrap();
        let logits = m.forward(&Tensor::zeros(&[2, 2, 3, 3]), false).unwrap();
        assert!(logits.data.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn identity_pointwise_conv_passes_input_through() {
        let net = chain("i", (3, 4, 4), 2, vec![
            LayerSpec::conv("c", 3, 3, 1, 1, 0, 1),
            LayerSpec::new("f", LayerKind::Flatten),
            LayerSpec::linear("out", 48, 2),
        ]);
        let mut m = instantiate(&net, 2).unwrap();
        let w = &mut m.layer_params_mut("c").unwrap()[0].value.data;
        w.iter_mut().for_each(|v| *v = 0.0);
        for c in 0..3 {
            w[c * 3 + c] = 1.0;
        }
        let x = Tensor::randn(&[2, 3, 4, 4], 3);
        m.forward(&x, false).unwrap();
        assert_eq!(m.activation("c").unwrap().data, x.data);
    }

    #[test]
    fn single_linear_gradient_is_outer_product() {
        let net = chain("g", (3, 1, 1), 2, vec![LayerSpec::new("f", LayerKind::Flatten), LayerSpec::linear("out", 3, 2)]);
        let mut m = instantiate(&net, 4).unwrap();
        let x = Tensor::from_vec(&[1, 3, 1, 1], vec![1.0, -2.0, 0.5]);
        let target = [0.3f32, -0.1];
        let y = m.forward(&x, true).unwrap();
        // squared error 0.5 * |y - t|^2 -> delta = y - t
        let delta: Vec<f32> = y.data.iter().zip(&target).map(|(a, b)| a - b).collect();
        m.backward(&Tensor::from_vec(&[1, 2], delta.clone())).unwrap();
        let grads: Vec<&Param> = m.params().collect();
        for o in 0..2 {
            for i in 0..3 {
                assert_eq!(grads[0].grad.data[o * 3 + i], delta[o] * x.data[i]);
            }
            assert_eq!(grads[1].grad.data[o], delta[o]);
        }
    }

    #[test]
    fn zero_upstream_gradient_gives_zero_grads() {
        let net = chain("z", (3, 6, 6), 4, vec![
            LayerSpec::conv("c", 3, 4, 3, 1, 1, 1),
            LayerSpec::batchnorm("bn", 4),
            LayerSpec::new("r", LayerKind::ReLU),
            LayerSpec::new("f", LayerKind::Flatten),
            LayerSpec::linear("out", 144, 4),
        ]);
        let mut m = instantiate(&net, 5).unwrap();
        m.forward(&Tensor::randn(&[2, 3, 6, 6], 6), true).unwrap();
        m.backward(&Tensor::zeros(&[2, 4])).unwrap();
        assert!(m.params().all(|p| p.grad.data.iter().all(|g| *g == 0.0)));
    }

    #[test]
    fn sgd_step_deltas() {
        let net = chain("s", (2, 1, 1), 2, vec![LayerSpec::new("f", LayerKind::Flatten), LayerSpec::linear("out", 2, 2)]);
        let mut m = instantiate(&net, 0).unwrap();
        for p in m.params_mut() {
            p.value.data.iter_mut().for_each(|v| *v = 0.0);
            p.grad.data.iter_mut().enumerate().for_each(|(i, g)| *g = i as f32 + 1.0);
        }
        let before: Vec<Param> = m.params().cloned().collect();
        assert!(!m.clone().sgd_step(0.0).any_changed());
        let report = m.sgd_step(0.1);
        for (old, new) in before.iter().zip(m.params()) {
            for i in 0..old.value.numel() {
                assert_eq!(new.value.data[i] - old.value.data[i], -0.1 * old.grad.data[i]);
            }
        }
        assert_eq!(report.max_abs_delta["out"], 0.1f32 * 4.0);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let logits = Tensor::randn(&[4, 7], 11);
        let p = softmax(&logits);
        for row in p.data.chunks(7) {
            assert!((row.iter().sum::<f32>() - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn placements_match_formula() {
        for size in 1..20 {
            for k in 1..6 {
                for s in 1..4 {
                    for p in 0..3 {
                        let formula = crate::graph::window_out(size as u64, k as u64, s as u64, p as u64).unwrap_or(0);
                        assert_eq!(placements(size, k, s, p) as u64, formula);
                    }
                }
            }
        }
    }

    #[test]
    fn adaptive_pool_ranges_cover_input() {
        for size in 1..12 {
            for out in 1..8 {
                let mut covered = vec![false; size];
                for i in 0..out {
                    let (a, b) = adaptive_range(i, size, out);
                    assert!(a < b && b <= size);
                    covered[a..b].iter_mut().for_each(|c| *c = true);
                }
                assert!(covered.iter().all(|c| *c));
            }
        }
    }

    #[test]
    fn cross_entropy_rejects_bad_labels() {
        let logits = Tensor::zeros(&[2, 3]);
        assert!(cross_entropy(&logits, &[0]).is_err());
        assert!(cross_entropy(&logits, &[0, 3]).is_err());
        let (loss, _) = cross_entropy(&logits, &[0, 2]).unwrap();
        assert!((loss - 3f32.ln()).abs() < 1e-6);
    }
}
