//! Independent reference implementations used to check the library.
#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};

use channel_forge::engine::{instantiate, Tensor, BN_EPS};
use channel_forge::ir::{Attr, LayerKind, NetworkDef};
use channel_forge::netdsl;
use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

// ---------------------------------------------------------------------------
// Special functions

/// ln Γ(x) by the Lanczos approximation (g = 7, 9 terms).
pub fn ln_gamma(x: f64) -> f64 {
    const G: f64 = 7.0;
    const C: [f64; 9] = [
        0.999_999_999_999_809_9,
        676.520_368_121_885_1,
        -1_259.139_216_722_402_8,
        771.323_428_777_653_1,
        -176.615_029_162_140_6,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
        9.984_369_578_019_572e-6,
        1.505_632_735_149_311_6e-7,
    ];
    if x < 0.5 {
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut a = C[0];
    let t = x + G + 0.5;
    for (i, c) in C.iter().enumerate().skip(1) {
        a += c / (x + i as f64);
    }
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + a.ln()
}

/// Continued fraction for the incomplete beta (modified Lentz).
fn beta_cf(a: f64, b: f64, x: f64) -> f64 {
    const TINY: f64 = 1e-300;
    let (qab, qap, qam) = (a + b, a + 1.0, a - 1.0);
    let mut c = 1.0;
    let mut d = 1.0 - qab * x / qap;
    if d.abs() < TINY {
        d = TINY;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..10_000 {
        let m = m as f64;
        let m2 = 2.0 * m;
        let aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        h *= d * c;
        let aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        let del = d * c;
        h *= del;
        if (del - 1.0).abs() < 1e-16 {
            break;
        }
    }
    h
}

/// Regularized incomplete beta I_x(a, b).
pub fn inc_beta(a: f64, b: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x >= 1.0 {
        return 1.0;
    }
    let front = (ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b) + a * x.ln() + b * (1.0 - x).ln()).exp();
    if x < (a + 1.0) / (a + b + 2.0) {
        front * beta_cf(a, b, x) / a
    } else {
        1.0 - front * beta_cf(b, a, 1.0 - x) / b
    }
}

/// P(T > t) for Student's t with `df` degrees of freedom.
pub fn t_sf(t: f64, df: f64) -> f64 {
    let tail = 0.5 * inc_beta(df / 2.0, 0.5, df / (df + t * t));
    if t >= 0.0 {
        tail
    } else {
        1.0 - tail
    }
}

// ---------------------------------------------------------------------------
// Statistics

/// (slope, two-sided p) from the 2x2 normal equations.
pub fn ols_oracle(x: &[f64], y: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let (sx, sy) = (x.iter().sum::<f64>(), y.iter().sum::<f64>());
    let sxx: f64 = x.iter().map(|v| v * v).sum();
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| a * b).sum();
    // [n sx; sx sxx] [b0 b1]' = [sy sxy]'
    let det = n * sxx - sx * sx;
    let b0 = (sxx * sy - sx * sxy) / det;
    let b1 = (n * sxy - sx * sy) / det;
    let rss: f64 = x.iter().zip(y).map(|(a, b)| (b - b0 - b1 * a).powi(2)).sum();
    let sigma2 = rss / (n - 2.0);
    // Var(b1) is the (1,1) entry of sigma^2 (X'X)^-1.
    let se = (sigma2 * n / det).sqrt();
    let t = b1 / se;
    (b1, 2.0 * t_sf(t.abs(), n - 2.0))
}

/// (t, df, one-tailed p for mean(b) > mean(a)).
pub fn welch_oracle(a: &[f64], b: &[f64]) -> (f64, f64, f64) {
    let stats = |v: &[f64]| {
        let n = v.len() as f64;
        let m = v.iter().sum::<f64>() / n;
        let s2 = v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0);
        (n, m, s2)
    };
    let (n1, m1, v1) = stats(a);
    let (n2, m2, v2) = stats(b);
    let t = (m2 - m1) / (v1 / n1 + v2 / n2).sqrt();
    let df = (v1 / n1 + v2 / n2).powi(2) / ((v1 / n1).powi(2) / (n1 - 1.0) + (v2 / n2).powi(2) / (n2 - 1.0));
    (t, df, t_sf(t, df))
}

/// Spearman's rho for tie-free data: 1 - 6 sum d^2 / (n (n^2 - 1)).
pub fn spearman_no_ties(x: &[f64], y: &[f64]) -> f64 {
    let rank = |v: &[f64]| -> Vec<f64> {
        v.iter().map(|a| 1.0 + v.iter().filter(|b| *b < a).count() as f64).collect()
    };
    let (rx, ry) = (rank(x), rank(y));
    let n = x.len() as f64;
    let d2: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - b).powi(2)).sum();
    1.0 - 6.0 * d2 / (n * (n * n - 1.0))
}

/// Exact permutation p by walking all bitmasks of the pooled sample.
pub fn permutation_bruteforce(early: &[f64], late: &[f64]) -> (f64, u64) {
    let pooled: Vec<f64> = early.iter().chain(late).copied().collect();
    let n = pooled.len();
    let k = late.len();
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let observed = mean(late) - mean(early);
    let (mut hits, mut total) = (0u64, 0u64);
    for mask in 0u32..(1 << n) {
        if mask.count_ones() as usize != k {
            continue;
        }
        let (mut l, mut e) = (Vec::new(), Vec::new());
        for (i, v) in pooled.iter().enumerate() {
            if mask >> i & 1 == 1 {
                l.push(*v);
            } else {
                e.push(*v);
            }
        }
        total += 1;
        if mean(&l) - mean(&e) >= observed - 1e-12 {
            hits += 1;
        }
    }
    (hits as f64 / total as f64, total)
}

/// Indices not dominated in (lower params, higher accuracy), by pairwise checks.
pub fn pareto_bruteforce(points: &[(u64, f64)]) -> BTreeSet<usize> {
    (0..points.len())
        .filter(|&i| {
            !(0..points.len()).any(|j| {
                let (pi, ai) = points[i];
                let (pj, aj) = points[j];
                pj <= pi && aj >= ai && (pj < pi || aj > ai)
            })
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Random networks

/// A random 3-5 parameterized-layer network over a tiny input, as netdsl text.
pub fn random_small_net(seed: u64) -> String {
    let mut r = rng(seed);
    let c0: u64 = r.gen_range(1..=3);
    let hw: u64 = r.gen_range(5..=8);
    let classes: u64 = r.gen_range(3..=6);
    let layers: usize = r.gen_range(3..=5);
    let mut lines = Vec::new();
    let mut prev = "input".to_string();
    let (mut c, mut h) = (c0, hw);
    let convs = r.gen_range(0..layers);
    let mut used = 0;
    let mut id = 0;
    let mut next = |p: &str| {
        id += 1;
        format!("{p}{id}")
    };
    for _ in 0..convs {
        let out: u64 = r.gen_range(2..=5) * if r.gen_bool(0.3) { 2 } else { 1 };
        let k: u64 = if h >= 3 && r.gen_bool(0.7) { 3 } else { 1 };
        let s: u64 = if h >= 6 && r.gen_bool(0.3) { 2 } else { 1 };
        let p = k / 2;
        let groups = if c % 2 == 0 && out % 2 == 0 && r.gen_bool(0.3) { 2 } else { 1 };
        let name = next("conv");
        lines.push(format!("{name}: conv({prev}, in={c}, out={out}, k={k}, s={s}, p={p}, groups={groups});"));
        h = (h + 2 * p - k) / s + 1;
        prev = name;
        used += 1;
        if used < layers - 1 && r.gen_bool(0.4) {
            let bn = next("bn");
            lines.push(format!("{bn}: batchnorm({prev}, features={out});"));
            prev = bn;
            used += 1;
        }
        let relu = next("relu");
        lines.push(format!("{relu}: relu({prev});"));
        prev = relu;
        c = out;
        if used >= layers - 1 {
            break;
        }
    }
    if convs > 0 {
        if h >= 4 && r.gen_bool(0.5) {
            let pool = next("pool");
            lines.push(format!("{pool}: maxpool({prev}, k=2, s=2);"));
            prev = pool;
            h /= 2;
        } else if r.gen_bool(0.3) {
            let gap = next("gap");
            lines.push(format!("{gap}: avgpool({prev}, h=1, w=1);"));
            prev = gap;
            h = 1;
        }
    }
    let flat = next("flat");
    lines.push(format!("{flat}: flatten({prev});"));
    prev = flat;
    let mut f = if convs > 0 { c * h * h } else { c0 * hw * hw };
    let linears = (layers - used).max(1);
    for i in 0..linears {
        let last = i + 1 == linears;
        let out = if last { classes } else { r.gen_range(3..=8) };
        let fc = next("fc");
        lines.push(format!("{fc}: linear({prev}, in={f}, out={out});"));
        prev = fc;
        f = out;
        if !last {
            let relu = next("relu");
            lines.push(format!("{relu}: relu({prev});"));
            prev = relu;
        }
    }
    let body: String = lines.iter().map(|l| format!("  {l}\n")).collect();
    format!("network Rand{seed} {{\n  input {c0}x{hw}x{hw};\n  classes {classes};\n{body}}}\n")
}

// ---------------------------------------------------------------------------
// Finite differences

pub struct GradCheck {
    pub checked: usize,
    pub passed: usize,
    /// Samples skipped because a perturbation crossed a ReLU or max-pool kink.
    pub kinks: usize,
    pub worst: f64,
}

/// Batch activations in f64: `[b, c, h, w]`, or `[b, f]` with h = w = 1.
#[derive(Clone)]
struct Act {
    b: usize,
    c: usize,
    h: usize,
    w: usize,
    data: Vec<f64>,
}

impl Act {
    fn at(&self, n: usize, c: usize, y: usize, x: usize) -> f64 {
        self.data[((n * self.c + c) * self.h + y) * self.w + x]
    }
}

/// Independent double-precision forward pass. Returns the logits and the kink
/// signature (ReLU sign pattern plus max-pool argmax positions).
fn reference_forward(net: &NetworkDef, params: &BTreeMap<String, Vec<f64>>, x: &Act) -> (Vec<f64>, Vec<u8>) {
    let mut acts: BTreeMap<&str, Act> = BTreeMap::new();
    let mut sig = Vec::new();
    let mut last = x.clone();
    for l in &net.layers {
        let srcs = net.inputs_of(&l.id);
        let a = if srcs[0] == "input" { x } else { &acts[srcs[0]] };
        let out = match l.kind {
            LayerKind::Conv2d => {
                let (cin, cout) = (l.get(Attr::InChannels) as usize, l.get(Attr::OutChannels) as usize);
                let (k, s, p, g) = (
                    l.get(Attr::Kernel) as usize,
                    l.get(Attr::Stride) as usize,
                    l.get(Attr::Padding) as usize,
                    l.get(Attr::Groups) as usize,
                );
                let w = &params[&format!("{}.weight", l.id)];
                let bias = &params[&format!("{}.bias", l.id)];
                let (oh, ow) = ((a.h + 2 * p - k) / s + 1, (a.w + 2 * p - k) / s + 1);
                let (cig, cog) = (cin / g, cout / g);
                let mut data = vec![0.0; a.b * cout * oh * ow];
                for n in 0..a.b {
                    for oc in 0..cout {
                        let grp = oc / cog;
                        for oy in 0..oh {
                            for ox in 0..ow {
                                let mut acc = bias[oc];
                                for icl in 0..cig {
                                    let ic = grp * cig + icl;
                                    for ky in 0..k {
                                        for kx in 0..k {
                                            let iy = (oy * s + ky) as isize - p as isize;
                                            let ix = (ox * s + kx) as isize - p as isize;
                                            if iy < 0 || ix < 0 || iy >= a.h as isize || ix >= a.w as isize {
                                                continue;
                                            }
                                            acc += w[((oc * cig + icl) * k + ky) * k + kx] * a.at(n, ic, iy as usize, ix as usize);
                                        }
                                    }
                                }
                                data[((n * cout + oc) * oh + oy) * ow + ox] = acc;
                            }
                        }
                    }
                }
                Act { b: a.b, c: cout, h: oh, w: ow, data }
            }
            LayerKind::BatchNorm2d => {
                let gamma = &params[&format!("{}.weight", l.id)];
                let beta = &params[&format!("{}.bias", l.id)];
                let m = (a.b * a.h * a.w) as f64;
                let mut data = a.data.clone();
                for c in 0..a.c {
                    let vals = || (0..a.b).flat_map(move |n| (0..a.h * a.w).map(move |i| (n, i)));
                    let mean = vals().map(|(n, i)| a.data[(n * a.c + c) * a.h * a.w + i]).sum::<f64>() / m;
                    let var = vals().map(|(n, i)| (a.data[(n * a.c + c) * a.h * a.w + i] - mean).powi(2)).sum::<f64>() / m;
                    let inv = 1.0 / (var + BN_EPS as f64).sqrt();
                    for (n, i) in vals() {
                        let j = (n * a.c + c) * a.h * a.w + i;
                        data[j] = gamma[c] * (a.data[j] - mean) * inv + beta[c];
                    }
                }
                Act { data, ..a.clone() }
            }
            LayerKind::ReLU => {
                sig.extend(a.data.iter().map(|v| u8::from(*v > 0.0)));
                Act { data: a.data.iter().map(|v| v.max(0.0)).collect(), ..a.clone() }
            }
            LayerKind::MaxPool2d => {
                let (k, s) = (l.get(Attr::Kernel) as usize, l.get(Attr::Stride) as usize);
                let (oh, ow) = ((a.h - k) / s + 1, (a.w - k) / s + 1);
                let mut data = Vec::with_capacity(a.b * a.c * oh * ow);
                for n in 0..a.b {
                    for c in 0..a.c {
                        for oy in 0..oh {
                            for ox in 0..ow {
                                let mut best = (f64::NEG_INFINITY, 0u8);
                                for dy in 0..k {
                                    for dx in 0..k {
                                        let v = a.at(n, c, oy * s + dy, ox * s + dx);
                                        if v > best.0 {
                                            best = (v, (dy * k + dx) as u8);
                                        }
                                    }
                                }
                                sig.push(best.1);
                                data.push(best.0);
                            }
                        }
                    }
                }
                Act { b: a.b, c: a.c, h: oh, w: ow, data }
            }
            LayerKind::AdaptiveAvgPool2d => {
                let (oh, ow) = (l.get(Attr::Height) as usize, l.get(Attr::Width) as usize);
                let range = |i: usize, size: usize, out: usize| (i * size / out, ((i + 1) * size).div_ceil(out));
                let mut data = Vec::with_capacity(a.b * a.c * oh * ow);
                for n in 0..a.b {
                    for c in 0..a.c {
                        for oy in 0..oh {
                            let (y0, y1) = range(oy, a.h, oh);
                            for ox in 0..ow {
                                let (x0, x1) = range(ox, a.w, ow);
                                let mut acc = 0.0;
                                for y in y0..y1 {
                                    for x in x0..x1 {
                                        acc += a.at(n, c, y, x);
                                    }
                                }
                                data.push(acc / ((y1 - y0) * (x1 - x0)) as f64);
                            }
                        }
                    }
                }
                Act { b: a.b, c: a.c, h: oh, w: ow, data }
            }
            LayerKind::Flatten => Act { b: a.b, c: a.c * a.h * a.w, h: 1, w: 1, data: a.data.clone() },
            LayerKind::Linear => {
                let (fin, fout) = (l.get(Attr::InFeatures) as usize, l.get(Attr::OutFeatures) as usize);
                let w = &params[&format!("{}.weight", l.id)];
                let bias = &params[&format!("{}.bias", l.id)];
                let mut data = vec![0.0; a.b * fout];
                for n in 0..a.b {
                    for o in 0..fout {
                        data[n * fout + o] = bias[o] + (0..fin).map(|i| w[o * fin + i] * a.data[n * fin + i]).sum::<f64>();
                    }
                }
                Act { b: a.b, c: fout, h: 1, w: 1, data }
            }
            LayerKind::Add => {
                let mut data = a.data.clone();
                for src in &srcs[1..] {
                    let other = if *src == "input" { x } else { &acts[src] };
                    data.iter_mut().zip(&other.data).for_each(|(d, o)| *d += o);
                }
                Act { data, ..a.clone() }
            }
            LayerKind::Concat => {
                let parts: Vec<&Act> = srcs.iter().map(|s| if *s == "input" { x } else { &acts[s] }).collect();
                let c: usize = parts.iter().map(|p| p.c).sum();
                let mut data = Vec::with_capacity(a.b * c * a.h * a.w);
                for n in 0..a.b {
                    for p in &parts {
                        let row = p.c * p.h * p.w;
                        data.extend_from_slice(&p.data[n * row..(n + 1) * row]);
                    }
                }
                Act { c, data, ..a.clone() }
            }
            LayerKind::Dropout => a.clone(),
        };
        last = out.clone();
        acts.insert(&l.id, out);
    }
    (last.data, sig)
}

/// Central differences with step `eps` on up to `samples` distinct parameter
/// entries. The analytic side is the engine's f32 backward pass; the numeric
/// side perturbs parameters in an f64 reference forward so the difference
/// quotient is not dominated by single-precision rounding.
/// Relative error is |a - n| / max(|a|, |n|, floor).
pub fn gradient_check(src: &str, seed: u64, samples: usize, eps: f64, tol: f64, floor: f64) -> GradCheck {
    let net = netdsl::parse(src).expect("random net parses");
    let mut model = instantiate(&net, seed).expect("instantiate");
    let i = net.input_shape;
    let x = Tensor::randn(&[2, i.channels as usize, i.height as usize, i.width as usize], seed ^ 1);
    let coef_t = Tensor::randn(&[2, net.num_classes as usize], seed ^ 2);
    let coef: Vec<f64> = coef_t.data.iter().map(|v| *v as f64).collect();

    model.zero_grad();
    model.forward(&x, true).expect("forward");
    model.backward(&coef_t).expect("backward");
    let names: Vec<String> = model.params().map(|p| p.name.clone()).collect();
    let grads: Vec<Vec<f32>> = model.params().map(|p| p.grad.data.clone()).collect();
    let mut params: BTreeMap<String, Vec<f64>> =
        model.params().map(|p| (p.name.clone(), p.value.data.iter().map(|v| *v as f64).collect())).collect();
    let x64 = Act { b: 2, c: i.channels as usize, h: i.height as usize, w: i.width as usize, data: x.data.iter().map(|v| *v as f64).collect() };
    let loss = |logits: &[f64]| logits.iter().zip(&coef).map(|(a, b)| a * b).sum::<f64>();
    let (_, base_sig) = reference_forward(&net, &params, &x64);

    let mut entries: Vec<(usize, usize)> =
        grads.iter().enumerate().flat_map(|(pi, g)| (0..g.len()).map(move |ei| (pi, ei))).collect();
    entries.shuffle(&mut rng(seed ^ 3));
    entries.truncate(samples);

    let mut out = GradCheck { checked: 0, passed: 0, kinks: 0, worst: 0.0 };
    for (pi, ei) in entries {
        let name = &names[pi];
        let orig = params[name][ei];
        let mut eval = |v: f64| {
            params.get_mut(name).unwrap()[ei] = v;
            let (logits, sig) = reference_forward(&net, &params, &x64);
            (loss(&logits), sig)
        };
        let (plus, sig_p) = eval(orig + eps);
        let (minus, sig_m) = eval(orig - eps);
        eval(orig);
        if sig_p != base_sig || sig_m != base_sig {
            out.kinks += 1;
            continue;
        }
        let numeric = (plus - minus) / (2.0 * eps);
        let analytic = grads[pi][ei] as f64;
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor);
        out.checked += 1;
        out.worst = out.worst.max(rel);
        if rel <= tol {
            out.passed += 1;
        } else if std::env::var_os("GRADCHECK_VERBOSE").is_some() {
            eprintln!("{name}[{ei}] analytic {analytic:.6} numeric {numeric:.6} rel {rel:.3e}");
        }
    }
    out
}
