//! Three-stage candidate gate: shape consistency, gradient integrity,
//! trainability. Total: every failure is reported, nothing panics or errors.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::engine::{cross_entropy, instantiate, ModelInstance, Tensor};
use crate::graph::{infer_shapes, ShapeError};
use crate::ir::{NetworkDef, Violation};
use crate::netdsl;

/// Samples in the synthetic probe batch.
pub const PROBE_BATCH: usize = 2;
/// Learning rate of the single trainability step.
pub const PROBE_LR: f32 = 1e-2;
/// Seed for parameter init, probe data and probe labels.
pub const VERIFY_SEED: u64 = 0x5eed_cafe;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Stage {
    Shape = 1,
    Gradient = 2,
    Trainability = 3,
}

impl Stage {
    pub fn number(self) -> u8 {
        self as u8
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Reason {
    Parse(String),
    InvalidIr(String),
    ClassCount { expected: u64, got: u64 },
    ShapeMismatch(String),
    Runtime(String),
    NonFiniteGradient(String),
    NoUpdate,
}

impl fmt::Display for Reason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Reason::Parse(m) => write!(f, "parse: {m}"),
            Reason::InvalidIr(m) => write!(f, "invalid network: {m}"),
            Reason::ClassCount { expected, got } => write!(f, "class-count: output has {got} classes, expected {expected}"),
            Reason::ShapeMismatch(m) => write!(f, "ShapeMismatch: {m}"),
            Reason::Runtime(m) => write!(f, "runtime: {m}"),
            Reason::NonFiniteGradient(p) => write!(f, "non-finite gradient in {p}"),
            Reason::NoUpdate => write!(f, "no parameter changed after one optimizer step"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Verdict {
    Valid,
    Invalid { stage: Stage, reason: Reason },
}

impl Verdict {
    pub fn is_valid(&self) -> bool {
        matches!(self, Verdict::Valid)
    }
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Verdict::Valid => f.write_str("valid"),
            Verdict::Invalid { stage, reason } => write!(f, "invalid (stage {}: {reason})", stage.number()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VerificationReport {
    pub shape_ok: bool,
    pub gradient_ok: bool,
    pub trainable_ok: bool,
    pub verdict: Verdict,
}

impl VerificationReport {
    fn failed(stage: Stage, reason: Reason) -> Self {
        VerificationReport {
            shape_ok: stage > Stage::Shape,
            gradient_ok: stage > Stage::Gradient,
            trainable_ok: false,
            verdict: Verdict::Invalid { stage, reason },
        }
    }

    pub fn is_valid(&self) -> bool {
        self.verdict.is_valid()
    }

    /// Stable multi-line rendering used by the CLI.
    pub fn to_text(&self) -> String {
        let failed_stage = match &self.verdict {
            Verdict::Valid => None,
            Verdict::Invalid { stage, .. } => Some(*stage),
        };
        let line = |stage: Stage, name: &str, ok: bool| {
            let status = match failed_stage {
                _ if ok => "ok".to_string(),
                Some(s) if s == stage => "FAILED".to_string(),
                _ => "skipped".to_string(),
            };
            format!("stage {} {name}: {status}\n", stage.number())
        };
        let mut s = String::new();
        s.push_str(&line(Stage::Shape, "shape-consistency", self.shape_ok));
        s.push_str(&line(Stage::Gradient, "gradient-integrity", self.gradient_ok));
        s.push_str(&line(Stage::Trainability, "trainability", self.trainable_ok));
        s.push_str(&format!("verdict: {}\n", self.verdict));
        s
    }
}

/// Runs the full protocol on source text.
pub fn verify(src: &str) -> VerificationReport {
    let net = match netdsl::parse_unvalidated(src) {
        Ok(net) => net,
        Err(e) => return VerificationReport::failed(Stage::Shape, Reason::Parse(e.to_string())),
    };
    verify_net(&net)
}

/// Runs the protocol on an already-parsed network.
pub fn verify_net(net: &NetworkDef) -> VerificationReport {
    match run_protocol(net) {
        Ok(()) => VerificationReport { shape_ok: true, gradient_ok: true, trainable_ok: true, verdict: Verdict::Valid },
        Err((stage, reason)) => VerificationReport::failed(stage, reason),
    }
}

fn run_protocol(net: &NetworkDef) -> Result<(), (Stage, Reason)> {
    let shape_fail = |r| (Stage::Shape, r);
    let violations = net.validate().violations;
    if let Some(v) = violations.iter().find(|v| matches!(v, Violation::SinkClassCount { .. })) {
        if let Violation::SinkClassCount { expected, got, .. } = v {
            return Err(shape_fail(Reason::ClassCount { expected: *expected, got: *got }));
        }
    }
    if let Some(v) = violations.first() {
        return Err(shape_fail(Reason::InvalidIr(v.to_string())));
    }
    let shapes = infer_shapes(net).map_err(|e| match e {
        ShapeError::Mismatch { .. } => shape_fail(Reason::ShapeMismatch(e.to_string())),
        ShapeError::InvalidIr(m) => shape_fail(Reason::InvalidIr(m)),
    })?;

    let mut model = instantiate(net, VERIFY_SEED).map_err(|e| shape_fail(Reason::Runtime(e.to_string())))?;
    let i = net.input_shape;
    let probe = Tensor::randn(&[PROBE_BATCH, i.channels as usize, i.height as usize, i.width as usize], VERIFY_SEED);
    let logits = model.forward(&probe, true).map_err(|e| shape_fail(Reason::ShapeMismatch(e.to_string())))?;
    if logits.shape != [PROBE_BATCH, net.num_classes as usize] {
        let got = logits.shape.get(1).copied().unwrap_or(0) as u64;
        return Err(shape_fail(Reason::ClassCount { expected: net.num_classes, got }));
    }
    for (id, observed) in model.activation_shapes() {
        let inferred = shapes.outputs[&id].dims();
        if observed != inferred {
            return Err(shape_fail(Reason::ShapeMismatch(format!(
                "`{id}` inferred {inferred:?} but executed {observed:?}"
            ))));
        }
    }

    let labels = probe_labels(net.num_classes as usize);
    let (loss, grad) = cross_entropy(&logits, &labels).map_err(|e| (Stage::Gradient, Reason::Runtime(e.to_string())))?;
    if !loss.is_finite() {
        return Err((Stage::Gradient, Reason::NonFiniteGradient("loss".into())));
    }
    model.backward(&grad).map_err(|e| (Stage::Gradient, Reason::Runtime(e.to_string())))?;
    check_gradients(&model).map_err(|p| (Stage::Gradient, Reason::NonFiniteGradient(p)))?;

    if !model.sgd_step(PROBE_LR).any_changed() {
        return Err((Stage::Trainability, Reason::NoUpdate));
    }
    Ok(())
}

fn probe_labels(classes: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(VERIFY_SEED ^ 0x1abe1);
    (0..PROBE_BATCH).map(|_| rng.gen_range(0..classes)).collect()
}

fn check_gradients(model: &ModelInstance) -> Result<(), String> {
    for p in model.params() {
        if p.grad.shape != p.value.shape || !p.grad.is_finite() {
            return Err(p.name.clone());
        }
    }
    Ok(())
}
