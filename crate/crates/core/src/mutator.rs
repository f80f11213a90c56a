//! Dimension planning and source-level application of channel mutations.

use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{build_groups, infer_shapes, recompute_derived, Coupling, MutationGroup, ShapeError};
use crate::ir::{Attr, LayerKind, NetworkDef};
use crate::netdsl::{self, apply_edits, Edit, EditError, ParseError};
use crate::verifier::verify_net;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MutatorConfig {
    pub width_min: u64,
    pub width_max: u64,
    pub rng_seed: u64,
    pub max_attempts: u32,
}

impl Default for MutatorConfig {
    fn default() -> Self {
        MutatorConfig { width_min: 4, width_max: 1024, rng_seed: 0, max_attempts: 32 }
    }
}

impl MutatorConfig {
    pub fn with_seed(rng_seed: u64) -> Self {
        MutatorConfig { rng_seed, ..Self::default() }
    }

    pub fn is_valid(&self) -> bool {
        1 <= self.width_min && self.width_min <= self.width_max && self.max_attempts >= 1
    }
}

#[derive(Debug, Error)]
pub enum MutateError {
    #[error("network has no mutable group")]
    NoMutableGroup,
    #[error("no admissible width found after {0} attempts")]
    ConstraintUnsatisfiable(u32),
    #[error("invalid mutator config: need 1 <= width_min <= width_max and max_attempts >= 1")]
    InvalidConfig,
    #[error("seed network rejected: {0}")]
    InvalidSeed(String),
    #[error(transparent)]
    Parse(#[from] ParseError),
    #[error(transparent)]
    Edit(#[from] EditError),
    #[error(transparent)]
    Shape(#[from] ShapeError),
    #[error("internal inconsistency: {0}")]
    InternalInconsistency(String),
}

/// A single attribute change implied by a plan beyond the group slots themselves.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Repair {
    pub layer: String,
    pub attr: Attr,
    pub old: u64,
    pub new: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct MutationPlan {
    pub group: MutationGroup,
    pub new_width: u64,
    pub repairs: Vec<Repair>,
}

/// Rounds `raw` up to the nearest multiple of `m`.
pub fn round_up(raw: u64, m: u64) -> u64 {
    raw.div_ceil(m) * m
}

/// Sets every slot of `group` to `width`, applies depthwise resets where the
/// width breaks a resettable divisor, and recomputes derived slots. Returns
/// the mutated net and the implied repairs.
fn assign(
    net: &NetworkDef,
    coupling: &Coupling,
    group: &MutationGroup,
    width: u64,
) -> (NetworkDef, Vec<Repair>) {
    let mut out = net.clone();
    let mut repairs = Vec::new();
    for slot in &group.slots {
        out.layer_mut(&slot.layer).expect("group slot layer").set(slot.attr, width);
    }
    for d in group.divisors.iter().filter(|d| d.resettable && width % d.value != 0) {
        let layer = out.layer_mut(&d.layer).expect("divisor layer");
        repairs.push(Repair { layer: d.layer.clone(), attr: Attr::Groups, old: layer.get(Attr::Groups), new: 1 });
        layer.set(Attr::Groups, 1);
    }
    for (slot, old, new) in recompute_derived(&mut out, &coupling.derived) {
        repairs.push(Repair { layer: slot.layer, attr: slot.attr, old, new });
    }
    // Depthwise convs fed by a concat follow the recomputed sum, not the group.
    for idx in 0..out.layers.len() {
        let (was_depthwise, id) = (net.layers[idx].is_depthwise(), net.layers[idx].id.clone());
        let l = &mut out.layers[idx];
        if l.kind == LayerKind::Conv2d && was_depthwise && l.get(Attr::Groups) > 1 {
            let g = l.get(Attr::Groups);
            if l.get(Attr::InChannels) % g != 0 || l.get(Attr::OutChannels) % g != 0 {
                repairs.push(Repair { layer: id, attr: Attr::Groups, old: g, new: 1 });
                l.set(Attr::Groups, 1);
            }
        }
    }
    (out, repairs)
}

/// Chooses a mutable group uniformly and draws a width for it.
pub fn plan_mutation<R: Rng>(
    net: &NetworkDef,
    coupling: &Coupling,
    cfg: &MutatorConfig,
    rng: &mut R,
) -> Result<MutationPlan, MutateError> {
    if !cfg.is_valid() {
        return Err(MutateError::InvalidConfig);
    }
    let candidates = coupling.mutable_groups();
    if candidates.is_empty() {
        return Err(MutateError::NoMutableGroup);
    }
    for _ in 0..cfg.max_attempts {
        let group = candidates[rng.gen_range(0..candidates.len())];
        let raw = rng.gen_range(cfg.width_min..=cfg.width_max);
        let width = round_up(raw, group.required_multiple());
        if width > cfg.width_max {
            continue;
        }
        let (mutated, repairs) = assign(net, coupling, group, width);
        if mutated.validate().is_ok() && infer_shapes(&mutated).is_ok() {
            return Ok(MutationPlan { group: group.clone(), new_width: width, repairs });
        }
    }
    Err(MutateError::ConstraintUnsatisfiable(cfg.max_attempts))
}

/// Applies `plan` to both the IR and the source text. The returned net is
/// the re-parse of the returned source.
pub fn apply_plan(net: &NetworkDef, src: &str, plan: &MutationPlan) -> Result<(NetworkDef, String), MutateError> {
    let mut oracle = net.clone();
    let mut edits = Vec::new();
    let mut touch = |layer: &str, attr: Attr, value: u64| -> Result<(), MutateError> {
        let spec = net
            .layer(layer)
            .ok_or_else(|| MutateError::InternalInconsistency(format!("plan names unknown layer `{layer}`")))?;
        oracle.layer_mut(layer).expect("cloned layer").set(attr, value);
        if spec.try_get(attr) == Some(value) {
            return Ok(());
        }
        let span = spec.spans.get(&attr).copied().ok_or_else(|| {
            MutateError::InternalInconsistency(format!("`{layer}.{}` has no source literal", attr.name()))
        })?;
        edits.push(Edit::new(span, value));
        Ok(())
    };
    for slot in &plan.group.slots {
        touch(&slot.layer, slot.attr, plan.new_width)?;
    }
    for r in &plan.repairs {
        touch(&r.layer, r.attr, r.new)?;
    }
    drop(touch);

    let text = apply_edits(src, &edits)?;
    let reparsed = netdsl::parse(&text)?;
    if reparsed != oracle {
        return Err(MutateError::InternalInconsistency("re-parsed source differs from direct IR assignment".into()));
    }
    infer_shapes(&reparsed).map_err(|e| MutateError::InternalInconsistency(format!("mutated net fails shape inference: {e}")))?;
    Ok((reparsed, text))
}

/// One round of plan + apply.
pub fn mutate_once<R: Rng>(
    net: &NetworkDef,
    src: &str,
    cfg: &MutatorConfig,
    rng: &mut R,
) -> Result<(NetworkDef, String), MutateError> {
    let shapes = infer_shapes(net)?;
    let coupling = build_groups(net, &shapes)?;
    let plan = plan_mutation(net, &coupling, cfg, rng)?;
    apply_plan(net, src, &plan)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Variant {
    pub source: String,
    pub net: NetworkDef,
    pub rounds: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BootstrapOutput {
    pub variants: Vec<Variant>,
    pub draws: u64,
    pub duplicate_draws: u64,
    pub verifier_rejections: u64,
}

/// Independent rng stream for draw `index`.
pub fn stream_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

const CHUNK: usize = 16;

/// Generates `count` distinct verified variants of the seed.
pub fn bootstrap(seed_src: &str, count: usize, cfg: &MutatorConfig) -> Result<BootstrapOutput, MutateError> {
    let mut out = BootstrapOutput { variants: Vec::new(), draws: 0, duplicate_draws: 0, verifier_rejections: 0 };
    if count == 0 {
        return Ok(out);
    }
    if !cfg.is_valid() {
        return Err(MutateError::InvalidConfig);
    }
    let seed = netdsl::parse(seed_src)?;
    let report = verify_net(&seed);
    if !report.is_valid() {
        return Err(MutateError::InvalidSeed(report.verdict.to_string()));
    }
    let mut seen: BTreeSet<Vec<(String, u64)>> = BTreeSet::new();
    seen.insert(seed.width_vector());
    let budget = count as u64 * cfg.max_attempts as u64;

    while out.variants.len() < count {
        if out.draws >= budget {
            return Err(MutateError::ConstraintUnsatisfiable(cfg.max_attempts));
        }
        let mut fresh: Vec<Variant> = Vec::new();
        while fresh.len() < CHUNK.min(count - out.variants.len()) && out.draws < budget {
            let mut rng = stream_rng(cfg.rng_seed, out.draws);
            out.draws += 1;
            let rounds = rng.gen_range(1..=3u32);
            let (mut net, mut src) = (seed.clone(), seed_src.to_string());
            for _ in 0..rounds {
                (net, src) = mutate_once(&net, &src, cfg, &mut rng)?;
            }
            if !seen.insert(net.width_vector()) {
                out.duplicate_draws += 1;
                continue;
            }
            fresh.push(Variant { source: src, net, rounds });
        }
        let verdicts: Vec<bool> = fresh.par_iter().map(|v| verify_net(&v.net).is_valid()).collect();
        for (v, ok) in fresh.into_iter().zip(verdicts) {
            if ok {
                out.variants.push(v);
            } else {
                out.verifier_rejections += 1;
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{Divisor, Slot};
    use crate::seeds;

    fn coupling(net: &NetworkDef) -> Coupling {
        build_groups(net, &infer_shapes(net).unwrap()).unwrap()
    }

    #[test]
    fn round_up_to_divisor() {
        assert_eq!(round_up(99, 8), 104);
        assert_eq!(round_up(96, 8), 96);
        assert_eq!(round_up(5, 1), 5);
    }

    #[test]
    fn plan_is_reproducible() {
        let net = netdsl::parse(seeds::ALEXNET).unwrap();
        let c = coupling(&net);
        let cfg = MutatorConfig::with_seed(3);
        let a = plan_mutation(&net, &c, &cfg, &mut stream_rng(3, 0)).unwrap();
        let b = plan_mutation(&net, &c, &cfg, &mut stream_rng(3, 0)).unwrap();
        assert_eq!(a, b);
        assert!((4..=1024).contains(&a.new_width));
    }

    #[test]
    fn identity_plan_keeps_source() {
        let net = netdsl::parse(seeds::ALEXNET).unwrap();
        let c = coupling(&net);
        let group = c.group_of(&Slot::new("conv2", Attr::OutChannels)).unwrap().clone();
        let plan = MutationPlan { group, new_width: 192, repairs: vec![] };
        let (out, text) = apply_plan(&net, seeds::ALEXNET, &plan).unwrap();
        assert_eq!(text, seeds::ALEXNET);
        assert_eq!(out, net);
    }

    #[test]
    fn flatten_feeding_linear_is_recomputed() {
        let net = netdsl::parse(seeds::ALEXNET).unwrap();
        let c = coupling(&net);
        let group = c.group_of(&Slot::new("conv5", Attr::OutChannels)).unwrap();
        let (mutated, repairs) = assign(&net, &c, group, 100);
        assert_eq!(repairs, vec![Repair { layer: "fc1".into(), attr: Attr::InFeatures, old: 1024, new: 400 }]);
        let plan = MutationPlan { group: group.clone(), new_width: 100, repairs };
        let (out, _) = apply_plan(&net, seeds::ALEXNET, &plan).unwrap();
        assert_eq!(out, mutated);
    }

    #[test]
    fn depthwise_reset_fires() {
        let net = netdsl::parse(seeds::MOBILE).unwrap();
        let c = coupling(&net);
        let group = c.group_of(&Slot::new("dw1", Attr::InChannels)).unwrap();
        assert!(group.divisors.contains(&Divisor { layer: "dw1".into(), value: 32, resettable: true }));
        let (mutated, repairs) = assign(&net, &c, group, 40);
        assert!(repairs.contains(&Repair { layer: "dw1".into(), attr: Attr::Groups, old: 32, new: 1 }));
        assert!(mutated.validate().is_ok());
        let (_, keep) = assign(&net, &c, group, 64);
        assert!(keep.iter().all(|r| r.attr != Attr::Groups));
    }

    #[test]
    fn grouped_widths_are_multiples() {
        let net = netdsl::parse(seeds::MOBILE).unwrap();
        let c = coupling(&net);
        let mut rng = stream_rng(11, 0);
        let cfg = MutatorConfig::default();
        for _ in 0..200 {
            let plan = plan_mutation(&net, &c, &cfg, &mut rng).unwrap();
            assert_eq!(plan.new_width % plan.group.required_multiple(), 0);
            assert!(plan.new_width <= cfg.width_max);
        }
    }

    #[test]
    fn no_mutable_group() {
        let net = netdsl::parse("network L { input 1x1x1; classes 3; f: flatten(input); o: linear(f, in=1, out=3); }").unwrap();
        let c = coupling(&net);
        let err = plan_mutation(&net, &c, &MutatorConfig::default(), &mut stream_rng(0, 0)).unwrap_err();
        assert!(matches!(err, MutateError::NoMutableGroup));
    }

    #[test]
    fn bootstrap_small() {
        let cfg = MutatorConfig::with_seed(7);
        assert!(bootstrap(seeds::TINY_CNN, 0, &cfg).unwrap().variants.is_empty());
        let a = bootstrap(seeds::TINY_CNN, 12, &cfg).unwrap();
        assert_eq!(a.variants.len(), 12);
        let widths: BTreeSet<_> = a.variants.iter().map(|v| v.net.width_vector()).collect();
        assert_eq!(widths.len(), 12);
        assert_eq!(a, bootstrap(seeds::TINY_CNN, 12, &cfg).unwrap());
    }
}
