//! Symbolic shape inference and channel-coupling analysis.
//!
//! Coupling rules, applied as a union-find closure over channel slots:
//!
//! - a producer's output channels are tied to every channel-consuming
//!   attribute downstream (conv `in_channels`, batchnorm `num_features`,
//!   linear `in_features` after another linear);
//! - `add` unifies the channel dimension of all its operands;
//! - `concat` does not unify its operands; consumers of the concatenated
//!   tensor get *derived* slots recomputed from the operand sum;
//! - a linear fed through `flatten` of a feature map has a derived
//!   `in_features = c * h * w`;
//! - the sink's `out_features` and any slot tied to the input channels are
//!   fixed;
//! - grouped convs add their `groups` as a divisor on both of their slots;
//!   depthwise convs (groups == in == out) unify in and out and carry a
//!   resettable divisor instead.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::Serialize;
use thiserror::Error;

use crate::ir::{Attr, LayerKind, NetworkDef, INPUT};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub enum Shape {
    Map { c: u64, h: u64, w: u64 },
    Flat(u64),
}

impl Shape {
    pub fn channels(&self) -> u64 {
        match *self {
            Shape::Map { c, .. } => c,
            Shape::Flat(f) => f,
        }
    }

    pub fn numel(&self) -> u64 {
        match *self {
            Shape::Map { c, h, w } => c * h * w,
            Shape::Flat(f) => f,
        }
    }

    pub fn dims(&self) -> Vec<usize> {
        match *self {
            Shape::Map { c, h, w } => vec![c as usize, h as usize, w as usize],
            Shape::Flat(f) => vec![f as usize],
        }
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Shape::Map { c, h, w } => write!(f, "{c}x{h}x{w}"),
            Shape::Flat(n) => write!(f, "{n}"),
        }
    }
}

/// Output shape of every layer (batch dimension excluded).
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ShapeMap {
    pub input: Shape,
    pub outputs: BTreeMap<String, Shape>,
}

impl ShapeMap {
    pub fn get(&self, id: &str) -> Option<Shape> {
        if id == INPUT {
            Some(self.input)
        } else {
            self.outputs.get(id).copied()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ShapeError {
    #[error("shape mismatch at `{layer}`: expected {expected}, got {got}")]
    Mismatch { layer: String, expected: String, got: String },
    #[error("invalid network: {0}")]
    InvalidIr(String),
}

/// Spatial output size of a conv or pool window; `None` if the window does not fit.
pub fn window_out(size: u64, kernel: u64, stride: u64, padding: u64) -> Option<u64> {
    let padded = size + 2 * padding;
    if padded < kernel || stride == 0 {
        None
    } else {
        Some((padded - kernel) / stride + 1)
    }
}

fn mismatch(layer: &str, expected: impl fmt::Display, got: impl fmt::Display) -> ShapeError {
    ShapeError::Mismatch { layer: layer.to_string(), expected: expected.to_string(), got: got.to_string() }
}

/// Infers every layer's output shape, or reports the first inconsistency in
/// topological order.
pub fn infer_shapes(net: &NetworkDef) -> Result<ShapeMap, ShapeError> {
    if let Some(v) = net.validate().violations.first() {
        return Err(ShapeError::InvalidIr(v.to_string()));
    }
    let order = net.topo_order().map_err(|c| ShapeError::InvalidIr(format!("cycle through {}", c.join(" -> "))))?;
    let i = net.input_shape;
    let mut map = ShapeMap { input: Shape::Map { c: i.channels, h: i.height, w: i.width }, outputs: BTreeMap::new() };
    for idx in order {
        let l = &net.layers[idx];
        let ins: Vec<Shape> = net.inputs_of(&l.id).iter().map(|p| map.get(p).expect("topological order")).collect();
        let shape = layer_output(net, idx, &ins)?;
        map.outputs.insert(l.id.clone(), shape);
    }
    if let Some(sink) = net.sink() {
        let got = map.outputs[&sink.id];
        if got != Shape::Flat(net.num_classes) {
            return Err(mismatch(&sink.id, Shape::Flat(net.num_classes), got));
        }
    }
    Ok(map)
}

fn feature_map(layer: &str, s: Shape) -> Result<(u64, u64, u64), ShapeError> {
    match s {
        Shape::Map { c, h, w } => Ok((c, h, w)),
        Shape::Flat(n) => Err(mismatch(layer, "CxHxW feature map", format!("flat {n}"))),
    }
}

fn layer_output(net: &NetworkDef, idx: usize, ins: &[Shape]) -> Result<Shape, ShapeError> {
    let l = &net.layers[idx];
    let id = l.id.as_str();
    match l.kind {
        LayerKind::Conv2d => {
            let (c, h, w) = feature_map(id, ins[0])?;
            let cin = l.get(Attr::InChannels);
            if c != cin {
                return Err(mismatch(id, format!("{cin} input channels"), format!("{c}")));
            }
            let (k, s, p) = (l.get(Attr::Kernel), l.get(Attr::Stride), l.get(Attr::Padding));
            let (Some(oh), Some(ow)) = (window_out(h, k, s, p), window_out(w, k, s, p)) else {
                return Err(mismatch(id, format!("spatial size >= kernel {k} (padding {p})"), format!("{h}x{w}")));
            };
            Ok(Shape::Map { c: l.get(Attr::OutChannels), h: oh, w: ow })
        }
        LayerKind::MaxPool2d => {
            let (c, h, w) = feature_map(id, ins[0])?;
            let (k, s) = (l.get(Attr::Kernel), l.get(Attr::Stride));
            let (Some(oh), Some(ow)) = (window_out(h, k, s, 0), window_out(w, k, s, 0)) else {
                return Err(mismatch(id, format!("spatial size >= kernel {k}"), format!("{h}x{w}")));
            };
            Ok(Shape::Map { c, h: oh, w: ow })
        }
        LayerKind::AdaptiveAvgPool2d => {
            let (c, _, _) = feature_map(id, ins[0])?;
            Ok(Shape::Map { c, h: l.get(Attr::Height), w: l.get(Attr::Width) })
        }
        LayerKind::BatchNorm2d => {
            let (c, h, w) = feature_map(id, ins[0])?;
            let n = l.get(Attr::NumFeatures);
            if c != n {
                return Err(mismatch(id, format!("{n} channels"), c));
            }
            Ok(Shape::Map { c, h, w })
        }
        LayerKind::ReLU | LayerKind::Dropout => Ok(ins[0]),
        LayerKind::Flatten => Ok(Shape::Flat(ins[0].numel())),
        LayerKind::Linear => {
            let fin = l.get(Attr::InFeatures);
            match ins[0] {
                Shape::Flat(n) if n == fin => Ok(Shape::Flat(l.get(Attr::OutFeatures))),
                other => Err(mismatch(id, format!("{fin} features"), other)),
            }
        }
        LayerKind::Add => {
            let first = ins[0];
            if let Some(bad) = ins.iter().find(|s| **s != first) {
                return Err(mismatch(id, first, bad));
            }
            Ok(first)
        }
        LayerKind::Concat => {
            let (_, h, w) = feature_map(id, ins[0])?;
            let mut total = 0;
            for s in ins {
                let (c, h2, w2) = feature_map(id, *s)?;
                if (h2, w2) != (h, w) {
                    return Err(mismatch(id, format!("spatial {h}x{w}"), format!("{h2}x{w2}")));
                }
                total += c;
            }
            Ok(Shape::Map { c: total, h, w })
        }
    }
}

/// A (layer id, attribute) pair.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub struct Slot {
    pub layer: String,
    pub attr: Attr,
}

impl Slot {
    pub fn new(layer: &str, attr: Attr) -> Self {
        Slot { layer: layer.to_string(), attr }
    }
}

impl fmt::Display for Slot {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}.{}", self.layer, self.attr)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub enum FixedReason {
    /// Tied to the network's input channels.
    Input,
    /// Sink `out_features` equals the class count.
    ClassCount,
    /// Coupled to a concat sum through an `add`; cannot move independently.
    ConcatSum,
}

/// Divisibility requirement contributed by a grouped conv.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Divisor {
    pub layer: String,
    pub value: u64,
    /// Depthwise convs may be reset to `groups = 1` instead of constraining the width.
    pub resettable: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct MutationGroup {
    pub slots: BTreeSet<Slot>,
    pub driver: Slot,
    pub divisors: Vec<Divisor>,
    pub fixed: Option<FixedReason>,
}

impl MutationGroup {
    pub fn is_mutable(&self) -> bool {
        self.fixed.is_none()
    }

    /// Least common multiple of the non-resettable divisors.
    pub fn required_multiple(&self) -> u64 {
        self.divisors.iter().filter(|d| !d.resettable).fold(1, |acc, d| lcm(acc, d.value))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub enum DerivedRule {
    /// Channels of a concatenated tensor.
    ConcatSum,
    /// `c * h * w` of a flattened feature map.
    Flatten,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct DerivedSlot {
    pub slot: Slot,
    pub rule: DerivedRule,
}

/// Result of the coupling analysis: a partition of all channel slots into
/// groups and derived slots.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Coupling {
    pub groups: Vec<MutationGroup>,
    pub derived: Vec<DerivedSlot>,
}

impl Coupling {
    pub fn mutable_groups(&self) -> Vec<&MutationGroup> {
        self.groups.iter().filter(|g| g.is_mutable()).collect()
    }

    pub fn group_of(&self, slot: &Slot) -> Option<&MutationGroup> {
        self.groups.iter().find(|g| g.slots.contains(slot))
    }
}

pub fn gcd(a: u64, b: u64) -> u64 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

pub fn lcm(a: u64, b: u64) -> u64 {
    a / gcd(a, b) * b
}

struct UnionFind {
    parent: Vec<usize>,
    rank: Vec<u8>,
}

impl UnionFind {
    fn new() -> Self {
        UnionFind { parent: Vec::new(), rank: Vec::new() }
    }

    fn make(&mut self) -> usize {
        self.parent.push(self.parent.len());
        self.rank.push(0);
        self.parent.len() - 1
    }

    fn find(&mut self, x: usize) -> usize {
        let mut root = x;
        while self.parent[root] != root {
            root = self.parent[root];
        }
        let mut cur = x;
        while self.parent[cur] != root {
            let next = self.parent[cur];
            self.parent[cur] = root;
            cur = next;
        }
        root
    }

    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra == rb {
            return;
        }
        match self.rank[ra].cmp(&self.rank[rb]) {
            std::cmp::Ordering::Less => self.parent[ra] = rb,
            std::cmp::Ordering::Greater => self.parent[rb] = ra,
            std::cmp::Ordering::Equal => {
                self.parent[rb] = ra;
                self.rank[ra] += 1;
            }
        }
    }
}

/// Channel dimension of a tensor flowing along an edge.
#[derive(Clone)]
enum Channel {
    /// Determined by a union-find node.
    Node(usize),
    /// A concat sum (contributing nodes) or a flattened map.
    Derived { rule: DerivedRule, sources: Vec<usize> },
}

impl Channel {
    fn sources(&self) -> Vec<usize> {
        match self {
            Channel::Node(n) => vec![*n],
            Channel::Derived { sources, .. } => sources.clone(),
        }
    }
}

/// Computes mutation groups and derived slots for a shape-checked net.
pub fn build_groups(net: &NetworkDef, shapes: &ShapeMap) -> Result<Coupling, ShapeError> {
    let order = net.topo_order().map_err(|c| ShapeError::InvalidIr(format!("cycle through {}", c.join(" -> "))))?;
    for l in &net.layers {
        if !shapes.outputs.contains_key(&l.id) {
            return Err(ShapeError::InvalidIr(format!("no shape for `{}`", l.id)));
        }
    }
    let mut uf = UnionFind::new();
    let mut slot_node: BTreeMap<Slot, usize> = BTreeMap::new();
    let mut derived: Vec<DerivedSlot> = Vec::new();
    let input_node = uf.make();
    let mut fixed_nodes: Vec<(usize, FixedReason)> = vec![(input_node, FixedReason::Input)];
    let mut divisors: Vec<(usize, Divisor)> = Vec::new();
    let mut out_channel: BTreeMap<&str, Channel> = BTreeMap::new();
    let topo_pos: BTreeMap<&str, usize> =
        order.iter().enumerate().map(|(pos, &i)| (net.layers[i].id.as_str(), pos)).collect();

    let mut node_for = |uf: &mut UnionFind, slot: Slot| -> usize {
        *slot_node.entry(slot).or_insert_with(|| uf.make())
    };

    for &idx in &order {
        let l = &net.layers[idx];
        let id = l.id.as_str();
        let ins: Vec<Channel> = net
            .inputs_of(id)
            .iter()
            .map(|p| if *p == INPUT { Channel::Node(input_node) } else { out_channel[p].clone() })
            .collect();

        // Attach a consuming slot to the incoming channel, or mark it derived.
        let mut consume = |uf: &mut UnionFind, attr: Attr, incoming: &Channel| -> Option<usize> {
            match incoming {
                Channel::Node(n) => {
                    let node = node_for(uf, Slot::new(id, attr));
                    uf.union(node, *n);
                    Some(node)
                }
                Channel::Derived { rule, .. } => {
                    derived.push(DerivedSlot { slot: Slot::new(id, attr), rule: rule.clone() });
                    None
                }
            }
        };

        let out = match l.kind {
            LayerKind::Conv2d => {
                let in_node = consume(&mut uf, Attr::InChannels, &ins[0]);
                let out_node = node_for(&mut uf, Slot::new(id, Attr::OutChannels));
                let g = l.get(Attr::Groups);
                if l.is_depthwise() {
                    if let Some(n) = in_node {
                        uf.union(n, out_node);
                    }
                    divisors.push((out_node, Divisor { layer: id.to_string(), value: g, resettable: true }));
                } else if g > 1 {
                    divisors.push((out_node, Divisor { layer: id.to_string(), value: g, resettable: false }));
                    match in_node {
                        Some(n) => divisors.push((n, Divisor { layer: id.to_string(), value: g, resettable: false })),
                        // A grouped conv behind a concat cannot follow width changes.
                        None => ins[0].sources().into_iter().for_each(|s| fixed_nodes.push((s, FixedReason::ConcatSum))),
                    }
                }
                Channel::Node(out_node)
            }
            LayerKind::BatchNorm2d => {
                consume(&mut uf, Attr::NumFeatures, &ins[0]);
                ins[0].clone()
            }
            LayerKind::Linear => {
                consume(&mut uf, Attr::InFeatures, &ins[0]);
                let out_node = node_for(&mut uf, Slot::new(id, Attr::OutFeatures));
                Channel::Node(out_node)
            }
            LayerKind::ReLU | LayerKind::Dropout | LayerKind::MaxPool2d | LayerKind::AdaptiveAvgPool2d => ins[0].clone(),
            LayerKind::Flatten => match (&ins[0], shapes.get(net.inputs_of(id)[0])) {
                (_, Some(Shape::Flat(_))) => ins[0].clone(),
                (incoming, _) => Channel::Derived { rule: DerivedRule::Flatten, sources: incoming.sources() },
            },
            LayerKind::Add => {
                if ins.iter().all(|c| matches!(c, Channel::Node(_))) {
                    let nodes: Vec<usize> = ins.iter().flat_map(Channel::sources).collect();
                    for n in &nodes[1..] {
                        uf.union(nodes[0], *n);
                    }
                    Channel::Node(nodes[0])
                } else {
                    let all: Vec<usize> = ins.iter().flat_map(Channel::sources).collect();
                    for &n in &all {
                        fixed_nodes.push((n, FixedReason::ConcatSum));
                    }
                    ins.iter().find(|c| matches!(c, Channel::Derived { .. })).cloned().expect("derived operand")
                }
            }
            LayerKind::Concat => {
                Channel::Derived { rule: DerivedRule::ConcatSum, sources: ins.iter().flat_map(Channel::sources).collect() }
            }
        };
        out_channel.insert(id, out);
    }

    if let Some(sink) = net.sink() {
        let node = slot_node[&Slot::new(&sink.id, Attr::OutFeatures)];
        fixed_nodes.push((node, FixedReason::ClassCount));
    }

    let mut by_root: BTreeMap<usize, BTreeSet<Slot>> = BTreeMap::new();
    for (slot, &node) in &slot_node {
        by_root.entry(uf.find(node)).or_default().insert(slot.clone());
    }
    let mut fixed: BTreeMap<usize, FixedReason> = BTreeMap::new();
    for (node, reason) in fixed_nodes {
        let root = uf.find(node);
        // First recorded reason is the one reported.
        fixed.entry(root).or_insert(reason);
    }
    let mut group_divs: BTreeMap<usize, Vec<Divisor>> = BTreeMap::new();
    for (node, d) in divisors {
        group_divs.entry(uf.find(node)).or_default().push(d);
    }

    let mut groups: Vec<MutationGroup> = by_root
        .into_iter()
        .map(|(root, slots)| {
            let driver = pick_driver(&slots, &topo_pos);
            let mut divs = group_divs.remove(&root).unwrap_or_default();
            divs.sort_by(|a, b| a.layer.cmp(&b.layer));
            MutationGroup { slots, driver, divisors: divs, fixed: fixed.get(&root).cloned() }
        })
        .collect();
    groups.sort_by_key(|g| (topo_pos[g.driver.layer.as_str()], g.driver.attr));
    derived.sort_by_key(|d| (topo_pos[d.slot.layer.as_str()], d.slot.attr));
    Ok(Coupling { groups, derived })
}

fn pick_driver(slots: &BTreeSet<Slot>, topo_pos: &BTreeMap<&str, usize>) -> Slot {
    let producer = |s: &&Slot| matches!(s.attr, Attr::OutChannels | Attr::OutFeatures);
    let key = |s: &&Slot| (topo_pos[s.layer.as_str()], s.attr);
    slots
        .iter()
        .filter(producer)
        .min_by_key(key)
        .or_else(|| slots.iter().min_by_key(key))
        .cloned()
        .expect("non-empty group")
}

/// Rewrites every derived slot from the actual incoming shape, walking the
/// net in topological order. Returns the slots whose value changed as
/// `(slot, old, new)`.
pub fn recompute_derived(net: &mut NetworkDef, derived: &[DerivedSlot]) -> Vec<(Slot, u64, u64)> {
    let order = match net.topo_order() {
        Ok(o) => o,
        Err(_) => return Vec::new(),
    };
    let wanted: BTreeSet<&Slot> = derived.iter().map(|d| &d.slot).collect();
    let i = net.input_shape;
    let mut map = ShapeMap { input: Shape::Map { c: i.channels, h: i.height, w: i.width }, outputs: BTreeMap::new() };
    let mut changes = Vec::new();
    for idx in order {
        let id = net.layers[idx].id.clone();
        let producers: Vec<String> = net.inputs_of(&id).into_iter().map(str::to_string).collect();
        let ins: Vec<Shape> = producers.iter().filter_map(|p| map.get(p)).collect();
        if ins.len() != producers.len() {
            return changes;
        }
        for attr in [Attr::InChannels, Attr::NumFeatures, Attr::InFeatures] {
            let slot = Slot::new(&id, attr);
            if wanted.contains(&slot) {
                let new = if attr == Attr::InFeatures { ins[0].numel() } else { ins[0].channels() };
                let layer = &mut net.layers[idx];
                let old = layer.get(attr);
                if old != new {
                    layer.set(attr, new);
                    changes.push((slot, old, new));
                }
            }
        }
        match layer_output(net, idx, &ins) {
            Ok(s) => {
                map.outputs.insert(id, s);
            }
            Err(_) => return changes,
        }
    }
    changes
}

/// Deterministic text report of shapes and groups.
pub fn report(net: &NetworkDef, shapes: &ShapeMap, coupling: &Coupling) -> String {
    let mut s = String::new();
    s.push_str(&format!("network {}\n", net.name));
    s.push_str(&format!("params {}\n", net.count_params()));
    s.push_str("shapes\n");
    s.push_str(&format!("  input {}\n", shapes.input));
    let order = net.topo_order().unwrap_or_default();
    for idx in order {
        let l = &net.layers[idx];
        s.push_str(&format!("  {} {} {}\n", l.id, l.kind, shapes.outputs[&l.id]));
    }
    s.push_str("groups\n");
    for (n, g) in coupling.groups.iter().enumerate() {
        let slots: Vec<String> = g.slots.iter().map(Slot::to_string).collect();
        let value = net.layer(&g.driver.layer).map(|l| l.get(g.driver.attr)).unwrap_or(0);
        let mut line = format!("  g{n} width={value} driver={} slots=[{}]", g.driver, slots.join(", "));
        if !g.divisors.is_empty() {
            let divs: Vec<String> = g
                .divisors
                .iter()
                .map(|d| format!("{}:{}{}", d.layer, d.value, if d.resettable { "*" } else { "" }))
                .collect();
            line.push_str(&format!(" divisors=[{}]", divs.join(", ")));
        }
        match &g.fixed {
            Some(reason) => line.push_str(&format!(" fixed={reason:?}")),
            None => line.push_str(" mutable"),
        }
        s.push_str(&line);
        s.push('\n');
    }
    s.push_str("derived\n");
    for d in &coupling.derived {
        s.push_str(&format!("  {} {:?}\n", d.slot, d.rule));
    }
    s
}
