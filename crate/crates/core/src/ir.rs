//! Architecture intermediate representation.
//!
//! A [`NetworkDef`] is an ordered list of [`LayerSpec`]s plus explicit
//! dataflow edges. The pseudo-layer [`INPUT`] is the single source of every
//! network; the single sink must be a `Linear` layer producing the class
//! logits.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;

use serde::{Deserialize, Serialize};

/// Reserved producer id for the network input tensor.
pub const INPUT: &str = "input";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum LayerKind {
    Conv2d,
    Linear,
    BatchNorm2d,
    ReLU,
    MaxPool2d,
    AdaptiveAvgPool2d,
    Flatten,
    Add,
    Concat,
    Dropout,
}

impl LayerKind {
    pub const ALL: [LayerKind; 10] = [
        LayerKind::Conv2d,
        LayerKind::Linear,
        LayerKind::BatchNorm2d,
        LayerKind::ReLU,
        LayerKind::MaxPool2d,
        LayerKind::AdaptiveAvgPool2d,
        LayerKind::Flatten,
        LayerKind::Add,
        LayerKind::Concat,
        LayerKind::Dropout,
    ];

    /// Keyword used for this kind in `.netdsl` text.
    pub fn keyword(self) -> &'static str {
        match self {
            LayerKind::Conv2d => "conv",
            LayerKind::Linear => "linear",
            LayerKind::BatchNorm2d => "batchnorm",
            LayerKind::ReLU => "relu",
            LayerKind::MaxPool2d => "maxpool",
            LayerKind::AdaptiveAvgPool2d => "avgpool",
            LayerKind::Flatten => "flatten",
            LayerKind::Add => "add",
            LayerKind::Concat => "concat",
            LayerKind::Dropout => "dropout",
        }
    }

    pub fn from_keyword(word: &str) -> Option<LayerKind> {
        LayerKind::ALL.into_iter().find(|k| k.keyword() == word)
    }

    /// Integer attributes of this kind, in canonical order, with their DSL keys.
    pub fn schema(self) -> &'static [(&'static str, Attr)] {
        match self {
            LayerKind::Conv2d => &[
                ("in", Attr::InChannels),
                ("out", Attr::OutChannels),
                ("k", Attr::Kernel),
                ("s", Attr::Stride),
                ("p", Attr::Padding),
                ("groups", Attr::Groups),
            ],
            LayerKind::Linear => &[("in", Attr::InFeatures), ("out", Attr::OutFeatures)],
            LayerKind::BatchNorm2d => &[("features", Attr::NumFeatures)],
            LayerKind::MaxPool2d => &[("k", Attr::Kernel), ("s", Attr::Stride)],
            LayerKind::AdaptiveAvgPool2d => &[("h", Attr::Height), ("w", Attr::Width)],
            LayerKind::Concat => &[("axis", Attr::Axis)],
            LayerKind::ReLU | LayerKind::Flatten | LayerKind::Add | LayerKind::Dropout => &[],
        }
    }

    /// Attributes that may be omitted in source, with their defaults.
    pub fn default_for(self, attr: Attr) -> Option<u64> {
        match (self, attr) {
            (LayerKind::Conv2d, Attr::Stride) => Some(1),
            (LayerKind::Conv2d, Attr::Padding) => Some(0),
            (LayerKind::Conv2d, Attr::Groups) => Some(1),
            (LayerKind::Concat, Attr::Axis) => Some(1),
            _ => None,
        }
    }

    /// Number of input slots, `None` for variadic (`add`, `concat`, at least two).
    pub fn arity(self) -> Option<usize> {
        match self {
            LayerKind::Add | LayerKind::Concat => None,
            _ => Some(1),
        }
    }

    pub fn has_params(self) -> bool {
        matches!(self, LayerKind::Conv2d | LayerKind::Linear | LayerKind::BatchNorm2d)
    }
}

impl fmt::Display for LayerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            LayerKind::Conv2d => "Conv2d",
            LayerKind::Linear => "Linear",
            LayerKind::BatchNorm2d => "BatchNorm2d",
            LayerKind::ReLU => "ReLU",
            LayerKind::MaxPool2d => "MaxPool2d",
            LayerKind::AdaptiveAvgPool2d => "AdaptiveAvgPool2d",
            LayerKind::Flatten => "Flatten",
            LayerKind::Add => "Add",
            LayerKind::Concat => "Concat",
            LayerKind::Dropout => "Dropout",
        };
        f.write_str(name)
    }
}

/// Integer attribute names.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Attr {
    InChannels,
    OutChannels,
    Kernel,
    Stride,
    Padding,
    Groups,
    InFeatures,
    OutFeatures,
    NumFeatures,
    Height,
    Width,
    Axis,
}

impl Attr {
    /// Channel-bearing attributes are the only ones the search mutates.
    pub fn is_channel(self) -> bool {
        matches!(
            self,
            Attr::InChannels | Attr::OutChannels | Attr::InFeatures | Attr::OutFeatures | Attr::NumFeatures
        )
    }

    pub fn name(self) -> &'static str {
        match self {
            Attr::InChannels => "in_channels",
            Attr::OutChannels => "out_channels",
            Attr::Kernel => "kernel",
            Attr::Stride => "stride",
            Attr::Padding => "padding",
            Attr::Groups => "groups",
            Attr::InFeatures => "in_features",
            Attr::OutFeatures => "out_features",
            Attr::NumFeatures => "num_features",
            Attr::Height => "height",
            Attr::Width => "width",
            Attr::Axis => "axis",
        }
    }
}

impl fmt::Display for Attr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Half-open byte range into source text.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Span {
    pub start: usize,
    pub end: usize,
}

impl Span {
    pub fn new(start: usize, end: usize) -> Self {
        Span { start, end }
    }

    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.start == self.end
    }

    pub fn overlaps(&self, other: &Span) -> bool {
        self.start < other.end && other.start < self.end
    }
}

/// One layer. Spans are provenance only and do not take part in equality.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LayerSpec {
    pub id: String,
    pub kind: LayerKind,
    pub attrs: BTreeMap<Attr, u64>,
    /// Dropout probability; zero for every other kind.
    #[serde(default)]
    pub rate: f64,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub spans: BTreeMap<Attr, Span>,
    /// Span of the layer id in its source text.
    #[serde(skip)]
    pub origin: Option<Span>,
}

impl PartialEq for LayerSpec {
    fn eq(&self, other: &Self) -> bool {
        self.id == other.id && self.kind == other.kind && self.attrs == other.attrs && self.rate == other.rate
    }
}

impl LayerSpec {
    pub fn new(id: impl Into<String>, kind: LayerKind) -> Self {
        LayerSpec { id: id.into(), kind, attrs: BTreeMap::new(), rate: 0.0, spans: BTreeMap::new(), origin: None }
    }

    pub fn with(mut self, attr: Attr, value: u64) -> Self {
        self.attrs.insert(attr, value);
        self
    }

    pub fn conv(id: &str, cin: u64, cout: u64, k: u64, s: u64, p: u64, groups: u64) -> Self {
        LayerSpec::new(id, LayerKind::Conv2d)
            .with(Attr::InChannels, cin)
            .with(Attr::OutChannels, cout)
            .with(Attr::Kernel, k)
            .with(Attr::Stride, s)
            .with(Attr::Padding, p)
            .with(Attr::Groups, groups)
    }

    pub fn linear(id: &str, fin: u64, fout: u64) -> Self {
        LayerSpec::new(id, LayerKind::Linear).with(Attr::InFeatures, fin).with(Attr::OutFeatures, fout)
    }

    pub fn batchnorm(id: &str, features: u64) -> Self {
        LayerSpec::new(id, LayerKind::BatchNorm2d).with(Attr::NumFeatures, features)
    }

    pub fn maxpool(id: &str, k: u64, s: u64) -> Self {
        LayerSpec::new(id, LayerKind::MaxPool2d).with(Attr::Kernel, k).with(Attr::Stride, s)
    }

    pub fn avgpool(id: &str, h: u64, w: u64) -> Self {
        LayerSpec::new(id, LayerKind::AdaptiveAvgPool2d).with(Attr::Height, h).with(Attr::Width, w)
    }

    pub fn dropout(id: &str, rate: f64) -> Self {
        let mut l = LayerSpec::new(id, LayerKind::Dropout);
        l.rate = rate;
        l
    }

    /// Attribute value; panics if the kind lacks `attr`. Use [`LayerSpec::try_get`] otherwise.
    pub fn get(&self, attr: Attr) -> u64 {
        match self.attrs.get(&attr) {
            Some(v) => *v,
            None => panic!("layer `{}` ({}) has no attribute {}", self.id, self.kind, attr),
        }
    }

    pub fn try_get(&self, attr: Attr) -> Option<u64> {
        self.attrs.get(&attr).copied()
    }

    pub fn set(&mut self, attr: Attr, value: u64) {
        self.attrs.insert(attr, value);
    }

    /// True for a grouped conv whose groups equal its in and out channels.
    pub fn is_depthwise(&self) -> bool {
        self.kind == LayerKind::Conv2d && {
            let g = self.get(Attr::Groups);
            g > 1 && g == self.get(Attr::InChannels) && g == self.get(Attr::OutChannels)
        }
    }

    pub fn param_count(&self) -> u64 {
        match self.kind {
            LayerKind::Conv2d => {
                let (cin, cout, k, g) = (
                    self.get(Attr::InChannels),
                    self.get(Attr::OutChannels),
                    self.get(Attr::Kernel),
                    self.get(Attr::Groups),
                );
                cout * (cin / g) * k * k + cout
            }
            LayerKind::Linear => {
                let (fin, fout) = (self.get(Attr::InFeatures), self.get(Attr::OutFeatures));
                fout * fin + fout
            }
            LayerKind::BatchNorm2d => 2 * self.get(Attr::NumFeatures),
            _ => 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Edge {
    pub producer: String,
    pub consumer: String,
    pub slot: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct InputShape {
    pub channels: u64,
    pub height: u64,
    pub width: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NetworkDef {
    pub name: String,
    pub input_shape: InputShape,
    pub num_classes: u64,
    pub layers: Vec<LayerSpec>,
    pub edges: Vec<Edge>,
}

/// Structural equality: same layers (by id) and the same edge set.
impl PartialEq for NetworkDef {
    fn eq(&self, other: &Self) -> bool {
        if self.name != other.name
            || self.input_shape != other.input_shape
            || self.num_classes != other.num_classes
            || self.layers.len() != other.layers.len()
        {
            return false;
        }
        let mine: BTreeMap<&str, &LayerSpec> = self.layers.iter().map(|l| (l.id.as_str(), l)).collect();
        let theirs: BTreeMap<&str, &LayerSpec> = other.layers.iter().map(|l| (l.id.as_str(), l)).collect();
        let e1: BTreeSet<&Edge> = self.edges.iter().collect();
        let e2: BTreeSet<&Edge> = other.edges.iter().collect();
        mine == theirs && e1 == e2
    }
}

/// A single IR invariant violation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Violation {
    DuplicateLayer(String),
    ReservedId(String),
    UnknownProducer { consumer: String, producer: String },
    UnknownConsumer(String),
    MissingAttr { layer: String, attr: Attr },
    NonPositive { layer: String, attr: Attr },
    GroupsDivisibility { layer: String, in_channels: u64, out_channels: u64, groups: u64 },
    SlotConflict { layer: String, slot: usize },
    SlotMissing { layer: String, slot: usize },
    Arity { layer: String, expected: String, got: usize },
    Cycle(Vec<String>),
    InputUnused,
    Sinks(Vec<String>),
    SinkNotLinear(String),
    SinkClassCount { layer: String, expected: u64, got: u64 },
    ConcatAxis { layer: String, axis: u64 },
    DropoutRate { layer: String },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::DuplicateLayer(id) => write!(f, "duplicate layer id `{id}`"),
            Violation::ReservedId(id) => write!(f, "layer id `{id}` is reserved"),
            Violation::UnknownProducer { consumer, producer } => {
                write!(f, "undefined layer reference `{producer}` in `{consumer}`")
            }
            Violation::UnknownConsumer(id) => write!(f, "edge into undefined layer `{id}`"),
            Violation::MissingAttr { layer, attr } => write!(f, "layer `{layer}` is missing {attr}"),
            Violation::NonPositive { layer, attr } => write!(f, "layer `{layer}`: {attr} must be >= 1"),
            Violation::GroupsDivisibility { layer, in_channels, out_channels, groups } => write!(
                f,
                "groups divisibility: layer `{layer}` has in={in_channels} out={out_channels} groups={groups}"
            ),
            Violation::SlotConflict { layer, slot } => write!(f, "slot conflict: `{layer}` slot {slot} fed twice"),
            Violation::SlotMissing { layer, slot } => write!(f, "slot coverage: `{layer}` slot {slot} unfed"),
            Violation::Arity { layer, expected, got } => {
                write!(f, "layer `{layer}` takes {expected} input(s), got {got}")
            }
            Violation::Cycle(ids) => write!(f, "cycle through {}", ids.join(" -> ")),
            Violation::InputUnused => write!(f, "network input is never consumed"),
            Violation::Sinks(ids) => write!(f, "expected exactly one sink layer, found [{}]", ids.join(", ")),
            Violation::SinkNotLinear(id) => write!(f, "sink layer `{id}` is not linear"),
            Violation::SinkClassCount { layer, expected, got } => {
                write!(f, "sink class count: `{layer}` has out={got}, network declares {expected} classes")
            }
            Violation::ConcatAxis { layer, axis } => {
                write!(f, "layer `{layer}`: concat only supports axis 1, got {axis}")
            }
            Violation::DropoutRate { layer } => write!(f, "layer `{layer}`: dropout rate must lie in [0, 1)"),
        }
    }
}

impl Violation {
    /// The layer a violation is anchored at, if any.
    pub fn layer(&self) -> Option<&str> {
        match self {
            Violation::DuplicateLayer(l)
            | Violation::ReservedId(l)
            | Violation::UnknownConsumer(l)
            | Violation::SinkNotLinear(l) => Some(l),
            Violation::UnknownProducer { consumer, .. } => Some(consumer),
            Violation::MissingAttr { layer, .. }
            | Violation::NonPositive { layer, .. }
            | Violation::GroupsDivisibility { layer, .. }
            | Violation::SlotConflict { layer, .. }
            | Violation::SlotMissing { layer, .. }
            | Violation::Arity { layer, .. }
            | Violation::SinkClassCount { layer, .. }
            | Violation::ConcatAxis { layer, .. }
            | Violation::DropoutRate { layer } => Some(layer),
            Violation::Cycle(ids) => ids.first().map(String::as_str),
            Violation::Sinks(_) | Violation::InputUnused => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ValidationResult {
    pub violations: Vec<Violation>,
}

impl ValidationResult {
    pub fn is_ok(&self) -> bool {
        self.violations.is_empty()
    }
}

impl NetworkDef {
    pub fn layer(&self, id: &str) -> Option<&LayerSpec> {
        self.layers.iter().find(|l| l.id == id)
    }

    pub fn layer_mut(&mut self, id: &str) -> Option<&mut LayerSpec> {
        self.layers.iter_mut().find(|l| l.id == id)
    }

    /// Producers of `id`, ordered by input slot.
    pub fn inputs_of(&self, id: &str) -> Vec<&str> {
        let mut fed: Vec<&Edge> = self.edges.iter().filter(|e| e.consumer == id).collect();
        fed.sort_by_key(|e| e.slot);
        fed.into_iter().map(|e| e.producer.as_str()).collect()
    }

    pub fn consumers_of(&self, id: &str) -> Vec<&str> {
        self.edges.iter().filter(|e| e.producer == id).map(|e| e.consumer.as_str()).collect()
    }

    /// Layers with no consumers.
    pub fn sinks(&self) -> Vec<&str> {
        let produced: BTreeSet<&str> = self.edges.iter().map(|e| e.producer.as_str()).collect();
        self.layers.iter().map(|l| l.id.as_str()).filter(|id| !produced.contains(id)).collect()
    }

    pub fn sink(&self) -> Option<&LayerSpec> {
        match self.sinks().as_slice() {
            [one] => self.layer(one),
            _ => None,
        }
    }

    /// Layer indices in a topological order that keeps declaration order
    /// among independent layers. `Err` carries the layers left on a cycle.
    pub fn topo_order(&self) -> Result<Vec<usize>, Vec<String>> {
        let index: HashMap<&str, usize> = self.layers.iter().enumerate().map(|(i, l)| (l.id.as_str(), i)).collect();
        let mut indegree = vec![0usize; self.layers.len()];
        let mut succ: Vec<Vec<usize>> = vec![Vec::new(); self.layers.len()];
        for e in &self.edges {
            let Some(&c) = index.get(e.consumer.as_str()) else { continue };
            if e.producer == INPUT {
                continue;
            }
            let Some(&p) = index.get(e.producer.as_str()) else { continue };
            indegree[c] += 1;
            succ[p].push(c);
        }
        let mut ready: BTreeSet<usize> = (0..self.layers.len()).filter(|&i| indegree[i] == 0).collect();
        let mut order = Vec::with_capacity(self.layers.len());
        while let Some(i) = ready.pop_first() {
            order.push(i);
            for &c in &succ[i] {
                indegree[c] -= 1;
                if indegree[c] == 0 {
                    ready.insert(c);
                }
            }
        }
        if order.len() == self.layers.len() {
            Ok(order)
        } else {
            let placed: BTreeSet<usize> = order.into_iter().collect();
            Err((0..self.layers.len()).filter(|i| !placed.contains(i)).map(|i| self.layers[i].id.clone()).collect())
        }
    }

    /// Checks every IR invariant and returns all violations found.
    pub fn validate(&self) -> ValidationResult {
        let mut v = Vec::new();
        let mut seen = BTreeSet::new();
        for l in &self.layers {
            if l.id == INPUT {
                v.push(Violation::ReservedId(l.id.clone()));
            }
            if !seen.insert(l.id.as_str()) {
                v.push(Violation::DuplicateLayer(l.id.clone()));
            }
            check_attrs(l, &mut v);
        }

        for e in &self.edges {
            if e.producer != INPUT && !seen.contains(e.producer.as_str()) {
                v.push(Violation::UnknownProducer { consumer: e.consumer.clone(), producer: e.producer.clone() });
            }
            if !seen.contains(e.consumer.as_str()) {
                v.push(Violation::UnknownConsumer(e.consumer.clone()));
            }
        }

        for l in &self.layers {
            let mut slots: BTreeMap<usize, usize> = BTreeMap::new();
            for e in self.edges.iter().filter(|e| e.consumer == l.id) {
                *slots.entry(e.slot).or_default() += 1;
            }
            for (&slot, &n) in &slots {
                if n > 1 {
                    v.push(Violation::SlotConflict { layer: l.id.clone(), slot });
                }
            }
            let count = slots.keys().next_back().map_or(0, |m| m + 1);
            for slot in 0..count {
                if !slots.contains_key(&slot) {
                    v.push(Violation::SlotMissing { layer: l.id.clone(), slot });
                }
            }
            match l.kind.arity() {
                Some(n) if count != n => {
                    v.push(Violation::Arity { layer: l.id.clone(), expected: n.to_string(), got: count })
                }
                None if count < 2 => {
                    v.push(Violation::Arity { layer: l.id.clone(), expected: "2 or more".into(), got: count })
                }
                _ => {}
            }
        }

        if let Err(cycle) = self.topo_order() {
            v.push(Violation::Cycle(cycle));
        }
        if !self.layers.is_empty() && !self.edges.iter().any(|e| e.producer == INPUT) {
            v.push(Violation::InputUnused);
        }

        let sinks = self.sinks();
        if sinks.len() != 1 {
            v.push(Violation::Sinks(sinks.iter().map(|s| s.to_string()).collect()));
        } else if let Some(sink) = self.layer(sinks[0]) {
            if sink.kind != LayerKind::Linear {
                v.push(Violation::SinkNotLinear(sink.id.clone()));
            } else if let Some(out) = sink.try_get(Attr::OutFeatures) {
                if out != self.num_classes {
                    v.push(Violation::SinkClassCount { layer: sink.id.clone(), expected: self.num_classes, got: out });
                }
            }
        }
        ValidationResult { violations: v }
    }

    pub fn count_params(&self) -> u64 {
        self.layers.iter().map(LayerSpec::param_count).sum()
    }

    /// Layer-position widths: every conv's out_channels and every hidden
    /// linear's out_features, in topological order.
    pub fn width_vector(&self) -> Vec<(String, u64)> {
        let sink = self.sink().map(|s| s.id.clone());
        let order = self.topo_order().unwrap_or_else(|_| (0..self.layers.len()).collect());
        order
            .into_iter()
            .map(|i| &self.layers[i])
            .filter_map(|l| match l.kind {
                LayerKind::Conv2d => Some((l.id.clone(), l.get(Attr::OutChannels))),
                LayerKind::Linear if Some(&l.id) != sink.as_ref() => Some((l.id.clone(), l.get(Attr::OutFeatures))),
                _ => None,
            })
            .collect()
    }
}

fn check_attrs(l: &LayerSpec, v: &mut Vec<Violation>) {
    let mut complete = true;
    for &(_, attr) in l.kind.schema() {
        match l.try_get(attr) {
            None => {
                complete = false;
                v.push(Violation::MissingAttr { layer: l.id.clone(), attr });
            }
            Some(0) if attr != Attr::Padding => {
                complete = false;
                v.push(Violation::NonPositive { layer: l.id.clone(), attr });
            }
            _ => {}
        }
    }
    if !complete {
        return;
    }
    match l.kind {
        LayerKind::Conv2d => {
            let (cin, cout, g) = (l.get(Attr::InChannels), l.get(Attr::OutChannels), l.get(Attr::Groups));
            if cin % g != 0 || cout % g != 0 {
                v.push(Violation::GroupsDivisibility {
                    layer: l.id.clone(),
                    in_channels: cin,
                    out_channels: cout,
                    groups: g,
                });
            }
        }
        LayerKind::Concat if l.get(Attr::Axis) != 1 => {
            v.push(Violation::ConcatAxis { layer: l.id.clone(), axis: l.get(Attr::Axis) });
        }
        LayerKind::Dropout if !(0.0..1.0).contains(&l.rate) => {
            v.push(Violation::DropoutRate { layer: l.id.clone() });
        }
        _ => {}
    }
}

/// Optimizers the proxy trainer supports.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Optimizer {
    #[serde(rename = "SGD")]
    Sgd,
    AdamW,
}

impl fmt::Display for Optimizer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Optimizer::Sgd => "SGD",
            Optimizer::AdamW => "AdamW",
        })
    }
}

impl std::str::FromStr for Optimizer {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "sgd" => Ok(Optimizer::Sgd),
            "adamw" => Ok(Optimizer::AdamW),
            other => Err(format!("unknown optimizer `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hyperparams {
    pub batch_size: u64,
    pub optimizer: Optimizer,
    pub learning_rate: f64,
    pub epochs: u64,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Hyperparams { batch_size: 64, optimizer: Optimizer::AdamW, learning_rate: 1e-3, epochs: 1 }
    }
}

impl Hyperparams {
    pub fn is_valid(&self) -> bool {
        self.batch_size >= 1 && self.epochs >= 1 && self.learning_rate > 0.0 && self.learning_rate.is_finite()
    }

    /// `key=value` lines as carried in `<hp>` blocks.
    pub fn to_kv(&self) -> String {
        format!(
            "batch_size={}\noptimizer={}\nlearning_rate={}\nepochs={}",
            self.batch_size, self.optimizer, self.learning_rate, self.epochs
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn edge(p: &str, c: &str, slot: usize) -> Edge {
        Edge { producer: p.into(), consumer: c.into(), slot }
    }

    fn mlp(out: u64) -> NetworkDef {
        NetworkDef {
            name: "m".into(),
            input_shape: InputShape { channels: 1, height: 2, width: 2 },
            num_classes: 5,
            layers: vec![LayerSpec::new("f", LayerKind::Flatten), LayerSpec::linear("out", 4, out)],
            edges: vec![edge(INPUT, "f", 0), edge("f", "out", 0)],
        }
    }

    #[test]
    fn sink_class_count_violation() {
        assert!(mlp(5).validate().is_ok());
        let v = mlp(6).validate();
        assert_eq!(v.violations.len(), 1);
        assert!(v.violations[0].to_string().contains("sink class count"));
    }

    #[test]
    fn groups_divisibility_violation() {
        let mut net = mlp(5);
        net.layers.insert(0, LayerSpec::conv("c", 10, 8, 3, 1, 1, 4));
        let v = net.validate();
        assert!(v.violations.iter().any(|x| matches!(x, Violation::GroupsDivisibility { .. })));
        assert!(v.violations.iter().any(|x| x.to_string().contains("groups divisibility")));
    }

    #[test]
    fn slot_and_cycle_violations() {
        let mut net = mlp(5);
        net.edges.push(edge(INPUT, "f", 0));
        assert!(net.validate().violations.contains(&Violation::SlotConflict { layer: "f".into(), slot: 0 }));

        let mut net = mlp(5);
        net.layers.push(LayerSpec::new("r", LayerKind::ReLU));
        net.edges = vec![edge("r", "f", 0), edge("f", "r", 0), edge("f", "out", 0), edge(INPUT, "out", 1)];
        let v = net.validate();
        assert!(v.violations.iter().any(|x| matches!(x, Violation::Cycle(_))));
    }

    #[test]
    fn param_counts() {
        assert_eq!(LayerSpec::linear("l", 10, 5).param_count(), 55);
        assert_eq!(LayerSpec::conv("c", 3, 4, 3, 1, 1, 1).param_count(), 112);
        assert_eq!(LayerSpec::conv("d", 8, 8, 3, 1, 1, 8).param_count(), 80);
        assert_eq!(LayerSpec::batchnorm("b", 16).param_count(), 32);
    }

    #[test]
    fn validate_is_pure() {
        let net = mlp(7);
        assert_eq!(net.validate(), net.validate());
    }

    #[test]
    fn equality_ignores_layer_and_edge_order() {
        let a = mlp(5);
        let mut b = a.clone();
        b.edges.reverse();
        b.layers.reverse();
        b.layers[0].spans.insert(Attr::InFeatures, Span::new(1, 2));
        assert_eq!(a, b);
        assert_eq!(a.count_params(), b.count_params());
    }
}
