//! JSON interchange graphs with ONNX operator semantics, and their conversion
//! into packed models.
//!
//! A document looks like
//!
//! ```json
//! {
//!   "inputs": [{"name": "x", "dims": [1, 64, 8, 8]}],
//!   "initializers": [{"name": "w", "dims": [64, 64, 3, 3], "values": [1.0, -1.0, ...]}],
//!   "nodes": [
//!     {"op_type": "Sign", "inputs": ["x"], "outputs": ["s"]},
//!     {"name": "conv", "op_type": "Conv", "inputs": ["s", "w"], "outputs": ["y"],
//!      "attributes": {"kernel_shape": [3, 3], "pads": [1, 1, 1, 1]}}
//!   ],
//!   "output": "y"
//! }
//! ```
//!
//! Initializer values are row-major over `dims`; tensors of rank below 4 are
//! padded with trailing unit axes. Supported operators are `Sign`, `Conv`,
//! `BatchNormalization`, `Relu`, `MaxPool`, `AveragePool`,
//! `GlobalAveragePool`, `Add`, `Gemm` and `Flatten`.
//!
//! A `Conv` is binary when its data input is the output of a `Sign` node and
//! every weight is exactly `1.0` or `-1.0`. Binary convolutions pad with +1
//! (the packed form has no zero), so the converter warns whenever one has
//! nonzero padding.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::floatops::{self, fuse_bn_sign};
use crate::kernels::{ConvParams, Window};
use crate::layout::{Dims, FloatTensor, Layout, DEFAULT_GROUP_BITS};
use crate::runtime::{thresholds_to_tensor, Graph, Initializer, Node, Op, PackedFilters, PackedModel};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum AttrValue {
    Int(i64),
    Float(f64),
    Ints(Vec<i64>),
    Floats(Vec<f64>),
    Str(String),
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawDoc {
    inputs: Vec<RawValueInfo>,
    #[serde(default)]
    initializers: Vec<RawInitializer>,
    nodes: Vec<RawNode>,
    output: String,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawValueInfo {
    name: String,
    dims: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawInitializer {
    name: String,
    dims: Vec<usize>,
    values: Vec<f32>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawNode {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    name: Option<String>,
    op_type: String,
    inputs: Vec<String>,
    outputs: Vec<String>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    attributes: BTreeMap<String, AttrValue>,
}

/// Spatial window attributes as written in the document.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WindowAttrs {
    pub kernel: [usize; 2],
    pub strides: [usize; 2],
    /// `[top, left, bottom, right]`.
    pub pads: [usize; 4],
    pub dilations: [usize; 2],
}

impl WindowAttrs {
    fn from_window(w: &Window) -> Self {
        Self {
            kernel: [w.kh, w.kw],
            strides: [w.sh, w.sw],
            pads: [w.ph, w.pw, w.ph, w.pw],
            dilations: [1, 1],
        }
    }

    /// The runtime window; fails on dilation or asymmetric padding.
    pub fn window(&self) -> Result<Window> {
        if self.dilations != [1, 1] {
            return Err(Error::Unsupported(format!("dilations {:?}", self.dilations)));
        }
        let [t, l, b, r] = self.pads;
        if t != b || l != r {
            return Err(Error::Unsupported(format!("asymmetric pads {:?}", self.pads)));
        }
        let w = Window::new(
            (self.kernel[0], self.kernel[1]),
            (self.strides[0], self.strides[1]),
            (t, l),
        );
        w.validate()?;
        Ok(w)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum InterchangeOp {
    Sign,
    Conv { window: WindowAttrs, group: usize },
    BatchNormalization { epsilon: f32 },
    Relu,
    MaxPool(WindowAttrs),
    AveragePool(WindowAttrs),
    GlobalAveragePool,
    Add,
    /// `Y = A · op(B) + C`; `trans_b` says `B` is stored `(out, in)`.
    Gemm { trans_b: bool },
    Flatten,
}

impl InterchangeOp {
    pub fn op_type(&self) -> &'static str {
        match self {
            InterchangeOp::Sign => "Sign",
            InterchangeOp::Conv { .. } => "Conv",
            InterchangeOp::BatchNormalization { .. } => "BatchNormalization",
            InterchangeOp::Relu => "Relu",
            InterchangeOp::MaxPool(_) => "MaxPool",
            InterchangeOp::AveragePool(_) => "AveragePool",
            InterchangeOp::GlobalAveragePool => "GlobalAveragePool",
            InterchangeOp::Add => "Add",
            InterchangeOp::Gemm { .. } => "Gemm",
            InterchangeOp::Flatten => "Flatten",
        }
    }

    /// Input positions that must be initializers.
    fn initializer_inputs(&self) -> std::ops::RangeFrom<usize> {
        match self {
            InterchangeOp::Conv { .. } | InterchangeOp::BatchNormalization { .. } | InterchangeOp::Gemm { .. } => 1..,
            _ => usize::MAX..,
        }
    }

    fn arity(&self) -> (usize, usize) {
        match self {
            InterchangeOp::Conv { .. } | InterchangeOp::Gemm { .. } => (2, 3),
            InterchangeOp::BatchNormalization { .. } => (5, 5),
            InterchangeOp::Add => (2, 2),
            _ => (1, 1),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InterchangeNode {
    pub name: String,
    pub op: InterchangeOp,
    pub inputs: Vec<String>,
    pub output: String,
}

/// A parsed and name-checked interchange document.
#[derive(Debug, Clone, PartialEq)]
pub struct InterchangeGraph {
    pub input: String,
    pub input_dims: Dims,
    /// Float tensors in NCHW order, keyed by name.
    pub initializers: BTreeMap<String, FloatTensor>,
    pub nodes: Vec<InterchangeNode>,
    pub output: String,
}

fn parse_err(path: impl Into<String>, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.into(),
        message: message.into(),
    }
}

fn dims_from(path: &str, dims: &[usize], exact_rank: Option<usize>) -> Result<Dims> {
    if dims.is_empty() || dims.len() > 4 || exact_rank.is_some_and(|r| r != dims.len()) {
        return Err(parse_err(path, format!("unsupported rank {}", dims.len())));
    }
    let mut d = [1usize; 4];
    d[..dims.len()].copy_from_slice(dims);
    Ok(Dims::from(d))
}

/// Attribute reader that records which keys were consumed.
struct Attrs<'a> {
    path: String,
    map: &'a BTreeMap<String, AttrValue>,
    used: HashSet<&'a str>,
}

impl<'a> Attrs<'a> {
    fn new(path: String, map: &'a BTreeMap<String, AttrValue>) -> Self {
        Self {
            path,
            map,
            used: HashSet::new(),
        }
    }

    fn take(&mut self, key: &str) -> Option<&'a AttrValue> {
        let (k, v) = self.map.get_key_value(key)?;
        self.used.insert(k.as_str());
        Some(v)
    }

    fn key_path(&self, key: &str) -> String {
        format!("{}.attributes.{key}", self.path)
    }

    fn int(&mut self, key: &str, default: i64) -> Result<i64> {
        match self.take(key) {
            None => Ok(default),
            Some(AttrValue::Int(v)) => Ok(*v),
            Some(other) => Err(parse_err(self.key_path(key), format!("expected an integer, got {other:?}"))),
        }
    }

    fn float(&mut self, key: &str, default: f32) -> Result<f32> {
        match self.take(key) {
            None => Ok(default),
            Some(AttrValue::Float(v)) => Ok(*v as f32),
            Some(AttrValue::Int(v)) => Ok(*v as f32),
            Some(other) => Err(parse_err(self.key_path(key), format!("expected a float, got {other:?}"))),
        }
    }

    fn usizes<const N: usize>(&mut self, key: &str, default: Option<[usize; N]>) -> Result<[usize; N]> {
        let path = self.key_path(key);
        match self.take(key) {
            None => default.ok_or_else(|| parse_err(path, "required attribute missing")),
            Some(AttrValue::Ints(v)) if v.len() == N => {
                let mut out = [0usize; N];
                for (o, &x) in out.iter_mut().zip(v) {
                    *o = usize::try_from(x).map_err(|_| parse_err(&path, format!("negative value {x}")))?;
                }
                Ok(out)
            }
            Some(other) => Err(parse_err(path, format!("expected {N} integers, got {other:?}"))),
        }
    }

    fn string(&mut self, key: &str, default: &str) -> Result<String> {
        match self.take(key) {
            None => Ok(default.to_string()),
            Some(AttrValue::Str(s)) => Ok(s.clone()),
            Some(other) => Err(parse_err(self.key_path(key), format!("expected a string, got {other:?}"))),
        }
    }

    fn require(&mut self, key: &str, expected: i64, default: i64) -> Result<()> {
        let v = self.int(key, default)?;
        if v != expected {
            return Err(Error::Unsupported(format!("{key} = {v} (only {expected} is supported)")));
        }
        Ok(())
    }

    fn window(&mut self, kernel_default: Option<[usize; 2]>) -> Result<WindowAttrs> {
        let auto_pad = self.string("auto_pad", "NOTSET")?;
        if auto_pad != "NOTSET" {
            return Err(Error::Unsupported(format!("auto_pad = {auto_pad}")));
        }
        Ok(WindowAttrs {
            kernel: self.usizes("kernel_shape", kernel_default)?,
            strides: self.usizes("strides", Some([1, 1]))?,
            pads: self.usizes("pads", Some([0; 4]))?,
            dilations: self.usizes("dilations", Some([1, 1]))?,
        })
    }

    fn finish(self) -> Result<()> {
        match self.map.keys().find(|k| !self.used.contains(k.as_str())) {
            Some(k) => Err(Error::Unsupported(format!("attribute '{k}'"))),
            None => Ok(()),
        }
    }
}

fn parse_op(node: &RawNode, path: &str, name: &str, initializers: &BTreeMap<String, FloatTensor>) -> Result<InterchangeOp> {
    let mut a = Attrs::new(path.to_string(), &node.attributes);
    let op = match node.op_type.as_str() {
        "Sign" => InterchangeOp::Sign,
        "Conv" => {
            let weight_kernel = node
                .inputs
                .get(1)
                .and_then(|w| initializers.get(w))
                .map(|w| [w.dims().h, w.dims().w]);
            let window = a.window(weight_kernel)?;
            let group = a.int("group", 1)?;
            InterchangeOp::Conv {
                window,
                group: usize::try_from(group).map_err(|_| parse_err(a.key_path("group"), "negative group"))?,
            }
        }
        "BatchNormalization" => {
            a.take("momentum");
            a.require("training_mode", 0, 0)?;
            InterchangeOp::BatchNormalization {
                epsilon: a.float("epsilon", 1e-5)?,
            }
        }
        "Relu" => InterchangeOp::Relu,
        "MaxPool" => {
            a.require("ceil_mode", 0, 0)?;
            a.require("storage_order", 0, 0)?;
            InterchangeOp::MaxPool(a.window(None)?)
        }
        "AveragePool" => {
            a.require("ceil_mode", 0, 0)?;
            a.require("count_include_pad", 0, 0)?;
            InterchangeOp::AveragePool(a.window(None)?)
        }
        "GlobalAveragePool" => InterchangeOp::GlobalAveragePool,
        "Add" => InterchangeOp::Add,
        "Gemm" => {
            if a.float("alpha", 1.0)? != 1.0 || a.float("beta", 1.0)? != 1.0 {
                return Err(Error::Unsupported("Gemm alpha/beta other than 1".into()).at_node(name));
            }
            a.require("transA", 0, 0)?;
            let trans_b = a.int("transB", 0)?;
            if !(0..=1).contains(&trans_b) {
                return Err(parse_err(a.key_path("transB"), "must be 0 or 1"));
            }
            InterchangeOp::Gemm { trans_b: trans_b == 1 }
        }
        "Flatten" => {
            a.require("axis", 1, 1)?;
            InterchangeOp::Flatten
        }
        other => {
            return Err(Error::UnknownOp {
                node: name.to_string(),
                op: other.to_string(),
            })
        }
    };
    a.finish()?;
    Ok(op)
}

/// Parse and validate an interchange document. Errors carry the JSON path
/// of the offending element and, for node problems, the node name.
pub fn parse_interchange(text: &str) -> Result<InterchangeGraph> {
    let de = &mut serde_json::Deserializer::from_str(text);
    let doc: RawDoc = serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        parse_err(if path == "." { "$".to_string() } else { path }, e.into_inner().to_string())
    })?;

    let [input] = doc.inputs.as_slice() else {
        return Err(parse_err("inputs", format!("exactly one graph input required, found {}", doc.inputs.len())));
    };
    let input_dims = dims_from("inputs[0].dims", &input.dims, Some(4))?;

    let mut initializers = BTreeMap::new();
    for (i, init) in doc.initializers.into_iter().enumerate() {
        let path = format!("initializers[{i}]");
        let dims = dims_from(&format!("{path}.dims"), &init.dims, None)?;
        if init.values.len() != dims.numel() {
            return Err(parse_err(
                format!("{path}.values"),
                format!("{} values for dims {:?}", init.values.len(), init.dims),
            ));
        }
        if init.name == input.name {
            return Err(parse_err(format!("{path}.name"), "shadows the graph input"));
        }
        let t = FloatTensor::new(dims, Layout::Nchw, init.values)?;
        if initializers.insert(init.name.clone(), t).is_some() {
            return Err(parse_err(format!("{path}.name"), format!("duplicate initializer '{}'", init.name)));
        }
    }

    let mut nodes = Vec::with_capacity(doc.nodes.len());
    let mut names = HashSet::new();
    let mut produced: HashSet<String> = HashSet::new();
    for (i, raw) in doc.nodes.iter().enumerate() {
        let path = format!("nodes[{i}]");
        let name = raw.name.clone().unwrap_or_else(|| format!("{}_{i}", raw.op_type));
        if !names.insert(name.clone()) {
            return Err(parse_err(format!("{path}.name"), format!("duplicate node name '{name}'")));
        }
        let op = parse_op(raw, &path, &name, &initializers).map_err(|e| match e {
            e @ (Error::Parse { .. } | Error::UnknownOp { .. } | Error::Node { .. }) => e,
            e => e.at_node(&name),
        })?;
        let (lo, hi) = op.arity();
        if raw.inputs.len() < lo || raw.inputs.len() > hi {
            return Err(parse_err(
                format!("{path}.inputs"),
                format!("node '{name}': {} takes {lo}..={hi} inputs, got {}", op.op_type(), raw.inputs.len()),
            ));
        }
        let [output] = raw.outputs.as_slice() else {
            return Err(parse_err(
                format!("{path}.outputs"),
                format!("node '{name}' must have exactly one output, has {}", raw.outputs.len()),
            ));
        };
        if *output == input.name || initializers.contains_key(output) || !produced.insert(output.clone()) {
            return Err(parse_err(format!("{path}.outputs[0]"), format!("node '{name}': output '{output}' is already defined")));
        }
        nodes.push(InterchangeNode {
            name,
            op,
            inputs: raw.inputs.clone(),
            output: output.clone(),
        });
    }

    for (i, node) in nodes.iter().enumerate() {
        let want_init = node.op.initializer_inputs();
        for (j, name) in node.inputs.iter().enumerate() {
            let known = if want_init.contains(&j) {
                initializers.contains_key(name)
            } else {
                *name == input.name || produced.contains(name) || initializers.contains_key(name)
            };
            if !known {
                return Err(Error::UnresolvedName {
                    context: format!("nodes[{i}].inputs[{j}] (node '{}')", node.name),
                    name: name.clone(),
                });
            }
        }
        if let InterchangeOp::Conv { .. } = node.op {
            let w = &initializers[&node.inputs[1]];
            if w.dims().to_array().contains(&0) {
                return Err(parse_err(format!("nodes[{i}].inputs[1]"), format!("node '{}': empty weight tensor", node.name)));
            }
        }
    }
    if doc.output != input.name && !produced.contains(&doc.output) {
        return Err(Error::UnresolvedName {
            context: "output".into(),
            name: doc.output,
        });
    }

    Ok(InterchangeGraph {
        input: input.name.clone(),
        input_dims,
        initializers,
        nodes,
        output: doc.output,
    })
}

impl InterchangeGraph {
    /// Serialize back to the JSON document form.
    pub fn to_json(&self) -> String {
        let doc = RawDoc {
            inputs: vec![RawValueInfo {
                name: self.input.clone(),
                dims: self.input_dims.to_array().to_vec(),
            }],
            initializers: self
                .initializers
                .iter()
                .map(|(name, t)| RawInitializer {
                    name: name.clone(),
                    dims: t.dims().to_array().to_vec(),
                    values: t.convert_layout(Layout::Nchw).into_data(),
                })
                .collect(),
            nodes: self.nodes.iter().map(raw_node).collect(),
            output: self.output.clone(),
        };
        serde_json::to_string_pretty(&doc).expect("serializable document")
    }

    fn producers(&self) -> HashMap<&str, &InterchangeNode> {
        self.nodes.iter().map(|n| (n.output.as_str(), n)).collect()
    }

    /// Nodes in dependency order.
    fn ordered(&self) -> Result<Vec<&InterchangeNode>> {
        let mut ready: HashSet<&str> = self.initializers.keys().map(String::as_str).collect();
        ready.insert(&self.input);
        let mut pending: Vec<&InterchangeNode> = self.nodes.iter().collect();
        let mut out = Vec::with_capacity(pending.len());
        while !pending.is_empty() {
            let Some(i) = pending.iter().position(|n| n.inputs.iter().all(|x| ready.contains(x.as_str()))) else {
                return Err(Error::Cycle(pending[0].name.clone()));
            };
            let n = pending.remove(i);
            ready.insert(&n.output);
            out.push(n);
        }
        Ok(out)
    }
}

fn ints(v: &[usize]) -> AttrValue {
    AttrValue::Ints(v.iter().map(|&x| x as i64).collect())
}

fn window_attributes(w: &WindowAttrs) -> BTreeMap<String, AttrValue> {
    BTreeMap::from([
        ("kernel_shape".to_string(), ints(&w.kernel)),
        ("strides".to_string(), ints(&w.strides)),
        ("pads".to_string(), ints(&w.pads)),
        ("dilations".to_string(), ints(&w.dilations)),
    ])
}

fn raw_node(n: &InterchangeNode) -> RawNode {
    let attributes = match &n.op {
        InterchangeOp::Conv { window, group } => {
            let mut a = window_attributes(window);
            a.insert("group".into(), AttrValue::Int(*group as i64));
            a
        }
        InterchangeOp::BatchNormalization { epsilon } => BTreeMap::from([("epsilon".to_string(), AttrValue::Float(*epsilon as f64))]),
        InterchangeOp::MaxPool(w) => window_attributes(w),
        InterchangeOp::AveragePool(w) => {
            let mut a = window_attributes(w);
            a.insert("count_include_pad".into(), AttrValue::Int(0));
            a
        }
        InterchangeOp::Gemm { trans_b } => BTreeMap::from([("transB".to_string(), AttrValue::Int(*trans_b as i64))]),
        _ => BTreeMap::new(),
    };
    RawNode {
        name: Some(n.name.clone()),
        op_type: n.op.op_type().to_string(),
        inputs: n.inputs.clone(),
        outputs: vec![n.output.clone()],
        attributes,
    }
}

fn is_binary_weight(t: &FloatTensor) -> bool {
    t.data().iter().all(|&v| v == 1.0 || v == -1.0)
}

/// Names of `Conv` nodes whose data input comes from a `Sign` node and whose
/// weights are exactly ±1.
pub fn detect_binary_convs(g: &InterchangeGraph) -> BTreeSet<String> {
    let producers = g.producers();
    g.nodes
        .iter()
        .filter(|n| matches!(n.op, InterchangeOp::Conv { .. }))
        .filter(|n| producers.get(n.inputs[0].as_str()).is_some_and(|p| p.op == InterchangeOp::Sign))
        .filter(|n| g.initializers.get(&n.inputs[1]).is_some_and(is_binary_weight))
        .map(|n| n.name.clone())
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvertOptions {
    /// Channel group width for packed filters.
    pub c2: usize,
    /// Replace `BatchNormalization -> Sign` pairs by per-channel thresholds.
    pub fuse_bn_sign: bool,
}

impl Default for ConvertOptions {
    fn default() -> Self {
        Self {
            c2: DEFAULT_GROUP_BITS,
            fuse_bn_sign: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InitializerReport {
    pub name: String,
    pub bytes_before: usize,
    pub bytes_after: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConversionReport {
    pub initializers: Vec<InitializerReport>,
    /// Total bytes before over total bytes after.
    pub ratio: f64,
    pub warnings: Vec<String>,
}

impl ConversionReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("serializable report")
    }
}

fn conv_params(node: &InterchangeNode, window: &WindowAttrs, group: usize, weights: &FloatTensor) -> Result<ConvParams> {
    if group != 1 {
        return Err(Error::Unsupported(format!("group = {group}")).at_node(&node.name));
    }
    let window = window.window().map_err(|e| e.at_node(&node.name))?;
    let d = weights.dims();
    if d.h != window.kh || d.w != window.kw {
        return Err(Error::shape(format!("kernel_shape {}x{} does not match weights {d}", window.kh, window.kw)).at_node(&node.name));
    }
    Ok(ConvParams::new(window, d.c))
}

/// Transpose a `(in, out)` Gemm weight into `(out, in, 1, 1)`.
fn gemm_weights(w: &FloatTensor, trans_b: bool) -> FloatTensor {
    let d = w.dims();
    let (rows, cols) = (d.n, d.c * d.h * d.w);
    if trans_b {
        return w.clone().reshaped(Dims::new(rows, cols, 1, 1)).expect("same size");
    }
    let src = w.convert_layout(Layout::Nchw);
    let mut data = vec![0f32; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            data[c * rows + r] = src.data()[r * cols + c];
        }
    }
    FloatTensor::new(Dims::new(cols, rows, 1, 1), Layout::Nchw, data).expect("sized")
}

fn flat(t: &FloatTensor) -> &[f32] {
    t.data()
}

/// Convert a parsed graph into a packed model.
///
/// Detected binary convolutions become `BinaryConv` nodes with filters packed
/// at `options.c2`; every other node maps to its runtime counterpart.
pub fn convert_model(g: &InterchangeGraph, options: &ConvertOptions) -> Result<(PackedModel, ConversionReport)> {
    crate::layout::check_group_bits(options.c2)?;
    let binary = detect_binary_convs(g);
    let mut warnings = Vec::new();

    // Uses of each initializer as plain float data.
    let mut float_uses: HashMap<&str, usize> = HashMap::new();
    let mut consumers: HashMap<&str, Vec<&InterchangeNode>> = HashMap::new();
    for n in &g.nodes {
        for (j, x) in n.inputs.iter().enumerate() {
            consumers.entry(x.as_str()).or_default().push(n);
            let special = (binary.contains(&n.name) && j == 1) || (matches!(n.op, InterchangeOp::Gemm { trans_b: false }) && j == 1);
            if !special && g.initializers.contains_key(x) {
                *float_uses.entry(x.as_str()).or_default() += 1;
            }
        }
    }

    // Sign nodes absorbed into a threshold, keyed by the BN they replace.
    let mut fused: HashMap<&str, &InterchangeNode> = HashMap::new();
    if options.fuse_bn_sign {
        for bn in &g.nodes {
            let InterchangeOp::BatchNormalization { epsilon } = bn.op else { continue };
            let users = consumers.get(bn.output.as_str()).map(Vec::as_slice).unwrap_or(&[]);
            let [sign] = users else { continue };
            if sign.op != InterchangeOp::Sign || bn.output == g.output {
                continue;
            }
            let p: Vec<&[f32]> = bn.inputs[1..].iter().map(|n| flat(&g.initializers[n])).collect();
            if fuse_bn_sign(p[0], p[1], p[2], p[3], epsilon).is_some() {
                fused.insert(bn.name.as_str(), sign);
            } else {
                warnings.push(format!("node '{}': batch norm not fused (a channel has zero scale or non-positive variance)", bn.name));
            }
        }
    }
    let absorbed: HashSet<&str> = fused.values().map(|s| s.name.as_str()).collect();

    let mut initializers: BTreeMap<String, Initializer> = BTreeMap::new();
    // Runtime initializer names derived from each source initializer.
    let mut derived: BTreeMap<String, Vec<String>> = BTreeMap::new();
    let mut created: Vec<String> = Vec::new();
    let mut add_derived = |inits: &mut BTreeMap<String, Initializer>, source: &str, suffix: &str, init: Initializer| -> String {
        let mut name = if float_uses.get(source).copied().unwrap_or(0) == 0 {
            source.to_string()
        } else {
            format!("{source}.{suffix}")
        };
        while inits.get(&name).is_some_and(|existing| *existing != init) || (name != source && g.initializers.contains_key(&name)) {
            name.push('_');
        }
        if !inits.contains_key(&name) {
            inits.insert(name.clone(), init);
            derived.entry(source.to_string()).or_default().push(name.clone());
        }
        name
    };
    let float_ref = |inits: &mut BTreeMap<String, Initializer>, name: &str| -> String {
        if !inits.contains_key(name) {
            inits.insert(name.to_string(), Initializer::Float(g.initializers[name].clone()));
        }
        name.to_string()
    };

    let mut nodes = Vec::with_capacity(g.nodes.len());
    for n in &g.nodes {
        if absorbed.contains(n.name.as_str()) {
            continue;
        }
        let at = |e: Error| e.at_node(&n.name);
        let data = n.inputs[0].clone();
        let (op, inputs) = match &n.op {
            InterchangeOp::Sign => (Op::Sign, vec![data]),
            InterchangeOp::Conv { window, group } => {
                let w = &g.initializers[&n.inputs[1]];
                let p = conv_params(n, window, *group, w)?;
                let mut inputs = vec![data];
                let op = if binary.contains(&n.name) {
                    if p.window.ph > 0 || p.window.pw > 0 {
                        warnings.push(format!(
                            "node '{}': binary convolution pads with +1, so border outputs differ from a zero-padded float convolution",
                            n.name
                        ));
                    }
                    let packed = PackedFilters::from_float(w, options.c2).map_err(at)?;
                    inputs.push(add_derived(&mut initializers, &n.inputs[1], "packed", Initializer::Packed(packed)));
                    Op::BinaryConv(p.window)
                } else {
                    inputs.push(float_ref(&mut initializers, &n.inputs[1]));
                    Op::FloatConv(p.window)
                };
                if let Some(b) = n.inputs.get(2) {
                    inputs.push(float_ref(&mut initializers, b));
                }
                (op, inputs)
            }
            InterchangeOp::BatchNormalization { epsilon } => {
                if let Some(sign) = fused.get(n.name.as_str()) {
                    let p: Vec<&[f32]> = n.inputs[1..].iter().map(|x| flat(&g.initializers[x])).collect();
                    let t = fuse_bn_sign(p[0], p[1], p[2], p[3], *epsilon).expect("checked above");
                    let mut name = format!("{}.thresholds", n.name);
                    while g.initializers.contains_key(&name) || initializers.contains_key(&name) {
                        name.push('_');
                    }
                    initializers.insert(name.clone(), Initializer::Float(thresholds_to_tensor(&t)));
                    created.push(name.clone());
                    nodes.push(Node {
                        name: n.name.clone(),
                        op: Op::ThresholdSign,
                        inputs: vec![data, name],
                        output: sign.output.clone(),
                    });
                    continue;
                }
                let mut inputs = vec![data];
                for x in &n.inputs[1..] {
                    inputs.push(float_ref(&mut initializers, x));
                }
                (Op::BatchNorm { epsilon: *epsilon }, inputs)
            }
            InterchangeOp::Relu => (Op::Relu, vec![data]),
            InterchangeOp::MaxPool(w) => (Op::MaxPool(w.window().map_err(at)?), vec![data]),
            InterchangeOp::AveragePool(w) => (Op::AvgPool(w.window().map_err(at)?), vec![data]),
            InterchangeOp::GlobalAveragePool => (Op::GlobalAvgPool, vec![data]),
            InterchangeOp::Add => (Op::Add, vec![data, n.inputs[1].clone()]),
            InterchangeOp::Gemm { trans_b } => {
                let w = &g.initializers[&n.inputs[1]];
                let mut inputs = vec![data];
                if *trans_b {
                    inputs.push(float_ref(&mut initializers, &n.inputs[1]));
                } else {
                    let t = Initializer::Float(gemm_weights(w, false));
                    inputs.push(add_derived(&mut initializers, &n.inputs[1], "transposed", t));
                }
                if let Some(b) = n.inputs.get(2) {
                    inputs.push(float_ref(&mut initializers, b));
                }
                (Op::FullyConnected, inputs)
            }
            InterchangeOp::Flatten => (Op::Flatten, vec![data]),
        };
        for x in &inputs {
            if g.initializers.contains_key(x) && !initializers.contains_key(x) {
                float_ref(&mut initializers, x);
            }
        }
        nodes.push(Node {
            name: n.name.clone(),
            op,
            inputs,
            output: n.output.clone(),
        });
    }

    // Plain float references count as derived from themselves.
    for name in g.initializers.keys() {
        if initializers.contains_key(name) && matches!(initializers[name], Initializer::Float(_)) {
            let d = derived.entry(name.clone()).or_default();
            if !d.contains(name) {
                d.push(name.clone());
            }
        }
    }

    let mut report = Vec::new();
    for (name, t) in &g.initializers {
        let after = derived
            .get(name)
            .map(|names| names.iter().map(|d| initializers[d].payload_bytes()).sum())
            .unwrap_or(0);
        if after == 0 && !derived.contains_key(name) {
            warnings.push(format!("initializer '{name}' is not used by the converted model"));
        }
        report.push(InitializerReport {
            name: name.clone(),
            bytes_before: t.dims().numel() * 4,
            bytes_after: after,
        });
    }
    for name in created {
        report.push(InitializerReport {
            bytes_before: 0,
            bytes_after: initializers[&name].payload_bytes(),
            name,
        });
    }
    let before: usize = report.iter().map(|r| r.bytes_before).sum();
    let after: usize = report.iter().map(|r| r.bytes_after).sum();
    let ratio = if after == 0 { 1.0 } else { before as f64 / after as f64 };

    let graph = Graph::new(g.input.clone(), g.input_dims, nodes, initializers, g.output.clone())?;
    Ok((
        PackedModel::new(graph),
        ConversionReport {
            initializers: report,
            ratio,
            warnings,
        },
    ))
}

fn add_channel_bias(y: FloatTensor, bias: &[f32]) -> Result<FloatTensor> {
    let mut y = y.as_nhwc().into_owned();
    let c = y.dims().c;
    if bias.len() != c {
        return Err(Error::shape(format!("bias has {} values for {c} channels", bias.len())));
    }
    if c > 0 {
        for px in y.data_mut().chunks_mut(c) {
            for (v, b) in px.iter_mut().zip(bias) {
                *v += b;
            }
        }
    }
    Ok(y)
}

/// Float evaluation of the source graph.
///
/// `Sign` yields ±1 by sign bit, detected binary convolutions use the
/// +1-padding oracle, and every other node is its plain float counterpart.
pub fn evaluate_reference(g: &InterchangeGraph, input: &FloatTensor) -> Result<FloatTensor> {
    if input.dims() != g.input_dims {
        return Err(Error::shape(format!("graph input expects {}, got {}", g.input_dims, input.dims())));
    }
    let binary = detect_binary_convs(g);
    let mut env: HashMap<&str, FloatTensor> = HashMap::new();
    env.insert(&g.input, input.clone());
    for n in g.ordered()? {
        let get = |name: &str| -> Result<&FloatTensor> {
            env.get(name).or_else(|| g.initializers.get(name)).ok_or_else(|| Error::UnresolvedName {
                context: format!("node '{}'", n.name),
                name: name.to_string(),
            })
        };
        let x = get(&n.inputs[0])?;
        let y = match &n.op {
            InterchangeOp::Sign => Ok(floatops::sign_op(x)),
            InterchangeOp::Conv { window, group } => {
                let w = get(&n.inputs[1])?;
                let p = conv_params(n, window, *group, w)?;
                let bias = n.inputs.get(2).map(|b| get(b).map(flat)).transpose()?;
                if binary.contains(&n.name) {
                    floatops::oracle_binary_conv(x, w, &p).and_then(|y| match bias {
                        Some(b) => add_channel_bias(y, b),
                        None => Ok(y),
                    })
                } else {
                    floatops::conv2d_f32(x, w, bias, &p)
                }
            }
            InterchangeOp::BatchNormalization { epsilon } => {
                let p: Vec<&[f32]> = n.inputs[1..].iter().map(|x| get(x).map(flat)).collect::<Result<_>>()?;
                floatops::batchnorm(x, p[0], p[1], p[2], p[3], *epsilon)
            }
            InterchangeOp::Relu => Ok(floatops::relu(x)),
            InterchangeOp::MaxPool(w) => w.window().and_then(|w| floatops::maxpool(x, &w)),
            InterchangeOp::AveragePool(w) => w.window().and_then(|w| floatops::avgpool(x, &w)),
            InterchangeOp::GlobalAveragePool => Ok(floatops::global_avgpool(x)),
            InterchangeOp::Add => floatops::add(x, get(&n.inputs[1])?),
            InterchangeOp::Gemm { trans_b } => {
                let w = gemm_weights(get(&n.inputs[1])?, *trans_b);
                let bias = n.inputs.get(2).map(|b| get(b).map(flat)).transpose()?;
                floatops::fully_connected(x, &w, bias)
            }
            InterchangeOp::Flatten => Ok(floatops::flatten(x)),
        }
        .map_err(|e| e.at_node(&n.name))?;
        env.insert(&n.output, y);
    }
    env.remove(g.output.as_str()).ok_or_else(|| Error::UnresolvedName {
        context: "output".into(),
        name: g.output.clone(),
    })
}

/// Express a packed model as an interchange graph: binary convolutions
/// become `Conv` nodes over unpacked ±1 weights, fully connected layers
/// become `Gemm` with `transB = 1`.
pub fn export_interchange(model: &PackedModel) -> Result<InterchangeGraph> {
    let g = &model.graph;
    let mut initializers = BTreeMap::new();
    for (name, init) in g.initializers() {
        let t = match init {
            Initializer::Float(t) => t.convert_layout(Layout::Nchw),
            Initializer::Packed(p) => p.to_float(),
        };
        initializers.insert(name.clone(), t);
    }
    let mut nodes = Vec::new();
    for n in g.nodes() {
        let op = match n.op {
            Op::Sign => InterchangeOp::Sign,
            Op::BinaryConv(w) | Op::FloatConv(w) => InterchangeOp::Conv {
                window: WindowAttrs::from_window(&w),
                group: 1,
            },
            Op::BatchNorm { epsilon } => InterchangeOp::BatchNormalization { epsilon },
            Op::Relu => InterchangeOp::Relu,
            Op::MaxPool(w) => InterchangeOp::MaxPool(WindowAttrs::from_window(&w)),
            Op::AvgPool(w) => InterchangeOp::AveragePool(WindowAttrs::from_window(&w)),
            Op::GlobalAvgPool => InterchangeOp::GlobalAveragePool,
            Op::Add => InterchangeOp::Add,
            Op::FullyConnected => InterchangeOp::Gemm { trans_b: true },
            Op::Flatten => InterchangeOp::Flatten,
            Op::ThresholdSign => {
                return Err(Error::Unsupported("fused thresholds have no interchange operator".into()).at_node(&n.name))
            }
        };
        nodes.push(InterchangeNode {
            name: n.name.clone(),
            op,
            inputs: n.inputs.clone(),
            output: n.output.clone(),
        });
    }
    Ok(InterchangeGraph {
        input: g.input_name().to_string(),
        input_dims: g.input_dims(),
        initializers,
        nodes,
        output: g.output().to_string(),
    })
}
