//! Operator graphs and their execution.
//!
//! Binary convolutions take float activations (already passed through a
//! `Sign`), pack them into NC1HWC2 on every call and run
//! [`binary_direct_conv`]. Everything else is a [`floatops`] call.

mod format;

use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::Path;

use crate::error::{Error, Result};
use crate::floatops::{self, ChannelThreshold};
use crate::kernels::{binary_direct_conv, unpack_filters, BinMatrix, ConvParams, Window};
use crate::layout::{pack_to_nc1hwc2, Dims, FloatTensor, Layout};

pub use format::{FORMAT_VERSION, MAGIC};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Op {
    Sign,
    /// Inputs: activations, packed filters, optional bias.
    BinaryConv(Window),
    /// Inputs: activations, `(M, C, kh, kw)` filters, optional bias.
    FloatConv(Window),
    /// Inputs: activations, scale, shift, mean, variance.
    BatchNorm { epsilon: f32 },
    Relu,
    MaxPool(Window),
    AvgPool(Window),
    GlobalAvgPool,
    Add,
    /// Inputs: activations, `(out, in, 1, 1)` weights, optional bias.
    FullyConnected,
    Flatten,
    /// Fused batch-norm + sign. Inputs: activations, `(C, 2, 1, 1)`
    /// thresholds holding `[value, rising]` per channel.
    ThresholdSign,
}

impl Op {
    pub fn kind(&self) -> &'static str {
        match self {
            Op::Sign => "Sign",
            Op::BinaryConv(_) => "BinaryConv",
            Op::FloatConv(_) => "FloatConv",
            Op::BatchNorm { .. } => "BatchNorm",
            Op::Relu => "Relu",
            Op::MaxPool(_) => "MaxPool",
            Op::AvgPool(_) => "AvgPool",
            Op::GlobalAvgPool => "GlobalAvgPool",
            Op::Add => "Add",
            Op::FullyConnected => "FullyConnected",
            Op::Flatten => "Flatten",
            Op::ThresholdSign => "ThresholdSign",
        }
    }

    /// Accepted input counts.
    fn arity(&self) -> (usize, usize) {
        match self {
            Op::BinaryConv(_) | Op::FloatConv(_) | Op::FullyConnected => (2, 3),
            Op::BatchNorm { .. } => (5, 5),
            Op::Add | Op::ThresholdSign => (2, 2),
            _ => (1, 1),
        }
    }

    /// Whether input `i` must name an initializer.
    fn wants_initializer(&self, i: usize) -> bool {
        match self {
            Op::BinaryConv(_) | Op::FloatConv(_) | Op::FullyConnected | Op::BatchNorm { .. } | Op::ThresholdSign => i >= 1,
            _ => false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Node {
    pub name: String,
    pub op: Op,
    pub inputs: Vec<String>,
    pub output: String,
}

impl Node {
    pub fn new(name: impl Into<String>, op: Op, inputs: &[&str], output: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            op,
            inputs: inputs.iter().map(|s| s.to_string()).collect(),
            output: output.into(),
        }
    }
}

/// Binarized filters `(M, channels, kh, kw)` packed into an `M × kh·kw·C1` matrix.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PackedFilters {
    pub channels: usize,
    pub kh: usize,
    pub kw: usize,
    pub matrix: BinMatrix,
}

impl PackedFilters {
    pub fn from_float(filters: &FloatTensor, c2: usize) -> Result<Self> {
        let d = filters.dims();
        Ok(Self {
            channels: d.c,
            kh: d.h,
            kw: d.w,
            matrix: crate::kernels::pack_filters(filters, c2)?,
        })
    }

    pub fn dims(&self) -> Dims {
        Dims::new(self.matrix.rows(), self.channels, self.kh, self.kw)
    }

    pub fn group_bits(&self) -> usize {
        self.matrix.vec_bits()
    }

    /// ±1 filters in NCHW order.
    pub fn to_float(&self) -> FloatTensor {
        unpack_filters(&self.matrix, self.channels, self.kh, self.kw).expect("consistent packed filters")
    }

    /// Stored payload size.
    pub fn payload_bytes(&self) -> usize {
        self.matrix.rows() * self.matrix.cols() * self.matrix.vec_bits() / 8
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Initializer {
    Float(FloatTensor),
    Packed(PackedFilters),
}

impl Initializer {
    pub fn payload_bytes(&self) -> usize {
        match self {
            Initializer::Float(t) => t.dims().numel() * 4,
            Initializer::Packed(p) => p.payload_bytes(),
        }
    }

    fn as_float(&self) -> Result<&FloatTensor> {
        match self {
            Initializer::Float(t) => Ok(t),
            Initializer::Packed(_) => Err(Error::InvalidParameter("expected a float initializer".into())),
        }
    }
}

/// Validated operator DAG with one input and one output.
#[derive(Debug, Clone, PartialEq)]
pub struct Graph {
    input_name: String,
    input_dims: Dims,
    nodes: Vec<Node>,
    initializers: BTreeMap<String, Initializer>,
    output: String,
}

impl Graph {
    /// Validate names, arities and initializer kinds, and order `nodes`
    /// topologically (stable for already-sorted input).
    pub fn new(
        input_name: impl Into<String>,
        input_dims: Dims,
        nodes: Vec<Node>,
        initializers: BTreeMap<String, Initializer>,
        output: impl Into<String>,
    ) -> Result<Self> {
        let input_name = input_name.into();
        let output = output.into();

        let mut producers: HashMap<&str, &str> = HashMap::new();
        for node in &nodes {
            let (lo, hi) = node.op.arity();
            if node.inputs.len() < lo || node.inputs.len() > hi {
                return Err(Error::InvalidParameter(format!(
                    "{} takes {lo}..={hi} inputs, got {}",
                    node.op.kind(),
                    node.inputs.len()
                ))
                .at_node(&node.name));
            }
            if node.output == input_name || initializers.contains_key(&node.output) {
                return Err(Error::InvalidParameter(format!("output '{}' shadows a graph input or initializer", node.output)).at_node(&node.name));
            }
            if producers.insert(&node.output, &node.name).is_some() {
                return Err(Error::InvalidParameter(format!("output '{}' produced twice", node.output)).at_node(&node.name));
            }
        }

        for node in &nodes {
            for (i, name) in node.inputs.iter().enumerate() {
                let init = initializers.get(name);
                if node.op.wants_initializer(i) {
                    let Some(init) = init else {
                        return Err(Error::UnresolvedName {
                            context: format!("node '{}' initializer", node.name),
                            name: name.clone(),
                        });
                    };
                    let packed_expected = matches!(node.op, Op::BinaryConv(_)) && i == 1;
                    if packed_expected != matches!(init, Initializer::Packed(_)) {
                        return Err(Error::InvalidParameter(format!(
                            "initializer '{name}' must be {}",
                            if packed_expected { "packed" } else { "float" }
                        ))
                        .at_node(&node.name));
                    }
                } else if init.is_none() && *name != input_name && !producers.contains_key(name.as_str()) {
                    return Err(Error::UnresolvedName {
                        context: format!("node '{}'", node.name),
                        name: name.clone(),
                    });
                }
            }
        }

        if output != input_name && !producers.contains_key(output.as_str()) {
            return Err(Error::UnresolvedName {
                context: "graph output".into(),
                name: output,
            });
        }

        let nodes = topo_sort(nodes, &input_name, &initializers)?;
        Ok(Self {
            input_name,
            input_dims,
            nodes,
            initializers,
            output,
        })
    }

    pub fn input_name(&self) -> &str {
        &self.input_name
    }

    pub fn input_dims(&self) -> Dims {
        self.input_dims
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn initializers(&self) -> &BTreeMap<String, Initializer> {
        &self.initializers
    }

    pub fn output(&self) -> &str {
        &self.output
    }

    pub fn count_op(&self, kind: &str) -> usize {
        self.nodes.iter().filter(|n| n.op.kind() == kind).count()
    }

    /// Run the graph on one input tensor.
    pub fn execute(&self, input: &FloatTensor) -> Result<FloatTensor> {
        self.run(input, &|node, x, filters, p| {
            let packed = pack_to_nc1hwc2(x, filters.group_bits()).map_err(|e| e.at_node(&node.name))?;
            binary_direct_conv(&packed, &filters.matrix, p)
        })
    }

    /// All-float evaluation: every binary convolution is replaced by
    /// [`floatops::oracle_binary_conv`] over the unpacked ±1 filters.
    pub fn execute_reference(&self, input: &FloatTensor) -> Result<FloatTensor> {
        self.run(input, &|_, x, filters, p| floatops::oracle_binary_conv(x, &filters.to_float(), p))
    }

    fn run(&self, input: &FloatTensor, binary_conv: &BinaryConvFn<'_>) -> Result<FloatTensor> {
        if input.dims() != self.input_dims {
            return Err(Error::shape(format!(
                "graph input '{}' expects {}, got {}",
                self.input_name,
                self.input_dims,
                input.dims()
            )));
        }
        let mut env: HashMap<&str, FloatTensor> = HashMap::new();
        env.insert(&self.input_name, input.clone());
        for node in &self.nodes {
            let y = self.eval(node, &env, binary_conv).map_err(|e| e.at_node(&node.name))?;
            env.insert(&node.output, y);
        }
        env.remove(self.output.as_str())
            .ok_or_else(|| Error::UnresolvedName {
                context: "graph output".into(),
                name: self.output.clone(),
            })
    }

    fn activation<'e>(&'e self, env: &'e HashMap<&str, FloatTensor>, name: &str) -> Result<&'e FloatTensor> {
        if let Some(t) = env.get(name) {
            return Ok(t);
        }
        match self.initializers.get(name) {
            Some(init) => init.as_float(),
            None => Err(Error::UnresolvedName {
                context: "activation".into(),
                name: name.to_string(),
            }),
        }
    }

    fn init(&self, name: &str) -> Result<&Initializer> {
        self.initializers.get(name).ok_or_else(|| Error::UnresolvedName {
            context: "initializer".into(),
            name: name.to_string(),
        })
    }

    fn float_init(&self, name: &str) -> Result<&FloatTensor> {
        self.init(name)?.as_float()
    }

    fn optional_bias(&self, node: &Node) -> Result<Option<&[f32]>> {
        node.inputs.get(2).map(|b| self.float_init(b).map(|t| t.data())).transpose()
    }

    fn eval(&self, node: &Node, env: &HashMap<&str, FloatTensor>, binary_conv: &BinaryConvFn<'_>) -> Result<FloatTensor> {
        let x = self.activation(env, &node.inputs[0])?;
        match node.op {
            Op::Sign => Ok(floatops::sign_op(x)),
            Op::BinaryConv(window) => {
                let Initializer::Packed(filters) = self.init(&node.inputs[1])? else {
                    return Err(Error::InvalidParameter("binary convolution needs packed filters".into()));
                };
                if filters.kh != window.kh || filters.kw != window.kw {
                    return Err(Error::shape(format!(
                        "filters are {}x{}, window is {}x{}",
                        filters.kh, filters.kw, window.kh, window.kw
                    )));
                }
                if x.dims().c != filters.channels {
                    return Err(Error::shape(format!(
                        "binary conv expects {} channels, input has {}",
                        filters.channels,
                        x.dims().c
                    )));
                }
                let p = ConvParams::new(window, filters.channels);
                let mut y = binary_conv(node, x, filters, &p)?;
                if let Some(b) = self.optional_bias(node)? {
                    add_channel_bias(&mut y, b)?;
                }
                Ok(y)
            }
            Op::FloatConv(window) => {
                let w = self.float_init(&node.inputs[1])?;
                let p = ConvParams::new(window, x.dims().c);
                floatops::conv2d_f32(x, w, self.optional_bias(node)?, &p)
            }
            Op::BatchNorm { epsilon } => {
                let p: Vec<&[f32]> = node.inputs[1..]
                    .iter()
                    .map(|n| self.float_init(n).map(|t| t.data()))
                    .collect::<Result<_>>()?;
                floatops::batchnorm(x, p[0], p[1], p[2], p[3], epsilon)
            }
            Op::ThresholdSign => {
                let t = self.float_init(&node.inputs[1])?;
                floatops::threshold_sign(x, &thresholds_from_tensor(t)?)
            }
            Op::Relu => Ok(floatops::relu(x)),
            Op::MaxPool(w) => floatops::maxpool(x, &w),
            Op::AvgPool(w) => floatops::avgpool(x, &w),
            Op::GlobalAvgPool => Ok(floatops::global_avgpool(x)),
            Op::Add => floatops::add(x, self.activation(env, &node.inputs[1])?),
            Op::FullyConnected => {
                let w = self.float_init(&node.inputs[1])?;
                floatops::fully_connected(x, w, self.optional_bias(node)?)
            }
            Op::Flatten => Ok(floatops::flatten(x)),
        }
    }
}

type BinaryConvFn<'a> = dyn Fn(&Node, &FloatTensor, &PackedFilters, &ConvParams) -> Result<FloatTensor> + 'a;

fn add_channel_bias(y: &mut FloatTensor, bias: &[f32]) -> Result<()> {
    let c = y.dims().c;
    if bias.len() != c {
        return Err(Error::shape(format!("bias has {} values for {c} channels", bias.len())));
    }
    debug_assert_eq!(y.layout(), Layout::Nhwc);
    if c == 0 {
        return Ok(());
    }
    for px in y.data_mut().chunks_mut(c) {
        for (v, b) in px.iter_mut().zip(bias) {
            *v += b;
        }
    }
    Ok(())
}

/// Encode fused thresholds as a `(C, 2, 1, 1)` tensor.
pub fn thresholds_to_tensor(t: &[ChannelThreshold]) -> FloatTensor {
    let data = t
        .iter()
        .flat_map(|c| [c.value, if c.rising { 1.0 } else { 0.0 }])
        .collect();
    FloatTensor::new(Dims::new(t.len(), 2, 1, 1), Layout::Nchw, data).expect("sized")
}

fn thresholds_from_tensor(t: &FloatTensor) -> Result<Vec<ChannelThreshold>> {
    let d = t.dims();
    if d.c != 2 || d.h != 1 || d.w != 1 {
        return Err(Error::shape(format!("threshold tensor must be (C, 2, 1, 1), got {d}")));
    }
    let t = t.convert_layout(Layout::Nchw);
    Ok(t.data()
        .chunks(2)
        .map(|c| ChannelThreshold {
            value: c[0],
            rising: c[1] != 0.0,
        })
        .collect())
}

/// Stable Kahn ordering: always emit the earliest ready node.
fn topo_sort(nodes: Vec<Node>, input: &str, initializers: &BTreeMap<String, Initializer>) -> Result<Vec<Node>> {
    let mut available: HashSet<String> = initializers.keys().cloned().collect();
    available.insert(input.to_string());
    let mut pending: Vec<Option<Node>> = nodes.into_iter().map(Some).collect();
    let mut ordered = Vec::with_capacity(pending.len());
    while ordered.len() < pending.len() {
        let ready = pending.iter().position(|slot| {
            slot.as_ref()
                .is_some_and(|n| n.inputs.iter().all(|i| available.contains(i)))
        });
        match ready {
            Some(i) => {
                let node = pending[i].take().expect("ready slot");
                available.insert(node.output.clone());
                ordered.push(node);
            }
            None => {
                let stuck = pending.iter().flatten().next().expect("unsorted node remains");
                return Err(Error::Cycle(stuck.name.clone()));
            }
        }
    }
    Ok(ordered)
}

/// A graph plus its file-format version; the unit saved to and loaded from disk.
#[derive(Debug, Clone, PartialEq)]
pub struct PackedModel {
    pub version: u32,
    pub graph: Graph,
}

impl PackedModel {
    pub fn new(graph: Graph) -> Self {
        Self {
            version: FORMAT_VERSION,
            graph,
        }
    }

    pub fn execute(&self, input: &FloatTensor) -> Result<FloatTensor> {
        self.graph.execute(input)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        format::encode(self)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        format::decode(bytes)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ones_filters(m: usize, c: usize, k: usize, c2: usize) -> Initializer {
        let f = FloatTensor::filled(Dims::new(m, c, k, k), Layout::Nchw, 1.0);
        Initializer::Packed(PackedFilters::from_float(&f, c2).unwrap())
    }

    fn sign_conv_graph() -> Graph {
        let mut inits = BTreeMap::new();
        inits.insert("w".to_string(), ones_filters(4, 8, 1, 8));
        Graph::new(
            "x",
            Dims::new(1, 8, 3, 3),
            vec![
                Node::new("sign", Op::Sign, &["x"], "s"),
                Node::new("conv", Op::BinaryConv(Window::square(1, 1, 0)), &["s", "w"], "y"),
            ],
            inits,
            "y",
        )
        .unwrap()
    }

    #[test]
    fn sign_then_binary_conv() {
        let g = sign_conv_graph();
        let x = FloatTensor::filled(Dims::new(1, 8, 3, 3), Layout::Nhwc, 0.7);
        let y = g.execute(&x).unwrap();
        assert_eq!(y.dims(), Dims::new(1, 4, 3, 3));
        assert!(y.data().iter().all(|&v| v == 8.0));
        assert_eq!(g.execute_reference(&x).unwrap(), y);
    }

    #[test]
    fn nodes_are_sorted() {
        let mut inits = BTreeMap::new();
        inits.insert("w".to_string(), ones_filters(4, 8, 1, 8));
        let g = Graph::new(
            "x",
            Dims::new(1, 8, 3, 3),
            vec![
                Node::new("conv", Op::BinaryConv(Window::square(1, 1, 0)), &["s", "w"], "y"),
                Node::new("sign", Op::Sign, &["x"], "s"),
            ],
            inits,
            "y",
        )
        .unwrap();
        assert_eq!(g.nodes()[0].name, "sign");
    }

    #[test]
    fn cycles_and_dangling_names_are_rejected() {
        let cyc = Graph::new(
            "x",
            Dims::new(1, 1, 1, 1),
            vec![
                Node::new("a", Op::Add, &["x", "b_out"], "a_out"),
                Node::new("b", Op::Relu, &["a_out"], "b_out"),
            ],
            BTreeMap::new(),
            "b_out",
        );
        assert!(matches!(cyc, Err(Error::Cycle(_))));

        let dangling = Graph::new(
            "x",
            Dims::new(1, 1, 1, 1),
            vec![Node::new("a", Op::Relu, &["nope"], "y")],
            BTreeMap::new(),
            "y",
        );
        assert!(matches!(dangling, Err(Error::UnresolvedName { .. })));

        let missing_weight = Graph::new(
            "x",
            Dims::new(1, 1, 1, 1),
            vec![Node::new("fc", Op::FullyConnected, &["x", "w"], "y")],
            BTreeMap::new(),
            "y",
        );
        assert!(matches!(missing_weight, Err(Error::UnresolvedName { .. })));
    }

    #[test]
    fn binary_conv_requires_packed_weights() {
        let mut inits = BTreeMap::new();
        inits.insert("w".to_string(), Initializer::Float(FloatTensor::filled(Dims::new(1, 8, 1, 1), Layout::Nchw, 1.0)));
        let g = Graph::new(
            "x",
            Dims::new(1, 8, 1, 1),
            vec![Node::new("conv", Op::BinaryConv(Window::square(1, 1, 0)), &["x", "w"], "y")],
            inits,
            "y",
        );
        match g {
            Err(Error::Node { node, .. }) => assert_eq!(node, "conv"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn execution_errors_name_the_node() {
        let mut inits = BTreeMap::new();
        inits.insert("w".to_string(), ones_filters(4, 16, 1, 8));
        let g = Graph::new(
            "x",
            Dims::new(1, 8, 2, 2),
            vec![
                Node::new("sign", Op::Sign, &["x"], "s"),
                Node::new("conv", Op::BinaryConv(Window::square(1, 1, 0)), &["s", "w"], "y"),
            ],
            inits,
            "y",
        )
        .unwrap();
        let err = g.execute(&FloatTensor::filled(Dims::new(1, 8, 2, 2), Layout::Nhwc, 1.0)).unwrap_err();
        match &err {
            Error::Node { node, source } => {
                assert_eq!(node, "conv");
                assert!(matches!(**source, Error::ShapeMismatch(_)));
            }
            other => panic!("unexpected {other:?}"),
        }
        assert!(err.to_string().contains("conv"));
    }

    #[test]
    fn overflow_is_attributed() {
        let c = 8 * 8192;
        let mut inits = BTreeMap::new();
        inits.insert("w".to_string(), ones_filters(1, c, 1, 8));
        let g = Graph::new(
            "x",
            Dims::new(1, c, 1, 1),
            vec![Node::new("big", Op::BinaryConv(Window::square(1, 1, 0)), &["x", "w"], "y")],
            inits,
            "y",
        )
        .unwrap();
        let err = g.execute(&FloatTensor::filled(Dims::new(1, c, 1, 1), Layout::Nhwc, 1.0)).unwrap_err();
        assert!(matches!(err.root(), Error::ReductionOverflow { .. }));
        assert!(matches!(err, Error::Node { ref node, .. } if node == "big"));
    }

    #[test]
    fn input_dims_checked() {
        let g = sign_conv_graph();
        assert!(g.execute(&FloatTensor::filled(Dims::new(1, 8, 2, 3), Layout::Nhwc, 1.0)).is_err());
    }
}
