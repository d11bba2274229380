//! Graph construction helpers and the Bi-Real-Net-18 topology.
//!
//! [`GraphBuilder`] fills every parameter from a seeded ChaCha8 stream, so a
//! `(topology, seed)` pair always yields the same model bytes.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::kernels::Window;
use crate::layout::{Dims, FloatTensor, Layout, DEFAULT_GROUP_BITS};
use crate::runtime::{Graph, Initializer, Node, Op, PackedFilters, PackedModel};

/// Incremental graph builder with random parameters.
///
/// Every method returns the name of the tensor it produced.
pub struct GraphBuilder {
    rng: ChaCha8Rng,
    input: String,
    input_dims: Dims,
    nodes: Vec<Node>,
    initializers: BTreeMap<String, Initializer>,
    counter: usize,
    c2: usize,
}

impl GraphBuilder {
    /// Start a graph with one input named `input`. `c2` is the group width
    /// used to pack binary filters.
    pub fn new(input: &str, dims: Dims, c2: usize, seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            input: input.to_string(),
            input_dims: dims,
            nodes: Vec::new(),
            initializers: BTreeMap::new(),
            counter: 0,
            c2,
        }
    }

    pub fn input(&self) -> &str {
        &self.input
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }

    fn fresh(&mut self, prefix: &str) -> String {
        self.counter += 1;
        format!("{prefix}{}", self.counter)
    }

    fn push(&mut self, prefix: &str, op: Op, inputs: Vec<String>) -> String {
        let name = self.fresh(prefix);
        let output = format!("{name}_out");
        self.nodes.push(Node {
            name,
            op,
            inputs,
            output: output.clone(),
        });
        output
    }

    /// Register a named initializer and return its name.
    pub fn initializer(&mut self, prefix: &str, init: Initializer) -> String {
        let name = self.fresh(prefix);
        self.initializers.insert(name.clone(), init);
        name
    }

    fn uniform(&mut self, dims: Dims, lo: f32, hi: f32) -> FloatTensor {
        let data = (0..dims.numel()).map(|_| self.rng.random_range(lo..hi)).collect();
        FloatTensor::new(dims, Layout::Nchw, data).expect("sized")
    }

    fn vector(&mut self, prefix: &str, len: usize, lo: f32, hi: f32) -> String {
        let t = self.uniform(Dims::new(len, 1, 1, 1), lo, hi);
        self.initializer(prefix, Initializer::Float(t))
    }

    /// Random ±1 filters `(out_c, in_c, kh, kw)`.
    pub fn binary_filters(&mut self, out_c: usize, in_c: usize, kh: usize, kw: usize) -> FloatTensor {
        let data = (0..out_c * in_c * kh * kw)
            .map(|_| if self.rng.random::<bool>() { 1.0 } else { -1.0 })
            .collect();
        FloatTensor::new(Dims::new(out_c, in_c, kh, kw), Layout::Nchw, data).expect("sized")
    }

    pub fn sign(&mut self, x: &str) -> String {
        self.push("sign", Op::Sign, vec![x.to_string()])
    }

    /// Binary convolution with random ±1 filters packed at the builder's group width.
    pub fn binary_conv(&mut self, x: &str, in_c: usize, out_c: usize, window: Window) -> Result<String> {
        let filters = self.binary_filters(out_c, in_c, window.kh, window.kw);
        let w = self.initializer("bw", Initializer::Packed(PackedFilters::from_float(&filters, self.c2)?));
        Ok(self.push("bconv", Op::BinaryConv(window), vec![x.to_string(), w]))
    }

    /// Float convolution with He-style uniform weights and an optional bias.
    pub fn float_conv(&mut self, x: &str, in_c: usize, out_c: usize, window: Window, bias: bool) -> String {
        let fan_in = (in_c * window.kh * window.kw).max(1) as f32;
        let bound = (6.0 / fan_in).sqrt();
        let w = self.uniform(Dims::new(out_c, in_c, window.kh, window.kw), -bound, bound);
        let mut inputs = vec![x.to_string(), self.initializer("fw", Initializer::Float(w))];
        if bias {
            inputs.push(self.vector("fb", out_c, -0.1, 0.1));
        }
        self.push("conv", Op::FloatConv(window), inputs)
    }

    /// Batch norm whose variance is drawn around `var_scale`, so the output of
    /// a layer with that many-accumulated inputs stays near unit range.
    pub fn batchnorm(&mut self, x: &str, c: usize, var_scale: f32) -> String {
        let inputs = vec![
            x.to_string(),
            self.vector("gamma", c, 0.5, 1.5),
            self.vector("beta", c, -0.1, 0.1),
            self.vector("mean", c, -0.1, 0.1),
            self.vector("var", c, 0.5 * var_scale, 1.5 * var_scale),
        ];
        self.push("bn", Op::BatchNorm { epsilon: 1e-5 }, inputs)
    }

    pub fn relu(&mut self, x: &str) -> String {
        self.push("relu", Op::Relu, vec![x.to_string()])
    }

    pub fn maxpool(&mut self, x: &str, window: Window) -> String {
        self.push("maxpool", Op::MaxPool(window), vec![x.to_string()])
    }

    pub fn avgpool(&mut self, x: &str, window: Window) -> String {
        self.push("avgpool", Op::AvgPool(window), vec![x.to_string()])
    }

    pub fn global_avgpool(&mut self, x: &str) -> String {
        self.push("gap", Op::GlobalAvgPool, vec![x.to_string()])
    }

    pub fn flatten(&mut self, x: &str) -> String {
        self.push("flatten", Op::Flatten, vec![x.to_string()])
    }

    pub fn add(&mut self, a: &str, b: &str) -> String {
        self.push("add", Op::Add, vec![a.to_string(), b.to_string()])
    }

    pub fn fully_connected(&mut self, x: &str, in_f: usize, out_f: usize) -> String {
        let bound = (1.0 / in_f.max(1) as f32).sqrt();
        let w = self.uniform(Dims::new(out_f, in_f, 1, 1), -bound, bound);
        let w = self.initializer("fcw", Initializer::Float(w));
        let b = self.vector("fcb", out_f, -bound, bound);
        self.push("fc", Op::FullyConnected, vec![x.to_string(), w, b])
    }

    pub fn finish(self, output: &str) -> Result<Graph> {
        Graph::new(self.input, self.input_dims, self.nodes, self.initializers, output)
    }
}

/// Stem producing 64 channels at a quarter of the input resolution.
pub type StemFn = fn(&mut GraphBuilder, &str, usize) -> Result<String>;

/// Input stem of the network.
#[derive(Clone, Copy)]
pub enum Stem {
    /// 7×7 stride-2 float convolution, batch norm, ReLU, 3×3 stride-2 max pool.
    Conv7x7,
    /// Caller-supplied stem; receives the input tensor name and channel count.
    Custom(StemFn),
}

impl std::fmt::Debug for Stem {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Stem::Conv7x7 => f.write_str("Conv7x7"),
            Stem::Custom(_) => f.write_str("Custom"),
        }
    }
}

fn conv7x7_stem(b: &mut GraphBuilder, x: &str, in_c: usize) -> Result<String> {
    let y = b.float_conv(x, in_c, 64, Window::square(7, 2, 3), false);
    let y = b.batchnorm(&y, 64, 1.0);
    let y = b.relu(&y);
    Ok(b.maxpool(&y, Window::square(3, 2, 1)))
}

#[derive(Debug, Clone)]
pub struct BiRealConfig {
    pub input_hw: usize,
    pub input_channels: usize,
    pub classes: usize,
    pub c2: usize,
    pub seed: u64,
    pub stem: Stem,
}

impl Default for BiRealConfig {
    fn default() -> Self {
        Self {
            input_hw: 224,
            input_channels: 3,
            classes: 1000,
            c2: DEFAULT_GROUP_BITS,
            seed: 0,
            stem: Stem::Conv7x7,
        }
    }
}

/// One Bi-Real unit: `Sign -> 3x3 BinaryConv -> BN`, plus a real-valued
/// shortcut around it. The shortcut is `AvgPool 2x2 -> 1x1 FloatConv -> BN`
/// when the unit changes resolution or width.
fn bireal_unit(b: &mut GraphBuilder, x: &str, in_c: usize, out_c: usize, stride: usize) -> Result<String> {
    let s = b.sign(x);
    let y = b.binary_conv(&s, in_c, out_c, Window::square(3, stride, 1))?;
    let y = b.batchnorm(&y, out_c, (in_c * 9) as f32);
    let shortcut = if stride != 1 || in_c != out_c {
        let pooled = if stride != 1 {
            b.avgpool(x, Window::square(stride, stride, 0))
        } else {
            x.to_string()
        };
        let z = b.float_conv(&pooled, in_c, out_c, Window::square(1, 1, 0), false);
        b.batchnorm(&z, out_c, 1.0)
    } else {
        x.to_string()
    };
    Ok(b.add(&y, &shortcut))
}

/// ResNet-18 topology with every 3×3 body convolution binary: 16 Bi-Real
/// units in four stages of (64, 128, 256, 512) channels, then global average
/// pooling and a fully connected classifier.
pub fn bireal_net18(config: &BiRealConfig) -> Result<PackedModel> {
    let dims = Dims::new(1, config.input_channels, config.input_hw, config.input_hw);
    let mut b = GraphBuilder::new("image", dims, config.c2, config.seed);
    let stem = match config.stem {
        Stem::Conv7x7 => conv7x7_stem as StemFn,
        Stem::Custom(f) => f,
    };
    let mut x = stem(&mut b, "image", config.input_channels)?;
    let mut c = 64;
    for (stage, &out_c) in [64usize, 128, 256, 512].iter().enumerate() {
        for block in 0..2 {
            let stride = if stage > 0 && block == 0 { 2 } else { 1 };
            x = bireal_unit(&mut b, &x, c, out_c, stride)?;
            x = bireal_unit(&mut b, &x, out_c, out_c, 1)?;
            c = out_c;
        }
    }
    let x = b.global_avgpool(&x);
    let x = b.flatten(&x);
    let y = b.fully_connected(&x, c, config.classes);
    Ok(PackedModel::new(b.finish(&y)?))
}

/// Deterministic pseudo-random input tensor in `[-1, 1)`, NHWC.
pub fn random_input(dims: Dims, seed: u64) -> FloatTensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..dims.numel()).map(|_| rng.random_range(-1.0f32..1.0)).collect();
    FloatTensor::new(dims, Layout::Nhwc, data).expect("sized")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> BiRealConfig {
        BiRealConfig {
            input_hw: 32,
            classes: 10,
            c2: 64,
            seed: 7,
            ..Default::default()
        }
    }

    #[test]
    fn topology_counts() {
        let m = bireal_net18(&small()).unwrap();
        let g = &m.graph;
        assert_eq!(g.count_op("BinaryConv"), 16);
        assert_eq!(g.count_op("Sign"), 16);
        assert_eq!(g.count_op("Add"), 16);
        // Stem conv plus three downsampling shortcuts.
        assert_eq!(g.count_op("FloatConv"), 4);
        assert_eq!(g.count_op("FullyConnected"), 1);
    }

    #[test]
    fn small_net_matches_reference_and_is_deterministic() {
        let cfg = small();
        let m = bireal_net18(&cfg).unwrap();
        assert_eq!(m.to_bytes(), bireal_net18(&cfg).unwrap().to_bytes());
        let x = random_input(m.graph.input_dims(), 1);
        let y = m.execute(&x).unwrap();
        assert_eq!(y.dims(), Dims::new(1, 10, 1, 1));
        assert!(y.data().iter().all(|v| v.is_finite()));
        assert_eq!(y, m.graph.execute_reference(&x).unwrap());
    }

    #[test]
    fn custom_stem() {
        fn stem(b: &mut GraphBuilder, x: &str, in_c: usize) -> Result<String> {
            let y = b.float_conv(x, in_c, 64, Window::square(3, 4, 1), true);
            Ok(b.relu(&y))
        }
        let cfg = BiRealConfig {
            stem: Stem::Custom(stem),
            ..small()
        };
        let m = bireal_net18(&cfg).unwrap();
        let y = m.execute(&random_input(m.graph.input_dims(), 2)).unwrap();
        assert_eq!(y.dims().numel(), 10);
    }
}
