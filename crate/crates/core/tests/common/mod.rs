//! Shared fixtures for integration tests.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

use bnn::{Dims, FloatTensor, Layout};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn pm1(rng: &mut ChaCha8Rng, n: usize) -> Vec<f32> {
    (0..n).map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 }).collect()
}

pub fn uniform(rng: &mut ChaCha8Rng, n: usize, lo: f32, hi: f32) -> Vec<f32> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

pub fn random_tensor(rng: &mut ChaCha8Rng, dims: Dims, layout: Layout) -> FloatTensor {
    let data = uniform(rng, dims.numel(), -1.0, 1.0);
    FloatTensor::new(dims, layout, data).unwrap()
}

/// Random ±1 filters `(m, c, k, k)` in NCHW.
pub fn random_filters(rng: &mut ChaCha8Rng, m: usize, c: usize, k: usize) -> FloatTensor {
    let data = pm1(rng, m * c * k * k);
    FloatTensor::new(Dims::new(m, c, k, k), Layout::Nchw, data).unwrap()
}

/// Builds random interchange documents while tracking the activation shape.
pub struct GraphGen {
    rng: ChaCha8Rng,
    nodes: Vec<Value>,
    inits: Vec<Value>,
    counter: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl GraphGen {
    fn fresh(&mut self, prefix: &str) -> String {
        self.counter += 1;
        format!("{prefix}{}", self.counter)
    }

    fn init(&mut self, dims: &[usize], values: Vec<f32>) -> String {
        let name = self.fresh("init");
        self.inits.push(json!({"name": name, "dims": dims, "values": values}));
        name
    }

    fn node(&mut self, op: &str, inputs: Vec<String>, attributes: Value) -> String {
        let name = self.fresh(&op.to_lowercase());
        let out = format!("{name}_y");
        self.nodes.push(json!({
            "name": name, "op_type": op, "inputs": inputs, "outputs": [out], "attributes": attributes
        }));
        out
    }

    fn sign(&mut self, x: &str) -> String {
        self.node("Sign", vec![x.into()], json!({}))
    }

    fn conv(&mut self, x: &str, c_out: usize, k: usize, s: usize, p: usize, binary: bool) -> String {
        let n = c_out * self.c * k * k;
        let values = if binary { pm1(&mut self.rng, n) } else { uniform(&mut self.rng, n, -0.5, 0.5) };
        let w = self.init(&[c_out, self.c, k, k], values);
        let mut inputs = vec![x.to_string(), w];
        if self.rng.random::<bool>() {
            let b = uniform(&mut self.rng, c_out, -2.0, 2.0);
            inputs.push(self.init(&[c_out], b));
        }
        let y = self.node(
            "Conv",
            inputs,
            json!({"kernel_shape": [k, k], "strides": [s, s], "pads": [p, p, p, p]}),
        );
        self.c = c_out;
        self.h = (self.h + 2 * p - k) / s + 1;
        self.w = (self.w + 2 * p - k) / s + 1;
        y
    }

    fn bn(&mut self, x: &str) -> String {
        let c = self.c;
        let gamma: Vec<f32> = (0..c)
            .map(|_| {
                let g = self.rng.random_range(0.2f32..2.0);
                if self.rng.random::<bool>() { g } else { -g }
            })
            .collect();
        let inputs = vec![
            x.to_string(),
            self.init(&[c], gamma),
            {
                let v = uniform(&mut self.rng, c, -1.0, 1.0);
                self.init(&[c], v)
            },
            {
                let v = uniform(&mut self.rng, c, -3.0, 3.0);
                self.init(&[c], v)
            },
            {
                let v = uniform(&mut self.rng, c, 0.1, 10.0);
                self.init(&[c], v)
            },
        ];
        self.node("BatchNormalization", inputs, json!({"epsilon": 1e-5}))
    }

    fn shape_fits(&self, k: usize, s: usize, p: usize) -> bool {
        self.h + 2 * p >= k && self.w + 2 * p >= k && (s == 1 || (self.h >= 4 && self.w >= 4))
    }

    fn kernel(&mut self) -> (usize, usize, usize) {
        let k = if self.rng.random::<bool>() { 3 } else { 1 };
        let s = if self.rng.random_bool(0.3) { 2 } else { 1 };
        let p = if k == 3 && self.rng.random::<bool>() { 1 } else { 0 };
        if self.shape_fits(k, s, p) { (k, s, p) } else { (1, 1, 0) }
    }
}

/// A random graph mixing Sign, Conv (binary and float), BatchNormalization,
/// Relu, pools, residual Add and a Gemm head. Returns the document and its
/// input dims.
pub fn random_interchange(seed: u64) -> (Value, Dims) {
    let mut rng = rng(seed);
    let dims = Dims::new(
        rng.random_range(1..=2),
        rng.random_range(1..=24),
        rng.random_range(5..=12),
        rng.random_range(5..=12),
    );
    let mut g = GraphGen {
        rng,
        nodes: vec![],
        inits: vec![],
        counter: 0,
        c: dims.c,
        h: dims.h,
        w: dims.w,
    };
    let mut x = "input".to_string();
    let steps = g.rng.random_range(3..=7);
    for _ in 0..steps {
        match g.rng.random_range(0..7) {
            0 => {
                let (k, s, p) = g.kernel();
                let c_out = g.rng.random_range(1..=40);
                let sx = g.sign(&x);
                x = g.conv(&sx, c_out, k, s, p, true);
            }
            1 => {
                let (k, s, p) = g.kernel();
                let c_out = g.rng.random_range(1..=24);
                x = g.conv(&x.clone(), c_out, k, s, p, false);
            }
            2 => {
                x = g.bn(&x);
                if g.rng.random::<bool>() {
                    x = g.node("Relu", vec![x], json!({}));
                }
            }
            3 => {
                if g.h >= 2 && g.w >= 2 && g.rng.random::<bool>() {
                    x = g.node("MaxPool", vec![x], json!({"kernel_shape": [2, 2], "strides": [2, 2]}));
                    g.h /= 2;
                    g.w /= 2;
                } else {
                    x = g.node(
                        "AveragePool",
                        vec![x],
                        json!({"kernel_shape": [3, 3], "strides": [1, 1], "pads": [1, 1, 1, 1], "count_include_pad": 0}),
                    );
                }
            }
            4 => {
                let sx = g.sign(&x);
                let c = g.c;
                let y = g.conv(&sx, c, 3, 1, 1, true);
                let y = g.bn(&y);
                x = g.node("Add", vec![x, y], json!({}));
            }
            5 => {
                let b = g.bn(&x);
                let sb = g.sign(&b);
                let (k, s, p) = g.kernel();
                let c_out = g.rng.random_range(1..=40);
                x = g.conv(&sb, c_out, k, s, p, true);
            }
            _ => {
                let (k, s, p) = g.kernel();
                let c_out = g.rng.random_range(1..=16);
                let sx = g.sign(&x);
                x = g.conv(&sx, c_out, k, s, p, false);
            }
        }
    }
    let features = if g.rng.random::<bool>() {
        x = g.node("GlobalAveragePool", vec![x], json!({}));
        g.c
    } else {
        g.c * g.h * g.w
    };
    x = g.node("Flatten", vec![x], json!({}));
    let out = g.rng.random_range(1..=10);
    let trans_b = g.rng.random::<bool>();
    let wdims = if trans_b { [out, features] } else { [features, out] };
    let wv = uniform(&mut g.rng, out * features, -0.3, 0.3);
    let w = g.init(&wdims, wv);
    let bv = uniform(&mut g.rng, out, -0.3, 0.3);
    let b = g.init(&[out], bv);
    x = g.node("Gemm", vec![x, w, b], json!({"transB": trans_b as i64}));

    let doc = json!({
        "inputs": [{"name": "input", "dims": dims.to_array()}],
        "initializers": g.inits,
        "nodes": g.nodes,
        "output": x,
    });
    (doc, dims)
}
