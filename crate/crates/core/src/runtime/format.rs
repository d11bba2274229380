//! The `DABN` packed model file.
//!
//! Little-endian throughout:
//!
//! ```text
//! header   "DABN" | version u32 | graph_len u32 | weight_len u64
//! graph    node_count u32
//!          per node: op u8 | name u32 | output u32 | n_in u8 | in u32* | n_attr u8 | attr*
//!          attr: key u8 then i32 x4 (kernel, stride, pad) or f32 (epsilon)
//!          input name u32 | input dims u32 x4 | output name u32
//!          strings: count u32 | (len u32 | utf8)*
//! weights  count u32
//!          per initializer: name u32 | kind u8 | rank u8 | extents u32* |
//!                           [c2 u32 if packed] | payload_len u64 | payload
//! trailer  crc32 of everything before it
//! ```
//!
//! Name indices point into the string table, which lists names in first-use
//! order. Float payloads are NCHW. Packed payloads hold `c2 / 8` bytes per
//! filter vector. Encoding is canonical, so decode then encode reproduces the
//! input bytes.

use std::collections::{BTreeMap, HashMap};

use super::{Graph, Initializer, Node, Op, PackedFilters, PackedModel};
use crate::error::{Error, FormatError, Result};
use crate::kernels::{BinMatrix, Window};
use crate::layout::{channel_groups, Dims, FloatTensor, Layout};

pub const MAGIC: [u8; 4] = *b"DABN";
pub const FORMAT_VERSION: u32 = 1;

const HEADER_LEN: usize = 4 + 4 + 4 + 8;
const TRAILER_LEN: usize = 4;

const ATTR_KERNEL: u8 = 1;
const ATTR_STRIDE: u8 = 2;
const ATTR_PAD: u8 = 3;
const ATTR_EPSILON: u8 = 4;

const KIND_F32: u8 = 0;
const KIND_PACKED: u8 = 1;

fn op_code(op: &Op) -> u8 {
    match op {
        Op::Sign => 0,
        Op::BinaryConv(_) => 1,
        Op::FloatConv(_) => 2,
        Op::BatchNorm { .. } => 3,
        Op::Relu => 4,
        Op::MaxPool(_) => 5,
        Op::AvgPool(_) => 6,
        Op::GlobalAvgPool => 7,
        Op::Add => 8,
        Op::FullyConnected => 9,
        Op::Flatten => 10,
        Op::ThresholdSign => 11,
    }
}

#[derive(Default)]
struct Strings {
    index: HashMap<String, u32>,
    table: Vec<String>,
}

impl Strings {
    fn id(&mut self, s: &str) -> u32 {
        if let Some(&i) = self.index.get(s) {
            return i;
        }
        let i = self.table.len() as u32;
        self.index.insert(s.to_string(), i);
        self.table.push(s.to_string());
        i
    }
}

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn i32(&mut self, v: i32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f32(&mut self, v: f32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn len_u32(&mut self, v: usize) {
        self.u32(u32::try_from(v).expect("count fits in u32"));
    }
}

fn window_attrs(w: &Window) -> [(u8, [i32; 4]); 3] {
    let i = |v: usize| i32::try_from(v).expect("window extent fits in i32");
    [
        (ATTR_KERNEL, [i(w.kh), i(w.kw), 0, 0]),
        (ATTR_STRIDE, [i(w.sh), i(w.sw), 0, 0]),
        (ATTR_PAD, [i(w.ph), i(w.pw), i(w.ph), i(w.pw)]),
    ]
}

pub(super) fn encode(model: &PackedModel) -> Vec<u8> {
    let g = &model.graph;
    let mut strings = Strings::default();

    let mut graph = Writer(Vec::new());
    graph.len_u32(g.nodes.len());
    for node in &g.nodes {
        graph.u8(op_code(&node.op));
        graph.u32(strings.id(&node.name));
        graph.u32(strings.id(&node.output));
        graph.u8(u8::try_from(node.inputs.len()).expect("few inputs"));
        for input in &node.inputs {
            graph.u32(strings.id(input));
        }
        match &node.op {
            Op::BinaryConv(w) | Op::FloatConv(w) | Op::MaxPool(w) | Op::AvgPool(w) => {
                let attrs = window_attrs(w);
                graph.u8(attrs.len() as u8);
                for (key, vals) in attrs {
                    graph.u8(key);
                    vals.iter().for_each(|&v| graph.i32(v));
                }
            }
            Op::BatchNorm { epsilon } => {
                graph.u8(1);
                graph.u8(ATTR_EPSILON);
                graph.f32(*epsilon);
            }
            _ => graph.u8(0),
        }
    }
    graph.u32(strings.id(&g.input_name));
    for d in g.input_dims.to_array() {
        graph.len_u32(d);
    }
    graph.u32(strings.id(&g.output));
    let init_ids: Vec<u32> = g.initializers.keys().map(|k| strings.id(k)).collect();
    graph.len_u32(strings.table.len());
    for s in &strings.table {
        graph.len_u32(s.len());
        graph.0.extend_from_slice(s.as_bytes());
    }

    let mut weights = Writer(Vec::new());
    weights.len_u32(g.initializers.len());
    for (id, init) in init_ids.into_iter().zip(g.initializers.values()) {
        weights.u32(id);
        match init {
            Initializer::Float(t) => {
                weights.u8(KIND_F32);
                weights.u8(4);
                t.dims().to_array().iter().for_each(|&d| weights.len_u32(d));
                let t = t.convert_layout(Layout::Nchw);
                weights.u64(t.data().len() as u64 * 4);
                t.data().iter().for_each(|&v| weights.f32(v));
            }
            Initializer::Packed(p) => {
                weights.u8(KIND_PACKED);
                weights.u8(4);
                p.dims().to_array().iter().for_each(|&d| weights.len_u32(d));
                weights.len_u32(p.group_bits());
                let bytes = p.matrix.to_bytes();
                weights.u64(bytes.len() as u64);
                weights.0.extend_from_slice(&bytes);
            }
        }
    }

    let mut out = Writer(Vec::with_capacity(HEADER_LEN + graph.0.len() + weights.0.len() + TRAILER_LEN));
    out.0.extend_from_slice(&MAGIC);
    out.u32(model.version);
    out.len_u32(graph.0.len());
    out.u64(weights.0.len() as u64);
    out.0.extend_from_slice(&graph.0);
    out.0.extend_from_slice(&weights.0);
    let crc = crc32fast::hash(&out.0);
    out.u32(crc);
    out.0
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    /// Offset of `bytes[0]` in the file, for error reporting.
    base: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or(FormatError::Truncated {
            needed: self.base + self.pos.saturating_add(n),
            available: self.base + self.bytes.len(),
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("exact length"))
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array()?))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array()?))
    }
    fn i32(&mut self) -> Result<i32> {
        Ok(i32::from_le_bytes(self.array()?))
    }
    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.array()?))
    }
    fn usize(&mut self) -> Result<usize> {
        Ok(self.u32()? as usize)
    }
    fn finish(&self, section: &str) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(malformed(format!("{} trailing bytes in {section} section", self.bytes.len() - self.pos)));
        }
        Ok(())
    }
}

fn malformed(msg: impl Into<String>) -> Error {
    FormatError::Malformed(msg.into()).into()
}

fn truncated(needed: usize, available: usize) -> Error {
    FormatError::Truncated { needed, available }.into()
}

/// Checks run in order: magic, version, length, checksum, then structure.
pub(super) fn decode(bytes: &[u8]) -> Result<PackedModel> {
    if bytes.len() < 4 {
        return Err(truncated(4, bytes.len()));
    }
    let magic: [u8; 4] = bytes[..4].try_into().expect("4 bytes");
    if magic != MAGIC {
        return Err(FormatError::BadMagic(magic).into());
    }
    let mut header = Reader { bytes, pos: 4, base: 0 };
    let version = header.u32()?;
    if version != FORMAT_VERSION {
        return Err(FormatError::UnsupportedVersion(version).into());
    }
    let graph_len = header.usize()?;
    let weight_len = usize::try_from(header.u64()?).map_err(|_| truncated(usize::MAX, bytes.len()))?;
    let total = HEADER_LEN
        .checked_add(graph_len)
        .and_then(|t| t.checked_add(weight_len))
        .and_then(|t| t.checked_add(TRAILER_LEN))
        .ok_or_else(|| truncated(usize::MAX, bytes.len()))?;
    if bytes.len() < total {
        return Err(truncated(total, bytes.len()));
    }
    if bytes.len() > total {
        return Err(malformed(format!("{} bytes past the checksum", bytes.len() - total)));
    }
    let body = &bytes[..total - TRAILER_LEN];
    let stored = u32::from_le_bytes(bytes[total - TRAILER_LEN..].try_into().expect("4 bytes"));
    let computed = crc32fast::hash(body);
    if stored != computed {
        return Err(FormatError::ChecksumMismatch { stored, computed }.into());
    }

    let graph_end = HEADER_LEN + graph_len;
    let mut gr = Reader {
        bytes: &bytes[HEADER_LEN..graph_end],
        pos: 0,
        base: HEADER_LEN,
    };
    let mut wr = Reader {
        bytes: &bytes[graph_end..total - TRAILER_LEN],
        pos: 0,
        base: graph_end,
    };

    struct RawNode {
        op: u8,
        name: u32,
        output: u32,
        inputs: Vec<u32>,
        attrs: Vec<(u8, [i32; 4], f32)>,
    }
    let node_count = gr.usize()?;
    let mut raw = Vec::new();
    for _ in 0..node_count {
        let op = gr.u8()?;
        let name = gr.u32()?;
        let output = gr.u32()?;
        let n_in = gr.u8()?;
        let inputs = (0..n_in).map(|_| gr.u32()).collect::<Result<Vec<_>>>()?;
        let n_attr = gr.u8()?;
        let mut attrs = Vec::new();
        for _ in 0..n_attr {
            let key = gr.u8()?;
            match key {
                ATTR_KERNEL | ATTR_STRIDE | ATTR_PAD => {
                    let v = [gr.i32()?, gr.i32()?, gr.i32()?, gr.i32()?];
                    attrs.push((key, v, 0.0));
                }
                ATTR_EPSILON => attrs.push((key, [0; 4], gr.f32()?)),
                k => return Err(malformed(format!("unknown attribute key {k}"))),
            }
        }
        raw.push(RawNode {
            op,
            name,
            output,
            inputs,
            attrs,
        });
    }
    let input_id = gr.u32()?;
    let input_dims = Dims::new(gr.usize()?, gr.usize()?, gr.usize()?, gr.usize()?);
    let output_id = gr.u32()?;
    let string_count = gr.usize()?;
    let mut table = Vec::new();
    for _ in 0..string_count {
        let len = gr.usize()?;
        let s = std::str::from_utf8(gr.take(len)?).map_err(|e| malformed(format!("string table: {e}")))?;
        table.push(s.to_string());
    }
    gr.finish("graph")?;

    let name = |id: u32| -> Result<String> {
        table
            .get(id as usize)
            .cloned()
            .ok_or_else(|| malformed(format!("string index {id} out of range ({} strings)", table.len())))
    };

    let mut nodes = Vec::with_capacity(raw.len());
    for r in raw {
        let node_name = name(r.name)?;
        let op = decode_op(r.op, &r.attrs).map_err(|e| e.at_node(&node_name))?;
        nodes.push(Node {
            name: node_name,
            op,
            inputs: r.inputs.into_iter().map(name).collect::<Result<_>>()?,
            output: name(r.output)?,
        });
    }

    let init_count = wr.usize()?;
    let mut initializers = BTreeMap::new();
    for _ in 0..init_count {
        let init_name = name(wr.u32()?)?;
        let kind = wr.u8()?;
        let rank = wr.u8()?;
        if rank != 4 {
            return Err(malformed(format!("initializer '{init_name}' has rank {rank}, expected 4")));
        }
        let dims = Dims::new(wr.usize()?, wr.usize()?, wr.usize()?, wr.usize()?);
        let init = match kind {
            KIND_F32 => {
                let len = wr.u64()?;
                if len != dims.numel() as u64 * 4 {
                    return Err(malformed(format!("initializer '{init_name}': {len} payload bytes for dims {dims}")));
                }
                let data = wr
                    .take(len as usize)?
                    .chunks_exact(4)
                    .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
                    .collect();
                Initializer::Float(FloatTensor::new(dims, Layout::Nchw, data)?)
            }
            KIND_PACKED => {
                let c2 = wr.usize()?;
                let len = wr.u64()?;
                if c2 == 0 || c2 % 8 != 0 {
                    return Err(malformed(format!("initializer '{init_name}': invalid group width {c2}")));
                }
                let cols = dims.h * dims.w * channel_groups(dims.c, c2);
                let expect = dims.n * cols * c2 / 8;
                if len != expect as u64 {
                    return Err(malformed(format!("initializer '{init_name}': {len} payload bytes, expected {expect}")));
                }
                let matrix = BinMatrix::from_bytes(dims.n, cols, c2, wr.take(expect)?)
                    .map_err(|e| malformed(format!("initializer '{init_name}': {e}")))?;
                let filters = PackedFilters {
                    channels: dims.c,
                    kh: dims.h,
                    kw: dims.w,
                    matrix,
                };
                // Channel pad bits must be zero for the stored form to be canonical.
                if PackedFilters::from_float(&filters.to_float(), c2)? != filters {
                    return Err(malformed(format!("initializer '{init_name}': nonzero channel padding bits")));
                }
                Initializer::Packed(filters)
            }
            k => return Err(malformed(format!("initializer '{init_name}': unknown kind {k}"))),
        };
        if initializers.insert(init_name.clone(), init).is_some() {
            return Err(malformed(format!("duplicate initializer '{init_name}'")));
        }
    }
    wr.finish("weight")?;

    let graph = Graph::new(name(input_id)?, input_dims, nodes, initializers, name(output_id)?)?;
    let model = PackedModel { version, graph };
    if encode(&model) != bytes {
        return Err(malformed("encoding is not canonical"));
    }
    Ok(model)
}

fn decode_op(code: u8, attrs: &[(u8, [i32; 4], f32)]) -> Result<Op> {
    let window = || -> Result<Window> {
        let find = |key: u8| {
            attrs
                .iter()
                .find(|a| a.0 == key)
                .map(|a| a.1)
                .ok_or_else(|| malformed(format!("missing window attribute {key}")))
        };
        let as_usize = |v: i32| usize::try_from(v).map_err(|_| malformed(format!("negative window value {v}")));
        let (k, s, p) = (find(ATTR_KERNEL)?, find(ATTR_STRIDE)?, find(ATTR_PAD)?);
        if p[0] != p[2] || p[1] != p[3] {
            return Err(malformed("asymmetric padding"));
        }
        let w = Window::new(
            (as_usize(k[0])?, as_usize(k[1])?),
            (as_usize(s[0])?, as_usize(s[1])?),
            (as_usize(p[0])?, as_usize(p[1])?),
        );
        w.validate()?;
        Ok(w)
    };
    Ok(match code {
        0 => Op::Sign,
        1 => Op::BinaryConv(window()?),
        2 => Op::FloatConv(window()?),
        3 => Op::BatchNorm {
            epsilon: attrs
                .iter()
                .find(|a| a.0 == ATTR_EPSILON)
                .map(|a| a.2)
                .ok_or_else(|| malformed("missing epsilon"))?,
        },
        4 => Op::Relu,
        5 => Op::MaxPool(window()?),
        6 => Op::AvgPool(window()?),
        7 => Op::GlobalAvgPool,
        8 => Op::Add,
        9 => Op::FullyConnected,
        10 => Op::Flatten,
        11 => Op::ThresholdSign,
        c => return Err(malformed(format!("unknown op code {c}"))),
    })
}
