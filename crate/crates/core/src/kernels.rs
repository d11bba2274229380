//! xnor / `cnt` / `addv` arithmetic, BGEMM and binary direct convolution.
//!
//! The word-level primitives mirror the vector instructions they stand in for:
//! [`cnt_word`] produces eight per-byte population counts, [`addv_word`] sums
//! byte lanes into a scalar. A 128-bit register is modelled as two words.
//!
//! BGEMM walks `k` outermost and must reduce with `addv` on every update,
//! because its accumulator matrix holds 32-bit scalars. Direct convolution
//! instead keeps per-byte counts in lane accumulators for a whole dot product
//! and reduces once at the end.

use crate::bitpack::{tail_mask, words_for, PackedBits, WORD_BITS};
use crate::error::{Error, Result};
use crate::layout::{channel_groups, check_group_bits, write_group, Dims, FloatTensor, Layout, PackedTensor};

/// Kernel extent, stride and symmetric padding of a 2-D sliding window.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Window {
    pub kh: usize,
    pub kw: usize,
    pub sh: usize,
    pub sw: usize,
    pub ph: usize,
    pub pw: usize,
}

impl Window {
    pub const fn new(kernel: (usize, usize), stride: (usize, usize), pad: (usize, usize)) -> Self {
        Self {
            kh: kernel.0,
            kw: kernel.1,
            sh: stride.0,
            sw: stride.1,
            ph: pad.0,
            pw: pad.1,
        }
    }

    /// Square kernel, equal stride and padding on both axes.
    pub const fn square(k: usize, stride: usize, pad: usize) -> Self {
        Self::new((k, k), (stride, stride), (pad, pad))
    }

    pub fn validate(&self) -> Result<()> {
        if self.kh == 0 || self.kw == 0 || self.sh == 0 || self.sw == 0 {
            return Err(Error::InvalidParameter(format!(
                "kernel and stride must be >= 1, got {self:?}"
            )));
        }
        Ok(())
    }

    /// Output `(height, width)` for an `h × w` input.
    pub fn output_extent(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        self.validate()?;
        let ph = h + 2 * self.ph;
        let pw = w + 2 * self.pw;
        if ph < self.kh || pw < self.kw {
            return Err(Error::KernelTooLarge);
        }
        Ok(((ph - self.kh) / self.sh + 1, (pw - self.kw) / self.sw + 1))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ConvParams {
    pub window: Window,
    /// Logical input channels.
    pub channels: usize,
}

impl ConvParams {
    pub const fn new(window: Window, channels: usize) -> Self {
        Self { window, channels }
    }

    /// Correct a raw xnor match count into a ±1 dot product for `c2`-bit groups.
    pub fn match_to_dot(&self, matches: u32, c2: usize) -> i32 {
        match_to_dot(matches, self, c2)
    }
}

/// Matrix of packed bit vectors, row-major, `vec_bits` per element.
///
/// Each vector occupies `ceil(vec_bits / 64)` words; bits past `vec_bits`
/// are zero.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct BinMatrix {
    rows: usize,
    cols: usize,
    vec_bits: usize,
    data: Vec<u64>,
}

impl BinMatrix {
    pub fn zeros(rows: usize, cols: usize, vec_bits: usize) -> Result<Self> {
        check_group_bits(vec_bits)?;
        Ok(Self {
            rows,
            cols,
            vec_bits,
            data: vec![0; rows * cols * words_for(vec_bits)],
        })
    }

    pub fn from_words(rows: usize, cols: usize, vec_bits: usize, data: Vec<u64>) -> Result<Self> {
        check_group_bits(vec_bits)?;
        let wpv = words_for(vec_bits);
        if data.len() != rows * cols * wpv {
            return Err(Error::shape(format!(
                "{} words for a {rows}x{cols} matrix of {vec_bits}-bit vectors",
                data.len()
            )));
        }
        let mask = tail_mask(vec_bits);
        if data.chunks(wpv).any(|v| v[wpv - 1] & !mask != 0) {
            return Err(Error::InvalidParameter(
                "bits past vec_bits must be zero".into(),
            ));
        }
        Ok(Self {
            rows,
            cols,
            vec_bits,
            data,
        })
    }

    /// Build from `ceil(vec_bits / 8)` little-endian bytes per vector.
    pub fn from_bytes(rows: usize, cols: usize, vec_bits: usize, bytes: &[u8]) -> Result<Self> {
        check_group_bits(vec_bits)?;
        let bpv = vec_bits / 8;
        if bytes.len() != rows * cols * bpv {
            return Err(Error::shape(format!(
                "{} bytes for a {rows}x{cols} matrix of {vec_bits}-bit vectors",
                bytes.len()
            )));
        }
        let wpv = words_for(vec_bits);
        let mut data = Vec::with_capacity(rows * cols * wpv);
        for v in bytes.chunks(bpv.max(1)).take(rows * cols) {
            for chunk in v.chunks(8) {
                let mut word = [0u8; 8];
                word[..chunk.len()].copy_from_slice(chunk);
                data.push(u64::from_le_bytes(word));
            }
        }
        Self::from_words(rows, cols, vec_bits, data)
    }

    /// `ceil(vec_bits / 8)` little-endian bytes per vector, row-major.
    pub fn to_bytes(&self) -> Vec<u8> {
        let bpv = self.vec_bits / 8;
        let mut out = Vec::with_capacity(self.rows * self.cols * bpv);
        for v in self.data.chunks(self.words_per_vec()) {
            let bytes: Vec<u8> = v.iter().flat_map(|w| w.to_le_bytes()).collect();
            out.extend_from_slice(&bytes[..bpv]);
        }
        out
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn vec_bits(&self) -> usize {
        self.vec_bits
    }

    pub fn words_per_vec(&self) -> usize {
        words_for(self.vec_bits)
    }

    pub fn data(&self) -> &[u64] {
        &self.data
    }

    #[inline]
    pub fn vector(&self, i: usize, k: usize) -> &[u64] {
        let wpv = self.words_per_vec();
        let at = (i * self.cols + k) * wpv;
        &self.data[at..at + wpv]
    }

    pub fn vector_mut(&mut self, i: usize, k: usize) -> &mut [u64] {
        let wpv = self.words_per_vec();
        let at = (i * self.cols + k) * wpv;
        &mut self.data[at..at + wpv]
    }

    /// Copy of columns `range` (used to split the reduction axis).
    pub fn column_slice(&self, range: std::ops::Range<usize>) -> BinMatrix {
        let mut data = Vec::with_capacity(self.rows * range.len() * self.words_per_vec());
        for i in 0..self.rows {
            for k in range.clone() {
                data.extend_from_slice(self.vector(i, k));
            }
        }
        BinMatrix {
            rows: self.rows,
            cols: range.len(),
            vec_bits: self.vec_bits,
            data,
        }
    }

    /// Copy of rows `range`.
    pub fn row_slice(&self, range: std::ops::Range<usize>) -> BinMatrix {
        let wpv = self.words_per_vec();
        let data = self.data[range.start * self.cols * wpv..range.end * self.cols * wpv].to_vec();
        BinMatrix {
            rows: range.len(),
            cols: self.cols,
            vec_bits: self.vec_bits,
            data,
        }
    }
}

/// xnor match counts, `rows × cols`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct MatchMatrix {
    rows: usize,
    cols: usize,
    data: Vec<u32>,
}

impl MatchMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<u32>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape(format!(
                "{} entries for a {rows}x{cols} match matrix",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[u32] {
        &self.data
    }

    pub fn get(&self, i: usize, j: usize) -> u32 {
        self.data[i * self.cols + j]
    }
}

const EVEN_BYTES: u64 = 0x00FF_00FF_00FF_00FF;

/// Adds a byte lane can absorb before it may overflow (31 · 8 ≤ 255).
const BYTE_LANE_ADDS: usize = 31;

/// Vectors a 16-bit lane accumulator can absorb (8191 · 8 ≤ 65535).
pub const REDUCTION_CAPACITY: usize = 8191;

/// Per-byte population count of a word (`cnt`).
#[inline(always)]
pub fn cnt_word(x: u64) -> u64 {
    let x = x - ((x >> 1) & 0x5555_5555_5555_5555);
    let x = (x & 0x3333_3333_3333_3333) + ((x >> 2) & 0x3333_3333_3333_3333);
    (x + (x >> 4)) & 0x0F0F_0F0F_0F0F_0F0F
}

/// Sum of the eight byte lanes of a word (`addv`).
#[inline(always)]
pub fn addv_word(bytes: u64) -> u32 {
    let pairs = (bytes & EVEN_BYTES) + ((bytes >> 8) & EVEN_BYTES);
    (pairs.wrapping_mul(0x0001_0001_0001_0001) >> 48) as u32
}

#[inline(always)]
fn sum_u16_lanes(x: u64) -> u32 {
    (x & 0xFFFF) as u32 + ((x >> 16) & 0xFFFF) as u32 + ((x >> 32) & 0xFFFF) as u32 + (x >> 48) as u32
}

/// Bitwise xnor of two equal-width bit vectors. Padding stays zero.
pub fn xnor_vec(a: &PackedBits, b: &PackedBits) -> Result<PackedBits> {
    if a.len() != b.len() {
        return Err(Error::WidthMismatch(a.len(), b.len()));
    }
    let mut words: Vec<u64> = a.words().iter().zip(b.words()).map(|(x, y)| !(x ^ y)).collect();
    if let Some(last) = words.last_mut() {
        *last &= tail_mask(a.len());
    }
    PackedBits::from_words(words, a.len())
}

/// Per-byte population counts, `ceil(len / 8)` bytes.
pub fn cnt_bytes(v: &PackedBits) -> Vec<u8> {
    let mut out: Vec<u8> = v.words().iter().flat_map(|&w| cnt_word(w).to_le_bytes()).collect();
    out.truncate(v.len().div_ceil(8));
    out
}

/// Sum of all bytes.
pub fn addv(v: &[u8]) -> u32 {
    v.iter().map(|&b| b as u32).sum()
}

fn check_bgemm(a: &BinMatrix, b: &BinMatrix) -> Result<()> {
    if a.cols != b.rows {
        return Err(Error::shape(format!(
            "bgemm: A is {}x{}, B is {}x{}",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    if a.vec_bits != b.vec_bits {
        return Err(Error::WidthMismatch(a.vec_bits, b.vec_bits));
    }
    Ok(())
}

/// Binary GEMM: `C[i][j] = Σ_k popcount(xnor(A[i,k], B[k,j]))`.
///
/// Computed as a sum of rank-1 updates over `k`, each update reduced with
/// `addv` into the 32-bit accumulator before it is added.
pub fn bgemm(a: &BinMatrix, b: &BinMatrix) -> Result<MatchMatrix> {
    check_bgemm(a, b)?;
    let (m, n) = (a.rows, b.cols);
    let mask = tail_mask(a.vec_bits);
    let wpv = a.words_per_vec();
    let mut c = vec![0u32; m * n];
    for k in 0..a.cols {
        for i in 0..m {
            let av = a.vector(i, k);
            let row = &mut c[i * n..(i + 1) * n];
            for (j, acc) in row.iter_mut().enumerate() {
                let bv = b.vector(k, j);
                // One addv per 128-bit register (two words).
                let mut sum = 0;
                let mut bytes = 0;
                for w in 0..wpv {
                    let mut v = !(av[w] ^ bv[w]);
                    if w + 1 == wpv {
                        v &= mask;
                    }
                    bytes += cnt_word(v);
                    if w % 2 == 1 || w + 1 == wpv {
                        sum += addv_word(bytes);
                        bytes = 0;
                    }
                }
                *acc += sum;
            }
        }
    }
    MatchMatrix::new(m, n, c)
}

/// BGEMM with the `addv` reduction removed.
///
/// Benchmark-only: the accumulator absorbs raw byte-lane counts, so its
/// values are meaningless beyond the output shape.
pub fn bgemm_no_addv(a: &BinMatrix, b: &BinMatrix) -> Result<MatchMatrix> {
    check_bgemm(a, b)?;
    let (m, n) = (a.rows, b.cols);
    let mask = tail_mask(a.vec_bits);
    let wpv = a.words_per_vec();
    let mut c = vec![0u32; m * n];
    for k in 0..a.cols {
        for i in 0..m {
            let av = a.vector(i, k);
            let row = &mut c[i * n..(i + 1) * n];
            for (j, acc) in row.iter_mut().enumerate() {
                let bv = b.vector(k, j);
                let mut bytes = 0u64;
                for w in 0..wpv {
                    let mut v = !(av[w] ^ bv[w]);
                    if w + 1 == wpv {
                        v &= mask;
                    }
                    bytes = bytes.wrapping_add(cnt_word(v));
                }
                *acc = acc.wrapping_add(bytes as u32);
            }
        }
    }
    MatchMatrix::new(m, n, c)
}

fn check_conv_input(input: &PackedTensor, p: &ConvParams) -> Result<(usize, usize)> {
    if p.channels != input.dims().c {
        return Err(Error::shape(format!(
            "conv expects {} input channels, tensor has {}",
            p.channels,
            input.dims().c
        )));
    }
    let d = input.dims();
    p.window.output_extent(d.h, d.w)
}

/// Unfold a single packed image into a `K × N` matrix of channel-group
/// vectors, `K = kh·kw·C1` (kh-major, then kw, then group) and `N = oh·ow`.
/// Positions outside the image contribute all-zero vectors.
pub fn im2col_packed(input: &PackedTensor, p: &ConvParams) -> Result<BinMatrix> {
    let d = input.dims();
    if d.n != 1 {
        return Err(Error::shape(format!("im2col expects one image, got n = {}", d.n)));
    }
    let (oh, ow) = check_conv_input(input, p)?;
    let w = p.window;
    let c1 = input.groups();
    let k_len = w.kh * w.kw * c1;
    let n_len = oh * ow;
    let mut out = BinMatrix::zeros(k_len, n_len, input.group_bits())?;
    for oy in 0..oh {
        for ox in 0..ow {
            let j = oy * ow + ox;
            for ky in 0..w.kh {
                for kx in 0..w.kw {
                    let Some((iy, ix)) = tap(oy, ox, ky, kx, &w, d) else {
                        continue;
                    };
                    for g in 0..c1 {
                        let k = (ky * w.kw + kx) * c1 + g;
                        out.vector_mut(k, j)
                            .copy_from_slice(input.group_at(input.group_offset(0, g, iy, ix)));
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Input coordinate read by kernel tap `(ky, kx)` of output `(oy, ox)`,
/// or `None` when it falls in the padding.
#[inline]
fn tap(oy: usize, ox: usize, ky: usize, kx: usize, w: &Window, d: Dims) -> Option<(usize, usize)> {
    let iy = (oy * w.sh + ky).checked_sub(w.ph)?;
    let ix = (ox * w.sw + kx).checked_sub(w.pw)?;
    (iy < d.h && ix < d.w).then_some((iy, ix))
}

/// Signed ±1 dot product from a raw match count.
///
/// Channel-pad bits are zero in both operands, so each of the
/// `kh·kw·(C1·C2 − c)` pad positions adds exactly one match.
pub fn match_to_dot(matches: u32, p: &ConvParams, c2: usize) -> i32 {
    let taps = (p.window.kh * p.window.kw) as i64;
    let c = p.channels as i64;
    let padded = (channel_groups(p.channels, c2) * c2) as i64;
    let pad_matches = taps * (padded - c);
    let valid = taps * c;
    (2 * (matches as i64 - pad_matches) - valid) as i32
}

const CHANNEL_BLOCK: usize = 4;
const PAD_TAP: u32 = u32::MAX;

/// Lane accumulators for one block of output channels.
struct LaneAccumulator {
    wpv: usize,
    bytes: Vec<u64>,
    even: Vec<u64>,
    odd: Vec<u64>,
    pending: usize,
}

impl LaneAccumulator {
    fn new(wpv: usize) -> Self {
        let len = CHANNEL_BLOCK * wpv;
        Self {
            wpv,
            bytes: vec![0; len],
            even: vec![0; len],
            odd: vec![0; len],
            pending: 0,
        }
    }

    fn reset(&mut self) {
        self.bytes.fill(0);
        self.even.fill(0);
        self.odd.fill(0);
        self.pending = 0;
    }

    /// Widen byte lanes into 16-bit lanes.
    fn flush(&mut self) {
        for ((b, e), o) in self.bytes.iter_mut().zip(&mut self.even).zip(&mut self.odd) {
            *e += *b & EVEN_BYTES;
            *o += (*b >> 8) & EVEN_BYTES;
            *b = 0;
        }
        self.pending = 0;
    }

    /// Close one accumulated vector step.
    #[inline]
    fn step(&mut self) {
        self.pending += 1;
        if self.pending == BYTE_LANE_ADDS {
            self.flush();
        }
    }

    /// Final reduction for block slot `mi`.
    fn reduce(&self, mi: usize) -> u32 {
        let lanes = mi * self.wpv..(mi + 1) * self.wpv;
        self.even[lanes.clone()]
            .iter()
            .chain(&self.odd[lanes])
            .map(|&x| sum_u16_lanes(x))
            .sum()
    }
}

fn check_direct_conv(input: &PackedTensor, weights: &BinMatrix, p: &ConvParams) -> Result<(usize, usize)> {
    let (oh, ow) = check_conv_input(input, p)?;
    if weights.vec_bits != input.group_bits() {
        return Err(Error::WidthMismatch(weights.vec_bits, input.group_bits()));
    }
    let k_len = p.window.kh * p.window.kw * input.groups();
    if weights.cols != k_len {
        return Err(Error::shape(format!(
            "weights have {} vectors per filter, window needs {}",
            weights.cols, k_len
        )));
    }
    if k_len > REDUCTION_CAPACITY {
        return Err(Error::ReductionOverflow {
            vectors: k_len,
            capacity: REDUCTION_CAPACITY,
        });
    }
    Ok((oh, ow))
}

/// Raw match counts of image `n`, written position-major (`out[j * M + m]`).
fn direct_conv_image(
    input: &PackedTensor,
    n: usize,
    weights: &BinMatrix,
    p: &ConvParams,
    (oh, ow): (usize, usize),
    out: &mut [u32],
) {
    let d = input.dims();
    let w = p.window;
    let c1 = input.groups();
    let wpv = weights.words_per_vec();
    let mask = tail_mask(weights.vec_bits);
    let k_len = weights.cols;

    // Group offset (or PAD_TAP) for every (position, k).
    let mut taps = Vec::with_capacity(oh * ow * k_len);
    for oy in 0..oh {
        for ox in 0..ow {
            for ky in 0..w.kh {
                for kx in 0..w.kw {
                    match tap(oy, ox, ky, kx, &w, d) {
                        Some((iy, ix)) => {
                            taps.extend((0..c1).map(|g| input.group_offset(n, g, iy, ix) as u32))
                        }
                        None => taps.extend(std::iter::repeat_n(PAD_TAP, c1)),
                    }
                }
            }
        }
    }

    match wpv {
        1 => direct_conv_fixed::<1>(input, weights, &taps, mask, out),
        2 => direct_conv_fixed::<2>(input, weights, &taps, mask, out),
        _ => direct_conv_any(input, weights, &taps, mask, out),
    }
}

fn direct_conv_any(input: &PackedTensor, weights: &BinMatrix, taps: &[u32], mask: u64, out: &mut [u32]) {
    let wpv = weights.words_per_vec();
    let (k_len, m_len) = (weights.cols, weights.rows);
    let positions = out.len() / m_len.max(1);
    let zero = vec![0u64; wpv];
    let mut acc = LaneAccumulator::new(wpv);
    for m0 in (0..m_len).step_by(CHANNEL_BLOCK) {
        let block = CHANNEL_BLOCK.min(m_len - m0);
        for (j, pos_taps) in taps.chunks(k_len.max(1)).enumerate().take(positions) {
            acc.reset();
            for (k, &t) in pos_taps.iter().enumerate() {
                let iv = if t == PAD_TAP { &zero[..] } else { input.group_at(t as usize) };
                for mi in 0..block {
                    let wv = weights.vector(m0 + mi, k);
                    let lanes = &mut acc.bytes[mi * wpv..(mi + 1) * wpv];
                    for (l, lane) in lanes.iter_mut().enumerate() {
                        let mut x = !(iv[l] ^ wv[l]);
                        if l + 1 == wpv {
                            x &= mask;
                        }
                        *lane += cnt_word(x);
                    }
                }
                acc.step();
            }
            acc.flush();
            for mi in 0..block {
                out[j * m_len + m0 + mi] = acc.reduce(mi);
            }
        }
    }
}

/// Same schedule as [`direct_conv_any`] with `W`-word vectors held in
/// fixed-size lane arrays.
fn direct_conv_fixed<const W: usize>(input: &PackedTensor, weights: &BinMatrix, taps: &[u32], mask: u64, out: &mut [u32]) {
    let (k_len, m_len) = (weights.cols, weights.rows);
    let positions = out.len() / m_len.max(1);
    let mut masks = [u64::MAX; W];
    masks[W - 1] = mask;
    let zero = [0u64; W];
    let vector = |m: usize, k: usize| -> &[u64; W] { weights.vector(m, k).try_into().expect("W words") };
    for m0 in (0..m_len).step_by(CHANNEL_BLOCK) {
        let block = CHANNEL_BLOCK.min(m_len - m0);
        for (j, pos_taps) in taps.chunks(k_len.max(1)).enumerate().take(positions) {
            let mut bytes = [[0u64; W]; CHANNEL_BLOCK];
            let mut even = [[0u64; W]; CHANNEL_BLOCK];
            let mut odd = [[0u64; W]; CHANNEL_BLOCK];
            let mut pending = 0;
            for (k, &t) in pos_taps.iter().enumerate() {
                let iv: &[u64; W] = if t == PAD_TAP {
                    &zero
                } else {
                    input.group_at(t as usize).try_into().expect("W words")
                };
                for (mi, lanes) in bytes.iter_mut().take(block).enumerate() {
                    let wv = vector(m0 + mi, k);
                    for l in 0..W {
                        lanes[l] += cnt_word(!(iv[l] ^ wv[l]) & masks[l]);
                    }
                }
                pending += 1;
                if pending == BYTE_LANE_ADDS {
                    widen(&mut bytes, &mut even, &mut odd);
                    pending = 0;
                }
            }
            widen(&mut bytes, &mut even, &mut odd);
            for mi in 0..block {
                out[j * m_len + m0 + mi] = even[mi].iter().chain(&odd[mi]).map(|&x| sum_u16_lanes(x)).sum();
            }
        }
    }
}

#[inline(always)]
fn widen<const W: usize>(bytes: &mut [[u64; W]; CHANNEL_BLOCK], even: &mut [[u64; W]; CHANNEL_BLOCK], odd: &mut [[u64; W]; CHANNEL_BLOCK]) {
    for mi in 0..CHANNEL_BLOCK {
        for l in 0..W {
            let b = bytes[mi][l];
            even[mi][l] += b & EVEN_BYTES;
            odd[mi][l] += (b >> 8) & EVEN_BYTES;
            bytes[mi][l] = 0;
        }
    }
}

/// Raw match counts of direct convolution on a single image, `M × N`.
pub fn direct_conv_matches(input: &PackedTensor, weights: &BinMatrix, p: &ConvParams) -> Result<MatchMatrix> {
    let d = input.dims();
    if d.n != 1 {
        return Err(Error::shape(format!("expected one image, got n = {}", d.n)));
    }
    let (oh, ow) = check_direct_conv(input, weights, p)?;
    let m_len = weights.rows;
    let mut nhwc = vec![0u32; oh * ow * m_len];
    direct_conv_image(input, 0, weights, p, (oh, ow), &mut nhwc);
    let n_len = oh * ow;
    let mut data = vec![0u32; m_len * n_len];
    for j in 0..n_len {
        for m in 0..m_len {
            data[m * n_len + j] = nhwc[j * m_len + m];
        }
    }
    MatchMatrix::new(m_len, n_len, data)
}

/// Binary direct convolution, returning ±1 dot products as an NHWC tensor
/// with `weights.rows()` output channels.
///
/// Row `i` of `weights` is filter `i` in [`im2col_packed`] column order.
pub fn binary_direct_conv(input: &PackedTensor, weights: &BinMatrix, p: &ConvParams) -> Result<FloatTensor> {
    let (oh, ow) = check_direct_conv(input, weights, p)?;
    let d = input.dims();
    let m_len = weights.rows;
    let per_image = oh * ow * m_len;
    let mut matches = vec![0u32; d.n * per_image];
    for n in 0..d.n {
        direct_conv_image(input, n, weights, p, (oh, ow), &mut matches[n * per_image..(n + 1) * per_image]);
    }
    let c2 = input.group_bits();
    let data = matches.into_iter().map(|m| match_to_dot(m, p, c2) as f32).collect();
    FloatTensor::new(Dims::new(d.n, m_len, oh, ow), Layout::Nhwc, data)
}

/// Binarize float filters `(M, c, kh, kw)` into an `M × kh·kw·C1` matrix of
/// `c2`-bit vectors in [`im2col_packed`] order.
pub fn pack_filters(filters: &FloatTensor, c2: usize) -> Result<BinMatrix> {
    check_group_bits(c2)?;
    let fd = filters.dims();
    let c1 = channel_groups(fd.c, c2);
    let taps = fd.h * fd.w;
    let mut out = BinMatrix::zeros(fd.n, taps * c1, c2)?;
    let mut channels = vec![0f32; fd.c];
    for m in 0..fd.n {
        for ky in 0..fd.h {
            for kx in 0..fd.w {
                for (c, v) in channels.iter_mut().enumerate() {
                    *v = filters.get(m, c, ky, kx);
                }
                let bits = crate::bitpack::pack_signbits(&channels);
                for g in 0..c1 {
                    let k = (ky * fd.w + kx) * c1 + g;
                    write_group(&bits, c2, g, out.vector_mut(m, k));
                }
            }
        }
    }
    Ok(out)
}

/// Inverse of [`pack_filters`]: ±1 filters `(M, c, kh, kw)` in NCHW order.
pub fn unpack_filters(m: &BinMatrix, channels: usize, kh: usize, kw: usize) -> Result<FloatTensor> {
    let c2 = m.vec_bits;
    let c1 = channel_groups(channels, c2);
    if m.cols != kh * kw * c1 {
        return Err(Error::shape(format!(
            "{} vectors per row cannot hold {kh}x{kw} taps of {channels} channels",
            m.cols
        )));
    }
    let dims = Dims::new(m.rows, channels, kh, kw);
    Ok(FloatTensor::from_fn(dims, Layout::Nchw, |i, c, ky, kx| {
        let k = (ky * kw + kx) * c1 + c / c2;
        let bit = c % c2;
        if (m.vector(i, k)[bit / WORD_BITS] >> (bit % WORD_BITS)) & 1 == 1 {
            -1.0
        } else {
            1.0
        }
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layout::pack_to_nc1hwc2;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn bits_of(words: &[u64], vec_bits: usize) -> Vec<bool> {
        (0..vec_bits).map(|b| (words[b / 64] >> (b % 64)) & 1 == 1).collect()
    }

    /// Per-bit triple loop.
    fn bgemm_oracle(a: &BinMatrix, b: &BinMatrix) -> Vec<u32> {
        let mut c = vec![0; a.rows() * b.cols()];
        for i in 0..a.rows() {
            for j in 0..b.cols() {
                for k in 0..a.cols() {
                    let x = bits_of(a.vector(i, k), a.vec_bits());
                    let y = bits_of(b.vector(k, j), b.vec_bits());
                    c[i * b.cols() + j] += x.iter().zip(&y).filter(|(p, q)| p == q).count() as u32;
                }
            }
        }
        c
    }

    fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, vec_bits: usize) -> BinMatrix {
        let bytes: Vec<u8> = (0..rows * cols * vec_bits / 8).map(|_| rng.random()).collect();
        BinMatrix::from_bytes(rows, cols, vec_bits, &bytes).unwrap()
    }

    #[test]
    fn xnor_examples() {
        let a = PackedBits::from_words(vec![0b1100], 4).unwrap();
        let b = PackedBits::from_words(vec![0b1010], 4).unwrap();
        assert_eq!(xnor_vec(&a, &b).unwrap().words(), &[0b1001]);
        assert_eq!(xnor_vec(&a, &a).unwrap().words(), &[0b1111]);
        let not_a = PackedBits::from_words(vec![0b0011], 4).unwrap();
        assert_eq!(xnor_vec(&a, &not_a).unwrap().words(), &[0]);
        let short = PackedBits::from_words(vec![0], 3).unwrap();
        assert!(matches!(xnor_vec(&a, &short), Err(Error::WidthMismatch(4, 3))));
    }

    #[test]
    fn xnor_truth_table() {
        for x in 0u64..16 {
            for y in 0u64..16 {
                let a = PackedBits::from_words(vec![x], 4).unwrap();
                let b = PackedBits::from_words(vec![y], 4).unwrap();
                let mut expect = 0;
                for bit in 0..4 {
                    if (x >> bit) & 1 == (y >> bit) & 1 {
                        expect |= 1 << bit;
                    }
                }
                assert_eq!(xnor_vec(&a, &b).unwrap().words(), &[expect]);
            }
        }
    }

    #[test]
    fn cnt_and_addv() {
        let v = PackedBits::from_words(vec![0x0F_00_FF], 24).unwrap();
        assert_eq!(cnt_bytes(&v), vec![8, 0, 4]);
        assert_eq!(cnt_bytes(&PackedBits::from_words(vec![0, 0], 128).unwrap()), vec![0; 16]);
        assert_eq!(addv(&[3, 1, 4, 1]), 9);
        assert_eq!(addv(&[8; 16]), 128);

        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..100 {
            let words = vec![rng.random::<u64>(), rng.random::<u64>()];
            let v = PackedBits::from_words(words.clone(), 128).unwrap();
            let counts = cnt_bytes(&v);
            let bytes: Vec<u8> = words.iter().flat_map(|w| w.to_le_bytes()).collect();
            for (c, b) in counts.iter().zip(&bytes) {
                assert_eq!(*c as u32, (0..8).filter(|i| b >> i & 1 == 1).count() as u32);
            }
            let raw: Vec<u8> = (0..16).map(|_| rng.random()).collect();
            assert_eq!(addv(&raw), raw.iter().fold(0u32, |s, &b| s + b as u32));
            assert_eq!(addv(&counts), v.count_ones());
        }
    }

    #[test]
    fn addv_word_matches_byte_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..1000 {
            let x: u64 = rng.random();
            assert_eq!(addv_word(x), x.to_le_bytes().iter().map(|&b| b as u32).sum::<u32>());
            assert_eq!(addv_word(cnt_word(x)), x.count_ones());
        }
    }

    #[test]
    fn bgemm_examples() {
        let a = BinMatrix::from_bytes(1, 1, 8, &[0xF0]).unwrap();
        assert_eq!(bgemm(&a, &a).unwrap().data(), &[8]);

        let a = BinMatrix::from_bytes(1, 2, 8, &[0xF0, 0xAA]).unwrap();
        let b = BinMatrix::from_bytes(2, 1, 8, &[0xF0, 0x55]).unwrap();
        assert_eq!(bgemm_oracle(&a, &b), vec![8]);
        assert_eq!(bgemm(&a, &b).unwrap().data(), &[8]);
    }

    #[test]
    fn bgemm_matches_bit_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for &vec_bits in &[8usize, 16, 64, 72, 128, 192] {
            for _ in 0..8 {
                let (m, k, n) = (rng.random_range(1..=4), rng.random_range(1..=4), rng.random_range(1..=4));
                let a = random_matrix(&mut rng, m, k, vec_bits);
                let b = random_matrix(&mut rng, k, n, vec_bits);
                let c = bgemm(&a, &b).unwrap();
                assert_eq!(c.data(), bgemm_oracle(&a, &b).as_slice());
                assert!(c.data().iter().all(|&x| x as usize <= k * vec_bits));
            }
        }
    }

    #[test]
    fn bgemm_split_k_sums() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = random_matrix(&mut rng, 3, 10, 128);
        let b = random_matrix(&mut rng, 10, 5, 128);
        let whole = bgemm(&a, &b).unwrap();
        for split in [1, 4, 7] {
            let lo = bgemm(&a.column_slice(0..split), &b.row_slice(0..split)).unwrap();
            let hi = bgemm(&a.column_slice(split..10), &b.row_slice(split..10)).unwrap();
            let sum: Vec<u32> = lo.data().iter().zip(hi.data()).map(|(x, y)| x + y).collect();
            assert_eq!(sum, whole.data());
        }
    }

    #[test]
    fn bgemm_entry_depends_only_on_its_row_and_column() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let a = random_matrix(&mut rng, 3, 4, 64);
        let b = random_matrix(&mut rng, 4, 3, 64);
        let base = bgemm(&a, &b).unwrap();
        let mut a2 = a.clone();
        a2.vector_mut(2, 1)[0] ^= u64::MAX;
        let mut b2 = b.clone();
        b2.vector_mut(3, 2)[0] ^= 0xF0F0;
        let c = bgemm(&a2, &b2).unwrap();
        for i in 0..2 {
            for j in 0..2 {
                assert_eq!(c.get(i, j), base.get(i, j));
            }
        }
    }

    #[test]
    fn bgemm_shape_errors() {
        let a = BinMatrix::zeros(2, 3, 64).unwrap();
        let b = BinMatrix::zeros(2, 4, 64).unwrap();
        assert!(matches!(bgemm(&a, &b), Err(Error::ShapeMismatch(_))));
        assert!(bgemm_no_addv(&a, &b).is_err());
        let b = BinMatrix::zeros(3, 4, 128).unwrap();
        assert!(matches!(bgemm(&a, &b), Err(Error::WidthMismatch(64, 128))));
    }

    #[test]
    fn bgemm_no_addv_shape() {
        let a = BinMatrix::zeros(2, 3, 128).unwrap();
        let b = BinMatrix::zeros(3, 4, 128).unwrap();
        let c = bgemm_no_addv(&a, &b).unwrap();
        assert_eq!((c.rows(), c.cols()), (2, 4));
    }

    fn pm_tensor(rng: &mut ChaCha8Rng, dims: Dims) -> FloatTensor {
        FloatTensor::from_fn(dims, Layout::Nhwc, |_, _, _, _| if rng.random() { -1.0 } else { 1.0 })
    }

    /// ±1 dot products with +1 spatial padding, evaluated directly.
    fn conv_oracle(input: &FloatTensor, filters: &FloatTensor, w: &Window) -> Vec<i32> {
        let d = input.dims();
        let fd = filters.dims();
        let (oh, ow) = w.output_extent(d.h, d.w).unwrap();
        let mut out = vec![];
        for oy in 0..oh {
            for ox in 0..ow {
                for m in 0..fd.n {
                    let mut s = 0i32;
                    for ky in 0..w.kh {
                        for kx in 0..w.kw {
                            let iy = (oy * w.sh + ky) as isize - w.ph as isize;
                            let ix = (ox * w.sw + kx) as isize - w.pw as isize;
                            for c in 0..d.c {
                                let x = if iy < 0 || ix < 0 || iy >= d.h as isize || ix >= d.w as isize {
                                    1
                                } else {
                                    input.get(0, c, iy as usize, ix as usize) as i32
                                };
                                s += x * filters.get(m, c, ky, kx) as i32;
                            }
                        }
                    }
                    out.push(s);
                }
            }
        }
        out
    }

    #[test]
    fn direct_conv_one_by_one() {
        let p = ConvParams::new(Window::square(1, 1, 0), 8);
        let input = PackedTensor::zeros(Dims::new(1, 8, 1, 1), 8).unwrap();
        let w = BinMatrix::from_bytes(1, 1, 8, &[0x00]).unwrap();
        assert_eq!(direct_conv_matches(&input, &w, &p).unwrap().data(), &[8]);
        assert_eq!(binary_direct_conv(&input, &w, &p).unwrap().data(), &[8.0]);
        let w = BinMatrix::from_bytes(1, 1, 8, &[0xFF]).unwrap();
        assert_eq!(direct_conv_matches(&input, &w, &p).unwrap().data(), &[0]);
        assert_eq!(binary_direct_conv(&input, &w, &p).unwrap().data(), &[-8.0]);
    }

    #[test]
    fn match_to_dot_examples() {
        let p = ConvParams::new(Window::square(1, 1, 0), 8);
        assert_eq!(match_to_dot(5, &p, 8), 2);
        assert_eq!(match_to_dot(8, &p, 8), 8);
        let p6 = ConvParams::new(Window::square(1, 1, 0), 6);
        assert_eq!(match_to_dot(8, &p6, 8), 6);
        let p3 = ConvParams::new(Window::square(3, 1, 1), 130);
        let k_valid = 9 * 130;
        let pad = 9 * (256 - 130);
        assert_eq!(match_to_dot((k_valid + pad) as u32, &p3, 128), k_valid);
    }

    #[test]
    fn six_channel_pad_correction() {
        let p = ConvParams::new(Window::square(1, 1, 0), 6);
        let input = pack_to_nc1hwc2(&FloatTensor::filled(Dims::new(1, 6, 1, 1), Layout::Nhwc, 1.0), 8).unwrap();
        let w = pack_filters(&FloatTensor::filled(Dims::new(1, 6, 1, 1), Layout::Nchw, 1.0), 8).unwrap();
        assert_eq!(direct_conv_matches(&input, &w, &p).unwrap().data(), &[8]);
        assert_eq!(binary_direct_conv(&input, &w, &p).unwrap().data(), &[6.0]);
    }

    #[test]
    fn im2col_identity_and_padding() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let t = pm_tensor(&mut rng, Dims::new(1, 20, 3, 3));
        let packed = pack_to_nc1hwc2(&t, 16).unwrap();

        let p1 = ConvParams::new(Window::square(1, 1, 0), 20);
        let m = im2col_packed(&packed, &p1).unwrap();
        assert_eq!((m.rows(), m.cols()), (2, 9));
        for g in 0..2 {
            for j in 0..9 {
                assert_eq!(m.vector(g, j), packed.group_at(packed.group_offset(0, g, j / 3, j % 3)));
            }
        }

        let p3 = ConvParams::new(Window::square(3, 1, 0), 20);
        let m = im2col_packed(&packed, &p3).unwrap();
        assert_eq!((m.rows(), m.cols()), (18, 1));
        for ky in 0..3 {
            for kx in 0..3 {
                for g in 0..2 {
                    let k = (ky * 3 + kx) * 2 + g;
                    assert_eq!(m.vector(k, 0), packed.group_at(packed.group_offset(0, g, ky, kx)));
                }
            }
        }

        let pad = ConvParams::new(Window::square(3, 1, 1), 20);
        let m = im2col_packed(&packed, &pad).unwrap();
        assert_eq!(m.cols(), 9);
        let corner_pad_taps = (0..9)
            .filter(|&tap| (0..2).all(|g| m.vector(tap * 2 + g, 0).iter().all(|&w| w == 0)))
            .count();
        // Random data could leave a real tap all-zero; the five padded ones always are.
        assert!(corner_pad_taps >= 5);
        for tap in [0, 1, 2, 3, 6] {
            assert!(m.vector(tap * 2, 0).iter().all(|&w| w == 0));
        }
    }

    #[test]
    fn im2col_errors() {
        let packed = PackedTensor::zeros(Dims::new(1, 8, 2, 2), 8).unwrap();
        let p = ConvParams::new(Window::square(3, 1, 0), 8);
        assert!(matches!(im2col_packed(&packed, &p), Err(Error::KernelTooLarge)));
        let batch = PackedTensor::zeros(Dims::new(2, 8, 3, 3), 8).unwrap();
        assert!(im2col_packed(&batch, &ConvParams::new(Window::square(1, 1, 0), 8)).is_err());
    }

    #[test]
    fn direct_conv_matches_oracle_and_bgemm() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for &(c, c2) in &[(8usize, 8usize), (16, 8), (130, 128), (70, 32), (5, 64), (200, 192), (300, 256)] {
            for &(k, s, pad) in &[(3usize, 1usize, 0usize), (3, 1, 1), (3, 2, 1), (1, 1, 0), (1, 2, 0)] {
                let (h, w) = (rng.random_range(3..=7), rng.random_range(3..=7));
                let m = rng.random_range(1..=6);
                let input = pm_tensor(&mut rng, Dims::new(1, c, h, w));
                let filters = FloatTensor::from_fn(Dims::new(m, c, k, k), Layout::Nchw, |_, _, _, _| {
                    if rng.random() { -1.0 } else { 1.0 }
                });
                let p = ConvParams::new(Window::square(k, s, pad), c);
                let packed = pack_to_nc1hwc2(&input, c2).unwrap();
                let wm = pack_filters(&filters, c2).unwrap();
                let direct = binary_direct_conv(&packed, &wm, &p).unwrap();
                let expect = conv_oracle(&input, &filters, &p.window);
                let got: Vec<i32> = direct.data().iter().map(|&v| v as i32).collect();
                assert_eq!(got, expect, "c {c} c2 {c2} k {k} s {s} pad {pad}");

                let via_gemm = bgemm(&wm, &im2col_packed(&packed, &p).unwrap()).unwrap();
                let raw = direct_conv_matches(&packed, &wm, &p).unwrap();
                assert_eq!(raw, via_gemm);
            }
        }
    }

    #[test]
    fn direct_conv_batches_images() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let input = pm_tensor(&mut rng, Dims::new(3, 12, 4, 4));
        let filters = FloatTensor::from_fn(Dims::new(5, 12, 3, 3), Layout::Nchw, |_, _, _, _| {
            if rng.random() { -1.0 } else { 1.0 }
        });
        let p = ConvParams::new(Window::square(3, 1, 1), 12);
        let wm = pack_filters(&filters, 16).unwrap();
        let all = binary_direct_conv(&pack_to_nc1hwc2(&input, 16).unwrap(), &wm, &p).unwrap();
        let per = 4 * 4 * 5;
        for n in 0..3 {
            let one = FloatTensor::from_fn(Dims::new(1, 12, 4, 4), Layout::Nhwc, |_, c, h, w| input.get(n, c, h, w));
            let single = binary_direct_conv(&pack_to_nc1hwc2(&one, 16).unwrap(), &wm, &p).unwrap();
            assert_eq!(&all.data()[n * per..(n + 1) * per], single.data());
        }
    }

    #[test]
    fn reduction_overflow_is_reported() {
        // 1×1 window over 8192 groups of 8 bits.
        let c = 8 * 8192;
        let input = PackedTensor::zeros(Dims::new(1, c, 1, 1), 8).unwrap();
        let w = BinMatrix::zeros(1, 8192, 8).unwrap();
        let p = ConvParams::new(Window::square(1, 1, 0), c);
        assert!(matches!(
            binary_direct_conv(&input, &w, &p),
            Err(Error::ReductionOverflow { vectors: 8192, capacity: 8191 })
        ));
    }

    #[test]
    fn reduction_at_capacity_is_exact() {
        // All-match worst case: every 16-bit lane reaches 8191 · 8.
        let c = 64 * 8191;
        let input = PackedTensor::zeros(Dims::new(1, c, 1, 1), 64).unwrap();
        let w = BinMatrix::zeros(1, 8191, 64).unwrap();
        let p = ConvParams::new(Window::square(1, 1, 0), c);
        assert_eq!(direct_conv_matches(&input, &w, &p).unwrap().data(), &[(c) as u32]);
    }

    #[test]
    fn filters_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for &(c, c2) in &[(8usize, 8usize), (130, 128), (33, 16)] {
            let f = FloatTensor::from_fn(Dims::new(3, c, 3, 3), Layout::Nchw, |_, _, _, _| {
                if rng.random() { -1.0 } else { 1.0 }
            });
            let m = pack_filters(&f, c2).unwrap();
            assert_eq!(unpack_filters(&m, c, 3, 3).unwrap(), f);
            let bytes = m.to_bytes();
            assert_eq!(bytes.len(), 3 * 9 * c.div_ceil(c2) * c2 / 8);
            assert_eq!(BinMatrix::from_bytes(3, m.cols(), c2, &bytes).unwrap(), m);
        }
    }
}
