//! Float tensors in NCHW / NHWC and the packed NC1HWC2 layout.
//!
//! NC1HWC2 splits the channel axis into `C1 = ceil(C / C2)` groups of `C2`
//! bits, so every spatial position owns one contiguous bit vector per group.
//! A sliding 3×3 window then reads whole groups, and two horizontally
//! adjacent windows share six of their nine group addresses.

use std::borrow::Cow;
use std::fmt;

use crate::bitpack::{pack_signbits_into, words_for, PackedBits, WORD_BITS};
use crate::error::{Error, Result};

/// Logical 4-D extents.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Dims {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Dims {
    pub const fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Self { n, c, h, w }
    }

    pub fn numel(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    pub fn to_array(self) -> [usize; 4] {
        [self.n, self.c, self.h, self.w]
    }
}

impl From<[usize; 4]> for Dims {
    fn from(d: [usize; 4]) -> Self {
        Self::new(d[0], d[1], d[2], d[3])
    }
}

impl fmt::Display for Dims {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {}, {})", self.n, self.c, self.h, self.w)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Layout {
    Nchw,
    Nhwc,
}

/// Dense `f32` tensor tagged with its storage order.
#[derive(Debug, Clone, PartialEq)]
pub struct FloatTensor {
    dims: Dims,
    layout: Layout,
    data: Vec<f32>,
}

impl FloatTensor {
    pub fn new(dims: Dims, layout: Layout, data: Vec<f32>) -> Result<Self> {
        if data.len() != dims.numel() {
            return Err(Error::shape(format!(
                "{} values for dims {} ({} expected)",
                data.len(),
                dims,
                dims.numel()
            )));
        }
        Ok(Self { dims, layout, data })
    }

    pub fn filled(dims: Dims, layout: Layout, value: f32) -> Self {
        Self {
            dims,
            layout,
            data: vec![value; dims.numel()],
        }
    }

    pub fn zeros(dims: Dims, layout: Layout) -> Self {
        Self::filled(dims, layout, 0.0)
    }

    /// Build a tensor from a function of the logical `(n, c, h, w)` index.
    pub fn from_fn(
        dims: Dims,
        layout: Layout,
        mut f: impl FnMut(usize, usize, usize, usize) -> f32,
    ) -> Self {
        let mut t = Self::zeros(dims, layout);
        for n in 0..dims.n {
            for c in 0..dims.c {
                for h in 0..dims.h {
                    for w in 0..dims.w {
                        let i = t.offset(n, c, h, w);
                        t.data[i] = f(n, c, h, w);
                    }
                }
            }
        }
        t
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn layout(&self) -> Layout {
        self.layout
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    /// Storage offset of a logical index. Unchecked beyond debug assertions.
    #[inline]
    pub fn offset(&self, n: usize, c: usize, h: usize, w: usize) -> usize {
        let d = self.dims;
        debug_assert!(n < d.n && c < d.c && h < d.h && w < d.w);
        match self.layout {
            Layout::Nchw => ((n * d.c + c) * d.h + h) * d.w + w,
            Layout::Nhwc => ((n * d.h + h) * d.w + w) * d.c + c,
        }
    }

    pub fn get(&self, n: usize, c: usize, h: usize, w: usize) -> f32 {
        self.data[self.offset(n, c, h, w)]
    }

    /// Same tensor with its dims replaced; storage untouched.
    pub fn reshaped(self, dims: Dims) -> Result<Self> {
        Self::new(dims, self.layout, self.data)
    }

    /// Permute storage into `target` order.
    pub fn convert_layout(&self, target: Layout) -> FloatTensor {
        if target == self.layout {
            return self.clone();
        }
        let d = self.dims;
        let mut out = Vec::with_capacity(self.data.len());
        match target {
            Layout::Nhwc => {
                for n in 0..d.n {
                    for h in 0..d.h {
                        for w in 0..d.w {
                            for c in 0..d.c {
                                out.push(self.get(n, c, h, w));
                            }
                        }
                    }
                }
            }
            Layout::Nchw => {
                for n in 0..d.n {
                    for c in 0..d.c {
                        for h in 0..d.h {
                            for w in 0..d.w {
                                out.push(self.get(n, c, h, w));
                            }
                        }
                    }
                }
            }
        }
        FloatTensor {
            dims: d,
            layout: target,
            data: out,
        }
    }

    /// Borrow when already NHWC, otherwise convert.
    pub fn as_nhwc(&self) -> Cow<'_, FloatTensor> {
        match self.layout {
            Layout::Nhwc => Cow::Borrowed(self),
            Layout::Nchw => Cow::Owned(self.convert_layout(Layout::Nhwc)),
        }
    }
}

pub const DEFAULT_GROUP_BITS: usize = 128;

pub(crate) fn check_group_bits(c2: usize) -> Result<()> {
    if c2 == 0 || !c2.is_multiple_of(8) {
        return Err(Error::InvalidGroupWidth(c2));
    }
    Ok(())
}

/// Number of channel groups for `c` channels.
pub fn channel_groups(c: usize, c2: usize) -> usize {
    c.div_ceil(c2)
}

/// Binary tensor in N, C1, H, W, C2-bit order.
///
/// Each group occupies `ceil(C2 / 64)` words. Within a group bit `j` is
/// channel `c1 * C2 + j`; channel padding and the unused tail of the last
/// word are zero.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct PackedTensor {
    dims: Dims,
    group_bits: usize,
    data: Vec<u64>,
}

impl PackedTensor {
    /// All-zero (logical +1) tensor.
    pub fn zeros(dims: Dims, group_bits: usize) -> Result<Self> {
        check_group_bits(group_bits)?;
        let groups = dims.n * channel_groups(dims.c, group_bits) * dims.h * dims.w;
        Ok(Self {
            dims,
            group_bits,
            data: vec![0; groups * words_for(group_bits)],
        })
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    /// C2.
    pub fn group_bits(&self) -> usize {
        self.group_bits
    }

    /// C1.
    pub fn groups(&self) -> usize {
        channel_groups(self.dims.c, self.group_bits)
    }

    pub fn words_per_group(&self) -> usize {
        words_for(self.group_bits)
    }

    pub fn data(&self) -> &[u64] {
        &self.data
    }

    /// Words of the group at a linear group offset.
    #[inline]
    pub fn group_at(&self, group_offset: usize) -> &[u64] {
        let wpg = self.words_per_group();
        &self.data[group_offset * wpg..(group_offset + 1) * wpg]
    }

    #[inline]
    pub(crate) fn group_offset(&self, n: usize, g: usize, h: usize, w: usize) -> usize {
        ((n * self.groups() + g) * self.dims.h + h) * self.dims.w + w
    }

    pub fn bit(&self, n: usize, c: usize, h: usize, w: usize) -> Result<bool> {
        let (group, bit) = index_nc1hwc2(self.dims, self.group_bits, n, c, h, w)?;
        let word = self.group_at(group)[bit / WORD_BITS];
        Ok((word >> (bit % WORD_BITS)) & 1 == 1)
    }
}

/// `(group_offset, bit_offset)` of a logical element in NC1HWC2 storage.
pub fn index_nc1hwc2(
    dims: Dims,
    c2: usize,
    n: usize,
    c: usize,
    h: usize,
    w: usize,
) -> Result<(usize, usize)> {
    check_group_bits(c2)?;
    if n >= dims.n || c >= dims.c || h >= dims.h || w >= dims.w {
        return Err(Error::IndexOutOfBounds);
    }
    let c1 = channel_groups(dims.c, c2);
    let group = ((n * c1 + c / c2) * dims.h + h) * dims.w + w;
    Ok((group, c % c2))
}

/// Binarize and pack a float tensor into NC1HWC2 with `c2`-bit groups.
pub fn pack_to_nc1hwc2(t: &FloatTensor, c2: usize) -> Result<PackedTensor> {
    let mut out = PackedTensor::zeros(t.dims(), c2)?;
    let d = t.dims();
    if d.numel() == 0 {
        return Ok(out);
    }
    let c1 = out.groups();
    let wpg = out.words_per_group();

    let src = t.as_nhwc();
    let mut words = Vec::with_capacity(words_for(d.c));
    for n in 0..d.n {
        for h in 0..d.h {
            for w in 0..d.w {
                let start = ((n * d.h + h) * d.w + w) * d.c;
                let channels = &src.data()[start..start + d.c];
                words.clear();
                pack_signbits_into(channels, &mut words);
                let bits = PackedBits::from_words(std::mem::take(&mut words), d.c)
                    .expect("packing yields canonical bits");
                for g in 0..c1 {
                    let base = out.group_offset(n, g, h, w) * wpg;
                    write_group(&bits, c2, g, &mut out.data[base..base + wpg]);
                }
                words = bits.into_words();
            }
        }
    }
    Ok(out)
}

/// Copy channel group `g` of a packed channel vector into `dst`
/// (`ceil(c2 / 64)` words). Channels past the vector length read as 0.
pub(crate) fn write_group(bits: &PackedBits, c2: usize, g: usize, dst: &mut [u64]) {
    if c2.is_multiple_of(WORD_BITS) {
        let first = g * dst.len();
        let avail = bits.words().len().saturating_sub(first).min(dst.len());
        dst[..avail].copy_from_slice(&bits.words()[first..first + avail]);
        dst[avail..].fill(0);
    } else {
        for (k, word) in dst.iter_mut().enumerate() {
            let offset = k * WORD_BITS;
            let count = (c2 - offset).min(WORD_BITS);
            *word = bits.bits_at(g * c2 + offset, count);
        }
    }
}

/// Expand a packed tensor back to an NHWC tensor of ±1 values.
pub fn unpack_from_nc1hwc2(p: &PackedTensor) -> FloatTensor {
    let d = p.dims();
    FloatTensor::from_fn(d, Layout::Nhwc, |n, c, h, w| {
        if p.bit(n, c, h, w).expect("in range") {
            -1.0
        } else {
            1.0
        }
    })
}

/// Group offsets read by a `kh × kw` window whose top-left corner is
/// `(top, left)`, for channel group `g` of image `n`. The window must lie
/// inside the image.
#[allow(clippy::too_many_arguments)]
pub fn window_group_offsets(
    dims: Dims,
    c2: usize,
    n: usize,
    g: usize,
    top: usize,
    left: usize,
    kh: usize,
    kw: usize,
) -> Result<Vec<usize>> {
    check_group_bits(c2)?;
    if n >= dims.n
        || g >= channel_groups(dims.c, c2)
        || top + kh > dims.h
        || left + kw > dims.w
    {
        return Err(Error::IndexOutOfBounds);
    }
    let c1 = channel_groups(dims.c, c2);
    let mut out = Vec::with_capacity(kh * kw);
    for y in top..top + kh {
        for x in left..left + kw {
            out.push(((n * c1 + g) * dims.h + y) * dims.w + x);
        }
    }
    Ok(out)
}
