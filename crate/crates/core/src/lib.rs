//! Binary neural network inference on packed bit tensors.
//!
//! The crate is organised bottom-up:
//!
//! - [`bitpack`] turns `f32` slices into sign-bit vectors, either one element
//!   at a time or by gathering many sign bits per step.
//! - [`layout`] holds [`FloatTensor`] and the grouped-channel
//!   [`PackedTensor`] (N, C1, H, W, C2 bits) plus the index algebra between them.
//! - [`kernels`] implements the xnor / `cnt` / `addv` primitives, BGEMM over
//!   [`BinMatrix`] operands and binary direct convolution with a deferred
//!   byte-lane reduction.
//! - [`floatops`] provides the full-precision operators around binary layers
//!   and the float oracle every binary path is checked against.
//! - [`runtime`] executes operator graphs and reads/writes the `DABN` model file.
//! - [`convert`] turns a JSON graph with ONNX operator semantics into a packed
//!   model, detecting `Sign -> Conv(±1 weights)` pairs.
//! - [`bench`] and [`cli`] drive the benchmark suites and the `bnn` binary.
//!
//! ```
//! use bnn::bitpack::{pack_naive, pack_signbits};
//!
//! let values = [-1.5f32, 0.25, -0.0, 3.0, -2.0, 0.0, -7.0, 1.0];
//! let packed = pack_signbits(&values);
//! assert_eq!(packed, pack_naive(&values));
//! assert_eq!(packed.words()[0], 0x55);
//! ```

pub mod bench;
pub mod bitpack;
pub mod cli;
pub mod convert;
mod error;
pub mod floatops;
pub mod kernels;
pub mod layout;
pub mod models;
pub mod runtime;

pub use error::{Error, FormatError, Result};

pub use bitpack::PackedBits;
pub use kernels::{BinMatrix, ConvParams, MatchMatrix, Window};
pub use layout::{Dims, FloatTensor, Layout, PackedTensor};
pub use runtime::{Graph, Initializer, Node, Op, PackedFilters, PackedModel};

