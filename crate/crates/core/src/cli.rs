//! The `bnn` command line: `convert`, `run` and `bench`.
//!
//! Exit codes: 0 on success, 1 on validation errors (bad graph, wrong dims,
//! unknown suite, bad flags), 2 on I/O errors (unreadable or unwritable
//! files, truncated input). Diagnostics go to the error stream; data goes to
//! files or stdout.
//!
//! Raw tensor files hold a 16-byte header of four little-endian `u32` dims
//! `(n, c, h, w)` followed by little-endian `f32` values in NHWC order.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::bench::{run_suite, BenchOptions, Preset, Suite, DEFAULT_REPEAT};
use crate::convert::{convert_model, parse_interchange, ConvertOptions};
use crate::error::{Error, FormatError, Result};
use crate::layout::{Dims, FloatTensor, Layout, DEFAULT_GROUP_BITS};
use crate::runtime::PackedModel;

pub const EXIT_OK: i32 = 0;
pub const EXIT_VALIDATION: i32 = 1;
pub const EXIT_IO: i32 = 2;

pub const SEED_VAR: &str = "BNN_SEED";

#[derive(Debug, Parser)]
#[command(name = "bnn", version, about = "Binary neural network converter, runtime and benchmarks")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Convert a JSON interchange graph into a packed model.
    Convert(ConvertArgs),
    /// Execute a packed model on a raw tensor file.
    Run(RunArgs),
    /// Time kernel variants and print CSV.
    Bench(BenchArgs),
}

#[derive(Debug, Args)]
pub struct ConvertArgs {
    pub input: PathBuf,
    pub output: PathBuf,
    /// Channel group width for packed filters (multiple of 8).
    #[arg(long, default_value_t = DEFAULT_GROUP_BITS)]
    pub c2: usize,
    /// Fold BatchNormalization followed by Sign into per-channel thresholds.
    #[arg(long)]
    pub fuse_bn_sign: bool,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    pub model: PathBuf,
    pub input: PathBuf,
    /// Output tensor path; stdout when absent.
    #[arg(long)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    /// packing, conv or net.
    #[arg(long)]
    pub suite: String,
    #[arg(long, default_value_t = DEFAULT_REPEAT)]
    pub repeat: usize,
    /// full or small.
    #[arg(long, default_value = "full")]
    pub sizes: String,
}

/// Exit code for an error: I/O and truncation map to 2, everything else to 1.
pub fn exit_code(e: &Error) -> i32 {
    match e.root() {
        Error::Io(_) | Error::Format(FormatError::Truncated { .. }) => EXIT_IO,
        _ => EXIT_VALIDATION,
    }
}

fn report(diag: &mut dyn Write, e: &Error) -> i32 {
    let _ = writeln!(diag, "error: {e}");
    exit_code(e)
}

fn io_context(path: &Path, e: std::io::Error) -> Error {
    Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))
}

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| io_context(path, e))
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| io_context(path, e))
}

/// Encode a tensor in the raw file format.
pub fn write_raw_tensor(t: &FloatTensor) -> Vec<u8> {
    let t = t.as_nhwc();
    let mut out = Vec::with_capacity(16 + 4 * t.data().len());
    for d in t.dims().to_array() {
        out.extend_from_slice(&u32::try_from(d).expect("dim fits in u32").to_le_bytes());
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

/// Decode the raw file format. Short files are [`FormatError::Truncated`].
pub fn read_raw_tensor(bytes: &[u8]) -> Result<FloatTensor> {
    if bytes.len() < 16 {
        return Err(FormatError::Truncated {
            needed: 16,
            available: bytes.len(),
        }
        .into());
    }
    let dim = |i: usize| u32::from_le_bytes(bytes[4 * i..4 * i + 4].try_into().expect("4 bytes")) as usize;
    let dims = Dims::new(dim(0), dim(1), dim(2), dim(3));
    let needed = dims
        .numel()
        .checked_mul(4)
        .and_then(|n| n.checked_add(16))
        .ok_or_else(|| FormatError::Malformed(format!("tensor dims {dims} overflow")))?;
    if bytes.len() < needed {
        return Err(FormatError::Truncated {
            needed,
            available: bytes.len(),
        }
        .into());
    }
    if bytes.len() > needed {
        return Err(FormatError::Malformed(format!("{} bytes past the tensor payload", bytes.len() - needed)).into());
    }
    let data = bytes[16..]
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
        .collect();
    FloatTensor::new(dims, Layout::Nhwc, data)
}

/// Path of the JSON conversion report written next to `output`.
pub fn report_path(output: &Path) -> PathBuf {
    let mut s = output.as_os_str().to_owned();
    s.push(".report.json");
    PathBuf::from(s)
}

pub fn cmd_convert(args: &ConvertArgs, diag: &mut dyn Write) -> i32 {
    let result = (|| -> Result<()> {
        let text = String::from_utf8(read(&args.input)?)
            .map_err(|e| Error::Parse {
                path: "$".into(),
                message: format!("not UTF-8: {e}"),
            })?;
        let graph = parse_interchange(&text)?;
        let options = ConvertOptions {
            c2: args.c2,
            fuse_bn_sign: args.fuse_bn_sign,
        };
        let (model, conversion) = convert_model(&graph, &options)?;
        for w in &conversion.warnings {
            let _ = writeln!(diag, "warning: {w}");
        }
        write(&args.output, &model.to_bytes())?;
        write(&report_path(&args.output), conversion.to_json().as_bytes())?;
        Ok(())
    })();
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => report(diag, &e),
    }
}

pub fn cmd_run(args: &RunArgs, out: &mut dyn Write, diag: &mut dyn Write) -> i32 {
    let result = (|| -> Result<()> {
        let model = PackedModel::from_bytes(&read(&args.model)?)?;
        let input = read_raw_tensor(&read(&args.input)?)?;
        let y = model.execute(&input)?;
        let bytes = write_raw_tensor(&y);
        match &args.output {
            Some(path) => write(path, &bytes)?,
            None => out.write_all(&bytes).and_then(|_| out.flush())?,
        }
        Ok(())
    })();
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => report(diag, &e),
    }
}

/// Seed for benchmark tensors from `BNN_SEED`, 0 when unset.
pub fn seed_from_env() -> Result<u64> {
    match std::env::var(SEED_VAR) {
        Ok(s) => s
            .trim()
            .parse()
            .map_err(|_| Error::InvalidParameter(format!("{SEED_VAR} must be an unsigned 64-bit integer, got '{s}'"))),
        Err(std::env::VarError::NotPresent) => Ok(0),
        Err(e) => Err(Error::InvalidParameter(format!("{SEED_VAR}: {e}"))),
    }
}

pub fn cmd_bench(args: &BenchArgs, out: &mut dyn Write, diag: &mut dyn Write) -> i32 {
    let result = (|| -> Result<()> {
        let suite: Suite = args.suite.parse()?;
        let preset: Preset = args.sizes.parse()?;
        if args.repeat == 0 {
            return Err(Error::InvalidParameter("--repeat must be at least 1".into()));
        }
        let opts = BenchOptions {
            repeat: args.repeat,
            preset,
            seed: seed_from_env()?,
        };
        let report = run_suite(suite, &opts, diag)?;
        out.write_all(report.to_csv().as_bytes())?;
        out.flush()?;
        Ok(())
    })();
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => report(diag, &e),
    }
}

/// Parse `args` (including the program name) and dispatch.
pub fn run<I, T>(args: I, out: &mut dyn Write, diag: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = write!(diag, "{}", e.render());
            return if e.use_stderr() { EXIT_VALIDATION } else { EXIT_OK };
        }
    };
    match &cli.command {
        Command::Convert(a) => cmd_convert(a, diag),
        Command::Run(a) => cmd_run(a, out, diag),
        Command::Bench(a) => cmd_bench(a, out, diag),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn raw_tensor_round_trip() {
        let t = FloatTensor::from_fn(Dims::new(1, 3, 2, 2), Layout::Nchw, |_, c, h, w| (c * 4 + h * 2 + w) as f32 - 5.5);
        let bytes = write_raw_tensor(&t);
        assert_eq!(bytes.len(), 16 + 48);
        assert_eq!(&bytes[4..8], &3u32.to_le_bytes());
        let back = read_raw_tensor(&bytes).unwrap();
        assert_eq!(back, t.convert_layout(Layout::Nhwc));
    }

    #[test]
    fn raw_tensor_truncation() {
        let bytes = write_raw_tensor(&FloatTensor::zeros(Dims::new(1, 2, 2, 2), Layout::Nhwc));
        for cut in [0, 10, 20, bytes.len() - 1] {
            let err = read_raw_tensor(&bytes[..cut]).unwrap_err();
            assert_eq!(exit_code(&err), EXIT_IO);
        }
    }

    #[test]
    fn report_path_appends_suffix() {
        assert_eq!(report_path(Path::new("/tmp/m.dabn")), PathBuf::from("/tmp/m.dabn.report.json"));
    }

    #[test]
    fn bad_flags_are_validation_errors() {
        let mut out = Vec::new();
        let mut err = Vec::new();
        assert_eq!(run(["bnn", "bench", "--suite", "nope"], &mut out, &mut err), EXIT_VALIDATION);
        assert!(String::from_utf8_lossy(&err).contains("unknown suite"));
        assert_eq!(run(["bnn", "frobnicate"], &mut out, &mut err), EXIT_VALIDATION);
        assert!(out.is_empty());
    }
}
