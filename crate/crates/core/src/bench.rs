//! Benchmark suites for packing, convolution kernels and whole networks.
//!
//! Every case first cross-checks its variants for identical output, then
//! runs each variant once to warm up and `repeat` more times. Reported is the
//! median wall time and `ratio = baseline median / variant median`, so a
//! ratio above 1 means faster than the baseline. Timing is single-threaded.

use std::fmt;
use std::hint::black_box;
use std::io::Write;
use std::str::FromStr;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::bitpack::{pack_naive, pack_signbits};
use crate::error::{Error, Result};
use crate::kernels::{
    bgemm, bgemm_no_addv, binary_direct_conv, im2col_packed, match_to_dot, BinMatrix, ConvParams, Window,
};
use crate::layout::{pack_to_nc1hwc2, Dims, FloatTensor, Layout, PackedTensor};
use crate::models::{bireal_net18, random_input, BiRealConfig};

pub const CSV_HEADER: &str = "suite,case,variant,median_ns,ratio";
pub const DEFAULT_REPEAT: usize = 50;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Suite {
    Packing,
    Conv,
    Net,
}

impl Suite {
    pub const ALL: [Suite; 3] = [Suite::Packing, Suite::Conv, Suite::Net];

    pub fn name(&self) -> &'static str {
        match self {
            Suite::Packing => "packing",
            Suite::Conv => "conv",
            Suite::Net => "net",
        }
    }
}

impl FromStr for Suite {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Suite::ALL
            .into_iter()
            .find(|x| x.name() == s)
            .ok_or_else(|| Error::InvalidParameter(format!("unknown suite '{s}' (expected packing, conv or net)")))
    }
}

impl fmt::Display for Suite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Size preset. `Full` mirrors ResNet-18 stage shapes; `Small` is for smoke runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    Full,
    Small,
}

impl FromStr for Preset {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Preset::Full),
            "small" => Ok(Preset::Small),
            _ => Err(Error::InvalidParameter(format!("unknown size preset '{s}' (expected full or small)"))),
        }
    }
}

impl Preset {
    /// `(spatial side, channels)` of packed activation tensors.
    pub fn packing_cases(&self) -> Vec<(usize, usize)> {
        let (sides, channels): (&[usize], &[usize]) = match self {
            Preset::Full => (&[32, 64, 128], &[64, 128, 256]),
            Preset::Small => (&[8, 16], &[64, 128]),
        };
        sides.iter().flat_map(|&s| channels.iter().map(move |&c| (s, c))).collect()
    }

    /// `(channels, spatial side)` of 3×3 stride-1 pad-1 convolutions with
    /// as many output as input channels.
    pub fn conv_cases(&self) -> Vec<(usize, usize)> {
        match self {
            Preset::Full => vec![(64, 56), (128, 28), (256, 14), (512, 7)],
            Preset::Small => vec![(64, 8), (128, 4)],
        }
    }

    pub fn net_input_side(&self) -> usize {
        match self {
            Preset::Full => 224,
            Preset::Small => 32,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRecord {
    pub suite: Suite,
    pub case: String,
    pub variant: String,
    pub repetitions: usize,
    pub median_ns: u64,
    pub ratio: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct BenchReport {
    pub records: Vec<BenchRecord>,
}

impl BenchReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(CSV_HEADER);
        out.push('\n');
        for r in &self.records {
            out.push_str(&format!("{},{},{},{},{:.4}\n", r.suite, r.case, r.variant, r.median_ns, r.ratio));
        }
        out
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BenchOptions {
    pub repeat: usize,
    pub preset: Preset,
    pub seed: u64,
}

impl Default for BenchOptions {
    fn default() -> Self {
        Self {
            repeat: DEFAULT_REPEAT,
            preset: Preset::Full,
            seed: 0,
        }
    }
}

/// Median of `repeat` timed calls after one untimed warm-up. Never 0.
fn time_median(repeat: usize, mut f: impl FnMut()) -> u64 {
    f();
    let mut samples: Vec<u64> = (0..repeat.max(1))
        .map(|_| {
            let t = Instant::now();
            f();
            t.elapsed().as_nanos() as u64
        })
        .collect();
    samples.sort_unstable();
    samples[samples.len() / 2].max(1)
}

type Variant<'a> = (&'static str, Box<dyn FnMut() + 'a>);

fn run_case(report: &mut BenchReport, suite: Suite, case: String, repeat: usize, variants: Vec<Variant<'_>>) {
    let mut baseline = None;
    for (name, mut f) in variants {
        let median = time_median(repeat, &mut f);
        let base = *baseline.get_or_insert(median);
        report.records.push(BenchRecord {
            suite,
            case: case.clone(),
            variant: name.to_string(),
            repetitions: repeat.max(1),
            median_ns: median,
            ratio: base as f64 / median as f64,
        });
    }
}

fn mismatch(suite: Suite, case: &str, a: &str, b: &str) -> Error {
    Error::InvalidParameter(format!("{suite}/{case}: variants '{a}' and '{b}' disagree; benchmark aborted"))
}

fn random_values(rng: &mut ChaCha8Rng, n: usize) -> Vec<f32> {
    (0..n).map(|_| rng.random_range(-1.0f32..1.0)).collect()
}

/// Random ±1 filters `(m, c, k, k)`, packed the way the converter packs them.
fn random_filters(rng: &mut ChaCha8Rng, m: usize, c: usize, k: usize, c2: usize) -> Result<BinMatrix> {
    let filters = FloatTensor::new(Dims::new(m, c, k, k), Layout::Nchw, random_values(rng, m * c * k * k))?;
    crate::kernels::pack_filters(&filters, c2)
}

/// `match_to_dot ∘ bgemm ∘ im2col` as an NHWC float tensor.
pub fn bgemm_conv(input: &PackedTensor, weights: &BinMatrix, p: &ConvParams) -> Result<FloatTensor> {
    let cols = im2col_packed(input, p)?;
    let matches = bgemm(weights, &cols)?;
    let (oh, ow) = p.window.output_extent(input.dims().h, input.dims().w)?;
    let m = weights.rows();
    let mut out = vec![0f32; m * oh * ow];
    for i in 0..m {
        for j in 0..oh * ow {
            out[j * m + i] = match_to_dot(matches.get(i, j), p, input.group_bits()) as f32;
        }
    }
    FloatTensor::new(Dims::new(1, m, oh, ow), Layout::Nhwc, out)
}

fn packing_suite(report: &mut BenchReport, opts: &BenchOptions, rng: &mut ChaCha8Rng) -> Result<()> {
    for (side, c) in opts.preset.packing_cases() {
        let case = format!("{side}x{side}x{c}");
        let values = random_values(rng, side * side * c);
        if pack_naive(&values) != pack_signbits(&values) {
            return Err(mismatch(Suite::Packing, &case, "naive", "signbits"));
        }
        let v = &values;
        run_case(
            report,
            Suite::Packing,
            case,
            opts.repeat,
            vec![
                ("naive", Box::new(move || drop(black_box(pack_naive(black_box(v)))))),
                ("signbits", Box::new(move || drop(black_box(pack_signbits(black_box(v)))))),
            ],
        );
    }
    Ok(())
}

fn conv_suite(report: &mut BenchReport, opts: &BenchOptions, rng: &mut ChaCha8Rng, diag: &mut dyn Write) -> Result<()> {
    let _ = writeln!(
        diag,
        "note: conv variant 'bgemm_no_addv' drops the addv reduction; it is non-inference and excluded from cross-checks"
    );
    for (c, side) in opts.preset.conv_cases() {
        let case = format!("{c}x{side}x{side}_k3s1p1");
        let c2 = if c % 128 == 0 { 128 } else { 64 };
        let p = ConvParams::new(Window::square(3, 1, 1), c);
        let x = FloatTensor::new(Dims::new(1, c, side, side), Layout::Nhwc, random_values(rng, c * side * side))?;
        let packed = pack_to_nc1hwc2(&x, c2)?;
        let weights = random_filters(rng, c, c, 3, c2)?;
        if bgemm_conv(&packed, &weights, &p)? != binary_direct_conv(&packed, &weights, &p)? {
            return Err(mismatch(Suite::Conv, &case, "bgemm", "direct"));
        }
        let (x, w, p) = (&packed, &weights, &p);
        run_case(
            report,
            Suite::Conv,
            case,
            opts.repeat,
            vec![
                ("bgemm", Box::new(move || drop(black_box(bgemm_conv(x, w, p))))),
                (
                    "bgemm_no_addv",
                    Box::new(move || {
                        let cols = im2col_packed(x, p).expect("checked");
                        drop(black_box(bgemm_no_addv(w, &cols)))
                    }),
                ),
                ("direct", Box::new(move || drop(black_box(binary_direct_conv(x, w, p))))),
            ],
        );
    }
    Ok(())
}

fn net_suite(report: &mut BenchReport, opts: &BenchOptions) -> Result<()> {
    let side = opts.preset.net_input_side();
    let model = bireal_net18(&BiRealConfig {
        input_hw: side,
        seed: opts.seed,
        ..Default::default()
    })?;
    let x = random_input(model.graph.input_dims(), opts.seed);
    let first = model.execute(&x)?;
    if model.execute(&x)? != first {
        return Err(mismatch(Suite::Net, "bireal18", "execute", "execute"));
    }
    let (m, x) = (&model, &x);
    run_case(
        report,
        Suite::Net,
        format!("bireal18_{side}"),
        opts.repeat,
        vec![("packed", Box::new(move || drop(black_box(m.execute(x)))))],
    );
    Ok(())
}

/// Run one suite. Diagnostics go to `diag`, never into the report.
pub fn run_suite(suite: Suite, opts: &BenchOptions, diag: &mut dyn Write) -> Result<BenchReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut report = BenchReport::default();
    match suite {
        Suite::Packing => packing_suite(&mut report, opts, &mut rng)?,
        Suite::Conv => conv_suite(&mut report, opts, &mut rng, diag)?,
        Suite::Net => net_suite(&mut report, opts)?,
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quick(suite: Suite) -> BenchReport {
        let opts = BenchOptions {
            repeat: 2,
            preset: Preset::Small,
            seed: 3,
        };
        run_suite(suite, &opts, &mut std::io::sink()).unwrap()
    }

    #[test]
    fn packing_rows() {
        let r = quick(Suite::Packing);
        assert_eq!(r.records.len(), 2 * Preset::Small.packing_cases().len());
        assert!(r.records.iter().all(|x| x.median_ns > 0 && x.ratio > 0.0));
        assert!(r.records.iter().step_by(2).all(|x| x.variant == "naive" && x.ratio == 1.0));
    }

    #[test]
    fn conv_rows_and_csv() {
        let r = quick(Suite::Conv);
        let variants: Vec<&str> = r.records.iter().take(3).map(|x| x.variant.as_str()).collect();
        assert_eq!(variants, ["bgemm", "bgemm_no_addv", "direct"]);
        let csv = r.to_csv();
        let mut lines = csv.lines();
        assert_eq!(lines.next(), Some(CSV_HEADER));
        assert_eq!(lines.count(), r.records.len());
    }

    #[test]
    fn unknown_names() {
        assert!("gemm".parse::<Suite>().is_err());
        assert_eq!("net".parse::<Suite>().unwrap(), Suite::Net);
        assert!("huge".parse::<Preset>().is_err());
    }

    #[test]
    fn same_flags_same_rows() {
        let key = |r: &BenchReport| r.records.iter().map(|x| (x.case.clone(), x.variant.clone())).collect::<Vec<_>>();
        assert_eq!(key(&quick(Suite::Packing)), key(&quick(Suite::Packing)));
    }
}
