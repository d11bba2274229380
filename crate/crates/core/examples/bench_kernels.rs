//! Run a benchmark suite in-process and print its CSV.
//!
//! `cargo run --release --example bench_kernels [packing|conv|net] [full|small]`

use bnn::bench::{run_suite, BenchOptions, Preset, Suite};

fn main() -> bnn::Result<()> {
    let mut args = std::env::args().skip(1);
    let suite: Suite = args.next().as_deref().unwrap_or("conv").parse()?;
    let preset: Preset = args.next().as_deref().unwrap_or("small").parse()?;
    let opts = BenchOptions { repeat: 10, preset, seed: 1 };
    let report = run_suite(suite, &opts, &mut std::io::stderr())?;
    print!("{}", report.to_csv());
    Ok(())
}
