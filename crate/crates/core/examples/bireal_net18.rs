//! Build a Bi-Real-Net-18 shaped model with random weights, run it on a
//! 1x3x224x224 input and check the packed path against the float reference.
//!
//! `cargo run --release --example bireal_net18 [seed]`

use std::time::Instant;

use bnn::models::{bireal_net18, random_input, BiRealConfig};

fn main() -> bnn::Result<()> {
    let seed = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(0);
    let model = bireal_net18(&BiRealConfig { seed, ..Default::default() })?;
    let g = &model.graph;
    println!(
        "{} nodes, {} binary convs, {} model bytes",
        g.nodes().len(),
        g.count_op("BinaryConv"),
        model.to_bytes().len()
    );

    let x = random_input(g.input_dims(), seed);
    let t = Instant::now();
    let y = model.execute(&x)?;
    println!("packed execute: {:?}", t.elapsed());

    let top = y
        .data()
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1))
        .map(|(i, _)| i)
        .unwrap_or(0);
    println!("output {} values, argmax {top}", y.data().len());

    let t = Instant::now();
    let reference = g.execute_reference(&x)?;
    println!("float reference: {:?}", t.elapsed());
    assert_eq!(y, reference, "packed and reference outputs differ");
    println!("packed output equals the float reference bit for bit");
    Ok(())
}
