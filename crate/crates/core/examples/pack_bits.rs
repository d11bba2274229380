//! Pack floats into sign bits both ways and compare throughput.

use std::time::Instant;

use bnn::bitpack::{pack_naive, pack_signbits, unpack};

fn main() {
    let values = [-1.5f32, 0.25, -0.0, 3.0, -2.0, 0.0, -7.0, 1.0];
    let packed = pack_signbits(&values);
    println!("{values:?}");
    println!("-> word {:#04x}, logical {:?}", packed.words()[0], unpack(&packed));
    assert_eq!(packed, pack_naive(&values));

    let big: Vec<f32> = (0..64 * 64 * 256).map(|i| ((i * 7919) % 13) as f32 - 6.0).collect();
    let t = Instant::now();
    let a = pack_naive(&big);
    let naive = t.elapsed();
    let t = Instant::now();
    let b = pack_signbits(&big);
    let gathered = t.elapsed();
    assert_eq!(a, b);
    println!(
        "{} floats: naive {naive:?}, sign-bit gather {gathered:?} ({} ones)",
        big.len(),
        b.count_ones()
    );
}
