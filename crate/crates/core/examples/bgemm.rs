//! Binary GEMM on small matrices, with and without the addv reduction.

use bnn::kernels::{bgemm, bgemm_no_addv, cnt_bytes, xnor_vec, addv};
use bnn::bitpack::pack_signbits;
use bnn::BinMatrix;

fn main() -> bnn::Result<()> {
    let a = pack_signbits(&[1.0, -1.0, 1.0, -1.0, 1.0, 1.0, -1.0, -1.0]);
    let b = pack_signbits(&[1.0, 1.0, 1.0, -1.0, -1.0, 1.0, -1.0, 1.0]);
    let x = xnor_vec(&a, &b)?;
    let counts = cnt_bytes(&x);
    println!("xnor {:#010b}, cnt {counts:?}, addv {}", x.words()[0], addv(&counts));

    // 2x1 times 1x2 with 8-bit vectors.
    let lhs = BinMatrix::from_bytes(2, 1, 8, &[0b0000_1111, 0b1111_1111])?;
    let rhs = BinMatrix::from_bytes(1, 2, 8, &[0b0000_1111, 0b0000_0000])?;
    let c = bgemm(&lhs, &rhs)?;
    println!("matches: {:?}", c.data());
    assert_eq!(c.data(), &[8, 4, 4, 0]);

    let raw = bgemm_no_addv(&lhs, &rhs)?;
    println!("without addv (not an inference result): {:?}", raw.data());
    Ok(())
}
