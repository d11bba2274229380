//! Binary 3x3 convolution three ways: direct, im2col + BGEMM, and the float oracle.

use bnn::floatops::oracle_binary_conv;
use bnn::kernels::{binary_direct_conv, bgemm, im2col_packed, match_to_dot, pack_filters};
use bnn::layout::pack_to_nc1hwc2;
use bnn::{ConvParams, Dims, FloatTensor, Layout, Window};

fn main() -> bnn::Result<()> {
    let (c, m) = (70, 5);
    let x = FloatTensor::from_fn(Dims::new(1, c, 6, 6), Layout::Nchw, |_, c, h, w| ((c * 31 + h * 7 + w * 3) % 11) as f32 - 5.0);
    let filters = FloatTensor::from_fn(Dims::new(m, c, 3, 3), Layout::Nchw, |m, c, h, w| {
        if (m + c + h * w) % 3 == 0 { -1.0 } else { 1.0 }
    });
    let p = ConvParams::new(Window::square(3, 1, 1), c);

    let c2 = 32;
    let packed = pack_to_nc1hwc2(&x, c2)?;
    let weights = pack_filters(&filters, c2)?;
    let direct = binary_direct_conv(&packed, &weights, &p)?;
    let oracle = oracle_binary_conv(&x, &filters, &p)?;
    assert_eq!(direct, oracle);

    let matches = bgemm(&weights, &im2col_packed(&packed, &p)?)?;
    for j in 0..matches.cols() {
        for i in 0..m {
            assert_eq!(match_to_dot(matches.get(i, j), &p, c2) as f32, direct.data()[j * m + i]);
        }
    }
    println!("{c} channels at C2={c2}: direct, bgemm and oracle agree on {} outputs", direct.data().len());
    println!("first output pixel: {:?}", &direct.data()[..m]);
    Ok(())
}
