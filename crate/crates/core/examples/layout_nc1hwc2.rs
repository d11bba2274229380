//! Pack an NCHW tensor into channel groups and locate individual bits.

use bnn::layout::{index_nc1hwc2, pack_to_nc1hwc2, unpack_from_nc1hwc2};
use bnn::{Dims, FloatTensor, Layout};

fn main() -> bnn::Result<()> {
    let dims = Dims::new(1, 256, 2, 2);
    // Negative exactly where c is a multiple of 3.
    let t = FloatTensor::from_fn(dims, Layout::Nchw, |_, c, _, _| if c % 3 == 0 { -1.0 } else { 1.0 });
    let packed = pack_to_nc1hwc2(&t, 128)?;
    println!(
        "{dims}: {} groups of {} bits, {} words",
        packed.groups(),
        packed.group_bits(),
        packed.data().len()
    );

    let (group, bit) = index_nc1hwc2(dims, 128, 0, 200, 1, 0)?;
    println!("element (n=0, c=200, h=1, w=0) lives in group {group}, bit {bit}");
    assert_eq!((group, bit), (6, 72));
    assert!(!packed.bit(0, 200, 1, 0)?);
    assert!(packed.bit(0, 201, 1, 0)?);

    let back = unpack_from_nc1hwc2(&packed);
    assert_eq!(back, t.convert_layout(Layout::Nhwc));
    println!("round trip through the packed layout is exact");

    let odd = pack_to_nc1hwc2(&FloatTensor::filled(Dims::new(1, 130, 1, 1), Layout::Nhwc, -1.0), 128)?;
    println!("130 channels at C2=128 use {} groups; set bits: {}", odd.groups(), odd.data().iter().map(|w| w.count_ones()).sum::<u32>());
    Ok(())
}
