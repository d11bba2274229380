mod common;

use proptest::prelude::*;

use bnn::convert::{convert_model, detect_binary_convs, evaluate_reference, export_interchange, parse_interchange, ConvertOptions};
use bnn::{Initializer, Layout, PackedModel};

use common::{random_interchange, random_tensor, rng};

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn conversion_preserves_semantics(seed in any::<u64>(), c2 in prop::sample::select(vec![8usize, 16, 24, 32, 64, 128, 192]), fuse in any::<bool>()) {
        let (doc, dims) = random_interchange(seed);
        let g = parse_interchange(&doc.to_string()).unwrap();
        let x = random_tensor(&mut rng(seed ^ 0x5eed), dims, Layout::Nhwc);
        let expect = evaluate_reference(&g, &x).unwrap();
        let (model, report) = convert_model(&g, &ConvertOptions { c2, fuse_bn_sign: fuse }).unwrap();
        prop_assert_eq!(&model.execute(&x).unwrap(), &expect);
        prop_assert_eq!(&model.graph.execute_reference(&x).unwrap(), &expect);
        prop_assert!(report.ratio > 0.0);
        for init in model.graph.initializers().values() {
            if let Initializer::Packed(f) = init {
                let d = f.dims();
                let c1 = d.c.div_ceil(c2);
                prop_assert_eq!(f.payload_bytes(), d.n * d.h * d.w * c1 * c2 / 8);
                // Never worse than the pad-overhead bound 32·c / (C1·C2).
                let ratio = (4 * d.numel()) as f64 / f.payload_bytes() as f64;
                prop_assert_eq!(ratio, 32.0 * d.c as f64 / (c1 * c2) as f64);
            }
        }

        let bytes = model.to_bytes();
        let back = PackedModel::from_bytes(&bytes).unwrap();
        prop_assert_eq!(back.to_bytes(), bytes);
        prop_assert_eq!(back.execute(&x).unwrap(), expect);
    }

    #[test]
    fn detection_is_idempotent(seed in any::<u64>()) {
        let (doc, _) = random_interchange(seed);
        let g = parse_interchange(&doc.to_string()).unwrap();
        let found = detect_binary_convs(&g);
        let (model, _) = convert_model(&g, &ConvertOptions::default()).unwrap();
        prop_assert_eq!(model.graph.count_op("BinaryConv"), found.len());
        let exported = parse_interchange(&export_interchange(&model).unwrap().to_json()).unwrap();
        prop_assert_eq!(detect_binary_convs(&exported), found);
    }
}
