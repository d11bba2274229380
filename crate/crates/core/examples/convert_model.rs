//! Convert a small JSON graph, save it, load it back and run it.

use bnn::convert::{convert_model, detect_binary_convs, evaluate_reference, parse_interchange, ConvertOptions};
use bnn::{FloatTensor, Layout, PackedModel};

fn main() -> bnn::Result<()> {
    let (c, m) = (64, 64);
    let weights: Vec<f32> = (0..m * c * 9).map(|i| if (i * 2654435761usize) % 7 < 3 { -1.0 } else { 1.0 }).collect();
    let doc = serde_json::json!({
        "inputs": [{"name": "x", "dims": [1, c, 8, 8]}],
        "initializers": [{"name": "w", "dims": [m, c, 3, 3], "values": weights}],
        "nodes": [
            {"name": "sign", "op_type": "Sign", "inputs": ["x"], "outputs": ["s"]},
            {"name": "conv", "op_type": "Conv", "inputs": ["s", "w"], "outputs": ["y"],
             "attributes": {"kernel_shape": [3, 3], "pads": [1, 1, 1, 1]}}
        ],
        "output": "y"
    });
    let graph = parse_interchange(&doc.to_string())?;
    println!("binary convolutions: {:?}", detect_binary_convs(&graph));

    let (model, report) = convert_model(&graph, &ConvertOptions { c2: 64, fuse_bn_sign: false })?;
    println!("{}", report.to_json());

    let path = std::env::temp_dir().join("bnn_convert_example.dabn");
    model.save(&path)?;
    let loaded = PackedModel::load(&path)?;
    println!("{} bytes on disk", std::fs::metadata(&path)?.len());

    let x = FloatTensor::from_fn(graph.input_dims, Layout::Nhwc, |_, c, h, w| (c as f32 - 31.5) * (h as f32 - w as f32));
    assert_eq!(loaded.execute(&x)?, evaluate_reference(&graph, &x)?);
    println!("loaded model matches the source graph");
    std::fs::remove_file(path)?;
    Ok(())
}
