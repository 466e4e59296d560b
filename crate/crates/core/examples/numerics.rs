//! Attention on a tiny example, and a finite-difference check of the full
//! encoder-decoder gradients in 64-bit mode.
//!
//!     cargo run --release --example numerics

use counterpoint::model::gradcheck::{grad_check, TransformerObjective};
use counterpoint::model::{attention, attention_weights, positional_encoding, Example, Matrix, ModelConfig, Transformer};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let q = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 2.0]]);
    let k = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 1.0]]);
    let v = Matrix::from_rows(&[vec![10.0], vec![20.0], vec![30.0]]);
    let w = attention_weights::<f64>(&q, &k, None);
    let out = attention(&q, &k, &v, None)?;
    for i in 0..2 {
        println!("query {i}: weights {:?} -> {:.4}", w.row(i), out.get(i, 0));
    }
    println!("PE(position 3, d = 8): {:?}", positional_encoding(3, 8, 16)?);

    let config = ModelConfig {
        d_model: 16,
        n_heads: 4,
        d_ff: 32,
        vocab_size_src: 10,
        vocab_size_tgt: 10,
        max_len: 16,
        dropout: 0.0,
        ..Default::default()
    };
    let model = Transformer::<f64>::new(config)?;
    let batch = vec![Example { source: vec![4, 5, 6, 7], target: vec![0, 8, 9, 1] }];
    let mut objective = TransformerObjective { model, batch };
    let report = grad_check(&mut objective, 1e-5);
    println!(
        "gradient check over {} parameters: max relative error {:.2e} (at {:?})",
        report.checked, report.max_rel_error, report.worst
    );
    Ok(())
}
