//! Memorise a handful of segment pairs with the default model and report
//! teacher-forced accuracy as training proceeds.
//!
//!     cargo run --release --example overfit -- [segments] [max_steps]

use std::time::Instant;

use counterpoint::corpus::{build_corpus, CorpusConfig, PieceInput};
use counterpoint::dataset::{load_midi_dir, EncodedCorpus, Split};
use counterpoint::model::train::{evaluate, TrainConfig, Trainer};
use counterpoint::model::{ModelConfig, Transformer};
use counterpoint::tokenizer::Variant;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let n: usize = args.next().map_or(Ok(10), |s| s.parse())?;
    let max_steps: usize = args.next().map_or(Ok(2000), |s| s.parse())?;

    let dir = concat!(env!("CARGO_MANIFEST_DIR"), "/../../fixtures/midi");
    let (pieces, _) = load_midi_dir(dir.as_ref())?;
    let inputs: Vec<PieceInput> =
        pieces.iter().map(|p| PieceInput { piece_id: p.piece_id.clone(), piece: &p.piece }).collect();
    let corpus = build_corpus(&inputs, &CorpusConfig { val_fraction: 0.0, ..Default::default() })?;
    let mut encoded = EncodedCorpus::encode(&corpus, Variant::BeatPosition)?;
    // untransposed segments only
    encoded.train.retain(|s| s.transposition == 0);
    encoded.train.truncate(n);
    let data = encoded.examples(Split::Train);

    let config = ModelConfig {
        vocab_size_src: encoded.source_vocab.len(),
        vocab_size_tgt: encoded.target_vocab.len(),
        ..Default::default()
    };
    let model = Transformer::<f32>::new(config)?;
    println!("{} pairs, {} parameters", data.len(), model.params.size());
    let mut trainer = Trainer::new(model, TrainConfig { steps: max_steps, batch_size: n, ..Default::default() });
    let start = Instant::now();
    let mut reached = None;
    trainer.run(&data, |record, t| {
        if record.step % 100 == 0 {
            let acc = evaluate(&t.model, &data, 16).expect("valid data").accuracy();
            println!(
                "step {:5}  loss {:.4}  lr {:.2e}  accuracy {:.3}  {:.1}s",
                record.step,
                record.loss,
                record.learning_rate,
                acc,
                start.elapsed().as_secs_f64()
            );
            if acc >= 0.95 && reached.is_none() {
                reached = Some(record.step);
            }
        }
    })?;
    match reached {
        Some(step) => println!("reached 95% teacher-forced accuracy by step {step}"),
        None => println!("did not reach 95% within {max_steps} steps"),
    }
    Ok(())
}
