//! Train a small model on the fixture corpus, save and reload the
//! checkpoint, then generate a counterpart for one held-out segment with
//! greedy and beam decoding and write it as a two-track MIDI file.
//!
//!     cargo run --release --example train_and_generate -- [steps=600]

use counterpoint::corpus::{build_corpus, CorpusConfig, PieceInput};
use counterpoint::dataset::{load_midi_dir, EncodedCorpus};
use counterpoint::decoding::BeamConfig;
use counterpoint::midi::write_midi_with_meter;
use counterpoint::model::train::TrainConfig;
use counterpoint::model::ModelConfig;
use counterpoint::pipeline::{train_model, TrainedModel};
use counterpoint::tokenizer::{decode, validate_beats, DecodeMode, Variant};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let steps: usize = std::env::args().nth(1).map_or(Ok(600), |s| s.parse())?;
    let dir = concat!(env!("CARGO_MANIFEST_DIR"), "/../../fixtures/midi");
    let (pieces, _) = load_midi_dir(dir.as_ref())?;
    let inputs: Vec<PieceInput> =
        pieces.iter().map(|p| PieceInput { piece_id: p.piece_id.clone(), piece: &p.piece }).collect();
    let corpus = EncodedCorpus::encode(&build_corpus(&inputs, &CorpusConfig::default())?, Variant::BeatPosition)?;

    let config = ModelConfig { d_model: 64, n_heads: 4, d_ff: 256, ..Default::default() };
    let model = train_model(&corpus, config, TrainConfig { steps, ..Default::default() }, |r, _| {
        if r.step % 100 == 0 {
            println!("step {:4}  loss {:.3}", r.step, r.loss);
        }
    })?;

    let path = std::env::temp_dir().join("counterpoint-example.ckpt");
    model.save(&path, steps)?;
    let (model, step) = TrainedModel::load(&path)?;
    println!("reloaded {} at step {step}", path.display());

    let segment = corpus.validation.first().ok_or("no validation segments")?;
    println!("\n{}\nsource     {}\nreference  {}", segment.key(), segment.source.to_line(), segment.target.to_line());
    for width in [1, 5] {
        let g = model.generate(&segment.source, &BeamConfig { width, ..Default::default() })?;
        println!("width {width}    {}  (score {:.3}{})", g.tokens.to_line(), g.score, if g.truncated { ", truncated" } else { "" });
        assert!(validate_beats(&g.tokens).is_empty());
    }

    let g = model.generate(&segment.source, &BeamConfig::default())?;
    let source = decode(&segment.source, DecodeMode::Strict)?.notes;
    let target = decode(&g.tokens, DecodeMode::Strict)?.notes;
    let out = std::env::temp_dir().join("counterpoint-example.mid");
    std::fs::write(&out, write_midi_with_meter(&source, &target, 480, Some(&segment.source.meters))?)?;
    println!("\nwrote {}", out.display());
    Ok(())
}
