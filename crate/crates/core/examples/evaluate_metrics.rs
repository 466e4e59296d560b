//! BLEU on hand-made note sequences, then the full report and the
//! memorisation scan over the fixture corpus with references standing in
//! for model output.
//!
//!     cargo run --example evaluate_metrics

use counterpoint::corpus::{build_corpus, CorpusConfig, PieceInput};
use counterpoint::dataset::{load_midi_dir, EncodedCorpus, Split};
use counterpoint::metrics::{bleu, edit_distance, extract_streams, results_table, DURATION_MAX_N, PITCH_MAX_N};
use counterpoint::pipeline::oracle_scores;
use counterpoint::tokenizer::{parse_words, DecodeMode, Variant};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let reference = parse_words("<s> P60 D1.000 B0.000 P62 D1.000 B1.000 P64 D0.500 B2.000 P65 D0.500 B2.500 P67 D1.000 B3.000 </s>")?;
    let candidate = parse_words("<s> P60 D1.000 B0.000 P62 D1.000 B1.000 P64 D1.000 B2.000 P67 D1.000 B3.000 </s>")?;
    let r = extract_streams(&reference, Variant::BeatPosition, DecodeMode::Strict)?;
    let c = extract_streams(&candidate, Variant::BeatPosition, DecodeMode::Strict)?;
    let pitch = bleu(&c.pitch, &r.pitch, PITCH_MAX_N, true)?;
    let duration = bleu(&c.duration, &r.duration, DURATION_MAX_N, true)?;
    println!("pitch BLEU {:.2} (precisions {:?}, brevity {:.3})", pitch.score, pitch.precisions, pitch.brevity_penalty);
    println!("duration BLEU {:.2}", duration.score);
    println!("edit distance between the note lists: {}", edit_distance(&c.combined.chunks(2).collect::<Vec<_>>(), &r.combined.chunks(2).collect::<Vec<_>>()));

    let dir = concat!(env!("CARGO_MANIFEST_DIR"), "/../../fixtures/midi");
    let (pieces, _) = load_midi_dir(dir.as_ref())?;
    let inputs: Vec<PieceInput> =
        pieces.iter().map(|p| PieceInput { piece_id: p.piece_id.clone(), piece: &p.piece }).collect();
    let corpus = EncodedCorpus::encode(&build_corpus(&inputs, &CorpusConfig::default())?, Variant::BeatPosition)?;
    let (report, memorization) = oracle_scores(&corpus, Split::Validation)?;
    println!("\nvalidation references scored against themselves:\n{}", results_table(&[(Variant::BeatPosition, &report)]));
    println!("{}", memorization.summary());
    Ok(())
}
