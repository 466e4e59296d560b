//! Parse a directory of MIDI files, build the segment corpus and encode it.
//!
//!     cargo run --example build_corpus -- [midi_dir] [beat|mod-beat|none]

use std::path::PathBuf;

use counterpoint::corpus::{build_corpus, CorpusConfig, PieceInput};
use counterpoint::dataset::{load_midi_dir, EncodedCorpus};
use counterpoint::tokenizer::Variant;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let dir = args
        .next()
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(concat!(env!("CARGO_MANIFEST_DIR"), "/../../fixtures/midi")));
    let variant: Variant = args.next().as_deref().unwrap_or("beat").parse()?;

    let (pieces, failures) = load_midi_dir(&dir)?;
    for (path, err) in &failures {
        eprintln!("skipping {}: {err}", path.display());
    }
    let inputs: Vec<PieceInput> =
        pieces.iter().map(|p| PieceInput { piece_id: p.piece_id.clone(), piece: &p.piece }).collect();
    let corpus = build_corpus(&inputs, &CorpusConfig::default())?;
    print!("{}", corpus.stats.summary());

    let encoded = EncodedCorpus::encode(&corpus, variant)?;
    println!("source vocabulary: {} words", encoded.source_vocab.len());
    println!("target vocabulary: {} words", encoded.target_vocab.len());
    let lengths: Vec<usize> = encoded.train.iter().map(|s| s.target.words.len()).collect();
    if let (Some(min), Some(max)) = (lengths.iter().min(), lengths.iter().max()) {
        println!("target lengths: {min}..={max} tokens");
    }
    if let Some(first) = encoded.validation.first() {
        println!("\n{}\n  source: {}\n  target: {}", first.key(), first.source.to_line(), first.target.to_line());
    }
    Ok(())
}
