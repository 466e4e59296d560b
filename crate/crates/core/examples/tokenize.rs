//! Encode a short melody under each beat encoding and decode it back.
//!
//!     cargo run --example tokenize

use counterpoint::midi::NoteEvent;
use counterpoint::time::{Beats, Meter, MeterMap};
use counterpoint::tokenizer::{build_vocabulary, decode, encode, validate_beats, DecodeMode, Variant};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    // opening of a 3/4 minuet: dotted half, three quarters, a rest, two eighths ...
    let beats = Beats::from_millis;
    let mut onset = Beats::ZERO;
    let mut notes = Vec::new();
    for (pitch, millis) in [(Some(74), 1000), (Some(67), 500), (Some(69), 500), (Some(71), 500), (Some(72), 500), (Some(74), 1000), (Some(67), 1000), (None, 1000), (Some(67), 3000)] {
        let d = beats(millis);
        notes.push(match pitch {
            Some(p) => NoteEvent::note(p, onset, d),
            None => NoteEvent::rest(onset, d),
        });
        onset += d;
    }
    let meters = MeterMap::constant(Meter::new(3, 4));

    let mut encoded = Vec::new();
    for variant in Variant::ALL {
        let tokens = encode(&notes, variant, &meters)?;
        println!("{:<18} {}", variant.name(), tokens.to_line());
        let back = decode(&tokens, DecodeMode::Strict)?;
        assert_eq!(back.notes, notes);
        assert!(validate_beats(&tokens).is_empty());
        encoded.push(tokens);
    }
    let vocab = build_vocabulary(&encoded);
    println!("\n{} words across all three encodings; first ten ids:", vocab.len());
    for id in 0..10 {
        println!("  {id:>2} {}", vocab.word(id));
    }
    Ok(())
}
