//! Parse a MIDI file, reduce its tracks to monophonic parts, write the
//! first two parts back out and parse the result again.
//!
//!     cargo run --example midi_roundtrip -- [file.mid] [out.mid]

use std::path::PathBuf;

use counterpoint::corpus::{monophonize, simultaneity_ratio};
use counterpoint::midi::{parse_midi, write_midi_with_meter};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let input = args
        .next()
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(concat!(env!("CARGO_MANIFEST_DIR"), "/../../fixtures/midi/bwv101_7.mid")));
    let output = args.next().map(PathBuf::from).unwrap_or_else(|| std::env::temp_dir().join("roundtrip.mid"));

    let piece = parse_midi(&std::fs::read(&input)?)?;
    println!("{}: ppq {}, {} note track(s), meters {}", input.display(), piece.ppq, piece.tracks.len(), piece.meter_map().to_text());
    let mut parts = Vec::new();
    for (i, track) in piece.tracks.iter().enumerate() {
        let ratio = simultaneity_ratio(track);
        match monophonize(track, piece.ppq, 0.2) {
            Ok(notes) => {
                println!("  track {i}: {} raw notes, simultaneity {ratio:.2}, {} monophonic events", track.events.len(), notes.len());
                parts.push(notes);
            }
            Err(r) => println!("  track {i}: rejected (simultaneity {:.2})", r.simultaneity_ratio),
        }
    }
    let [source, target, ..] = parts.as_slice() else {
        return Err("need two usable tracks".into());
    };
    let meters = piece.meter_map();
    std::fs::write(&output, write_midi_with_meter(source, target, piece.ppq, Some(&meters))?)?;

    let again = parse_midi(&std::fs::read(&output)?)?;
    let reparsed: Vec<_> = again.tracks.iter().map(|t| monophonize(t, again.ppq, 0.2)).collect::<Result<_, _>>().map_err(|_| "reparse")?;
    let rests_dropped = |v: &Vec<counterpoint::midi::NoteEvent>| v.iter().filter(|n| !n.pitch.is_rest()).count();
    println!("wrote {}; sounding notes {} / {} before, {} / {} after", output.display(),
        rests_dropped(source), rests_dropped(target), rests_dropped(&reparsed[0]), rests_dropped(&reparsed[1]));
    assert_eq!(&reparsed[0], source);
    assert_eq!(&reparsed[1], target);
    assert_eq!(again.meter_map(), meters);
    println!("parts and meters survive the round trip");
    Ok(())
}
