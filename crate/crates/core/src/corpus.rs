//! From parsed MIDI pieces to source/target segment pairs.
//!
//! The pipeline is monophonize → enumerate pairs → segment into four-bar
//! windows → drop sparse segments → split → transpose the training side.

use std::collections::{BTreeSet, HashSet};
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::midi::{ticks_to_beats, NoteEvent, Pitch, RawNote, RawTrack};
use crate::time::{Beats, Meter, MeterMap};

/// Measures per segment.
pub const BARS_PER_SEGMENT: usize = 4;
/// Minimum sounding notes per part for a segment to be kept.
pub const MIN_NOTES: usize = 10;
/// Transpositions applied by augmentation, in semitones.
pub const TRANSPOSITIONS: std::ops::RangeInclusive<i8> = -5..=6;

#[derive(Debug, Error, PartialEq)]
pub enum CorpusError {
    #[error("piece {piece_id} has {tracks} usable track(s); at least 2 are needed")]
    EmptyResult { piece_id: String, tracks: usize },
    #[error("validation fraction {0} outside [0, 1)")]
    Fraction(f64),
    #[error("{0}")]
    Config(String),
}

/// Monophonization outcome for a track that had too much chordal texture.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Rejected {
    /// Share of onset times with two or more pitch classes sounding.
    pub simultaneity_ratio: f64,
}

/// Share of distinct onset times at which notes of different pitch classes
/// sound together (octave doublings do not count).
pub fn simultaneity_ratio(track: &RawTrack) -> f64 {
    let onsets: BTreeSet<u64> = track.events.iter().map(|e| e.onset_tick).collect();
    if onsets.is_empty() {
        return 0.0;
    }
    let mut flagged = 0usize;
    for &t in &onsets {
        let mut classes = 0u16;
        for e in &track.events {
            if e.onset_tick > t {
                break;
            }
            if e.off_tick > t {
                classes |= 1 << (e.pitch % 12);
            }
        }
        if classes.count_ones() >= 2 {
            flagged += 1;
        }
    }
    flagged as f64 / onsets.len() as f64
}

/// Reduce a track to one line by keeping the highest sounding pitch.
///
/// A lower note starting together with or under a higher one is dropped; a
/// higher note entering over a held lower one truncates it. Gaps between
/// notes, and before the first, become rests.
pub fn monophonize(track: &RawTrack, ppq: u16, polyphony_threshold: f64) -> Result<Vec<NoteEvent>, Rejected> {
    let ratio = simultaneity_ratio(track);
    if ratio > polyphony_threshold {
        return Err(Rejected { simultaneity_ratio: ratio });
    }
    let mut line: Vec<RawNote> = Vec::with_capacity(track.events.len());
    for &note in &track.events {
        match line.last_mut() {
            Some(current) if current.off_tick > note.onset_tick => {
                if note.onset_tick > current.onset_tick && note.pitch > current.pitch {
                    current.off_tick = note.onset_tick;
                    line.push(note);
                }
            }
            _ => line.push(note),
        }
    }

    let mut out = Vec::with_capacity(line.len() * 2);
    let mut cursor = Beats::ZERO;
    for note in line {
        let onset = ticks_to_beats(note.onset_tick, ppq);
        let end = ticks_to_beats(note.off_tick, ppq);
        if end <= onset || onset < cursor {
            continue;
        }
        if onset > cursor {
            out.push(NoteEvent::rest(cursor, onset - cursor));
        }
        out.push(NoteEvent::note(note.pitch, onset, end - onset));
        cursor = end;
    }
    Ok(out)
}

/// Two monophonic tracks of one piece; `source` has the lower track index.
#[derive(Clone, Debug, PartialEq)]
pub struct TrackPair {
    pub piece_id: String,
    pub pair_id: String,
    pub source_track: usize,
    pub target_track: usize,
    pub source: Vec<NoteEvent>,
    pub target: Vec<NoteEvent>,
    pub meters: MeterMap,
}

/// All `k(k-1)/2` track combinations, ordered (0,1),(0,2),…,(1,2),….
/// With `both_directions`, each pair is followed by its swapped twin.
pub fn enumerate_pairs(
    piece_id: &str,
    tracks: &[Vec<NoteEvent>],
    meters: &MeterMap,
    both_directions: bool,
) -> Result<Vec<TrackPair>, CorpusError> {
    if tracks.len() < 2 {
        return Err(CorpusError::EmptyResult { piece_id: piece_id.to_string(), tracks: tracks.len() });
    }
    let mut pairs = Vec::new();
    let make = |s: usize, t: usize| TrackPair {
        piece_id: piece_id.to_string(),
        pair_id: format!("{piece_id}:{s}-{t}"),
        source_track: s,
        target_track: t,
        source: tracks[s].clone(),
        target: tracks[t].clone(),
        meters: meters.clone(),
    };
    for i in 0..tracks.len() {
        for j in i + 1..tracks.len() {
            pairs.push(make(i, j));
            if both_directions {
                pairs.push(make(j, i));
            }
        }
    }
    Ok(pairs)
}

/// Four aligned measures of a track pair.
#[derive(Clone, Debug, PartialEq)]
pub struct SegmentPair {
    pub piece_id: String,
    pub pair_id: String,
    pub segment_index: usize,
    /// Onsets relative to the window start, contiguous from zero.
    pub source: Vec<NoteEvent>,
    pub target: Vec<NoteEvent>,
    pub bars: usize,
    /// Meter at the window start.
    pub meter: Meter,
    /// Meter regions rebased to the window.
    pub meters: MeterMap,
    /// Window length in beats.
    pub length: Beats,
    pub transposition: i8,
}

impl SegmentPair {
    /// Stable identifier, unique across a corpus.
    pub fn key(&self) -> String {
        format!("{}#{}@{:+}", self.pair_id, self.segment_index, self.transposition)
    }
}

/// Cut `notes` to `[start, end)`, rebase to zero and fill gaps with rests.
fn window_notes(notes: &[NoteEvent], start: Beats, end: Beats) -> Vec<NoteEvent> {
    let mut out = Vec::new();
    let mut cursor = Beats::ZERO;
    for n in notes {
        if n.end() <= start || n.onset >= end || n.pitch.is_rest() {
            continue;
        }
        if n.onset < start {
            // the tail of a note held over the boundary stays silent
            continue;
        }
        let onset = n.onset - start;
        let until = n.end().min(end) - start;
        if onset > cursor {
            out.push(NoteEvent::rest(cursor, onset - cursor));
        }
        out.push(NoteEvent { pitch: n.pitch, onset, duration: until - onset });
        cursor = until;
    }
    out
}

fn part_end(notes: &[NoteEvent]) -> Beats {
    notes.iter().filter(|n| !n.pitch.is_rest()).map(NoteEvent::end).max().unwrap_or(Beats::ZERO)
}

/// Split a pair into consecutive non-overlapping windows of four measures.
/// Notes crossing a window boundary are cut there; a trailing window with
/// fewer than four measures is dropped.
pub fn segment(pair: &TrackPair) -> Vec<SegmentPair> {
    let end = part_end(&pair.source).max(part_end(&pair.target));
    let mut starts = pair.meters.measure_starts(end);
    let n_windows = starts.len() / BARS_PER_SEGMENT;
    // closing boundary of the last full measure
    let closing = {
        let last = starts.last().copied().unwrap_or(Beats::ZERO);
        let (region_start, meter) = pair.meters.region_at(last);
        let natural = last + meter.measure_length();
        // a meter change inside the measure ends it early
        pair.meters
            .regions()
            .iter()
            .map(|r| r.0)
            .find(|&t| t > last && t < natural && t > region_start)
            .unwrap_or(natural)
    };
    starts.push(closing);

    (0..n_windows)
        .map(|w| {
            let start = starts[w * BARS_PER_SEGMENT];
            let stop = starts[(w + 1) * BARS_PER_SEGMENT];
            SegmentPair {
                piece_id: pair.piece_id.clone(),
                pair_id: pair.pair_id.clone(),
                segment_index: w,
                source: window_notes(&pair.source, start, stop),
                target: window_notes(&pair.target, start, stop),
                bars: BARS_PER_SEGMENT,
                meter: pair.meters.meter_at(start),
                meters: pair.meters.window(start, stop),
                length: stop - start,
                transposition: 0,
            }
        })
        .collect()
}

pub fn sounding_notes(notes: &[NoteEvent]) -> usize {
    notes.iter().filter(|n| !n.pitch.is_rest()).count()
}

/// Keep segments where both parts have at least [`MIN_NOTES`] notes.
pub fn filter_segments(segments: Vec<SegmentPair>) -> Vec<SegmentPair> {
    segments
        .into_iter()
        .filter(|s| sounding_notes(&s.source) >= MIN_NOTES && sounding_notes(&s.target) >= MIN_NOTES)
        .collect()
}

/// Shift both parts by `semitones`; if that leaves the MIDI range the whole
/// segment moves by octaves until it fits.
pub fn transpose(segment: &SegmentPair, semitones: i8) -> SegmentPair {
    let pitches = || {
        segment.source.iter().chain(&segment.target).filter_map(|n| n.pitch.midi()).map(i32::from)
    };
    let mut shift = i32::from(semitones);
    if let (Some(lo), Some(hi)) = (pitches().min(), pitches().max()) {
        while hi + shift > 127 && lo + shift - 12 >= 0 {
            shift -= 12;
        }
        while lo + shift < 0 && hi + shift + 12 <= 127 {
            shift += 12;
        }
    }
    let apply = |notes: &[NoteEvent]| -> Vec<NoteEvent> {
        notes
            .iter()
            .map(|n| NoteEvent {
                pitch: match n.pitch {
                    Pitch::Note(p) => Pitch::Note((i32::from(p) + shift).clamp(0, 127) as u8),
                    Pitch::Rest => Pitch::Rest,
                },
                ..*n
            })
            .collect()
    };
    SegmentPair {
        source: apply(&segment.source),
        target: apply(&segment.target),
        transposition: semitones,
        ..segment.clone()
    }
}

/// Twelve copies of every segment, one per transposition in −5..=+6.
pub fn transpose_augment(segments: &[SegmentPair]) -> Vec<SegmentPair> {
    segments.iter().flat_map(|s| TRANSPOSITIONS.map(move |t| transpose(s, t))).collect()
}

/// What keeps related segments on the same side of the split.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum SplitUnit {
    /// All pairs drawn from one piece stay together.
    #[default]
    Piece,
    /// Each track pair (and its swapped twin) is a unit.
    Pair,
}

impl std::str::FromStr for SplitUnit {
    type Err = CorpusError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "piece" => Ok(SplitUnit::Piece),
            "pair" => Ok(SplitUnit::Pair),
            other => Err(CorpusError::Config(format!("split_by must be piece or pair, got {other:?}"))),
        }
    }
}

fn split_key(segment: &SegmentPair, unit: SplitUnit) -> String {
    match unit {
        SplitUnit::Piece => segment.piece_id.clone(),
        SplitUnit::Pair => {
            // a swapped twin "p:2-1" shares the key of "p:1-2"
            let (piece, tracks) = segment.pair_id.rsplit_once(':').unwrap_or((&segment.pair_id, ""));
            let mut ids: Vec<&str> = tracks.split('-').collect();
            ids.sort_unstable();
            format!("{piece}:{}", ids.join("-"))
        }
    }
}

/// Partition un-augmented segments into (train, validation) by unit.
/// `round(val_fraction × units)` shuffled units go to validation.
pub fn split(
    segments: Vec<SegmentPair>,
    val_fraction: f64,
    seed: u64,
    unit: SplitUnit,
) -> Result<(Vec<SegmentPair>, Vec<SegmentPair>), CorpusError> {
    if !(0.0..1.0).contains(&val_fraction) {
        return Err(CorpusError::Fraction(val_fraction));
    }
    let keys: BTreeSet<String> = segments.iter().map(|s| split_key(s, unit)).collect();
    let mut keys: Vec<String> = keys.into_iter().collect();
    keys.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_val = (val_fraction * keys.len() as f64).round() as usize;
    let val_keys: BTreeSet<&String> = keys[..n_val.min(keys.len())].iter().collect();
    let (val, train) = segments.into_iter().partition(|s| val_keys.contains(&split_key(s, unit)));
    Ok((train, val))
}

/// Transposition-invariant shape of a part: intervals from its first
/// sounding pitch, durations and rests.
fn contour(notes: &[NoteEvent]) -> Vec<(Option<i16>, Beats)> {
    let base = notes.iter().find_map(|n| n.pitch.midi()).map_or(0, i16::from);
    notes.iter().map(|n| (n.pitch.midi().map(|p| i16::from(p) - base), n.duration)).collect()
}

/// Drop validation segments whose source part also occurs, in any key, as
/// a training source. Chorale melodies are often harmonised more than once,
/// so a split by piece alone can leak an input into both sides.
pub fn drop_leaked(train: &[SegmentPair], validation: Vec<SegmentPair>) -> (Vec<SegmentPair>, usize) {
    let seen: HashSet<_> = train.iter().map(|s| contour(&s.source)).collect();
    let before = validation.len();
    let kept: Vec<SegmentPair> = validation.into_iter().filter(|s| !seen.contains(&contour(&s.source))).collect();
    let dropped = before - kept.len();
    (kept, dropped)
}

/// Pipeline settings read from a `key = value` file.
#[derive(Clone, Debug, PartialEq)]
pub struct CorpusConfig {
    pub val_fraction: f64,
    pub polyphony_threshold: f64,
    pub both_directions: bool,
    pub seed: u64,
    pub split_by: SplitUnit,
    /// Apply [`drop_leaked`] after splitting.
    pub drop_leaked: bool,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            val_fraction: 0.25,
            polyphony_threshold: 0.2,
            both_directions: false,
            seed: 7,
            split_by: SplitUnit::Piece,
            drop_leaked: true,
        }
    }
}

impl CorpusConfig {
    /// Apply recognised keys from a parsed config file; unknown keys are left
    /// for other stages.
    pub fn apply(&mut self, entries: &[(String, String)]) -> Result<(), CorpusError> {
        let bad = |k: &str, v: &str| CorpusError::Config(format!("invalid value {v:?} for {k}"));
        for (k, v) in entries {
            match k.as_str() {
                "val_fraction" => self.val_fraction = v.parse().map_err(|_| bad(k, v))?,
                "polyphony_threshold" => self.polyphony_threshold = v.parse().map_err(|_| bad(k, v))?,
                "both_directions" => self.both_directions = v.parse().map_err(|_| bad(k, v))?,
                "seed" => self.seed = v.parse().map_err(|_| bad(k, v))?,
                "split_by" => self.split_by = v.parse()?,
                "drop_leaked" => self.drop_leaked = v.parse().map_err(|_| bad(k, v))?,
                _ => {}
            }
        }
        Ok(())
    }
}

/// Counts reported after building a corpus.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct CorpusStats {
    pub pieces: usize,
    pub rejected_tracks: usize,
    pub pairs: usize,
    pub segments: usize,
    pub filtered: usize,
    pub train_units: usize,
    pub train: usize,
    pub validation: usize,
    /// Validation segments removed by [`drop_leaked`].
    pub leaked: usize,
}

impl CorpusStats {
    pub fn summary(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "pieces\t{}", self.pieces);
        let _ = writeln!(s, "rejected_tracks\t{}", self.rejected_tracks);
        let _ = writeln!(s, "pairs\t{}", self.pairs);
        let _ = writeln!(s, "segments\t{}", self.segments);
        let _ = writeln!(s, "segments_after_filter\t{}", self.filtered);
        let _ = writeln!(s, "train_before_augmentation\t{}", self.train_units);
        let _ = writeln!(s, "train\t{}", self.train);
        let _ = writeln!(s, "validation\t{}", self.validation);
        let _ = writeln!(s, "validation_leaks_dropped\t{}", self.leaked);
        s
    }
}

/// The assembled corpus.
#[derive(Clone, Debug, Default)]
pub struct Corpus {
    pub train: Vec<SegmentPair>,
    pub validation: Vec<SegmentPair>,
    pub stats: CorpusStats,
}

/// A parsed piece ready for the pipeline.
pub struct PieceInput<'a> {
    pub piece_id: String,
    pub piece: &'a crate::midi::MidiPiece,
}

/// Run the whole pipeline over parsed pieces.
pub fn build_corpus(pieces: &[PieceInput<'_>], config: &CorpusConfig) -> Result<Corpus, CorpusError> {
    let mut stats = CorpusStats { pieces: pieces.len(), ..Default::default() };
    let mut filtered = Vec::new();
    for input in pieces {
        let mut tracks = Vec::new();
        for raw in &input.piece.tracks {
            match monophonize(raw, input.piece.ppq, config.polyphony_threshold) {
                Ok(notes) if notes.iter().any(|n| !n.pitch.is_rest()) => tracks.push(notes),
                Ok(_) => {}
                Err(_) => stats.rejected_tracks += 1,
            }
        }
        let Ok(pairs) = enumerate_pairs(&input.piece_id, &tracks, &input.piece.meter_map(), config.both_directions)
        else {
            continue;
        };
        stats.pairs += pairs.len();
        for pair in &pairs {
            let segments = segment(pair);
            stats.segments += segments.len();
            filtered.extend(filter_segments(segments));
        }
    }
    stats.filtered = filtered.len();
    let (train, mut validation) = split(filtered, config.val_fraction, config.seed, config.split_by)?;
    if config.drop_leaked {
        (validation, stats.leaked) = drop_leaked(&train, validation);
    }
    stats.train_units = train.len();
    let train = transpose_augment(&train);
    stats.train = train.len();
    stats.validation = validation.len();
    Ok(Corpus { train, validation, stats })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn b(millis: i64) -> Beats {
        Beats::from_millis(millis)
    }

    fn raw(notes: &[(u64, u64, u8)]) -> RawTrack {
        RawTrack::new(0, notes.iter().map(|&(on, off, p)| RawNote { onset_tick: on, off_tick: off, pitch: p, velocity: 80 }).collect())
    }

    /// `n` quarter notes in a row, cycling over a few pitches.
    fn line(n: usize, base: u8) -> Vec<NoteEvent> {
        (0..n).map(|i| NoteEvent::note(base + (i % 5) as u8, Beats::whole(i as i64), Beats::whole(1))).collect()
    }

    fn pair(source: Vec<NoteEvent>, target: Vec<NoteEvent>) -> TrackPair {
        TrackPair {
            piece_id: "p".into(),
            pair_id: "p:0-1".into(),
            source_track: 0,
            target_track: 1,
            source,
            target,
            meters: MeterMap::default(),
        }
    }

    #[test]
    fn octave_doubling_keeps_upper_note() {
        let track = raw(&[(0, 480, 60), (0, 480, 72), (480, 960, 62)]);
        let mono = monophonize(&track, 480, 0.2).unwrap();
        assert_eq!(mono, vec![NoteEvent::note(72, Beats::ZERO, Beats::whole(1)), NoteEvent::note(62, Beats::whole(1), Beats::whole(1))]);
    }

    #[test]
    fn monophonic_track_gets_rests_in_gaps() {
        let track = raw(&[(240, 480, 60), (960, 1440, 64)]);
        let mono = monophonize(&track, 480, 0.2).unwrap();
        assert_eq!(mono, vec![
            NoteEvent::rest(Beats::ZERO, b(500)),
            NoteEvent::note(60, b(500), b(500)),
            NoteEvent::rest(Beats::whole(1), Beats::whole(1)),
            NoteEvent::note(64, Beats::whole(2), Beats::whole(1)),
        ]);
    }

    #[test]
    fn higher_entry_truncates_held_note() {
        let track = raw(&[(0, 960, 60), (480, 960, 67), (480, 720, 55)]);
        let mono = monophonize(&track, 480, 1.0).unwrap();
        assert_eq!(mono, vec![NoteEvent::note(60, Beats::ZERO, Beats::whole(1)), NoteEvent::note(67, Beats::whole(1), Beats::whole(1))]);
    }

    #[test]
    fn chordal_track_is_rejected() {
        // 10 onset times, 3 of them C-E-G triads: 30% > 20%
        let mut notes = Vec::new();
        for i in 0..10u64 {
            let (on, off) = (i * 480, i * 480 + 480);
            notes.push((on, off, 72));
            if i % 3 == 0 && i < 9 {
                notes.push((on, off, 64));
                notes.push((on, off, 67));
            }
        }
        let track = raw(&notes);
        assert!((simultaneity_ratio(&track) - 0.3).abs() < 1e-12);
        assert_eq!(monophonize(&track, 480, 0.2), Err(Rejected { simultaneity_ratio: 0.3 }));
        assert!(monophonize(&track, 480, 0.3).is_ok());
    }

    #[test]
    fn octave_doublings_are_not_simultaneities() {
        let track = raw(&[(0, 480, 60), (0, 480, 72), (480, 960, 62), (480, 960, 50)]);
        assert_eq!(simultaneity_ratio(&track), 0.0);
    }

    #[test]
    fn pair_counts_and_order() {
        let tracks: Vec<Vec<NoteEvent>> = (0..4).map(|i| line(4, 60 + i)).collect();
        assert!(matches!(enumerate_pairs("x", &tracks[..1], &MeterMap::default(), false), Err(CorpusError::EmptyResult { .. })));
        assert_eq!(enumerate_pairs("x", &tracks[..2], &MeterMap::default(), false).unwrap().len(), 1);
        assert_eq!(enumerate_pairs("x", &tracks[..3], &MeterMap::default(), false).unwrap().len(), 3);
        let four = enumerate_pairs("x", &tracks, &MeterMap::default(), false).unwrap();
        let order: Vec<(usize, usize)> = four.iter().map(|p| (p.source_track, p.target_track)).collect();
        assert_eq!(order, [(0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3)]);
        let both = enumerate_pairs("x", &tracks[..2], &MeterMap::default(), true).unwrap();
        assert_eq!(both.len(), 2);
        assert_eq!((both[1].source_track, both[1].target_track), (1, 0));
    }

    #[test]
    fn sixteen_bars_make_four_segments() {
        let segs = segment(&pair(line(64, 60), line(64, 48)));
        assert_eq!(segs.len(), 4);
        for (i, s) in segs.iter().enumerate() {
            assert_eq!(s.segment_index, i);
            assert_eq!(s.length, Beats::whole(16));
            assert_eq!(s.source.len(), 16);
            assert_eq!(s.source[0].onset, Beats::ZERO);
            assert_eq!(s.source[0].pitch, Pitch::Note(60 + ((16 * i) % 5) as u8));
        }
    }

    #[test]
    fn eighteen_bars_drop_the_tail() {
        assert_eq!(segment(&pair(line(72, 60), line(72, 48))).len(), 4);
    }

    #[test]
    fn boundary_crossing_note_is_truncated() {
        let mut source = line(15, 60);
        source.push(NoteEvent::note(70, Beats::whole(15), Beats::whole(2)));
        source.extend((17..32).map(|i| NoteEvent::note(60, Beats::whole(i), Beats::whole(1))));
        let segs = segment(&pair(source, line(32, 48)));
        assert_eq!(segs.len(), 2);
        let last = segs[0].source.last().unwrap();
        assert_eq!((last.pitch, last.onset, last.duration), (Pitch::Note(70), Beats::whole(15), Beats::whole(1)));
        // the held-over beat opens the next window as a rest
        assert_eq!(segs[1].source[0], NoteEvent::rest(Beats::ZERO, Beats::whole(1)));
    }

    #[test]
    fn three_four_windows() {
        let meters = MeterMap::constant(Meter::new(3, 4));
        let mut p = pair(line(24, 60), line(24, 48));
        p.meters = meters;
        let segs = segment(&p);
        assert_eq!(segs.len(), 2);
        assert_eq!(segs[1].length, Beats::whole(12));
        assert_eq!(segs[1].meter, Meter::new(3, 4));
    }

    #[test]
    fn filter_threshold() {
        let mk = |ns: usize, nt: usize| SegmentPair {
            piece_id: "p".into(),
            pair_id: "p:0-1".into(),
            segment_index: 0,
            source: line(ns, 60),
            target: line(nt, 48),
            bars: 4,
            meter: Meter::COMMON,
            meters: MeterMap::default(),
            length: Beats::whole(16),
            transposition: 0,
        };
        assert!(filter_segments(vec![mk(9, 30)]).is_empty());
        assert_eq!(filter_segments(vec![mk(10, 10)]).len(), 1);
        assert!(filter_segments(vec![]).is_empty());
    }

    #[test]
    fn transposition_basics() {
        let seg = &segment(&pair(line(16, 60), line(16, 48)))[0];
        assert_eq!(transpose(seg, 0), *seg);
        let up = transpose(seg, 3);
        assert_eq!(up.source[0].pitch, Pitch::Note(63));
        assert_eq!(up.transposition, 3);
        assert_eq!(transpose_augment(std::slice::from_ref(seg)).len(), 12);
    }

    #[test]
    fn out_of_range_transposition_moves_by_octave() {
        let mut seg = segment(&pair(line(16, 120), line(16, 100)))[0].clone();
        seg.source[0].pitch = Pitch::Note(124);
        let up = transpose(&seg, 6);
        // 124 + 6 = 130 → shifted down an octave
        assert_eq!(up.source[0].pitch, Pitch::Note(118));
        assert!(up.source.iter().chain(&up.target).all(|n| n.pitch.midi().unwrap() <= 127));
    }

    fn ten_pair_segments() -> Vec<SegmentPair> {
        (0..10)
            .flat_map(|p| {
                let mut tp = pair(line(160, 60), line(160, 48));
                tp.piece_id = format!("piece{p}");
                tp.pair_id = format!("piece{p}:0-1");
                segment(&tp)
            })
            .collect()
    }

    #[test]
    fn leaked_sources_leave_validation() {
        let seg = |piece: &str, source: Vec<NoteEvent>| SegmentPair { piece_id: piece.into(), ..segment(&pair(source, line(16, 50))).remove(0) };
        let train = vec![seg("a", line(16, 60))];
        // same melody a fourth higher, a different melody, and a rhythmic variant
        let mut varied = line(16, 60);
        varied[15].duration = b(500);
        let validation = vec![seg("b", line(16, 65)), seg("c", (0..16).map(|i| NoteEvent::note(60 + (i % 3) as u8, Beats::whole(i as i64), Beats::whole(1))).collect()), seg("d", varied)];
        let (kept, dropped) = drop_leaked(&train, validation);
        assert_eq!(dropped, 1);
        assert_eq!(kept.iter().map(|s| s.piece_id.as_str()).collect::<Vec<_>>(), ["c", "d"]);
    }

    #[test]
    fn split_is_disjoint_and_deterministic() {
        let segs = ten_pair_segments();
        assert_eq!(segs.len(), 100);
        for unit in [SplitUnit::Pair, SplitUnit::Piece] {
            let (train, val) = split(segs.clone(), 0.2, 7, unit).unwrap();
            assert_eq!(train.len() + val.len(), 100);
            assert_eq!(val.len(), 20);
            let train_ids: BTreeSet<_> = train.iter().map(|s| s.pair_id.clone()).collect();
            assert!(val.iter().all(|s| !train_ids.contains(&s.pair_id)));
            let (train2, val2) = split(segs.clone(), 0.2, 7, unit).unwrap();
            assert_eq!((train2, val2), (train, val));
        }
        assert!(matches!(split(segs, 1.0, 7, SplitUnit::Pair), Err(CorpusError::Fraction(_))));
    }

    #[test]
    fn swapped_twins_share_a_split_key() {
        let mut a = ten_pair_segments()[0].clone();
        let key = split_key(&a, SplitUnit::Pair);
        a.pair_id = "piece0:1-0".into();
        assert_eq!(split_key(&a, SplitUnit::Pair), key);
    }

    #[test]
    fn config_keys() {
        let mut cfg = CorpusConfig::default();
        let entries = vec![
            ("val_fraction".to_string(), "0.1".to_string()),
            ("both_directions".to_string(), "true".to_string()),
            ("seed".to_string(), "3".to_string()),
            ("split_by".to_string(), "pair".to_string()),
            ("d_model".to_string(), "64".to_string()),
        ];
        cfg.apply(&entries).unwrap();
        assert_eq!(cfg.val_fraction, 0.1);
        assert!(cfg.both_directions);
        assert_eq!(cfg.seed, 3);
        assert_eq!(cfg.split_by, SplitUnit::Pair);
        assert!(cfg.apply(&[("seed".into(), "x".into())]).is_err());
    }
}
