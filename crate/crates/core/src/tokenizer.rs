//! Word-level encoding of note sequences.
//!
//! Every note or rest becomes a pitch word, a duration word and (unless the
//! variant is [`Variant::None`]) a beat-position word:
//!
//! ```text
//! <s> P60 D1.000 B0.000 PR D0.500 B1.000 P62 D0.500 B1.500 </s>
//! ```

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::str::FromStr;

use thiserror::Error;

use crate::midi::{NoteEvent, Pitch};
use crate::time::{Beats, MeterMap};

/// How the beat-position word is computed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Variant {
    /// Beats from the start of the segment.
    BeatPosition,
    /// Position within the current measure, downbeat = 0.
    ModBeatPosition,
    /// No beat word at all.
    None,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::None, Variant::BeatPosition, Variant::ModBeatPosition];

    pub fn has_beat_words(self) -> bool {
        self != Variant::None
    }

    pub fn words_per_note(self) -> usize {
        if self.has_beat_words() {
            3
        } else {
            2
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::BeatPosition => "beat-position",
            Variant::ModBeatPosition => "mod-beat-position",
            Variant::None => "none",
        }
    }

    /// Beat word expected for a note starting at `onset`.
    pub fn beat_value(self, onset: Beats, meters: &MeterMap) -> Option<Beats> {
        match self {
            Variant::BeatPosition => Some(onset),
            Variant::ModBeatPosition => Some(meters.position_in_measure(onset)),
            Variant::None => None,
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
#[error("unknown variant {0:?} (expected beat, mod-beat or none)")]
pub struct ParseVariantError(pub String);

impl FromStr for Variant {
    type Err = ParseVariantError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "beat" | "beat-position" => Ok(Variant::BeatPosition),
            "mod-beat" | "mod-beat-position" => Ok(Variant::ModBeatPosition),
            "none" | "no-beat" => Ok(Variant::None),
            other => Err(ParseVariantError(other.to_string())),
        }
    }
}

/// One vocabulary item. The derived order is the vocabulary order:
/// specials, pitches ascending, rest, durations ascending, beats ascending.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Word {
    Start,
    End,
    Unk,
    Pad,
    Pitch(u8),
    Rest,
    Duration(Beats),
    Beat(Beats),
}

impl Word {
    pub const SPECIALS: [Word; 4] = [Word::Start, Word::End, Word::Unk, Word::Pad];

    pub fn pitch(pitch: Pitch) -> Word {
        match pitch {
            Pitch::Note(p) => Word::Pitch(p),
            Pitch::Rest => Word::Rest,
        }
    }

    pub fn is_pitch(self) -> bool {
        matches!(self, Word::Pitch(_) | Word::Rest)
    }

    pub fn is_duration(self) -> bool {
        matches!(self, Word::Duration(_))
    }

    pub fn is_beat(self) -> bool {
        matches!(self, Word::Beat(_))
    }

    pub fn is_special(self) -> bool {
        matches!(self, Word::Start | Word::End | Word::Unk | Word::Pad)
    }
}

impl fmt::Display for Word {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Word::Start => f.write_str("<s>"),
            Word::End => f.write_str("</s>"),
            Word::Unk => f.write_str("<unk>"),
            Word::Pad => f.write_str("<pad>"),
            Word::Pitch(p) => write!(f, "P{p}"),
            Word::Rest => f.write_str("PR"),
            Word::Duration(d) => write!(f, "D{d}"),
            Word::Beat(b) => write!(f, "B{b}"),
        }
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
#[error("invalid word {0:?}")]
pub struct ParseWordError(pub String);

impl FromStr for Word {
    type Err = ParseWordError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let err = || ParseWordError(s.to_string());
        match s {
            "<s>" => return Ok(Word::Start),
            "</s>" => return Ok(Word::End),
            "<unk>" => return Ok(Word::Unk),
            "<pad>" => return Ok(Word::Pad),
            "PR" => return Ok(Word::Rest),
            _ => {}
        }
        if let Some(p) = s.strip_prefix('P') {
            if p.is_empty() || !p.bytes().all(|b| b.is_ascii_digit()) || (p.len() > 1 && p.starts_with('0')) {
                return Err(err());
            }
            let p: u8 = p.parse().map_err(|_| err())?;
            return if p <= 127 { Ok(Word::Pitch(p)) } else { Err(err()) };
        }
        if let Some(d) = s.strip_prefix('D') {
            let d: Beats = d.parse().map_err(|_| err())?;
            return if d > Beats::ZERO { Ok(Word::Duration(d)) } else { Err(err()) };
        }
        if let Some(b) = s.strip_prefix('B') {
            let b: Beats = b.parse().map_err(|_| err())?;
            return if b.is_negative() { Err(err()) } else { Ok(Word::Beat(b)) };
        }
        Err(err())
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TokenizerError {
    #[error("note {index}: {reason}")]
    Encoding { index: usize, reason: String },
    #[error("grammar violation at token {index}: expected {expected}, found {found}")]
    Grammar { index: usize, expected: &'static str, found: String },
    #[error("line {line}: {source}")]
    Parse { line: usize, source: ParseWordError },
}

/// An encoded part.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenSequence {
    pub words: Vec<Word>,
    pub variant: Variant,
    pub meters: MeterMap,
}

impl TokenSequence {
    /// Space-separated words, as stored in token files.
    pub fn to_line(&self) -> String {
        words_to_line(&self.words)
    }

    pub fn from_line(line: &str, variant: Variant, meters: MeterMap) -> Result<Self, ParseWordError> {
        Ok(TokenSequence { words: parse_words(line)?, variant, meters })
    }

    /// Number of notes implied by the sequence length.
    pub fn note_count(&self) -> usize {
        self.words.len().saturating_sub(2) / self.variant.words_per_note()
    }
}

pub fn words_to_line(words: &[Word]) -> String {
    words.iter().map(Word::to_string).collect::<Vec<_>>().join(" ")
}

pub fn parse_words(line: &str) -> Result<Vec<Word>, ParseWordError> {
    line.split_whitespace().map(str::parse).collect()
}

/// Encode a contiguous note sequence starting at beat 0.
///
/// Notes must follow each other without gaps (rests fill silences), so that
/// decoding by cumulative duration recovers the onsets exactly.
pub fn encode(notes: &[NoteEvent], variant: Variant, meters: &MeterMap) -> Result<TokenSequence, TokenizerError> {
    let mut words = Vec::with_capacity(2 + notes.len() * variant.words_per_note());
    words.push(Word::Start);
    let mut expected_onset = Beats::ZERO;
    for (index, note) in notes.iter().enumerate() {
        if note.onset.is_negative() || note.duration.is_negative() {
            return Err(TokenizerError::Encoding { index, reason: "negative onset or duration".into() });
        }
        if note.duration == Beats::ZERO {
            return Err(TokenizerError::Encoding { index, reason: "zero duration".into() });
        }
        if let Pitch::Note(p) = note.pitch {
            if p > 127 {
                return Err(TokenizerError::Encoding { index, reason: format!("pitch {p} out of range") });
            }
        }
        if note.onset != expected_onset {
            return Err(TokenizerError::Encoding {
                index,
                reason: format!("onset {} but previous material ends at {expected_onset}", note.onset),
            });
        }
        words.push(Word::pitch(note.pitch));
        words.push(Word::Duration(note.duration));
        if let Some(beat) = variant.beat_value(note.onset, meters) {
            words.push(Word::Beat(beat));
        }
        expected_onset = note.end();
    }
    words.push(Word::End);
    Ok(TokenSequence { words, variant, meters: meters.clone() })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DecodeMode {
    /// Any grammar violation is an error.
    Strict,
    /// Out-of-place words are skipped and counted.
    Lenient,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Decoded {
    pub notes: Vec<NoteEvent>,
    /// Words dropped in lenient mode.
    pub skipped: usize,
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Expect {
    Start,
    Pitch,
    Duration,
    Beat,
    Done,
}

impl Expect {
    fn describe(self) -> &'static str {
        match self {
            Expect::Start => "<s>",
            Expect::Pitch => "pitch word or </s>",
            Expect::Duration => "duration word",
            Expect::Beat => "beat word",
            Expect::Done => "end of sequence",
        }
    }
}

/// Reconstruct notes from pitch and duration words; beat words are skipped.
pub fn decode(tokens: &TokenSequence, mode: DecodeMode) -> Result<Decoded, TokenizerError> {
    decode_words(&tokens.words, tokens.variant, mode)
}

pub fn decode_words(words: &[Word], variant: Variant, mode: DecodeMode) -> Result<Decoded, TokenizerError> {
    let mut notes = Vec::new();
    let mut skipped = 0;
    let mut state = Expect::Start;
    let mut onset = Beats::ZERO;
    let mut pending: Option<Pitch> = None;

    for (index, &word) in words.iter().enumerate() {
        let accepted = match (state, word) {
            (Expect::Start, Word::Start) => {
                state = Expect::Pitch;
                true
            }
            (Expect::Pitch, Word::Pitch(p)) => {
                pending = Some(Pitch::Note(p));
                state = Expect::Duration;
                true
            }
            (Expect::Pitch, Word::Rest) => {
                pending = Some(Pitch::Rest);
                state = Expect::Duration;
                true
            }
            (Expect::Pitch, Word::End) => {
                state = Expect::Done;
                true
            }
            (Expect::Duration, Word::Duration(d)) => {
                let pitch = pending.take().expect("pitch precedes duration");
                notes.push(NoteEvent { pitch, duration: d, onset });
                onset += d;
                state = if variant.has_beat_words() { Expect::Beat } else { Expect::Pitch };
                true
            }
            (Expect::Beat, Word::Beat(_)) => {
                state = Expect::Pitch;
                true
            }
            _ => false,
        };
        if !accepted {
            match mode {
                DecodeMode::Strict => {
                    return Err(TokenizerError::Grammar {
                        index,
                        expected: state.describe(),
                        found: word.to_string(),
                    })
                }
                DecodeMode::Lenient => {
                    // a missing beat word is tolerated: resume at the next pitch
                    if state == Expect::Beat && word.is_pitch() {
                        pending = Some(match word {
                            Word::Pitch(p) => Pitch::Note(p),
                            _ => Pitch::Rest,
                        });
                        state = Expect::Duration;
                    } else {
                        skipped += 1;
                    }
                }
            }
        }
    }
    if state != Expect::Done {
        match mode {
            DecodeMode::Strict => {
                return Err(TokenizerError::Grammar {
                    index: words.len(),
                    expected: state.describe(),
                    found: "end of input".into(),
                })
            }
            DecodeMode::Lenient => {
                if pending.is_some() {
                    skipped += 1;
                }
            }
        }
    }
    Ok(Decoded { notes, skipped })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BeatViolation {
    /// Index of the beat word in the sequence.
    pub index: usize,
    pub expected: Beats,
    pub found: Beats,
}

/// Compare each emitted beat word with the position implied by the
/// durations that precede it. Returns no violations for `Variant::None`.
pub fn validate_beats(tokens: &TokenSequence) -> Vec<BeatViolation> {
    let mut violations = Vec::new();
    let mut onset = Beats::ZERO;
    let mut note_onset = Beats::ZERO;
    for (index, word) in tokens.words.iter().enumerate() {
        match *word {
            Word::Duration(d) => {
                note_onset = onset;
                onset += d;
            }
            Word::Beat(found) => {
                if let Some(expected) = tokens.variant.beat_value(note_onset, &tokens.meters) {
                    if expected != found {
                        violations.push(BeatViolation { index, expected, found });
                    }
                }
            }
            _ => {}
        }
    }
    violations
}

/// Bijection between words and integer ids.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    words: Vec<Word>,
    index: HashMap<Word, usize>,
}

impl Vocabulary {
    pub const START: usize = 0;
    pub const END: usize = 1;
    pub const UNK: usize = 2;
    pub const PAD: usize = 3;

    /// Specials plus every given word, in canonical order.
    pub fn from_words<I: IntoIterator<Item = Word>>(words: I) -> Self {
        let set: BTreeSet<Word> = words.into_iter().chain(Word::SPECIALS).collect();
        let words: Vec<Word> = set.into_iter().collect();
        let index = words.iter().enumerate().map(|(i, w)| (*w, i)).collect();
        Vocabulary { words, index }
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn words(&self) -> &[Word] {
        &self.words
    }

    pub fn word(&self, id: usize) -> Word {
        self.words.get(id).copied().unwrap_or(Word::Unk)
    }

    pub fn get(&self, word: Word) -> Option<usize> {
        self.index.get(&word).copied()
    }

    /// Id for `word`, `<unk>` when absent.
    pub fn id(&self, word: Word) -> usize {
        self.get(word).unwrap_or(Self::UNK)
    }

    /// Map words to ids, counting how many were unknown.
    pub fn ids(&self, words: &[Word]) -> (Vec<usize>, usize) {
        let mut unknown = 0;
        let ids = words
            .iter()
            .map(|w| {
                self.get(*w).unwrap_or_else(|| {
                    unknown += 1;
                    Self::UNK
                })
            })
            .collect();
        (ids, unknown)
    }

    pub fn lookup(&self, ids: &[usize]) -> Vec<Word> {
        ids.iter().map(|&id| self.word(id)).collect()
    }

    /// One word per line; the line number is the id.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for w in &self.words {
            s.push_str(&w.to_string());
            s.push('\n');
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self, TokenizerError> {
        let mut words = Vec::new();
        for (line, raw) in text.lines().enumerate() {
            let raw = raw.trim();
            if raw.is_empty() {
                continue;
            }
            words.push(raw.parse().map_err(|source| TokenizerError::Parse { line: line + 1, source })?);
        }
        Ok(Vocabulary::from_words(words))
    }
}

/// Union of all words in the corpus plus the four specials.
pub fn build_vocabulary<'a, I>(corpus: I) -> Vocabulary
where
    I: IntoIterator<Item = &'a TokenSequence>,
{
    Vocabulary::from_words(corpus.into_iter().flat_map(|seq| seq.words.iter().copied()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::time::Meter;

    fn b(millis: i64) -> Beats {
        Beats::from_millis(millis)
    }

    fn line(words: &[Word]) -> String {
        words_to_line(words)
    }

    fn common() -> MeterMap {
        MeterMap::constant(Meter::COMMON)
    }

    #[test]
    fn word_spellings() {
        for s in ["<s>", "</s>", "<unk>", "<pad>", "P60", "P0", "P127", "PR", "D0.500", "B1.500", "B0.000"] {
            assert_eq!(s.parse::<Word>().unwrap().to_string(), s);
        }
        for bad in ["P128", "P060", "P", "D0.5", "D0.000", "B-1.000", "X1", "p60"] {
            assert!(bad.parse::<Word>().is_err(), "{bad}");
        }
    }

    #[test]
    fn downbeat_is_zero_in_mod_variant() {
        let notes = [NoteEvent::note(60, Beats::ZERO, b(1000))];
        let seq = encode(&notes, Variant::ModBeatPosition, &common()).unwrap();
        assert_eq!(seq.words[3], Word::Beat(Beats::ZERO));
        assert_eq!(seq.words[3].to_string(), "B0.000");
    }

    #[test]
    fn three_eighths_in_is_position_one_and_a_half() {
        let notes: Vec<_> = (0..4).map(|i| NoteEvent::note(60 + i as u8, b(500 * i), b(500))).collect();
        let seq = encode(&notes, Variant::ModBeatPosition, &common()).unwrap();
        assert_eq!(seq.words[3 * 3 + 3].to_string(), "B1.500");
    }

    #[test]
    fn second_measure_downbeat() {
        let notes = [NoteEvent::note(60, Beats::ZERO, b(4000)), NoteEvent::note(62, b(4000), b(1000))];
        let beat = encode(&notes, Variant::BeatPosition, &common()).unwrap();
        let modb = encode(&notes, Variant::ModBeatPosition, &common()).unwrap();
        assert_eq!(beat.words[6].to_string(), "B4.000");
        assert_eq!(modb.words[6].to_string(), "B0.000");
    }

    #[test]
    fn variant_none_has_no_beat_words() {
        let notes = [NoteEvent::note(60, Beats::ZERO, b(1000)), NoteEvent::rest(b(1000), b(500))];
        let seq = encode(&notes, Variant::None, &common()).unwrap();
        assert_eq!(seq.to_line(), "<s> P60 D1.000 PR D0.500 </s>");
    }

    #[test]
    fn encode_rejects_negative_and_gaps() {
        let neg = [NoteEvent::note(60, b(-1000), b(1000))];
        assert!(matches!(encode(&neg, Variant::None, &common()), Err(TokenizerError::Encoding { index: 0, .. })));
        let gap = [NoteEvent::note(60, Beats::ZERO, b(1000)), NoteEvent::note(62, b(2000), b(1000))];
        assert!(matches!(encode(&gap, Variant::None, &common()), Err(TokenizerError::Encoding { index: 1, .. })));
    }

    #[test]
    fn decode_by_cumulative_duration() {
        let seq = TokenSequence::from_line("<s> P60 D1.000 P62 D1.000 </s>", Variant::None, common()).unwrap();
        let decoded = decode(&seq, DecodeMode::Strict).unwrap();
        assert_eq!(decoded.notes, vec![
            NoteEvent::note(60, Beats::ZERO, b(1000)),
            NoteEvent::note(62, b(1000), b(1000)),
        ]);
    }

    #[test]
    fn strict_decode_reports_index() {
        let seq = TokenSequence::from_line("<s> P60 P62 D1.000 </s>", Variant::None, common()).unwrap();
        assert_eq!(
            decode(&seq, DecodeMode::Strict),
            Err(TokenizerError::Grammar { index: 2, expected: "duration word", found: "P62".into() })
        );
        let missing_end = TokenSequence::from_line("<s> P60 D1.000", Variant::None, common()).unwrap();
        assert!(matches!(decode(&missing_end, DecodeMode::Strict), Err(TokenizerError::Grammar { index: 3, .. })));
    }

    #[test]
    fn lenient_decode_skips_and_counts() {
        let seq = TokenSequence::from_line("<s> P60 P62 D1.000 D2.000 P64 D1.000 </s>", Variant::None, common()).unwrap();
        let decoded = decode(&seq, DecodeMode::Lenient).unwrap();
        assert_eq!(decoded.skipped, 2);
        assert_eq!(decoded.notes, vec![NoteEvent::note(60, Beats::ZERO, b(1000)), NoteEvent::note(64, b(1000), b(1000))]);
    }

    #[test]
    fn lenient_decode_tolerates_missing_beat_word() {
        let seq =
            TokenSequence::from_line("<s> P60 D1.000 P62 D1.000 B1.000 </s>", Variant::BeatPosition, common()).unwrap();
        let decoded = decode(&seq, DecodeMode::Lenient).unwrap();
        assert_eq!(decoded.skipped, 0);
        assert_eq!(decoded.notes.len(), 2);
        assert!(decode(&seq, DecodeMode::Strict).is_err());
    }

    #[test]
    fn encoded_sequences_validate_cleanly() {
        let notes: Vec<_> = (0..6).map(|i| NoteEvent::note(60 + i as u8, b(750 * i), b(750))).collect();
        for variant in [Variant::BeatPosition, Variant::ModBeatPosition] {
            let seq = encode(&notes, variant, &common()).unwrap();
            assert!(validate_beats(&seq).is_empty());
        }
        let single = TokenSequence::from_line("P60 D1.000 B0.000", Variant::BeatPosition, common()).unwrap();
        assert!(validate_beats(&single).is_empty());
    }

    #[test]
    fn doubled_duration_flags_every_later_note() {
        let notes: Vec<_> = (0..5).map(|i| NoteEvent::note(60, b(1000 * i), b(1000))).collect();
        let mut seq = encode(&notes, Variant::BeatPosition, &common()).unwrap();
        // note 1's duration word sits at 1 + 3*1 + 1
        seq.words[5] = Word::Duration(b(2000));
        let violations = validate_beats(&seq);
        assert_eq!(violations.len(), 3);
        for (k, v) in violations.iter().enumerate() {
            let note = k + 2;
            assert_eq!(v.index, 1 + 3 * note + 2);
            assert_eq!(v.found, b(1000 * note as i64));
            assert_eq!(v.expected, b(1000 * note as i64 + 1000));
        }
    }

    #[test]
    fn vocabulary_counts_and_order() {
        let seq = TokenSequence::from_line("P60 D1.000 B0.000", Variant::BeatPosition, common()).unwrap();
        let vocab = build_vocabulary([&seq]);
        assert_eq!(vocab.len(), 7);
        assert_eq!(vocab.id(Word::Start), Vocabulary::START);
        assert_eq!(vocab.id(Word::End), Vocabulary::END);
        assert_eq!(vocab.id(Word::Unk), Vocabulary::UNK);
        assert_eq!(vocab.id(Word::Pad), Vocabulary::PAD);
        assert_eq!(vocab.words()[4..], [Word::Pitch(60), Word::Duration(b(1000)), Word::Beat(Beats::ZERO)]);
        assert_eq!(vocab.id(Word::Pitch(61)), Vocabulary::UNK);
    }

    #[test]
    fn vocabulary_is_order_independent() {
        let a = TokenSequence::from_line("P62 D1.000 P60 D0.500 PR D2.000", Variant::None, common()).unwrap();
        let b2 = TokenSequence::from_line("PR D0.500 P60 D2.000 P62 D1.000", Variant::None, common()).unwrap();
        assert_eq!(build_vocabulary([&a]), build_vocabulary([&b2]));
        assert_eq!(line(build_vocabulary([&a]).words()), "<s> </s> <unk> <pad> P60 P62 PR D0.500 D1.000 D2.000");
    }

    #[test]
    fn vocabulary_text_round_trip() {
        let a = TokenSequence::from_line("<s> P62 D1.000 B0.000 </s>", Variant::BeatPosition, common()).unwrap();
        let vocab = build_vocabulary([&a]);
        assert_eq!(Vocabulary::from_text(&vocab.to_text()).unwrap(), vocab);
        assert_eq!(vocab.to_text().lines().nth(4), Some("P62"));
    }

    #[test]
    fn token_count_formula() {
        let notes: Vec<_> = (0..7).map(|i| NoteEvent::note(60, b(250 * i), b(250))).collect();
        for variant in Variant::ALL {
            let seq = encode(&notes, variant, &common()).unwrap();
            assert_eq!(seq.words.len(), 2 + 7 * variant.words_per_note());
            assert_eq!(seq.note_count(), 7);
        }
    }

    #[test]
    fn mod_beat_follows_meter_changes() {
        // 3/4 bar then 2/4 bar
        let meters = MeterMap::new(vec![(Beats::ZERO, Meter::new(3, 4)), (b(3000), Meter::new(2, 4))]);
        let notes: Vec<_> = (0..5).map(|i| NoteEvent::note(60, b(1000 * i), b(1000))).collect();
        let seq = encode(&notes, Variant::ModBeatPosition, &meters).unwrap();
        let beats: Vec<String> = seq.words.iter().filter(|w| w.is_beat()).map(Word::to_string).collect();
        assert_eq!(beats, ["B0.000", "B1.000", "B2.000", "B0.000", "B1.000"]);
    }
}
