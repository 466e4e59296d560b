//! Sentence-level BLEU over pitch, duration and combined word streams, and
//! note-level edit distance for detecting copied training targets.

use std::collections::{HashMap, HashSet};
use std::fmt::Write as _;
use std::hash::Hash;

use thiserror::Error;

use crate::midi::{NoteEvent, Pitch};
use crate::time::Beats;
use crate::tokenizer::{decode_words, DecodeMode, TokenSequence, TokenizerError, Variant, Word};

#[derive(Debug, Error, PartialEq)]
pub enum MetricError {
    #[error("reference is empty")]
    EmptyReference,
    #[error("max_n must be at least 1")]
    MaxN,
    #[error("{0} must not be empty")]
    Empty(&'static str),
    #[error("candidates and references are not aligned: {0}")]
    Alignment(String),
    #[error(transparent)]
    Grammar(#[from] TokenizerError),
}

#[derive(Clone, Debug, PartialEq)]
pub struct BleuScore {
    /// In [0, 100].
    pub score: f64,
    /// Modified n-gram precisions p_1..p_max_n after smoothing.
    pub precisions: Vec<f64>,
    pub brevity_penalty: f64,
    /// Set when the candidate was empty (score is then 0).
    pub empty_candidate: bool,
}

fn ngram_counts<W: Eq + Hash>(words: &[W], n: usize) -> HashMap<&[W], usize> {
    let mut counts = HashMap::new();
    for g in words.windows(n) {
        *counts.entry(g).or_insert(0) += 1;
    }
    counts
}

/// Sentence BLEU: geometric mean of clipped n-gram precisions times the
/// brevity penalty `min(1, e^(1 − |ref|/|cand|))`, scaled to 100. With
/// `smoothing`, precisions for n ≥ 2 become `(matches + 1) / (total + 1)`.
/// A precision with zero denominator counts as 1.
pub fn bleu<W: Eq + Hash>(candidate: &[W], reference: &[W], max_n: usize, smoothing: bool) -> Result<BleuScore, MetricError> {
    if max_n == 0 {
        return Err(MetricError::MaxN);
    }
    if reference.is_empty() {
        return Err(MetricError::EmptyReference);
    }
    if candidate.is_empty() {
        return Ok(BleuScore { score: 0.0, precisions: vec![0.0; max_n], brevity_penalty: 0.0, empty_candidate: true });
    }
    let mut precisions = Vec::with_capacity(max_n);
    for n in 1..=max_n {
        let cand = ngram_counts(candidate, n);
        let refc = ngram_counts(reference, n);
        let matches: usize = cand.iter().map(|(g, &c)| c.min(refc.get(g).copied().unwrap_or(0))).sum();
        let total = candidate.len().saturating_sub(n - 1);
        let (num, den) = if smoothing && n >= 2 { (matches + 1, total + 1) } else { (matches, total) };
        precisions.push(if den == 0 { 1.0 } else { num as f64 / den as f64 });
    }
    let brevity_penalty = (1.0 - reference.len() as f64 / candidate.len() as f64).exp().min(1.0);
    let score = if precisions.iter().any(|&p| p == 0.0) {
        0.0
    } else {
        let log_mean = precisions.iter().map(|p| p.ln()).sum::<f64>() / max_n as f64;
        100.0 * brevity_penalty * log_mean.exp()
    };
    Ok(BleuScore { score, precisions, brevity_penalty, empty_candidate: false })
}

/// Word streams compared by the three BLEU columns.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Streams {
    pub pitch: Vec<Word>,
    pub duration: Vec<Word>,
    /// Pitch and duration words in their original interleaved order.
    pub combined: Vec<Word>,
}

/// Drop beat words and sentence markers. In strict mode the sequence must
/// first satisfy the note grammar.
pub fn extract_streams(words: &[Word], variant: Variant, mode: DecodeMode) -> Result<Streams, TokenizerError> {
    if mode == DecodeMode::Strict {
        decode_words(words, variant, DecodeMode::Strict)?;
    }
    let mut s = Streams::default();
    for &w in words {
        if w.is_pitch() {
            s.pitch.push(w);
            s.combined.push(w);
        } else if w.is_duration() {
            s.duration.push(w);
            s.combined.push(w);
        }
    }
    Ok(s)
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct MeanStd {
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> Self {
        if values.is_empty() {
            return MeanStd::default();
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        MeanStd { mean, std: var.sqrt() }
    }
}

impl std::fmt::Display for MeanStd {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:.1}±{:.1}", self.mean, self.std)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SegmentScore {
    pub id: String,
    pub pitch: f64,
    pub duration: f64,
    pub combined: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BleuReport {
    pub per_segment: Vec<SegmentScore>,
    pub pitch: MeanStd,
    pub duration: MeanStd,
    pub combined: MeanStd,
    /// Candidates with no pitch or duration words at all.
    pub empty_candidates: usize,
}

pub const PITCH_MAX_N: usize = 4;
pub const DURATION_MAX_N: usize = 4;
pub const COMBINED_MAX_N: usize = 8;

/// Score each candidate against the reference with the same id: pitch and
/// duration streams with n up to 4, the interleaved stream with n up to 8,
/// all with smoothing. References must be grammatical; candidates are
/// filtered leniently.
pub fn evaluate(candidates: &[(String, TokenSequence)], references: &[(String, TokenSequence)]) -> Result<BleuReport, MetricError> {
    if candidates.len() != references.len() {
        return Err(MetricError::Alignment(format!(
            "{} candidates for {} references",
            candidates.len(),
            references.len()
        )));
    }
    let by_id: HashMap<&str, &TokenSequence> = references.iter().map(|(id, t)| (id.as_str(), t)).collect();
    if by_id.len() != references.len() {
        return Err(MetricError::Alignment("duplicate reference id".into()));
    }
    let mut seen = HashSet::new();
    let mut per_segment = Vec::with_capacity(candidates.len());
    let mut empty_candidates = 0;
    for (id, cand) in candidates {
        let reference = by_id.get(id.as_str()).ok_or_else(|| MetricError::Alignment(format!("no reference for {id}")))?;
        if !seen.insert(id.as_str()) {
            return Err(MetricError::Alignment(format!("duplicate candidate id {id}")));
        }
        let r = extract_streams(&reference.words, reference.variant, DecodeMode::Strict)?;
        let c = extract_streams(&cand.words, cand.variant, DecodeMode::Lenient)?;
        let pitch = bleu(&c.pitch, &r.pitch, PITCH_MAX_N, true)?;
        let duration = bleu(&c.duration, &r.duration, DURATION_MAX_N, true)?;
        let combined = bleu(&c.combined, &r.combined, COMBINED_MAX_N, true)?;
        if combined.empty_candidate {
            empty_candidates += 1;
        }
        per_segment.push(SegmentScore { id: id.clone(), pitch: pitch.score, duration: duration.score, combined: combined.score });
    }
    let column = |f: fn(&SegmentScore) -> f64| MeanStd::of(&per_segment.iter().map(f).collect::<Vec<_>>());
    Ok(BleuReport {
        pitch: column(|s| s.pitch),
        duration: column(|s| s.duration),
        combined: column(|s| s.combined),
        per_segment,
        empty_candidates,
    })
}

impl BleuReport {
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("segment\tpitch_bleu\tduration_bleu\tcombined_bleu\n");
        for s in &self.per_segment {
            let _ = writeln!(out, "{}\t{:.4}\t{:.4}\t{:.4}", s.id, s.pitch, s.duration, s.combined);
        }
        let _ = writeln!(out, "#mean\t{:.4}\t{:.4}\t{:.4}", self.pitch.mean, self.duration.mean, self.combined.mean);
        let _ = writeln!(out, "#std\t{:.4}\t{:.4}\t{:.4}", self.pitch.std, self.duration.std, self.combined.std);
        out
    }
}

/// Results table with one row per encoding and Mean±Std per metric.
pub fn results_table(rows: &[(Variant, &BleuReport)]) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{:<20} {:>12} {:>12} {:>12}", "Encoding", "Pitch", "Duration", "Combined");
    for (variant, r) in rows {
        let _ = writeln!(
            out,
            "{:<20} {:>12} {:>12} {:>12}",
            variant.name(),
            r.pitch.to_string(),
            r.duration.to_string(),
            r.combined.to_string()
        );
    }
    out
}

/// A note as compared by the memorisation scan.
pub type NoteTuple = (Pitch, Beats);

pub fn note_tuples(notes: &[NoteEvent]) -> Vec<NoteTuple> {
    notes.iter().map(|n| (n.pitch, n.duration)).collect()
}

/// Unit-cost Levenshtein distance.
pub fn edit_distance<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

#[derive(Clone, Debug, PartialEq)]
pub struct NearestTarget {
    pub response_id: String,
    pub distance: usize,
    pub target_id: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MemorizationReport {
    pub per_response: Vec<NearestTarget>,
    /// Over every (training target, response) pair.
    pub all_pairs: MeanStd,
    /// Over the per-response minima.
    pub nearest: MeanStd,
    /// Responses identical to some training target.
    pub exact_copy_count: usize,
}

/// Compare every response with every training target.
pub fn memorization_scan(
    responses: &[(String, Vec<NoteTuple>)],
    training_targets: &[(String, Vec<NoteTuple>)],
) -> Result<MemorizationReport, MetricError> {
    if responses.is_empty() {
        return Err(MetricError::Empty("responses"));
    }
    if training_targets.is_empty() {
        return Err(MetricError::Empty("training targets"));
    }
    let mut all = Vec::with_capacity(responses.len() * training_targets.len());
    let mut per_response = Vec::with_capacity(responses.len());
    for (rid, r) in responses {
        let mut best: Option<(usize, &str)> = None;
        for (tid, t) in training_targets {
            let d = edit_distance(r, t);
            all.push(d as f64);
            if best.map_or(true, |(bd, _)| d < bd) {
                best = Some((d, tid));
            }
        }
        let (distance, target_id) = best.expect("targets are nonempty");
        per_response.push(NearestTarget { response_id: rid.clone(), distance, target_id: target_id.to_string() });
    }
    let minima: Vec<f64> = per_response.iter().map(|n| n.distance as f64).collect();
    Ok(MemorizationReport {
        all_pairs: MeanStd::of(&all),
        nearest: MeanStd::of(&minima),
        exact_copy_count: per_response.iter().filter(|n| n.distance == 0).count(),
        per_response,
    })
}

impl MemorizationReport {
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("response\tmin_distance\tnearest_target\n");
        for n in &self.per_response {
            let _ = writeln!(out, "{}\t{}\t{}", n.response_id, n.distance, n.target_id);
        }
        let _ = writeln!(out, "#all_pairs\t{:.4}\t{:.4}", self.all_pairs.mean, self.all_pairs.std);
        let _ = writeln!(out, "#nearest\t{:.4}\t{:.4}", self.nearest.mean, self.nearest.std);
        let _ = writeln!(out, "#exact_copies\t{}", self.exact_copy_count);
        out
    }

    pub fn summary(&self) -> String {
        format!(
            "edit distance over all pairs {:.2}±{:.2}; nearest-target {:.2}±{:.2}; exact copies {}",
            self.all_pairs.mean, self.all_pairs.std, self.nearest.mean, self.nearest.std, self.exact_copy_count
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::time::MeterMap;

    fn words(s: &str) -> Vec<&str> {
        s.split_whitespace().collect()
    }

    #[test]
    fn identical_sentences_score_100() {
        let x = words("a b c d e");
        let s = bleu(&x, &x, 4, true).unwrap();
        assert_eq!(s.score, 100.0);
    }

    #[test]
    fn no_unigram_overlap_scores_zero() {
        let s = bleu(&words("a b c d"), &words("e f g h"), 4, true).unwrap();
        assert_eq!(s.precisions[0], 0.0);
        assert_eq!(s.score, 0.0);
    }

    #[test]
    fn one_substitution_hand_computed() {
        let s = bleu(&words("a b c d e"), &words("a b c d f"), 4, true).unwrap();
        let expected = [4.0 / 5.0, 4.0 / 5.0, 3.0 / 4.0, 2.0 / 3.0];
        for (p, e) in s.precisions.iter().zip(expected) {
            assert!((p - e).abs() < 1e-15);
        }
        assert!((s.score - 75.2121).abs() < 1e-3, "{}", s.score);
    }

    #[test]
    fn brevity_penalty_for_short_candidates() {
        let s = bleu(&words("a b"), &words("a b c d"), 1, false).unwrap();
        assert!((s.brevity_penalty - (-1f64).exp()).abs() < 1e-15);
        assert!((s.score - 100.0 * (-1f64).exp()).abs() < 1e-12);
    }

    #[test]
    fn clipping_limits_repeated_words() {
        let s = bleu(&words("a a a a"), &words("a b c d"), 1, false).unwrap();
        assert_eq!(s.precisions[0], 0.25);
    }

    #[test]
    fn empty_inputs() {
        let e: Vec<&str> = Vec::new();
        let s = bleu(&e, &words("a"), 4, true).unwrap();
        assert!(s.empty_candidate);
        assert_eq!(s.score, 0.0);
        assert_eq!(bleu(&words("a"), &e, 4, true), Err(MetricError::EmptyReference));
        assert_eq!(bleu(&words("a"), &words("a"), 0, true), Err(MetricError::MaxN));
    }

    fn seq(line: &str, variant: Variant) -> TokenSequence {
        TokenSequence::from_line(line, variant, MeterMap::default()).unwrap()
    }

    #[test]
    fn streams_drop_beats_and_markers() {
        let t = seq("<s> P60 D1.000 B0.000 P62 D0.500 B1.000 </s>", Variant::BeatPosition);
        let s = extract_streams(&t.words, t.variant, DecodeMode::Strict).unwrap();
        let show = |w: &[Word]| w.iter().map(Word::to_string).collect::<Vec<_>>().join(" ");
        assert_eq!(show(&s.pitch), "P60 P62");
        assert_eq!(show(&s.duration), "D1.000 D0.500");
        assert_eq!(show(&s.combined), "P60 D1.000 P62 D0.500");

        let t = seq("<s> P60 D1.000 PR D0.500 </s>", Variant::None);
        let s = extract_streams(&t.words, t.variant, DecodeMode::Strict).unwrap();
        assert_eq!(s.combined, t.words[1..t.words.len() - 1]);

        let t = seq("<s> </s>", Variant::ModBeatPosition);
        assert_eq!(extract_streams(&t.words, t.variant, DecodeMode::Strict).unwrap(), Streams::default());

        let bad = seq("<s> P60 P62 </s>", Variant::None);
        assert!(extract_streams(&bad.words, bad.variant, DecodeMode::Strict).is_err());
    }

    #[test]
    fn evaluate_identity_and_alignment() {
        let a = seq("<s> P60 D1.000 B0.000 P62 D0.500 B1.000 P64 D0.500 B1.500 P65 D2.000 B2.000 </s>", Variant::BeatPosition);
        let b = seq("<s> P67 D1.000 B0.000 P65 D1.000 B1.000 P64 D1.000 B2.000 P62 D1.000 B3.000 </s>", Variant::BeatPosition);
        let refs = vec![("x".to_string(), a.clone()), ("y".to_string(), b.clone())];
        let report = evaluate(&refs, &refs).unwrap();
        for col in [report.pitch, report.duration, report.combined] {
            assert_eq!(col, MeanStd { mean: 100.0, std: 0.0 });
        }
        let swapped = vec![("y".to_string(), a.clone()), ("z".to_string(), b)];
        assert!(matches!(evaluate(&swapped, &refs), Err(MetricError::Alignment(_))));
        let single = vec![("x".to_string(), a)];
        assert_eq!(evaluate(&single, &single).unwrap().pitch.std, 0.0);
    }

    #[test]
    fn population_std() {
        let m = MeanStd::of(&[1.0, 3.0]);
        assert_eq!(m, MeanStd { mean: 2.0, std: 1.0 });
    }

    #[test]
    fn table_layout() {
        let a = seq("<s> P60 D1.000 </s>", Variant::None);
        let refs = vec![("x".to_string(), a)];
        let r = evaluate(&refs, &refs).unwrap();
        let t = results_table(&[(Variant::None, &r), (Variant::BeatPosition, &r), (Variant::ModBeatPosition, &r)]);
        let lines: Vec<&str> = t.lines().collect();
        assert_eq!(lines.len(), 4);
        assert!(lines[0].contains("Pitch") && lines[0].contains("Duration") && lines[0].contains("Combined"));
        assert!(lines[2].starts_with("beat-position") && lines[2].contains("100.0±0.0"));
    }

    fn notes(spec: &[(u8, i64)]) -> Vec<NoteTuple> {
        spec.iter().map(|&(p, d)| (Pitch::Note(p), Beats::from_millis(d))).collect()
    }

    #[test]
    fn edit_distance_examples() {
        let a = notes(&[(60, 1000), (62, 500), (64, 500)]);
        assert_eq!(edit_distance(&a, &a), 0);
        let mut changed = a.clone();
        changed[1].0 = Pitch::Note(63);
        assert_eq!(edit_distance(&a, &changed), 1);
        let mut longer = a.clone();
        longer.push((Pitch::Rest, Beats::from_millis(1000)));
        assert_eq!(edit_distance(&a, &longer), 1);
        let mut retimed = a.clone();
        retimed[0].1 = Beats::from_millis(2000);
        assert_eq!(edit_distance(&a, &retimed), 1);
        assert_eq!(edit_distance::<NoteTuple>(&[], &a), 3);
    }

    #[test]
    fn memorization_examples() {
        let t1 = notes(&[(60, 1000), (62, 1000), (64, 1000)]);
        let t2 = notes(&[(67, 500), (65, 500)]);
        let targets = vec![("t1".to_string(), t1.clone()), ("t2".to_string(), t2.clone())];
        let copies = vec![("r1".to_string(), t2), ("r2".to_string(), t1.clone())];
        let report = memorization_scan(&copies, &targets).unwrap();
        assert_eq!(report.exact_copy_count, 2);
        assert_eq!(report.per_response[0].target_id, "t2");

        let mut r = t1.clone();
        r[0].0 = Pitch::Note(59);
        r[2].1 = Beats::from_millis(500);
        let report = memorization_scan(&[("r".to_string(), r)], &[("t".to_string(), t1)]).unwrap();
        assert_eq!(report.all_pairs, MeanStd { mean: 2.0, std: 0.0 });
        assert_eq!(report.exact_copy_count, 0);
        assert!(memorization_scan(&[], &targets).is_err());
    }
}
