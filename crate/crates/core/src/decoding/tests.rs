use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::model::ModelConfig;
use crate::time::Meter;
use crate::tokenizer::{decode, validate_beats, DecodeMode};

fn w(s: &str) -> Word {
    s.parse().unwrap()
}

fn vocab(words: &str) -> Vocabulary {
    Vocabulary::from_words(words.split_whitespace().map(w))
}

fn ids(v: &Vocabulary, words: &str) -> Vec<usize> {
    words.split_whitespace().map(|s| v.get(w(s)).unwrap()).collect()
}

fn names(v: &Vocabulary, ids: &[usize]) -> Vec<String> {
    ids.iter().map(|&i| v.word(i).to_string()).collect()
}

fn common() -> MeterMap {
    MeterMap::constant(Meter::new(4, 4))
}

const WORDS: &str = "P60 P62 PR D0.500 D1.000 D1.500 B0.000 B0.500 B1.000 B1.500 B2.000 B2.500 B3.000";

#[test]
fn grammar_start_allows_pitches_and_end() {
    let v = vocab(WORDS);
    let got = grammar_mask(&ids(&v, "<s>"), &v, Variant::BeatPosition, &common()).unwrap();
    assert_eq!(names(&v, &got), ["</s>", "P60", "P62", "PR"]);
}

#[test]
fn grammar_after_pitch_allows_durations() {
    let v = vocab(WORDS);
    let got = grammar_mask(&ids(&v, "<s> P60"), &v, Variant::ModBeatPosition, &common()).unwrap();
    assert_eq!(names(&v, &got), ["D0.500", "D1.000", "D1.500"]);
}

#[test]
fn grammar_forces_the_onset_beat() {
    let v = vocab(WORDS);
    let meters = common();
    let first = grammar_mask(&ids(&v, "<s> P60 D1.500"), &v, Variant::ModBeatPosition, &meters).unwrap();
    assert_eq!(names(&v, &first), ["B0.000"]);
    let second = grammar_mask(&ids(&v, "<s> P60 D1.500 B0.000 P62 D0.500"), &v, Variant::ModBeatPosition, &meters).unwrap();
    assert_eq!(names(&v, &second), ["B1.500"]);
}

#[test]
fn mod_beat_wraps_at_the_barline() {
    let v = vocab("P60 D1.000 D1.500 D2.500 B0.000 B1.500 B2.500 B4.000");
    let prefix = ids(&v, "<s> P60 D2.500 B0.000 P60 D1.500 B2.500 P60 D1.000");
    let m = grammar_mask(&prefix, &v, Variant::ModBeatPosition, &common()).unwrap();
    assert_eq!(names(&v, &m), ["B0.000"]);
    let b = grammar_mask(&prefix, &v, Variant::BeatPosition, &common()).unwrap();
    assert_eq!(names(&v, &b), ["B4.000"]);
}

#[test]
fn grammar_without_beat_words() {
    let v = vocab("P60 P62 D1.000");
    let got = grammar_mask(&ids(&v, "<s> P60 D1.000"), &v, Variant::None, &common()).unwrap();
    assert_eq!(names(&v, &got), ["</s>", "P60", "P62"]);
}

#[test]
fn grammar_stops_notes_when_the_beat_word_is_missing() {
    let v = vocab("P60 D1.000 B0.000");
    let got = grammar_mask(&ids(&v, "<s> P60 D1.000 B0.000"), &v, Variant::BeatPosition, &common()).unwrap();
    assert_eq!(names(&v, &got), ["</s>"]);
}

#[test]
fn grammar_state_errors() {
    let v = vocab(WORDS);
    let m = common();
    assert_eq!(grammar_mask(&ids(&v, "<s> </s>"), &v, Variant::BeatPosition, &m), Err(StateError::Finished));
    assert_eq!(grammar_mask(&ids(&v, "P60"), &v, Variant::BeatPosition, &m), Err(StateError::MissingStart));
    assert!(matches!(
        grammar_mask(&ids(&v, "<s> D1.000"), &v, Variant::BeatPosition, &m),
        Err(StateError::Unexpected { index: 1, .. })
    ));
}

/// Scores defined by a function of the full prefix.
struct TableScorer<F: Fn(&[usize]) -> Vec<f64>> {
    vocab: usize,
    f: F,
}

impl<F: Fn(&[usize]) -> Vec<f64>> StepScorer for TableScorer<F> {
    type State = Vec<usize>;

    fn vocab_size(&self) -> usize {
        self.vocab
    }

    fn start(&self) -> Vec<usize> {
        Vec::new()
    }

    fn step(&self, states: &mut [Vec<usize>], tokens: &[usize]) -> Vec<Vec<f64>> {
        states
            .iter_mut()
            .zip(tokens)
            .map(|(s, &t)| {
                s.push(t);
                (self.f)(s)
            })
            .collect()
    }
}

/// Normalised pseudo-random log-probabilities keyed by the prefix.
fn random_scores(prefix: &[usize], vocab: usize, seed: u64) -> Vec<f64> {
    let mut h = DefaultHasher::new();
    (prefix, seed).hash(&mut h);
    let mut rng = ChaCha8Rng::seed_from_u64(h.finish());
    let raw: Vec<f64> = (0..vocab).map(|i| if i == Vocabulary::START { f64::NEG_INFINITY } else { rng.gen_range(-3.0..1.0) }).collect();
    let mut lp = Vec::new();
    log_softmax(&raw, &mut lp);
    lp
}

#[test]
fn hand_built_beam_prefers_the_better_sequence() {
    // ids: 0 <s>, 1 </s>, 2 x, 3 y. Sequences "x </s>" (log-prob −1.0) and
    // "y </s>" (−1.2); greedy commits to the likelier first token y.
    let scorer = TableScorer {
        vocab: 4,
        f: |prefix: &[usize]| {
            let ninf = f64::NEG_INFINITY;
            match prefix {
                [0] => vec![ninf, 0.01f64.ln(), 0.44f64.ln(), 0.55f64.ln()],
                [0, 2] => vec![ninf, -1.0 - 0.44f64.ln(), (1.0 - (-1.0 - 0.44f64.ln()).exp()).ln(), ninf],
                [0, 3] => vec![ninf, -1.2 - 0.55f64.ln(), (1.0 - (-1.2 - 0.55f64.ln()).exp()).ln(), ninf],
                _ => vec![ninf, 0.0, ninf, ninf],
            }
        },
    };
    let wide = beam_search(&scorer, None, 2, 0.6, 10);
    assert_eq!(wide.best.tokens, vec![0, 2, 1]);
    assert!((wide.best.logprob + 1.0).abs() < 1e-12);
    assert!(!wide.truncated);
    assert_eq!(wide.finished.len(), 2);
    assert!((wide.finished[1].logprob + 1.2).abs() < 1e-12);
    let narrow = beam_search(&scorer, None, 1, 0.6, 10);
    assert_eq!(narrow.best.tokens, vec![0, 3, 1]);
    assert_eq!(narrow.best.tokens, greedy(&scorer, 10));
}

#[test]
fn width_one_is_greedy_on_random_tables() {
    for seed in 0..200 {
        let scorer = TableScorer { vocab: 5, f: move |p: &[usize]| random_scores(p, 5, seed) };
        let beam = beam_search(&scorer, None, 1, 0.6, 12);
        assert_eq!(beam.best.tokens, greedy(&scorer, 12), "seed {seed}");
    }
}

#[test]
fn returned_hypothesis_is_best_finished() {
    for seed in 0..100 {
        let scorer = TableScorer { vocab: 6, f: move |p: &[usize]| random_scores(p, 6, seed) };
        let r = beam_search(&scorer, None, 4, 0.6, 10);
        if !r.truncated {
            assert!(r.finished.iter().all(|h| r.best.score >= h.score));
        }
    }
}

#[test]
fn truncation_is_flagged() {
    // </s> is never likely enough to enter a width-1 beam
    let scorer = TableScorer { vocab: 3, f: |_: &[usize]| vec![f64::NEG_INFINITY, -5.0, -0.01] };
    let r = beam_search(&scorer, None, 1, 0.6, 4);
    assert!(r.truncated);
    assert_eq!(r.best.tokens, vec![0, 2, 2, 2, 2]);
}

#[test]
fn truncated_grammar_output_is_closed() {
    let v = vocab(WORDS);
    let g = Grammar::new(&v, Variant::BeatPosition, common());
    let mut t = ids(&v, "<s> P60 D1.000 B0.000 P62 D0.500");
    close_at_note_boundary(&g, &mut t);
    assert_eq!(names(&v, &t), ["<s>", "P60", "D1.000", "B0.000", "</s>"]);
}

fn tiny_model(vocab_src: usize, vocab_tgt: usize, seed: u64) -> Transformer<f64> {
    Transformer::new(ModelConfig {
        d_model: 16,
        n_heads: 2,
        d_ff: 32,
        n_layers_enc: 1,
        n_layers_dec: 1,
        vocab_size_src: vocab_src,
        vocab_size_tgt: vocab_tgt,
        max_len: 64,
        dropout: 0.0,
        positional_encoding: true,
        seed,
    })
    .unwrap()
}

#[test]
fn width_one_is_greedy_on_a_model() {
    for seed in 0..5 {
        let model = tiny_model(10, 12, seed);
        let scorer = ModelScorer::new(&model, &[4, 5, 6, 7, 8]).unwrap();
        let beam = beam_search(&scorer, None, 1, 0.6, 20);
        assert_eq!(beam.best.tokens, greedy(&scorer, 20));
    }
}

#[test]
fn grammar_output_always_decodes() {
    let v = vocab(WORDS);
    let source_vocab = v.clone();
    for variant in Variant::ALL {
        for seed in 0..4 {
            let model = tiny_model(source_vocab.len(), v.len(), seed);
            let line = if variant.has_beat_words() {
                "<s> P60 D1.000 B0.000 P62 D0.500 B1.000 </s>"
            } else {
                "<s> P60 D1.000 P62 D0.500 </s>"
            };
            let source = TokenSequence::from_line(line, variant, common()).unwrap();
            for width in [1, 3] {
                let config = BeamConfig { width, ..Default::default() };
                let out = generate(&model, &source_vocab, &v, &source, &config).unwrap();
                decode(&out.tokens, DecodeMode::Strict).unwrap();
                assert!(validate_beats(&out.tokens).is_empty());
                assert_eq!(out.unknown_source_words, 0);
            }
        }
    }
}

#[test]
fn unknown_source_words_are_counted() {
    let v = vocab(WORDS);
    let model = tiny_model(v.len(), v.len(), 1);
    let source = TokenSequence::from_line("<s> P99 D1.000 B0.000 </s>", Variant::BeatPosition, common()).unwrap();
    let out = generate(&model, &v, &v, &source, &BeamConfig::default()).unwrap();
    assert_eq!(out.unknown_source_words, 1);
}

/// Best normalised score over every finished sequence of at most `max_steps`
/// generated tokens.
fn exhaustive_best<F: Fn(&[usize]) -> Vec<f64>>(scorer: &TableScorer<F>, max_steps: usize, alpha: f64) -> f64 {
    let mut best = f64::NEG_INFINITY;
    let mut frontier = vec![(vec![Vocabulary::START], 0.0)];
    for _ in 0..max_steps {
        let mut next = Vec::new();
        for (prefix, lp) in frontier {
            let scores = (scorer.f)(&prefix);
            for (id, &s) in scores.iter().enumerate() {
                if s == f64::NEG_INFINITY {
                    continue;
                }
                let total = lp + s;
                if id == Vocabulary::END {
                    best = best.max(normalized_score(total, prefix.len(), alpha));
                } else {
                    let mut p = prefix.clone();
                    p.push(id);
                    next.push((p, total));
                }
            }
        }
        frontier = next;
    }
    best
}

#[test]
fn beam_never_beats_exhaustive_search() {
    for seed in 0..300 {
        let scorer = TableScorer { vocab: 4, f: move |p: &[usize]| random_scores(p, 4, seed) };
        let optimum = exhaustive_best(&scorer, 4, 0.6);
        for width in 1..=8 {
            let r = beam_search(&scorer, None, width, 0.6, 4);
            if let Some(h) = r.finished.first() {
                assert!(h.score <= optimum + 1e-12);
            }
        }
        // 3 expandable tokens, 4 steps: a beam of 81 keeps every prefix
        let r = beam_search(&scorer, None, 81, 0.6, 4);
        assert!((r.best.score - optimum).abs() < 1e-12, "seed {seed}");
    }
}

#[test]
fn wider_beams_can_score_lower() {
    // Beam search is not monotone in width: a wider beam can keep a
    // high-probability prefix that crowds out the eventual best sequence.
    let found = (0..500).any(|seed| {
        let scorer = TableScorer { vocab: 5, f: move |p: &[usize]| random_scores(p, 5, seed) };
        let score = |w| beam_search(&scorer, None, w, 0.6, 10).finished.first().map_or(f64::NEG_INFINITY, |h| h.score);
        (1..8).any(|w| score(w + 1) < score(w) - 1e-12)
    });
    assert!(found);
}
