//! Constrained beam search over the target vocabulary.
//!
//! The grammar constraint admits only sequences of whole notes
//! (pitch, duration and, when the variant has them, the one beat word that
//! matches the note's onset), so every finished output decodes strictly.

use std::cmp::Ordering;
use std::collections::HashMap;

use thiserror::Error;

use crate::model::{log_softmax, DecoderState, EncoderMemory, ModelError, Scalar, Transformer};
use crate::time::{Beats, MeterMap};
use crate::tokenizer::{TokenSequence, Variant, Vocabulary, Word};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum StateError {
    #[error("prefix must start with <s>")]
    MissingStart,
    #[error("prefix is already finished")]
    Finished,
    #[error("token {index} ({word}) is not allowed here")]
    Unexpected { index: usize, word: String },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Expect {
    Pitch,
    Duration,
    Beat,
    Done,
}

/// Position of a partial target sequence within the note grammar.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GrammarState {
    expect: Expect,
    /// Onset of the next note, i.e. the sum of durations so far.
    onset: Beats,
    /// Onset of the note whose words are being emitted.
    note_onset: Beats,
}

impl GrammarState {
    pub fn is_finished(&self) -> bool {
        self.expect == Expect::Done
    }
}

/// Token-class constraint for one vocabulary, variant and meter map.
#[derive(Clone, Debug)]
pub struct Grammar<'a> {
    vocab: &'a Vocabulary,
    variant: Variant,
    meters: MeterMap,
    pitches: Vec<usize>,
    durations: Vec<(usize, Beats)>,
    beats: HashMap<Beats, usize>,
}

impl<'a> Grammar<'a> {
    pub fn new(vocab: &'a Vocabulary, variant: Variant, meters: MeterMap) -> Self {
        let mut pitches = Vec::new();
        let mut durations = Vec::new();
        let mut beats = HashMap::new();
        for (id, word) in vocab.words().iter().enumerate() {
            match *word {
                Word::Pitch(_) | Word::Rest => pitches.push(id),
                Word::Duration(d) => durations.push((id, d)),
                Word::Beat(b) => {
                    beats.insert(b, id);
                }
                _ => {}
            }
        }
        Grammar { vocab, variant, meters, pitches, durations, beats }
    }

    pub fn start(&self) -> GrammarState {
        GrammarState { expect: Expect::Pitch, onset: Beats::ZERO, note_onset: Beats::ZERO }
    }

    /// The beat word required for a note starting at `onset`, if the variant
    /// has beat words and the vocabulary contains it.
    fn beat_id(&self, onset: Beats) -> Option<usize> {
        self.variant.beat_value(onset, &self.meters).and_then(|b| self.beats.get(&b).copied())
    }

    /// Ids that may follow a prefix in `state`, ascending.
    pub fn allowed(&self, state: &GrammarState) -> Result<Vec<usize>, StateError> {
        Ok(match state.expect {
            Expect::Done => return Err(StateError::Finished),
            Expect::Pitch => {
                // A note may only start if its beat word can be emitted later.
                let mut ids = if !self.variant.has_beat_words() || self.beat_id(state.onset).is_some() {
                    self.pitches.clone()
                } else {
                    Vec::new()
                };
                ids.push(Vocabulary::END);
                ids.sort_unstable();
                ids
            }
            Expect::Duration => self.durations.iter().map(|&(id, _)| id).collect(),
            Expect::Beat => self.beat_id(state.note_onset).into_iter().collect(),
        })
    }

    /// Advance `state` by one token, rejecting tokens the grammar forbids.
    pub fn advance(&self, state: &mut GrammarState, id: usize) -> Result<(), StateError> {
        let unexpected = || StateError::Unexpected { index: 0, word: self.word_name(id) };
        if state.expect == Expect::Done {
            return Err(StateError::Finished);
        }
        if !self.allowed(state)?.contains(&id) {
            return Err(unexpected());
        }
        match (state.expect, self.vocab.words().get(id).copied()) {
            (Expect::Pitch, Some(Word::End)) => state.expect = Expect::Done,
            (Expect::Pitch, _) => state.expect = Expect::Duration,
            (Expect::Duration, Some(Word::Duration(d))) => {
                state.note_onset = state.onset;
                state.onset += d;
                state.expect = if self.variant.has_beat_words() { Expect::Beat } else { Expect::Pitch };
            }
            (Expect::Beat, _) => state.expect = Expect::Pitch,
            _ => return Err(unexpected()),
        }
        Ok(())
    }

    fn word_name(&self, id: usize) -> String {
        self.vocab.words().get(id).map_or_else(|| format!("#{id}"), Word::to_string)
    }

    /// Replay a whole prefix (which must start with `<s>`).
    pub fn state_of(&self, prefix: &[usize]) -> Result<GrammarState, StateError> {
        if prefix.first() != Some(&Vocabulary::START) {
            return Err(StateError::MissingStart);
        }
        let mut state = self.start();
        for (index, &id) in prefix.iter().enumerate().skip(1) {
            self.advance(&mut state, id).map_err(|e| match e {
                StateError::Unexpected { word, .. } => StateError::Unexpected { index, word },
                other => other,
            })?;
        }
        Ok(state)
    }
}

/// Ids allowed after `prefix` under the note grammar.
pub fn grammar_mask(
    prefix: &[usize],
    vocab: &Vocabulary,
    variant: Variant,
    meters: &MeterMap,
) -> Result<Vec<usize>, StateError> {
    let grammar = Grammar::new(vocab, variant, meters.clone());
    let state = grammar.state_of(prefix)?;
    grammar.allowed(&state)
}

/// Incremental next-token log-probabilities for a batch of hypotheses.
pub trait StepScorer {
    type State: Clone;

    fn vocab_size(&self) -> usize;

    /// Upper bound on the number of tokens that can be fed.
    fn max_steps(&self) -> usize {
        usize::MAX
    }

    fn start(&self) -> Self::State;

    /// Feed `tokens[i]` to `states[i]` and return, per state, the
    /// log-probability of every next token.
    fn step(&self, states: &mut [Self::State], tokens: &[usize]) -> Vec<Vec<f64>>;
}

/// A trained model conditioned on one source sequence.
pub struct ModelScorer<'m, F> {
    model: &'m Transformer<F>,
    memory: EncoderMemory<F>,
}

impl<'m, F: Scalar> ModelScorer<'m, F> {
    pub fn new(model: &'m Transformer<F>, source: &[usize]) -> Result<Self, ModelError> {
        Ok(ModelScorer { model, memory: model.encode_source(source)? })
    }
}

impl<F: Scalar> StepScorer for ModelScorer<'_, F> {
    type State = DecoderState<F>;

    fn vocab_size(&self) -> usize {
        self.model.config.vocab_size_tgt
    }

    fn max_steps(&self) -> usize {
        self.model.config.max_len
    }

    fn start(&self) -> Self::State {
        self.model.start_decoder()
    }

    fn step(&self, states: &mut [Self::State], tokens: &[usize]) -> Vec<Vec<f64>> {
        let logits = self.model.decode_step(&self.memory, states, tokens).expect("decoder positions within max_len");
        let mut lp = Vec::new();
        (0..logits.rows)
            .map(|r| {
                log_softmax(logits.row(r), &mut lp);
                lp.iter().map(|x| x.to_f64_lossy()).collect()
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BeamConfig {
    pub width: usize,
    /// Length-normalisation exponent.
    pub alpha: f64,
    /// Maximum generated tokens; `None` means `3 × source length + 8`.
    pub max_steps: Option<usize>,
    pub grammar: bool,
}

impl Default for BeamConfig {
    fn default() -> Self {
        BeamConfig { width: 5, alpha: 0.6, max_steps: None, grammar: true }
    }
}

impl BeamConfig {
    pub fn steps_for(&self, source_len: usize) -> usize {
        self.max_steps.unwrap_or(3 * source_len + 8)
    }
}

/// A scored token sequence starting with `<s>`.
#[derive(Clone, Debug, PartialEq)]
pub struct Hypothesis {
    pub tokens: Vec<usize>,
    pub logprob: f64,
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BeamResult {
    pub best: Hypothesis,
    /// No hypothesis produced `</s>` within the step limit.
    pub truncated: bool,
    /// All finished hypotheses, best first.
    pub finished: Vec<Hypothesis>,
}

/// `logprob / length^alpha`, with length counting generated tokens.
pub fn normalized_score(logprob: f64, generated: usize, alpha: f64) -> f64 {
    logprob / (generated.max(1) as f64).powf(alpha)
}

struct Live<S> {
    tokens: Vec<usize>,
    logprob: f64,
    state: S,
    grammar: Option<GrammarState>,
}

fn by_score(a: &Hypothesis, b: &Hypothesis) -> Ordering {
    b.score.partial_cmp(&a.score).unwrap_or(Ordering::Equal)
}

/// Length-normalised beam search. With `grammar` set, only tokens allowed
/// by `grammar` are expanded; masked tokens are dropped without
/// renormalising the remaining probabilities.
pub fn beam_search<S: StepScorer>(
    scorer: &S,
    grammar: Option<&Grammar>,
    width: usize,
    alpha: f64,
    max_steps: usize,
) -> BeamResult {
    assert!(width >= 1, "beam width must be at least 1");
    let max_steps = max_steps.min(scorer.max_steps());
    let mut live = vec![Live {
        tokens: vec![Vocabulary::START],
        logprob: 0.0,
        state: scorer.start(),
        grammar: grammar.map(Grammar::start),
    }];
    let mut finished: Vec<Hypothesis> = Vec::new();
    let all: Vec<usize> = (0..scorer.vocab_size()).collect();

    for _ in 0..max_steps {
        let mut states: Vec<S::State> = live.iter().map(|h| h.state.clone()).collect();
        let last: Vec<usize> = live.iter().map(|h| *h.tokens.last().expect("nonempty")).collect();
        let logprobs = scorer.step(&mut states, &last);

        // (cumulative logprob, parent, token) in deterministic order
        let mut candidates: Vec<(f64, usize, usize)> = Vec::new();
        for (i, h) in live.iter().enumerate() {
            let allowed = match (grammar, &h.grammar) {
                (Some(g), Some(gs)) => g.allowed(gs).expect("live hypotheses are unfinished"),
                _ => all.clone(),
            };
            candidates.extend(allowed.into_iter().map(|id| (h.logprob + logprobs[i][id], i, id)));
        }
        candidates.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap_or(Ordering::Equal).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        candidates.truncate(width);

        let mut next = Vec::with_capacity(width);
        for (logprob, parent, id) in candidates {
            let p = &live[parent];
            let mut tokens = p.tokens.clone();
            tokens.push(id);
            if id == Vocabulary::END {
                let score = normalized_score(logprob, tokens.len() - 1, alpha);
                finished.push(Hypothesis { tokens, logprob, score });
                continue;
            }
            let mut gs = p.grammar.clone();
            if let (Some(g), Some(s)) = (grammar, gs.as_mut()) {
                g.advance(s, id).expect("candidate was allowed");
            }
            next.push(Live { tokens, logprob, state: states[parent].clone(), grammar: gs });
        }
        live = next;
        if live.is_empty() || finished.len() >= width {
            break;
        }
    }

    finished.sort_by(by_score);
    match finished.first() {
        Some(best) => BeamResult { best: best.clone(), truncated: false, finished },
        None => {
            let mut partial: Vec<Hypothesis> = live
                .into_iter()
                .map(|h| Hypothesis { score: normalized_score(h.logprob, h.tokens.len() - 1, alpha), tokens: h.tokens, logprob: h.logprob })
                .collect();
            partial.sort_by(by_score);
            let best = partial.into_iter().next().unwrap_or(Hypothesis { tokens: vec![Vocabulary::START], logprob: 0.0, score: 0.0 });
            BeamResult { best, truncated: true, finished }
        }
    }
}

/// Stepwise argmax decoding.
pub fn greedy<S: StepScorer>(scorer: &S, max_steps: usize) -> Vec<usize> {
    let mut tokens = vec![Vocabulary::START];
    let mut state = vec![scorer.start()];
    for _ in 0..max_steps.min(scorer.max_steps()) {
        let lp = scorer.step(&mut state, &[*tokens.last().expect("nonempty")]).remove(0);
        let mut best = 0;
        for (i, &v) in lp.iter().enumerate() {
            if v > lp[best] {
                best = i;
            }
        }
        tokens.push(best);
        if best == Vocabulary::END {
            break;
        }
    }
    tokens
}

/// Drop a trailing incomplete note and append `</s>` so that a truncated
/// grammar-constrained hypothesis still decodes strictly.
pub fn close_at_note_boundary(grammar: &Grammar, tokens: &mut Vec<usize>) {
    let mut state = grammar.start();
    let mut boundary = 1;
    for (i, &id) in tokens.iter().enumerate().skip(1) {
        if grammar.advance(&mut state, id).is_err() {
            break;
        }
        if state.expect == Expect::Pitch {
            boundary = i + 1;
        }
        if state.is_finished() {
            return;
        }
    }
    tokens.truncate(boundary);
    tokens.push(Vocabulary::END);
}

/// A generated target part.
#[derive(Clone, Debug, PartialEq)]
pub struct Generation {
    pub tokens: TokenSequence,
    pub truncated: bool,
    /// Source words missing from the source vocabulary.
    pub unknown_source_words: usize,
    pub score: f64,
}

/// Translate one encoded source part into a target part.
pub fn generate<F: Scalar>(
    model: &Transformer<F>,
    source_vocab: &Vocabulary,
    target_vocab: &Vocabulary,
    source: &TokenSequence,
    config: &BeamConfig,
) -> Result<Generation, ModelError> {
    let (ids, unknown) = source_vocab.ids(&source.words);
    let scorer = ModelScorer::new(model, &ids)?;
    let grammar = Grammar::new(target_vocab, source.variant, source.meters.clone());
    let result = beam_search(
        &scorer,
        config.grammar.then_some(&grammar),
        config.width,
        config.alpha,
        config.steps_for(ids.len()),
    );
    let mut tokens = result.best.tokens;
    if result.truncated && config.grammar {
        close_at_note_boundary(&grammar, &mut tokens);
    }
    let words = target_vocab.lookup(&tokens);
    Ok(Generation {
        tokens: TokenSequence { words, variant: source.variant, meters: source.meters.clone() },
        truncated: result.truncated,
        unknown_source_words: unknown,
        score: result.best.score,
    })
}

#[cfg(test)]
mod tests;
