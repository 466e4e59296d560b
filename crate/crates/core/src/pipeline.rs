//! Trained-model artifacts and the generate/evaluate stages built on them.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::corpus::{segment, TrackPair, BARS_PER_SEGMENT};
use crate::dataset::{EncodedCorpus, EncodedSegment, Split};
use crate::decoding::{generate, BeamConfig, Generation};
use crate::metrics::{evaluate, memorization_scan, note_tuples, BleuReport, MemorizationReport, MetricError, NoteTuple};
use crate::midi::NoteEvent;
use crate::model::checkpoint::{read_container, write_container, Checkpoint, CheckpointError};
use crate::model::optim::{Adam, AdamConfig};
use crate::model::train::{StepRecord, TrainConfig, Trainer};
use crate::model::{ModelConfig, ModelError, ParamStore, Transformer};
use crate::time::{Beats, MeterMap};
use crate::tokenizer::{decode, encode, DecodeMode, TokenSequence, TokenizerError, Variant, Vocabulary, Word};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Tokenizer(#[from] TokenizerError),
    #[error("{0}")]
    Mismatch(String),
}

/// A model together with the tokenizer settings it was trained with.
#[derive(Clone, Debug)]
pub struct TrainedModel {
    pub model: Transformer<f32>,
    pub variant: Variant,
    pub source_vocab: Vocabulary,
    pub target_vocab: Vocabulary,
}

fn vocab_line(v: &Vocabulary) -> String {
    v.words().iter().map(Word::to_string).collect::<Vec<_>>().join(" ")
}

fn vocab_from_line(line: &str) -> Result<Vocabulary, PipelineError> {
    let words = crate::tokenizer::parse_words(line)
        .map_err(|e| PipelineError::Mismatch(format!("checkpoint vocabulary: {e}")))?;
    let v = Vocabulary::from_words(words.iter().copied());
    if v.words() != &words[..] {
        return Err(PipelineError::Mismatch("checkpoint vocabulary is not in canonical order".into()));
    }
    Ok(v)
}

impl TrainedModel {
    /// Fresh, untrained model sized for `corpus`.
    pub fn for_corpus(corpus: &EncodedCorpus, mut config: ModelConfig) -> Result<Self, ModelError> {
        config.vocab_size_src = corpus.source_vocab.len();
        config.vocab_size_tgt = corpus.target_vocab.len();
        Ok(TrainedModel {
            model: Transformer::new(config)?,
            variant: corpus.variant,
            source_vocab: corpus.source_vocab.clone(),
            target_vocab: corpus.target_vocab.clone(),
        })
    }

    pub fn to_checkpoint(&self, step: usize) -> Checkpoint {
        let metadata = BTreeMap::from([
            ("variant".to_string(), self.variant.name().to_string()),
            ("source_vocab".to_string(), vocab_line(&self.source_vocab)),
            ("target_vocab".to_string(), vocab_line(&self.target_vocab)),
            ("step".to_string(), step.to_string()),
        ]);
        Checkpoint::new(self.model.config.clone(), metadata, &self.model.params)
    }

    /// Rebuild from a checkpoint; returns the model and its training step.
    pub fn from_checkpoint(c: Checkpoint) -> Result<(Self, usize), PipelineError> {
        let get = |k: &str| {
            c.metadata.get(k).ok_or_else(|| PipelineError::Mismatch(format!("checkpoint has no {k} entry")))
        };
        let variant: Variant = get("variant")?.parse().map_err(|e| PipelineError::Mismatch(format!("{e}")))?;
        let source_vocab = vocab_from_line(get("source_vocab")?)?;
        let target_vocab = vocab_from_line(get("target_vocab")?)?;
        let step = get("step")?.parse().map_err(|_| PipelineError::Mismatch("bad step entry".into()))?;
        if source_vocab.len() != c.config.vocab_size_src || target_vocab.len() != c.config.vocab_size_tgt {
            return Err(PipelineError::Mismatch("vocabulary sizes disagree with the model configuration".into()));
        }
        let model = Transformer::from_params(c.config, c.params)?;
        Ok((TrainedModel { model, variant, source_vocab, target_vocab }, step))
    }

    pub fn save(&self, path: &Path, step: usize) -> Result<(), PipelineError> {
        Ok(self.to_checkpoint(step).save(path)?)
    }

    pub fn load(path: &Path) -> Result<(Self, usize), PipelineError> {
        Self::from_checkpoint(Checkpoint::load(path)?)
    }

    /// Refuse to pair a model with data encoded differently.
    pub fn check_corpus(&self, corpus: &EncodedCorpus) -> Result<(), PipelineError> {
        if corpus.variant != self.variant {
            return Err(PipelineError::Mismatch(format!(
                "corpus uses variant {} but the model was trained with {}",
                corpus.variant, self.variant
            )));
        }
        if corpus.source_vocab != self.source_vocab || corpus.target_vocab != self.target_vocab {
            return Err(PipelineError::Mismatch("corpus vocabularies differ from the model's".into()));
        }
        Ok(())
    }

    pub fn generate(&self, source: &TokenSequence, beam: &BeamConfig) -> Result<Generation, PipelineError> {
        if source.variant != self.variant {
            return Err(PipelineError::Mismatch(format!(
                "source uses variant {} but the model was trained with {}",
                source.variant, self.variant
            )));
        }
        Ok(generate(&self.model, &self.source_vocab, &self.target_vocab, source, beam)?)
    }
}

/// Path of the optimiser state stored next to a checkpoint.
pub fn optimizer_path(checkpoint: &Path) -> PathBuf {
    let mut s = checkpoint.as_os_str().to_owned();
    s.push(".optim");
    PathBuf::from(s)
}

/// Store Adam moments and step count in the checkpoint container format.
pub fn save_optimizer(path: &Path, adam: &Adam<f32>) -> Result<(), CheckpointError> {
    let mut store = ParamStore::<f32>::new();
    for (prefix, moments) in [("m", &adam.m), ("v", &adam.v)] {
        for (name, t) in moments.names().iter().zip(moments.tensors()) {
            store.push(format!("{prefix}.{name}"), t.clone());
        }
    }
    let header = format!("step={}\n", adam.step);
    std::fs::write(path, write_container(&header, &store))?;
    Ok(())
}

/// Load optimiser state saved by [`save_optimizer`] for `params`.
pub fn load_optimizer(path: &Path, params: &ParamStore<f32>, config: AdamConfig) -> Result<Adam<f32>, CheckpointError> {
    let (header, store) = read_container(&std::fs::read(path)?)?;
    let step = header
        .lines()
        .find_map(|l| l.strip_prefix("step="))
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| CheckpointError::Format("optimizer state has no step".into()))?;
    let mut adam = Adam::new(config, params);
    adam.step = step;
    for (prefix, moments) in [("m", &mut adam.m), ("v", &mut adam.v)] {
        for id in 0..params.len() {
            let name = format!("{prefix}.{}", params.name(id));
            let t = store.find(&name).map(|i| store.get(i)).ok_or_else(|| CheckpointError::Format(format!("missing {name}")))?;
            if (t.rows, t.cols) != (params.get(id).rows, params.get(id).cols) {
                return Err(CheckpointError::Format(format!("shape of {name} differs")));
            }
            *moments.get_mut(id) = t.clone();
        }
    }
    Ok(adam)
}

/// A generated response for one corpus segment.
#[derive(Clone, Debug)]
pub struct Response {
    pub key: String,
    pub generation: Generation,
}

/// Everything produced by evaluating one split.
#[derive(Clone, Debug)]
pub struct Evaluation {
    pub responses: Vec<Response>,
    pub bleu: BleuReport,
    pub memorization: MemorizationReport,
    pub truncated: usize,
}

fn tuples_of(tokens: &TokenSequence) -> Vec<NoteTuple> {
    note_tuples(&decode(tokens, DecodeMode::Lenient).map(|d| d.notes).unwrap_or_default())
}

/// Score `candidates` (keyed like the split's segments) against the split's
/// targets and scan them against every training target.
pub fn score_responses(
    corpus: &EncodedCorpus,
    split: Split,
    candidates: Vec<(String, TokenSequence)>,
) -> Result<(BleuReport, MemorizationReport), PipelineError> {
    let references: Vec<(String, TokenSequence)> =
        corpus.split(split).iter().map(|s| (s.key(), s.target.clone())).collect();
    let bleu = evaluate(&candidates, &references)?;
    let responses: Vec<(String, Vec<NoteTuple>)> = candidates.iter().map(|(k, t)| (k.clone(), tuples_of(t))).collect();
    let targets: Vec<(String, Vec<NoteTuple>)> = corpus.train.iter().map(|s| (s.key(), tuples_of(&s.target))).collect();
    let memorization = memorization_scan(&responses, &targets)?;
    Ok((bleu, memorization))
}

/// Generate a response for every segment of `split` and score them.
pub fn evaluate_split(
    model: &TrainedModel,
    corpus: &EncodedCorpus,
    split: Split,
    beam: &BeamConfig,
) -> Result<Evaluation, PipelineError> {
    model.check_corpus(corpus)?;
    let segments = corpus.split(split);
    if segments.is_empty() {
        return Err(PipelineError::Metric(MetricError::Empty("evaluation split")));
    }
    let mut responses = Vec::with_capacity(segments.len());
    for s in segments {
        responses.push(Response { key: s.key(), generation: model.generate(&s.source, beam)? });
    }
    let candidates = responses.iter().map(|r| (r.key.clone(), r.generation.tokens.clone())).collect();
    let (bleu, memorization) = score_responses(corpus, split, candidates)?;
    let truncated = responses.iter().filter(|r| r.generation.truncated).count();
    Ok(Evaluation { responses, bleu, memorization, truncated })
}

/// Scores of the split's own targets used as candidates; all BLEU means are
/// 100 when the scoring path is wired correctly.
pub fn oracle_scores(corpus: &EncodedCorpus, split: Split) -> Result<(BleuReport, MemorizationReport), PipelineError> {
    let candidates = corpus.split(split).iter().map(|s: &EncodedSegment| (s.key(), s.target.clone())).collect();
    score_responses(corpus, split, candidates)
}

/// Four-bar windows of one monophonic part, encoded for generation: each
/// entry is (window start, window length, source tokens).
pub fn source_windows(
    notes: &[NoteEvent],
    meters: &MeterMap,
    variant: Variant,
) -> Result<Vec<(Beats, Beats, TokenSequence)>, TokenizerError> {
    let pair = TrackPair {
        piece_id: "input".into(),
        pair_id: "input:0-0".into(),
        source_track: 0,
        target_track: 0,
        source: notes.to_vec(),
        target: Vec::new(),
        meters: meters.clone(),
    };
    let end = notes.iter().filter(|n| !n.pitch.is_rest()).map(NoteEvent::end).max().unwrap_or(Beats::ZERO);
    let starts = meters.measure_starts(end);
    segment(&pair)
        .into_iter()
        .map(|seg| {
            let start = starts[seg.segment_index * BARS_PER_SEGMENT];
            Ok((start, seg.length, encode(&seg.source, variant, &seg.meters)?))
        })
        .collect()
}

/// Place decoded window outputs at their window starts, cutting anything
/// that runs past the next window.
pub fn stitch(windows: &[(Beats, Beats, Vec<NoteEvent>)]) -> Vec<NoteEvent> {
    let mut out = Vec::new();
    for (start, length, notes) in windows {
        let end = *start + *length;
        for n in notes {
            let onset = *start + n.onset;
            if onset >= end {
                break;
            }
            let duration = if onset + n.duration > end { end - onset } else { n.duration };
            out.push(NoteEvent { pitch: n.pitch, onset, duration });
        }
    }
    out
}

/// Train a fresh model on the train split of `corpus`, calling `on_step`
/// after every update.
pub fn train_model(
    corpus: &EncodedCorpus,
    model_config: ModelConfig,
    train_config: TrainConfig,
    on_step: impl FnMut(&StepRecord, &Trainer<f32>),
) -> Result<TrainedModel, PipelineError> {
    let mut shell = TrainedModel::for_corpus(corpus, model_config)?;
    let mut trainer = Trainer::new(shell.model.clone(), train_config);
    trainer.run(&corpus.examples(Split::Train), on_step)?;
    shell.model = trainer.model;
    Ok(shell)
}
