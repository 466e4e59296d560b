//! The `counterpoint` command line: `ingest`, `train`, `generate` and
//! `evaluate`, sharing one `key=value` run configuration.
//!
//! Exit codes: 0 success, 1 usage error, 2 empty result, 3 data error,
//! 4 numeric divergence.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs::{self, OpenOptions};
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use thiserror::Error;

use crate::corpus::{build_corpus, monophonize, CorpusConfig, PieceInput, BARS_PER_SEGMENT};
use crate::dataset::{ingest_summary, load_midi_dir, read_corpus, write_corpus, EncodedCorpus, Split};
use crate::decoding::BeamConfig;
use crate::metrics::results_table;
use crate::midi::{parse_midi, write_midi_with_meter, NoteEvent};
use crate::model::train::{StepRecord, TrainConfig, Trainer};
use crate::model::{ModelConfig, ModelError};
use crate::pipeline::{
    evaluate_split, load_optimizer, optimizer_path, oracle_scores, save_optimizer, source_windows, stitch,
    PipelineError, TrainedModel,
};
use crate::time::{Beats, Meter, MeterMap};
use crate::tokenizer::{decode, DecodeMode, TokenSequence, Variant};

/// Ticks per quarter note of written MIDI files.
const OUTPUT_PPQ: u16 = 480;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Empty(String),
    #[error("{0}")]
    Data(String),
    #[error("{0}")]
    Divergence(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Empty(_) => 2,
            CliError::Data(_) => 3,
            CliError::Divergence(_) => 4,
        }
    }
}

fn data<E: std::fmt::Display>(context: &str) -> impl Fn(E) -> CliError + '_ {
    move |e| CliError::Data(format!("{context}: {e}"))
}

impl From<PipelineError> for CliError {
    fn from(e: PipelineError) -> Self {
        match e {
            PipelineError::Model(ModelError::Divergence { .. }) => CliError::Divergence(e.to_string()),
            other => CliError::Data(other.to_string()),
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "counterpoint", version, about = "Two-part counterpoint as sequence-to-sequence translation")]
pub struct Cli {
    /// Run configuration file of `key=value` lines.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Seed for every random choice (split, initialisation, batches, dropout).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Token encoding: beat, mod-beat or none.
    #[arg(long, global = true)]
    pub variant: Option<Variant>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build a token corpus from a directory of MIDI files.
    Ingest {
        midi_dir: Option<PathBuf>,
        /// Output directory for the manifest, vocabularies and token files.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also emit every pair with source and target swapped.
        #[arg(long)]
        both_directions: bool,
    },
    /// Train a model on the train split of a manifest.
    Train {
        manifest: Option<PathBuf>,
        /// Checkpoint to write (and to resume from with --resume).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        resume: bool,
        /// Total optimiser steps, including any already taken.
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Generate a target part for a MIDI part or a file of token lines.
    Generate {
        checkpoint: PathBuf,
        source: PathBuf,
        /// Output prefix; writes `<out>.tokens` and `<out>.mid`.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Track of a MIDI source to use as the source part.
        #[arg(long, default_value_t = 0)]
        track: usize,
        /// Meter of token-file sources, e.g. 3/4.
        #[arg(long)]
        meter: Option<Meter>,
        #[command(flatten)]
        beam: BeamArgs,
    },
    /// Generate for every segment of a split and score it.
    Evaluate {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long, default_value = "validation")]
        split: Split,
        /// Directory for bleu.tsv, memorization.tsv and table.txt.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Score the references against themselves instead of a model.
        #[arg(long)]
        oracle: bool,
        #[command(flatten)]
        beam: BeamArgs,
    },
}

#[derive(Debug, Args)]
pub struct BeamArgs {
    #[arg(long)]
    pub beam_width: Option<usize>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub max_steps: Option<usize>,
    /// Disable the note-grammar constraint.
    #[arg(long)]
    pub no_grammar: bool,
}

/// Settings shared by all commands, read from `--config` and overridden by
/// flags.
#[derive(Clone, Debug)]
pub struct RunConfig {
    pub seed: u64,
    pub variant: Option<Variant>,
    pub corpus: CorpusConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub checkpoint_every: usize,
    pub beam: BeamConfig,
    pub midi_dir: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
    pub manifest: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 7,
            variant: None,
            corpus: CorpusConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            checkpoint_every: 500,
            beam: BeamConfig::default(),
            midi_dir: None,
            out_dir: None,
            manifest: None,
            checkpoint: None,
        }
    }
}

impl RunConfig {
    /// Parse `key=value` lines; `#` starts a comment. Unknown keys are errors.
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let mut config = RunConfig::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| CliError::Usage(format!("config line {}: expected key=value", n + 1)))?;
            config.set(k.trim(), v.trim()).map_err(|e| CliError::Usage(format!("config line {}: {e}", n + 1)))?;
        }
        Ok(config)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), String> {
        fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, String> {
            value.parse().map_err(|_| format!("invalid value {value:?} for {key}"))
        }
        match key {
            "seed" => self.seed = num(key, value)?,
            "variant" => self.variant = Some(value.parse().map_err(|e| format!("{e}"))?),
            "val_fraction" | "polyphony_threshold" | "both_directions" | "split_by" | "drop_leaked" => {
                self.corpus.apply(&[(key.to_string(), value.to_string())]).map_err(|e| e.to_string())?
            }
            "steps" => self.train.steps = num(key, value)?,
            "batch_size" => self.train.batch_size = num(key, value)?,
            "checkpoint_every" => self.checkpoint_every = num(key, value)?,
            "lr_factor" => self.train.adam.lr_factor = num(key, value)?,
            "warmup_steps" => self.train.adam.warmup_steps = num(key, value)?,
            "clip_norm" => self.train.adam.clip_norm = Some(num(key, value)?),
            "beam_width" => self.beam.width = num(key, value)?,
            "alpha" => self.beam.alpha = num(key, value)?,
            "max_steps" => self.beam.max_steps = Some(num(key, value)?),
            "grammar" => self.beam.grammar = num(key, value)?,
            "midi_dir" => self.midi_dir = Some(value.into()),
            "out_dir" => self.out_dir = Some(value.into()),
            "manifest" => self.manifest = Some(value.into()),
            "checkpoint" => self.checkpoint = Some(value.into()),
            k if ModelConfig::is_key(k) => self.model.set(k, value).map_err(|e| e.to_string())?,
            other => return Err(format!("unknown key {other:?}")),
        }
        Ok(())
    }

    /// Push the single seed into every stage.
    fn propagate_seed(&mut self) {
        self.corpus.seed = self.seed;
        self.model.seed = self.seed;
        self.train.seed = self.seed;
    }
}

/// Parse arguments, run, print any error and return the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    let mut config = match &cli.config {
        Some(path) => {
            let text = fs::read_to_string(path)
                .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
            RunConfig::parse(&text)?
        }
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    if let Some(variant) = cli.variant {
        config.variant = Some(variant);
    }
    config.propagate_seed();

    match cli.command {
        Command::Ingest { midi_dir, out, both_directions } => {
            config.corpus.both_directions |= both_directions;
            let midi_dir = required(midi_dir.or(config.midi_dir.clone()), "midi_dir")?;
            let out = required(out.or(config.out_dir.clone()), "--out")?;
            ingest(&config, &midi_dir, &out)
        }
        Command::Train { manifest, checkpoint, resume, steps } => {
            if let Some(steps) = steps {
                config.train.steps = steps;
            }
            let manifest = required(manifest.or(config.manifest.clone()), "manifest")?;
            let checkpoint = required(checkpoint.or(config.checkpoint.clone()), "--checkpoint")?;
            train(&config, &manifest, &checkpoint, resume)
        }
        Command::Generate { checkpoint, source, out, track, meter, beam } => {
            apply_beam(&mut config.beam, &beam);
            let out = out.unwrap_or_else(|| source.with_extension("generated"));
            generate(&config, &checkpoint, &source, &out, track, meter)
        }
        Command::Evaluate { checkpoint, manifest, split, out, oracle, beam } => {
            apply_beam(&mut config.beam, &beam);
            let manifest = required(manifest.or(config.manifest.clone()), "--manifest")?;
            let out = required(out.or(config.out_dir.clone()), "--out")?;
            let checkpoint = if oracle { None } else { Some(required(checkpoint.or(config.checkpoint.clone()), "--checkpoint")?) };
            evaluate(&config, checkpoint.as_deref(), &manifest, split, &out)
        }
    }
}

fn required(value: Option<PathBuf>, name: &str) -> Result<PathBuf, CliError> {
    value.ok_or_else(|| CliError::Usage(format!("missing {name}")))
}

fn apply_beam(beam: &mut BeamConfig, args: &BeamArgs) {
    if let Some(w) = args.beam_width {
        beam.width = w;
    }
    if let Some(a) = args.alpha {
        beam.alpha = a;
    }
    if let Some(m) = args.max_steps {
        beam.max_steps = Some(m);
    }
    if args.no_grammar {
        beam.grammar = false;
    }
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), CliError> {
    fs::write(path, contents).map_err(|e| CliError::Data(format!("cannot write {}: {e}", path.display())))
}

fn ingest(config: &RunConfig, midi_dir: &Path, out: &Path) -> Result<(), CliError> {
    let (pieces, failures) = load_midi_dir(midi_dir).map_err(data("reading MIDI directory"))?;
    for (path, e) in &failures {
        eprintln!("warning: skipping {}: {e}", path.display());
    }
    if pieces.is_empty() {
        return Err(CliError::Data(format!("no readable MIDI files in {}", midi_dir.display())));
    }
    let inputs: Vec<PieceInput> =
        pieces.iter().map(|p| PieceInput { piece_id: p.piece_id.clone(), piece: &p.piece }).collect();
    let corpus = build_corpus(&inputs, &config.corpus).map_err(|e| CliError::Usage(e.to_string()))?;
    if corpus.stats.filtered == 0 {
        print!("{}", corpus.stats.summary());
        return Err(CliError::Empty(format!(
            "no segments survive ({} pieces, {} pairs)",
            corpus.stats.pieces, corpus.stats.pairs
        )));
    }
    let variant = config.variant.unwrap_or(Variant::BeatPosition);
    let encoded = EncodedCorpus::encode(&corpus, variant).map_err(data("encoding corpus"))?;
    let manifest = write_corpus(out, &encoded).map_err(data("writing corpus"))?;
    print!("{}", ingest_summary(&corpus.stats, &encoded));
    println!("manifest\t{}", manifest.display());
    Ok(())
}

fn check_variant(config: &RunConfig, actual: Variant, what: &str) -> Result<(), CliError> {
    match config.variant {
        Some(v) if v != actual => Err(CliError::Data(format!("--variant {v} does not match the {what} ({actual})"))),
        _ => Ok(()),
    }
}

fn log_path(checkpoint: &Path) -> PathBuf {
    let mut s = checkpoint.as_os_str().to_owned();
    s.push(".log.tsv");
    PathBuf::from(s)
}

fn save_all(model: &TrainedModel, trainer: &Trainer<f32>, checkpoint: &Path) -> Result<(), CliError> {
    model.save(checkpoint, trainer.step())?;
    save_optimizer(&optimizer_path(checkpoint), &trainer.optimizer).map_err(data("saving optimiser state"))
}

fn train(config: &RunConfig, manifest: &Path, checkpoint: &Path, resume: bool) -> Result<(), CliError> {
    let corpus = read_corpus(manifest).map_err(data("reading manifest"))?;
    check_variant(config, corpus.variant, "manifest")?;
    if corpus.train.is_empty() {
        return Err(CliError::Empty("the manifest has no training segments".into()));
    }
    let data_examples = corpus.examples(Split::Train);
    let (mut shell, mut trainer) = if resume {
        let (loaded, step) = TrainedModel::load(checkpoint)?;
        loaded.check_corpus(&corpus)?;
        let optimizer = load_optimizer(&optimizer_path(checkpoint), &loaded.model.params, config.train.adam.clone())
            .map_err(data("loading optimiser state"))?;
        if optimizer.step != step {
            return Err(CliError::Data("checkpoint and optimiser state are from different steps".into()));
        }
        let trainer = Trainer::resume(loaded.model.clone(), optimizer, config.train.clone());
        (loaded, trainer)
    } else {
        let fresh = TrainedModel::for_corpus(&corpus, config.model.clone()).map_err(|e| CliError::Usage(e.to_string()))?;
        let trainer = Trainer::new(fresh.model.clone(), config.train.clone());
        (fresh, trainer)
    };

    let log = log_path(checkpoint);
    let mut log_file = OpenOptions::new()
        .create(true)
        .append(resume)
        .write(true)
        .truncate(!resume)
        .open(&log)
        .map_err(data("opening training log"))?;
    if !resume {
        writeln!(log_file, "{}", StepRecord::TSV_HEADER).map_err(data("writing training log"))?;
    }
    println!(
        "training {} parameters on {} segments for steps {}..={}",
        trainer.model.params.size(),
        data_examples.len(),
        trainer.step() + 1,
        config.train.steps
    );

    let mut last_good: Option<PathBuf> = resume.then(|| checkpoint.to_path_buf());
    let every = config.checkpoint_every.max(1);
    while trainer.step() < config.train.steps {
        // train in chunks so checkpoints land between them
        let target = (trainer.step() / every + 1) * every;
        trainer.config.steps = target.min(config.train.steps);
        let mut lines = String::new();
        let result = trainer.run(&data_examples, |record, _| {
            let _ = writeln!(lines, "{}", record.tsv_line());
        });
        log_file.write_all(lines.as_bytes()).map_err(data("writing training log"))?;
        match result {
            Ok(Some(record)) => {
                shell.model = trainer.model.clone();
                save_all(&shell, &trainer, checkpoint)?;
                last_good = Some(checkpoint.to_path_buf());
                println!("step {}\tloss {:.4}\tsaved {}", record.step, record.loss, checkpoint.display());
            }
            Ok(None) => break,
            Err(e @ ModelError::Divergence { .. }) => {
                let hint = match &last_good {
                    Some(p) => format!("last good checkpoint: {}", p.display()),
                    None => "no checkpoint was written".into(),
                };
                return Err(CliError::Divergence(format!("{e}; {hint}")));
            }
            Err(e) => return Err(CliError::Data(e.to_string())),
        }
    }
    trainer.config.steps = config.train.steps;
    if last_good.is_none() {
        shell.model = trainer.model.clone();
        save_all(&shell, &trainer, checkpoint)?;
    }
    println!("log\t{}", log.display());
    Ok(())
}

fn is_midi(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| e.eq_ignore_ascii_case("mid") || e.eq_ignore_ascii_case("midi"))
}

fn with_suffix(prefix: &Path, suffix: &str) -> PathBuf {
    let mut s = prefix.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn generate(
    config: &RunConfig,
    checkpoint: &Path,
    source: &Path,
    out: &Path,
    track: usize,
    meter: Option<Meter>,
) -> Result<(), CliError> {
    let (model, _) = TrainedModel::load(checkpoint)?;
    check_variant(config, model.variant, "checkpoint")?;

    // (window start, window length, source tokens)
    let (windows, source_notes, meters) = if is_midi(source) {
        let bytes = fs::read(source).map_err(data("reading source"))?;
        let piece = parse_midi(&bytes).map_err(data("parsing source"))?;
        let raw = piece
            .tracks
            .get(track)
            .ok_or_else(|| CliError::Usage(format!("source has {} tracks; --track {track} is out of range", piece.tracks.len())))?;
        let notes = monophonize(raw, piece.ppq, config.corpus.polyphony_threshold).map_err(|r| {
            CliError::Data(format!("track {track} is not monophonic (simultaneity ratio {:.2})", r.simultaneity_ratio))
        })?;
        let meters = meter.map_or_else(|| piece.meter_map(), MeterMap::constant);
        let windows = source_windows(&notes, &meters, model.variant).map_err(data("encoding source"))?;
        (windows, notes, meters)
    } else {
        let text = fs::read_to_string(source).map_err(data("reading source"))?;
        let meter = meter.unwrap_or_default();
        let length = Beats::from_millis(meter.measure_length().millis() * BARS_PER_SEGMENT as i64);
        let mut windows = Vec::new();
        let mut notes = Vec::new();
        for (i, line) in text.lines().filter(|l| !l.trim().is_empty()).enumerate() {
            let seq = TokenSequence::from_line(line, model.variant, MeterMap::constant(meter))
                .map_err(data("parsing source tokens"))?;
            let start = Beats::from_millis(length.millis() * i as i64);
            let decoded = decode(&seq, DecodeMode::Strict).map_err(data("decoding source tokens"))?;
            notes.extend(decoded.notes.iter().map(|n| NoteEvent { onset: start + n.onset, ..*n }));
            windows.push((start, length, seq));
        }
        (windows, notes, MeterMap::constant(meter))
    };
    if windows.is_empty() {
        return Err(CliError::Empty("the source yields no four-bar windows".into()));
    }

    let mut token_lines = String::new();
    let mut placed = Vec::new();
    let (mut unknown, mut truncated) = (0, 0);
    for (start, length, seq) in &windows {
        let g = model.generate(seq, &config.beam)?;
        unknown += g.unknown_source_words;
        truncated += usize::from(g.truncated);
        let _ = writeln!(token_lines, "{}", g.tokens.to_line());
        let notes = decode(&g.tokens, DecodeMode::Lenient).map(|d| d.notes).unwrap_or_default();
        placed.push((*start, *length, notes));
    }
    if unknown > 0 {
        eprintln!("warning: {unknown} source word(s) not in the vocabulary were mapped to <unk>");
    }
    if truncated > 0 {
        eprintln!("warning: {truncated} window(s) hit the step limit and were closed off");
    }
    let target = stitch(&placed);
    let tokens_path = with_suffix(out, ".tokens");
    let midi_path = with_suffix(out, ".mid");
    write_file(&tokens_path, token_lines)?;
    let midi = write_midi_with_meter(&source_notes, &target, OUTPUT_PPQ, Some(&meters)).map_err(data("rendering MIDI"))?;
    write_file(&midi_path, midi)?;
    println!("windows\t{}", windows.len());
    println!("unknown_source_words\t{unknown}");
    println!("truncated\t{truncated}");
    println!("tokens\t{}", tokens_path.display());
    println!("midi\t{}", midi_path.display());
    Ok(())
}

fn evaluate(config: &RunConfig, checkpoint: Option<&Path>, manifest: &Path, split: Split, out: &Path) -> Result<(), CliError> {
    let corpus = read_corpus(manifest).map_err(data("reading manifest"))?;
    check_variant(config, corpus.variant, "manifest")?;
    if corpus.split(split).is_empty() {
        return Err(CliError::Empty(format!("the {} split is empty", split.name())));
    }
    let (bleu, memorization, truncated) = match checkpoint {
        None => {
            let (b, m) = oracle_scores(&corpus, split)?;
            (b, m, 0)
        }
        Some(path) => {
            let (model, _) = TrainedModel::load(path)?;
            if model.variant != corpus.variant {
                return Err(CliError::Data(format!(
                    "checkpoint variant {} does not match manifest variant {}",
                    model.variant, corpus.variant
                )));
            }
            let e = evaluate_split(&model, &corpus, split, &config.beam)?;
            (e.bleu, e.memorization, e.truncated)
        }
    };
    fs::create_dir_all(out).map_err(data("creating output directory"))?;
    let table = results_table(&[(corpus.variant, &bleu)]);
    write_file(&out.join("bleu.tsv"), bleu.to_tsv())?;
    write_file(&out.join("memorization.tsv"), memorization.to_tsv())?;
    write_file(&out.join("table.txt"), &table)?;
    print!("{table}");
    println!("{}", memorization.summary());
    println!("exact_copy_count\t{}", memorization.exact_copy_count);
    if bleu.empty_candidates > 0 {
        eprintln!("warning: {} empty candidate(s)", bleu.empty_candidates);
    }
    if truncated > 0 {
        eprintln!("warning: {truncated} response(s) hit the step limit and were closed off");
    }
    Ok(())
}
