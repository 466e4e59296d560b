//! Encoded corpora on disk: MIDI directory loading, the segment manifest,
//! token files and vocabularies.
//!
//! An ingested corpus directory contains
//!
//! ```text
//! manifest.tsv              one row per segment
//! train.src  train.tgt      token files, one segment per line
//! validation.src  validation.tgt
//! vocab.src  vocab.tgt      one word per line, line number = id
//! ```
//!
//! Manifest token cells are `file:line` references (1-based).

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::corpus::{Corpus, CorpusStats, SegmentPair};
use crate::midi::{parse_midi, MidiError, MidiPiece};
use crate::model::Example;
use crate::time::MeterMap;
use crate::tokenizer::{build_vocabulary, encode, TokenSequence, TokenizerError, Variant, Vocabulary};

pub const MANIFEST: &str = "manifest.tsv";
pub const SOURCE_VOCAB: &str = "vocab.src";
pub const TARGET_VOCAB: &str = "vocab.tgt";
pub const MANIFEST_COLUMNS: [&str; 8] = [
    "piece_id",
    "pair_id",
    "segment_index",
    "transposition",
    "split",
    "source_token_file",
    "target_token_file",
    "meter",
];

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("{path}:{line}: {reason}")]
    Manifest { path: PathBuf, line: usize, reason: String },
    #[error(transparent)]
    Tokenizer(#[from] TokenizerError),
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> DatasetError + '_ {
    move |source| DatasetError::Io { path: path.to_path_buf(), source }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Validation,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Validation => "validation",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "train" => Ok(Split::Train),
            "validation" | "valid" | "val" => Ok(Split::Validation),
            other => Err(format!("unknown split {other:?}")),
        }
    }
}

/// One encoded segment pair with its provenance.
#[derive(Clone, Debug, PartialEq)]
pub struct EncodedSegment {
    pub piece_id: String,
    pub pair_id: String,
    pub segment_index: usize,
    pub transposition: i8,
    pub source: TokenSequence,
    pub target: TokenSequence,
}

impl EncodedSegment {
    pub fn key(&self) -> String {
        format!("{}#{}@{:+}", self.pair_id, self.segment_index, self.transposition)
    }

    pub fn encode(segment: &SegmentPair, variant: Variant) -> Result<Self, TokenizerError> {
        Ok(EncodedSegment {
            piece_id: segment.piece_id.clone(),
            pair_id: segment.pair_id.clone(),
            segment_index: segment.segment_index,
            transposition: segment.transposition,
            source: encode(&segment.source, variant, &segment.meters)?,
            target: encode(&segment.target, variant, &segment.meters)?,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncodedCorpus {
    pub variant: Variant,
    pub train: Vec<EncodedSegment>,
    pub validation: Vec<EncodedSegment>,
    /// Built from the training sources.
    pub source_vocab: Vocabulary,
    /// Built from the training targets.
    pub target_vocab: Vocabulary,
}

impl EncodedCorpus {
    pub fn encode(corpus: &Corpus, variant: Variant) -> Result<Self, TokenizerError> {
        let enc = |segs: &[SegmentPair]| -> Result<Vec<EncodedSegment>, TokenizerError> {
            segs.iter().map(|s| EncodedSegment::encode(s, variant)).collect()
        };
        let train = enc(&corpus.train)?;
        let validation = enc(&corpus.validation)?;
        let source_vocab = build_vocabulary(train.iter().map(|s| &s.source));
        let target_vocab = build_vocabulary(train.iter().map(|s| &s.target));
        Ok(EncodedCorpus { variant, train, validation, source_vocab, target_vocab })
    }

    pub fn split(&self, split: Split) -> &[EncodedSegment] {
        match split {
            Split::Train => &self.train,
            Split::Validation => &self.validation,
        }
    }

    pub fn example(&self, segment: &EncodedSegment) -> Example {
        to_example(&self.source_vocab, &self.target_vocab, segment)
    }

    /// Id-encoded examples of a split.
    pub fn examples(&self, split: Split) -> Vec<Example> {
        self.split(split).iter().map(|s| self.example(s)).collect()
    }
}

pub fn to_example(source_vocab: &Vocabulary, target_vocab: &Vocabulary, segment: &EncodedSegment) -> Example {
    Example { source: source_vocab.ids(&segment.source.words).0, target: target_vocab.ids(&segment.target.words).0 }
}

/// A readable MIDI file and its identifier (the file stem).
pub struct LoadedPiece {
    pub piece_id: String,
    pub path: PathBuf,
    pub piece: MidiPiece,
}

/// Parse every `.mid`/`.midi` file in `dir` (sorted by name). Unreadable
/// files are returned separately rather than aborting the load.
pub fn load_midi_dir(dir: &Path) -> Result<(Vec<LoadedPiece>, Vec<(PathBuf, MidiError)>), DatasetError> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(io_err(dir))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension().and_then(|e| e.to_str()).is_some_and(|e| e.eq_ignore_ascii_case("mid") || e.eq_ignore_ascii_case("midi"))
        })
        .collect();
    paths.sort();
    let mut pieces = Vec::new();
    let mut failures = Vec::new();
    for path in paths {
        let bytes = fs::read(&path).map_err(io_err(&path))?;
        match parse_midi(&bytes) {
            Ok(piece) => {
                let piece_id = path.file_stem().map_or_else(String::new, |s| s.to_string_lossy().into_owned());
                pieces.push(LoadedPiece { piece_id, path, piece });
            }
            Err(e) => failures.push((path, e)),
        }
    }
    Ok((pieces, failures))
}

fn token_file(split: Split, side: &str) -> String {
    format!("{}.{side}", split.name())
}

/// Render the manifest text (deterministic for a given corpus).
pub fn manifest_text(corpus: &EncodedCorpus) -> String {
    let mut out = format!("# variant={}\n{}\n", corpus.variant.name(), MANIFEST_COLUMNS.join("\t"));
    for split in [Split::Train, Split::Validation] {
        for (i, s) in corpus.split(split).iter().enumerate() {
            let _ = writeln!(
                out,
                "{}\t{}\t{}\t{}\t{}\t{}:{}\t{}:{}\t{}",
                s.piece_id,
                s.pair_id,
                s.segment_index,
                s.transposition,
                split.name(),
                token_file(split, "src"),
                i + 1,
                token_file(split, "tgt"),
                i + 1,
                s.source.meters.to_text()
            );
        }
    }
    out
}

/// One line per segment.
pub fn token_lines<'a>(seqs: impl IntoIterator<Item = &'a TokenSequence>) -> String {
    let mut out = String::new();
    for s in seqs {
        out.push_str(&s.to_line());
        out.push('\n');
    }
    out
}

/// Write the manifest, token files and vocabularies into `dir`.
pub fn write_corpus(dir: &Path, corpus: &EncodedCorpus) -> Result<PathBuf, DatasetError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let write = |name: &str, text: String| {
        let path = dir.join(name);
        fs::write(&path, text).map_err(io_err(&path))
    };
    for split in [Split::Train, Split::Validation] {
        let segs = corpus.split(split);
        write(&token_file(split, "src"), token_lines(segs.iter().map(|s| &s.source)))?;
        write(&token_file(split, "tgt"), token_lines(segs.iter().map(|s| &s.target)))?;
    }
    write(SOURCE_VOCAB, corpus.source_vocab.to_text())?;
    write(TARGET_VOCAB, corpus.target_vocab.to_text())?;
    let manifest = dir.join(MANIFEST);
    fs::write(&manifest, manifest_text(corpus)).map_err(io_err(&manifest))?;
    Ok(manifest)
}

/// Load an ingested corpus from its manifest path.
pub fn read_corpus(manifest: &Path) -> Result<EncodedCorpus, DatasetError> {
    let dir = manifest.parent().unwrap_or(Path::new("."));
    let text = fs::read_to_string(manifest).map_err(io_err(manifest))?;
    let bad = |line: usize, reason: String| DatasetError::Manifest { path: manifest.to_path_buf(), line, reason };

    let mut variant = None;
    let mut header_seen = false;
    let mut files: HashMap<String, Vec<String>> = HashMap::new();
    let mut corpus = EncodedCorpus {
        variant: Variant::BeatPosition,
        train: Vec::new(),
        validation: Vec::new(),
        source_vocab: Vocabulary::from_words([]),
        target_vocab: Vocabulary::from_words([]),
    };
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        if let Some(comment) = raw.strip_prefix('#') {
            if let Some(v) = comment.trim().strip_prefix("variant=") {
                variant = Some(v.parse::<Variant>().map_err(|e| bad(line, e.to_string()))?);
            }
            continue;
        }
        if raw.trim().is_empty() {
            continue;
        }
        let cells: Vec<&str> = raw.split('\t').collect();
        if !header_seen {
            if cells[..] != MANIFEST_COLUMNS[..] {
                return Err(bad(line, format!("expected header {:?}", MANIFEST_COLUMNS.join("\t"))));
            }
            header_seen = true;
            continue;
        }
        if cells.len() != MANIFEST_COLUMNS.len() {
            return Err(bad(line, format!("expected {} columns, found {}", MANIFEST_COLUMNS.len(), cells.len())));
        }
        let variant = variant.ok_or_else(|| bad(line, "missing '# variant=' line".into()))?;
        let meters = MeterMap::from_text(cells[7]).map_err(|e| bad(line, e.to_string()))?;
        let mut fetch = |cell: &str| -> Result<TokenSequence, DatasetError> {
            let (file, n) = cell.rsplit_once(':').ok_or_else(|| bad(line, format!("token reference {cell:?}")))?;
            let n: usize = n.parse().map_err(|_| bad(line, format!("token reference {cell:?}")))?;
            if !files.contains_key(file) {
                let path = dir.join(file);
                let text = fs::read_to_string(&path).map_err(io_err(&path))?;
                files.insert(file.to_string(), text.lines().map(str::to_string).collect());
            }
            let text = files[file].get(n.wrapping_sub(1)).ok_or_else(|| bad(line, format!("{file} has no line {n}")))?;
            TokenSequence::from_line(text, variant, meters.clone())
                .map_err(|e| bad(line, format!("{file}:{n}: {e}")))
        };
        let segment = EncodedSegment {
            piece_id: cells[0].to_string(),
            pair_id: cells[1].to_string(),
            segment_index: cells[2].parse().map_err(|_| bad(line, "bad segment_index".into()))?,
            transposition: cells[3].parse().map_err(|_| bad(line, "bad transposition".into()))?,
            source: fetch(cells[5])?,
            target: fetch(cells[6])?,
        };
        match cells[4].parse::<Split>().map_err(|e| bad(line, e))? {
            Split::Train => corpus.train.push(segment),
            Split::Validation => corpus.validation.push(segment),
        }
    }
    if !header_seen {
        return Err(bad(1, "empty manifest".into()));
    }
    corpus.variant = variant.ok_or_else(|| bad(1, "missing '# variant=' line".into()))?;
    let read_vocab = |name: &str| -> Result<Vocabulary, DatasetError> {
        let path = dir.join(name);
        Ok(Vocabulary::from_text(&fs::read_to_string(&path).map_err(io_err(&path))?)?)
    };
    corpus.source_vocab = read_vocab(SOURCE_VOCAB)?;
    corpus.target_vocab = read_vocab(TARGET_VOCAB)?;
    Ok(corpus)
}

/// Counts printed by ingest, including the post-encoding split sizes.
pub fn ingest_summary(stats: &CorpusStats, corpus: &EncodedCorpus) -> String {
    format!(
        "{}variant\t{}\nsource_vocab\t{}\ntarget_vocab\t{}\n",
        stats.summary(),
        corpus.variant.name(),
        corpus.source_vocab.len(),
        corpus.target_vocab.len()
    )
}
