use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use counterpoint::midi::{write_midi, NoteEvent};
use counterpoint::time::Beats;
use counterpoint::tokenizer::{decode, DecodeMode, TokenSequence, Variant};
use tempfile::TempDir;

const BIN: &str = env!("CARGO_BIN_EXE_counterpoint");

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures/midi")
}

fn run(args: &[&str]) -> Output {
    Command::new(BIN).args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn path(p: &Path) -> &str {
    p.to_str().expect("utf-8 path")
}

fn write_config(dir: &Path, lines: &str) -> PathBuf {
    let p = dir.join("run.conf");
    fs::write(&p, lines).unwrap();
    p
}

/// `bars` measures of 4/4 in running quarter notes.
fn quarters(bars: usize, base: u8) -> Vec<NoteEvent> {
    (0..bars * 4).map(|i| NoteEvent::note(base + [0, 2, 4, 5, 7][i % 5], Beats::whole(i as i64), Beats::whole(1))).collect()
}

const SMALL_MODEL: &str = "d_model=16\nn_heads=2\nd_ff=32\nn_layers_enc=1\nn_layers_dec=1\nbatch_size=8\n";

#[test]
fn ingest_one_two_voice_piece() {
    let tmp = TempDir::new().unwrap();
    let midi = tmp.path().join("midi");
    fs::create_dir(&midi).unwrap();
    fs::write(midi.join("invention.mid"), write_midi(&quarters(16, 72), &quarters(16, 48), 480).unwrap()).unwrap();
    let conf = write_config(tmp.path(), "val_fraction=0\n");
    let out = tmp.path().join("corpus");
    let o = run(&["--config", path(&conf), "ingest", path(&midi), "--out", path(&out)]);
    assert_eq!(code(&o), 0, "{o:?}");
    let s = stdout(&o);
    for line in ["pairs\t1\n", "segments\t4\n", "segments_after_filter\t4\n", "train\t48\n", "validation\t0\n"] {
        assert!(s.contains(line), "missing {line:?} in\n{s}");
    }
    assert_eq!(fs::read_to_string(out.join("train.src")).unwrap().lines().count(), 48);
}

#[test]
fn solo_pieces_give_an_empty_result() {
    let tmp = TempDir::new().unwrap();
    for i in 0..3 {
        fs::write(tmp.path().join(format!("solo{i}.mid")), write_midi(&quarters(8, 60), &[], 480).unwrap()).unwrap();
    }
    let o = run(&["ingest", path(tmp.path()), "--out", path(&tmp.path().join("out"))]);
    assert_eq!(code(&o), 2, "{o:?}");
    assert!(stdout(&o).contains("pairs\t0\n"));
}

#[test]
fn unreadable_input_is_a_data_error() {
    let tmp = TempDir::new().unwrap();
    fs::write(tmp.path().join("broken.mid"), b"not a midi file").unwrap();
    let o = run(&["ingest", path(tmp.path()), "--out", path(&tmp.path().join("out"))]);
    assert_eq!(code(&o), 3, "{o:?}");
}

#[test]
fn usage_errors_exit_with_one() {
    let tmp = TempDir::new().unwrap();
    assert_eq!(code(&run(&["transmogrify"])), 1);
    assert_eq!(code(&run(&["--help"])), 0);
    let conf = write_config(tmp.path(), "no_such_key=3\n");
    let o = run(&["--config", path(&conf), "ingest", path(&fixtures()), "--out", path(tmp.path())]);
    assert_eq!(code(&o), 1, "{o:?}");
    assert!(String::from_utf8_lossy(&o.stderr).contains("no_such_key"));
    assert_eq!(code(&run(&["--variant", "sideways", "ingest"])), 1);
}

#[test]
fn ingest_is_deterministic() {
    let tmp = TempDir::new().unwrap();
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    for dir in [&a, &b] {
        let o = run(&["--seed", "11", "ingest", path(&fixtures()), "--out", path(dir)]);
        assert_eq!(code(&o), 0, "{o:?}");
    }
    for file in ["manifest.tsv", "train.src", "train.tgt", "validation.src", "validation.tgt", "vocab.src", "vocab.tgt"] {
        assert_eq!(fs::read(a.join(file)).unwrap(), fs::read(b.join(file)).unwrap(), "{file}");
    }
    let c = tmp.path().join("c");
    run(&["--seed", "12", "ingest", path(&fixtures()), "--out", path(&c)]);
    assert_ne!(fs::read(a.join("manifest.tsv")).unwrap(), fs::read(c.join("manifest.tsv")).unwrap());
}

#[test]
fn evaluate_oracle_scores_one_hundred() {
    let tmp = TempDir::new().unwrap();
    let corpus = tmp.path().join("corpus");
    assert_eq!(code(&run(&["ingest", path(&fixtures()), "--out", path(&corpus)])), 0);
    let out = tmp.path().join("eval");
    let o = run(&["evaluate", "--oracle", "--manifest", path(&corpus.join("manifest.tsv")), "--out", path(&out)]);
    assert_eq!(code(&o), 0, "{o:?}");
    let table = fs::read_to_string(out.join("table.txt")).unwrap();
    let row = table.lines().nth(1).unwrap();
    assert_eq!(row.matches("100.0±0.0").count(), 3, "{table}");
    assert!(stdout(&o).contains("exact_copy_count\t0"));
    assert!(fs::read_to_string(out.join("bleu.tsv")).unwrap().starts_with("segment\tpitch_bleu"));
    assert!(fs::read_to_string(out.join("memorization.tsv")).unwrap().starts_with("response\tmin_distance"));
}

/// Ingest, train for `steps` and return (tempdir, manifest, checkpoint).
fn trained(steps: usize, variant: &str) -> (TempDir, PathBuf, PathBuf) {
    let tmp = TempDir::new().unwrap();
    let corpus = tmp.path().join("corpus");
    assert_eq!(code(&run(&["--variant", variant, "ingest", path(&fixtures()), "--out", path(&corpus)])), 0);
    let conf = write_config(tmp.path(), &format!("{SMALL_MODEL}checkpoint_every=10\n"));
    let manifest = corpus.join("manifest.tsv");
    let ckpt = tmp.path().join("model.ckpt");
    let o = run(&["--config", path(&conf), "train", path(&manifest), "--checkpoint", path(&ckpt), "--steps", &steps.to_string()]);
    assert_eq!(code(&o), 0, "{o:?}");
    (tmp, manifest, ckpt)
}

fn losses(log: &Path) -> Vec<String> {
    fs::read_to_string(log).unwrap().lines().skip(1).map(|l| l.split('\t').take(3).collect::<Vec<_>>().join("\t")).collect()
}

#[test]
fn resumed_training_matches_an_uninterrupted_run() {
    let (tmp, manifest, ckpt) = trained(20, "beat");
    let conf = tmp.path().join("run.conf");
    let o = run(&["--config", path(&conf), "train", path(&manifest), "--checkpoint", path(&ckpt), "--resume", "--steps", "40"]);
    assert_eq!(code(&o), 0, "{o:?}");
    let straight = tmp.path().join("straight.ckpt");
    let o = run(&["--config", path(&conf), "train", path(&manifest), "--checkpoint", path(&straight), "--steps", "40"]);
    assert_eq!(code(&o), 0, "{o:?}");
    let resumed = losses(&tmp.path().join("model.ckpt.log.tsv"));
    assert_eq!(resumed.len(), 40);
    assert_eq!(resumed, losses(&tmp.path().join("straight.ckpt.log.tsv")));
    assert_eq!(fs::read(&ckpt).unwrap(), fs::read(&straight).unwrap());
}

#[test]
fn empty_training_split_is_an_empty_result() {
    let tmp = TempDir::new().unwrap();
    let midi = tmp.path().join("midi");
    fs::create_dir(&midi).unwrap();
    fs::write(midi.join("only.mid"), write_midi(&quarters(8, 72), &quarters(8, 48), 480).unwrap()).unwrap();
    // one piece and a split that sends it to validation
    let conf = write_config(tmp.path(), &format!("{SMALL_MODEL}val_fraction=0.9\n"));
    let corpus = tmp.path().join("corpus");
    let o = run(&["--config", path(&conf), "ingest", path(&midi), "--out", path(&corpus)]);
    assert_eq!(code(&o), 0, "{o:?}");
    let o = run(&["--config", path(&conf), "train", path(&corpus.join("manifest.tsv")), "--checkpoint", path(&tmp.path().join("m.ckpt"))]);
    assert_eq!(code(&o), 2, "{o:?}");
}

#[test]
fn divergence_exits_with_four() {
    let tmp = TempDir::new().unwrap();
    let corpus = tmp.path().join("corpus");
    assert_eq!(code(&run(&["ingest", path(&fixtures()), "--out", path(&corpus)])), 0);
    let conf = write_config(tmp.path(), &format!("{SMALL_MODEL}lr_factor=1e30\nwarmup_steps=1\ncheckpoint_every=1\n"));
    let o = run(&["--config", path(&conf), "train", path(&corpus.join("manifest.tsv")), "--checkpoint", path(&tmp.path().join("m.ckpt")), "--steps", "50"]);
    assert_eq!(code(&o), 4, "{o:?}");
    assert!(String::from_utf8_lossy(&o.stderr).contains("checkpoint"), "{o:?}");
}

#[test]
fn generate_is_deterministic_and_well_formed() {
    let (tmp, _, ckpt) = trained(30, "beat");
    let source = fixtures().join("bwv101_7.mid");
    let mut outputs = Vec::new();
    for name in ["first", "second"] {
        let prefix = tmp.path().join(name);
        let o = run(&["generate", path(&ckpt), path(&source), "--out", path(&prefix), "--beam-width", "1"]);
        assert_eq!(code(&o), 0, "{o:?}");
        outputs.push(fs::read_to_string(tmp.path().join(format!("{name}.tokens"))).unwrap());
        let midi = fs::read(tmp.path().join(format!("{name}.mid"))).unwrap();
        assert_eq!(counterpoint::midi::parse_midi(&midi).unwrap().tracks.len(), 2);
    }
    assert_eq!(outputs[0], outputs[1]);
    for line in outputs[0].lines() {
        let seq = TokenSequence::from_line(line, Variant::BeatPosition, Default::default()).unwrap();
        decode(&seq, DecodeMode::Strict).unwrap();
    }

    // a pitch the training data never saw
    let odd = tmp.path().join("odd.tokens");
    fs::write(&odd, "<s> P1 D1.000 B0.000 P60 D1.000 B1.000 P62 D1.000 B2.000 P64 D1.000 B3.000 </s>\n").unwrap();
    let o = run(&["generate", path(&ckpt), path(&odd), "--out", path(&tmp.path().join("odd"))]);
    assert_eq!(code(&o), 0, "{o:?}");
    assert!(stdout(&o).contains("unknown_source_words\t1"), "{}", stdout(&o));
}

#[test]
fn variant_mismatch_is_refused() {
    let (tmp, _, ckpt) = trained(10, "beat");
    let none = tmp.path().join("none");
    assert_eq!(code(&run(&["--variant", "none", "ingest", path(&fixtures()), "--out", path(&none)])), 0);
    let o = run(&["evaluate", "--checkpoint", path(&ckpt), "--manifest", path(&none.join("manifest.tsv")), "--out", path(&tmp.path().join("e"))]);
    assert_eq!(code(&o), 3, "{o:?}");
    let o = run(&["--variant", "mod-beat", "generate", path(&ckpt), path(&fixtures().join("bwv101_7.mid"))]);
    assert_eq!(code(&o), 3, "{o:?}");
}

#[test]
fn evaluate_writes_reports_for_a_model() {
    let (tmp, manifest, ckpt) = trained(20, "none");
    let out = tmp.path().join("eval");
    let o = run(&["evaluate", "--checkpoint", path(&ckpt), "--manifest", path(&manifest), "--out", path(&out), "--beam-width", "2"]);
    assert_eq!(code(&o), 0, "{o:?}");
    let table = fs::read_to_string(out.join("table.txt")).unwrap();
    assert!(table.starts_with("Encoding") && table.contains("none"), "{table}");
    let bleu = fs::read_to_string(out.join("bleu.tsv")).unwrap();
    assert_eq!(bleu.lines().filter(|l| !l.starts_with('#')).count(), 1 + 33);
}
