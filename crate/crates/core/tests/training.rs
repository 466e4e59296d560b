use counterpoint::corpus::{build_corpus, CorpusConfig, PieceInput};
use counterpoint::dataset::{load_midi_dir, EncodedCorpus, Split};
use counterpoint::model::train::{evaluate, TrainConfig, Trainer};
use counterpoint::model::ModelConfig;
use counterpoint::pipeline::{load_optimizer, optimizer_path, save_optimizer, TrainedModel};
use counterpoint::tokenizer::Variant;
use tempfile::TempDir;

fn ten_segments() -> EncodedCorpus {
    let dir = concat!(env!("CARGO_MANIFEST_DIR"), "/../../fixtures/midi");
    let (pieces, _) = load_midi_dir(dir.as_ref()).unwrap();
    let inputs: Vec<PieceInput> =
        pieces.iter().map(|p| PieceInput { piece_id: p.piece_id.clone(), piece: &p.piece }).collect();
    let corpus = build_corpus(&inputs, &CorpusConfig { val_fraction: 0.0, ..Default::default() }).unwrap();
    let mut encoded = EncodedCorpus::encode(&corpus, Variant::BeatPosition).unwrap();
    encoded.train.retain(|s| s.transposition == 0);
    encoded.train.truncate(10);
    encoded
}

/// Regression baseline for the desk configuration.
#[test]
fn ten_segments_fit_within_five_hundred_steps() {
    let corpus = ten_segments();
    let data = corpus.examples(Split::Train);
    let model = TrainedModel::for_corpus(&corpus, ModelConfig::default()).unwrap().model;
    let mut trainer = Trainer::new(model, TrainConfig { steps: 500, batch_size: 10, ..Default::default() });
    trainer.run(&data, |_, _| {}).unwrap();
    let stats = evaluate(&trainer.model, &data, 10).unwrap();
    assert!(stats.loss < 0.5, "loss {}", stats.loss);
}

#[test]
fn saved_state_continues_where_it_stopped() {
    let corpus = ten_segments();
    let data = corpus.examples(Split::Train);
    let config = ModelConfig { d_model: 32, n_heads: 2, d_ff: 64, ..Default::default() };
    let shell = TrainedModel::for_corpus(&corpus, config).unwrap();
    let tc = TrainConfig { steps: 30, batch_size: 4, ..Default::default() };

    let mut straight = Trainer::new(shell.model.clone(), TrainConfig { steps: 60, ..tc.clone() });
    let mut losses = Vec::new();
    straight.run(&data, |r, _| losses.push(r.loss)).unwrap();

    let mut first = Trainer::new(shell.model.clone(), tc.clone());
    first.run(&data, |_, _| {}).unwrap();
    let tmp = TempDir::new().unwrap();
    let path = tmp.path().join("m.ckpt");
    TrainedModel { model: first.model.clone(), ..shell.clone() }.save(&path, 30).unwrap();
    save_optimizer(&optimizer_path(&path), &first.optimizer).unwrap();

    let (loaded, step) = TrainedModel::load(&path).unwrap();
    assert_eq!(step, 30);
    assert_eq!(loaded.variant, Variant::BeatPosition);
    assert_eq!(loaded.target_vocab, corpus.target_vocab);
    let optimizer = load_optimizer(&optimizer_path(&path), &loaded.model.params, tc.adam.clone()).unwrap();
    let mut resumed = Trainer::resume(loaded.model, optimizer, TrainConfig { steps: 60, ..tc });
    let mut after = Vec::new();
    resumed.run(&data, |r, _| after.push(r.loss)).unwrap();
    assert_eq!(after, losses[30..]);
    assert!((after[0] - losses[29]).abs() <= 0.05 * losses[29]);
    assert_eq!(resumed.model.params, straight.model.params);
}

#[test]
fn checkpoint_round_trip_preserves_predictions() {
    let corpus = ten_segments();
    let shell = TrainedModel::for_corpus(&corpus, ModelConfig { d_model: 32, n_heads: 2, d_ff: 64, ..Default::default() }).unwrap();
    let tmp = TempDir::new().unwrap();
    let path = tmp.path().join("m.ckpt");
    shell.save(&path, 0).unwrap();
    let (loaded, _) = TrainedModel::load(&path).unwrap();
    let data = corpus.examples(Split::Train);
    let a = evaluate(&shell.model, &data, 4).unwrap();
    let b = evaluate(&loaded.model, &data, 4).unwrap();
    assert_eq!(a.loss, b.loss);
}
