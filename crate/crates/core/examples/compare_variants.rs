//! Train one model per token encoding with the same budget and compare
//! held-out BLEU, most importantly on the duration stream.
//!
//!     cargo run --release --example compare_variants -- [steps=3000] [key=value ...]
//!
//! Extra `key=value` arguments adjust the model (`d_model=64`, ...) or the
//! run (`batch_size=16`, `beam_width=5`, `eval_every=500`,
//! `variants=none,beat`). With `eval_every`, held-out scores are also
//! printed at intermediate steps.

use std::time::Instant;

use counterpoint::corpus::{build_corpus, CorpusConfig, PieceInput};
use counterpoint::dataset::{load_midi_dir, EncodedCorpus, Split};
use counterpoint::decoding::BeamConfig;
use counterpoint::metrics::results_table;
use counterpoint::model::train::TrainConfig;
use counterpoint::model::ModelConfig;
use counterpoint::pipeline::{evaluate_split, train_model, TrainedModel};
use counterpoint::tokenizer::Variant;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let steps: usize = args.next().map_or(Ok(3000), |s| s.parse())?;
    let mut model_config = ModelConfig::default();
    let mut train_config = TrainConfig { steps, ..Default::default() };
    let mut beam = BeamConfig::default();
    let mut eval_every = 0;
    let mut variants = vec![Variant::None, Variant::BeatPosition, Variant::ModBeatPosition];
    for arg in args {
        let (k, v) = arg.split_once('=').ok_or("expected key=value")?;
        match k {
            "batch_size" => train_config.batch_size = v.parse()?,
            "warmup_steps" => train_config.adam.warmup_steps = v.parse()?,
            "lr_factor" => train_config.adam.lr_factor = v.parse()?,
            "beam_width" => beam.width = v.parse()?,
            "eval_every" => eval_every = v.parse()?,
            "variants" => variants = v.split(',').map(str::parse).collect::<Result<_, _>>()?,
            _ => model_config.set(k, v)?,
        }
    }

    let dir = concat!(env!("CARGO_MANIFEST_DIR"), "/../../fixtures/midi");
    let (pieces, _) = load_midi_dir(dir.as_ref())?;
    let inputs: Vec<PieceInput> =
        pieces.iter().map(|p| PieceInput { piece_id: p.piece_id.clone(), piece: &p.piece }).collect();
    let corpus = build_corpus(&inputs, &CorpusConfig::default())?;
    println!("{} train / {} validation segments, {steps} steps each", corpus.train.len(), corpus.validation.len());

    let mut reports = Vec::new();
    for variant in variants {
        let start = Instant::now();
        let encoded = EncodedCorpus::encode(&corpus, variant)?;
        let model = train_model(&encoded, model_config.clone(), train_config.clone(), |r, t| {
            if eval_every > 0 && r.step % eval_every == 0 && r.step < steps {
                let snapshot = TrainedModel { model: t.model.clone(), ..TrainedModel::for_corpus(&encoded, t.model.config.clone()).expect("config") };
                let eval = evaluate_split(&snapshot, &encoded, Split::Validation, &beam).expect("evaluation");
                println!(
                    "  {variant} step {} loss {:.3}  pitch {}  duration {}  combined {}",
                    r.step, r.loss, eval.bleu.pitch, eval.bleu.duration, eval.bleu.combined
                );
            } else if r.step % 500 == 0 {
                println!("  {variant} step {} loss {:.3}", r.step, r.loss);
            }
        })?;
        let eval = evaluate_split(&model, &encoded, Split::Validation, &beam)?;
        println!("{variant}: {:.0}s, {}", start.elapsed().as_secs_f64(), eval.memorization.summary());
        reports.push((variant, eval.bleu));
    }
    let rows: Vec<_> = reports.iter().map(|(v, r)| (*v, r)).collect();
    print!("{}", results_table(&rows));
    Ok(())
}
