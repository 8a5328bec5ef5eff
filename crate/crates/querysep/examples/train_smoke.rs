//! Trains a reduced model on a reduced corpus in under a minute.
//!
//! Generates two instrument classes, shrinks the network, runs three
//! epochs of mix-and-separate training, and prints the loss and
//! validation trajectory plus where the checkpoints landed. Run with
//! `cargo run --release -p querysep --example train_smoke -- [out_dir]`.

use std::path::PathBuf;

use querysep::model::ModelConfig;
use querysep::synth::{generate_corpus, Corpus, CorpusConfig};
use querysep::train::{train, TrainConfig};

fn main() -> querysep::Result<()> {
    let out: PathBuf = std::env::args()
        .nth(1)
        .unwrap_or_else(|| "/tmp/querysep_train_smoke".into())
        .into();

    let corpus_cfg = CorpusConfig { classes: 2, clips_per_class: 10, ..CorpusConfig::default() };
    generate_corpus(&corpus_cfg, &out.join("corpus"))?;
    let corpus = Corpus::load(&out.join("corpus"))?;

    let model_cfg = ModelConfig {
        queries: 2,
        mask_channels: 8,
        base: 4,
        ..ModelConfig::default()
    };
    let train_cfg = TrainConfig {
        epochs: 3,
        batch: 2,
        drop_transformer: vec![2],
        drop_other: vec![1, 2],
        ..TrainConfig::desk()
    };

    let outcome = train(&corpus, model_cfg, &train_cfg, &out.join("run"))?;
    println!(
        "trained {} epochs ({} steps); best val SDR {:.3} dB at epoch {}",
        outcome.epochs, outcome.steps, outcome.best_val_sdr, outcome.best_epoch
    );
    println!("best checkpoint  {}", outcome.best_path.display());
    println!("final checkpoint {}", outcome.final_path.display());
    println!("metrics          {}", outcome.metrics_path.display());

    let log = std::fs::read_to_string(&outcome.metrics_path)
        .map_err(|e| querysep::Error::io(&outcome.metrics_path, e))?;
    print!("{log}");
    Ok(())
}
