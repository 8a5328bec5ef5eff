//! Adds a new sound class to a frozen model through one prompt vector.
//!
//! Pre-trains a reduced model on two classes, then introduces a third:
//! every existing weight is frozen, a single query row is appended and
//! tuned on mixtures containing the new class, and the held-out scores
//! before and after tell whether the prompt learned anything. Run with
//! `cargo run --release -p querysep --example prompt_finetune -- [out_dir]`.

use std::path::PathBuf;

use querysep::io::checkpoint;
use querysep::model::ModelConfig;
use querysep::synth::{generate_corpus, Corpus, CorpusConfig};
use querysep::train::{finetune_prompt, train, TrainConfig};

fn main() -> querysep::Result<()> {
    let out: PathBuf = std::env::args()
        .nth(1)
        .unwrap_or_else(|| "/tmp/querysep_prompt".into())
        .into();

    let corpus_cfg = CorpusConfig { classes: 3, clips_per_class: 10, ..CorpusConfig::default() };
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

    let outcome = train(&corpus, model_cfg, &train_cfg, &out.join("pretrain"))?;
    println!("pretrained on classes 0..2, best val SDR {:.3} dB", outcome.best_val_sdr);

    let (model, _, _) = checkpoint::load(&outcome.best_path)?;
    let before_params = model.params.trainable_scalars();
    let ft = finetune_prompt(model, &corpus, 2, 40, &train_cfg, &out.join("prompt"))?;

    println!("pretrain trainable scalars {before_params}");
    println!(
        "prompt tuning: {} steps, held-out class 2 median SDR {:.3} -> {:.3} dB",
        ft.steps, ft.before, ft.after
    );
    println!("prompt checkpoint {}", ft.ckpt_path.display());
    println!("report            {}", ft.report_path.display());
    Ok(())
}
