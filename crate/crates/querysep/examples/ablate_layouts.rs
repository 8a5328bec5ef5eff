//! Compares decoder layouts and query naming at a small shared budget.
//!
//! Trains the default architecture, a variant with scrambled query
//! naming, and a decoder that sees only its own audio tokens, all under
//! one seed, then prints the test-split medians side by side. Ordering
//! violations are flagged, not hidden. Run with
//! `cargo run --release -p querysep --example ablate_layouts -- [out_dir]`.

use std::path::PathBuf;

use querysep::model::ModelConfig;
use querysep::synth::{generate_corpus, Corpus, CorpusConfig};
use querysep::train::{ablate, AblateSpec, TrainConfig};

fn main() -> querysep::Result<()> {
    let out: PathBuf = std::env::args()
        .nth(1)
        .unwrap_or_else(|| "/tmp/querysep_ablate".into())
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
        epochs: 2,
        batch: 2,
        drop_transformer: vec![1],
        drop_other: vec![1],
        ..TrainConfig::desk()
    };

    let variants: Vec<AblateSpec> = ["visual", "random", "self_audio"]
        .iter()
        .map(|n| AblateSpec::preset(n).unwrap())
        .collect();

    let table = ablate(&corpus, &model_cfg, &train_cfg, &variants, &out)?;
    let text = std::fs::read_to_string(&table).map_err(|e| querysep::Error::io(&table, e))?;
    print!("{text}");
    println!("\ntable written to {}", table.display());
    Ok(())
}
