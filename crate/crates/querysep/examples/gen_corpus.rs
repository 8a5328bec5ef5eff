//! Generates a small synthetic instrument corpus and summarizes it.
//!
//! Writes WAV clips plus a manifest under a target directory (first CLI
//! argument, default `/tmp/querysep_corpus`), then reloads the manifest
//! and prints the per-class split counts. Run with
//! `cargo run --release -p querysep --example gen_corpus -- [out_dir]`.

use std::collections::BTreeMap;
use std::path::PathBuf;

use querysep::synth::{generate_corpus, instrument_bank, Corpus, CorpusConfig, Split};

fn main() -> querysep::Result<()> {
    let out: PathBuf = std::env::args()
        .nth(1)
        .unwrap_or_else(|| "/tmp/querysep_corpus".into())
        .into();

    let cfg = CorpusConfig { classes: 4, clips_per_class: 10, ..CorpusConfig::default() };
    generate_corpus(&cfg, &out)?;

    let corpus = Corpus::load(&out)?;
    println!("corpus at {} ({} clips)", out.display(), corpus.entries.len());
    println!("{:<10} {:>5} {:>5} {:>5}", "class", "train", "val", "test");

    let mut counts: BTreeMap<String, [usize; 3]> = BTreeMap::new();
    for e in &corpus.entries {
        let slot = match e.split {
            Split::Train => 0,
            Split::Val => 1,
            Split::Test => 2,
        };
        counts.entry(e.class_name.clone()).or_default()[slot] += 1;
    }
    for (name, [tr, va, te]) in counts {
        println!("{name:<10} {tr:>5} {va:>5} {te:>5}");
    }

    let bank = instrument_bank();
    println!("\n{} instrument programs available:", bank.len());
    for inst in &bank {
        println!("  {}", inst.name);
    }
    Ok(())
}
