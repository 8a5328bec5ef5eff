//! Projects per-sample query embeddings to 2D, grouped by class.
//!
//! Runs a trained checkpoint over test mixtures, collects the decoded
//! query embedding for every assigned source, reduces them to two
//! principal components, and prints coordinates per class. Clustering by
//! class indicates the queries carry class identity. Run with
//! `cargo run --release -p querysep --example inspect_queries -- \
//!     [checkpoint]` (defaults to runs/main/best.ckpt).

use std::collections::BTreeMap;
use std::path::PathBuf;

use querysep::eval::{inspect_split, pca_2d};
use querysep::io::checkpoint;
use querysep::synth::{Corpus, Split};

fn main() -> querysep::Result<()> {
    let mut args = std::env::args().skip(1);
    let ckpt: PathBuf = args.next().unwrap_or_else(|| "runs/main/best.ckpt".into()).into();
    let corpus_dir: PathBuf = args.next().unwrap_or_else(|| "runs/corpus/main".into()).into();

    let (model, _, _) = checkpoint::load(&ckpt)?;
    let corpus = Corpus::load(&corpus_dir)?;

    let samples = inspect_split(&model, &corpus, Split::Test, 2, 7, 20)?;
    let rows: Vec<Vec<f32>> = samples.iter().map(|s| s.eps_q.clone()).collect();
    let coords = pca_2d(&rows);

    let mut by_class: BTreeMap<&str, Vec<(f64, f64)>> = BTreeMap::new();
    for (s, &(x, y)) in samples.iter().zip(&coords) {
        by_class.entry(s.class_name.as_str()).or_default().push((x, y));
    }

    for (class, pts) in &by_class {
        let cx = pts.iter().map(|p| p.0).sum::<f64>() / pts.len() as f64;
        let cy = pts.iter().map(|p| p.1).sum::<f64>() / pts.len() as f64;
        println!("{class:<10} {} samples, centroid ({cx:>7.3}, {cy:>7.3})", pts.len());
        for &(x, y) in pts {
            println!("           ({x:>7.3}, {y:>7.3})");
        }
    }
    Ok(())
}
