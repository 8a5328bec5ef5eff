//! Separates a two-instrument mixture with a trained checkpoint.
//!
//! Renders one clip from each of two classes, sums them, queries the
//! model for both sources, and scores the estimates against the true
//! stems. Estimates land next to the inputs as WAV files. Run with
//! `cargo run --release -p querysep --example separate_mixture -- \
//!     [checkpoint] [out_dir]` (checkpoint defaults to runs/main/best.ckpt).

use std::path::PathBuf;

use querysep::bss::bss_eval;
use querysep::dsp::{StftPlan, SAMPLE_RATE};
use querysep::eval::{separate, QuerySource};
use querysep::io::{checkpoint, write_wav};
use querysep::synth::{activity_track, motion_features, object_feature, render_clip};

fn main() -> querysep::Result<()> {
    let mut args = std::env::args().skip(1);
    let ckpt: PathBuf = args.next().unwrap_or_else(|| "runs/main/best.ckpt".into()).into();
    let out: PathBuf = args.next().unwrap_or_else(|| "/tmp/querysep_separate".into()).into();
    std::fs::create_dir_all(&out).map_err(|e| querysep::Error::io(&out, e))?;

    let (model, _, _) = checkpoint::load(&ckpt)?;
    let plan = StftPlan::new();

    let classes = [1usize, 4];
    let stems: Vec<Vec<f32>> = classes.iter().map(|&c| render_clip(c, 42 + c as u64)).collect();
    let mix: Vec<f32> = (0..stems[0].len()).map(|i| stems[0][i] + stems[1][i]).collect();

    let sources: Vec<QuerySource> = classes
        .iter()
        .zip(&stems)
        .map(|(&c, stem)| QuerySource {
            query: c,
            object: object_feature(c, 0),
            motion: motion_features(&activity_track(&plan, stem)),
        })
        .collect();

    let (estimates, _masks) = separate(&model, &plan, &mix, &sources);

    let refs: Vec<Vec<f64>> = stems
        .iter()
        .map(|s| s.iter().map(|&x| x as f64).collect())
        .collect();
    let ref_slices: Vec<&[f64]> = refs.iter().map(|r| r.as_slice()).collect();

    write_wav(&out.join("mixture.wav"), &mix, SAMPLE_RATE)?;
    for (i, (&c, est)) in classes.iter().zip(&estimates).enumerate() {
        let est64: Vec<f64> = est.iter().map(|&x| x as f64).collect();
        let scores = bss_eval(&est64, &ref_slices, i, 32);
        println!(
            "class {c}: SDR {:>6.2} dB  SIR {:>6.2} dB  SAR {:>6.2} dB",
            scores.sdr, scores.sir, scores.sar
        );
        write_wav(&out.join(format!("estimate_{c}.wav")), est, SAMPLE_RATE)?;
        write_wav(&out.join(format!("reference_{c}.wav")), &stems[i], SAMPLE_RATE)?;
    }
    println!("wrote mixture, estimates, and references to {}", out.display());
    Ok(())
}
