//! Shows the analysis/synthesis identities the separation pipeline rests on.
//!
//! Renders a synthetic clip, then checks three facts: iSTFT inverts STFT,
//! an all-ones mask reproduces the mixture, and the log-frequency warp
//! round-trips with small loss. Run with
//! `cargo run --release -p querysep --example stft_roundtrip`.

use querysep::dsp::{warp_log_freq, unwarp_log_freq, StftPlan, CLIP_LEN, FRAMES};
use querysep::synth::render_clip;

fn rel_l2(a: &[f32], b: &[f32]) -> f64 {
    let num: f64 = a
        .iter()
        .zip(b)
        .map(|(&x, &y)| ((x - y) as f64).powi(2))
        .sum();
    let den: f64 = a.iter().map(|&x| (x as f64).powi(2)).sum();
    (num / den.max(1e-300)).sqrt()
}

fn main() {
    let plan = StftPlan::new();
    let clip = render_clip(3, 17);
    assert_eq!(clip.len(), CLIP_LEN);

    let spec = plan.stft(&clip);
    let back = plan.istft(&spec, clip.len());
    println!("istft(stft(x)) rel L2 error  {:.3e}", rel_l2(&clip, &back));

    let ones = vec![1.0f32; spec.data.len()];
    let masked = plan.istft(&spec.apply_mask(&ones), clip.len());
    println!("all-ones mask rel L2 error   {:.3e}", rel_l2(&clip, &masked));

    let mag = spec.magnitude();
    let warped = warp_log_freq(&mag, FRAMES);
    let unwarped = unwarp_log_freq(&warped, FRAMES);
    println!("warp round trip rel L2 error {:.3e}", rel_l2(&mag, &unwarped));
}
