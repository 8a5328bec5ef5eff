//! Spectrogram front end: STFT analysis, weighted overlap-add synthesis,
//! log-frequency warping and ratio masks.
//!
//! One clip is 65535 samples at 11025 Hz. With a 1022-tap periodic Hann
//! window, hop 256 and centered reflect padding this yields exactly
//! 1 + 65535/256 = 256 frames of 512 frequency bins, and every sample sits
//! under a nonzero window-power sum, so istft(stft(x)) reproduces x to
//! floating-point precision.

use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

pub const SAMPLE_RATE: u32 = 11025;
pub const WIN_LEN: usize = 1022;
pub const HOP: usize = 256;
pub const FREQ_BINS: usize = WIN_LEN / 2 + 1;
pub const FRAMES: usize = 256;
pub const CLIP_LEN: usize = 65535;
pub const LOG_BINS: usize = 256;
/// Guard in the ratio-mask denominator.
pub const MASK_EPS: f32 = 1e-8;

const PAD: usize = WIN_LEN / 2;

/// Complex spectrogram, `FREQ_BINS` rows of `FRAMES` columns.
#[derive(Debug, Clone)]
pub struct Stft {
    pub data: Vec<Complex<f32>>,
}

impl Stft {
    pub fn zeros() -> Self {
        Stft { data: vec![Complex::new(0.0, 0.0); FREQ_BINS * FRAMES] }
    }

    /// Per-bin magnitudes, `[FREQ_BINS * FRAMES]`.
    pub fn magnitude(&self) -> Vec<f32> {
        self.data.iter().map(|c| c.norm()).collect()
    }

    /// Multiplies each bin by a real mask value (magnitude masking that
    /// keeps this spectrogram's phase).
    pub fn apply_mask(&self, mask: &[f32]) -> Stft {
        assert_eq!(mask.len(), self.data.len());
        Stft { data: self.data.iter().zip(mask).map(|(c, &m)| c * m).collect() }
    }

    /// Sums spectrograms bin-wise; the Fourier image of mixing waveforms.
    pub fn add(&self, other: &Stft) -> Stft {
        Stft { data: self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect() }
    }
}

/// Reusable FFT plans plus the analysis window.
pub struct StftPlan {
    fwd: Arc<dyn Fft<f32>>,
    inv: Arc<dyn Fft<f32>>,
    window: Vec<f32>,
}

impl Default for StftPlan {
    fn default() -> Self {
        Self::new()
    }
}

impl StftPlan {
    pub fn new() -> Self {
        let mut planner = FftPlanner::new();
        let window = (0..WIN_LEN)
            .map(|n| {
                0.5 * (1.0 - (std::f64::consts::TAU * n as f64 / WIN_LEN as f64).cos())
            })
            .map(|w| w as f32)
            .collect();
        StftPlan {
            fwd: planner.plan_fft_forward(WIN_LEN),
            inv: planner.plan_fft_inverse(WIN_LEN),
            window,
        }
    }

    /// Centered STFT with reflect padding, fixed to `FREQ_BINS x FRAMES`.
    /// Inputs longer than a clip are cropped to the first 256 frames,
    /// shorter ones get zero frames at the end.
    pub fn stft(&self, x: &[f32]) -> Stft {
        assert!(x.len() > PAD, "input too short for reflect padding");
        let padded = reflect_pad(x, PAD);
        let valid_frames = FRAMES.min(1 + (x.len() - 1) / HOP);
        let mut out = Stft::zeros();
        let mut buf = vec![Complex::new(0.0f32, 0.0); WIN_LEN];
        for t in 0..valid_frames {
            let start = t * HOP;
            for n in 0..WIN_LEN {
                buf[n] = Complex::new(padded[start + n] * self.window[n], 0.0);
            }
            self.fwd.process(&mut buf);
            for k in 0..FREQ_BINS {
                out.data[k * FRAMES + t] = buf[k];
            }
        }
        out
    }

    /// Weighted overlap-add inverse, returning `out_len` samples. Wherever
    /// the summed squared window is nonzero the inverse is exact for an
    /// unmodified spectrogram.
    pub fn istft(&self, s: &Stft, out_len: usize) -> Vec<f32> {
        let padded_len = out_len + 2 * PAD;
        let mut acc = vec![0.0f32; padded_len];
        let mut norm = vec![0.0f32; padded_len];
        let mut buf = vec![Complex::new(0.0f32, 0.0); WIN_LEN];
        let inv_n = 1.0 / WIN_LEN as f32;
        for t in 0..FRAMES {
            let start = t * HOP;
            if start + WIN_LEN > padded_len {
                break;
            }
            for k in 0..FREQ_BINS {
                buf[k] = s.data[k * FRAMES + t];
            }
            for k in FREQ_BINS..WIN_LEN {
                buf[k] = buf[WIN_LEN - k].conj();
            }
            self.inv.process(&mut buf);
            for n in 0..WIN_LEN {
                let w = self.window[n];
                acc[start + n] += buf[n].re * inv_n * w;
                norm[start + n] += w * w;
            }
        }
        (0..out_len)
            .map(|i| {
                let n = norm[PAD + i];
                if n > 1e-8 {
                    acc[PAD + i] / n
                } else {
                    0.0
                }
            })
            .collect()
    }
}

fn reflect_pad(x: &[f32], pad: usize) -> Vec<f32> {
    let l = x.len();
    assert!(l > pad);
    let mut out = Vec::with_capacity(l + 2 * pad);
    for i in (1..=pad).rev() {
        out.push(x[i]);
    }
    out.extend_from_slice(x);
    for i in (0..pad).map(|j| l - 2 - j) {
        out.push(x[i]);
    }
    out
}

// ── Log-frequency warping ───────────────────────────────────────────────────

/// Geometric bin centers: log bin j reads linear bin 511^(j/255).
fn log_centers() -> Vec<f64> {
    (0..LOG_BINS)
        .map(|j| ((FREQ_BINS - 1) as f64).powf(j as f64 / (LOG_BINS - 1) as f64))
        .collect()
}

/// Resamples `[FREQ_BINS x frames]` onto the log-frequency grid
/// `[LOG_BINS x frames]` by linear interpolation between neighboring bins.
pub fn warp_log_freq(mag: &[f32], frames: usize) -> Vec<f32> {
    assert_eq!(mag.len(), FREQ_BINS * frames);
    let centers = log_centers();
    let mut out = vec![0.0f32; LOG_BINS * frames];
    for (j, &c) in centers.iter().enumerate() {
        let i0 = (c.floor() as usize).min(FREQ_BINS - 2);
        let f = (c - i0 as f64) as f32;
        for t in 0..frames {
            out[j * frames + t] =
                (1.0 - f) * mag[i0 * frames + t] + f * mag[(i0 + 1) * frames + t];
        }
    }
    out
}

/// Maps a log-frequency image back onto the linear grid (the approximate
/// inverse of [`warp_log_freq`]; bin 0 copies the lowest log band).
pub fn unwarp_log_freq(logmag: &[f32], frames: usize) -> Vec<f32> {
    assert_eq!(logmag.len(), LOG_BINS * frames);
    let scale = (LOG_BINS - 1) as f64 / ((FREQ_BINS - 1) as f64).ln();
    let mut out = vec![0.0f32; FREQ_BINS * frames];
    for i in 0..FREQ_BINS {
        let p = if i == 0 { 0.0 } else { (i as f64).ln() * scale };
        let j0 = (p.floor() as usize).min(LOG_BINS - 2);
        let f = (p - j0 as f64) as f32;
        for t in 0..frames {
            out[i * frames + t] =
                (1.0 - f) * logmag[j0 * frames + t] + f * logmag[(j0 + 1) * frames + t];
        }
    }
    out
}

// ── Masks ───────────────────────────────────────────────────────────────────

/// Ratio mask source/mixture, clamped to [0, 1].
pub fn ratio_mask(src_mag: &[f32], mix_mag: &[f32]) -> Vec<f32> {
    assert_eq!(src_mag.len(), mix_mag.len());
    src_mag
        .iter()
        .zip(mix_mag)
        .map(|(&s, &m)| (s / (m + MASK_EPS)).clamp(0.0, 1.0))
        .collect()
}

/// Compressed model input: log1p of the warped magnitude.
pub fn input_features(mix_mag: &[f32], frames: usize) -> Vec<f32> {
    warp_log_freq(mix_mag, frames).iter().map(|&v| v.ln_1p()).collect()
}

/// Applies a log-domain mask to a linear-domain mixture and resynthesizes:
/// unwarp, clamp to [0, 1], multiply onto the complex mixture (keeping its
/// phase), inverse transform.
pub fn reconstruct(plan: &StftPlan, mix: &Stft, log_mask: &[f32], out_len: usize) -> Vec<f32> {
    let mut lin = unwarp_log_freq(log_mask, FRAMES);
    for v in &mut lin {
        *v = v.clamp(0.0, 1.0);
    }
    plan.istft(&mix.apply_mask(&lin), out_len)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{rng_for, uniform};

    fn rel_l2(a: &[f32], b: &[f32]) -> f64 {
        let num: f64 = a.iter().zip(b).map(|(&x, &y)| ((x - y) as f64).powi(2)).sum();
        let den: f64 = b.iter().map(|&y| (y as f64).powi(2)).sum();
        (num / den.max(1e-30)).sqrt()
    }

    fn random_clip(seed: u64) -> Vec<f32> {
        let mut rng = rng_for(seed, "dsp/clip");
        (0..CLIP_LEN).map(|_| uniform(&mut rng, -0.5, 0.5) as f32).collect()
    }

    #[test]
    fn stft_shape_is_fixed() {
        let plan = StftPlan::new();
        let s = plan.stft(&random_clip(1));
        assert_eq!(s.data.len(), FREQ_BINS * FRAMES);
        // A shorter input still yields the fixed frame grid.
        let s2 = plan.stft(&vec![0.1f32; 30_000]);
        assert_eq!(s2.data.len(), FREQ_BINS * FRAMES);
        let tail = s2.data[(FREQ_BINS - 1) * FRAMES + FRAMES - 1];
        assert_eq!(tail.norm(), 0.0);
    }

    #[test]
    fn istft_inverts_stft_on_full_clips() {
        let plan = StftPlan::new();
        for seed in 0..3 {
            let x = random_clip(seed);
            let y = plan.istft(&plan.stft(&x), CLIP_LEN);
            let err = rel_l2(&y, &x);
            assert!(err < 1e-6, "seed {seed}: rel l2 {err:.3e}");
        }
    }

    #[test]
    fn stft_is_linear() {
        let plan = StftPlan::new();
        let x = random_clip(10);
        let y = random_clip(11);
        let mixed: Vec<f32> = x.iter().zip(&y).map(|(&a, &b)| 2.0 * a - 0.5 * b).collect();
        let sx = plan.stft(&x);
        let sy = plan.stft(&y);
        let sm = plan.stft(&mixed);
        let mut max_err = 0.0f32;
        for i in 0..sm.data.len() {
            let want = 2.0 * sx.data[i] - 0.5 * sy.data[i];
            max_err = max_err.max((sm.data[i] - want).norm());
        }
        let peak = sm.data.iter().map(|c| c.norm()).fold(0.0f32, f32::max);
        assert!(max_err < 1e-3 * peak, "max_err {max_err} peak {peak}");
    }

    #[test]
    fn pure_tone_lands_in_its_bin() {
        let plan = StftPlan::new();
        let k = 40;
        let freq = k as f32 * SAMPLE_RATE as f32 / WIN_LEN as f32;
        let x: Vec<f32> = (0..CLIP_LEN)
            .map(|n| (std::f32::consts::TAU * freq * n as f32 / SAMPLE_RATE as f32).sin())
            .collect();
        let mag = plan.stft(&x).magnitude();
        let t = FRAMES / 2;
        let col: Vec<f32> = (0..FREQ_BINS).map(|b| mag[b * FRAMES + t]).collect();
        let best = col.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).unwrap().0;
        assert_eq!(best, k);
    }

    #[test]
    fn unit_mask_is_identity() {
        let plan = StftPlan::new();
        let x = random_clip(20);
        let s = plan.stft(&x);
        let ones = vec![1.0f32; LOG_BINS * FRAMES];
        let y = reconstruct(&plan, &s, &ones, CLIP_LEN);
        assert!(rel_l2(&y, &x) < 1e-6);
    }

    #[test]
    fn ratio_masks_live_in_unit_interval_and_sum_near_one() {
        let plan = StftPlan::new();
        let a = random_clip(30);
        let b = random_clip(31);
        let mix: Vec<f32> = a.iter().zip(&b).map(|(&x, &y)| x + y).collect();
        let ma = plan.stft(&a).magnitude();
        let mb = plan.stft(&b).magnitude();
        let mm = plan.stft(&mix).magnitude();
        let ra = ratio_mask(&ma, &mm);
        let rb = ratio_mask(&mb, &mm);
        assert!(ra.iter().all(|&v| (0.0..=1.0).contains(&v)));
        // Magnitudes are not additive under phase, but most bins of a
        // two-source mix should come close.
        let close = ra
            .iter()
            .zip(&rb)
            .zip(&mm)
            .filter(|((&x, &y), &m)| m > 1e-3 && (x + y - 1.0).abs() < 0.5)
            .count();
        let total = mm.iter().filter(|&&m| m > 1e-3).count();
        assert!(close as f64 > 0.5 * total as f64, "close {close} of {total}");
    }

    #[test]
    fn single_source_mask_is_one_where_energetic() {
        let plan = StftPlan::new();
        let a = random_clip(32);
        let m = plan.stft(&a).magnitude();
        let mask = ratio_mask(&m, &m);
        for (&v, &mag) in mask.iter().zip(&m) {
            assert!((0.0..=1.0).contains(&v));
            if mag > 1e-4 {
                assert!(v > 0.999, "mask {v} at magnitude {mag}");
            }
        }
    }

    #[test]
    fn identical_sources_split_the_mask_in_half() {
        let plan = StftPlan::new();
        let a = random_clip(33);
        let mix: Vec<f32> = a.iter().map(|&x| x + x).collect();
        let ma = plan.stft(&a).magnitude();
        let mm = plan.stft(&mix).magnitude();
        let mask = ratio_mask(&ma, &mm);
        for (&v, &mag) in mask.iter().zip(&mm) {
            if mag > 1e-4 {
                assert!((v - 0.5).abs() < 1e-3, "mask {v} at magnitude {mag}");
            }
        }
    }

    #[test]
    fn disjoint_band_sines_give_indicator_masks() {
        let plan = StftPlan::new();
        let (bin_a, bin_b) = (40usize, 280usize);
        let tone = |bin: usize| -> Vec<f32> {
            let f = bin as f32 * SAMPLE_RATE as f32 / WIN_LEN as f32;
            (0..CLIP_LEN)
                .map(|i| (2.0 * std::f32::consts::PI * f * i as f32 / SAMPLE_RATE as f32).sin())
                .collect()
        };
        let a = tone(bin_a);
        let b = tone(bin_b);
        let mix: Vec<f32> = a.iter().zip(&b).map(|(&x, &y)| x + y).collect();
        let ma = plan.stft(&a).magnitude();
        let mm = plan.stft(&mix).magnitude();
        let mask = ratio_mask(&ma, &mm);

        // A bin-exact Hann-windowed tone occupies its bin plus one neighbor
        // on each side; outside both main lobes the spectrum is only
        // leakage-over-leakage noise, so the indicator comparison is
        // meaningful on the two bands themselves.
        let band = |center: usize| (center - 1)..=(center + 1);
        let mut err_sum = 0.0f64;
        let mut count = 0usize;
        for (bin, want) in band(bin_a)
            .map(|i| (i, 1.0f64))
            .chain(band(bin_b).map(|i| (i, 0.0f64)))
        {
            for t in 0..FRAMES {
                err_sum += (mask[bin * FRAMES + t] as f64 - want).abs();
                count += 1;
            }
        }
        let mean_err = err_sum / count as f64;
        assert!(mean_err < 0.05, "mean deviation from band indicator {mean_err:.4}");
    }

    #[test]
    fn log_warp_round_trips_smooth_spectra() {
        // Smooth magnitude surface: broad bumps over frequency.
        let mut mag = vec![0.0f32; FREQ_BINS * FRAMES];
        for b in 0..FREQ_BINS {
            let f = b as f32 / FREQ_BINS as f32;
            let v = 1.0 + (6.0 * f).sin() * 0.4 + (-((f - 0.3) * 8.0).powi(2)).exp();
            for t in 0..FRAMES {
                mag[b * FRAMES + t] = v * (1.0 + 0.1 * (t as f32 / FRAMES as f32));
            }
        }
        let warped = warp_log_freq(&mag, FRAMES);
        let back = unwarp_log_freq(&warped, FRAMES);
        let err = rel_l2(&back, &mag);
        assert!(err < 0.05, "round-trip rel l2 {err:.4}");
    }

    #[test]
    fn warp_grid_is_geometric() {
        let centers = log_centers();
        assert!((centers[0] - 1.0).abs() < 1e-12);
        assert!((centers[LOG_BINS - 1] - (FREQ_BINS - 1) as f64).abs() < 1e-9);
        let r0 = centers[1] / centers[0];
        let r1 = centers[LOG_BINS - 1] / centers[LOG_BINS - 2];
        assert!((r0 - r1).abs() < 1e-9, "ratios {r0} vs {r1}");
    }
}
