//! End-to-end separation and scoring over corpus splits.
//!
//! Ties the pieces together: pair clips into mixtures, run the model, invert
//! the predicted masks, and score the estimates against the true stems. Two
//! reference points accompany the model scores in every report: the raw
//! mixture used as the estimate (the floor any separator must beat) and the
//! ideal ratio mask computed on the same warped grid the model predicts on
//! (the ceiling the mask parameterization allows).

use std::collections::BTreeMap;
use std::path::Path;

use rand_chacha::ChaCha8Rng;

use crate::autodiff::Tape;
use crate::bss::{BssScores, ProjectionContext, FILTER_LEN};
use crate::dsp::{input_features, ratio_mask, reconstruct, warp_log_freq, StftPlan, FRAMES};
use crate::error::Result;
use crate::io;
use crate::model::{Assignment, Model};
use crate::rng::{rng_for, shuffle};
use crate::synth::{activity_track, motion_features, object_feature, Corpus, Split};

/// One conditioning stream for the separator: which query row stands for the
/// source, and the features that bind that row to it.
pub struct QuerySource {
    pub query: usize,
    pub object: Vec<f32>,
    pub motion: Vec<f32>,
}

/// Runs the model on one mixture and inverts each requested mask back to a
/// waveform. Returns the per-source estimates and the warped-domain masks
/// (one row per entry of `sources`, in order).
pub fn separate(
    model: &Model<f32>,
    plan: &StftPlan,
    mix: &[f32],
    sources: &[QuerySource],
) -> (Vec<Vec<f32>>, Vec<Vec<f32>>) {
    let spec = plan.stft(mix);
    let feats = input_features(&spec.magnitude(), FRAMES);
    let motion: Vec<f32> = sources.iter().flat_map(|s| s.motion.iter().copied()).collect();
    let naming: Vec<(usize, Vec<f32>)> =
        sources.iter().map(|s| (s.query, s.object.clone())).collect();

    let mut tape: Tape<f32> = Tape::new();
    let staged = model.stage(&mut tape);
    let out = model.forward(&mut tape, &staged, &feats, &motion, &naming);
    let masks = tape.val(out.masks);
    let pixels = masks.cols();

    let mut waves = Vec::with_capacity(sources.len());
    let mut rows = Vec::with_capacity(sources.len());
    for s in sources {
        let row = masks.data[s.query * pixels..(s.query + 1) * pixels].to_vec();
        waves.push(reconstruct(plan, &spec, &row, mix.len()));
        rows.push(row);
    }
    (waves, rows)
}

/// Maps the classes present in a mixture onto query rows. Visual naming is
/// the identity (query index = class id); random naming draws a fresh
/// injective assignment from the given stream.
pub fn assign_queries(
    assignment: Assignment,
    class_ids: &[usize],
    query_rows: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<usize> {
    match assignment {
        Assignment::Visual => class_ids.to_vec(),
        Assignment::Random => {
            let mut slots: Vec<usize> = (0..query_rows).collect();
            shuffle(&mut slots, rng);
            slots.truncate(class_ids.len());
            slots
        }
    }
}

/// Groups clip indices into mixtures of `k` distinct classes. A seeded
/// shuffle is walked in chunks; a chunk that would repeat a class swaps the
/// offending slot with a later compatible index, falling back to an earlier
/// one, and is dropped only when no repair exists.
pub fn pair_mixtures(classes: &[usize], k: usize, seed: u64, tag: &str) -> Vec<Vec<usize>> {
    assert!(k >= 1);
    let mut order: Vec<usize> = (0..classes.len()).collect();
    let mut rng = rng_for(seed, tag);
    shuffle(&mut order, &mut rng);

    let distinct = |order: &[usize], start: usize, len: usize| -> bool {
        let chunk = &order[start..start + len];
        chunk
            .iter()
            .enumerate()
            .all(|(i, &x)| chunk[..i].iter().all(|&y| classes[y] != classes[x]))
    };

    let mut out = Vec::new();
    let mut start = 0;
    while start + k <= order.len() {
        for slot in start + 1..start + k {
            if distinct(&order, start, slot - start + 1) {
                continue;
            }
            let clash = |order: &[usize], cand: usize| {
                order[start..slot].iter().any(|&y| classes[y] == classes[cand])
            };
            if let Some(j) = (slot + 1..order.len()).find(|&j| !clash(&order, order[j])) {
                order.swap(slot, j);
                continue;
            }
            // Tail exhausted; trade with a completed chunk that stays valid.
            let mut fixed = false;
            for p in 0..start {
                if clash(&order, order[p]) {
                    continue;
                }
                order.swap(slot, p);
                if distinct(&order, (p / k) * k, k) {
                    fixed = true;
                    break;
                }
                order.swap(slot, p);
            }
            let _ = fixed;
        }
        if distinct(&order, start, k) {
            out.push(order[start..start + k].to_vec());
        }
        start += k;
    }
    out
}

/// One scored estimate.
#[derive(Debug, Clone)]
pub struct EvalRow {
    pub clip_id: String,
    pub class_name: String,
    pub scores: BssScores,
    pub variant: &'static str,
}

/// All scores from one evaluation pass.
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
    pub mixtures: usize,
}

fn median(xs: &mut [f64]) -> f64 {
    xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

fn summarize(rows: &[&EvalRow], f: impl Fn(&mut [f64]) -> f64) -> Option<BssScores> {
    if rows.is_empty() {
        return None;
    }
    let mut sdr: Vec<f64> = rows.iter().map(|r| r.scores.sdr).collect();
    let mut sir: Vec<f64> = rows.iter().map(|r| r.scores.sir).collect();
    let mut sar: Vec<f64> = rows.iter().map(|r| r.scores.sar).collect();
    Some(BssScores { sdr: f(&mut sdr), sir: f(&mut sir), sar: f(&mut sar) })
}

impl EvalReport {
    fn select(&self, variant: &str) -> Vec<&EvalRow> {
        self.rows.iter().filter(|r| r.variant == variant).collect()
    }

    pub fn median(&self, variant: &str) -> Option<BssScores> {
        summarize(&self.select(variant), median)
    }

    pub fn mean(&self, variant: &str) -> Option<BssScores> {
        summarize(&self.select(variant), |xs| xs.iter().sum::<f64>() / xs.len() as f64)
    }

    fn class_summary(
        &self,
        variant: &str,
        f: impl Fn(&mut [f64]) -> f64 + Copy,
    ) -> BTreeMap<String, BssScores> {
        let mut by_class: BTreeMap<String, Vec<&EvalRow>> = BTreeMap::new();
        for r in self.select(variant) {
            by_class.entry(r.class_name.clone()).or_default().push(r);
        }
        by_class
            .into_iter()
            .map(|(c, rows)| (c, summarize(&rows, f).unwrap()))
            .collect()
    }

    pub fn class_medians(&self, variant: &str) -> BTreeMap<String, BssScores> {
        self.class_summary(variant, median)
    }

    pub fn class_means(&self, variant: &str) -> BTreeMap<String, BssScores> {
        self.class_summary(variant, |xs| xs.iter().sum::<f64>() / xs.len() as f64)
    }

    pub fn variants(&self) -> Vec<&'static str> {
        let mut vs = Vec::new();
        for r in &self.rows {
            if !vs.contains(&r.variant) {
                vs.push(r.variant);
            }
        }
        vs
    }
}

/// Scores a split. Mixtures are paired deterministically from `seed`; when
/// `baselines` is set, each source is additionally scored with the mixture
/// itself as the estimate and with the ideal warped-grid ratio mask.
/// `limit` caps the number of mixtures (0 means all).
pub fn evaluate_split(
    model: &Model<f32>,
    corpus: &Corpus,
    split: Split,
    k: usize,
    seed: u64,
    baselines: bool,
    limit: usize,
) -> Result<EvalReport> {
    let plan = StftPlan::new();
    let clips: Vec<_> = corpus
        .clips(split)
        .into_iter()
        .filter(|c| c.class_id < model.cfg.query_rows())
        .cloned()
        .collect();
    let classes: Vec<usize> = clips.iter().map(|c| c.class_id).collect();
    let mut pairs = pair_mixtures(&classes, k, seed, &format!("eval/pairs/{}", split.as_str()));
    if limit > 0 {
        pairs.truncate(limit);
    }

    let mut rows = Vec::new();
    for (mi, pair) in pairs.iter().enumerate() {
        let entries: Vec<_> = pair.iter().map(|&i| &clips[i]).collect();
        let mut waves = Vec::with_capacity(k);
        for e in &entries {
            waves.push(corpus.load_wave(e)?);
        }
        let n = waves.iter().map(|w| w.len()).min().unwrap();
        let mut mix = vec![0f32; n];
        for w in &waves {
            for (m, &x) in mix.iter_mut().zip(w.iter()) {
                *m += x;
            }
        }

        let class_ids: Vec<usize> = entries.iter().map(|e| e.class_id).collect();
        let mut arng = rng_for(seed, &format!("eval/assign/{}/{mi}", split.as_str()));
        let queries = assign_queries(model.cfg.assignment, &class_ids, model.cfg.query_rows(), &mut arng);
        let sources: Vec<QuerySource> = entries
            .iter()
            .enumerate()
            .map(|(i, e)| QuerySource {
                query: queries[i],
                object: object_feature(e.class_id, e.seed),
                motion: motion_features(&activity_track(&plan, &waves[i])),
            })
            .collect();

        let (ests, _) = separate(model, &plan, &mix, &sources);

        let refs64: Vec<Vec<f64>> =
            waves.iter().map(|w| w[..n].iter().map(|&x| x as f64).collect()).collect();
        let ref_slices: Vec<&[f64]> = refs64.iter().map(|r| r.as_slice()).collect();
        let ctx = ProjectionContext::new(&ref_slices, FILTER_LEN);

        let mix_spec = plan.stft(&mix);
        let warped_mix = warp_log_freq(&mix_spec.magnitude(), FRAMES);

        for (i, e) in entries.iter().enumerate() {
            let est64: Vec<f64> = ests[i].iter().map(|&x| x as f64).collect();
            rows.push(EvalRow {
                clip_id: e.clip_id.clone(),
                class_name: e.class_name.clone(),
                scores: ctx.eval(&est64, i),
                variant: "model",
            });
            if !baselines {
                continue;
            }
            let mix64: Vec<f64> = mix.iter().map(|&x| x as f64).collect();
            rows.push(EvalRow {
                clip_id: e.clip_id.clone(),
                class_name: e.class_name.clone(),
                scores: ctx.eval(&mix64, i),
                variant: "mixture",
            });
            let src_spec = plan.stft(&waves[i]);
            let warped_src = warp_log_freq(&src_spec.magnitude(), FRAMES);
            let ideal = ratio_mask(&warped_src, &warped_mix);
            let oracle_wave = reconstruct(&plan, &mix_spec, &ideal, n);
            let oracle64: Vec<f64> = oracle_wave.iter().map(|&x| x as f64).collect();
            rows.push(EvalRow {
                clip_id: e.clip_id.clone(),
                class_name: e.class_name.clone(),
                scores: ctx.eval(&oracle64, i),
                variant: "oracle",
            });
        }
    }
    Ok(EvalReport { rows, mixtures: pairs.len() })
}

const REPORT_HEADER: [&str; 6] = ["clip_id", "class", "sdr", "sir", "sar", "variant"];

/// Writes per-clip rows followed by summary rows. Summaries reuse the same
/// columns with `clip_id` set to `median` or `mean` and `class` set to `all`
/// or a class name, so the file stays a single uniform TSV.
pub fn write_report(path: &Path, report: &EvalReport) -> Result<()> {
    let mut rows: Vec<Vec<String>> = Vec::new();
    for r in &report.rows {
        rows.push(vec![
            r.clip_id.clone(),
            r.class_name.clone(),
            format!("{:.6}", r.scores.sdr),
            format!("{:.6}", r.scores.sir),
            format!("{:.6}", r.scores.sar),
            r.variant.to_string(),
        ]);
    }
    for variant in report.variants() {
        if let Some(m) = report.median(variant) {
            rows.push(summary_row("median", "all", &m, variant));
        }
        if let Some(m) = report.mean(variant) {
            rows.push(summary_row("mean", "all", &m, variant));
        }
        for (class, m) in report.class_medians(variant) {
            rows.push(summary_row("median", &class, &m, variant));
        }
        for (class, m) in report.class_means(variant) {
            rows.push(summary_row("mean", &class, &m, variant));
        }
    }
    io::write_tsv(path, &REPORT_HEADER, &rows)
}

fn summary_row(stat: &str, class: &str, s: &BssScores, variant: &str) -> Vec<String> {
    vec![
        stat.to_string(),
        class.to_string(),
        format!("{:.6}", s.sdr),
        format!("{:.6}", s.sir),
        format!("{:.6}", s.sar),
        variant.to_string(),
    ]
}

/// One separated source's decoded query embedding and mask statistics.
pub struct QuerySample {
    pub clip_id: String,
    pub class_id: usize,
    pub class_name: String,
    pub eps_q: Vec<f32>,
    pub mask_mean: f32,
}

/// Forwards test mixtures and collects, per assigned source, the decoded
/// query embedding row and the mean predicted mask value.
pub fn inspect_split(
    model: &Model<f32>,
    corpus: &Corpus,
    split: Split,
    k: usize,
    seed: u64,
    limit: usize,
) -> Result<Vec<QuerySample>> {
    let plan = StftPlan::new();
    let clips: Vec<_> = corpus
        .clips(split)
        .into_iter()
        .filter(|c| c.class_id < model.cfg.query_rows())
        .cloned()
        .collect();
    let classes: Vec<usize> = clips.iter().map(|c| c.class_id).collect();
    let mut pairs = pair_mixtures(&classes, k, seed, &format!("inspect/pairs/{}", split.as_str()));
    if limit > 0 {
        pairs.truncate(limit);
    }

    let channels = model.cfg.channels;
    let mut out = Vec::new();
    for (mi, pair) in pairs.iter().enumerate() {
        let entries: Vec<_> = pair.iter().map(|&i| &clips[i]).collect();
        let mut waves = Vec::with_capacity(k);
        for e in &entries {
            waves.push(corpus.load_wave(e)?);
        }
        let n = waves.iter().map(|w| w.len()).min().unwrap();
        let mut mix = vec![0f32; n];
        for w in &waves {
            for (m, &x) in mix.iter_mut().zip(w.iter()) {
                *m += x;
            }
        }
        let class_ids: Vec<usize> = entries.iter().map(|e| e.class_id).collect();
        let mut arng = rng_for(seed, &format!("inspect/assign/{}/{mi}", split.as_str()));
        let queries =
            assign_queries(model.cfg.assignment, &class_ids, model.cfg.query_rows(), &mut arng);

        let spec = plan.stft(&mix);
        let feats = input_features(&spec.magnitude(), FRAMES);
        let motion: Vec<f32> = waves
            .iter()
            .flat_map(|w| motion_features(&activity_track(&plan, w)))
            .collect();
        let naming: Vec<(usize, Vec<f32>)> = entries
            .iter()
            .zip(&queries)
            .map(|(e, &q)| (q, object_feature(e.class_id, e.seed)))
            .collect();

        let mut tape: Tape<f32> = Tape::new();
        let staged = model.stage(&mut tape);
        let fwd = model.forward(&mut tape, &staged, &feats, &motion, &naming);
        let eps_q = tape.val(fwd.eps_q).data.clone();
        let masks = tape.val(fwd.masks);
        let pixels = masks.cols();

        for (i, e) in entries.iter().enumerate() {
            let q = queries[i];
            let row = masks.data[q * pixels..(q + 1) * pixels].iter().sum::<f32>()
                / pixels as f32;
            out.push(QuerySample {
                clip_id: e.clip_id.clone(),
                class_id: e.class_id,
                class_name: e.class_name.clone(),
                eps_q: eps_q[q * channels..(q + 1) * channels].to_vec(),
                mask_mean: row,
            });
        }
    }
    Ok(out)
}

/// Projects row vectors onto their top two principal components.
/// Power iteration on the centered Gram matrix with a fixed starting vector,
/// so the output is a pure function of the input.
pub fn pca_2d(rows: &[Vec<f32>]) -> Vec<(f64, f64)> {
    let n = rows.len();
    if n == 0 {
        return Vec::new();
    }
    let d = rows[0].len();
    let mut mean = vec![0f64; d];
    for r in rows {
        for (m, &x) in mean.iter_mut().zip(r.iter()) {
            *m += x as f64 / n as f64;
        }
    }
    let centered: Vec<Vec<f64>> = rows
        .iter()
        .map(|r| r.iter().zip(&mean).map(|(&x, &m)| x as f64 - m).collect())
        .collect();
    let mut gram = vec![0f64; n * n];
    for i in 0..n {
        for j in i..n {
            let dot: f64 = centered[i].iter().zip(&centered[j]).map(|(a, b)| a * b).sum();
            gram[i * n + j] = dot;
            gram[j * n + i] = dot;
        }
    }

    let mut coords = vec![(0f64, 0f64); n];
    let mut deflated = gram;
    for comp in 0..2 {
        let mut v: Vec<f64> = (0..n).map(|i| 1.0 + 0.01 * i as f64).collect();
        let mut lambda = 0.0;
        for _ in 0..500 {
            let mut w = vec![0f64; n];
            for i in 0..n {
                for j in 0..n {
                    w[i] += deflated[i * n + j] * v[j];
                }
            }
            lambda = (w.iter().map(|x| x * x).sum::<f64>()).sqrt();
            if lambda < 1e-12 {
                break;
            }
            for x in w.iter_mut() {
                *x /= lambda;
            }
            v = w;
        }
        // Scores of the component: sqrt(lambda) * eigenvector entries.
        let s = lambda.max(0.0).sqrt();
        for i in 0..n {
            let c = s * v[i];
            if comp == 0 {
                coords[i].0 = c;
            } else {
                coords[i].1 = c;
            }
        }
        for i in 0..n {
            for j in 0..n {
                deflated[i * n + j] -= lambda * v[i] * v[j];
            }
        }
    }
    coords
}

/// Reads back the overall medians of a written report, keyed by variant.
pub fn read_report_medians(path: &Path) -> Result<BTreeMap<String, BssScores>> {
    let rows = io::read_tsv(path, &REPORT_HEADER)?;
    let mut out = BTreeMap::new();
    for r in rows {
        if r[0] == "median" && r[1] == "all" {
            let parse = |s: &str| s.parse::<f64>().unwrap_or(f64::NAN);
            out.insert(
                r[5].clone(),
                BssScores { sdr: parse(&r[2]), sir: parse(&r[3]), sar: parse(&r[4]) },
            );
        }
    }
    Ok(out)
}
