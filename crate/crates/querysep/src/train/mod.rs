//! Mixture training: sampling, losses, schedule, and the optimization loop.
//!
//! Mixtures are built on the fly by summing pairs of corpus clips, so the
//! targets (per-source ratio masks on the warped grid) never touch disk.
//! Each batch runs forward and backward on one tape; two Adam instances then
//! update disjoint parameter groups, the transformer side with decoupled
//! weight decay and its own schedule, the rest without decay.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use crate::autodiff::{Adam, Tape, Tensor, Var};
use crate::dsp::{input_features, ratio_mask, warp_log_freq, StftPlan, FRAMES, LOG_BINS};
use crate::error::{Error, Result};
use crate::eval::{assign_queries, evaluate_split, pair_mixtures, separate, QuerySource};
use crate::io::checkpoint::{self, TrainState};
use crate::model::{is_transformer_param, Assignment, Layout, Model, ModelConfig};
use crate::rng::rng_for;
use crate::synth::{activity_track, motion_features, object_feature, Corpus, Split};

/// Knobs for one training run. `epochs`, `batch`, and the schedule default
/// to the full-size recipe; [`TrainConfig::desk`] scales them to a run that
/// fits a single core.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch: usize,
    /// Sources per mixture.
    pub k: usize,
    pub lr: f32,
    /// Decoupled weight decay, transformer group only.
    pub weight_decay: f32,
    /// Epochs at which the transformer lr is cut by 10.
    pub drop_transformer: Vec<usize>,
    /// Epochs at which the other groups' lr is cut by 10.
    pub drop_other: Vec<usize>,
    pub contrastive: bool,
    /// First epoch of the contrastive ramp.
    pub htl_start: usize,
    /// Epochs over which the contrastive weight rises to `htl_weight`.
    pub htl_ramp: usize,
    pub htl_weight: f32,
    pub seed: u64,
    /// Validation mixtures per epoch (0 = the whole split).
    pub val_limit: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 80,
            batch: 8,
            k: 2,
            lr: 1e-4,
            weight_decay: 1e-4,
            drop_transformer: vec![60],
            drop_other: vec![30, 50],
            contrastive: false,
            htl_start: 24,
            htl_ramp: 16,
            htl_weight: 0.1,
            seed: 7,
            val_limit: 0,
        }
    }
}

impl TrainConfig {
    /// Single-core recipe: half the epochs, half the batch, schedule
    /// milestones scaled to keep the same shape.
    pub fn desk() -> Self {
        TrainConfig {
            epochs: 40,
            batch: 4,
            drop_transformer: vec![30],
            drop_other: vec![15, 25],
            ..TrainConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch == 0 {
            return Err(Error::Config("epochs and batch must be positive".into()));
        }
        if self.k < 2 {
            return Err(Error::Config(format!("k must be at least 2, got {}", self.k)));
        }
        if !(self.lr > 0.0) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        for (name, drops) in
            [("drop_transformer", &self.drop_transformer), ("drop_other", &self.drop_other)]
        {
            if let Some(&m) = drops.iter().find(|&&m| m >= self.epochs) {
                return Err(Error::Config(format!(
                    "{name} milestone {m} is outside the {} training epochs",
                    self.epochs
                )));
            }
        }
        if self.htl_ramp == 0 {
            return Err(Error::Config("htl_ramp must be positive".into()));
        }
        Ok(())
    }

    pub fn to_kv(&self) -> Vec<(String, String)> {
        let list = |xs: &[usize]| {
            xs.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
        };
        vec![
            ("train.epochs".into(), self.epochs.to_string()),
            ("train.batch".into(), self.batch.to_string()),
            ("train.k".into(), self.k.to_string()),
            ("train.lr".into(), format!("{:e}", self.lr)),
            ("train.weight_decay".into(), format!("{:e}", self.weight_decay)),
            ("train.drop_transformer".into(), list(&self.drop_transformer)),
            ("train.drop_other".into(), list(&self.drop_other)),
            ("train.contrastive".into(), self.contrastive.to_string()),
            ("train.htl_start".into(), self.htl_start.to_string()),
            ("train.htl_ramp".into(), self.htl_ramp.to_string()),
            ("train.htl_weight".into(), format!("{:e}", self.htl_weight)),
            ("train.seed".into(), self.seed.to_string()),
            ("train.val_limit".into(), self.val_limit.to_string()),
        ]
    }

    /// Applies `train.*` pairs over the current values, then validates.
    /// Unknown keys under the prefix are errors; other prefixes are ignored.
    pub fn apply_kv(&mut self, pairs: &[(String, String)]) -> Result<()> {
        for (key, value) in pairs {
            let Some(name) = key.strip_prefix("train.") else { continue };
            let bad = |what: &str| Error::Config(format!("train.{name}: bad {what} `{value}`"));
            match name {
                "epochs" => self.epochs = value.parse().map_err(|_| bad("count"))?,
                "batch" => self.batch = value.parse().map_err(|_| bad("count"))?,
                "k" => self.k = value.parse().map_err(|_| bad("count"))?,
                "lr" => self.lr = value.parse().map_err(|_| bad("number"))?,
                "weight_decay" => self.weight_decay = value.parse().map_err(|_| bad("number"))?,
                "drop_transformer" => self.drop_transformer = parse_list(value).ok_or_else(|| bad("list"))?,
                "drop_other" => self.drop_other = parse_list(value).ok_or_else(|| bad("list"))?,
                "contrastive" => self.contrastive = value.parse().map_err(|_| bad("flag"))?,
                "htl_start" => self.htl_start = value.parse().map_err(|_| bad("count"))?,
                "htl_ramp" => self.htl_ramp = value.parse().map_err(|_| bad("count"))?,
                "htl_weight" => self.htl_weight = value.parse().map_err(|_| bad("number"))?,
                "seed" => self.seed = value.parse().map_err(|_| bad("seed"))?,
                "val_limit" => self.val_limit = value.parse().map_err(|_| bad("count"))?,
                _ => return Err(Error::Config(format!("unknown key train.{name}"))),
            }
        }
        self.validate()
    }
}

fn parse_list(s: &str) -> Option<Vec<usize>> {
    if s.trim().is_empty() {
        return Some(Vec::new());
    }
    s.split(',').map(|p| p.trim().parse().ok()).collect()
}

/// Loss weights for an epoch: the separation weight is always 1; the
/// contrastive weight is 0 before `htl_start`, then rises linearly over
/// `htl_ramp` epochs to `htl_weight`.
pub fn htl_weights(epoch: usize, cfg: &TrainConfig) -> (f32, f32) {
    let w = if !cfg.contrastive || epoch < cfg.htl_start {
        0.0
    } else if epoch >= cfg.htl_start + cfg.htl_ramp {
        cfg.htl_weight
    } else {
        cfg.htl_weight * (epoch - cfg.htl_start) as f32 / cfg.htl_ramp as f32
    };
    (1.0, w)
}

/// Learning rate after applying every milestone at or before `epoch`.
pub fn lr_at(base: f32, milestones: &[usize], epoch: usize) -> f32 {
    let drops = milestones.iter().filter(|&&m| epoch >= m).count() as i32;
    base * 0.1f32.powi(drops)
}

/// Per-source mean absolute mask error, summed over the mixture's sources.
/// Rows of `masks` not listed in `queries` contribute nothing.
pub(crate) fn sep_loss(
    tape: &mut Tape<f32>,
    masks: Var,
    queries: &[usize],
    targets: &[f32],
) -> Var {
    let pixels = tape.val(masks).cols();
    assert_eq!(targets.len(), queries.len() * pixels);
    let sel = tape.select_rows(masks, queries);
    let t = tape.leaf(Tensor::from_vec(&[queries.len(), pixels], targets.to_vec()));
    let d = tape.sub(sel, t);
    let a = tape.abs(d);
    let s = tape.sum_all(a);
    tape.scale(s, 1.0 / pixels as f32)
}

fn row_unit(tape: &mut Tape<f32>, x: Var) -> Var {
    let cols = tape.val(x).cols();
    let sq = tape.mul(x, x);
    let ones = tape.leaf(Tensor::from_vec(&[cols, 1], vec![1.0; cols]));
    let rs = tape.matmul(sq, ones);
    let rs = tape.add_scalar(rs, 1e-12);
    let norm = tape.sqrt(rs);
    tape.div(x, norm)
}

const CONTRAST_TEMP: f32 = 0.07;

/// Cross-entropy between mask-pooled audio embeddings and projected query
/// embeddings. Each assigned source pools `eps_a` under its mask, the full
/// query bank is projected into the same space, and the source must pick out
/// its own query among all rows by cosine similarity.
pub(crate) fn contrastive_loss(
    tape: &mut Tape<f32>,
    proj_w: Var,
    proj_b: Var,
    eps_q: Var,
    eps_a: Var,
    masks: Var,
    queries: &[usize],
) -> Var {
    let k = queries.len();
    let pixels = tape.val(masks).cols();
    let nrows = tape.val(eps_q).rows();

    let sel_m = tape.select_rows(masks, queries);
    let a_t = tape.transpose(eps_a);
    let weighted = tape.matmul(sel_m, a_t);
    let ones = tape.leaf(Tensor::from_vec(&[pixels, 1], vec![1.0; pixels]));
    let msum = tape.matmul(sel_m, ones);
    let msum = tape.add_scalar(msum, 1e-8);
    let pooled = tape.div(weighted, msum);

    let qw = tape.matmul(eps_q, proj_w);
    let projected = tape.add(qw, proj_b);

    let pn = row_unit(tape, pooled);
    let jn = row_unit(tape, projected);
    let jt = tape.transpose(jn);
    let sims = tape.matmul(pn, jt);
    let logits = tape.scale(sims, 1.0 / CONTRAST_TEMP);
    let lsm = tape.log_softmax(logits);

    let mut hot = vec![0f32; k * nrows];
    for (i, &q) in queries.iter().enumerate() {
        hot[i * nrows + q] = 1.0;
    }
    let hot = tape.leaf(Tensor::from_vec(&[k, nrows], hot));
    let picked = tape.mul(lsm, hot);
    let s = tape.sum_all(picked);
    tape.scale(s, -1.0 / k as f32)
}

/// A clip with everything training needs, loaded once per run.
pub(crate) struct ClipCache {
    pub class_id: usize,
    pub wave: Vec<f32>,
    pub warped_mag: Vec<f32>,
    pub motion: Vec<f32>,
    pub object: Vec<f32>,
}

pub(crate) fn load_cache(
    corpus: &Corpus,
    split: Split,
    plan: &StftPlan,
    max_class: usize,
) -> Result<Vec<ClipCache>> {
    let mut out = Vec::new();
    for entry in corpus.clips(split) {
        if entry.class_id >= max_class {
            continue;
        }
        let wave = corpus.load_wave(entry)?;
        let spec = plan.stft(&wave);
        let warped_mag = warp_log_freq(&spec.magnitude(), FRAMES);
        let motion = motion_features(&activity_track(plan, &wave));
        let object = object_feature(entry.class_id, entry.seed);
        out.push(ClipCache {
            class_id: entry.class_id,
            wave,
            warped_mag,
            motion,
            object,
        });
    }
    Ok(out)
}

/// One mixture, fully prepared for the forward pass.
pub(crate) struct MixtureData {
    pub feats: Vec<f32>,
    pub motion: Vec<f32>,
    pub naming: Vec<(usize, Vec<f32>)>,
    pub queries: Vec<usize>,
    pub targets: Vec<f32>,
}

pub(crate) fn build_mixture(
    plan: &StftPlan,
    clips: &[&ClipCache],
    queries: &[usize],
) -> MixtureData {
    let n = clips.iter().map(|c| c.wave.len()).min().unwrap();
    let mut mix = vec![0f32; n];
    for c in clips {
        for (m, &x) in mix.iter_mut().zip(c.wave.iter()) {
            *m += x;
        }
    }
    let mix_mag = plan.stft(&mix).magnitude();
    let warped_mix = warp_log_freq(&mix_mag, FRAMES);
    let feats = input_features(&mix_mag, FRAMES);

    let mut targets = Vec::with_capacity(clips.len() * LOG_BINS * FRAMES);
    for c in clips {
        targets.extend(ratio_mask(&c.warped_mag, &warped_mix));
    }
    let motion: Vec<f32> = clips.iter().flat_map(|c| c.motion.iter().copied()).collect();
    let naming: Vec<(usize, Vec<f32>)> = clips
        .iter()
        .zip(queries)
        .map(|(c, &q)| (q, c.object.clone()))
        .collect();
    MixtureData { feats, motion, naming, queries: queries.to_vec(), targets }
}

/// Forward, loss, backward, and both optimizer steps for one batch.
/// Returns the mean separation and contrastive loss values.
pub(crate) fn run_batch(
    model: &mut Model<f32>,
    batch: &[MixtureData],
    weights: (f32, f32),
    opt_transformer: &mut Adam<f32>,
    opt_other: &mut Adam<f32>,
) -> Result<(f32, f32)> {
    let (w_sep, w_con) = weights;
    let mut tape: Tape<f32> = Tape::new();
    let staged = model.stage(&mut tape);
    let pick = |name: &str| staged.var(model.params.by_name(name).expect(name));
    let proj_w = pick("contrast.proj.w");
    let proj_b = pick("contrast.proj.b");

    let mut total: Option<Var> = None;
    let mut sep_sum = 0f32;
    let mut con_sum = 0f32;
    for mix in batch {
        let out = model.forward(&mut tape, &staged, &mix.feats, &mix.motion, &mix.naming);
        let l_sep = sep_loss(&mut tape, out.masks, &mix.queries, &mix.targets);
        sep_sum += tape.val(l_sep).data[0];
        let term = if w_con > 0.0 {
            let l_con = contrastive_loss(
                &mut tape,
                proj_w,
                proj_b,
                out.eps_q,
                out.eps_a,
                out.masks,
                &mix.queries,
            );
            con_sum += tape.val(l_con).data[0];
            let a = tape.scale(l_sep, w_sep);
            let b = tape.scale(l_con, w_con);
            tape.add(a, b)
        } else if w_sep != 1.0 {
            tape.scale(l_sep, w_sep)
        } else {
            l_sep
        };
        total = Some(match total {
            Some(acc) => tape.add(acc, term),
            None => term,
        });
    }
    let total = total.expect("batch must be non-empty");
    let total = tape.scale(total, 1.0 / batch.len() as f32);

    let loss = tape.val(total).data[0];
    if !loss.is_finite() {
        return Err(Error::Diverged(format!("batch loss is {loss}")));
    }

    let mut grads = tape.backward(total);
    model.params.accumulate(&staged, &mut grads, 1.0);
    drop(tape);

    opt_transformer.step(&mut model.params, is_transformer_param);
    opt_other.step(&mut model.params, |n| !is_transformer_param(n));
    model.params.zero_grads();

    Ok((sep_sum / batch.len() as f32, con_sum / batch.len() as f32))
}

struct Metrics {
    w: std::io::BufWriter<fs::File>,
    path: PathBuf,
}

impl Metrics {
    fn create(path: &Path) -> Result<Metrics> {
        let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(file);
        writeln!(w, "epoch\tstep\tL_sep\tL_contras\tw_contras\tval_SDR")
            .map_err(|e| Error::io(path, e))?;
        Ok(Metrics { w, path: path.to_path_buf() })
    }

    fn step_row(&mut self, epoch: usize, step: u64, l_sep: f32, l_con: f32, w_con: f32) -> Result<()> {
        writeln!(self.w, "{epoch}\t{step}\t{l_sep:.6}\t{l_con:.6}\t{w_con:.6}\t")
            .map_err(|e| Error::io(&self.path, e))
    }

    fn val_row(&mut self, epoch: usize, step: u64, val_sdr: f64) -> Result<()> {
        writeln!(self.w, "{epoch}\t{step}\t\t\t\t{val_sdr:.6}")
            .map_err(|e| Error::io(&self.path, e))?;
        self.w.flush().map_err(|e| Error::io(&self.path, e))
    }
}

/// Where a finished run left its artifacts, and how it went.
pub struct TrainOutcome {
    pub epochs: usize,
    pub steps: u64,
    pub best_val_sdr: f64,
    pub best_epoch: usize,
    pub final_val_sdr: f64,
    pub best_path: PathBuf,
    pub final_path: PathBuf,
    pub metrics_path: PathBuf,
}

/// Trains a fresh model on the corpus train split. Writes `metrics.tsv`,
/// `best.ckpt` (highest validation SDR, no optimizer state), and
/// `final.ckpt` (last epoch, with optimizer state) into `out_dir`.
pub fn train(
    corpus: &Corpus,
    model_cfg: ModelConfig,
    cfg: &TrainConfig,
    out_dir: &Path,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    model_cfg.validate()?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;

    let mut model = Model::new(model_cfg, cfg.seed)?;
    let plan = StftPlan::new();
    let clips = load_cache(corpus, Split::Train, &plan, model.cfg.query_rows())?;
    if clips.len() < cfg.k {
        return Err(Error::Config(format!(
            "train split has {} usable clips, need at least k={}",
            clips.len(),
            cfg.k
        )));
    }
    let classes: Vec<usize> = clips.iter().map(|c| c.class_id).collect();

    let mut opt_t = Adam::with_weight_decay(cfg.lr, cfg.weight_decay);
    let mut opt_o = Adam::new(cfg.lr);
    let mut metrics = Metrics::create(&out_dir.join("metrics.tsv"))?;
    let best_path = out_dir.join("best.ckpt");
    let final_path = out_dir.join("final.ckpt");

    let mut best_val = f64::NEG_INFINITY;
    let mut best_epoch = 0;
    let mut last_val = f64::NEG_INFINITY;
    let mut global_step: u64 = 0;

    for epoch in 0..cfg.epochs {
        opt_t.lr = lr_at(cfg.lr, &cfg.drop_transformer, epoch);
        opt_o.lr = lr_at(cfg.lr, &cfg.drop_other, epoch);
        let weights = htl_weights(epoch, cfg);

        let pairs = pair_mixtures(&classes, cfg.k, cfg.seed, &format!("train/epoch/{epoch}"));
        for chunk in pairs.chunks(cfg.batch) {
            let batch: Vec<MixtureData> = chunk
                .iter()
                .enumerate()
                .map(|(bi, pair)| {
                    let picked: Vec<&ClipCache> = pair.iter().map(|&i| &clips[i]).collect();
                    let class_ids: Vec<usize> = picked.iter().map(|c| c.class_id).collect();
                    let mut arng = rng_for(
                        cfg.seed,
                        &format!("train/assign/{epoch}/{global_step}/{bi}"),
                    );
                    let queries = assign_queries(
                        model.cfg.assignment,
                        &class_ids,
                        model.cfg.query_rows(),
                        &mut arng,
                    );
                    build_mixture(&plan, &picked, &queries)
                })
                .collect();

            let (l_sep, l_con) =
                run_batch(&mut model, &batch, weights, &mut opt_t, &mut opt_o).map_err(|e| {
                    match e {
                        Error::Diverged(msg) => Error::Diverged(format!(
                            "{msg} at epoch {epoch} step {global_step} (seed {})",
                            cfg.seed
                        )),
                        other => other,
                    }
                })?;
            metrics.step_row(epoch, global_step, l_sep, l_con, weights.1)?;
            global_step += 1;
        }

        let report =
            evaluate_split(&model, corpus, Split::Val, cfg.k, cfg.seed, false, cfg.val_limit)?;
        let val_sdr = report.median("model").map(|s| s.sdr).unwrap_or(f64::NEG_INFINITY);
        metrics.val_row(epoch, global_step, val_sdr)?;
        last_val = val_sdr;

        if val_sdr > best_val || !best_path.exists() {
            best_val = val_sdr;
            best_epoch = epoch;
            checkpoint::save(&best_path, &model, &cfg.to_kv(), None)?;
        }
        let state = TrainState {
            group_steps: vec![("transformer".into(), opt_t.t), ("other".into(), opt_o.t)],
            seed: cfg.seed,
            epochs_done: (epoch + 1) as u32,
            steps_done: global_step,
        };
        checkpoint::save(&final_path, &model, &cfg.to_kv(), Some(&state))?;
    }

    Ok(TrainOutcome {
        epochs: cfg.epochs,
        steps: global_step,
        best_val_sdr: best_val,
        best_epoch,
        final_val_sdr: last_val,
        best_path,
        final_path,
        metrics_path: metrics.path.clone(),
    })
}

/// Result of adapting a trained model to one new class through a fresh
/// query-bank row.
pub struct FinetuneOutcome {
    pub steps: usize,
    pub before: f64,
    pub after: f64,
    pub ckpt_path: PathBuf,
    pub report_path: PathBuf,
}

fn median_new_class_sdr(
    model: &Model<f32>,
    plan: &StftPlan,
    mixtures: &[(ClipCacheRef, ClipCacheRef)],
) -> f64 {
    let mut sdrs = Vec::new();
    for (new, other) in mixtures {
        let n = new.wave.len().min(other.wave.len());
        let mut mix = vec![0f32; n];
        for i in 0..n {
            mix[i] = new.wave[i] + other.wave[i];
        }
        let sources = vec![
            QuerySource {
                query: new.class_id,
                object: new.object.clone(),
                motion: new.motion.clone(),
            },
            QuerySource {
                query: other.class_id,
                object: other.object.clone(),
                motion: other.motion.clone(),
            },
        ];
        let (ests, _) = separate(model, plan, &mix, &sources);
        let refs64: Vec<Vec<f64>> = [&new.wave, &other.wave]
            .iter()
            .map(|w| w[..n].iter().map(|&x| x as f64).collect())
            .collect();
        let ref_slices: Vec<&[f64]> = refs64.iter().map(|r| r.as_slice()).collect();
        let ctx = crate::bss::ProjectionContext::new(&ref_slices, crate::bss::FILTER_LEN);
        let est64: Vec<f64> = ests[0].iter().map(|&x| x as f64).collect();
        sdrs.push(ctx.eval(&est64, 0).sdr);
    }
    sdrs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = sdrs.len();
    if n % 2 == 1 {
        sdrs[n / 2]
    } else {
        0.5 * (sdrs[n / 2 - 1] + sdrs[n / 2])
    }
}

type ClipCacheRef = std::rc::Rc<ClipCache>;

/// Extends the model with one prompt row for `new_class`, freezes everything
/// but the query bank, and trains on mixtures that contain the new class.
/// Scores the held-out class on the test split before and after.
pub fn finetune_prompt(
    mut model: Model<f32>,
    corpus: &Corpus,
    new_class: usize,
    steps: usize,
    cfg: &TrainConfig,
    out_dir: &Path,
) -> Result<FinetuneOutcome> {
    if new_class != model.cfg.query_rows() {
        return Err(Error::Config(format!(
            "new class id {new_class} must be the next query row ({})",
            model.cfg.query_rows()
        )));
    }
    if new_class >= corpus.classes() {
        return Err(Error::Config(format!(
            "corpus has {} classes, none with id {new_class}",
            corpus.classes()
        )));
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let plan = StftPlan::new();

    model.add_audio_prompt(cfg.seed);

    let split_mixtures = |split: Split, tag: &str| -> Result<Vec<(ClipCacheRef, ClipCacheRef)>> {
        let cache = load_cache(corpus, split, &plan, model.cfg.query_rows())?;
        let cache: Vec<ClipCacheRef> = cache.into_iter().map(std::rc::Rc::new).collect();
        let news: Vec<ClipCacheRef> =
            cache.iter().filter(|c| c.class_id == new_class).cloned().collect();
        let others: Vec<ClipCacheRef> =
            cache.iter().filter(|c| c.class_id != new_class).cloned().collect();
        if news.is_empty() || others.is_empty() {
            return Err(Error::Config(format!(
                "split {} lacks clips for class {new_class} pairings",
                split.as_str()
            )));
        }
        let mut rng = rng_for(cfg.seed, tag);
        let mut order: Vec<usize> = (0..others.len()).collect();
        crate::rng::shuffle(&mut order, &mut rng);
        Ok(news
            .iter()
            .enumerate()
            .map(|(i, n)| (n.clone(), others[order[i % order.len()]].clone()))
            .collect())
    };

    let test_mixtures = split_mixtures(Split::Test, "finetune/test")?;
    let before = median_new_class_sdr(&model, &plan, &test_mixtures);

    let train_mixtures = split_mixtures(Split::Train, "finetune/train")?;
    let mut opt = Adam::with_weight_decay(cfg.lr, cfg.weight_decay);
    let mut opt_unused = Adam::new(cfg.lr);
    for step in 0..steps {
        let (new, other) = &train_mixtures[step % train_mixtures.len()];
        let picked = [new.as_ref(), other.as_ref()];
        let queries = vec![new.class_id, other.class_id];
        let data = build_mixture(&plan, &picked, &queries);
        run_batch(&mut model, &[data], (1.0, 0.0), &mut opt, &mut opt_unused).map_err(|e| {
            match e {
                Error::Diverged(msg) => {
                    Error::Diverged(format!("{msg} at finetune step {step} (seed {})", cfg.seed))
                }
                other => other,
            }
        })?;
    }

    let after = median_new_class_sdr(&model, &plan, &test_mixtures);

    let ckpt_path = out_dir.join("prompt.ckpt");
    checkpoint::save(&ckpt_path, &model, &cfg.to_kv(), None)?;

    let report_path = out_dir.join("finetune.tsv");
    let rows = vec![
        vec!["median".to_string(), "all".into(), format!("{before:.6}"), "before".into()],
        vec!["median".to_string(), "all".into(), format!("{after:.6}"), "after".into()],
    ];
    crate::io::write_tsv(&report_path, &["stat", "class", "sdr", "variant"], &rows)?;

    Ok(FinetuneOutcome { steps, before, after, ckpt_path, report_path })
}

/// One architecture or naming variant to train and score.
pub struct AblateSpec {
    pub name: String,
    pub layout: Layout,
    pub assignment: Assignment,
}

impl AblateSpec {
    /// Named presets: `visual` is the default architecture, `random`
    /// scrambles query naming, the rest swap the decoder layout.
    pub fn preset(name: &str) -> Option<AblateSpec> {
        let (layout, assignment) = match name {
            "visual" => (Layout::MotionSelfAudio, Assignment::Visual),
            "random" => (Layout::MotionSelfAudio, Assignment::Random),
            "self_audio" => (Layout::SelfAudio, Assignment::Visual),
            "self_motion_audio" => (Layout::SelfMotionAudio, Assignment::Visual),
            "dual_stream" => (Layout::DualStream, Assignment::Visual),
            _ => return None,
        };
        Some(AblateSpec { name: name.to_string(), layout, assignment })
    }
}

/// Scores from one ablation variant.
pub struct AblateRow {
    pub name: String,
    pub median_sdr: f64,
    pub median_sir: f64,
    pub median_sar: f64,
    pub flags: String,
}

/// Trains every variant under the same seed and budget, scores each on the
/// test split, and writes `ablate.tsv`. Ordering violations against the
/// `visual` row are flagged in the last column, never suppressed.
pub fn ablate(
    corpus: &Corpus,
    base: &ModelConfig,
    cfg: &TrainConfig,
    variants: &[AblateSpec],
    out_dir: &Path,
) -> Result<PathBuf> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut rows: Vec<AblateRow> = Vec::new();
    for spec in variants {
        let mut model_cfg = base.clone();
        model_cfg.layout = spec.layout;
        model_cfg.assignment = spec.assignment;
        let dir = out_dir.join(&spec.name);
        let outcome = train(corpus, model_cfg, cfg, &dir)?;
        let (model, _, _) = checkpoint::load(&outcome.best_path)?;
        let report = evaluate_split(&model, corpus, Split::Test, cfg.k, cfg.seed, false, 0)?;
        let m = report.median("model").expect("test split is non-empty");
        rows.push(AblateRow {
            name: spec.name.clone(),
            median_sdr: m.sdr,
            median_sir: m.sir,
            median_sar: m.sar,
            flags: String::new(),
        });
    }

    if let Some(visual_sdr) = rows.iter().find(|r| r.name == "visual").map(|r| r.median_sdr) {
        for row in rows.iter_mut() {
            match row.name.as_str() {
                "random" if row.median_sdr >= visual_sdr => {
                    row.flags = "not_below_visual".into();
                }
                "self_audio" if row.median_sdr > visual_sdr => {
                    row.flags = "exceeds_visual".into();
                }
                _ => {}
            }
        }
    }

    let path = out_dir.join("ablate.tsv");
    let cells: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                r.name.clone(),
                format!("{:.6}", r.median_sdr),
                format!("{:.6}", r.median_sir),
                format!("{:.6}", r.median_sar),
                r.flags.clone(),
            ]
        })
        .collect();
    crate::io::write_tsv(&path, &["variant", "median_sdr", "median_sir", "median_sar", "flags"], &cells)?;
    Ok(path)
}

#[cfg(test)]
mod tests;
