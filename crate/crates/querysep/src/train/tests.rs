use super::*;
use crate::autodiff::Tensor;
use crate::model::Layout;

#[test]
fn sep_loss_matches_a_plain_loop() {
    let mut tape: Tape<f32> = Tape::new();
    let masks: Vec<f32> = (0..4 * 6).map(|i| (i as f32 * 0.37).sin() * 0.5 + 0.5).collect();
    let m = tape.leaf(Tensor::from_vec(&[4, 6], masks.clone()));
    let queries = [1usize, 3];
    let targets: Vec<f32> = (0..2 * 6).map(|i| (i as f32 * 0.21).cos() * 0.5 + 0.5).collect();

    let loss = sep_loss(&mut tape, m, &queries, &targets);
    let got = tape.val(loss).data[0];

    let mut want = 0f32;
    for (k, &q) in queries.iter().enumerate() {
        for p in 0..6 {
            want += (masks[q * 6 + p] - targets[k * 6 + p]).abs() / 6.0;
        }
    }
    assert!((got - want).abs() < 1e-6, "{got} vs {want}");
}

#[test]
fn constant_offset_gives_offset_times_sources() {
    let mut tape: Tape<f32> = Tape::new();
    let targets: Vec<f32> = (0..3 * 8).map(|i| 0.2 + 0.01 * i as f32).collect();
    let mut masks = vec![0f32; 5 * 8];
    for (k, &q) in [0usize, 2, 4].iter().enumerate() {
        for p in 0..8 {
            masks[q * 8 + p] = targets[k * 8 + p] + 0.1;
        }
    }
    let m = tape.leaf(Tensor::from_vec(&[5, 8], masks));
    let loss = sep_loss(&mut tape, m, &[0, 2, 4], &targets);
    let got = tape.val(loss).data[0];
    assert!((got - 0.3).abs() < 1e-6, "{got}");
}

#[test]
fn unassigned_rows_carry_no_loss_and_no_gradient() {
    let targets: Vec<f32> = (0..2 * 6).map(|i| (i as f32 * 0.13).sin().abs()).collect();
    let base: Vec<f32> = (0..4 * 6).map(|i| (i as f32 * 0.29).cos() * 0.4 + 0.5).collect();

    let eval = |masks: &[f32]| {
        let mut tape: Tape<f32> = Tape::new();
        let m = tape.leaf(Tensor::from_vec(&[4, 6], masks.to_vec()));
        let loss = sep_loss(&mut tape, m, &[1, 3], &targets);
        tape.val(loss).data[0]
    };
    let reference = eval(&base);

    let mut bumped = base.clone();
    for p in 0..6 {
        bumped[p] += 5.0;
        bumped[2 * 6 + p] -= 3.0;
    }
    assert_eq!(eval(&bumped), reference);

    let mut touched = base.clone();
    touched[1 * 6 + 2] += 0.05;
    assert_ne!(eval(&touched), reference);

    let mut tape: Tape<f32> = Tape::new();
    let m = tape.leaf_grad(Tensor::from_vec(&[4, 6], base));
    let loss = sep_loss(&mut tape, m, &[1, 3], &targets);
    let mut grads = tape.backward(loss);
    let g = grads.take(m).expect("mask gradient");
    for p in 0..6 {
        assert_eq!(g.data[p], 0.0, "row 0 pixel {p}");
        assert_eq!(g.data[2 * 6 + p], 0.0, "row 2 pixel {p}");
    }
    assert!(g.data[6..12].iter().any(|&x| x != 0.0));
}

fn contrast_setup(
    tape: &mut Tape<f32>,
    eps_q: Vec<f32>,
    nrows: usize,
    w: Vec<f32>,
    b: Vec<f32>,
    ce: usize,
    channels: usize,
) -> (Var, Var, Var) {
    let q = tape.leaf(Tensor::from_vec(&[nrows, channels], eps_q));
    let w = tape.leaf(Tensor::from_vec(&[channels, ce], w));
    let b = tape.leaf(Tensor::from_vec(&[1, ce], b));
    (q, w, b)
}

#[test]
fn contrastive_loss_is_ln_n_when_all_rows_project_equally() {
    // Zero projection weight and a shared bias make every query row project
    // to the same vector, so each source sees uniform similarities.
    let (channels, ce, nrows, pixels) = (4, 3, 5, 7);
    let mut tape: Tape<f32> = Tape::new();
    let eps_q: Vec<f32> = (0..nrows * channels).map(|i| (i as f32 * 0.3).sin()).collect();
    let bias = vec![0.4, -0.2, 0.9];
    let (q, w, b) = contrast_setup(
        &mut tape,
        eps_q,
        nrows,
        vec![0.0; channels * ce],
        bias,
        ce,
        channels,
    );
    let eps_a: Vec<f32> = (0..ce * pixels).map(|i| (i as f32 * 0.17).cos()).collect();
    let a = tape.leaf(Tensor::from_vec(&[ce, pixels], eps_a));
    let masks: Vec<f32> = (0..nrows * pixels).map(|i| 0.3 + 0.4 * ((i % 3) as f32 / 3.0)).collect();
    let m = tape.leaf(Tensor::from_vec(&[nrows, pixels], masks));

    let loss = contrastive_loss(&mut tape, w, b, q, a, m, &[0, 2]);
    let got = tape.val(loss).data[0];
    let want = (nrows as f32).ln();
    assert!((got - want).abs() < 1e-5, "{got} vs {want}");
}

#[test]
fn contrastive_loss_vanishes_when_similarities_saturate() {
    // Pooled embeddings and projections are colinear: the matching pair at
    // cosine +1, every other row at -1. At temperature 0.07 the softmax is
    // effectively one-hot.
    let (channels, ce, nrows, pixels) = (2, 3, 3, 4);
    let mut tape: Tape<f32> = Tape::new();
    let v = [0.6f32, -0.8, 0.0];
    // Query rows are one-hot in channel space; W maps row 0 to +2v and the
    // others to -3v.
    let mut eps_q = vec![0f32; nrows * channels];
    eps_q[0] = 1.0;
    eps_q[1 * channels + 1] = 1.0;
    eps_q[2 * channels + 1] = 1.0;
    let mut w = vec![0f32; channels * ce];
    for c in 0..ce {
        w[c] = 2.0 * v[c];
        w[ce + c] = -3.0 * v[c];
    }
    let (q, wv, b) =
        contrast_setup(&mut tape, eps_q, nrows, w, vec![0.0; ce], ce, channels);
    // Every eps_a column equals v, so any mask pools to exactly v.
    let mut eps_a = vec![0f32; ce * pixels];
    for c in 0..ce {
        for p in 0..pixels {
            eps_a[c * pixels + p] = v[c];
        }
    }
    let a = tape.leaf(Tensor::from_vec(&[ce, pixels], eps_a));
    let m = tape.leaf(Tensor::from_vec(&[nrows, pixels], vec![0.5; nrows * pixels]));

    let loss = contrastive_loss(&mut tape, wv, b, q, a, m, &[0]);
    let got = tape.val(loss).data[0];
    assert!(got.abs() < 1e-6, "{got}");
}

#[test]
fn contrastive_loss_matches_a_direct_computation() {
    let (channels, ce, nrows, pixels) = (3, 4, 4, 5);
    let mut rng = rng_for(11, "contrast/oracle");
    let draw = |rng: &mut rand_chacha::ChaCha8Rng, n: usize| -> Vec<f32> {
        (0..n).map(|_| crate::rng::normal(rng) as f32).collect()
    };
    let eps_q = draw(&mut rng, nrows * channels);
    let w = draw(&mut rng, channels * ce);
    let b = draw(&mut rng, ce);
    let eps_a = draw(&mut rng, ce * pixels);
    let masks: Vec<f32> = draw(&mut rng, nrows * pixels).iter().map(|x| x.abs() + 0.1).collect();
    let queries = [3usize, 1];

    let mut tape: Tape<f32> = Tape::new();
    let (q, wv, bv) =
        contrast_setup(&mut tape, eps_q.clone(), nrows, w.clone(), b.clone(), ce, channels);
    let a = tape.leaf(Tensor::from_vec(&[ce, pixels], eps_a.clone()));
    let m = tape.leaf(Tensor::from_vec(&[nrows, pixels], masks.clone()));
    let loss = contrastive_loss(&mut tape, wv, bv, q, a, m, &queries);
    let got = tape.val(loss).data[0] as f64;

    // Plain f64 recomputation.
    let proj: Vec<Vec<f64>> = (0..nrows)
        .map(|r| {
            (0..ce)
                .map(|c| {
                    (0..channels)
                        .map(|ch| eps_q[r * channels + ch] as f64 * w[ch * ce + c] as f64)
                        .sum::<f64>()
                        + b[c] as f64
                })
                .collect()
        })
        .collect();
    let unit = |x: &[f64]| -> Vec<f64> {
        let n = (x.iter().map(|v| v * v).sum::<f64>() + 1e-12).sqrt();
        x.iter().map(|v| v / n).collect()
    };
    let mut want = 0f64;
    for &qi in queries.iter() {
        let msum: f64 = (0..pixels).map(|p| masks[qi * pixels + p] as f64).sum::<f64>() + 1e-8;
        let pooled: Vec<f64> = (0..ce)
            .map(|c| {
                (0..pixels)
                    .map(|p| masks[qi * pixels + p] as f64 * eps_a[c * pixels + p] as f64)
                    .sum::<f64>()
                    / msum
            })
            .collect();
        let pn = unit(&pooled);
        let logits: Vec<f64> = (0..nrows)
            .map(|r| {
                let jn = unit(&proj[r]);
                pn.iter().zip(&jn).map(|(a, b)| a * b).sum::<f64>() / CONTRAST_TEMP as f64
            })
            .collect();
        let mx = logits.iter().cloned().fold(f64::MIN, f64::max);
        let lse = mx + logits.iter().map(|l| (l - mx).exp()).sum::<f64>().ln();
        want -= logits[qi] - lse;
    }
    want /= queries.len() as f64;
    assert!((got - want).abs() < 1e-4, "{got} vs {want}");
}

#[test]
fn loss_weights_follow_the_ramp() {
    let cfg = TrainConfig { contrastive: true, ..TrainConfig::default() };
    assert_eq!(htl_weights(0, &cfg), (1.0, 0.0));
    assert_eq!(htl_weights(23, &cfg), (1.0, 0.0));
    let (_, mid) = htl_weights(cfg.htl_start + cfg.htl_ramp / 2, &cfg);
    assert!((mid - cfg.htl_weight / 2.0).abs() < 1e-7);
    assert_eq!(htl_weights(cfg.htl_start + cfg.htl_ramp, &cfg), (1.0, cfg.htl_weight));
    assert_eq!(htl_weights(79, &cfg), (1.0, cfg.htl_weight));

    let off = TrainConfig::default();
    assert_eq!(htl_weights(79, &off), (1.0, 0.0));
}

#[test]
fn lr_schedule_steps_down_at_milestones() {
    assert_eq!(lr_at(1e-4, &[60], 0), 1e-4);
    assert_eq!(lr_at(1e-4, &[60], 59), 1e-4);
    assert!((lr_at(1e-4, &[60], 60) - 1e-5).abs() < 1e-12);
    assert!((lr_at(1e-4, &[30, 50], 30) - 1e-5).abs() < 1e-12);
    assert!((lr_at(1e-4, &[30, 50], 55) - 1e-6).abs() < 1e-13);
}

#[test]
fn config_round_trips_and_rejects_bad_keys() {
    let mut cfg = TrainConfig::desk();
    cfg.contrastive = true;
    cfg.htl_weight = 0.25;
    let kv = cfg.to_kv();
    let mut back = TrainConfig::default();
    back.apply_kv(&kv).unwrap();
    assert_eq!(back, cfg);

    let mut other = TrainConfig::default();
    let err = other
        .apply_kv(&[("train.warmup".into(), "3".into())])
        .unwrap_err();
    assert!(err.to_string().contains("train.warmup"), "{err}");

    let mut late = TrainConfig::desk();
    let err = late
        .apply_kv(&[("train.drop_other".into(), "15,40".into())])
        .unwrap_err();
    assert!(err.to_string().contains("milestone"), "{err}");
}

fn tiny_model() -> Model<f32> {
    let cfg = ModelConfig {
        queries: 4,
        channels: 32,
        mask_channels: 8,
        heads: 4,
        depth: 5,
        base: 4,
        input: 32,
        motion_len: 4,
        layout: Layout::MotionSelfAudio,
        assignment: crate::model::Assignment::Visual,
        prompts: 0,
    };
    Model::new(cfg, 5).unwrap()
}

fn crafted_batch(model: &Model<f32>, seed: u64) -> Vec<MixtureData> {
    let cfg = &model.cfg;
    let pixels = cfg.input * cfg.input;
    let mut rng = rng_for(seed, "train/crafted");
    let mut draw = |n: usize, scale: f32| -> Vec<f32> {
        (0..n).map(|_| crate::rng::normal(&mut rng) as f32 * scale).collect()
    };
    let mut out = Vec::new();
    for mix in 0..2 {
        let feats: Vec<f32> = draw(pixels, 1.0).iter().map(|x| x.abs()).collect();
        let motion = draw(2 * cfg.motion_len * cfg.channels, 0.5);
        let naming = vec![(mix, draw(cfg.channels, 0.5)), (mix + 2, draw(cfg.channels, 0.5))];
        let queries = vec![mix, mix + 2];
        // Complementary half-plane masks, easy to represent exactly.
        let mut targets = vec![0f32; 2 * pixels];
        for p in 0..pixels {
            let top = p < pixels / 2;
            targets[p] = if top { 0.9 } else { 0.1 };
            targets[pixels + p] = if top { 0.1 } else { 0.9 };
        }
        out.push(MixtureData { feats, motion, naming, queries, targets });
    }
    out
}

#[test]
fn five_hundred_steps_overfit_one_batch() {
    let mut model = tiny_model();
    let batch = crafted_batch(&model, 3);
    let mut opt_t = Adam::with_weight_decay(3e-3, 0.0);
    let mut opt_o = Adam::new(3e-3);
    let mut last = f32::MAX;
    for _ in 0..500 {
        let (l_sep, _) =
            run_batch(&mut model, &batch, (1.0, 0.0), &mut opt_t, &mut opt_o).unwrap();
        last = l_sep;
    }
    assert!(last < 0.02, "separation loss stalled at {last}");
}

#[test]
fn identical_seeds_give_bitwise_identical_updates() {
    let run = || -> Vec<u32> {
        let mut model = tiny_model();
        let batch = crafted_batch(&model, 9);
        let mut opt_t = Adam::with_weight_decay(1e-4, 1e-4);
        let mut opt_o = Adam::new(1e-4);
        for _ in 0..5 {
            run_batch(&mut model, &batch, (1.0, 0.1), &mut opt_t, &mut opt_o).unwrap();
        }
        model
            .params
            .iter()
            .flat_map(|p| p.value.data.iter().map(|x| x.to_bits()))
            .collect()
    };
    assert_eq!(run(), run());
}

#[test]
fn contrastive_term_changes_the_update_only_when_weighted() {
    let run = |w: f32| -> Vec<u32> {
        let mut model = tiny_model();
        let batch = crafted_batch(&model, 9);
        let mut opt_t = Adam::with_weight_decay(1e-4, 1e-4);
        let mut opt_o = Adam::new(1e-4);
        run_batch(&mut model, &batch, (1.0, w), &mut opt_t, &mut opt_o).unwrap();
        model
            .params
            .iter()
            .flat_map(|p| p.value.data.iter().map(|x| x.to_bits()))
            .collect()
    };
    assert_eq!(run(0.0), run(0.0));
    assert_ne!(run(0.0), run(0.1));
}

#[test]
fn diverged_batches_report_numeric_failure() {
    let mut model = tiny_model();
    let mut batch = crafted_batch(&model, 3);
    batch[0].feats[0] = f32::NAN;
    let mut opt_t = Adam::new(1e-4);
    let mut opt_o = Adam::new(1e-4);
    let err = run_batch(&mut model, &batch, (1.0, 0.0), &mut opt_t, &mut opt_o).unwrap_err();
    assert_eq!(err.exit_code(), 3);
}
