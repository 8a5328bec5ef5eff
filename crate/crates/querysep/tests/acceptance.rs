//! Acceptance checks for the whole separation stack, one test per
//! delivered capability. The harness output gives one pass/fail line per
//! check. Tests prefixed `artifact_` read trained checkpoints and reports
//! under `runs/` at the workspace root; `scripts/reproduce.sh` rebuilds
//! those from scratch.

use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::Instant;

use querysep::autodiff::{check_gradients, op_gradient_suite, weighted_mean, Tape};
use querysep::bss::{bss_eval, bss_eval_naive};
use querysep::dsp::{unwarp_log_freq, warp_log_freq, StftPlan, FRAMES};
use querysep::eval::{evaluate_split, inspect_split, read_report_medians};
use querysep::io::checkpoint;
use querysep::model::{Model, ModelConfig};
use querysep::rng::{normal, rng_for, uniform};
use querysep::synth::{generate_corpus, render_clip, Corpus, CorpusConfig, Split};
use querysep::train::{train, TrainConfig};

static CORPUS_LOCK: Mutex<()> = Mutex::new(());

fn repo_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..").canonicalize().unwrap()
}

fn artifact(rel: &str) -> PathBuf {
    let p = repo_root().join(rel);
    assert!(
        p.exists(),
        "missing artifact {rel}; run scripts/reproduce.sh to regenerate it"
    );
    p
}

/// Corpora are regenerable from their seed, so a missing one is rebuilt
/// in place rather than failing the run.
fn ensure_corpus(rel: &str, classes: usize) -> Corpus {
    let _guard = CORPUS_LOCK.lock().unwrap();
    let root = repo_root().join(rel);
    if root.join("manifest.tsv").exists() {
        return Corpus::load(&root).unwrap();
    }
    let cfg = CorpusConfig { classes, ..CorpusConfig::default() };
    generate_corpus(&cfg, &root).unwrap()
}

fn temp_dir(tag: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("querysep_accept_{tag}_{}", std::process::id()));
    if dir.exists() {
        std::fs::remove_dir_all(&dir).unwrap();
    }
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

fn rel_l2(a: &[f32], b: &[f32]) -> f64 {
    let num: f64 = a.iter().zip(b).map(|(&x, &y)| ((x - y) as f64).powi(2)).sum();
    let den: f64 = a.iter().map(|&x| (x as f64).powi(2)).sum();
    (num / den.max(1e-300)).sqrt()
}

#[test]
fn gradient_suite_matches_finite_differences_within_budget() {
    let start = Instant::now();

    for entry in op_gradient_suite() {
        let r = &entry.report;
        assert!(
            r.max_rel_err < entry.tol && r.max_abs_diff < entry.tol.max(1e-6) * 10.0,
            "{}: rel {:.3e} abs {:.3e} tol {:.1e}",
            entry.name,
            r.max_rel_err,
            r.max_abs_diff,
            entry.tol
        );
    }

    let composed = check_gradients(
        &[&[1, 6, 6], &[2, 1, 3, 3], &[2], &[8, 4], &[4], &[4]],
        77,
        |t, v| {
            let y = t.conv2d(v[0], v[1], v[2], 2, 1);
            let a = t.leaky_relu(y, 0.2);
            let flat = t.reshape(a, &[2, 9]);
            let ft = t.transpose(flat);
            let gram = t.matmul(flat, ft);
            let w = t.softmax(gram);
            let mixed = t.matmul(w, flat);
            let wide = t.reshape(mixed, &[1, 18]);
            let half = t.slice_cols(wide, 2, 8);
            let proj = t.matmul(half, v[3]);
            let nrm = t.layer_norm(proj, v[4], v[5]);
            let s = t.sigmoid(nrm);
            weighted_mean(t, s)
        },
    );
    assert!(
        composed.max_rel_err < 1e-3,
        "composed chain rel err {:.3e}",
        composed.max_rel_err
    );

    let elapsed = start.elapsed();
    assert!(elapsed.as_secs() < 120, "gradient suite took {elapsed:?}, budget 120 s");
}

#[test]
fn spectrogram_mask_and_warp_identities_hold() {
    let plan = StftPlan::new();
    for i in 0..10u64 {
        let clip = render_clip((i % 8) as usize, 1000 + i);
        let spec = plan.stft(&clip);
        let back = plan.istft(&spec, clip.len());
        let round = rel_l2(&clip, &back);
        assert!(round < 1e-6, "clip {i}: inverse error {round:.3e}");

        let other = render_clip(((i + 3) % 8) as usize, 2000 + i);
        let mix: Vec<f32> = clip.iter().zip(&other).map(|(&x, &y)| x + y).collect();
        let src_mag = spec.magnitude();
        let mix_mag = plan.stft(&mix).magnitude();
        let mask = querysep::dsp::ratio_mask(&src_mag, &mix_mag);
        let mut checked = 0usize;
        for ((&s, &m), &k) in src_mag.iter().zip(&mix_mag).zip(&mask) {
            if m <= 1e-4 {
                continue;
            }
            let expected = s.min(m) as f64;
            let got = (k * m) as f64;
            assert!(
                (got - expected).abs() <= 1e-3 * expected + 1e-7,
                "clip {i}: mask identity broke at src {s} mix {m}: {got} vs {expected}"
            );
            checked += 1;
        }
        assert!(checked > 10_000, "clip {i}: too few energetic bins ({checked})");
    }

    let mut mag = vec![0.0f32; querysep::dsp::FREQ_BINS * FRAMES];
    for b in 0..querysep::dsp::FREQ_BINS {
        let f = b as f32 / querysep::dsp::FREQ_BINS as f32;
        let v = 1.0 + (6.0 * f).sin() * 0.4 + (-((f - 0.3) * 8.0).powi(2)).exp();
        for t in 0..FRAMES {
            mag[b * FRAMES + t] = v * (1.0 + 0.1 * (t as f32 / FRAMES as f32));
        }
    }
    let warped = warp_log_freq(&mag, FRAMES);
    let unwarped = unwarp_log_freq(&warped, FRAMES);
    let warp_err = rel_l2(&mag, &unwarped);
    assert!(warp_err < 0.05, "smooth-spectrum warp round trip error {warp_err:.3e}");
}

#[test]
fn mask_predictor_honors_shapes_bounds_and_permutation() {
    let base = ModelConfig {
        queries: 3,
        channels: 32,
        mask_channels: 8,
        heads: 4,
        base: 4,
        input: 32,
        motion_len: 4,
        ..ModelConfig::default()
    };

    let seeded = |cfg: &ModelConfig, seed: u64, scale: f32| {
        let mut rng = rng_for(seed, "accept/model-inputs");
        let feats: Vec<f32> = (0..cfg.input * cfg.input)
            .map(|_| uniform(&mut rng, 0.0, 3.0) as f32 * scale)
            .collect();
        let motion: Vec<f32> = (0..2 * cfg.motion_len * cfg.channels)
            .map(|_| uniform(&mut rng, -1.0, 1.0) as f32)
            .collect();
        let objs: Vec<Vec<f32>> = (0..2)
            .map(|_| (0..cfg.channels).map(|_| uniform(&mut rng, -1.0, 1.0) as f32).collect())
            .collect();
        (feats, motion, objs)
    };

    for depth in [3, 4, 5] {
        let cfg = ModelConfig { depth, ..base.clone() };
        let model = Model::<f64>::new(cfg.clone(), 20 + depth as u64).unwrap();
        let (feats, motion, objs) = seeded(&cfg, depth as u64, 333.0);
        let naming = vec![(0, objs[0].clone()), (2, objs[1].clone())];
        let mut tape = Tape::new();
        let staged = model.stage(&mut tape);
        let out = model.forward(&mut tape, &staged, &feats, &motion, &naming);
        let masks = tape.val(out.masks);
        assert_eq!(masks.shape, [cfg.queries, cfg.input * cfg.input], "depth {depth}");
        assert!(
            masks.data.iter().all(|&v| v > 0.0 && v < 1.0 && v.is_finite()),
            "depth {depth}: masks out of (0,1)"
        );
        assert_eq!(
            tape.val(out.eps_a).shape,
            [cfg.mask_channels, cfg.input * cfg.input],
            "depth {depth}"
        );
        assert!(tape.val(out.eps_q).data.iter().all(|v| v.is_finite()), "depth {depth}");
    }

    let cfg = base.clone();
    let mut model = Model::<f64>::new(cfg.clone(), 31).unwrap();
    let (feats, motion, objs) = seeded(&cfg, 5, 1.0);

    let run = |model: &Model<f64>, naming: &[(usize, Vec<f32>)]| -> Vec<f64> {
        let mut tape = Tape::new();
        let staged = model.stage(&mut tape);
        let out = model.forward(&mut tape, &staged, &feats, &motion, naming);
        tape.val(out.masks).data.clone()
    };

    let before = run(&model, &[(0, objs[0].clone()), (1, objs[1].clone())]);

    let perm = [2usize, 1, 0];
    let id = model.params.by_name("query.bank").unwrap();
    let bank = &mut model.params.get_mut(id).value;
    let c = cfg.channels;
    let orig = bank.data.clone();
    for (new_row, &old_row) in perm.iter().enumerate() {
        bank.data[new_row * c..(new_row + 1) * c]
            .copy_from_slice(&orig[old_row * c..(old_row + 1) * c]);
    }
    let after = run(&model, &[(2, objs[0].clone()), (1, objs[1].clone())]);

    let p = cfg.input * cfg.input;
    for (new_row, &old_row) in perm.iter().enumerate() {
        for t in 0..p {
            let a = before[old_row * p + t];
            let b = after[new_row * p + t];
            assert!(
                (a - b).abs() < 1e-6,
                "permuting query rows moved mask content: row {old_row}->{new_row} cell {t}"
            );
        }
    }
}

#[test]
fn projection_metrics_match_dense_solver_and_closed_forms() {
    let mut rng = rng_for(40, "accept/bss");
    let n = 4096;
    let a: Vec<f64> = (0..n).map(|_| normal(&mut rng)).collect();
    let b: Vec<f64> = (0..n).map(|_| normal(&mut rng)).collect();
    let noise: Vec<f64> = (0..n).map(|_| normal(&mut rng)).collect();
    let est: Vec<f64> = (0..n).map(|i| a[i] + 0.4 * b[i] + 0.2 * noise[i]).collect();
    let refs: [&[f64]; 2] = [&a, &b];

    for filter_len in [1, 8, 32] {
        let fast = bss_eval(&est, &refs, 0, filter_len);
        let slow = bss_eval_naive(&est, &refs, 0, filter_len);
        for (name, x, y) in [
            ("SDR", fast.sdr, slow.sdr),
            ("SIR", fast.sir, slow.sir),
            ("SAR", fast.sar, slow.sar),
        ] {
            assert!(
                (x - y).abs() < 1e-6,
                "L={filter_len} {name}: fast {x:.9} vs dense {y:.9}"
            );
        }
    }

    let mut s0 = vec![0.0f64; n];
    let mut s1 = vec![0.0f64; n];
    let mut orth = vec![0.0f64; n];
    for i in 0..n / 4 {
        s0[i] = normal(&mut rng);
        s1[n / 4 + i] = normal(&mut rng);
        orth[n / 2 + i] = normal(&mut rng);
    }
    let e0: Vec<f64> = s0.iter().map(|&x| x / n0(&s0)).collect();
    let e1: Vec<f64> = s1.iter().map(|&x| x / n0(&s1)).collect();
    let en: Vec<f64> = orth.iter().map(|&x| x / n0(&orth)).collect();
    let drefs: [&[f64]; 2] = [&e0, &e1];
    let cap = 100.0 - 1e-9;

    let scores = bss_eval(&e0, &drefs, 0, 1);
    for (name, v) in [("SDR", scores.sdr), ("SIR", scores.sir), ("SAR", scores.sar)] {
        assert!(v >= cap, "self estimate: {name} should hit the cap, got {v:.3}");
    }

    let scaled: Vec<f64> = e0.iter().map(|&x| 0.3 * x).collect();
    let scores = bss_eval(&scaled, &drefs, 0, 1);
    for (name, v) in [("SDR", scores.sdr), ("SIR", scores.sir), ("SAR", scores.sar)] {
        assert!(v >= cap, "scaled self: {name} should hit the cap, got {v:.3}");
    }

    let mixed: Vec<f64> = (0..n).map(|i| e0[i] + 0.5 * e1[i]).collect();
    let scores = bss_eval(&mixed, &drefs, 0, 1);
    let want = 10.0 * (1.0 / 0.25f64).log10();
    assert!((scores.sdr - want).abs() < 1e-6, "SDR {:.9} want {want:.9}", scores.sdr);
    assert!((scores.sir - want).abs() < 1e-6, "SIR {:.9} want {want:.9}", scores.sir);
    assert!(scores.sar >= cap, "SAR should hit the cap, got {:.3}", scores.sar);

    let artif: Vec<f64> = (0..n).map(|i| e0[i] + 0.1 * en[i]).collect();
    let scores = bss_eval(&artif, &drefs, 0, 1);
    let want = 10.0 * (1.0 / 0.01f64).log10();
    assert!((scores.sdr - want).abs() < 1e-6, "SDR {:.9} want {want:.9}", scores.sdr);
    assert!((scores.sar - want).abs() < 1e-6, "SAR {:.9} want {want:.9}", scores.sar);
    assert!(scores.sir >= cap, "SIR should hit the cap, got {:.3}", scores.sir);

    let mut last = f64::INFINITY;
    for level in 1..=10 {
        let sigma = level as f64 / 10.0;
        let noisy: Vec<f64> = (0..n).map(|i| a[i] + sigma * noise[i]).collect();
        let s = bss_eval(&noisy, &refs, 0, 8);
        assert!(
            s.sdr < last,
            "SDR must fall as noise grows: sigma {sigma} gave {:.3} after {last:.3}",
            s.sdr
        );
        last = s.sdr;
    }
}

fn n0(xs: &[f64]) -> f64 {
    xs.iter().map(|&x| x * x).sum::<f64>().sqrt()
}

#[test]
fn artifact_trained_model_beats_mixture_and_closes_oracle_gap() {
    let corpus = ensure_corpus("runs/corpus/main", 8);
    let ckpt = artifact("runs/main/best.ckpt");
    let (model, extra, _) = checkpoint::load(&ckpt).unwrap();
    let mut cfg = TrainConfig::desk();
    cfg.apply_kv(&extra).ok();

    let report = evaluate_split(&model, &corpus, Split::Test, cfg.k, cfg.seed, true, 0).unwrap();
    let med = |v: &str| report.median(v).unwrap();
    let (model_m, mix_m, oracle_m) = (med("model"), med("mixture"), med("oracle"));
    println!(
        "test medians: model {:.3} dB, mixture {:.3} dB, oracle {:.3} dB",
        model_m.sdr, mix_m.sdr, oracle_m.sdr
    );

    assert!(
        model_m.sdr > mix_m.sdr,
        "model median {:.3} dB does not beat mixture {:.3} dB",
        model_m.sdr,
        mix_m.sdr
    );
    let gain = model_m.sdr - mix_m.sdr;
    let oracle_gain = oracle_m.sdr - mix_m.sdr;
    assert!(
        gain >= 0.5 * oracle_gain,
        "model gain {gain:.3} dB is under half the oracle gain {oracle_gain:.3} dB"
    );

    let again = evaluate_split(&model, &corpus, Split::Test, cfg.k, cfg.seed, false, 8).unwrap();
    let once = evaluate_split(&model, &corpus, Split::Test, cfg.k, cfg.seed, false, 8).unwrap();
    let d = (again.median("model").unwrap().sdr - once.median("model").unwrap().sdr).abs();
    assert!(d < 0.01, "repeated evaluation drifted by {d:.6} dB");
}

#[test]
fn artifact_same_seed_training_reproduces_bit_for_bit() {
    let out = temp_dir("retrain");
    let corpus_cfg = CorpusConfig { classes: 2, clips_per_class: 10, ..CorpusConfig::default() };
    generate_corpus(&corpus_cfg, &out.join("corpus")).unwrap();
    let corpus = Corpus::load(&out.join("corpus")).unwrap();

    let model_cfg = ModelConfig {
        queries: 2,
        mask_channels: 8,
        base: 4,
        ..ModelConfig::default()
    };
    let cfg = TrainConfig {
        epochs: 2,
        batch: 2,
        drop_transformer: vec![1],
        drop_other: vec![1],
        ..TrainConfig::desk()
    };

    let first = train(&corpus, model_cfg.clone(), &cfg, &out.join("a")).unwrap();
    let second = train(&corpus, model_cfg, &cfg, &out.join("b")).unwrap();

    let sdr_gap = (first.best_val_sdr - second.best_val_sdr).abs();
    assert!(sdr_gap < 0.01, "same-seed reruns differ by {sdr_gap:.6} dB");

    let a = std::fs::read(&first.best_path).unwrap();
    let b = std::fs::read(&second.best_path).unwrap();
    assert!(a == b, "best checkpoints differ between same-seed runs");
    let a = std::fs::read(&first.final_path).unwrap();
    let b = std::fs::read(&second.final_path).unwrap();
    assert!(a == b, "final checkpoints differ between same-seed runs");

    std::fs::remove_dir_all(&out).ok();
}

#[test]
fn artifact_scrambled_naming_hurts_and_deaf_decoder_does_not_win() {
    let table = artifact("runs/ablate/ablate.tsv");
    let rows = querysep::io::read_tsv(
        &table,
        &["variant", "median_sdr", "median_sir", "median_sar", "flags"],
    )
    .unwrap();

    let sdr = |name: &str| -> f64 {
        rows.iter()
            .find(|r| r[0] == name)
            .unwrap_or_else(|| panic!("variant {name} missing from ablate.tsv"))[1]
            .parse()
            .unwrap()
    };
    let (visual, random, self_audio) = (sdr("visual"), sdr("random"), sdr("self_audio"));
    println!("ablation medians: visual {visual:.3}, random {random:.3}, self_audio {self_audio:.3}");

    assert!(
        random < visual,
        "random naming ({random:.3} dB) should fall strictly below visual ({visual:.3} dB)"
    );
    assert!(
        self_audio <= visual,
        "audio-only decoding ({self_audio:.3} dB) should not beat the motion-aware decoder ({visual:.3} dB)"
    );
}

#[test]
fn artifact_prompt_tuning_freezes_backbone_and_improves_new_class() {
    let pre = artifact("runs/holdout/best.ckpt");
    let post = artifact("runs/prompt/prompt.ckpt");
    let (pre_m, _, _) = checkpoint::load(&pre).unwrap();
    let (post_m, _, _) = checkpoint::load(&post).unwrap();

    let c = post_m.cfg.channels;
    for p in pre_m.params.iter() {
        let id = post_m.params.by_name(&p.name).unwrap_or_else(|| panic!("{} missing", p.name));
        let q = &post_m.params.get(id).value;
        if p.name == "query.bank" {
            assert_eq!(q.shape[0], p.value.shape[0] + 1, "prompt row not appended");
            for (i, (&x, &y)) in p.value.data.iter().zip(&q.data).enumerate() {
                assert!(
                    x.to_bits() == y.to_bits(),
                    "frozen query row changed at flat index {i}"
                );
            }
        } else {
            assert_eq!(p.value.shape, q.shape, "{} changed shape", p.name);
            for (i, (&x, &y)) in p.value.data.iter().zip(&q.data).enumerate() {
                assert!(
                    x.to_bits() == y.to_bits(),
                    "{} changed at flat index {i} despite the freeze",
                    p.name
                );
            }
        }
    }

    let rows = post_m.cfg.query_rows();
    assert_eq!(
        post_m.params.trainable_scalars(),
        c * rows,
        "trainable scalars should be exactly the query bank ({c} x {rows})"
    );

    let report = artifact("runs/prompt/finetune.tsv");
    let rows = querysep::io::read_tsv(&report, &["stat", "class", "sdr", "variant"]).unwrap();
    let med = |variant: &str| -> f64 {
        rows.iter()
            .find(|r| r[0] == "median" && r[3] == variant)
            .unwrap_or_else(|| panic!("median row for {variant} missing"))[2]
            .parse()
            .unwrap()
    };
    let (before, after) = (med("before"), med("after"));
    println!("new-class median SDR: before {before:.3} dB, after {after:.3} dB");
    assert!(
        after > before,
        "prompt tuning did not improve the held-out class: {before:.3} -> {after:.3} dB"
    );
}

#[test]
fn artifact_query_embeddings_cluster_by_class() {
    let corpus = ensure_corpus("runs/corpus/main", 8);
    let ckpt = artifact("runs/main/best.ckpt");
    let (model, extra, _) = checkpoint::load(&ckpt).unwrap();
    let mut cfg = TrainConfig::desk();
    cfg.apply_kv(&extra).ok();

    let samples = inspect_split(&model, &corpus, Split::Test, cfg.k, cfg.seed, 0).unwrap();
    assert!(samples.len() >= 16, "too few samples ({}) to judge clustering", samples.len());

    let cosine = |a: &[f32], b: &[f32]| -> f64 {
        let dot: f64 = a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum();
        let na: f64 = a.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
        let nb: f64 = b.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
        dot / (na * nb).max(1e-12)
    };

    let (mut intra, mut inter) = ((0.0, 0usize), (0.0, 0usize));
    for i in 0..samples.len() {
        for j in i + 1..samples.len() {
            let c = cosine(&samples[i].eps_q, &samples[j].eps_q);
            if samples[i].class_id == samples[j].class_id {
                intra = (intra.0 + c, intra.1 + 1);
            } else {
                inter = (inter.0 + c, inter.1 + 1);
            }
        }
    }
    assert!(intra.1 > 0 && inter.1 > 0, "need both intra- and inter-class pairs");
    let gap = intra.0 / intra.1 as f64 - inter.0 / inter.1 as f64;
    println!(
        "cosine similarity: intra {:.4}, inter {:.4}, gap {gap:.4}",
        intra.0 / intra.1 as f64,
        inter.0 / inter.1 as f64
    );
    assert!(gap >= 0.1, "class clustering gap {gap:.4} is below 0.1");
}

#[test]
fn artifact_shipped_scores_and_checkpoints_reproduce() {
    let corpus = ensure_corpus("runs/corpus/main", 8);
    let ckpt = artifact("runs/main/best.ckpt");
    let golden = repo_root().join("crates/querysep/tests/data/golden_medians.tsv");
    assert!(
        golden.exists(),
        "missing tests/data/golden_medians.tsv; copy the medians from runs/main/report.tsv"
    );

    let (model, extra, state) = checkpoint::load(&ckpt).unwrap();
    let mut cfg = TrainConfig::desk();
    cfg.apply_kv(&extra).ok();

    let report = evaluate_split(&model, &corpus, Split::Test, cfg.k, cfg.seed, true, 0).unwrap();
    let want = read_report_medians(&golden).unwrap();
    assert!(!want.is_empty(), "golden medians file has no median rows");
    for (variant, scores) in &want {
        let got = report.median(variant).unwrap_or_else(|| panic!("variant {variant} missing"));
        let d = (got.sdr - scores.sdr).abs();
        println!("{variant}: fresh {:.4} dB vs golden {:.4} dB", got.sdr, scores.sdr);
        assert!(
            d < 0.1,
            "{variant} median SDR drifted {d:.4} dB from the golden value"
        );
    }

    let out = temp_dir("roundtrip");
    let copy = out.join("copy.ckpt");
    checkpoint::save(&copy, &model, &extra, state.as_ref()).unwrap();
    let original = std::fs::read(&ckpt).unwrap();
    let rewritten = std::fs::read(&copy).unwrap();
    assert!(original == rewritten, "checkpoint did not round trip byte for byte");
    std::fs::remove_dir_all(&out).ok();
}
