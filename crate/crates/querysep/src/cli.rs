//! Subcommand dispatch for the `querysep` binary.
//!
//! Flags are `--name value` pairs (repeatable where noted). Every command
//! takes an optional `--config` key=value file whose `model.*`, `train.*`,
//! and `corpus.*` entries override the built-in defaults; `--seed` then
//! overrides the seed from either source. Exit codes: 0 success, 1 I/O,
//! 2 bad usage or config, 3 numeric divergence.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use crate::dsp::{FRAMES, LOG_BINS, SAMPLE_RATE};
use crate::error::{Error, Result};
use crate::eval::{
    evaluate_split, inspect_split, pca_2d, separate, write_report, QuerySource,
};
use crate::io;
use crate::io::checkpoint;
use crate::model::ModelConfig;
use crate::synth::{
    activity_track, generate_corpus, motion_features, object_feature, Corpus, CorpusConfig, Split,
};
use crate::train::{self, AblateSpec, TrainConfig};
use crate::dsp::StftPlan;

const USAGE: &str =
    "usage: querysep <gen-corpus|train|separate|evaluate|finetune|ablate|inspect> [flags]";

/// Runs one subcommand; returns the process exit code.
pub fn run(args: Vec<String>) -> i32 {
    let Some(cmd) = args.first().map(String::as_str) else {
        eprintln!("{USAGE}");
        return 2;
    };
    let rest = &args[1..];
    let outcome = match cmd {
        "gen-corpus" => cmd_gen_corpus(rest),
        "train" => cmd_train(rest),
        "separate" => cmd_separate(rest),
        "evaluate" => cmd_evaluate(rest),
        "finetune" => cmd_finetune(rest),
        "ablate" => cmd_ablate(rest),
        "inspect" => cmd_inspect(rest),
        other => {
            eprintln!("unknown command `{other}`\n{USAGE}");
            return 2;
        }
    };
    match outcome {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("querysep {cmd}: {e}");
            e.exit_code()
        }
    }
}

struct Flags(HashMap<String, Vec<String>>);

impl Flags {
    fn parse(args: &[String], allowed: &[&str]) -> Result<Flags> {
        let mut map: HashMap<String, Vec<String>> = HashMap::new();
        let mut i = 0;
        while i < args.len() {
            let name = args[i]
                .strip_prefix("--")
                .ok_or_else(|| Error::Config(format!("expected a --flag, got `{}`", args[i])))?;
            if !allowed.contains(&name) {
                return Err(Error::Config(format!("unknown flag --{name}")));
            }
            let value = args
                .get(i + 1)
                .ok_or_else(|| Error::Config(format!("--{name} needs a value")))?;
            map.entry(name.to_string()).or_default().push(value.clone());
            i += 2;
        }
        Ok(Flags(map))
    }

    fn one(&self, name: &str) -> Result<Option<&str>> {
        match self.0.get(name).map(Vec::as_slice) {
            None => Ok(None),
            Some([v]) => Ok(Some(v)),
            Some(_) => Err(Error::Config(format!("--{name} given more than once"))),
        }
    }

    fn required(&self, name: &str) -> Result<&str> {
        self.one(name)?
            .ok_or_else(|| Error::Config(format!("--{name} is required")))
    }

    fn many(&self, name: &str) -> &[String] {
        self.0.get(name).map(Vec::as_slice).unwrap_or(&[])
    }

    fn seed(&self) -> Result<Option<u64>> {
        match self.one("seed")? {
            None => Ok(None),
            Some(s) => s
                .parse()
                .map(Some)
                .map_err(|_| Error::Config(format!("bad --seed `{s}`"))),
        }
    }
}

/// Reads a config file into sorted pairs and checks every key belongs to a
/// known section.
fn read_config(path: &Path) -> Result<Vec<(String, String)>> {
    let map = io::read_kv(path)?;
    let mut pairs: Vec<(String, String)> = map.into_iter().collect();
    pairs.sort();
    for (key, _) in &pairs {
        if !["model.", "train.", "corpus."].iter().any(|p| key.starts_with(p)) {
            return Err(Error::Config(format!("{}: unknown section in key `{key}`", path.display())));
        }
    }
    Ok(pairs)
}

fn load_configs(flags: &Flags) -> Result<(ModelConfig, TrainConfig)> {
    let mut model = ModelConfig::default();
    let mut train = TrainConfig::desk();
    if let Some(path) = flags.one("config")? {
        let pairs = read_config(Path::new(path))?;
        model.apply_kv(&pairs)?;
        train.apply_kv(&pairs)?;
    }
    if let Some(seed) = flags.seed()? {
        train.seed = seed;
    }
    Ok((model, train))
}

fn apply_corpus_kv(cfg: &mut CorpusConfig, pairs: &[(String, String)]) -> Result<()> {
    for (key, value) in pairs {
        let Some(name) = key.strip_prefix("corpus.") else { continue };
        let bad = || Error::Config(format!("corpus.{name}: bad value `{value}`"));
        match name {
            "classes" => cfg.classes = value.parse().map_err(|_| bad())?,
            "clips_per_class" => cfg.clips_per_class = value.parse().map_err(|_| bad())?,
            "seed" => cfg.seed = value.parse().map_err(|_| bad())?,
            "train_frac" => cfg.train_frac = value.parse().map_err(|_| bad())?,
            "val_frac" => cfg.val_frac = value.parse().map_err(|_| bad())?,
            _ => return Err(Error::Config(format!("unknown key corpus.{name}"))),
        }
    }
    Ok(())
}

fn cmd_gen_corpus(args: &[String]) -> Result<()> {
    let flags = Flags::parse(args, &["out", "config", "seed"])?;
    let out = PathBuf::from(flags.required("out")?);
    let mut cfg = CorpusConfig::default();
    if let Some(path) = flags.one("config")? {
        apply_corpus_kv(&mut cfg, &read_config(Path::new(path))?)?;
    }
    if let Some(seed) = flags.seed()? {
        cfg.seed = seed;
    }
    let corpus = generate_corpus(&cfg, &out)?;
    println!(
        "wrote {} clips ({} classes) under {}",
        corpus.entries.len(),
        cfg.classes,
        out.display()
    );
    Ok(())
}

fn cmd_train(args: &[String]) -> Result<()> {
    let flags = Flags::parse(args, &["corpus", "out", "config", "seed"])?;
    let corpus = Corpus::load(Path::new(flags.required("corpus")?))?;
    let out = PathBuf::from(flags.required("out")?);
    let (model_cfg, train_cfg) = load_configs(&flags)?;
    let outcome = train::train(&corpus, model_cfg, &train_cfg, &out)?;
    println!(
        "trained {} epochs ({} steps); best val SDR {:.3} dB at epoch {}",
        outcome.epochs, outcome.steps, outcome.best_val_sdr, outcome.best_epoch
    );
    println!("best: {}", outcome.best_path.display());
    println!("final: {}", outcome.final_path.display());
    println!("metrics: {}", outcome.metrics_path.display());
    Ok(())
}

fn parse_class(s: &str) -> Result<usize> {
    s.parse().map_err(|_| Error::Config(format!("bad class id `{s}`")))
}

fn cmd_separate(args: &[String]) -> Result<()> {
    let flags = Flags::parse(args, &["checkpoint", "mix", "object-class", "out"])?;
    let (model, _, _) = checkpoint::load(Path::new(flags.required("checkpoint")?))?;
    let (mix, rate) = io::read_wav(Path::new(flags.required("mix")?))?;
    if rate != SAMPLE_RATE {
        return Err(Error::Audio(format!("expected {SAMPLE_RATE} Hz input, got {rate}")));
    }
    let classes: Vec<usize> = flags
        .many("object-class")
        .iter()
        .map(|s| parse_class(s))
        .collect::<Result<_>>()?;
    if classes.is_empty() {
        return Err(Error::Config("at least one --object-class is required".into()));
    }
    for &c in &classes {
        if c >= model.cfg.query_rows() {
            return Err(Error::Config(format!(
                "class {c} has no query row (model has {})",
                model.cfg.query_rows()
            )));
        }
    }
    let out = PathBuf::from(flags.required("out")?);
    std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;

    // No per-source reference streams exist at inference time, so the
    // conditioning motion comes from the mixture itself and the object
    // feature is the class exemplar.
    let plan = StftPlan::new();
    let mix_motion = motion_features(&activity_track(&plan, &mix));
    let sources: Vec<QuerySource> = classes
        .iter()
        .map(|&c| QuerySource {
            query: c,
            object: object_feature(c, 0),
            motion: mix_motion.clone(),
        })
        .collect();

    let (waves, masks) = separate(&model, &plan, &mix, &sources);
    for (i, &c) in classes.iter().enumerate() {
        let wav_path = out.join(format!("source_{c}.wav"));
        io::write_wav(&wav_path, &waves[i], SAMPLE_RATE)?;
        let pgm_path = out.join(format!("mask_{c}.pgm"));
        let csv_path = out.join(format!("mask_{c}.csv"));
        write_mask_exports(&pgm_path, &csv_path, &masks[i])?;
        println!(
            "class {c}: {} {} {}",
            wav_path.display(),
            pgm_path.display(),
            csv_path.display()
        );
    }
    Ok(())
}

/// Long-format mask CSV plus the matching PGM. The six-decimal value printed
/// to the CSV is authoritative: the PGM pixel is that decimal, scaled by 255
/// and rounded, so the two files agree under any reader.
fn write_mask_exports(pgm_path: &Path, csv_path: &Path, mask: &[f32]) -> Result<()> {
    let mut text = String::from("bin,frame,value\n");
    let mut pixels = Vec::with_capacity(mask.len());
    for bin in 0..LOG_BINS {
        for frame in 0..FRAMES {
            let printed = format!("{:.6}", mask[bin * FRAMES + frame]);
            pixels.push(io::mask_byte(printed.parse::<f64>().unwrap()));
            text.push_str(&format!("{bin},{frame},{printed}\n"));
        }
    }
    io::write_pgm_bytes(pgm_path, FRAMES, LOG_BINS, &pixels)?;
    io::write_replacing(csv_path, text.as_bytes())
}

fn cmd_evaluate(args: &[String]) -> Result<()> {
    let flags = Flags::parse(args, &["checkpoint", "corpus", "out", "split", "seed", "limit"])?;
    let (model, extra, _) = checkpoint::load(Path::new(flags.required("checkpoint")?))?;
    let corpus = Corpus::load(Path::new(flags.required("corpus")?))?;
    let out = PathBuf::from(flags.required("out")?);
    let split = match flags.one("split")? {
        None => Split::Test,
        Some(s) => Split::parse(s).ok_or_else(|| Error::Config(format!("bad --split `{s}`")))?,
    };
    let mut cfg = TrainConfig::desk();
    cfg.apply_kv(&extra).ok();
    let seed = flags.seed()?.unwrap_or(cfg.seed);
    let limit = match flags.one("limit")? {
        None => 0,
        Some(s) => s.parse().map_err(|_| Error::Config(format!("bad --limit `{s}`")))?,
    };

    let report = evaluate_split(&model, &corpus, split, cfg.k, seed, true, limit)?;
    write_report(&out, &report)?;
    for variant in report.variants() {
        if let Some(m) = report.median(variant) {
            println!(
                "{variant}: median SDR {:.3} dB, SIR {:.3} dB, SAR {:.3} dB",
                m.sdr, m.sir, m.sar
            );
        }
    }
    println!("report: {}", out.display());
    Ok(())
}

fn cmd_finetune(args: &[String]) -> Result<()> {
    let flags =
        Flags::parse(args, &["checkpoint", "corpus", "new-class", "out", "steps", "config", "seed"])?;
    let (model, _, _) = checkpoint::load(Path::new(flags.required("checkpoint")?))?;
    let corpus = Corpus::load(Path::new(flags.required("corpus")?))?;
    let new_class = parse_class(flags.required("new-class")?)?;
    let out = PathBuf::from(flags.required("out")?);
    let steps = match flags.one("steps")? {
        None => 300,
        Some(s) => s.parse().map_err(|_| Error::Config(format!("bad --steps `{s}`")))?,
    };
    let (_, train_cfg) = load_configs(&flags)?;

    let outcome = train::finetune_prompt(model, &corpus, new_class, steps, &train_cfg, &out)?;
    println!(
        "class {new_class} median SDR: {:.3} dB before, {:.3} dB after {} steps",
        outcome.before, outcome.after, outcome.steps
    );
    println!("checkpoint: {}", outcome.ckpt_path.display());
    println!("report: {}", outcome.report_path.display());
    Ok(())
}

fn cmd_ablate(args: &[String]) -> Result<()> {
    let flags = Flags::parse(args, &["corpus", "out", "config", "variants", "seed"])?;
    let corpus = Corpus::load(Path::new(flags.required("corpus")?))?;
    let out = PathBuf::from(flags.required("out")?);
    let (model_cfg, train_cfg) = load_configs(&flags)?;
    let names = flags
        .one("variants")?
        .unwrap_or("visual,random,self_audio")
        .to_string();
    let variants: Vec<AblateSpec> = names
        .split(',')
        .map(|n| {
            AblateSpec::preset(n.trim())
                .ok_or_else(|| Error::Config(format!("unknown variant `{n}`")))
        })
        .collect::<Result<_>>()?;

    let path = train::ablate(&corpus, &model_cfg, &train_cfg, &variants, &out)?;
    println!("ablation table: {}", path.display());
    Ok(())
}

fn cmd_inspect(args: &[String]) -> Result<()> {
    let flags = Flags::parse(args, &["checkpoint", "corpus", "out", "split", "seed", "limit"])?;
    let (model, extra, _) = checkpoint::load(Path::new(flags.required("checkpoint")?))?;
    let corpus = Corpus::load(Path::new(flags.required("corpus")?))?;
    let out = PathBuf::from(flags.required("out")?);
    std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    let split = match flags.one("split")? {
        None => Split::Test,
        Some(s) => Split::parse(s).ok_or_else(|| Error::Config(format!("bad --split `{s}`")))?,
    };
    let mut cfg = TrainConfig::desk();
    cfg.apply_kv(&extra).ok();
    let seed = flags.seed()?.unwrap_or(cfg.seed);
    let limit = match flags.one("limit")? {
        None => 0,
        Some(s) => s.parse().map_err(|_| Error::Config(format!("bad --limit `{s}`")))?,
    };

    let samples = inspect_split(&model, &corpus, split, cfg.k, seed, limit)?;
    let embeddings: Vec<Vec<f32>> = samples.iter().map(|s| s.eps_q.clone()).collect();
    let coords = pca_2d(&embeddings);

    let pca_path = out.join("queries_pca.csv");
    let mut text = String::from("clip_id,class,x,y\n");
    for (s, (x, y)) in samples.iter().zip(&coords) {
        text.push_str(&format!("{},{},{x:.6},{y:.6}\n", s.clip_id, s.class_name));
    }
    io::write_replacing(&pca_path, text.as_bytes())?;

    let mut by_class: std::collections::BTreeMap<String, Vec<f32>> = Default::default();
    for s in &samples {
        by_class.entry(s.class_name.clone()).or_default().push(s.mask_mean);
    }
    let rows: Vec<Vec<String>> = by_class
        .iter()
        .map(|(class, xs)| {
            let n = xs.len() as f32;
            let mean = xs.iter().sum::<f32>() / n;
            let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f32>() / n;
            vec![
                class.clone(),
                xs.len().to_string(),
                format!("{mean:.6}"),
                format!("{:.6}", var.sqrt()),
            ]
        })
        .collect();
    let energy_path = out.join("mask_energy.tsv");
    io::write_tsv(&energy_path, &["class", "sources", "mean_mask", "std_mask"], &rows)?;

    println!("pca coords: {}", pca_path.display());
    println!("mask energy: {}", energy_path.display());
    Ok(())
}
