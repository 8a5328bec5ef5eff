//! The separation network: a convolutional U-Net over log-frequency
//! spectrograms feeding a query-based transformer decoder.
//!
//! The U-Net encoder produces a coarse feature map whose flattened cells act
//! as audio tokens; the decoder refines a bank of learned query vectors by
//! attending over motion tokens and those audio tokens; a small MLP turns
//! each refined query into a mask embedding whose dot product with the
//! full-resolution audio embedding map gives one sigmoid mask per query.
//! Queries are bound to sound sources by adding each source's object feature
//! to its query row before decoding.

mod blocks;

pub use blocks::{attention, feed_forward, linear, Stage};

use crate::autodiff::{ParamStore, Scalar, Staged, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::rng::{normal, rng_for, uniform};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Layout {
    /// One motion cross-attention layer, then three self + audio layers.
    MotionSelfAudio,
    /// Four identical layers carrying self, motion, and audio sublayers.
    SelfMotionAudio,
    /// Four layers where motion and audio cross-attention run in parallel.
    DualStream,
    /// Motion layer removed; three self + audio layers.
    SelfAudio,
}

impl Layout {
    pub fn as_str(self) -> &'static str {
        match self {
            Layout::MotionSelfAudio => "motion_self_audio",
            Layout::SelfMotionAudio => "self_motion_audio",
            Layout::DualStream => "dual_stream",
            Layout::SelfAudio => "self_audio",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "motion_self_audio" => Ok(Layout::MotionSelfAudio),
            "self_motion_audio" => Ok(Layout::SelfMotionAudio),
            "dual_stream" => Ok(Layout::DualStream),
            "self_audio" => Ok(Layout::SelfAudio),
            other => Err(Error::Config(format!("unknown decoder layout '{other}'"))),
        }
    }

    pub fn uses_motion(self) -> bool {
        !matches!(self, Layout::SelfAudio)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Assignment {
    /// Query index = class id, with that class's object feature added.
    Visual,
    /// Distinct query indices drawn uniformly per mixture.
    Random,
}

impl Assignment {
    pub fn as_str(self) -> &'static str {
        match self {
            Assignment::Visual => "visual",
            Assignment::Random => "random",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "visual" => Ok(Assignment::Visual),
            "random" => Ok(Assignment::Random),
            other => Err(Error::Config(format!("unknown assignment mode '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    /// Learned query count (before any appended prompts).
    pub queries: usize,
    /// Shared width of queries, object/motion features, and audio tokens.
    pub channels: usize,
    /// Mask-embedding width (channels of the full-resolution audio map).
    pub mask_channels: usize,
    pub heads: usize,
    /// Number of stride-2 encoder stages.
    pub depth: usize,
    /// Channels of the first encoder stage; doubles per stage.
    pub base: usize,
    /// Spectrogram side length (frequency bins = frames).
    pub input: usize,
    /// Motion tokens per source.
    pub motion_len: usize,
    pub layout: Layout,
    pub assignment: Assignment,
    /// Appended prompt rows (populated by fine-tuning).
    pub prompts: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            queries: 8,
            channels: 256,
            mask_channels: 32,
            heads: 8,
            depth: 5,
            base: 32,
            input: 256,
            motion_len: 64,
            layout: Layout::MotionSelfAudio,
            assignment: Assignment::Visual,
            prompts: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels % self.heads != 0 {
            return Err(Error::Config(format!(
                "channels {} not divisible by heads {}",
                self.channels, self.heads
            )));
        }
        if self.depth < 3 {
            return Err(Error::Config(format!("depth {} below minimum 3", self.depth)));
        }
        if self.input % (1 << self.depth) != 0 {
            return Err(Error::Config(format!(
                "input size {} not divisible by 2^depth {}",
                self.input,
                1 << self.depth
            )));
        }
        if self.queries == 0 {
            return Err(Error::Config("query count must be positive".into()));
        }
        Ok(())
    }

    /// Total query rows including prompts.
    pub fn query_rows(&self) -> usize {
        self.queries + self.prompts
    }

    /// Bottleneck grid side: input / 2^depth.
    pub fn grid(&self) -> usize {
        self.input >> self.depth
    }

    pub fn to_kv(&self) -> Vec<(String, String)> {
        let kv = |k: &str, v: String| (format!("model.{k}"), v);
        vec![
            kv("queries", self.queries.to_string()),
            kv("channels", self.channels.to_string()),
            kv("mask_channels", self.mask_channels.to_string()),
            kv("heads", self.heads.to_string()),
            kv("depth", self.depth.to_string()),
            kv("base", self.base.to_string()),
            kv("input", self.input.to_string()),
            kv("motion_len", self.motion_len.to_string()),
            kv("layout", self.layout.as_str().to_string()),
            kv("assignment", self.assignment.as_str().to_string()),
            kv("prompts", self.prompts.to_string()),
        ]
    }

    /// Applies `model.*` pairs on top of the current values.
    pub fn apply_kv(&mut self, pairs: &[(String, String)]) -> Result<()> {
        for (k, v) in pairs {
            let Some(key) = k.strip_prefix("model.") else { continue };
            let parse_usize = |v: &str| -> Result<usize> {
                v.parse::<usize>()
                    .map_err(|_| Error::Config(format!("{k}: expected integer, got '{v}'")))
            };
            match key {
                "queries" => self.queries = parse_usize(v)?,
                "channels" => self.channels = parse_usize(v)?,
                "mask_channels" => self.mask_channels = parse_usize(v)?,
                "heads" => self.heads = parse_usize(v)?,
                "depth" => self.depth = parse_usize(v)?,
                "base" => self.base = parse_usize(v)?,
                "input" => self.input = parse_usize(v)?,
                "motion_len" => self.motion_len = parse_usize(v)?,
                "layout" => self.layout = Layout::parse(v)?,
                "assignment" => self.assignment = Assignment::parse(v)?,
                "prompts" => self.prompts = parse_usize(v)?,
                other => return Err(Error::Config(format!("unknown model key '{other}'"))),
            }
        }
        self.validate()
    }
}

// ── Decoder layer plan ──────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Sub {
    SelfAttn,
    CrossMotion,
    CrossAudio,
    DualCross,
    Ffn,
}

fn layer_plan(layout: Layout) -> Vec<(String, Vec<Sub>)> {
    use Sub::*;
    match layout {
        Layout::MotionSelfAudio => {
            let mut plan = vec![("dec.motion".to_string(), vec![CrossMotion, Ffn])];
            for i in 0..3 {
                plan.push((format!("dec.audio{i}"), vec![SelfAttn, CrossAudio, Ffn]));
            }
            plan
        }
        Layout::SelfMotionAudio => (0..4)
            .map(|i| (format!("dec.layer{i}"), vec![SelfAttn, CrossMotion, CrossAudio, Ffn]))
            .collect(),
        Layout::DualStream => (0..4)
            .map(|i| (format!("dec.layer{i}"), vec![SelfAttn, DualCross, Ffn]))
            .collect(),
        Layout::SelfAudio => (0..3)
            .map(|i| (format!("dec.audio{i}"), vec![SelfAttn, CrossAudio, Ffn]))
            .collect(),
    }
}

fn sub_prefixes(layer: &str, sub: Sub) -> Vec<String> {
    match sub {
        Sub::SelfAttn => vec![format!("{layer}.self")],
        Sub::CrossMotion => vec![format!("{layer}.mcross")],
        Sub::CrossAudio => vec![format!("{layer}.across")],
        Sub::DualCross => vec![format!("{layer}.mcross"), format!("{layer}.across")],
        Sub::Ffn => vec![],
    }
}

// ── Model ───────────────────────────────────────────────────────────────────

pub struct Model<S: Scalar> {
    pub cfg: ModelConfig,
    pub params: ParamStore<S>,
}

/// Variables of interest from one forward pass.
pub struct Forward {
    /// Sigmoid masks, [query_rows, input*input].
    pub masks: Var,
    /// Pre-sigmoid mask logits, same shape.
    pub logits: Var,
    /// Decoded query embeddings, [query_rows, channels].
    pub eps_q: Var,
    /// Full-resolution audio embeddings, [mask_channels, input*input].
    pub eps_a: Var,
}

pub(crate) fn tensor_from_f32<S: Scalar>(shape: &[usize], data: &[f32]) -> Tensor<S> {
    assert_eq!(shape.iter().product::<usize>(), data.len());
    Tensor {
        shape: shape.to_vec(),
        data: data.iter().map(|&v| S::from_f64(v as f64)).collect(),
    }
}

impl<S: Scalar> Model<S> {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut params = ParamStore::new();
        let add_norm = |params: &mut ParamStore<S>, name: &str, shape: &[usize], sigma: f64| {
            let mut rng = rng_for(seed, &format!("init/{name}"));
            let n: usize = shape.iter().product();
            let data: Vec<S> = (0..n).map(|_| S::from_f64(normal(&mut rng) * sigma)).collect();
            params.add(name, Tensor { shape: shape.to_vec(), data }, true);
        };
        let add_zeros = |params: &mut ParamStore<S>, name: &str, shape: &[usize]| {
            params.add(name, Tensor::zeros(shape), true);
        };
        let add_ones = |params: &mut ParamStore<S>, name: &str, len: usize| {
            let data = vec![S::ONE; len];
            params.add(name, Tensor { shape: vec![len], data }, true);
        };
        let add_xavier = |params: &mut ParamStore<S>, name: &str, fin: usize, fout: usize| {
            let mut rng = rng_for(seed, &format!("init/{name}"));
            let limit = (6.0 / (fin + fout) as f64).sqrt();
            let data: Vec<S> = (0..fin * fout)
                .map(|_| S::from_f64(uniform(&mut rng, -limit, limit)))
                .collect();
            params.add(name, Tensor { shape: vec![fin, fout], data }, true);
        };
        let linear_pair =
            |params: &mut ParamStore<S>, prefix: &str, fin: usize, fout: usize| {
                add_xavier(params, &format!("{prefix}.w"), fin, fout);
                params.add(&format!("{prefix}.b"), Tensor::zeros(&[1, fout]), true);
            };
        let norm_pair = |params: &mut ParamStore<S>, prefix: &str, len: usize| {
            add_ones(params, &format!("{prefix}.g"), len);
            params.add(&format!("{prefix}.b"), Tensor::zeros(&[len]), true);
        };
        let attn_params = |params: &mut ParamStore<S>, prefix: &str, c: usize| {
            norm_pair(params, &format!("{prefix}.ln"), c);
            for part in ["q", "k", "v", "o"] {
                linear_pair(params, &format!("{prefix}.{part}"), c, c);
            }
        };

        let d = cfg.depth;
        let enc_ch: Vec<usize> = (0..d).map(|i| cfg.base << i).collect();

        // Encoder: stride-2 4x4 convs, channel-doubling, leaky-relu slope 0.2.
        let mut ci = 1;
        for (i, &co) in enc_ch.iter().enumerate() {
            let sigma = (2.0 / (1.04 * (ci * 16) as f64)).sqrt();
            add_norm(&mut params, &format!("unet.enc{i}.w"), &[co, ci, 4, 4], sigma);
            add_zeros(&mut params, &format!("unet.enc{i}.b"), &[co]);
            ci = co;
        }
        let top = enc_ch[d - 1];
        let sigma = (2.0 / (1.04 * top as f64)).sqrt();
        add_norm(&mut params, "unet.bott.w", &[cfg.channels, top, 1, 1], sigma);
        add_zeros(&mut params, "unet.bott.b", &[cfg.channels]);

        for j in 0..d {
            let tci = if j == 0 { enc_ch[d - 1] } else { 2 * enc_ch[d - 1 - j] };
            let tco = enc_ch[(d as isize - 2 - j as isize).max(0) as usize];
            // Stride-2 transpose convs cover each output pixel with a 2x2
            // slice of the kernel, so the effective fan-in is ci*4.
            let sigma = (2.0 / (1.04 * (tci * 4) as f64)).sqrt();
            add_norm(&mut params, &format!("unet.dec{j}.w"), &[tci, tco, 4, 4], sigma);
            add_zeros(&mut params, &format!("unet.dec{j}.b"), &[tco]);
        }
        let sigma = (2.0 / (1.04 * cfg.base as f64)).sqrt();
        add_norm(&mut params, "unet.out.w", &[cfg.mask_channels, cfg.base, 1, 1], sigma);
        add_zeros(&mut params, "unet.out.b", &[cfg.mask_channels]);

        add_norm(&mut params, "query.bank", &[cfg.query_rows(), cfg.channels], 0.02);
        let grid = cfg.grid();
        add_norm(&mut params, "pos.audio", &[grid * grid, cfg.channels], 0.02);
        if cfg.layout.uses_motion() {
            add_norm(&mut params, "pos.motion", &[cfg.motion_len, cfg.channels], 0.02);
        }

        for (layer, subs) in layer_plan(cfg.layout) {
            for &sub in &subs {
                match sub {
                    Sub::Ffn => {
                        norm_pair(&mut params, &format!("{layer}.ffn.ln"), cfg.channels);
                        linear_pair(&mut params, &format!("{layer}.ffn1"), cfg.channels, 4 * cfg.channels);
                        linear_pair(&mut params, &format!("{layer}.ffn2"), 4 * cfg.channels, cfg.channels);
                    }
                    Sub::DualCross => {
                        norm_pair(&mut params, &format!("{layer}.dual.ln"), cfg.channels);
                        for prefix in sub_prefixes(&layer, sub) {
                            for part in ["q", "k", "v", "o"] {
                                linear_pair(&mut params, &format!("{prefix}.{part}"), cfg.channels, cfg.channels);
                            }
                        }
                    }
                    _ => {
                        for prefix in sub_prefixes(&layer, sub) {
                            attn_params(&mut params, &prefix, cfg.channels);
                        }
                    }
                }
            }
        }
        norm_pair(&mut params, "dec.final_ln", cfg.channels);

        linear_pair(&mut params, "maskhead.fc1", cfg.channels, cfg.channels);
        linear_pair(&mut params, "maskhead.fc2", cfg.channels, cfg.channels);
        linear_pair(&mut params, "maskhead.fc3", cfg.channels, cfg.mask_channels);

        linear_pair(&mut params, "contrast.proj", cfg.channels, cfg.mask_channels);

        Ok(Model { cfg, params })
    }

    pub fn stage(&self, tape: &mut Tape<S>) -> Staged {
        self.params.stage(tape)
    }

    /// Encoder/decoder over one spectrogram [1, input, input]; returns the
    /// bottleneck feature map [channels, grid, grid] and the audio embedding
    /// map [mask_channels, input, input].
    fn unet(&self, tape: &mut Tape<S>, st: &Stage<S>, x: Var) -> (Var, Var) {
        let d = self.cfg.depth;
        let slope = S::from_f64(0.2);
        let mut skips = Vec::with_capacity(d);
        let mut cur = x;
        for i in 0..d {
            let w = st.var(&format!("unet.enc{i}.w"));
            let b = st.var(&format!("unet.enc{i}.b"));
            cur = tape.conv2d(cur, w, b, 2, 1);
            cur = tape.leaky_relu(cur, slope);
            skips.push(cur);
        }
        let wb = st.var("unet.bott.w");
        let bb = st.var("unet.bott.b");
        let fa = tape.conv2d(cur, wb, bb, 1, 0);

        let mut dec = cur;
        for j in 0..d {
            let w = st.var(&format!("unet.dec{j}.w"));
            let b = st.var(&format!("unet.dec{j}.b"));
            dec = tape.conv_transpose2d(dec, w, b, 2, 1);
            dec = tape.leaky_relu(dec, slope);
            if j + 2 <= d {
                dec = tape.concat(0, &[dec, skips[d - 2 - j]]);
            }
        }
        let wo = st.var("unet.out.w");
        let bo = st.var("unet.out.b");
        let eps_a = tape.conv2d(dec, wo, bo, 1, 0);
        (fa, eps_a)
    }

    fn decode(
        &self,
        tape: &mut Tape<S>,
        st: &Stage<S>,
        queries: Var,
        audio_tokens: Var,
        motion_tokens: Option<Var>,
    ) -> Var {
        let heads = self.cfg.heads;
        let mut x = queries;
        for (layer, subs) in layer_plan(self.cfg.layout) {
            for &sub in &subs {
                match sub {
                    Sub::SelfAttn => {
                        let h = blocks::layer_norm(tape, st, &format!("{layer}.self.ln"), x);
                        let a = attention(tape, st, &format!("{layer}.self"), h, h, heads);
                        x = tape.add(x, a);
                    }
                    Sub::CrossMotion => {
                        let m = motion_tokens.expect("layout requires motion tokens");
                        let h = blocks::layer_norm(tape, st, &format!("{layer}.mcross.ln"), x);
                        let a = attention(tape, st, &format!("{layer}.mcross"), h, m, heads);
                        x = tape.add(x, a);
                    }
                    Sub::CrossAudio => {
                        let h = blocks::layer_norm(tape, st, &format!("{layer}.across.ln"), x);
                        let a = attention(tape, st, &format!("{layer}.across"), h, audio_tokens, heads);
                        x = tape.add(x, a);
                    }
                    Sub::DualCross => {
                        let m = motion_tokens.expect("layout requires motion tokens");
                        let h = blocks::layer_norm(tape, st, &format!("{layer}.dual.ln"), x);
                        let am = attention(tape, st, &format!("{layer}.mcross"), h, m, heads);
                        let aa = attention(tape, st, &format!("{layer}.across"), h, audio_tokens, heads);
                        let sum = tape.add(am, aa);
                        x = tape.add(x, sum);
                    }
                    Sub::Ffn => {
                        let h = blocks::layer_norm(tape, st, &format!("{layer}.ffn.ln"), x);
                        let f = feed_forward(tape, st, &format!("{layer}.ffn"), h);
                        x = tape.add(x, f);
                    }
                }
            }
        }
        blocks::layer_norm(tape, st, "dec.final_ln", x)
    }

    fn mask_head(&self, tape: &mut Tape<S>, st: &Stage<S>, eps_q: Var) -> Var {
        let h = linear(tape, st, "maskhead.fc1", eps_q);
        let h = tape.relu(h);
        let h = linear(tape, st, "maskhead.fc2", h);
        let h = tape.relu(h);
        linear(tape, st, "maskhead.fc3", h)
    }

    /// Full forward pass over one mixture.
    ///
    /// * `feats`: log-compressed warped magnitude, input*input values.
    /// * `motion`: per-source motion features, concatenated rows of
    ///   [motion_len, channels] per source (empty when the layout skips
    ///   motion).
    /// * `naming`: (query index, object feature) per source; indices must be
    ///   distinct and features channels-wide.
    pub fn forward(
        &self,
        tape: &mut Tape<S>,
        staged: &Staged,
        feats: &[f32],
        motion: &[f32],
        naming: &[(usize, Vec<f32>)],
    ) -> Forward {
        let cfg = &self.cfg;
        let n = cfg.input;
        assert_eq!(feats.len(), n * n, "feature grid size mismatch");
        let st = Stage::new(&self.params, staged);

        let x = tape.leaf(tensor_from_f32(&[1, n, n], feats));
        let (fa, eps_a3) = self.unet(tape, &st, x);

        let grid = cfg.grid();
        let fa2 = tape.reshape(fa, &[cfg.channels, grid * grid]);
        let fat = tape.transpose(fa2);
        let pos_a = st.var("pos.audio");
        let audio_tokens = tape.add(fat, pos_a);

        let motion_tokens = if cfg.layout.uses_motion() {
            let per = cfg.motion_len * cfg.channels;
            assert!(
                !motion.is_empty() && motion.len() % per == 0,
                "motion features must be a whole number of [motion_len, channels] blocks"
            );
            let videos = motion.len() / per;
            let mt = tape.leaf(tensor_from_f32(&[videos * cfg.motion_len, cfg.channels], motion));
            let pos_m = st.var("pos.motion");
            let rows: Vec<usize> = (0..videos * cfg.motion_len)
                .map(|r| r % cfg.motion_len)
                .collect();
            let pos_tiled = tape.select_rows(pos_m, &rows);
            Some(tape.add(mt, pos_tiled))
        } else {
            None
        };

        let rows = cfg.query_rows();
        let bank = st.var("query.bank");
        let mut addend = Tensor::<S>::zeros(&[rows, cfg.channels]);
        let mut seen = vec![false; rows];
        for (idx, feat) in naming {
            assert!(*idx < rows, "query index {idx} out of range {rows}");
            assert!(!seen[*idx], "duplicate query assignment {idx}");
            assert_eq!(feat.len(), cfg.channels);
            seen[*idx] = true;
            for (c, &v) in feat.iter().enumerate() {
                addend.data[idx * cfg.channels + c] = S::from_f64(v as f64);
            }
        }
        let addend = tape.leaf(addend);
        let named = tape.add(bank, addend);

        let eps_q = self.decode(tape, &st, named, audio_tokens, motion_tokens);
        let eps_mask = self.mask_head(tape, &st, eps_q);
        let eps_a = tape.reshape(eps_a3, &[cfg.mask_channels, n * n]);
        let logits = tape.matmul(eps_mask, eps_a);
        let masks = tape.sigmoid(logits);

        Forward { masks, logits, eps_q, eps_a }
    }

    /// Appends one fresh prompt row (Gaussian, sigma 0.02) to the query bank
    /// and freezes every parameter except the bank.
    pub fn add_audio_prompt(&mut self, seed: u64) {
        let id = self.params.by_name("query.bank").expect("query bank present");
        let cfg_channels = self.cfg.channels;
        let rows = self.cfg.query_rows();
        let mut rng = rng_for(seed, &format!("prompt/{rows}"));
        let p = self.params.get_mut(id);
        assert_eq!(p.value.shape, [rows, cfg_channels]);
        p.value.shape[0] = rows + 1;
        for _ in 0..cfg_channels {
            p.value.data.push(S::from_f64(normal(&mut rng) * 0.02));
        }
        p.m = vec![S::ZERO; p.value.data.len()];
        p.v = vec![S::ZERO; p.value.data.len()];
        p.grad = vec![S::ZERO; p.value.data.len()];
        self.cfg.prompts += 1;
        self.params.set_trainable(|name| name == "query.bank");
    }
}

/// Parameters the transformer-side optimizer owns (weight-decayed); the
/// remainder (U-Net, contrastive adapter) belongs to the plain optimizer.
pub fn is_transformer_param(name: &str) -> bool {
    !(name.starts_with("unet.") || name.starts_with("contrast."))
}
