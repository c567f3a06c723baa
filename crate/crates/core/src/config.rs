//! Flat `key=value` run configuration.
//!
//! Lines are `key = value`; blank lines and lines starting with `#` are
//! ignored. Every key has a default, unknown keys are rejected, and
//! [`RunConfig::to_text`] writes every key in a fixed order.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::data::{load_image_dir, split_of, synth_strokes, AugmentRanges, DatasetSplit, LoadedImage, Split, SynthOptions};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::optim::AdamConfig;
use crate::ssm::{canonical_dt_rank, ModelConfig, SsmModel};
use crate::tokenize::{Variant, PATCH_SIDE};
use crate::train::TrainConfig;
use crate::transformer::{TransformerConfig, TransformerModel};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Architecture {
    Ssm,
    Transformer,
}

impl Architecture {
    pub fn as_str(self) -> &'static str {
        match self {
            Architecture::Ssm => "ssm",
            Architecture::Transformer => "transformer",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DataConfig {
    /// Image directory; `None` generates synthetic strokes.
    pub dir: Option<PathBuf>,
    pub invert: bool,
    pub side: usize,
    pub patch_size: usize,
    pub n_synth: usize,
    pub synth_seed: u64,
    pub n_strokes: usize,
    pub pen_width: f64,
    pub augment: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeConfig {
    pub t_horizon: usize,
    pub n_sequences: usize,
    /// 0 means `T_I / 4`.
    pub tokens_per_quadrant: usize,
    /// 0 means `16 · T_I`.
    pub tokens_each: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub arch: Architecture,
    pub ssm: ModelConfig,
    pub transformer: TransformerConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub probe: ProbeConfig,
}

impl Default for RunConfig {
    /// The full-size profile: 128×128 images, 8 blocks, T_I = T_Q = 1024.
    fn default() -> Self {
        RunConfig {
            arch: Architecture::Ssm,
            ssm: ModelConfig::default(),
            transformer: TransformerConfig::default(),
            train: TrainConfig {
                epochs: 16_000,
                ..TrainConfig::default()
            },
            data: DataConfig {
                dir: None,
                invert: false,
                side: 128,
                patch_size: PATCH_SIDE,
                n_synth: 1024,
                synth_seed: 1,
                n_strokes: 3,
                pen_width: 2.0,
                augment: true,
            },
            probe: ProbeConfig {
                t_horizon: 128,
                n_sequences: 512,
                tokens_per_quadrant: 0,
                tokens_each: 0,
                seed: 0,
            },
        }
    }
}

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("invalid value {v:?} for {key}")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" => Ok(true),
        "false" | "0" => Ok(false),
        _ => Err(Error::Config(format!("invalid boolean {v:?} for {key}"))),
    }
}

impl RunConfig {
    /// CPU-sized profile: 64×64 synthetic strokes, 4 blocks,
    /// T_I = T_Q = 256, 2000 steps of batch 8.
    pub fn desk() -> Self {
        let mut c = RunConfig::default();
        c.ssm = ModelConfig::desk();
        c.train = TrainConfig {
            batch: 8,
            epochs: 20,
            steps_per_epoch: Some(100),
            adam: AdamConfig {
                lr: 3e-3,
                ..AdamConfig::default()
            },
            ..TrainConfig::desk()
        };
        // Thick, sparse strokes at 64 px: thin pens leave too little
        // spatial structure for a 2000-step run to exploit.
        c.data.side = 64;
        c.data.n_strokes = 2;
        c.data.pen_width = 8.0;
        c.data.n_synth = 2048;
        c.data.augment = false;
        c
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut c = RunConfig::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key=value", n + 1)))?;
            c.set(k.trim(), v.trim())?;
        }
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_text(&text)
    }

    /// Apply one key. Values are checked for syntax here and for
    /// consistency in [`RunConfig::validate`].
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let t = &mut self.train;
        match key {
            "model.kind" => {
                self.arch = match v {
                    "ssm" => Architecture::Ssm,
                    "transformer" => Architecture::Transformer,
                    _ => return Err(Error::Config(format!("unknown model.kind {v:?}"))),
                }
            }
            "model.variant" => self.ssm.variant = Variant::parse(v).map_err(|e| Error::Config(e.to_string()))?,
            "model.n_blocks" => self.ssm.n_blocks = parse(key, v)?,
            "model.d_model" => {
                let d = parse(key, v)?;
                self.ssm.d_model = d;
                self.transformer.d_model = d;
            }
            "model.d_state" => self.ssm.d_state = parse(key, v)?,
            "model.expand" => self.ssm.expand = parse(key, v)?,
            "model.dt_rank" => {
                self.ssm.dt_rank = if v == "auto" {
                    canonical_dt_rank(self.ssm.d_model)
                } else {
                    parse(key, v)?
                }
            }
            "model.n_heads" => self.transformer.n_heads = parse(key, v)?,
            "model.n_encoder" => self.transformer.n_encoder = parse(key, v)?,
            "model.n_decoder" => self.transformer.n_decoder = parse(key, v)?,
            "model.mlp_ratio" => self.transformer.mlp_ratio = parse(key, v)?,
            "train.t_i_min" => t.t_i_min = parse(key, v)?,
            "train.t_i_max" => t.t_i_max = parse(key, v)?,
            "train.t_q" => t.t_q = parse(key, v)?,
            "train.batch" => t.batch = parse(key, v)?,
            "train.epochs" => t.epochs = parse(key, v)?,
            "train.steps_per_epoch" => {
                t.steps_per_epoch = match parse::<usize>(key, v)? {
                    0 => None,
                    n => Some(n),
                }
            }
            "train.lr" => t.adam.lr = parse(key, v)?,
            "train.beta1" => t.adam.beta1 = parse(key, v)?,
            "train.beta2" => t.adam.beta2 = parse(key, v)?,
            "train.eps" => t.adam.eps = parse(key, v)?,
            "train.weight_decay" => t.adam.weight_decay = parse(key, v)?,
            "train.warmup" => t.adam.warmup = parse(key, v)?,
            "train.seed" => t.seed = parse(key, v)?,
            "train.checkpoint_every" => t.checkpoint_every = parse(key, v)?,
            "train.jobs" => t.jobs = parse(key, v)?,
            "data.dir" => self.data.dir = (!v.is_empty()).then(|| PathBuf::from(v)),
            "data.invert" => self.data.invert = parse_bool(key, v)?,
            "data.side" => self.data.side = parse(key, v)?,
            "data.patch_size" => self.data.patch_size = parse(key, v)?,
            "data.n_synth" => self.data.n_synth = parse(key, v)?,
            "data.synth_seed" => self.data.synth_seed = parse(key, v)?,
            "data.n_strokes" => self.data.n_strokes = parse(key, v)?,
            "data.pen_width" => self.data.pen_width = parse(key, v)?,
            "data.augment" => self.data.augment = parse_bool(key, v)?,
            "probe.t_horizon" => self.probe.t_horizon = parse(key, v)?,
            "probe.n_sequences" => self.probe.n_sequences = parse(key, v)?,
            "probe.tokens_per_quadrant" => self.probe.tokens_per_quadrant = parse(key, v)?,
            "probe.tokens_each" => self.probe.tokens_each = parse(key, v)?,
            "probe.seed" => self.probe.seed = parse(key, v)?,
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let (m, tf, t, d, p) = (&self.ssm, &self.transformer, &self.train, &self.data, &self.probe);
        let mut s = String::new();
        let mut kv = |k: &str, v: String| writeln!(s, "{k}={v}").unwrap();
        kv("model.kind", self.arch.as_str().into());
        kv("model.variant", m.variant.as_str().into());
        kv("model.n_blocks", m.n_blocks.to_string());
        kv("model.d_model", m.d_model.to_string());
        kv("model.d_state", m.d_state.to_string());
        kv("model.expand", m.expand.to_string());
        kv("model.dt_rank", m.dt_rank.to_string());
        kv("model.n_heads", tf.n_heads.to_string());
        kv("model.n_encoder", tf.n_encoder.to_string());
        kv("model.n_decoder", tf.n_decoder.to_string());
        kv("model.mlp_ratio", tf.mlp_ratio.to_string());
        kv("train.t_i_min", t.t_i_min.to_string());
        kv("train.t_i_max", t.t_i_max.to_string());
        kv("train.t_q", t.t_q.to_string());
        kv("train.batch", t.batch.to_string());
        kv("train.epochs", t.epochs.to_string());
        kv("train.steps_per_epoch", t.steps_per_epoch.unwrap_or(0).to_string());
        kv("train.lr", format!("{:e}", t.adam.lr));
        kv("train.beta1", t.adam.beta1.to_string());
        kv("train.beta2", t.adam.beta2.to_string());
        kv("train.eps", format!("{:e}", t.adam.eps));
        kv("train.weight_decay", t.adam.weight_decay.to_string());
        kv("train.warmup", t.adam.warmup.to_string());
        kv("train.seed", t.seed.to_string());
        kv("train.checkpoint_every", t.checkpoint_every.to_string());
        kv("train.jobs", t.jobs.to_string());
        kv(
            "data.dir",
            d.dir.as_ref().map(|p| p.display().to_string()).unwrap_or_default(),
        );
        kv("data.invert", d.invert.to_string());
        kv("data.side", d.side.to_string());
        kv("data.patch_size", d.patch_size.to_string());
        kv("data.n_synth", d.n_synth.to_string());
        kv("data.synth_seed", d.synth_seed.to_string());
        kv("data.n_strokes", d.n_strokes.to_string());
        kv("data.pen_width", d.pen_width.to_string());
        kv("data.augment", d.augment.to_string());
        kv("probe.t_horizon", p.t_horizon.to_string());
        kv("probe.n_sequences", p.n_sequences.to_string());
        kv("probe.tokens_per_quadrant", p.tokens_per_quadrant.to_string());
        kv("probe.tokens_each", p.tokens_each.to_string());
        kv("probe.seed", p.seed.to_string());
        s
    }

    pub fn validate(&self) -> Result<()> {
        self.ssm.validate()?;
        if self.transformer.d_model != self.ssm.d_model {
            return Err(Error::Config("model.d_model must be set once for both families".into()));
        }
        self.transformer.validate()?;
        self.train.validate()?;
        if self.arch == Architecture::Transformer && self.ssm.variant == Variant::Prepended {
            return Err(Error::Config("the prepended variant applies to the ssm only".into()));
        }
        let d = &self.data;
        if d.patch_size != PATCH_SIDE {
            return Err(Error::Config(format!("only {PATCH_SIDE}×{PATCH_SIDE} patches are supported")));
        }
        if d.side < 8 || d.side % PATCH_SIDE != 0 {
            return Err(Error::Config(format!("data.side must be a multiple of {PATCH_SIDE} and >= 8")));
        }
        if d.dir.is_none() && d.n_synth < 2 {
            return Err(Error::Config("data.n_synth must be >= 2".into()));
        }
        if !(d.pen_width > 0.0) {
            return Err(Error::Config("data.pen_width must be positive".into()));
        }
        if self.probe.t_horizon == 0 || self.probe.n_sequences == 0 {
            return Err(Error::Config("probe counts must be >= 1".into()));
        }
        Ok(())
    }

    pub fn augment_ranges(&self) -> AugmentRanges {
        if self.data.augment {
            AugmentRanges::default()
        } else {
            AugmentRanges::none()
        }
    }

    /// Training config with the data-dependent fields filled in.
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            augment: self.augment_ranges(),
            ..self.train.clone()
        }
    }

    /// Freshly initialized model for this run, seeded by `train.seed`.
    pub fn init_model(&self) -> Result<Model> {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(self.train.seed);
        Ok(match self.arch {
            Architecture::Ssm => Model::Ssm(SsmModel::init(self.ssm, &mut rng)?),
            Architecture::Transformer => Model::Transformer(TransformerModel::init(self.transformer, &mut rng)?),
        })
    }

    /// Load the image directory or generate the synthetic set. Synthetic
    /// images are named `synth_<i>.pgm` and split by the same name hash.
    pub fn dataset(&self) -> Result<DatasetSplit> {
        let d = &self.data;
        if let Some(dir) = &d.dir {
            return load_image_dir(dir, d.side, d.invert);
        }
        let opts = SynthOptions {
            side: d.side,
            n_strokes: d.n_strokes,
            pen_width: d.pen_width,
        };
        let mut out = DatasetSplit::default();
        for i in 0..d.n_synth {
            let filename = synth_name(i);
            let mut rng = synth_rng(d.synth_seed, i);
            let image = synth_strokes(&mut rng, &opts);
            let (split, hash) = split_of(&filename);
            let item = LoadedImage { filename, hash, image };
            match split {
                Split::Train => out.train.push(item),
                Split::Test => out.test.push(item),
            }
        }
        if out.train.is_empty() || out.test.is_empty() {
            return Err(Error::Config("synthetic set too small to populate both splits".into()));
        }
        Ok(out)
    }
}

pub fn synth_name(i: usize) -> String {
    format!("synth_{i:05}.pgm")
}

/// Per-image generator so image `i` does not depend on the set size.
pub fn synth_rng(seed: u64, i: usize) -> rand_chacha::ChaCha8Rng {
    use rand::SeedableRng;
    rand_chacha::ChaCha8Rng::seed_from_u64(crate::train::batch_seed(seed, i))
}
