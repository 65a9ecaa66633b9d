//! Run configuration: one plain-text file that, together with the corpus,
//! fully determines every byte a run emits.
//!
//! The format is versioned `key = value` lines. Blank lines and lines
//! starting with `#` are ignored; every other line must be `key = value`
//! with a known key. Parsing is strict by design — unknown keys, duplicate
//! keys, and missing keys are all configuration errors — so a config file
//! either describes exactly one run or is rejected, and serialize-then-parse
//! is the identity ([`RunConfig::to_text`] / [`RunConfig::parse`]).

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::fpac::CacheConfig;
use crate::model::{UNetConfig, TOKEN_GRID_FACTOR};
use crate::rad::{DistillConfig, LossWeights, TeacherConfig};
use crate::scheduler::NoiseSchedule;

/// Format version accepted by [`RunConfig::parse`].
pub const CONFIG_VERSION: u32 = 1;

/// Denoiser size preset; both share one topology and differ only in widths.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ModelPreset {
    /// Full-width model ([`UNetConfig::default`]).
    Default,
    /// Narrow variant for CPU-budget runs ([`UNetConfig::compact`]).
    Compact,
}

impl ModelPreset {
    fn as_str(self) -> &'static str {
        match self {
            ModelPreset::Default => "default",
            ModelPreset::Compact => "compact",
        }
    }

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "default" => Ok(ModelPreset::Default),
            "compact" => Ok(ModelPreset::Compact),
            other => Err(Error::config(format!(
                "model preset {other:?} is not one of: default, compact"
            ))),
        }
    }
}

/// Complete description of one experiment: data location, model size,
/// noise schedule, both training phases, the caching policy, and the
/// evaluation split. A run is a pure function of (RunConfig, corpus).
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    /// Corpus container path.
    pub corpus: String,
    /// Directory receiving checkpoints, logs, and report artifacts.
    pub out_dir: String,
    /// Teacher checkpoint path.
    pub teacher_ckpt: String,
    /// Student checkpoint path.
    pub student_ckpt: String,
    /// Root seed; every subsystem derives its stream from it by label.
    pub seed: u64,
    pub model: ModelPreset,
    /// Scene side length; must be a positive multiple of 16.
    pub image_size: usize,
    /// Noise schedule length.
    pub t_total: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    /// Sampling plan length for the teacher (reference sampler).
    pub teacher_steps: usize,
    /// Sampling plan length the student is distilled to (4, or 2 for the
    /// two-step variant).
    pub student_steps: usize,
    pub teacher_iters: u64,
    pub teacher_batch: usize,
    pub teacher_lr: f64,
    pub teacher_weight_decay: f64,
    /// Weight of the teacher's attention localization term.
    pub lambda_mask: f64,
    /// Attention site supervised during training (and read by the cache
    /// policy at inference).
    pub mask_site: String,
    pub distill_iters: u64,
    pub distill_batch: usize,
    pub distill_lr: f64,
    pub distill_weight_decay: f64,
    /// Distillation objective weights.
    pub weights: LossWeights,
    /// Enables the perceptual distillation term.
    pub perceptual: bool,
    /// Token caching policy used by cached inference.
    pub cache: CacheConfig,
    /// Number of trailing corpus scenes held out from training.
    pub holdout: usize,
    /// Number of held-out scenes the infer command evaluates.
    pub infer_count: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            corpus: "data/corpus.fcs".to_string(),
            out_dir: "runs/default".to_string(),
            teacher_ckpt: "runs/default/teacher.ckpt".to_string(),
            student_ckpt: "runs/default/student.ckpt".to_string(),
            seed: 0,
            model: ModelPreset::Compact,
            image_size: 32,
            t_total: NoiseSchedule::DEFAULT_T,
            beta_start: NoiseSchedule::DEFAULT_BETA_START,
            beta_end: NoiseSchedule::DEFAULT_BETA_END,
            teacher_steps: 20,
            student_steps: 4,
            teacher_iters: 1200,
            teacher_batch: 8,
            teacher_lr: 2e-3,
            teacher_weight_decay: 0.0,
            lambda_mask: 0.1,
            mask_site: "up.1".to_string(),
            distill_iters: 800,
            distill_batch: 8,
            distill_lr: 1e-5,
            distill_weight_decay: 0.0,
            weights: LossWeights::default(),
            perceptual: true,
            cache: CacheConfig::default(),
            holdout: 64,
            infer_count: 8,
        }
    }
}

/// Order of emission; also the exhaustive key list for strict parsing.
const KEYS: &[&str] = &[
    "version",
    "corpus",
    "out_dir",
    "teacher_ckpt",
    "student_ckpt",
    "seed",
    "model",
    "image_size",
    "t_total",
    "beta_start",
    "beta_end",
    "teacher_steps",
    "student_steps",
    "teacher_iters",
    "teacher_batch",
    "teacher_lr",
    "teacher_weight_decay",
    "lambda_mask",
    "mask_site",
    "distill_iters",
    "distill_batch",
    "distill_lr",
    "distill_weight_decay",
    "w_diff",
    "w_lpips",
    "w_gan",
    "w_mask",
    "perceptual",
    "cache_layers",
    "cache_step",
    "cache_quantile",
    "cache_dilation",
    "cache_attn_site",
    "holdout",
    "infer_count",
];

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse::<T>()
        .map_err(|_| Error::config(format!("config key {key}: cannot parse value {value:?}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(Error::config(format!(
            "config key {key}: expected true or false, got {value:?}"
        ))),
    }
}

impl RunConfig {
    /// Serializes to the versioned key-value text form. Parsing the result
    /// reproduces `self` exactly.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let cache_step = match self.cache.cached_step {
            None => "final".to_string(),
            Some(i) => i.to_string(),
        };
        // Floats use {:?}: the shortest representation that parses back to
        // the same value, so defaults read naturally (1.0, 0.01) and the
        // text form is a serialization fixed point.
        let rows: Vec<(&str, String)> = vec![
            ("version", CONFIG_VERSION.to_string()),
            ("corpus", self.corpus.clone()),
            ("out_dir", self.out_dir.clone()),
            ("teacher_ckpt", self.teacher_ckpt.clone()),
            ("student_ckpt", self.student_ckpt.clone()),
            ("seed", self.seed.to_string()),
            ("model", self.model.as_str().to_string()),
            ("image_size", self.image_size.to_string()),
            ("t_total", self.t_total.to_string()),
            ("beta_start", format!("{:?}", self.beta_start)),
            ("beta_end", format!("{:?}", self.beta_end)),
            ("teacher_steps", self.teacher_steps.to_string()),
            ("student_steps", self.student_steps.to_string()),
            ("teacher_iters", self.teacher_iters.to_string()),
            ("teacher_batch", self.teacher_batch.to_string()),
            ("teacher_lr", format!("{:?}", self.teacher_lr)),
            ("teacher_weight_decay", format!("{:?}", self.teacher_weight_decay)),
            ("lambda_mask", format!("{:?}", self.lambda_mask)),
            ("mask_site", self.mask_site.clone()),
            ("distill_iters", self.distill_iters.to_string()),
            ("distill_batch", self.distill_batch.to_string()),
            ("distill_lr", format!("{:?}", self.distill_lr)),
            ("distill_weight_decay", format!("{:?}", self.distill_weight_decay)),
            ("w_diff", format!("{:?}", self.weights.diff)),
            ("w_lpips", format!("{:?}", self.weights.lpips)),
            ("w_gan", format!("{:?}", self.weights.gan)),
            ("w_mask", format!("{:?}", self.weights.mask)),
            ("perceptual", self.perceptual.to_string()),
            ("cache_layers", self.cache.layers.join(",")),
            ("cache_step", cache_step),
            ("cache_quantile", format!("{:?}", self.cache.quantile)),
            ("cache_dilation", self.cache.dilation.to_string()),
            ("cache_attn_site", self.cache.attn_site.clone()),
            ("holdout", self.holdout.to_string()),
            ("infer_count", self.infer_count.to_string()),
        ];
        debug_assert_eq!(rows.len(), KEYS.len());
        for (key, value) in rows {
            writeln!(s, "{key} = {value}").expect("string writes are infallible");
        }
        s
    }

    /// Parses the key-value text form. Every key in the format must appear
    /// exactly once; unknown keys are rejected.
    pub fn parse(text: &str) -> Result<RunConfig> {
        let mut seen: Vec<(&str, &str)> = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::config(format!(
                    "config line {}: expected `key = value`, got {line:?}",
                    lineno + 1
                )));
            };
            let (key, value) = (key.trim(), value.trim());
            if !KEYS.contains(&key) {
                return Err(Error::config(format!(
                    "config line {}: unknown key {key:?}",
                    lineno + 1
                )));
            }
            if seen.iter().any(|(k, _)| *k == key) {
                return Err(Error::config(format!(
                    "config line {}: duplicate key {key:?}",
                    lineno + 1
                )));
            }
            seen.push((key, value));
        }
        let get = |key: &str| -> Result<&str> {
            seen.iter()
                .find(|(k, _)| *k == key)
                .map(|(_, v)| *v)
                .ok_or_else(|| Error::config(format!("config is missing key {key:?}")))
        };

        let version: u32 = parse_num("version", get("version")?)?;
        if version != CONFIG_VERSION {
            return Err(Error::config(format!(
                "config version {version} is not supported (expected {CONFIG_VERSION})"
            )));
        }
        let cache_step = match get("cache_step")? {
            "final" => None,
            s => Some(parse_num::<usize>("cache_step", s)?),
        };
        let layers_raw = get("cache_layers")?;
        let layers: Vec<String> = if layers_raw.is_empty() {
            Vec::new()
        } else {
            layers_raw.split(',').map(|s| s.trim().to_string()).collect()
        };

        let cfg = RunConfig {
            corpus: get("corpus")?.to_string(),
            out_dir: get("out_dir")?.to_string(),
            teacher_ckpt: get("teacher_ckpt")?.to_string(),
            student_ckpt: get("student_ckpt")?.to_string(),
            seed: parse_num("seed", get("seed")?)?,
            model: ModelPreset::from_str(get("model")?)?,
            image_size: parse_num("image_size", get("image_size")?)?,
            t_total: parse_num("t_total", get("t_total")?)?,
            beta_start: parse_num("beta_start", get("beta_start")?)?,
            beta_end: parse_num("beta_end", get("beta_end")?)?,
            teacher_steps: parse_num("teacher_steps", get("teacher_steps")?)?,
            student_steps: parse_num("student_steps", get("student_steps")?)?,
            teacher_iters: parse_num("teacher_iters", get("teacher_iters")?)?,
            teacher_batch: parse_num("teacher_batch", get("teacher_batch")?)?,
            teacher_lr: parse_num("teacher_lr", get("teacher_lr")?)?,
            teacher_weight_decay: parse_num(
                "teacher_weight_decay",
                get("teacher_weight_decay")?,
            )?,
            lambda_mask: parse_num("lambda_mask", get("lambda_mask")?)?,
            mask_site: get("mask_site")?.to_string(),
            distill_iters: parse_num("distill_iters", get("distill_iters")?)?,
            distill_batch: parse_num("distill_batch", get("distill_batch")?)?,
            distill_lr: parse_num("distill_lr", get("distill_lr")?)?,
            distill_weight_decay: parse_num(
                "distill_weight_decay",
                get("distill_weight_decay")?,
            )?,
            weights: LossWeights {
                diff: parse_num("w_diff", get("w_diff")?)?,
                lpips: parse_num("w_lpips", get("w_lpips")?)?,
                gan: parse_num("w_gan", get("w_gan")?)?,
                mask: parse_num("w_mask", get("w_mask")?)?,
            },
            perceptual: parse_bool("perceptual", get("perceptual")?)?,
            cache: CacheConfig {
                layers,
                cached_step: cache_step,
                quantile: parse_num("cache_quantile", get("cache_quantile")?)?,
                dilation: parse_num("cache_dilation", get("cache_dilation")?)?,
                attn_site: get("cache_attn_site")?.to_string(),
            },
            holdout: parse_num("holdout", get("holdout")?)?,
            infer_count: parse_num("infer_count", get("infer_count")?)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads and parses a config file.
    pub fn read(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config(format!("cannot read config {}: {e}", path.display())))?;
        RunConfig::parse(&text)
    }

    /// Writes the text form to a file.
    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    /// Structural checks that do not need the corpus or a model.
    pub fn validate(&self) -> Result<()> {
        if self.image_size == 0 || self.image_size % TOKEN_GRID_FACTOR != 0 {
            return Err(Error::config(format!(
                "image_size {} is not a positive multiple of {TOKEN_GRID_FACTOR}",
                self.image_size
            )));
        }
        if self.teacher_steps == 0 || self.student_steps == 0 {
            return Err(Error::config("plan lengths must be at least 1"));
        }
        if self.teacher_steps > self.t_total || self.student_steps > self.t_total {
            return Err(Error::config(format!(
                "plan lengths ({}, {}) cannot exceed schedule length {}",
                self.teacher_steps, self.student_steps, self.t_total
            )));
        }
        if self.infer_count > self.holdout {
            return Err(Error::config(format!(
                "infer_count {} exceeds the held-out scene count {}",
                self.infer_count, self.holdout
            )));
        }
        self.weights.validate()?;
        self.unet()?.validate()?;
        Ok(())
    }

    /// Noise schedule described by the config.
    pub fn schedule(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::linear(self.t_total, self.beta_start, self.beta_end)
    }

    /// Denoiser hyperparameters: the preset with the condition token count
    /// implied by `image_size`.
    pub fn unet(&self) -> Result<UNetConfig> {
        if self.image_size == 0 || self.image_size % TOKEN_GRID_FACTOR != 0 {
            return Err(Error::config(format!(
                "image_size {} is not a positive multiple of {TOKEN_GRID_FACTOR}",
                self.image_size
            )));
        }
        let grid = self.image_size / TOKEN_GRID_FACTOR;
        let mut cfg = match self.model {
            ModelPreset::Default => UNetConfig::default(),
            ModelPreset::Compact => UNetConfig::compact(),
        };
        cfg.cond_tokens = grid * grid;
        Ok(cfg)
    }

    pub fn teacher_config(&self) -> TeacherConfig {
        TeacherConfig {
            seed: self.seed,
            batch: self.teacher_batch,
            lr: self.teacher_lr,
            weight_decay: self.teacher_weight_decay,
            lambda_mask: self.lambda_mask,
            mask_site: self.mask_site.clone(),
        }
    }

    pub fn distill_config(&self) -> DistillConfig {
        DistillConfig {
            seed: self.seed,
            batch: self.distill_batch,
            lr: self.distill_lr,
            weight_decay: self.distill_weight_decay,
            weights: self.weights,
            plan_steps: self.student_steps,
            mask_site: self.mask_site.clone(),
            perceptual: self.perceptual,
        }
    }

    /// Paths resolved relative to the config file's directory, so a run
    /// directory can be moved as a unit. Absolute paths pass through.
    pub fn resolve(&self, base: &Path) -> ResolvedPaths {
        let join = |s: &str| -> PathBuf {
            let p = Path::new(s);
            if p.is_absolute() {
                p.to_path_buf()
            } else {
                base.join(p)
            }
        };
        ResolvedPaths {
            corpus: join(&self.corpus),
            out_dir: join(&self.out_dir),
            teacher_ckpt: join(&self.teacher_ckpt),
            student_ckpt: join(&self.student_ckpt),
        }
    }
}

/// Filesystem locations of a run, anchored at the config file's directory.
#[derive(Clone, Debug)]
pub struct ResolvedPaths {
    pub corpus: PathBuf,
    pub out_dir: PathBuf,
    pub teacher_ckpt: PathBuf,
    pub student_ckpt: PathBuf,
}
