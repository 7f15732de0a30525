//! Flat `key = value` run configuration. Sections may be used for
//! grouping; key names are global and unknown keys are rejected.

use std::path::{Path, PathBuf};

use ini::Ini;

use crate::actor::{ArchConfig, PretrainConfig};
use crate::critic::CriticConfig;
use crate::environment::{SceneConfig, ShapeKind};
use crate::error::{Error, Result};
use crate::scoring::ScoreFunction;
use crate::trainer::{BaselineMode, TrainerConfig};

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub height: usize,
    pub width: usize,
    pub n_min: usize,
    pub n_max: usize,
    pub shape_kinds: Vec<ShapeKind>,
    pub overlap_prob: f64,
    /// Bit-flip probability applied to the auxiliary channels.
    pub aux_noise: f64,
    pub split_seed: u64,
    pub pretrain_scenes: usize,
    pub train_scenes: usize,
    pub val_scenes: usize,
    pub test_scenes: usize,

    pub encoder_channels: Vec<usize>,
    pub hidden: usize,
    pub z: usize,
    pub latent: usize,
    pub decoder_channels: Vec<usize>,
    pub state_pyramid: bool,
    pub critic_channels: Vec<usize>,
    pub critic_fc: Vec<usize>,
    pub bn_momentum: f64,

    pub pretrain_epochs: usize,
    pub pretrain_batch: usize,
    pub pretrain_lr: f64,
    pub pretrain_weight_decay: f64,
    pub pretrain_kl_weight: f64,

    pub gamma: f64,
    pub actor_lr: f64,
    pub critic_lr: f64,
    pub kl_weight: f64,
    pub actor_weight_decay: f64,
    pub critic_weight_decay: f64,
    pub termination_weight: f64,
    pub warmup_epochs: usize,
    pub epochs: usize,
    pub baseline_epochs: usize,
    pub batch_size: usize,
    pub curriculum_step: usize,
    pub patience: usize,
    pub lr_decay: f64,
    pub score: ScoreFunction,
    /// 0 selects the default of ten times the latent dimension.
    pub kl_ceiling: f64,
    pub matching_noise: f64,
    pub init_from_pretrain: bool,
    pub baseline_mode: BaselineMode,
    /// 0 selects `n_max + 1`.
    pub max_steps: usize,

    pub seed: u64,
    /// Seeds of the ablation sweep.
    pub seeds: Vec<u64>,
    /// Pre-trained actor checkpoint; empty means pre-train in the run.
    pub pretrained: String,
    pub checkpoint: String,
    pub compare_checkpoint: String,
    pub out: String,

    pub lockin_seeds: usize,
    pub lockin_sigmas: Vec<f64>,
    pub lockin_scenes: usize,
    pub lockin_epochs: usize,
    pub lockin_warmup: usize,

    pub oracle_scenes: usize,
    pub oracle_orderings: usize,
    pub oracle_train_scenes: usize,
    pub oracle_epochs: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let scene = SceneConfig::default();
        let arch = ArchConfig::default();
        let critic = CriticConfig::default();
        let pre = PretrainConfig::default();
        let tr = TrainerConfig::default();
        RunConfig {
            height: scene.height,
            width: scene.width,
            n_min: scene.n_min,
            n_max: scene.n_max,
            shape_kinds: scene.shape_kinds,
            overlap_prob: scene.overlap_prob,
            aux_noise: 0.0,
            split_seed: 0,
            pretrain_scenes: 1500,
            train_scenes: 400,
            val_scenes: 100,
            test_scenes: 100,
            encoder_channels: arch.encoder_channels,
            hidden: arch.hidden,
            z: arch.z,
            latent: arch.latent,
            decoder_channels: arch.decoder_channels,
            state_pyramid: arch.state_pyramid,
            critic_channels: critic.conv_channels,
            critic_fc: critic.fc,
            bn_momentum: critic.bn_momentum,
            pretrain_epochs: 10,
            pretrain_batch: pre.batch_size,
            pretrain_lr: pre.learning_rate,
            pretrain_weight_decay: pre.weight_decay,
            pretrain_kl_weight: pre.kl_weight,
            gamma: tr.gamma,
            actor_lr: 1e-3,
            critic_lr: tr.critic_lr,
            kl_weight: tr.kl_weight,
            actor_weight_decay: tr.actor_weight_decay,
            critic_weight_decay: tr.critic_weight_decay,
            termination_weight: tr.termination_weight,
            warmup_epochs: tr.warmup_epochs,
            epochs: tr.epochs,
            baseline_epochs: tr.epochs,
            batch_size: tr.batch_size,
            curriculum_step: tr.curriculum_step,
            patience: tr.patience,
            lr_decay: tr.lr_decay,
            score: tr.score,
            kl_ceiling: 0.0,
            matching_noise: 0.0,
            init_from_pretrain: true,
            baseline_mode: BaselineMode::Truncated,
            max_steps: 0,
            seed: 0,
            seeds: vec![0, 1, 2],
            pretrained: String::new(),
            checkpoint: String::new(),
            compare_checkpoint: String::new(),
            out: "out".into(),
            lockin_seeds: 30,
            lockin_sigmas: vec![0.0, 0.2, 0.5, 1.0],
            lockin_scenes: 16,
            lockin_epochs: 30,
            lockin_warmup: 3,
            oracle_scenes: 20,
            oracle_orderings: 20,
            oracle_train_scenes: 400,
            oracle_epochs: 8,
        }
    }
}

/// Every accepted key, in echo order.
pub const KEYS: &[&str] = &[
    "height",
    "width",
    "n_min",
    "n_max",
    "shape_kinds",
    "overlap_prob",
    "aux_noise",
    "split_seed",
    "pretrain_scenes",
    "train_scenes",
    "val_scenes",
    "test_scenes",
    "encoder_channels",
    "hidden",
    "z",
    "latent",
    "decoder_channels",
    "state_pyramid",
    "critic_channels",
    "critic_fc",
    "bn_momentum",
    "pretrain_epochs",
    "pretrain_batch",
    "pretrain_lr",
    "pretrain_weight_decay",
    "pretrain_kl_weight",
    "gamma",
    "actor_lr",
    "critic_lr",
    "kl_weight",
    "actor_weight_decay",
    "critic_weight_decay",
    "termination_weight",
    "warmup_epochs",
    "epochs",
    "baseline_epochs",
    "batch_size",
    "curriculum_step",
    "patience",
    "lr_decay",
    "score",
    "kl_ceiling",
    "matching_noise",
    "init_from_pretrain",
    "baseline_mode",
    "max_steps",
    "seed",
    "seeds",
    "pretrained",
    "checkpoint",
    "compare_checkpoint",
    "out",
    "lockin_seeds",
    "lockin_sigmas",
    "lockin_scenes",
    "lockin_epochs",
    "lockin_warmup",
    "oracle_scenes",
    "oracle_orderings",
    "oracle_train_scenes",
    "oracle_epochs",
];

fn parse<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.trim()
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {v:?}")))
}

fn parse_list<T: std::str::FromStr>(key: &str, v: &str) -> Result<Vec<T>> {
    v.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse(key, s))
        .collect()
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v.trim().to_ascii_lowercase().as_str() {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected a boolean, got {v:?}"))),
    }
}

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "height" => self.height = parse(key, v)?,
            "width" => self.width = parse(key, v)?,
            "n_min" => self.n_min = parse(key, v)?,
            "n_max" => self.n_max = parse(key, v)?,
            "shape_kinds" => {
                self.shape_kinds = v
                    .split(',')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(ShapeKind::parse)
                    .collect::<Result<_>>()?
            }
            "overlap_prob" => self.overlap_prob = parse(key, v)?,
            "aux_noise" => self.aux_noise = parse(key, v)?,
            "split_seed" => self.split_seed = parse(key, v)?,
            "pretrain_scenes" => self.pretrain_scenes = parse(key, v)?,
            "train_scenes" => self.train_scenes = parse(key, v)?,
            "val_scenes" => self.val_scenes = parse(key, v)?,
            "test_scenes" => self.test_scenes = parse(key, v)?,
            "encoder_channels" => self.encoder_channels = parse_list(key, v)?,
            "hidden" => self.hidden = parse(key, v)?,
            "z" => self.z = parse(key, v)?,
            "latent" => self.latent = parse(key, v)?,
            "decoder_channels" => self.decoder_channels = parse_list(key, v)?,
            "state_pyramid" => self.state_pyramid = parse_bool(key, v)?,
            "critic_channels" => self.critic_channels = parse_list(key, v)?,
            "critic_fc" => self.critic_fc = parse_list(key, v)?,
            "bn_momentum" => self.bn_momentum = parse(key, v)?,
            "pretrain_epochs" => self.pretrain_epochs = parse(key, v)?,
            "pretrain_batch" => self.pretrain_batch = parse(key, v)?,
            "pretrain_lr" => self.pretrain_lr = parse(key, v)?,
            "pretrain_weight_decay" => self.pretrain_weight_decay = parse(key, v)?,
            "pretrain_kl_weight" => self.pretrain_kl_weight = parse(key, v)?,
            "gamma" => self.gamma = parse(key, v)?,
            "actor_lr" => self.actor_lr = parse(key, v)?,
            "critic_lr" => self.critic_lr = parse(key, v)?,
            "kl_weight" => self.kl_weight = parse(key, v)?,
            "actor_weight_decay" => self.actor_weight_decay = parse(key, v)?,
            "critic_weight_decay" => self.critic_weight_decay = parse(key, v)?,
            "termination_weight" => self.termination_weight = parse(key, v)?,
            "warmup_epochs" => self.warmup_epochs = parse(key, v)?,
            "epochs" => self.epochs = parse(key, v)?,
            "baseline_epochs" => self.baseline_epochs = parse(key, v)?,
            "batch_size" => self.batch_size = parse(key, v)?,
            "curriculum_step" => self.curriculum_step = parse(key, v)?,
            "patience" => self.patience = parse(key, v)?,
            "lr_decay" => self.lr_decay = parse(key, v)?,
            "score" => self.score = parse(key, v)?,
            "kl_ceiling" => self.kl_ceiling = parse(key, v)?,
            "matching_noise" => self.matching_noise = parse(key, v)?,
            "init_from_pretrain" => self.init_from_pretrain = parse_bool(key, v)?,
            "baseline_mode" => {
                self.baseline_mode = match v.trim() {
                    "full_bptt" => BaselineMode::FullBptt,
                    "truncated" => BaselineMode::Truncated,
                    _ => return Err(Error::Config(format!("baseline_mode: expected full_bptt or truncated, got {v:?}"))),
                }
            }
            "max_steps" => self.max_steps = parse(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            "seeds" => self.seeds = parse_list(key, v)?,
            "pretrained" => self.pretrained = v.trim().to_string(),
            "checkpoint" => self.checkpoint = v.trim().to_string(),
            "compare_checkpoint" => self.compare_checkpoint = v.trim().to_string(),
            "out" => self.out = v.trim().to_string(),
            "lockin_seeds" => self.lockin_seeds = parse(key, v)?,
            "lockin_sigmas" => self.lockin_sigmas = parse_list(key, v)?,
            "lockin_scenes" => self.lockin_scenes = parse(key, v)?,
            "lockin_epochs" => self.lockin_epochs = parse(key, v)?,
            "lockin_warmup" => self.lockin_warmup = parse(key, v)?,
            "oracle_scenes" => self.oracle_scenes = parse(key, v)?,
            "oracle_orderings" => self.oracle_orderings = parse(key, v)?,
            "oracle_train_scenes" => self.oracle_train_scenes = parse(key, v)?,
            "oracle_epochs" => self.oracle_epochs = parse(key, v)?,
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        Some(match key {
            "height" => self.height.to_string(),
            "width" => self.width.to_string(),
            "n_min" => self.n_min.to_string(),
            "n_max" => self.n_max.to_string(),
            "shape_kinds" => self.shape_kinds.iter().map(|k| k.name()).collect::<Vec<_>>().join(","),
            "overlap_prob" => self.overlap_prob.to_string(),
            "aux_noise" => self.aux_noise.to_string(),
            "split_seed" => self.split_seed.to_string(),
            "pretrain_scenes" => self.pretrain_scenes.to_string(),
            "train_scenes" => self.train_scenes.to_string(),
            "val_scenes" => self.val_scenes.to_string(),
            "test_scenes" => self.test_scenes.to_string(),
            "encoder_channels" => join(&self.encoder_channels),
            "hidden" => self.hidden.to_string(),
            "z" => self.z.to_string(),
            "latent" => self.latent.to_string(),
            "decoder_channels" => join(&self.decoder_channels),
            "state_pyramid" => self.state_pyramid.to_string(),
            "critic_channels" => join(&self.critic_channels),
            "critic_fc" => join(&self.critic_fc),
            "bn_momentum" => self.bn_momentum.to_string(),
            "pretrain_epochs" => self.pretrain_epochs.to_string(),
            "pretrain_batch" => self.pretrain_batch.to_string(),
            "pretrain_lr" => self.pretrain_lr.to_string(),
            "pretrain_weight_decay" => self.pretrain_weight_decay.to_string(),
            "pretrain_kl_weight" => self.pretrain_kl_weight.to_string(),
            "gamma" => self.gamma.to_string(),
            "actor_lr" => self.actor_lr.to_string(),
            "critic_lr" => self.critic_lr.to_string(),
            "kl_weight" => self.kl_weight.to_string(),
            "actor_weight_decay" => self.actor_weight_decay.to_string(),
            "critic_weight_decay" => self.critic_weight_decay.to_string(),
            "termination_weight" => self.termination_weight.to_string(),
            "warmup_epochs" => self.warmup_epochs.to_string(),
            "epochs" => self.epochs.to_string(),
            "baseline_epochs" => self.baseline_epochs.to_string(),
            "batch_size" => self.batch_size.to_string(),
            "curriculum_step" => self.curriculum_step.to_string(),
            "patience" => self.patience.to_string(),
            "lr_decay" => self.lr_decay.to_string(),
            "score" => match self.score {
                ScoreFunction::Dice => "dice".into(),
                ScoreFunction::Iou => "iou".into(),
            },
            "kl_ceiling" => self.kl_ceiling.to_string(),
            "matching_noise" => self.matching_noise.to_string(),
            "init_from_pretrain" => self.init_from_pretrain.to_string(),
            "baseline_mode" => self.baseline_mode.name().to_string(),
            "max_steps" => self.max_steps.to_string(),
            "seed" => self.seed.to_string(),
            "seeds" => join(&self.seeds),
            "pretrained" => self.pretrained.clone(),
            "checkpoint" => self.checkpoint.clone(),
            "compare_checkpoint" => self.compare_checkpoint.clone(),
            "out" => self.out.clone(),
            "lockin_seeds" => self.lockin_seeds.to_string(),
            "lockin_sigmas" => join(&self.lockin_sigmas),
            "lockin_scenes" => self.lockin_scenes.to_string(),
            "lockin_epochs" => self.lockin_epochs.to_string(),
            "lockin_warmup" => self.lockin_warmup.to_string(),
            "oracle_scenes" => self.oracle_scenes.to_string(),
            "oracle_orderings" => self.oracle_orderings.to_string(),
            "oracle_train_scenes" => self.oracle_train_scenes.to_string(),
            "oracle_epochs" => self.oracle_epochs.to_string(),
            _ => return None,
        })
    }

    /// Applies every key of an INI document on top of the defaults.
    pub fn from_ini_str(text: &str) -> Result<Self> {
        let doc = Ini::load_from_str(text).map_err(|e| Error::Config(format!("malformed config: {e}")))?;
        let mut cfg = RunConfig::default();
        let mut seen = std::collections::BTreeSet::new();
        for (_, props) in doc.iter() {
            for (k, v) in props.iter() {
                if !seen.insert(k.to_string()) {
                    return Err(Error::Config(format!("key {k:?} is set more than once")));
                }
                cfg.set(k, v)?;
            }
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_ini_str(&text)
    }

    /// Applies a `key=value` override.
    pub fn apply_override(&mut self, kv: &str) -> Result<()> {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override {kv:?} is not of the form key=value")))?;
        self.set(k.trim(), v)
    }

    /// One-line `key=value` rendering of every setting.
    pub fn echo(&self) -> String {
        KEYS.iter()
            .map(|k| format!("{k}={}", self.get(k).expect("listed key")))
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn out_dir(&self) -> PathBuf {
        PathBuf::from(&self.out)
    }

    pub fn scene_config(&self) -> SceneConfig {
        SceneConfig {
            height: self.height,
            width: self.width,
            n_min: self.n_min,
            n_max: self.n_max,
            shape_kinds: self.shape_kinds.clone(),
            overlap_prob: self.overlap_prob,
        }
    }

    pub fn arch(&self) -> ArchConfig {
        ArchConfig {
            height: self.height,
            width: self.width,
            encoder_channels: self.encoder_channels.clone(),
            hidden: self.hidden,
            z: self.z,
            latent: self.latent,
            decoder_channels: self.decoder_channels.clone(),
            state_pyramid: self.state_pyramid,
        }
    }

    pub fn critic_config(&self) -> CriticConfig {
        CriticConfig {
            height: self.height,
            width: self.width,
            conv_channels: self.critic_channels.clone(),
            fc: self.critic_fc.clone(),
            bn_momentum: self.bn_momentum,
        }
    }

    pub fn pretrain_config(&self) -> PretrainConfig {
        PretrainConfig {
            epochs: self.pretrain_epochs,
            batch_size: self.pretrain_batch,
            learning_rate: self.pretrain_lr,
            weight_decay: self.pretrain_weight_decay,
            kl_weight: self.pretrain_kl_weight,
            seed: self.seed,
        }
    }

    pub fn trainer_config(&self) -> TrainerConfig {
        TrainerConfig {
            gamma: self.gamma,
            actor_lr: self.actor_lr,
            critic_lr: self.critic_lr,
            kl_weight: self.kl_weight,
            actor_weight_decay: self.actor_weight_decay,
            critic_weight_decay: self.critic_weight_decay,
            termination_weight: self.termination_weight,
            warmup_epochs: self.warmup_epochs,
            epochs: self.epochs,
            batch_size: self.batch_size,
            curriculum_step: self.curriculum_step,
            patience: self.patience,
            lr_decay: self.lr_decay,
            score: self.score,
            kl_ceiling: (self.kl_ceiling > 0.0).then_some(self.kl_ceiling),
            matching_noise: self.matching_noise,
            seed: self.seed,
        }
    }

    pub fn baseline_config(&self) -> TrainerConfig {
        TrainerConfig {
            epochs: self.baseline_epochs,
            ..self.trainer_config()
        }
    }

    pub fn max_steps(&self) -> usize {
        if self.max_steps == 0 {
            self.n_max + 1
        } else {
            self.max_steps
        }
    }

    /// Checks every derived component configuration.
    pub fn validate(&self) -> Result<()> {
        self.scene_config().validate()?;
        self.arch().validate()?;
        self.critic_config().validate()?;
        self.trainer_config().validate()?;
        if !(0.0..=1.0).contains(&self.aux_noise) {
            return Err(Error::Config("aux_noise must lie in [0, 1]".into()));
        }
        if self.train_scenes == 0 || self.val_scenes == 0 || self.test_scenes == 0 {
            return Err(Error::Config("train, val and test splits must be non-empty".into()));
        }
        if self.seeds.is_empty() || self.lockin_sigmas.iter().any(|&s| s < 0.0) {
            return Err(Error::Config("seeds must be non-empty and sigmas non-negative".into()));
        }
        Ok(())
    }
}
