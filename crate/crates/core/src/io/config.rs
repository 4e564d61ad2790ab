//! Flat `key = value` configuration.
//!
//! Every tunable lives here. Blank lines and `#` comments are ignored;
//! unknown keys and duplicate keys are errors. Values the method does not
//! pin down are marked `assumed` and are annotated as such when the config is
//! echoed back.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

trait ConfigValue: Sized {
    fn parse_value(s: &str) -> std::result::Result<Self, String>;
    fn render(&self) -> String;
}

impl ConfigValue for f64 {
    fn parse_value(s: &str) -> std::result::Result<Self, String> {
        s.parse().map_err(|_| format!("expected a number, got {s:?}"))
    }
    fn render(&self) -> String {
        format!("{self}")
    }
}

impl ConfigValue for usize {
    fn parse_value(s: &str) -> std::result::Result<Self, String> {
        s.parse().map_err(|_| format!("expected a non-negative integer, got {s:?}"))
    }
    fn render(&self) -> String {
        self.to_string()
    }
}

impl ConfigValue for u64 {
    fn parse_value(s: &str) -> std::result::Result<Self, String> {
        s.parse().map_err(|_| format!("expected a non-negative integer, got {s:?}"))
    }
    fn render(&self) -> String {
        self.to_string()
    }
}

impl ConfigValue for bool {
    fn parse_value(s: &str) -> std::result::Result<Self, String> {
        match s {
            "true" | "on" | "1" => Ok(true),
            "false" | "off" | "0" => Ok(false),
            _ => Err(format!("expected true/false, got {s:?}")),
        }
    }
    fn render(&self) -> String {
        self.to_string()
    }
}

struct Key<T> {
    name: &'static str,
    assumed: bool,
    get: fn(&T) -> String,
    set: fn(&mut T, &str) -> std::result::Result<(), String>,
}

macro_rules! config_struct {
    (
        $(#[$meta:meta])*
        pub struct $name:ident {
            $( $(#[doc = $doc:literal])* $field:ident : $ty:ty = $default:expr, $assumed:literal; )*
        }
    ) => {
        $(#[$meta])*
        #[derive(Debug, Clone, PartialEq)]
        pub struct $name {
            $( $(#[doc = $doc])* pub $field: $ty, )*
        }

        impl Default for $name {
            fn default() -> Self {
                $name { $( $field: $default, )* }
            }
        }

        impl $name {
            fn keys() -> &'static [Key<$name>] {
                &[$(
                    Key {
                        name: stringify!($field),
                        assumed: $assumed,
                        get: |c: &$name| c.$field.render(),
                        set: |c: &mut $name, v: &str| {
                            c.$field = <$ty as ConfigValue>::parse_value(v)?;
                            Ok(())
                        },
                    },
                )*]
            }
        }
    };
}

config_struct! {
    /// Mining, training and evaluation settings.
    pub struct MiningConfig {
        /// Deviation multiplier of the adaptive class threshold.
        alpha: f64 = 1.5, false;
        /// Maximum offline instances kept per novel class.
        max_per_class: usize = 300, false;
        /// Confidence threshold for online mining.
        online_delta: f64 = 0.7, false;
        /// Weight of the IoU-head loss.
        iou_loss_weight: f64 = 0.5, false;
        /// Cosine-similarity temperature.
        temperature: f64 = 1.0, true;
        /// Teacher EMA momentum, applied once per iteration.
        ema_momentum: f64 = 0.999, true;
        /// IoU threshold for every NMS pass.
        nms_iou: f64 = 0.5, true;
        roi_pool_size: usize = 7, true;
        /// Append offline instances to the teacher's proposals.
        enhance_rpn: bool = true, true;
        /// Mingle offline instances with the teacher's detections.
        enhance_rcnn: bool = true, true;
        /// Threshold of fixed-threshold mining.
        fixed_delta: f64 = 0.5, true;
        /// Minimum class score for a detection to be emitted at all.
        score_floor: f64 = 0.05, true;
        calibration: bool = true, false;
        adaptive_threshold: bool = true, false;
        online_mining: bool = true, false;
        iou_branch: bool = true, false;
        finetune: bool = true, false;
        lr_main: f64 = 0.02, false;
        lr_finetune: f64 = 0.001, false;
        /// Learning rate of the few-shot fine-tuning that produces the initial miner.
        lr_fsod: f64 = 0.02, true;
        base_iters: usize = 1500, true;
        fsod_iters: usize = 600, true;
        online_iters: usize = 1500, true;
        finetune_iters: usize = 400, true;
        /// Base scenes per training iteration.
        batch_scenes: usize = 4, true;
        seed: u64 = 0, true;
    }
}

config_struct! {
    /// Synthetic world generator settings.
    pub struct WorldConfig {
        base_classes: usize = 15, false;
        novel_classes: usize = 5, false;
        /// Annotated instances per class in the few-shot set.
        shots: usize = 3, true;
        base_scenes: usize = 500, true;
        test_scenes: usize = 300, true;
        /// Probability that an object in a base scene is of a novel class.
        co_occurrence_rate: f64 = 0.3, true;
        max_objects_per_scene: usize = 4, true;
        scene_extent_px: f64 = 128.0, true;
        min_object_px: f64 = 24.0, true;
        max_object_px: f64 = 56.0, true;
        latent_dim: usize = 20, true;
        /// Weight of a direction shared by all novel class centres.
        novel_affinity: f64 = 1.0, true;
        /// Spread of instance latents around their class centre.
        class_spread: f64 = 1.0, true;
        /// Per-observation noise on detector features.
        feature_noise: f64 = 0.35, true;
        /// Scale of the content block of detector observations.
        feature_gain: f64 = 9.0, true;
        /// Noise of the box-offset cues seen by the detector.
        offset_noise: f64 = 0.05, true;
        proposal_jitter: f64 = 0.15, true;
        proposals_per_object: usize = 6, true;
        background_proposals: usize = 6, true;
        ssl_channels: usize = 32, true;
        ssl_stride_px: f64 = 8.0, true;
        ssl_noise: f64 = 0.25, true;
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Config {
    pub mining: MiningConfig,
    pub world: WorldConfig,
}

fn unit(name: &str, v: f64) -> Result<()> {
    if (0.0..=1.0).contains(&v) {
        Ok(())
    } else {
        Err(Error::Config(format!("{name} must be in [0, 1], got {v}")))
    }
}

fn positive(name: &str, v: f64) -> Result<()> {
    if v.is_finite() && v > 0.0 {
        Ok(())
    } else {
        Err(Error::Config(format!("{name} must be positive, got {v}")))
    }
}

fn at_least_one(name: &str, v: usize) -> Result<()> {
    if v >= 1 {
        Ok(())
    } else {
        Err(Error::Config(format!("{name} must be at least 1")))
    }
}

impl MiningConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.alpha.is_finite() {
            return Err(Error::Config(format!("alpha must be finite, got {}", self.alpha)));
        }
        at_least_one("max_per_class", self.max_per_class)?;
        unit("online_delta", self.online_delta)?;
        unit("nms_iou", self.nms_iou)?;
        unit("fixed_delta", self.fixed_delta)?;
        unit("score_floor", self.score_floor)?;
        unit("ema_momentum", self.ema_momentum)?;
        if !(self.iou_loss_weight.is_finite() && self.iou_loss_weight >= 0.0) {
            return Err(Error::Config(format!(
                "iou_loss_weight must be non-negative, got {}",
                self.iou_loss_weight
            )));
        }
        positive("temperature", self.temperature)?;
        positive("lr_main", self.lr_main)?;
        positive("lr_finetune", self.lr_finetune)?;
        positive("lr_fsod", self.lr_fsod)?;
        at_least_one("roi_pool_size", self.roi_pool_size)?;
        at_least_one("batch_scenes", self.batch_scenes)?;
        Ok(())
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        at_least_one("base_classes", self.base_classes)?;
        at_least_one("novel_classes", self.novel_classes)?;
        at_least_one("shots", self.shots)?;
        at_least_one("max_objects_per_scene", self.max_objects_per_scene)?;
        at_least_one("latent_dim", self.latent_dim)?;
        at_least_one("ssl_channels", self.ssl_channels)?;
        unit("co_occurrence_rate", self.co_occurrence_rate)?;
        positive("scene_extent_px", self.scene_extent_px)?;
        positive("min_object_px", self.min_object_px)?;
        positive("ssl_stride_px", self.ssl_stride_px)?;
        if self.max_object_px < self.min_object_px || self.max_object_px > self.scene_extent_px {
            return Err(Error::Config(
                "object sizes must satisfy min_object_px <= max_object_px <= scene_extent_px".into(),
            ));
        }
        for (name, v) in [
            ("class_spread", self.class_spread),
            ("feature_noise", self.feature_noise),
            ("feature_gain", self.feature_gain),
            ("novel_affinity", self.novel_affinity),
            ("offset_noise", self.offset_noise),
            ("proposal_jitter", self.proposal_jitter),
            ("ssl_noise", self.ssl_noise),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("{name} must be non-negative, got {v}")));
            }
        }
        Ok(())
    }
}

impl Config {
    pub fn validate(&self) -> Result<()> {
        self.mining.validate()?;
        self.world.validate()
    }

    /// Parse a config file body on top of the defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Config::default();
        let mut seen = std::collections::HashSet::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", lineno + 1)))?;
            let (key, value) = (key.trim(), value.trim());
            if !seen.insert(key.to_string()) {
                return Err(Error::Config(format!("line {}: duplicate key {key:?}", lineno + 1)));
            }
            cfg.set(key, value)
                .map_err(|e| Error::Config(format!("line {}: {e}", lineno + 1)))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|e| e.context(path.display().to_string()))
    }

    /// Set one key from its textual value. Does not re-validate.
    pub fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        if let Some(k) = MiningConfig::keys().iter().find(|k| k.name == key) {
            return (k.set)(&mut self.mining, value).map_err(|e| format!("{key}: {e}"));
        }
        if let Some(k) = WorldConfig::keys().iter().find(|k| k.name == key) {
            return (k.set)(&mut self.world, value).map_err(|e| format!("{key}: {e}"));
        }
        Err(format!("unknown key {key:?}"))
    }

    /// Render every key, annotating assumed defaults.
    pub fn render(&self) -> String {
        let mut out = String::new();
        let mut emit = |name: &str, value: String, assumed: bool| {
            if assumed {
                let _ = writeln!(out, "{name} = {value}  # assumed: true");
            } else {
                let _ = writeln!(out, "{name} = {value}");
            }
        };
        for k in MiningConfig::keys() {
            emit(k.name, (k.get)(&self.mining), k.assumed);
        }
        for k in WorldConfig::keys() {
            emit(k.name, (k.get)(&self.world), k.assumed);
        }
        out
    }

    pub fn key_names() -> impl Iterator<Item = &'static str> {
        MiningConfig::keys()
            .iter()
            .map(|k| k.name)
            .chain(WorldConfig::keys().iter().map(|k| k.name))
    }
}
