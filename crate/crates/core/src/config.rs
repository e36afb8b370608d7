//! Flat `key = value` run configuration covering data generation and
//! training.

use std::fmt::Display;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::dataset::GeneratorConfig;
use crate::error::{Error, Result};
use crate::losses::LossFlags;
use crate::trainer::TrainConfig;

/// Every recognised key with a one-line description.
pub const KEYS: &[(&str, &str)] = &[
    ("seed", "seed for data generation, initialization and shuffling"),
    ("num_clips", "clips to generate"),
    ("classes", "motion classes K"),
    ("frames", "frames per clip T"),
    ("height", "frame height"),
    ("width", "frame width"),
    ("channels", "colour channels"),
    ("shapes_per_clip", "moving shapes per clip"),
    ("speed_min", "slowest shape speed, pixels per frame"),
    ("speed_max", "fastest shape speed, pixels per frame"),
    ("size_min", "smallest shape extent in pixels"),
    ("size_max", "largest shape extent in pixels"),
    ("val_fraction", "share of clips in the validation split"),
    ("block_size", "codec block size"),
    ("search_range", "codec motion search range"),
    ("epochs", "IFS training epochs"),
    ("batch_size", "IFS mini-batch size"),
    ("base_lr", "initial learning rate of the cosine schedule"),
    ("beta1", "Adam beta1"),
    ("beta2", "Adam beta2"),
    ("eps", "Adam epsilon"),
    ("tasks", "enabled tasks: comma list of app, cat, mot"),
    ("regs", "enabled regularizers: comma list of adv, color, or none"),
    ("swap_adv_labels", "use real=1 fake=0 adversarial targets"),
    ("d_every", "discriminator update period in steps"),
    ("input_mode", "generator input: compressed, raw or motion_only"),
    ("base_width", "width of the first layer of every network"),
    ("n_res_blocks", "residual blocks in each encoder-decoder"),
    ("flip", "random horizontal flips with label swap"),
    ("max_train_clips", "use only this many training clips, 0 for all"),
    ("max_steps", "stop IFS training after this many steps, 0 for no limit"),
    ("cls_epochs", "downstream classifier epochs"),
    ("cls_lr", "downstream classifier learning rate"),
    ("cls_batch_size", "downstream classifier mini-batch size"),
    ("eval_samples", "windows averaged per video at evaluation"),
];

/// Values behind [`KEYS`].
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunConfig {
    pub data: GeneratorConfig,
    pub train: TrainConfig,
}

fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: Display,
{
    value.parse().map_err(|e| Error::Config(format!("{key}: cannot parse `{value}`: {e}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected true or false, got `{value}`"))),
    }
}

impl RunConfig {
    pub fn is_key(key: &str) -> bool {
        KEYS.iter().any(|(k, _)| *k == key)
    }

    /// Sets one key. Shared keys (seed, frames, block_size) feed both
    /// halves.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        let d = &mut self.data;
        let t = &mut self.train;
        match key {
            "seed" => {
                d.seed = parse_value(key, v)?;
                t.seed = d.seed;
            }
            "num_clips" => d.num_clips = parse_value(key, v)?,
            "classes" => d.classes = parse_value(key, v)?,
            "frames" => {
                d.frames = parse_value(key, v)?;
                t.frames = d.frames;
            }
            "height" => d.height = parse_value(key, v)?,
            "width" => d.width = parse_value(key, v)?,
            "channels" => d.channels = parse_value(key, v)?,
            "shapes_per_clip" => d.shapes_per_clip = parse_value(key, v)?,
            "speed_min" => d.speed_range.0 = parse_value(key, v)?,
            "speed_max" => d.speed_range.1 = parse_value(key, v)?,
            "size_min" => d.size_range.0 = parse_value(key, v)?,
            "size_max" => d.size_range.1 = parse_value(key, v)?,
            "val_fraction" => d.val_fraction = parse_value(key, v)?,
            "block_size" => {
                d.block_size = parse_value(key, v)?;
                t.block_size = d.block_size;
            }
            "search_range" => t.search_range = parse_value(key, v)?,
            "epochs" => t.epochs = parse_value(key, v)?,
            "batch_size" => t.batch_size = parse_value(key, v)?,
            "base_lr" => t.base_lr = parse_value(key, v)?,
            "beta1" => t.adam.beta1 = parse_value(key, v)?,
            "beta2" => t.adam.beta2 = parse_value(key, v)?,
            "eps" => t.adam.eps = parse_value(key, v)?,
            "tasks" => t.flags = LossFlags::parse(v, &t.flags.regs_string())?,
            "regs" => t.flags = LossFlags::parse(&t.flags.tasks_string(), v)?,
            "swap_adv_labels" => t.swap_adv_labels = parse_bool(key, v)?,
            "d_every" => t.d_every = parse_value(key, v)?,
            "input_mode" => t.input_mode = v.parse()?,
            "base_width" => t.base_width = parse_value(key, v)?,
            "n_res_blocks" => t.n_res_blocks = parse_value(key, v)?,
            "flip" => t.flip = parse_bool(key, v)?,
            "max_train_clips" => t.max_train_clips = parse_value(key, v)?,
            "max_steps" => t.max_steps = parse_value(key, v)?,
            "cls_epochs" => t.cls_epochs = parse_value(key, v)?,
            "cls_lr" => t.cls_lr = parse_value(key, v)?,
            "cls_batch_size" => t.cls_batch_size = parse_value(key, v)?,
            "eval_samples" => t.eval_samples = parse_value(key, v)?,
            other => return Err(Error::Config(format!("unknown key `{other}`"))),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        let d = &self.data;
        let t = &self.train;
        Some(match key {
            "seed" => d.seed.to_string(),
            "num_clips" => d.num_clips.to_string(),
            "classes" => d.classes.to_string(),
            "frames" => d.frames.to_string(),
            "height" => d.height.to_string(),
            "width" => d.width.to_string(),
            "channels" => d.channels.to_string(),
            "shapes_per_clip" => d.shapes_per_clip.to_string(),
            "speed_min" => d.speed_range.0.to_string(),
            "speed_max" => d.speed_range.1.to_string(),
            "size_min" => d.size_range.0.to_string(),
            "size_max" => d.size_range.1.to_string(),
            "val_fraction" => d.val_fraction.to_string(),
            "block_size" => d.block_size.to_string(),
            "search_range" => t.search_range.to_string(),
            "epochs" => t.epochs.to_string(),
            "batch_size" => t.batch_size.to_string(),
            "base_lr" => t.base_lr.to_string(),
            "beta1" => t.adam.beta1.to_string(),
            "beta2" => t.adam.beta2.to_string(),
            "eps" => t.adam.eps.to_string(),
            "tasks" => t.flags.tasks_string(),
            "regs" => t.flags.regs_string(),
            "swap_adv_labels" => t.swap_adv_labels.to_string(),
            "d_every" => t.d_every.to_string(),
            "input_mode" => t.input_mode.as_str().to_string(),
            "base_width" => t.base_width.to_string(),
            "n_res_blocks" => t.n_res_blocks.to_string(),
            "flip" => t.flip.to_string(),
            "max_train_clips" => t.max_train_clips.to_string(),
            "max_steps" => t.max_steps.to_string(),
            "cls_epochs" => t.cls_epochs.to_string(),
            "cls_lr" => t.cls_lr.to_string(),
            "cls_batch_size" => t.cls_batch_size.to_string(),
            "eval_samples" => t.eval_samples.to_string(),
            _ => return None,
        })
    }

    /// Parses config text on top of the defaults. Errors carry the 1-based
    /// line number.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let at = |message: String| Error::Parse { line: i + 1, message };
            let (k, v) = line.split_once('=').ok_or_else(|| at(format!("expected `key = value`, got `{line}`")))?;
            self.set(k.trim(), v).map_err(|e| at(e.to_string()))?;
        }
        Ok(())
    }

    /// Defaults, then the file if given, then overrides in order; validated.
    pub fn load(path: Option<&Path>, overrides: &[(String, String)]) -> Result<Self> {
        let mut cfg = Self::default();
        if let Some(p) = path {
            let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            cfg.apply_text(&text).map_err(|e| Error::Load { path: p.to_path_buf(), source: Box::new(e) })?;
        }
        for (k, v) in overrides {
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.train.validate()?;
        if self.train.search_range > crate::codec::MAX_SEARCH_RANGE {
            return Err(Error::Config(format!("search_range above {}", crate::codec::MAX_SEARCH_RANGE)));
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        KEYS.iter().map(|(k, _)| format!("{k} = {}\n", self.get(k).expect("listed key"))).collect()
    }
}
