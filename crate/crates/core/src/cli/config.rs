use std::fmt::Write as _;
use std::path::PathBuf;
use std::str::FromStr;

use crate::data::PhantomSpec;
use crate::error::{Error, Result};
use crate::model::{check_crop_dims, ModelConfig};
use crate::train::{AdamConfig, MaskDist, TrainConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum Preset {
    /// 60/20 phantoms at grid 48, crop 32, 120 epochs.
    Desk,
    /// Full-size crops (128) and 1000 epochs.
    Paper,
    /// One phantom, full masks, no augmentation, 500 steps.
    Overfit1,
}

/// Every knob of a run, settable as `key = value` lines.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub grid: usize,
    pub n_train: usize,
    pub n_eval: usize,
    pub wt_radius: (f64, f64),
    pub tc_ratio: (f64, f64),
    pub et_ratio: (f64, f64),
    pub center_jitter: f64,
    pub noise_sigma: f64,
    pub crop: usize,
    pub widths: [usize; 5],
    pub num_heads: usize,
    pub ffn_mult: usize,
    pub ufe_depth: usize,
    pub no_mfd: bool,
    pub no_ufe: bool,
    pub no_cmf: bool,
    pub no_convblock: bool,
    pub pairwise_cmf: bool,
    pub epochs: usize,
    pub max_epoch: usize,
    pub initial_lr: f64,
    pub p: f64,
    pub weight_decay: f64,
    pub lambda_mfd: f64,
    pub mask_dist: MaskDist,
    pub augment: bool,
    /// Save a checkpoint every this many steps (0: only at the end).
    pub checkpoint_every: u64,
    pub data_dir: PathBuf,
    pub run_dir: PathBuf,
}

pub const KEYS: &[&str] = &[
    "seed",
    "grid",
    "n_train",
    "n_eval",
    "wt_radius",
    "tc_ratio",
    "et_ratio",
    "center_jitter",
    "noise_sigma",
    "crop",
    "widths",
    "num_heads",
    "ffn_mult",
    "ufe_depth",
    "no_mfd",
    "no_ufe",
    "no_cmf",
    "no_convblock",
    "pairwise_cmf",
    "epochs",
    "max_epoch",
    "initial_lr",
    "p",
    "weight_decay",
    "lambda_mfd",
    "mask_dist",
    "augment",
    "checkpoint_every",
    "data_dir",
    "run_dir",
];

impl Default for RunConfig {
    fn default() -> Self {
        Self::preset(Preset::Desk)
    }
}

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {v:?}")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected a boolean, got {v:?}"))),
    }
}

fn parse_pair(key: &str, v: &str) -> Result<(f64, f64)> {
    let parts: Vec<&str> = v.split(',').map(str::trim).collect();
    match parts[..] {
        [a, b] => Ok((parse(key, a)?, parse(key, b)?)),
        _ => Err(Error::Config(format!("{key}: expected `lo,hi`, got {v:?}"))),
    }
}

impl RunConfig {
    pub fn preset(preset: Preset) -> Self {
        let phantom = PhantomSpec::default();
        let train = TrainConfig::default();
        let model = ModelConfig::default();
        let desk = Self {
            seed: 0,
            grid: phantom.grid,
            n_train: 60,
            n_eval: 20,
            wt_radius: phantom.wt_radius,
            tc_ratio: phantom.tc_ratio,
            et_ratio: phantom.et_ratio,
            center_jitter: phantom.center_jitter,
            noise_sigma: phantom.noise_sigma,
            crop: train.crop,
            widths: model.widths,
            num_heads: model.num_heads,
            ffn_mult: model.ffn_mult,
            ufe_depth: model.ufe_depth,
            no_mfd: false,
            no_ufe: false,
            no_cmf: false,
            no_convblock: false,
            pairwise_cmf: false,
            epochs: train.epochs,
            max_epoch: train.max_epoch,
            initial_lr: train.initial_lr,
            p: train.power,
            weight_decay: train.adam.weight_decay,
            lambda_mfd: train.lambda_mfd,
            mask_dist: train.mask_dist,
            augment: train.augment,
            checkpoint_every: 0,
            data_dir: "data".into(),
            run_dir: "run".into(),
        };
        match preset {
            Preset::Desk => desk,
            Preset::Paper => Self {
                grid: 160,
                crop: 128,
                wt_radius: (30.0, 43.0),
                center_jitter: 20.0,
                epochs: 1000,
                max_epoch: 1000,
                ..desk
            },
            Preset::Overfit1 => Self {
                n_train: 1,
                n_eval: 1,
                epochs: 500,
                max_epoch: 500,
                initial_lr: 1e-3,
                mask_dist: MaskDist::Full,
                augment: false,
                ..desk
            },
        }
    }

    /// Sets one key from its text value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "seed" => self.seed = parse(key, v)?,
            "grid" => self.grid = parse(key, v)?,
            "n_train" => self.n_train = parse(key, v)?,
            "n_eval" => self.n_eval = parse(key, v)?,
            "wt_radius" => self.wt_radius = parse_pair(key, v)?,
            "tc_ratio" => self.tc_ratio = parse_pair(key, v)?,
            "et_ratio" => self.et_ratio = parse_pair(key, v)?,
            "center_jitter" => self.center_jitter = parse(key, v)?,
            "noise_sigma" => self.noise_sigma = parse(key, v)?,
            "crop" => self.crop = parse(key, v)?,
            "widths" => {
                let w: Vec<usize> = v.split(',').map(|s| parse(key, s.trim())).collect::<Result<_>>()?;
                self.widths = w
                    .try_into()
                    .map_err(|_| Error::Config(format!("widths: expected 5 comma-separated values, got {v:?}")))?;
            }
            "num_heads" => self.num_heads = parse(key, v)?,
            "ffn_mult" => self.ffn_mult = parse(key, v)?,
            "ufe_depth" => self.ufe_depth = parse(key, v)?,
            "no_mfd" => self.no_mfd = parse_bool(key, v)?,
            "no_ufe" => self.no_ufe = parse_bool(key, v)?,
            "no_cmf" => self.no_cmf = parse_bool(key, v)?,
            "no_convblock" => self.no_convblock = parse_bool(key, v)?,
            "pairwise_cmf" => self.pairwise_cmf = parse_bool(key, v)?,
            "epochs" => self.epochs = parse(key, v)?,
            "max_epoch" => self.max_epoch = parse(key, v)?,
            "initial_lr" => self.initial_lr = parse(key, v)?,
            "p" => self.p = parse(key, v)?,
            "weight_decay" => self.weight_decay = parse(key, v)?,
            "lambda_mfd" => self.lambda_mfd = parse(key, v)?,
            "mask_dist" => self.mask_dist = v.parse().map_err(|e| Error::Config(format!("mask_dist: {e}")))?,
            "augment" => self.augment = parse_bool(key, v)?,
            "checkpoint_every" => self.checkpoint_every = parse(key, v)?,
            "data_dir" => self.data_dir = v.into(),
            "run_dir" => self.run_dir = v.into(),
            other => return Err(Error::Config(format!("unknown key {other:?}"))),
        }
        Ok(())
    }

    /// Applies `key = value` lines. Blank lines and `#` comments are skipped.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", n + 1)))?;
            self.set(k.trim(), v).map_err(|e| match e {
                Error::Config(msg) => Error::Config(format!("line {}: {msg}", n + 1)),
                other => other,
            })?;
        }
        Ok(())
    }

    /// Checks every range; the error lists each offending key.
    pub fn validate(&self) -> Result<()> {
        let mut problems: Vec<String> = Vec::new();
        let mut bad = |keys: &str, msg: String| problems.push(format!("{keys}: {msg}"));
        if self.crop > self.grid {
            bad("crop, grid", format!("crop {} exceeds grid {}", self.crop, self.grid));
        }
        if check_crop_dims(&[self.crop]).is_err() {
            bad(
                "crop",
                format!("{} is not a multiple of 16 (or a power of two below 16)", self.crop),
            );
        }
        if self.n_train == 0 {
            bad("n_train", "must be positive".into());
        }
        if self.n_eval == 0 {
            bad("n_eval", "must be positive".into());
        }
        if let Err(e) = self.model_config().validate() {
            bad("widths, num_heads, ffn_mult, ufe_depth", e.to_string());
        }
        if self.epochs == 0 {
            bad("epochs", "must be positive".into());
        }
        if self.max_epoch == 0 {
            bad("max_epoch", "must be positive".into());
        }
        if !(self.initial_lr > 0.0 && self.initial_lr.is_finite()) {
            bad("initial_lr", format!("{} must be positive", self.initial_lr));
        }
        if !(self.p > 0.0 && self.p.is_finite()) {
            bad("p", format!("{} must be positive", self.p));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            bad("weight_decay", format!("{} must be >= 0", self.weight_decay));
        }
        if !(self.lambda_mfd >= 0.0 && self.lambda_mfd.is_finite()) {
            bad("lambda_mfd", format!("{} must be >= 0", self.lambda_mfd));
        }
        if let MaskDist::Bernoulli(q) = self.mask_dist {
            if !(0.0..1.0).contains(&q) {
                bad("mask_dist", format!("drop probability {q} must lie in [0, 1)"));
            }
        }
        if let Err(e) = self.phantom_spec().validate() {
            bad(
                "grid, wt_radius, tc_ratio, et_ratio, center_jitter, noise_sigma",
                e.to_string(),
            );
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            widths: self.widths,
            num_heads: self.num_heads,
            ffn_mult: self.ffn_mult,
            ufe_depth: self.ufe_depth,
            mfd: !self.no_mfd,
            ufe: !self.no_ufe,
            cmf: !self.no_cmf,
            convblock: !self.no_convblock,
            pairwise_cmf: self.pairwise_cmf,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            model: self.model_config(),
            crop: self.crop,
            epochs: self.epochs,
            max_epoch: self.max_epoch,
            initial_lr: self.initial_lr,
            power: self.p,
            adam: AdamConfig {
                weight_decay: self.weight_decay,
                ..AdamConfig::default()
            },
            lambda_mfd: self.lambda_mfd,
            mask_dist: self.mask_dist,
            augment: self.augment,
            seed: self.seed,
        }
    }

    pub fn phantom_spec(&self) -> PhantomSpec {
        PhantomSpec {
            grid: self.grid,
            wt_radius: self.wt_radius,
            tc_ratio: self.tc_ratio,
            et_ratio: self.et_ratio,
            center_jitter: self.center_jitter,
            noise_sigma: self.noise_sigma,
            seed: self.seed,
            ..PhantomSpec::default()
        }
    }

    /// `key = value` text that [`RunConfig::apply_text`] reads back.
    pub fn to_text(&self) -> String {
        let pair = |(a, b): (f64, f64)| format!("{a},{b}");
        let w: Vec<String> = self.widths.iter().map(usize::to_string).collect();
        let values = [
            self.seed.to_string(),
            self.grid.to_string(),
            self.n_train.to_string(),
            self.n_eval.to_string(),
            pair(self.wt_radius),
            pair(self.tc_ratio),
            pair(self.et_ratio),
            self.center_jitter.to_string(),
            self.noise_sigma.to_string(),
            self.crop.to_string(),
            w.join(","),
            self.num_heads.to_string(),
            self.ffn_mult.to_string(),
            self.ufe_depth.to_string(),
            self.no_mfd.to_string(),
            self.no_ufe.to_string(),
            self.no_cmf.to_string(),
            self.no_convblock.to_string(),
            self.pairwise_cmf.to_string(),
            self.epochs.to_string(),
            self.max_epoch.to_string(),
            self.initial_lr.to_string(),
            self.p.to_string(),
            self.weight_decay.to_string(),
            self.lambda_mfd.to_string(),
            self.mask_dist.to_string(),
            self.augment.to_string(),
            self.checkpoint_every.to_string(),
            self.data_dir.display().to_string(),
            self.run_dir.display().to_string(),
        ];
        let mut s = String::new();
        for (k, v) in KEYS.iter().zip(values) {
            writeln!(s, "{k} = {v}").expect("string write");
        }
        s
    }
}
