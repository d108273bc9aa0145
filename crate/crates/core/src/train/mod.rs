//! Optimization: the combined objective, AdamW, the training loop, gradient
//! checking and evaluation.

mod gradcheck;
mod loss;
mod optim;
mod parallel;
mod run;

use std::fmt::Write as _;
use std::str::FromStr;

pub use gradcheck::{grad_check, perturb_trainable, GradCheckOptions, GradCheckReport, GroupReport, Mismatch};
pub use loss::{batch_gradients, batch_loss, total_loss, total_loss_on, BatchGradients};
pub use optim::AdamW;
pub use parallel::{par_map, worker_count};
pub use run::{evaluate, train_run, EpochRecord, RunReport};

use crate::config::{parse, parse_kv, LandMoeConfig, Profile};
use crate::data::ExperimentSizes;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub model: LandMoeConfig,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub lambda: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub profile: Profile,
    pub train_scenes: usize,
    /// Scenes per target domain.
    pub test_scenes: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::desk(Profile::CrossSensor)
    }
}

impl TrainConfig {
    pub fn desk(profile: Profile) -> Self {
        TrainConfig {
            model: LandMoeConfig::desk(profile),
            learning_rate: 1e-2,
            batch_size: 8,
            epochs: 20,
            lambda: 0.01,
            weight_decay: 0.01,
            seed: 0,
            profile,
            train_scenes: 48,
            test_scenes: 8,
        }
    }

    pub fn sizes(&self) -> ExperimentSizes {
        ExperimentSizes {
            image_size: self.model.image_size,
            train_scenes: self.train_scenes,
            test_scenes: self.test_scenes,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let bad = |m: &str| Err(Error::Config(m.into()));
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return bad("learning rate must be finite and non-negative");
        }
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return bad("lambda must be finite and non-negative");
        }
        if !(self.weight_decay >= 0.0) || !self.weight_decay.is_finite() {
            return bad("weight decay must be finite and non-negative");
        }
        if self.batch_size < 2 {
            return bad("batch size must be at least 2");
        }
        if self.train_scenes < self.batch_size {
            return bad("fewer training scenes than one batch");
        }
        if self.test_scenes == 0 {
            return bad("at least one test scene per target domain is required");
        }
        Ok(())
    }

    /// Applies one `key=value` setting; keys not owned by training go to the
    /// model configuration.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "learning_rate" | "lr" => self.learning_rate = parse(key, value)?,
            "batch_size" | "batch" => self.batch_size = parse(key, value)?,
            "epochs" => self.epochs = parse(key, value)?,
            "lambda" => self.lambda = parse(key, value)?,
            "weight_decay" => self.weight_decay = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "profile" => {
                let p = Profile::from_str(value)?;
                if p != self.profile {
                    let ranks_default = LandMoeConfig::desk(self.profile).ranks;
                    if self.model.ranks == ranks_default {
                        self.model.ranks = LandMoeConfig::desk(p).ranks;
                    }
                }
                self.profile = p;
            }
            "train_scenes" => self.train_scenes = parse(key, value)?,
            "test_scenes" => self.test_scenes = parse(key, value)?,
            _ => self.model.set(key, value)?,
        }
        Ok(())
    }

    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "profile={}", self.profile.name());
        let _ = writeln!(s, "seed={}", self.seed);
        let _ = writeln!(s, "learning_rate={}", self.learning_rate);
        let _ = writeln!(s, "batch_size={}", self.batch_size);
        let _ = writeln!(s, "epochs={}", self.epochs);
        let _ = writeln!(s, "lambda={}", self.lambda);
        let _ = writeln!(s, "weight_decay={}", self.weight_decay);
        let _ = writeln!(s, "train_scenes={}", self.train_scenes);
        let _ = writeln!(s, "test_scenes={}", self.test_scenes);
        s + &self.model.to_kv()
    }

    /// Applies settings over `self`, without validating.
    pub fn apply_kv(&mut self, text: &str) -> Result<()> {
        for (k, v) in parse_kv(text)? {
            self.set(&k, &v)?;
        }
        Ok(())
    }

    pub fn from_kv(text: &str) -> Result<Self> {
        let mut cfg = TrainConfig::default();
        cfg.apply_kv(text)?;
        cfg.validate()?;
        Ok(cfg)
    }
}
