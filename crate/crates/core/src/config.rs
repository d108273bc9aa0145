//! Architecture configuration and the plain-text `key=value` format shared by
//! config files, CLI overrides and checkpoint metadata.

use std::fmt::Write as _;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::adapter::InsertionPlan;
use crate::error::{Error, Result};
use crate::tensor::DType;

/// Seed of the frozen random backbone that stands in for pretrained weights.
pub const BACKBONE_SEED: u64 = 0x4C4D_4F45;

/// Expert ranks picked when only an expert count is given.
pub const DESK_RANK_SERIES: [usize; 6] = [2, 4, 8, 12, 16, 24];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Profile {
    CrossSensor,
    CrossGeospatial,
}

impl Profile {
    pub fn name(self) -> &'static str {
        match self {
            Profile::CrossSensor => "cross-sensor",
            Profile::CrossGeospatial => "cross-geospatial",
        }
    }
}

impl FromStr for Profile {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cross-sensor" => Ok(Profile::CrossSensor),
            "cross-geospatial" => Ok(Profile::CrossGeospatial),
            other => Err(Error::Config(format!("unknown profile `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LandMoeConfig {
    pub image_size: usize,
    pub channels: usize,
    pub patch_size: usize,
    pub num_classes: usize,
    pub depth: usize,
    pub width: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    /// One rank per expert; the expert count is `ranks.len()`.
    pub ranks: Vec<usize>,
    pub tokens_per_expert: usize,
    pub top_k: usize,
    pub use_molte: bool,
    pub use_faf: bool,
    pub filter_init: f64,
    pub scale_by_gate: bool,
    pub plan: InsertionPlan,
    pub backbone_seed: u64,
    pub dtype: DType,
}

impl Default for LandMoeConfig {
    fn default() -> Self {
        Self::desk(Profile::CrossSensor)
    }
}

impl LandMoeConfig {
    /// Desk-scale model: 4 blocks of width 64 over 64×64×4 images cut into 8×8 patches.
    pub fn desk(profile: Profile) -> Self {
        let ranks = match profile {
            Profile::CrossSensor => vec![2, 4, 8],
            Profile::CrossGeospatial => vec![2, 4],
        };
        LandMoeConfig {
            image_size: 64,
            channels: 4,
            patch_size: 8,
            num_classes: 6,
            depth: 4,
            width: 64,
            heads: 4,
            mlp_ratio: 4,
            ranks,
            tokens_per_expert: 16,
            top_k: 1,
            use_molte: true,
            use_faf: true,
            filter_init: 0.1,
            scale_by_gate: false,
            plan: InsertionPlan::Full,
            backbone_seed: BACKBONE_SEED,
            dtype: DType::F64,
        }
    }

    /// Large-backbone dimensions (24 blocks, width 1024, 100 tokens per
    /// expert). Only used for parameter accounting.
    pub fn large(profile: Profile) -> Self {
        let ranks = match profile {
            Profile::CrossSensor => vec![8, 16, 32],
            Profile::CrossGeospatial => vec![8, 16],
        };
        LandMoeConfig {
            image_size: 512,
            channels: 4,
            patch_size: 16,
            num_classes: 24,
            depth: 24,
            width: 1024,
            heads: 16,
            tokens_per_expert: 100,
            ranks,
            ..Self::desk(profile)
        }
    }

    pub fn num_experts(&self) -> usize {
        self.ranks.len()
    }

    /// Patch grid extents `(h, w)`.
    pub fn grid(&self) -> (usize, usize) {
        let g = self.image_size / self.patch_size;
        (g, g)
    }

    pub fn num_tokens(&self) -> usize {
        let (h, w) = self.grid();
        h * w
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.patch_size == 0 || !self.image_size.is_multiple_of(self.patch_size) {
            return bad(format!(
                "image size {} is not divisible by patch size {}",
                self.image_size, self.patch_size
            ));
        }
        if self.width == 0 || self.heads == 0 || !self.width.is_multiple_of(self.heads) {
            return bad(format!("width {} not divisible into {} heads", self.width, self.heads));
        }
        if self.num_classes < 2 {
            return bad("at least two classes are required".into());
        }
        if self.depth == 0 || self.channels == 0 || self.mlp_ratio == 0 {
            return bad("depth, channels and mlp ratio must be positive".into());
        }
        if self.use_molte {
            if self.ranks.is_empty() {
                return bad("at least one expert is required".into());
            }
            let cap = self.tokens_per_expert.min(self.width);
            if let Some(r) = self.ranks.iter().find(|&&r| r == 0 || r > cap) {
                return bad(format!("expert rank {r} outside 1..={cap}"));
            }
            if self.top_k == 0 || self.top_k > self.ranks.len() {
                return bad(format!(
                    "top-k {} outside 1..={}",
                    self.top_k,
                    self.ranks.len()
                ));
            }
        }
        if !self.filter_init.is_finite() {
            return bad("filter init must be finite".into());
        }
        if !self.use_molte && !self.use_faf && !self.plan.layers(self.depth)?.is_empty() {
            return bad("adapters are planned but both branches are disabled".into());
        }
        Ok(())
    }

    /// Applies one `key=value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "image_size" => self.image_size = parse(key, value)?,
            "channels" => self.channels = parse(key, value)?,
            "patch_size" => self.patch_size = parse(key, value)?,
            "num_classes" => self.num_classes = parse(key, value)?,
            "depth" => self.depth = parse(key, value)?,
            "width" => self.width = parse(key, value)?,
            "heads" => self.heads = parse(key, value)?,
            "mlp_ratio" => self.mlp_ratio = parse(key, value)?,
            "ranks" => self.ranks = parse_list(key, value)?,
            "experts" => {
                let n: usize = parse(key, value)?;
                if n == 0 || n > DESK_RANK_SERIES.len() {
                    return Err(Error::Config(format!(
                        "experts must be in 1..={}",
                        DESK_RANK_SERIES.len()
                    )));
                }
                if self.ranks.len() != n {
                    self.ranks = DESK_RANK_SERIES[..n].to_vec();
                }
            }
            "tokens_per_expert" => self.tokens_per_expert = parse(key, value)?,
            "top_k" => self.top_k = parse(key, value)?,
            "use_molte" => self.use_molte = parse(key, value)?,
            "use_faf" => self.use_faf = parse(key, value)?,
            "filter_init" => self.filter_init = parse(key, value)?,
            "scale_by_gate" => self.scale_by_gate = parse(key, value)?,
            "plan" => self.plan = value.parse()?,
            "backbone_seed" => self.backbone_seed = parse(key, value)?,
            "dtype" => self.dtype = value.parse()?,
            other => return Err(Error::Config(format!("unknown model key `{other}`"))),
        }
        Ok(())
    }

    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        let ranks: Vec<String> = self.ranks.iter().map(usize::to_string).collect();
        let _ = writeln!(s, "image_size={}", self.image_size);
        let _ = writeln!(s, "channels={}", self.channels);
        let _ = writeln!(s, "patch_size={}", self.patch_size);
        let _ = writeln!(s, "num_classes={}", self.num_classes);
        let _ = writeln!(s, "depth={}", self.depth);
        let _ = writeln!(s, "width={}", self.width);
        let _ = writeln!(s, "heads={}", self.heads);
        let _ = writeln!(s, "mlp_ratio={}", self.mlp_ratio);
        let _ = writeln!(s, "ranks={}", ranks.join(","));
        let _ = writeln!(s, "tokens_per_expert={}", self.tokens_per_expert);
        let _ = writeln!(s, "top_k={}", self.top_k);
        let _ = writeln!(s, "use_molte={}", self.use_molte);
        let _ = writeln!(s, "use_faf={}", self.use_faf);
        let _ = writeln!(s, "filter_init={}", self.filter_init);
        let _ = writeln!(s, "scale_by_gate={}", self.scale_by_gate);
        let _ = writeln!(s, "plan={}", self.plan);
        let _ = writeln!(s, "backbone_seed={}", self.backbone_seed);
        let _ = writeln!(s, "dtype={}", self.dtype.name());
        s
    }

    pub fn from_kv(text: &str) -> Result<Self> {
        let mut cfg = LandMoeConfig::default();
        for (k, v) in parse_kv(text)? {
            cfg.set(&k, &v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

pub(crate) fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("invalid value `{value}` for `{key}`")))
}

pub(crate) fn parse_list(key: &str, value: &str) -> Result<Vec<usize>> {
    value
        .split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|s| parse(key, s))
        .collect()
}

/// Splits `key=value` lines. Blank lines and `#` comments are skipped.
pub fn parse_kv(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(Error::Config(format!(
                "line {}: expected key=value, got `{line}`",
                n + 1
            )));
        };
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}
