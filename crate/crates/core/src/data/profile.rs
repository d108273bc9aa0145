//! The two canonical experiments: one source domain and several shifted
//! target domains sharing a scene generator.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{apply_sensor, GeoModel, Scene, SceneGenerator, SensorModel};
use crate::config::Profile;
use crate::error::Result;
use crate::rng::{derive_seed, rng_for};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Domain {
    pub name: String,
    pub geo: GeoModel,
    pub sensor: SensorModel,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExperimentSizes {
    pub image_size: usize,
    pub train_scenes: usize,
    /// Scenes per target domain.
    pub test_scenes: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Experiment {
    pub profile: Profile,
    pub seed: u64,
    pub generator: SceneGenerator,
    pub source: Domain,
    pub targets: Vec<Domain>,
}

/// A sensor whose bands leak `alpha` of their response into the neighbouring
/// bands, with the given gain spread, offset and noise.
#[allow(clippy::too_many_arguments)]
pub fn shifted_sensor<R: Rng>(
    name: &str,
    c: usize,
    alpha: f64,
    gain_spread: f64,
    bias_spread: f64,
    noise_sigma: f64,
    blur_radius: usize,
    rng: &mut R,
) -> SensorModel {
    let mut response = vec![vec![0.0; c]; c];
    for (i, row) in response.iter_mut().enumerate() {
        let nbrs: Vec<usize> = [i.wrapping_sub(1), i + 1].into_iter().filter(|&j| j < c).collect();
        row[i] = 1.0 - alpha;
        for &j in &nbrs {
            row[j] = alpha / nbrs.len() as f64;
        }
    }
    SensorModel {
        name: name.to_string(),
        response,
        gain: (0..c).map(|_| 1.0 + rng.random_range(-gain_spread..=gain_spread)).collect(),
        bias: (0..c).map(|_| rng.random_range(-bias_spread..=bias_spread)).collect(),
        noise_sigma,
        blur_radius,
    }
}

impl Experiment {
    pub fn new(profile: Profile, seed: u64, k: usize, c: usize) -> Self {
        let generator = SceneGenerator::new(seed, k, c);
        let mut rng = rng_for(seed, &[0x0044_4F4D]);
        let uniform = GeoModel::uniform(k);
        let source = Domain {
            name: "source".into(),
            geo: uniform.clone(),
            sensor: SensorModel::identity(c),
        };
        let targets = match profile {
            Profile::CrossSensor => [(0.15, 0.05, 0.02, 0), (0.25, 0.1, 0.03, 0), (0.35, 0.15, 0.04, 1)]
                .iter()
                .enumerate()
                .map(|(i, &(alpha, g, b, blur))| {
                    let name = format!("sensor{}", i + 1);
                    Domain {
                        sensor: shifted_sensor(&name, c, alpha, g, b, 0.01, blur, &mut rng),
                        name,
                        geo: GeoModel {
                            texture_seed: 1 + i as u64,
                            ..uniform.clone()
                        },
                    }
                })
                .collect(),
            Profile::CrossGeospatial => [(0.8, 2.0), (1.25, 0.5)]
                .iter()
                .enumerate()
                .map(|(i, &(illum, skew))| {
                    let raw: Vec<f64> = (0..k).map(|j| f64::powf(skew, j as f64 / (k - 1) as f64 * 2.0 - 1.0) * rng.random_range(0.5..1.5)).collect();
                    let s: f64 = raw.iter().sum();
                    Domain {
                        name: format!("region{}", i + 1),
                        geo: GeoModel {
                            class_prior: raw.iter().map(|v| v / s).collect(),
                            illumination: illum,
                            texture_seed: 1 + i as u64,
                        },
                        sensor: SensorModel::identity(c),
                    }
                })
                .collect(),
        };
        Experiment {
            profile,
            seed,
            generator,
            source,
            targets,
        }
    }

    fn scenes(&self, domain: &Domain, stream: u64, count: usize, size: usize) -> Result<Vec<Scene>> {
        (0..count)
            .map(|i| {
                let s = derive_seed(self.seed, &[stream, i as u64]);
                let raw = self.generator.generate(s, &domain.geo, size)?;
                apply_sensor(&raw, &domain.sensor, derive_seed(s, &[1]))
            })
            .collect()
    }

    /// Labeled training scenes.
    pub fn source_scenes(&self, sizes: &ExperimentSizes) -> Result<Vec<Scene>> {
        self.scenes(&self.source, 0, sizes.train_scenes, sizes.image_size)
    }

    /// Held-out source-domain scenes.
    pub fn source_eval_scenes(&self, sizes: &ExperimentSizes) -> Result<Vec<Scene>> {
        self.scenes(&self.source, 1, sizes.test_scenes, sizes.image_size)
    }

    /// Every target domain's test scenes, domain by domain.
    pub fn target_scenes(&self, sizes: &ExperimentSizes) -> Result<Vec<Scene>> {
        let mut out = Vec::new();
        for (i, d) in self.targets.iter().enumerate() {
            out.extend(self.scenes(d, 2 + i as u64, sizes.test_scenes, sizes.image_size)?);
        }
        Ok(out)
    }
}
