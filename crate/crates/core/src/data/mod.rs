//! Synthetic multispectral scenes with controllable sensor and geographic
//! shift, and the segmentation metrics used to score them.

mod metrics;
mod profile;

use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

pub use metrics::{ConfusionMatrix, Metrics};
pub use profile::{shifted_sensor, Domain, Experiment, ExperimentSizes};

use crate::checkpoint::{load_records, save_records, Payload, Record};
use crate::error::{contract_err, shape_err, Error, Result};
use crate::rng::rng_for;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    /// `H×W×C`, reflectance-like.
    pub image: Tensor,
    /// Row-major `H×W` class indices.
    pub labels: Vec<usize>,
    pub domain_tag: String,
}

impl Scene {
    pub fn height(&self) -> usize {
        self.image.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.image.shape()[1]
    }

    pub fn channels(&self) -> usize {
        self.image.shape()[2]
    }

    /// Pixel count per class.
    pub fn histogram(&self, k: usize) -> Vec<usize> {
        let mut h = vec![0; k];
        for &l in &self.labels {
            h[l] += 1;
        }
        h
    }
}

/// Geographic appearance: which classes are common, and how bright the scene is.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeoModel {
    pub class_prior: Vec<f64>,
    pub illumination: f64,
    pub texture_seed: u64,
}

impl GeoModel {
    pub fn uniform(k: usize) -> Self {
        GeoModel {
            class_prior: vec![1.0 / k as f64; k],
            illumination: 1.0,
            texture_seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let sum: f64 = self.class_prior.iter().sum();
        if self.class_prior.iter().any(|&p| !(p >= 0.0)) || (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Config("class prior is not on the simplex".into()));
        }
        if !(self.illumination > 0.0) || !self.illumination.is_finite() {
            return Err(Error::Config("illumination must be positive".into()));
        }
        if self.class_prior.iter().filter(|&&p| p > 0.0).count() < 2 {
            return contract_err("class prior puts all mass on one class; scenes need two classes");
        }
        Ok(())
    }
}

/// Per-pixel band mixing, gain, offset, noise and optional box blur.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SensorModel {
    pub name: String,
    /// `C×C`, row `i` gives output band `i` as a mix of input bands.
    pub response: Vec<Vec<f64>>,
    pub gain: Vec<f64>,
    pub bias: Vec<f64>,
    pub noise_sigma: f64,
    pub blur_radius: usize,
}

impl SensorModel {
    pub fn identity(c: usize) -> Self {
        SensorModel {
            name: "identity".into(),
            response: (0..c)
                .map(|i| (0..c).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
                .collect(),
            gain: vec![1.0; c],
            bias: vec![0.0; c],
            noise_sigma: 0.0,
            blur_radius: 0,
        }
    }

    pub fn channels(&self) -> usize {
        self.gain.len()
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.channels();
        if self.response.len() != c || self.response.iter().any(|r| r.len() != c) || self.bias.len() != c {
            return Err(Error::Config(format!("sensor `{}` has inconsistent band counts", self.name)));
        }
        for (i, row) in self.response.iter().enumerate() {
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > 1e-9 {
                return Err(Error::Config(format!(
                    "sensor `{}` response row {i} sums to {s}",
                    self.name
                )));
            }
        }
        if self.gain.iter().any(|&g| !(g > 0.0)) {
            return Err(Error::Config(format!("sensor `{}` has a non-positive gain", self.name)));
        }
        if !(self.noise_sigma >= 0.0) {
            return Err(Error::Config(format!("sensor `{}` has negative noise", self.name)));
        }
        Ok(())
    }

    /// Total off-diagonal response mass.
    pub fn mixing_mass(&self) -> f64 {
        self.response
            .iter()
            .enumerate()
            .map(|(i, r)| r.iter().enumerate().filter(|&(j, _)| j != i).map(|(_, v)| v).sum::<f64>())
            .sum()
    }
}

/// Smallest Euclidean distance between two class signatures.
pub const MIN_SIGNATURE_GAP: f64 = 0.25;

/// Scene generator with class signatures fixed for one experiment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneGenerator {
    /// `K` rows of `C` band values.
    pub signatures: Vec<Vec<f64>>,
    /// Voronoi sites per scene.
    pub sites: usize,
    /// Per-pixel texture standard deviation.
    pub texture_sigma: f64,
    /// Per-region brightness jitter standard deviation.
    pub region_sigma: f64,
}

impl SceneGenerator {
    /// Draws `K` signatures over `C` bands from `experiment_seed`, redrawing
    /// any that lands within [`MIN_SIGNATURE_GAP`] of an earlier one.
    pub fn new(experiment_seed: u64, k: usize, c: usize) -> Self {
        let mut rng = rng_for(experiment_seed, &[0x5167]);
        let mut signatures: Vec<Vec<f64>> = Vec::with_capacity(k);
        for attempt in 0.. {
            if signatures.len() == k {
                break;
            }
            let cand: Vec<f64> = (0..c).map(|_| rng.random_range(0.1..0.8)).collect();
            let far = signatures.iter().all(|s| {
                s.iter().zip(&cand).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt() >= MIN_SIGNATURE_GAP
            });
            // Dense requests cannot always be met; give up on the gap then.
            if far || attempt > 10_000 {
                signatures.push(cand);
            }
        }
        SceneGenerator {
            signatures,
            sites: 10,
            texture_sigma: 0.04,
            region_sigma: 0.05,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.signatures.len()
    }

    pub fn channels(&self) -> usize {
        self.signatures[0].len()
    }

    /// Labels and unclipped image `illumination · (signature + texture)`.
    pub fn generate_raw(&self, seed: u64, geo: &GeoModel, size: usize) -> Result<Scene> {
        let k = self.num_classes();
        if geo.class_prior.len() != k {
            return shape_err(format!(
                "prior over {} classes for {k} signatures",
                geo.class_prior.len()
            ));
        }
        if k < 2 || size == 0 || self.sites < 2 {
            return Err(Error::Config("scenes need two classes, two sites and a positive size".into()));
        }
        geo.validate()?;
        let c = self.channels();
        let mut rng = rng_for(seed, &[geo.texture_seed, 0x5343]);

        let sites: Vec<(f64, f64)> = (0..self.sites)
            .map(|_| (rng.random_range(0.0..size as f64), rng.random_range(0.0..size as f64)))
            .collect();
        let mut owner = vec![0usize; size * size];
        for y in 0..size {
            for x in 0..size {
                let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                let mut best = (f64::INFINITY, 0);
                for (s, &(sx, sy)) in sites.iter().enumerate() {
                    let d = (px - sx).powi(2) + (py - sy).powi(2);
                    if d < best.0 {
                        best = (d, s);
                    }
                }
                owner[y * size + x] = best.1;
            }
        }
        let present: Vec<usize> = {
            let mut seen = vec![false; self.sites];
            owner.iter().for_each(|&o| seen[o] = true);
            (0..self.sites).filter(|&s| seen[s]).collect()
        };
        let site_class = loop {
            let cls: Vec<usize> = (0..self.sites).map(|_| sample_class(&geo.class_prior, &mut rng)).collect();
            let first = cls[present[0]];
            if present.iter().any(|&s| cls[s] != first) {
                break cls;
            }
        };
        let jitter = Normal::new(0.0, self.region_sigma).expect("finite sigma");
        let region: Vec<f64> = (0..self.sites).map(|_| jitter.sample(&mut rng)).collect();
        let tex = Normal::new(0.0, self.texture_sigma).expect("finite sigma");

        let labels: Vec<usize> = owner.iter().map(|&o| site_class[o]).collect();
        let mut data = Vec::with_capacity(size * size * c);
        for (p, &o) in owner.iter().enumerate() {
            let sig = &self.signatures[labels[p]];
            for s in sig {
                let v = s * (1.0 + region[o]) + tex.sample(&mut rng);
                data.push(geo.illumination * v);
            }
        }
        Ok(Scene {
            image: Tensor::new(&[size, size, c], data)?,
            labels,
            domain_tag: "source".into(),
        })
    }

    /// [`Self::generate_raw`] clipped to `[0, 1]`.
    pub fn generate(&self, seed: u64, geo: &GeoModel, size: usize) -> Result<Scene> {
        let mut s = self.generate_raw(seed, geo, size)?;
        s.image.data_mut().iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
        Ok(s)
    }
}

fn sample_class<R: Rng>(prior: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, &p) in prior.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    prior.iter().rposition(|&p| p > 0.0).unwrap_or(0)
}

/// `clip(gain ⊙ (blur(image) · Rᵀ) + bias + noise, 0, 1)`; labels untouched.
pub fn apply_sensor(scene: &Scene, m: &SensorModel, seed: u64) -> Result<Scene> {
    m.validate()?;
    let (h, w, c) = (scene.height(), scene.width(), scene.channels());
    if m.channels() != c {
        return shape_err(format!("{}-band sensor on a {c}-band scene", m.channels()));
    }
    let src = if m.blur_radius > 0 {
        box_blur(scene.image.data(), h, w, c, m.blur_radius)
    } else {
        scene.image.data().to_vec()
    };
    let mut rng = rng_for(seed, &[0x5345_4E53]);
    let noise = Normal::new(0.0, m.noise_sigma.max(f64::MIN_POSITIVE)).expect("finite sigma");
    let mut out = Vec::with_capacity(src.len());
    for px in src.chunks(c) {
        for i in 0..c {
            let mixed: f64 = m.response[i].iter().zip(px).map(|(r, v)| r * v).sum();
            let mut v = m.gain[i] * mixed + m.bias[i];
            if m.noise_sigma > 0.0 {
                v += noise.sample(&mut rng);
            }
            out.push(v.clamp(0.0, 1.0));
        }
    }
    Ok(Scene {
        image: Tensor::new(&[h, w, c], out)?,
        labels: scene.labels.clone(),
        domain_tag: m.name.clone(),
    })
}

fn box_blur(src: &[f64], h: usize, w: usize, c: usize, r: usize) -> Vec<f64> {
    let mut out = vec![0.0; src.len()];
    for y in 0..h {
        for x in 0..w {
            let (y0, y1) = (y.saturating_sub(r), (y + r).min(h - 1));
            let (x0, x1) = (x.saturating_sub(r), (x + r).min(w - 1));
            let n = ((y1 - y0 + 1) * (x1 - x0 + 1)) as f64;
            for ch in 0..c {
                let mut s = 0.0;
                for yy in y0..=y1 {
                    for xx in x0..=x1 {
                        s += src[(yy * w + xx) * c + ch];
                    }
                }
                out[(y * w + x) * c + ch] = s / n;
            }
        }
    }
    out
}

/// Sidecar written next to an exported scene.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneMeta {
    pub domain_tag: String,
    pub seed: u64,
    pub generator: SceneGenerator,
    pub geo: GeoModel,
    pub sensor: Option<SensorModel>,
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("json")
}

/// Writes the scene container and its JSON sidecar. Returns both paths.
pub fn save_scene(path: &Path, scene: &Scene, meta: &SceneMeta) -> Result<Vec<PathBuf>> {
    let (h, w) = (scene.height(), scene.width());
    let labels = scene.labels.iter().map(|&l| l as i64).collect();
    save_records(
        path,
        &[
            Record::float("image", scene.image.clone()),
            Record::int("labels", &[h, w], labels),
        ],
    )?;
    let side = sidecar_path(path);
    std::fs::write(&side, serde_json::to_string_pretty(meta)? + "\n")?;
    Ok(vec![path.to_path_buf(), side])
}

pub fn load_scene(path: &Path) -> Result<(Scene, SceneMeta)> {
    let recs = load_records(path)?;
    let find = |n: &str| {
        recs.iter()
            .find(|r| r.name == n)
            .ok_or_else(|| Error::Format(format!("scene file lacks `{n}`")))
    };
    let Payload::Float(image) = &find("image")?.payload else {
        return Err(Error::Format("`image` is not floating point".into()));
    };
    let Payload::Int(shape, labels) = &find("labels")?.payload else {
        return Err(Error::Format("`labels` is not integer".into()));
    };
    if shape[..] != image.shape()[..2] {
        return Err(Error::Format("label map and image disagree".into()));
    }
    let labels = labels
        .iter()
        .map(|&l| usize::try_from(l).map_err(|_| Error::Data(format!("negative label {l}"))))
        .collect::<Result<_>>()?;
    let meta: SceneMeta = serde_json::from_str(&std::fs::read_to_string(sidecar_path(path))?)?;
    Ok((
        Scene {
            image: image.clone(),
            labels,
            domain_tag: meta.domain_tag.clone(),
        },
        meta,
    ))
}
