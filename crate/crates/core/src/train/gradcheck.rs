use std::fmt;

use rand::seq::index::sample;
use rand::Rng;

use super::loss::{batch_gradients, batch_loss};
use super::parallel::par_map;
use crate::adapter::{LandMoeModel, ParamGroup};
use crate::config::LandMoeConfig;
use crate::error::{Error, Result};
use crate::rng::rng_for;
use crate::router::Mode;
use crate::tensor::{finite_diff_coords, BackwardFault, DType, ParamId, Tensor};

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub tol: f64,
    pub lambda: f64,
    /// Coordinates sampled per parameter group; smaller groups are checked whole.
    pub coords_per_group: usize,
    pub h: f64,
    pub seed: u64,
    pub batch: usize,
    pub threads: usize,
    #[doc(hidden)]
    pub fault: Option<BackwardFault>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            tol: 1e-4,
            lambda: 0.1,
            coords_per_group: 64,
            h: 1e-4,
            seed: 0,
            batch: 2,
            threads: 1,
            fault: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Mismatch {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GroupReport {
    pub group: ParamGroup,
    pub checked: usize,
    pub max_rel_err: f64,
    /// Largest analytic magnitude seen, to tell a vacuous pass from a real one.
    pub max_abs_grad: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub tol: f64,
    pub groups: Vec<GroupReport>,
    pub failures: Vec<Mismatch>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }

    pub fn max_rel_err(&self) -> f64 {
        self.groups.iter().map(|g| g.max_rel_err).fold(0.0, f64::max)
    }
}

impl fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for g in &self.groups {
            writeln!(
                f,
                "{:<10} coords={:<4} max_rel_err={:.3e} max_abs_grad={:.3e}",
                g.group.name(),
                g.checked,
                g.max_rel_err,
                g.max_abs_grad
            )?;
        }
        for m in &self.failures {
            writeln!(
                f,
                "FAIL {}[{}] analytic={:.6e} numeric={:.6e} rel_err={:.3e}",
                m.param, m.index, m.analytic, m.numeric, m.rel_err
            )?;
        }
        write!(
            f,
            "{} (tol {:.1e}, max rel err {:.3e})",
            if self.passed() { "PASS" } else { "FAIL" },
            self.tol,
            self.max_rel_err()
        )
    }
}

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-6)
}

/// Moves every trainable parameter off its initial value so that no
/// gradient is trivially zero.
pub fn perturb_trainable(model: &mut LandMoeModel, seed: u64, std: f64) {
    let mut rng = rng_for(seed, &[0x4743]);
    for id in model.trainable_ids() {
        let t = model.store.get_mut(id);
        let dtype = t.dtype();
        for v in t.data_mut() {
            *v = dtype.round(*v + std * rng.random_range(-1.0..1.0));
        }
    }
}

/// Compares the analytic gradient of the training objective with central
/// differences on a randomized model and batch. Gate noise is drawn from a
/// fixed seed so the objective is deterministic.
pub fn grad_check(cfg: &LandMoeConfig, opts: &GradCheckOptions) -> Result<GradCheckReport> {
    if cfg.dtype != DType::F64 {
        return Err(Error::Config("gradient checking requires dtype f64".into()));
    }
    let mut model = LandMoeModel::new(cfg.clone(), opts.seed)?;
    perturb_trainable(&mut model, opts.seed, 0.5);

    let mut rng = rng_for(opts.seed, &[0x4744]);
    let s = cfg.image_size;
    let images: Vec<Tensor> = (0..opts.batch)
        .map(|_| Tensor::from_fn(&[s, s, cfg.channels], |_| rng.random::<f64>()))
        .collect();
    let labels: Vec<Vec<usize>> = (0..opts.batch)
        .map(|_| (0..s * s).map(|_| rng.random_range(0..cfg.num_classes)).collect())
        .collect();
    let im: Vec<&Tensor> = images.iter().collect();
    let lb: Vec<&[usize]> = labels.iter().map(Vec::as_slice).collect();
    let noise_seed = opts.seed ^ 0x006e_6f69_7365;

    let analytic = batch_gradients(&model, &im, &lb, opts.lambda, Mode::Train, noise_seed, opts.threads, opts.fault)?;

    let mut probes: Vec<(ParamGroup, ParamId, usize)> = Vec::new();
    for group in ParamGroup::TRAINABLE {
        let coords: Vec<(ParamId, usize)> = model
            .trainable_ids()
            .into_iter()
            .filter(|&id| ParamGroup::of(model.store.name(id)) == Some(group))
            .flat_map(|id| (0..model.store.get(id).numel()).map(move |j| (id, j)))
            .collect();
        if coords.len() <= opts.coords_per_group {
            probes.extend(coords.into_iter().map(|(id, j)| (group, id, j)));
        } else {
            for k in sample(&mut rng, coords.len(), opts.coords_per_group) {
                let (id, j) = coords[k];
                probes.push((group, id, j));
            }
        }
    }

    let numeric = par_map(probes.len(), opts.threads, |p| -> Result<f64> {
        let (_, id, j) = probes[p];
        let mut m = model.clone();
        let theta = model.store.get(id).clone();
        let v = finite_diff_coords(
            |t| {
                m.store.get_mut(id).data_mut().copy_from_slice(t.data());
                batch_loss(&m, &im, &lb, opts.lambda, Mode::Train, noise_seed, 1)
            },
            &theta,
            &[j],
            opts.h,
        )?;
        Ok(v[0])
    });

    let mut groups: Vec<GroupReport> = Vec::new();
    let mut failures = Vec::new();
    for ((group, id, j), n) in probes.iter().copied().zip(numeric) {
        let n = n?;
        let a = analytic.grads[id.index()].as_ref().map_or(0.0, |g| g[j]);
        let e = rel_err(a, n);
        if !groups.last().is_some_and(|g| g.group == group) {
            groups.push(GroupReport {
                group,
                checked: 0,
                max_rel_err: 0.0,
                max_abs_grad: 0.0,
            });
        }
        let g = groups.last_mut().expect("pushed");
        g.checked += 1;
        g.max_rel_err = g.max_rel_err.max(e);
        g.max_abs_grad = g.max_abs_grad.max(a.abs());
        if !(e < opts.tol) {
            failures.push(Mismatch {
                param: model.store.name(id).to_string(),
                index: j,
                analytic: a,
                numeric: n,
                rel_err: e,
            });
        }
    }
    Ok(GradCheckReport {
        tol: opts.tol,
        groups,
        failures,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapter::InsertionPlan;
    use crate::config::Profile;

    fn tiny() -> LandMoeConfig {
        LandMoeConfig {
            image_size: 8,
            patch_size: 4,
            width: 8,
            heads: 2,
            depth: 2,
            ranks: vec![1, 2],
            tokens_per_expert: 3,
            top_k: 2,
            scale_by_gate: true,
            plan: InsertionPlan::Full,
            ..LandMoeConfig::desk(Profile::CrossSensor)
        }
    }

    #[test]
    fn tiny_model_passes_and_fault_fails() {
        let opts = GradCheckOptions {
            coords_per_group: 16,
            ..GradCheckOptions::default()
        };
        let r = grad_check(&tiny(), &opts).unwrap();
        assert!(r.passed(), "{r}");
        assert_eq!(r.groups.len(), 5);
        assert!(r.groups.iter().all(|g| g.max_abs_grad > 0.0), "{r}");

        let bad = GradCheckOptions {
            fault: Some(BackwardFault::SoftmaxNoCorrection),
            ..opts
        };
        let r = grad_check(&tiny(), &bad).unwrap();
        assert!(!r.passed());
        assert!(r.to_string().contains("FAIL"));
    }
}
