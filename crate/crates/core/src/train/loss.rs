//! `L = CE + λ · Σ_layers balancing`, on one tape or split across images.
//!
//! The balancing term couples the images of a batch only through each
//! image's per-expert routed mass. [`batch_gradients`] therefore records
//! every image on its own tape, differentiates the balancing term with
//! respect to those masses on a small side tape, and seeds each image's
//! reverse sweep with `1/B` at its cross-entropy and `λ·∂bal/∂mass` at its
//! masses. The result equals the single-tape gradient exactly up to
//! summation order, and images can be processed in parallel.

use crate::adapter::LandMoeModel;
use crate::error::{contract_err, shape_err, Result};
use crate::rng::derive_seed;
use crate::router::{balancing_loss_on, Mode};
use crate::tensor::{BackwardFault, Tape, Tensor, Var};

use super::parallel::par_map;

fn check_records(n_images: usize, labels: usize, routing: &[usize], layers: usize) -> Result<()> {
    if n_images == 0 {
        return contract_err("empty batch");
    }
    if labels != n_images || routing.len() != n_images {
        return shape_err(format!(
            "{n_images} logit maps, {labels} label maps, {} routing lists",
            routing.len()
        ));
    }
    if let Some(&got) = routing.iter().find(|&&r| r != layers) {
        return contract_err(format!(
            "expected routing records from {layers} adapter layers, got {got}"
        ));
    }
    Ok(())
}

/// Records the objective on `tape`. `logits[i]` are image `i`'s patch
/// logits, `routing[i][j]` its gate matrix at adapter layer `j`.
#[allow(clippy::too_many_arguments)]
pub fn total_loss_on(
    tape: &mut Tape,
    logits: &[Var],
    labels: &[&[usize]],
    routing: &[Vec<Var>],
    layers: usize,
    lambda: f64,
    grid: (usize, usize),
    patch: usize,
) -> Result<Var> {
    let counts: Vec<usize> = routing.iter().map(Vec::len).collect();
    check_records(logits.len(), labels.len(), &counts, layers)?;
    let b = logits.len() as f64;
    let mut ce: Option<Var> = None;
    for (&l, y) in logits.iter().zip(labels) {
        let c = tape.pixel_cross_entropy(l, y, grid, patch)?;
        ce = Some(match ce {
            None => c,
            Some(acc) => tape.add(acc, c)?,
        });
    }
    let mut loss = tape.scale(ce.expect("non-empty batch"), 1.0 / b);
    for j in 0..layers {
        let per_image: Vec<Var> = routing.iter().map(|r| r[j]).collect();
        let bal = balancing_loss_on(tape, &per_image)?;
        let bal = tape.scale(bal, lambda);
        loss = tape.add(loss, bal)?;
    }
    Ok(loss)
}

/// Plain-tensor form of [`total_loss_on`].
pub fn total_loss(
    logits: &[Tensor],
    labels: &[&[usize]],
    routing: &[Vec<Tensor>],
    layers: usize,
    lambda: f64,
    grid: (usize, usize),
    patch: usize,
) -> Result<f64> {
    let mut tape = Tape::default();
    let lv: Vec<Var> = logits.iter().map(|t| tape.constant(t)).collect();
    let rv: Vec<Vec<Var>> = routing
        .iter()
        .map(|r| r.iter().map(|g| tape.constant(g)).collect())
        .collect();
    let loss = total_loss_on(&mut tape, &lv, labels, &rv, layers, lambda, grid, patch)?;
    tape.check_finite()?;
    Ok(tape.value(loss)[0])
}

struct ImagePass {
    tape: Tape,
    ce: Var,
    masses: Vec<Var>,
}

fn forward_image(
    model: &LandMoeModel,
    image: &Tensor,
    labels: &[usize],
    mode: Mode,
    seed: u64,
    fault: Option<BackwardFault>,
) -> Result<ImagePass> {
    let mut tape = Tape::new(model.cfg.dtype);
    tape.inject_fault(fault);
    let vars = model.bind(&mut tape)?;
    let out = model.forward_on(&mut tape, &vars, image, None, mode, seed)?;
    let ce = tape.pixel_cross_entropy(out.logits, labels, model.backbone.grid, model.backbone.patch)?;
    let masses = out
        .routing
        .iter()
        .map(|r| tape.sum_rows(r.weights))
        .collect::<Result<Vec<_>>>()?;
    tape.check_finite()?;
    Ok(ImagePass { tape, ce, masses })
}

fn forward_batch(
    model: &LandMoeModel,
    images: &[&Tensor],
    labels: &[&[usize]],
    mode: Mode,
    seed: u64,
    threads: usize,
    fault: Option<BackwardFault>,
) -> Result<Vec<ImagePass>> {
    let layers = model.adapters.iter().filter(|a| a.molte.is_some()).count();
    let counts = vec![layers; images.len()];
    check_records(images.len(), labels.len(), &counts, layers)?;
    par_map(images.len(), threads, |i| {
        forward_image(model, images[i], labels[i], mode, derive_seed(seed, &[i as u64]), fault)
    })
    .into_iter()
    .collect()
}

/// Balancing loss of each layer and its gradient with respect to every
/// image's mass vector: `(value_j, grad[j][i])`.
fn balance_terms(passes: &[ImagePass]) -> Result<Vec<(f64, Vec<Vec<f64>>)>> {
    let layers = passes[0].masses.len();
    let mut out = Vec::with_capacity(layers);
    for j in 0..layers {
        let mut side = Tape::default();
        let inputs: Vec<Var> = passes
            .iter()
            .map(|p| {
                let t = p.tape.tensor(p.masses[j]);
                side.input(&t)
            })
            .collect();
        let bal = balancing_loss_on(&mut side, &inputs)?;
        let grads = side.backward(bal)?;
        let per_image = inputs
            .iter()
            .map(|&v| grads.get(v).map_or_else(|| vec![0.0; side.value(v).len()], <[f64]>::to_vec))
            .collect();
        out.push((side.value(bal)[0], per_image));
    }
    Ok(out)
}

/// Objective value and parameter gradients over one batch.
#[derive(Clone, Debug)]
pub struct BatchGradients {
    pub loss: f64,
    pub ce: f64,
    /// Unweighted balancing loss summed over layers.
    pub balance: f64,
    /// Indexed by parameter id; `None` for frozen parameters.
    pub grads: Vec<Option<Vec<f64>>>,
}

impl BatchGradients {
    /// Replaces the stored gradient of every parameter with this batch's.
    pub fn store_into(&self, model: &mut LandMoeModel) {
        let ids: Vec<_> = model.store.ids().collect();
        for (id, g) in ids.into_iter().zip(&self.grads) {
            let p = model.store.get_mut(id);
            p.zero_grad();
            if let Some(v) = g {
                p.accumulate_grad(v);
            }
        }
    }
}

/// Objective value only.
pub fn batch_loss(
    model: &LandMoeModel,
    images: &[&Tensor],
    labels: &[&[usize]],
    lambda: f64,
    mode: Mode,
    seed: u64,
    threads: usize,
) -> Result<f64> {
    let passes = forward_batch(model, images, labels, mode, seed, threads, None)?;
    let b = passes.len() as f64;
    let ce: f64 = passes.iter().map(|p| p.tape.value(p.ce)[0]).sum::<f64>() / b;
    let bal: f64 = balance_terms(&passes)?.iter().map(|(v, _)| v).sum();
    Ok(ce + lambda * bal)
}

/// Objective and its gradient with respect to every trainable parameter.
/// Image `i` draws its gate noise from `derive_seed(seed, [i])`.
#[allow(clippy::too_many_arguments)]
pub fn batch_gradients(
    model: &LandMoeModel,
    images: &[&Tensor],
    labels: &[&[usize]],
    lambda: f64,
    mode: Mode,
    seed: u64,
    threads: usize,
    fault: Option<BackwardFault>,
) -> Result<BatchGradients> {
    let passes = forward_batch(model, images, labels, mode, seed, threads, fault)?;
    let b = passes.len() as f64;
    let ce: f64 = passes.iter().map(|p| p.tape.value(p.ce)[0]).sum::<f64>() / b;
    let terms = balance_terms(&passes)?;
    let balance: f64 = terms.iter().map(|(v, _)| v).sum();

    let trainable = model.trainable_ids();
    let per_image: Vec<Result<Vec<Option<Vec<f64>>>>> = par_map(passes.len(), threads, |i| {
        let p = &passes[i];
        let mut seeds = vec![(p.ce, vec![1.0 / b])];
        for (j, (_, g)) in terms.iter().enumerate() {
            if lambda != 0.0 {
                seeds.push((p.masses[j], g[i].iter().map(|v| lambda * v).collect()));
            }
        }
        let grads = p.tape.backward_seeded(&seeds)?;
        Ok(trainable
            .iter()
            .map(|&id| p.tape.param_var(id).and_then(|v| grads.get(v)).map(<[f64]>::to_vec))
            .collect())
    });

    let mut grads: Vec<Option<Vec<f64>>> = vec![None; model.store.len()];
    for img in per_image {
        for (&id, g) in trainable.iter().zip(img?) {
            let slot = &mut grads[id.index()];
            let n = model.store.get(id).numel();
            let acc = slot.get_or_insert_with(|| vec![0.0; n]);
            if let Some(g) = g {
                acc.iter_mut().zip(g).for_each(|(a, v)| *a += v);
            }
        }
    }
    Ok(BatchGradients {
        loss: ce + lambda * balance,
        ce,
        balance,
        grads,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapter::InsertionPlan;
    use crate::config::{LandMoeConfig, Profile};
    use crate::tensor::ParamId;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn lambda_zero_is_cross_entropy() {
        let logits = vec![
            Tensor::new(&[2, 2], vec![1.0, 0.0, 0.0, 2.0]).unwrap(),
            Tensor::new(&[2, 2], vec![0.5, 0.5, 1.0, 0.0]).unwrap(),
        ];
        let labels: Vec<&[usize]> = vec![&[0, 1], &[1, 0]];
        let g = Tensor::new(&[1, 2], vec![1.0, 3.0]).unwrap();
        let h = Tensor::new(&[1, 2], vec![3.0, 1.0]).unwrap();
        let routing = vec![vec![g], vec![h]];
        let ce = total_loss(&logits, &labels, &routing, 1, 0.0, (1, 2), 1).unwrap();

        let lse = |a: f64, b: f64| (a.exp() + b.exp()).ln();
        let img0 = ((lse(1.0, 0.0) - 1.0) + (lse(0.0, 2.0) - 2.0)) / 2.0;
        let img1 = ((lse(0.5, 0.5) - 0.5) + (lse(1.0, 0.0) - 1.0)) / 2.0;
        assert!((ce - (img0 + img1) / 2.0).abs() < 1e-14);

        let lam = 0.3;
        let full = total_loss(&logits, &labels, &routing, 1, lam, (1, 2), 1).unwrap();
        assert!((full - (ce + 0.5 * lam)).abs() < 1e-14);

        assert!(total_loss(&logits, &labels, &[vec![], vec![]], 1, lam, (1, 2), 1).is_err());
    }

    fn tiny_model() -> LandMoeModel {
        let cfg = LandMoeConfig {
            image_size: 8,
            patch_size: 4,
            width: 8,
            heads: 2,
            depth: 2,
            ranks: vec![1, 2],
            tokens_per_expert: 3,
            top_k: 2,
            num_classes: 3,
            plan: InsertionPlan::Full,
            ..LandMoeConfig::desk(Profile::CrossSensor)
        };
        let mut m = LandMoeModel::new(cfg, 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let ids: Vec<ParamId> = m.trainable_ids();
        for id in ids {
            let t = m.store.get_mut(id);
            let shape = t.shape().to_vec();
            let noise = Tensor::randn(&shape, 0.4, &mut rng);
            t.data_mut().iter_mut().zip(noise.data()).for_each(|(a, b)| *a += b);
        }
        m
    }

    /// Split-tape gradients agree with a single tape holding the whole batch.
    #[test]
    fn split_gradients_match_single_tape() {
        let m = tiny_model();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let images: Vec<Tensor> = (0..3)
            .map(|_| Tensor::from_fn(&[8, 8, m.cfg.channels], |_| rand::Rng::random::<f64>(&mut rng)))
            .collect();
        let labels: Vec<Vec<usize>> = (0..3)
            .map(|_| (0..64).map(|_| rand::Rng::random_range(&mut rng, 0..3)).collect())
            .collect();
        let lrefs: Vec<&[usize]> = labels.iter().map(Vec::as_slice).collect();
        let irefs: Vec<&Tensor> = images.iter().collect();
        let split = batch_gradients(&m, &irefs, &lrefs, 0.7, Mode::Train, 4, 2, None).unwrap();

        let mut tape = Tape::default();
        let vars = m.bind(&mut tape).unwrap();
        let mut logits = Vec::new();
        let mut routing = Vec::new();
        for (i, img) in images.iter().enumerate() {
            let out = m
                .forward_on(&mut tape, &vars, img, None, Mode::Train, derive_seed(4, &[i as u64]))
                .unwrap();
            logits.push(out.logits);
            routing.push(out.routing.iter().map(|r| r.weights).collect());
        }
        let loss = total_loss_on(&mut tape, &logits, &lrefs, &routing, 2, 0.7, (2, 2), 4).unwrap();
        assert!((tape.value(loss)[0] - split.loss).abs() < 1e-12);
        let grads = tape.backward(loss).unwrap();
        for id in m.trainable_ids() {
            let single = grads.get(tape.param_var(id).unwrap()).unwrap();
            let ours = split.grads[id.index()].as_ref().unwrap();
            for (a, b) in single.iter().zip(ours) {
                assert!((a - b).abs() <= 1e-12 * (1.0 + a.abs()), "{}", m.store.name(id));
            }
        }
        let value = batch_loss(&m, &irefs, &lrefs, 0.7, Mode::Train, 4, 1).unwrap();
        assert_eq!(value, split.loss);
    }
}
