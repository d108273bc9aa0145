//! Noisy top-k gating over token experts and the batch-level expert
//! balancing loss.
//!
//! Logits are `H = x·W_g + ε ⊙ softplus(x·W_noise)` with `ε ~ N(0, 1)` drawn
//! per token and expert in training mode and `ε = 0` at evaluation. Each row
//! keeps its `k` largest logits (the rest become `-inf`) before a softmax.
//! The balancing loss sums, over experts, the squared coefficient of
//! variation of each expert's routed mass across the images of a batch.

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{contract_err, shape_err, Error, Result};
use crate::rng::rng_for;
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Debug)]
pub struct GateParams {
    pub w_gate: Tensor,
    pub w_noise: Tensor,
    pub k: usize,
}

impl GateParams {
    pub fn new(w_gate: Tensor, w_noise: Tensor, k: usize) -> Result<Self> {
        let (d, e) = w_gate.dims2()?;
        if w_noise.dims2()? != (d, e) {
            return shape_err(format!(
                "gate {:?} and noise {:?} matrices disagree",
                w_gate.shape(),
                w_noise.shape()
            ));
        }
        check_k(k, e)?;
        Ok(GateParams { w_gate, w_noise, k })
    }

    pub fn num_experts(&self) -> usize {
        self.w_gate.shape()[1]
    }
}

fn check_k(k: usize, experts: usize) -> Result<()> {
    if k == 0 || k > experts {
        return Err(Error::Config(format!("top-k {k} outside 1..={experts}")));
    }
    Ok(())
}

#[derive(Clone, Debug)]
pub struct RoutingResult {
    /// Gate weights `G`, one simplex row per token.
    pub weights: Tensor,
    pub top1: Vec<usize>,
    /// Pre-mask logits `H`.
    pub raw_logits: Tensor,
}

/// Routing state recorded on a tape.
#[derive(Clone, Debug)]
pub struct TapeRouting {
    pub weights: Var,
    pub logits: Var,
    pub top1: Vec<usize>,
}

impl TapeRouting {
    pub fn to_result(&self, tape: &Tape) -> RoutingResult {
        RoutingResult {
            weights: tape.tensor(self.weights),
            top1: self.top1.clone(),
            raw_logits: tape.tensor(self.logits),
        }
    }
}

/// Standard-normal noise for an `n × e` logit matrix, reproducible from `seed`.
pub fn gate_noise(n: usize, e: usize, seed: u64) -> Tensor {
    let mut rng = rng_for(seed, &[0x006E_6F69_7365]);
    Tensor::from_fn(&[n, e], |_| StandardNormal.sample(&mut rng))
}

/// Records `H` on the tape.
pub fn gate_logits_on(
    tape: &mut Tape,
    x: Var,
    w_gate: Var,
    w_noise: Var,
    mode: Mode,
    seed: u64,
) -> Result<Var> {
    let clean = tape.matmul(x, w_gate)?;
    match mode {
        Mode::Eval => Ok(clean),
        Mode::Train => {
            let raw = tape.matmul(x, w_noise)?;
            let spread = tape.softplus(raw);
            let (n, e) = tape.dims2(clean)?;
            let eps = tape.constant(&gate_noise(n, e, seed));
            let noisy = tape.mul(eps, spread)?;
            tape.add(clean, noisy)
        }
    }
}

/// Top-k mask, softmax and top-1 extraction on the tape.
pub fn route_on(tape: &mut Tape, h: Var, k: usize) -> Result<TapeRouting> {
    let (_, e) = tape.dims2(h)?;
    check_k(k, e)?;
    let masked = tape.topk_mask(h, k)?;
    let weights = tape.softmax_rows(masked)?;
    let top1 = argmax_rows(tape.value(weights), e);
    Ok(TapeRouting {
        weights,
        logits: h,
        top1,
    })
}

/// Row-wise argmax; ties go to the lowest index.
pub fn argmax_rows(values: &[f64], cols: usize) -> Vec<usize> {
    values
        .chunks(cols)
        .map(|row| {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate().skip(1) {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// Balancing loss on the tape from per-image gate matrices of one layer.
pub fn balancing_loss_on(tape: &mut Tape, batch_scores: &[Var]) -> Result<Var> {
    if batch_scores.len() < 2 {
        return contract_err(format!(
            "balancing loss needs a batch of at least 2, got {}",
            batch_scores.len()
        ));
    }
    let masses = batch_scores
        .iter()
        .map(|&g| tape.sum_rows(g))
        .collect::<Result<Vec<_>>>()?;
    let stacked = tape.concat_rows(&masses)?;
    tape.cv_squared(stacked)
}

/// `H` for a token matrix `x[N×d]`.
pub fn gate_logits(x: &Tensor, p: &GateParams, mode: Mode, seed: u64) -> Result<Tensor> {
    let mut tape = Tape::new(x.dtype());
    let xv = tape.constant(x);
    let wg = tape.constant(&p.w_gate);
    let wn = tape.constant(&p.w_noise);
    let h = gate_logits_on(&mut tape, xv, wg, wn, mode, seed)?;
    tape.check_finite()?;
    Ok(tape.tensor(h))
}

/// Keeps the top `k` logits of every row, softmaxes, and records the argmax.
pub fn route(h: &Tensor, k: usize) -> Result<RoutingResult> {
    let mut tape = Tape::new(h.dtype());
    let hv = tape.constant(h);
    let r = route_on(&mut tape, hv, k)?;
    Ok(r.to_result(&tape))
}

/// Balancing loss over a batch of `N×N_e` gate matrices for one layer.
pub fn balancing_loss(batch_scores: &[Tensor]) -> Result<f64> {
    let mut tape = Tape::default();
    let vars: Vec<Var> = batch_scores.iter().map(|g| tape.constant(g)).collect();
    if let Some(first) = batch_scores.first() {
        let e = first.dims2()?.1;
        for g in batch_scores {
            if g.dims2()?.1 != e {
                return shape_err("gate matrices disagree on the expert count");
            }
        }
    }
    let l = balancing_loss_on(&mut tape, &vars)?;
    Ok(tape.value(l)[0])
}
