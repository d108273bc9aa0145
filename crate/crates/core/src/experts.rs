//! Rank-diversified low-rank token experts.
//!
//! Each expert owns a bank of `m` learnable `d`-dimensional tokens stored as
//! a factor pair `T = A·B` with `A ∈ R^{m×r}` and `B ∈ R^{r×d}`. A token `e`
//! routed to an expert is compared with that expert's bank,
//! `S = softmax(e·Tᵀ/√d)`, and receives the adjustment
//! `Δe = S·(T·W_T + b_T)`. The projection `(W_T, b_T)` is shared by all
//! experts of a layer.

use rand::Rng;

use crate::error::{shape_err, Result};
use crate::router::{gate_logits_on, route_on, GateParams, Mode, RoutingResult, TapeRouting};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Debug)]
pub struct LowRankExpert {
    pub a: Tensor,
    pub b: Tensor,
}

impl LowRankExpert {
    pub fn new(a: Tensor, b: Tensor) -> Result<Self> {
        let (m, r) = a.dims2()?;
        let (r2, d) = b.dims2()?;
        if r != r2 {
            return shape_err(format!("factor ranks differ: {r} vs {r2}"));
        }
        if r > m.min(d) {
            return shape_err(format!("rank {r} exceeds min({m}, {d})"));
        }
        Ok(LowRankExpert { a, b })
    }

    /// `A ~ N(0, 1/m)`, `B = 0`, so the bank starts at zero.
    pub fn init<R: Rng + ?Sized>(m: usize, d: usize, rank: usize, rng: &mut R) -> Self {
        LowRankExpert {
            a: Tensor::randn(&[m, rank], (1.0 / m as f64).sqrt(), rng),
            b: Tensor::zeros(&[rank, d]),
        }
    }

    pub fn rank(&self) -> usize {
        self.a.shape()[1]
    }

    pub fn tokens(&self) -> usize {
        self.a.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.b.shape()[1]
    }
}

/// Materialized token bank `T = A·B`.
pub fn materialize(e: &LowRankExpert) -> Result<Tensor> {
    crate::tensor::matmul(&e.a, &e.b)
}

#[derive(Clone, Debug)]
pub struct ExpertBank {
    pub experts: Vec<LowRankExpert>,
    pub w_t: Tensor,
    pub b_t: Tensor,
}

impl ExpertBank {
    pub fn new(experts: Vec<LowRankExpert>, w_t: Tensor, b_t: Tensor) -> Result<Self> {
        let Some(first) = experts.first() else {
            return shape_err("an expert bank needs at least one expert");
        };
        let (m, d) = (first.tokens(), first.width());
        if experts.iter().any(|e| e.tokens() != m || e.width() != d) {
            return shape_err("experts disagree on token count or width");
        }
        if w_t.dims2()? != (d, d) || b_t.dims2()? != (m, d) {
            return shape_err(format!(
                "shared projection must be {d}x{d} with a {m}x{d} bias, got {:?} and {:?}",
                w_t.shape(),
                b_t.shape()
            ));
        }
        Ok(ExpertBank { experts, w_t, b_t })
    }

    /// Default initialization: zero token banks, `W_T ~ N(0, 1/d)`, `b_T = 0`.
    pub fn init<R: Rng + ?Sized>(ranks: &[usize], m: usize, d: usize, rng: &mut R) -> Self {
        let experts = ranks
            .iter()
            .map(|&r| LowRankExpert::init(m, d, r, rng))
            .collect();
        ExpertBank {
            experts,
            w_t: Tensor::randn(&[d, d], (1.0 / d as f64).sqrt(), rng),
            b_t: Tensor::zeros(&[m, d]),
        }
    }

    pub fn tokens(&self) -> usize {
        self.experts[0].tokens()
    }

    pub fn width(&self) -> usize {
        self.experts[0].width()
    }
}

#[derive(Clone, Debug)]
pub struct MolteOutput {
    pub delta: Tensor,
    pub routing: RoutingResult,
}

/// `softmax(e·Tᵀ/√d)` for a single token `e ∈ R^d` against a bank `T ∈ R^{m×d}`.
pub fn affinity(e_tok: &Tensor, t: &Tensor, d_model: usize) -> Result<Tensor> {
    let (m, d) = t.dims2()?;
    if e_tok.numel() != d || d_model != d {
        return shape_err(format!(
            "token of {} values against a {m}x{d} bank with d_model {d_model}",
            e_tok.numel()
        ));
    }
    let logits: Vec<f64> = (0..m)
        .map(|j| {
            t.row(j)
                .iter()
                .zip(e_tok.data())
                .map(|(a, b)| a * b)
                .sum::<f64>()
                / (d_model as f64).sqrt()
        })
        .collect();
    crate::tensor::softmax(&Tensor::new(&[m], logits)?, 0)
}

/// `Δe = S·(T·W_T + b_T)`.
pub fn adjustment(s: &Tensor, t: &Tensor, w_t: &Tensor, b_t: &Tensor) -> Result<Tensor> {
    let (m, d) = t.dims2()?;
    if s.numel() != m || b_t.dims2()? != (m, d) {
        return shape_err("affinity, bank and bias disagree");
    }
    let proj = crate::tensor::matmul(t, w_t)?.add(b_t)?;
    let s_row = s.reshape(&[1, m])?;
    crate::tensor::matmul(&s_row, &proj)?.reshape(&[d])
}

/// Tape handles for one layer's experts, with the per-step materialized banks.
#[derive(Clone, Debug)]
pub struct BankVars {
    /// `T_k = A_k·B_k`, computed once per tape.
    pub banks: Vec<Var>,
    /// `T_k·W_T + b_T`.
    pub projected: Vec<Var>,
    pub width: usize,
}

impl BankVars {
    /// Materializes every expert from factor handles `(A_k, B_k)` and the shared projection.
    pub fn build(tape: &mut Tape, factors: &[(Var, Var)], w_t: Var, b_t: Var) -> Result<Self> {
        let mut banks = Vec::with_capacity(factors.len());
        let mut projected = Vec::with_capacity(factors.len());
        for &(a, b) in factors {
            let t = tape.matmul(a, b)?;
            let tw = tape.matmul(t, w_t)?;
            projected.push(tape.add(tw, b_t)?);
            banks.push(t);
        }
        let width = tape.dims2(w_t)?.0;
        Ok(BankVars {
            banks,
            projected,
            width,
        })
    }
}

/// Gate handles `(W_g, W_noise)` plus the top-k width.
#[derive(Clone, Copy, Debug)]
pub struct GateVars {
    pub w_gate: Var,
    pub w_noise: Var,
    pub k: usize,
}

/// Routes every token, dispatches it to its top-1 expert and assembles the
/// adjustment rows in the original token order.
pub fn molte_on(
    tape: &mut Tape,
    x: Var,
    bank: &BankVars,
    gate: GateVars,
    mode: Mode,
    seed: u64,
    scale_by_gate: bool,
) -> Result<(Var, TapeRouting)> {
    let (n, d) = tape.dims2(x)?;
    if d != bank.width {
        return shape_err(format!("tokens of width {d} for experts of width {}", bank.width));
    }
    let h = gate_logits_on(tape, x, gate.w_gate, gate.w_noise, mode, seed)?;
    let routing = route_on(tape, h, gate.k)?;
    if tape.dims2(routing.weights)?.1 != bank.banks.len() {
        return shape_err("gate width differs from the number of experts");
    }
    let inv_sqrt_d = 1.0 / (d as f64).sqrt();
    let mut delta: Option<Var> = None;
    for (k, (&t, &proj)) in bank.banks.iter().zip(&bank.projected).enumerate() {
        let idx: Vec<usize> = (0..n).filter(|&i| routing.top1[i] == k).collect();
        if idx.is_empty() {
            continue;
        }
        let e = tape.gather_rows(x, &idx)?;
        let logits = tape.matmul_nt(e, t)?;
        let logits = tape.scale(logits, inv_sqrt_d);
        let s = tape.softmax_rows(logits)?;
        let adj = tape.matmul(s, proj)?;
        let placed = tape.scatter_rows(adj, &idx, n)?;
        delta = Some(match delta {
            None => placed,
            Some(acc) => tape.add(acc, placed)?,
        });
    }
    let mut delta = delta.expect("every token is routed to some expert");
    if scale_by_gate {
        let g = tape.gather_cols(routing.weights, &routing.top1)?;
        delta = tape.mul_rows(delta, g)?;
    }
    Ok((delta, routing))
}

/// Plain-tensor entry point for one layer's mixture of token experts.
pub fn molte_forward(
    x: &Tensor,
    bank: &ExpertBank,
    gate: &GateParams,
    mode: Mode,
    seed: u64,
    scale_by_gate: bool,
) -> Result<MolteOutput> {
    if gate.num_experts() != bank.experts.len() {
        return shape_err(format!(
            "gate routes to {} experts, bank has {}",
            gate.num_experts(),
            bank.experts.len()
        ));
    }
    let mut tape = Tape::new(x.dtype());
    let xv = tape.constant(x);
    let factors: Vec<(Var, Var)> = bank
        .experts
        .iter()
        .map(|e| (tape.constant(&e.a), tape.constant(&e.b)))
        .collect();
    let w_t = tape.constant(&bank.w_t);
    let b_t = tape.constant(&bank.b_t);
    let vars = BankVars::build(&mut tape, &factors, w_t, b_t)?;
    let gv = GateVars {
        w_gate: tape.constant(&gate.w_gate),
        w_noise: tape.constant(&gate.w_noise),
        k: gate.k,
    };
    let (delta, routing) = molte_on(&mut tape, xv, &vars, gv, mode, seed, scale_by_gate)?;
    tape.check_finite()?;
    Ok(MolteOutput {
        delta: tape.tensor(delta),
        routing: routing.to_result(&tape),
    })
}
