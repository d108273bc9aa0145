//! Land-MoE layers and their injection into a frozen transformer.
//!
//! One adapter layer refines the output `X` of a backbone block:
//! the mixture of token experts produces `ΔX̄`, the frequency filter maps
//! `Z = X + ΔX̄` to `ΔX = irfft2(rfft2(Z) ⊙ W_filter)`, and the next block
//! receives `X + ΔX`.

mod backbone;
mod head;
mod model;

use std::fmt;
use std::str::FromStr;

pub use backbone::{patchify, ToyBackbone};
pub use head::{argmax_labels, head_predict, upsample_nearest, HeadParams};
pub use model::{
    count_trainable_params, AdapterIds, ForwardOutput, LandMoeModel, ModelVars, MolteIds,
    ParamCount, ParamGroup,
};

use crate::error::{shape_err, Error, Result};
use crate::experts::{molte_on, BankVars, ExpertBank, GateVars};
use crate::faf::{faf_on, FrequencyFilter};
use crate::router::{GateParams, Mode, RoutingResult, TapeRouting};
use crate::tensor::{Tape, Tensor, Var};

/// Which backbone blocks get an adapter after them. Indices are 0-based.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum InsertionPlan {
    /// No adapters.
    Freeze,
    /// After every block.
    Full,
    /// After the first `q` blocks; `0` means a quarter of the depth (at least one).
    Shallow(usize),
    /// After the last `q` blocks; `0` means a quarter of the depth (at least one).
    Deep(usize),
    Specific(Vec<usize>),
}

impl InsertionPlan {
    /// Sorted block indices, validated against `depth`.
    pub fn layers(&self, depth: usize) -> Result<Vec<usize>> {
        let quarter = |q: usize| if q == 0 { (depth / 4).max(1) } else { q };
        let out: Vec<usize> = match self {
            InsertionPlan::Freeze => vec![],
            InsertionPlan::Full => (0..depth).collect(),
            InsertionPlan::Shallow(q) => (0..quarter(*q)).collect(),
            InsertionPlan::Deep(q) => {
                let q = quarter(*q);
                (depth.saturating_sub(q)..depth).collect()
            }
            InsertionPlan::Specific(list) => {
                let mut v = list.clone();
                v.sort_unstable();
                v.dedup();
                if v.len() != list.len() {
                    return Err(Error::Config("specific plan lists a layer twice".into()));
                }
                if v.is_empty() {
                    return Err(Error::Config("specific plan lists no layers".into()));
                }
                v
            }
        };
        if let Some(&bad) = out.iter().find(|&&i| i >= depth) {
            return Err(Error::Config(format!(
                "plan layer {bad} outside a backbone of depth {depth}"
            )));
        }
        if let InsertionPlan::Shallow(q) | InsertionPlan::Deep(q) = self {
            if *q > depth {
                return Err(Error::Config(format!("plan wants {q} of {depth} layers")));
            }
        }
        Ok(out)
    }
}

impl fmt::Display for InsertionPlan {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            InsertionPlan::Freeze => write!(f, "freeze"),
            InsertionPlan::Full => write!(f, "full"),
            InsertionPlan::Shallow(0) => write!(f, "shallow"),
            InsertionPlan::Shallow(q) => write!(f, "shallow:{q}"),
            InsertionPlan::Deep(0) => write!(f, "deep"),
            InsertionPlan::Deep(q) => write!(f, "deep:{q}"),
            InsertionPlan::Specific(v) => {
                let s: Vec<String> = v.iter().map(usize::to_string).collect();
                write!(f, "specific:{}", s.join(","))
            }
        }
    }
}

impl FromStr for InsertionPlan {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (head, arg) = match s.split_once(':') {
            Some((h, a)) => (h, Some(a)),
            None => (s, None),
        };
        let count = |a: Option<&str>| -> Result<usize> {
            a.map_or(Ok(0), |v| crate::config::parse("plan", v))
        };
        match head {
            "freeze" | "none" if arg.is_none() => Ok(InsertionPlan::Freeze),
            "full" if arg.is_none() => Ok(InsertionPlan::Full),
            "shallow" => Ok(InsertionPlan::Shallow(count(arg)?)),
            "deep" => Ok(InsertionPlan::Deep(count(arg)?)),
            "specific" => {
                let list = crate::config::parse_list("plan", arg.unwrap_or(""))?;
                Ok(InsertionPlan::Specific(list))
            }
            _ => Err(Error::Config(format!("unknown insertion plan `{s}`"))),
        }
    }
}

/// One adapter layer over plain tensors: experts and gate of its own, plus a
/// reference to the model-wide frequency filter.
#[derive(Clone, Debug)]
pub struct LandMoeLayer<'a> {
    pub bank: ExpertBank,
    pub gate: GateParams,
    pub filter: &'a FrequencyFilter,
}

impl<'a> LandMoeLayer<'a> {
    pub fn new(bank: ExpertBank, gate: GateParams, filter: &'a FrequencyFilter) -> Result<Self> {
        if bank.width() != filter.channels() {
            return shape_err(format!(
                "expert width {} differs from filter channels {}",
                bank.width(),
                filter.channels()
            ));
        }
        if gate.num_experts() != bank.experts.len() || gate.w_gate.shape()[0] != bank.width() {
            return shape_err("gate does not match the expert bank");
        }
        Ok(LandMoeLayer { bank, gate, filter })
    }
}

/// Tape handles of one adapter layer. Either branch may be absent for ablations.
#[derive(Clone, Debug)]
pub struct AdapterVars {
    pub molte: Option<(BankVars, GateVars)>,
    pub filter: Option<Var>,
}

/// Records one adapter layer. With both branches, returns
/// `faf(X + ΔX̄)`. Without the filter the adjustment is `ΔX̄`; without the
/// experts it is `faf(X)`.
pub fn adapter_on(
    tape: &mut Tape,
    x: Var,
    layer: &AdapterVars,
    grid: (usize, usize),
    mode: Mode,
    seed: u64,
    scale_by_gate: bool,
) -> Result<(Var, Option<TapeRouting>)> {
    let (dbar, routing) = match &layer.molte {
        Some((bank, gate)) => {
            let (d, r) = molte_on(tape, x, bank, *gate, mode, seed, scale_by_gate)?;
            (Some(d), Some(r))
        }
        None => (None, None),
    };
    let delta = match (layer.filter, dbar) {
        (Some(f), Some(d)) => {
            let z = tape.add(d, x)?;
            faf_on(tape, z, f, grid.0, grid.1)?
        }
        (Some(f), None) => faf_on(tape, x, f, grid.0, grid.1)?,
        (None, Some(d)) => d,
        (None, None) => return shape_err("adapter layer with neither experts nor filter"),
    };
    Ok((delta, routing))
}

/// `ΔX` and the routing record for one layer over plain tensors.
pub fn adapter_forward(
    x: &Tensor,
    layer: &LandMoeLayer<'_>,
    mode: Mode,
    seed: u64,
    scale_by_gate: bool,
) -> Result<(Tensor, RoutingResult)> {
    let (n, d) = x.dims2()?;
    let f = layer.filter;
    if n != f.h * f.w || d != f.channels() {
        return shape_err(format!(
            "{n}x{d} tokens do not fit the {}x{} filter grid of width {}",
            f.h,
            f.w,
            f.channels()
        ));
    }
    let mut tape = Tape::new(x.dtype());
    let xv = tape.constant(x);
    let factors: Vec<(Var, Var)> = layer
        .bank
        .experts
        .iter()
        .map(|e| (tape.constant(&e.a), tape.constant(&e.b)))
        .collect();
    let w_t = tape.constant(&layer.bank.w_t);
    let b_t = tape.constant(&layer.bank.b_t);
    let bank = BankVars::build(&mut tape, &factors, w_t, b_t)?;
    let gate = GateVars {
        w_gate: tape.constant(&layer.gate.w_gate),
        w_noise: tape.constant(&layer.gate.w_noise),
        k: layer.gate.k,
    };
    let vars = AdapterVars {
        molte: Some((bank, gate)),
        filter: Some(tape.constant(&f.weights)),
    };
    let (delta, routing) = adapter_on(&mut tape, xv, &vars, (f.h, f.w), mode, seed, scale_by_gate)?;
    tape.check_finite()?;
    let routing = routing.expect("experts are present");
    Ok((tape.tensor(delta), routing.to_result(&tape)))
}
