//! Full model: frozen backbone, adapter layers at planned depths, shared
//! frequency filter and the linear head, all in one parameter registry.

use std::fmt;

use crate::config::LandMoeConfig;
use crate::error::{shape_err, Error, Result};
use crate::experts::{BankVars, ExpertBank, GateVars};
use crate::rng::{derive_seed, rng_for};
use crate::router::{Mode, RoutingResult, TapeRouting};
use crate::tensor::{ParamId, ParamStore, Tape, Tensor, Var};

use super::backbone::ToyBackbone;
use super::head::{upsample_nearest, HeadParams};
use super::{adapter_on, AdapterVars, InsertionPlan};

/// Accounting bucket of a parameter, derived from its registry name.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ParamGroup {
    Backbone,
    Router,
    Experts,
    SharedMlp,
    Filter,
    Head,
}

impl ParamGroup {
    pub const TRAINABLE: [ParamGroup; 5] = [
        ParamGroup::Router,
        ParamGroup::Experts,
        ParamGroup::SharedMlp,
        ParamGroup::Filter,
        ParamGroup::Head,
    ];

    pub fn of(name: &str) -> Option<ParamGroup> {
        if name.starts_with("backbone.") {
            Some(ParamGroup::Backbone)
        } else if name.starts_with("filter.") {
            Some(ParamGroup::Filter)
        } else if name.starts_with("head.") {
            Some(ParamGroup::Head)
        } else if name.starts_with("adapter") {
            if name.contains(".router.") {
                Some(ParamGroup::Router)
            } else if name.contains(".expert") {
                Some(ParamGroup::Experts)
            } else if name.contains(".mlp.") {
                Some(ParamGroup::SharedMlp)
            } else {
                None
            }
        } else {
            None
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ParamGroup::Backbone => "backbone",
            ParamGroup::Router => "router",
            ParamGroup::Experts => "experts",
            ParamGroup::SharedMlp => "shared_mlp",
            ParamGroup::Filter => "filter",
            ParamGroup::Head => "head",
        }
    }
}

/// Trainable scalars per group.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ParamCount {
    pub router: usize,
    pub experts: usize,
    pub shared_mlp: usize,
    pub filter: usize,
    pub head: usize,
}

impl ParamCount {
    /// Everything except the head.
    pub fn adapter_total(&self) -> usize {
        self.router + self.experts + self.shared_mlp + self.filter
    }

    pub fn total(&self) -> usize {
        self.adapter_total() + self.head
    }
}

impl fmt::Display for ParamCount {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "router={} experts={} shared_mlp={} filter={} head={} adapter_total={} total={}",
            self.router,
            self.experts,
            self.shared_mlp,
            self.filter,
            self.head,
            self.adapter_total(),
            self.total()
        )
    }
}

#[derive(Clone, Debug)]
pub struct MolteIds {
    pub w_gate: ParamId,
    pub w_noise: ParamId,
    /// `(A_k, B_k)` per expert.
    pub factors: Vec<(ParamId, ParamId)>,
    pub w_t: ParamId,
    pub b_t: ParamId,
}

#[derive(Clone, Debug)]
pub struct AdapterIds {
    /// Backbone block this adapter follows.
    pub layer: usize,
    pub molte: Option<MolteIds>,
}

/// Per-tape handles of every adapter and head parameter.
#[derive(Clone, Debug)]
pub struct ModelVars {
    pub adapters: Vec<(usize, AdapterVars)>,
    pub head_w: Var,
    pub head_b: Var,
}

#[derive(Clone, Debug)]
pub struct ForwardOutput {
    /// Normalized backbone output `[N × d]`.
    pub features: Var,
    /// Patch logits `[N × K]`.
    pub logits: Var,
    /// One record per applied adapter with experts, in depth order.
    pub routing: Vec<TapeRouting>,
}

#[derive(Clone, Debug)]
pub struct LandMoeModel {
    pub cfg: LandMoeConfig,
    pub store: ParamStore,
    pub backbone: ToyBackbone,
    pub adapters: Vec<AdapterIds>,
    pub filter: Option<ParamId>,
    pub head: (ParamId, ParamId),
}

impl LandMoeModel {
    /// Builds the model. The backbone comes from `cfg.backbone_seed`; adapter
    /// weights from `seed`. Experts start with `B = 0`, the head at zero.
    pub fn new(cfg: LandMoeConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let backbone = ToyBackbone::init(&cfg, &mut store);
        let d = cfg.width;
        let layers = cfg.plan.layers(cfg.depth)?;

        let mut adapters = Vec::with_capacity(layers.len());
        for &layer in &layers {
            let molte = if cfg.use_molte {
                let mut rng = rng_for(seed, &[1, layer as u64]);
                let bank = ExpertBank::init(&cfg.ranks, cfg.tokens_per_expert, d, &mut rng);
                let e = cfg.num_experts();
                let w_gate = Tensor::randn(&[d, e], (1.0 / d as f64).sqrt(), &mut rng);
                let p = format!("adapter{layer}");
                let w_gate = store.add(format!("{p}.router.w_gate"), w_gate.with_requires_grad(true));
                let w_noise = store.add(
                    format!("{p}.router.w_noise"),
                    Tensor::zeros(&[d, e]).with_requires_grad(true),
                );
                let factors = bank
                    .experts
                    .into_iter()
                    .enumerate()
                    .map(|(k, ex)| {
                        (
                            store.add(format!("{p}.expert{k}.a"), ex.a.with_requires_grad(true)),
                            store.add(format!("{p}.expert{k}.b"), ex.b.with_requires_grad(true)),
                        )
                    })
                    .collect();
                let w_t = store.add(format!("{p}.mlp.w_t"), bank.w_t.with_requires_grad(true));
                let b_t = store.add(format!("{p}.mlp.b_t"), bank.b_t.with_requires_grad(true));
                Some(MolteIds {
                    w_gate,
                    w_noise,
                    factors,
                    w_t,
                    b_t,
                })
            } else {
                None
            };
            adapters.push(AdapterIds { layer, molte });
        }

        let filter = (cfg.use_faf && !layers.is_empty()).then(|| {
            let (h, w) = cfg.grid();
            let filt = crate::faf::FrequencyFilter::constant(h, w, d, cfg.filter_init);
            store.add("filter.w", filt.weights.with_requires_grad(true))
        });
        let head = (
            store.add("head.w", Tensor::zeros(&[d, cfg.num_classes]).with_requires_grad(true)),
            store.add("head.b", Tensor::zeros(&[cfg.num_classes]).with_requires_grad(true)),
        );

        let mut model = LandMoeModel {
            cfg,
            store,
            backbone,
            adapters,
            filter,
            head,
        };
        model.round_to_dtype();
        Ok(model)
    }

    fn round_to_dtype(&mut self) {
        let dtype = self.cfg.dtype;
        let ids: Vec<ParamId> = self.store.ids().collect();
        for id in ids {
            let t = self.store.get_mut(id);
            let rg = t.requires_grad();
            *t = t.clone().to_dtype(dtype).with_requires_grad(rg);
        }
    }

    /// Block indices carrying an adapter.
    pub fn layers(&self) -> Vec<usize> {
        self.adapters.iter().map(|a| a.layer).collect()
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.store.by_name(name)
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        let id = self.store.id(name)?;
        Some(self.store.get_mut(id))
    }

    /// Every parameter the optimizer may touch.
    pub fn trainable_ids(&self) -> Vec<ParamId> {
        self.store
            .iter()
            .filter(|(_, _, t)| t.requires_grad())
            .map(|(id, _, _)| id)
            .collect()
    }

    pub fn head_params(&self) -> HeadParams {
        HeadParams {
            w: self.store.get(self.head.0).clone(),
            b: self.store.get(self.head.1).clone(),
        }
    }

    /// Overwrites parameter values by name. The name set and every shape
    /// must match this model exactly.
    pub fn load_params(&mut self, named: &[(String, Tensor)]) -> Result<()> {
        if named.len() != self.store.len() {
            return Err(Error::Format(format!(
                "checkpoint holds {} parameters, model has {}",
                named.len(),
                self.store.len()
            )));
        }
        for (name, t) in named {
            let id = self
                .store
                .id(name)
                .ok_or_else(|| Error::Format(format!("unexpected parameter `{name}`")))?;
            let dst = self.store.get_mut(id);
            if dst.shape() != t.shape() {
                return Err(Error::Format(format!(
                    "parameter `{name}` has shape {:?}, expected {:?}",
                    t.shape(),
                    dst.shape()
                )));
            }
            dst.data_mut().copy_from_slice(t.data());
        }
        Ok(())
    }

    /// Registers the adapter and head parameters on `tape` and materializes
    /// every expert bank once.
    pub fn bind(&self, tape: &mut Tape) -> Result<ModelVars> {
        let filter = self.filter.map(|id| tape.param(&self.store, id));
        let mut adapters = Vec::with_capacity(self.adapters.len());
        for a in &self.adapters {
            let molte = match &a.molte {
                Some(ids) => {
                    let factors: Vec<(Var, Var)> = ids
                        .factors
                        .iter()
                        .map(|&(ai, bi)| (tape.param(&self.store, ai), tape.param(&self.store, bi)))
                        .collect();
                    let w_t = tape.param(&self.store, ids.w_t);
                    let b_t = tape.param(&self.store, ids.b_t);
                    let bank = BankVars::build(tape, &factors, w_t, b_t)?;
                    let gate = GateVars {
                        w_gate: tape.param(&self.store, ids.w_gate),
                        w_noise: tape.param(&self.store, ids.w_noise),
                        k: self.cfg.top_k,
                    };
                    Some((bank, gate))
                }
                None => None,
            };
            adapters.push((a.layer, AdapterVars { molte, filter }));
        }
        Ok(ModelVars {
            adapters,
            head_w: tape.param(&self.store, self.head.0),
            head_b: tape.param(&self.store, self.head.1),
        })
    }

    /// Records one image's forward pass. `plan` selects which of the model's
    /// adapters run; `None` runs all of them.
    pub fn forward_on(
        &self,
        tape: &mut Tape,
        vars: &ModelVars,
        image: &Tensor,
        plan: Option<&[usize]>,
        mode: Mode,
        seed: u64,
    ) -> Result<ForwardOutput> {
        let active: Vec<&(usize, AdapterVars)> = match plan {
            None => vars.adapters.iter().collect(),
            Some(layers) => layers
                .iter()
                .map(|l| {
                    vars.adapters.iter().find(|(al, _)| al == l).ok_or_else(|| {
                        Error::Config(format!("no adapter was built after layer {l}"))
                    })
                })
                .collect::<Result<_>>()?,
        };
        let grid = self.backbone.grid;
        let mut x = self.backbone.embed_on(tape, &self.store, image)?;
        let mut routing = Vec::new();
        for i in 0..self.backbone.depth {
            x = self.backbone.block_on(tape, &self.store, i, x)?;
            if let Some((_, av)) = active.iter().find(|(l, _)| *l == i) {
                let layer_seed = derive_seed(seed, &[i as u64]);
                let (dx, r) =
                    adapter_on(tape, x, av, grid, mode, layer_seed, self.cfg.scale_by_gate)?;
                x = tape.add(x, dx)?;
                routing.extend(r);
            }
        }
        let features = self.backbone.norm_on(tape, &self.store, x)?;
        let logits = tape.matmul(features, vars.head_w)?;
        let logits = tape.add_row(logits, vars.head_b)?;
        Ok(ForwardOutput {
            features,
            logits,
            routing,
        })
    }

    fn run(
        &self,
        image: &Tensor,
        plan: Option<&InsertionPlan>,
        mode: Mode,
        seed: u64,
    ) -> Result<(Tape, ForwardOutput)> {
        let layers = plan.map(|p| p.layers(self.cfg.depth)).transpose()?;
        let mut tape = Tape::new(self.cfg.dtype);
        let vars = self.bind(&mut tape)?;
        let out = self.forward_on(&mut tape, &vars, image, layers.as_deref(), mode, seed)?;
        tape.check_finite()?;
        Ok((tape, out))
    }

    /// Normalized features and routing records for one `H×W×C` image.
    pub fn backbone_forward(
        &self,
        image: &Tensor,
        plan: &InsertionPlan,
        mode: Mode,
        seed: u64,
    ) -> Result<(Tensor, Vec<RoutingResult>)> {
        let (tape, out) = self.run(image, Some(plan), mode, seed)?;
        let routing = out.routing.iter().map(|r| r.to_result(&tape)).collect();
        Ok((tape.tensor(out.features), routing))
    }

    /// Pixel logits `H×W×K` with the model's own plan.
    pub fn predict(&self, image: &Tensor, mode: Mode, seed: u64) -> Result<Tensor> {
        let (tape, out) = self.run(image, None, mode, seed)?;
        upsample_nearest(&tape.tensor(out.logits), self.backbone.grid, self.backbone.patch)
    }

    /// Pixel logits under an explicit plan, which must be a subset of the
    /// model's adapters.
    pub fn predict_with_plan(
        &self,
        image: &Tensor,
        plan: &InsertionPlan,
        mode: Mode,
        seed: u64,
    ) -> Result<Tensor> {
        let (tape, out) = self.run(image, Some(plan), mode, seed)?;
        upsample_nearest(&tape.tensor(out.logits), self.backbone.grid, self.backbone.patch)
    }

    pub fn count_trainable_params(&self) -> ParamCount {
        count_trainable_params(&self.store)
    }

    /// Checks that the image fits the configured input.
    pub fn check_image(&self, image: &Tensor) -> Result<()> {
        let s = self.cfg.image_size;
        if image.shape() != [s, s, self.cfg.channels] {
            return shape_err(format!(
                "image {:?} does not match {s}x{s}x{}",
                image.shape(),
                self.cfg.channels
            ));
        }
        Ok(())
    }
}

/// Walks the registry and sums `requires_grad` scalars per group.
pub fn count_trainable_params(store: &ParamStore) -> ParamCount {
    let mut c = ParamCount::default();
    for (_, name, t) in store.iter() {
        if !t.requires_grad() {
            continue;
        }
        let n = t.numel();
        match ParamGroup::of(name) {
            Some(ParamGroup::Router) => c.router += n,
            Some(ParamGroup::Experts) => c.experts += n,
            Some(ParamGroup::SharedMlp) => c.shared_mlp += n,
            Some(ParamGroup::Filter) => c.filter += n,
            Some(ParamGroup::Head) => c.head += n,
            Some(ParamGroup::Backbone) | None => {}
        }
    }
    c
}
