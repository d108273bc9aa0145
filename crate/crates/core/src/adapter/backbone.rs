//! Small pre-norm vision transformer with frozen random weights.

use rand_chacha::ChaCha8Rng;

use crate::config::LandMoeConfig;
use crate::error::{shape_err, Error, Result};
use crate::rng::rng_for;
use crate::tensor::{ParamId, ParamStore, Tape, Tensor, Var};

const LN_EPS: f64 = 1e-6;

/// Cuts an `H×W×C` image into non-overlapping `p×p` patches, one row per
/// patch in row-major grid order, each flattened as `(dy, dx, c)`.
pub fn patchify(image: &Tensor, patch: usize) -> Result<Tensor> {
    let [h, w, c] = *image.shape() else {
        return shape_err(format!("expected an HxWxC image, got {:?}", image.shape()));
    };
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return Err(Error::Config(format!(
            "{h}x{w} image is not divisible into {patch}x{patch} patches"
        )));
    }
    let (gh, gw) = (h / patch, w / patch);
    let px = image.data();
    let mut out = Vec::with_capacity(h * w * c);
    for gy in 0..gh {
        for gx in 0..gw {
            for dy in 0..patch {
                let row = (gy * patch + dy) * w + gx * patch;
                out.extend_from_slice(&px[row * c..(row + patch) * c]);
            }
        }
    }
    Tensor::new(&[gh * gw, patch * patch * c], out)
}

#[derive(Clone, Debug)]
struct Block {
    ln1: (ParamId, ParamId),
    /// Per head `(W_q, W_k, W_v, W_o)`.
    heads: Vec<[ParamId; 4]>,
    attn_bias: ParamId,
    ln2: (ParamId, ParamId),
    fc1: (ParamId, ParamId),
    fc2: (ParamId, ParamId),
}

/// Frozen backbone. Parameters live in the model's [`ParamStore`] under
/// `backbone.*` and never require gradients.
#[derive(Clone, Debug)]
pub struct ToyBackbone {
    pub depth: usize,
    pub width: usize,
    pub heads: usize,
    pub patch: usize,
    pub channels: usize,
    pub grid: (usize, usize),
    embed: (ParamId, ParamId),
    pos: ParamId,
    blocks: Vec<Block>,
    norm: (ParamId, ParamId),
}

impl ToyBackbone {
    /// Registers freshly initialized frozen weights in `store`. Weights are
    /// `N(0, 1/fan_in)`, biases zero, norms identity; all drawn from
    /// `cfg.backbone_seed`.
    pub fn init(cfg: &LandMoeConfig, store: &mut ParamStore) -> Self {
        let mut rng = rng_for(cfg.backbone_seed, &[0]);
        let d = cfg.width;
        let dh = d / cfg.heads;
        let hidden = d * cfg.mlp_ratio;
        let in_dim = cfg.patch_size * cfg.patch_size * cfg.channels;
        let n = cfg.num_tokens();

        let mut add = |name: String, t: Tensor| store.add(name, t.with_requires_grad(false));
        let dense = |fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng| {
            Tensor::randn(&[fan_in, fan_out], (1.0 / fan_in as f64).sqrt(), rng)
        };

        let embed = (
            add("backbone.embed.w".into(), dense(in_dim, d, &mut rng)),
            add("backbone.embed.b".into(), Tensor::zeros(&[d])),
        );
        let pos = add("backbone.pos".into(), Tensor::randn(&[n, d], 0.02, &mut rng));
        let mut blocks = Vec::with_capacity(cfg.depth);
        for i in 0..cfg.depth {
            let p = format!("backbone.block{i}");
            let ln1 = (
                add(format!("{p}.ln1.g"), Tensor::ones(&[d])),
                add(format!("{p}.ln1.b"), Tensor::zeros(&[d])),
            );
            let heads = (0..cfg.heads)
                .map(|h| {
                    [
                        add(format!("{p}.attn.h{h}.q"), dense(d, dh, &mut rng)),
                        add(format!("{p}.attn.h{h}.k"), dense(d, dh, &mut rng)),
                        add(format!("{p}.attn.h{h}.v"), dense(d, dh, &mut rng)),
                        // the heads' outputs concatenate to width d
                        add(
                            format!("{p}.attn.h{h}.o"),
                            Tensor::randn(&[dh, d], (1.0 / d as f64).sqrt(), &mut rng),
                        ),
                    ]
                })
                .collect();
            let attn_bias = add(format!("{p}.attn.o.b"), Tensor::zeros(&[d]));
            let ln2 = (
                add(format!("{p}.ln2.g"), Tensor::ones(&[d])),
                add(format!("{p}.ln2.b"), Tensor::zeros(&[d])),
            );
            let fc1 = (
                add(format!("{p}.mlp.fc1.w"), dense(d, hidden, &mut rng)),
                add(format!("{p}.mlp.fc1.b"), Tensor::zeros(&[hidden])),
            );
            let fc2 = (
                add(format!("{p}.mlp.fc2.w"), dense(hidden, d, &mut rng)),
                add(format!("{p}.mlp.fc2.b"), Tensor::zeros(&[d])),
            );
            blocks.push(Block {
                ln1,
                heads,
                attn_bias,
                ln2,
                fc1,
                fc2,
            });
        }
        let norm = (
            add("backbone.norm.g".into(), Tensor::ones(&[d])),
            add("backbone.norm.b".into(), Tensor::zeros(&[d])),
        );
        ToyBackbone {
            depth: cfg.depth,
            width: d,
            heads: cfg.heads,
            patch: cfg.patch_size,
            channels: cfg.channels,
            grid: cfg.grid(),
            embed,
            pos,
            blocks,
            norm,
        }
    }

    /// Patch embedding plus positional embedding: `X_0`.
    pub fn embed_on(&self, tape: &mut Tape, store: &ParamStore, image: &Tensor) -> Result<Var> {
        let [h, w, c] = *image.shape() else {
            return shape_err(format!("expected an HxWxC image, got {:?}", image.shape()));
        };
        if c != self.channels || (h / self.patch, w / self.patch) != self.grid {
            return Err(Error::Config(format!(
                "{h}x{w}x{c} image does not fit a {}x{} grid of {}x{} patches over {} bands",
                self.grid.0, self.grid.1, self.patch, self.patch, self.channels
            )));
        }
        let patches = patchify(image, self.patch)?;
        let pv = tape.constant(&patches);
        let ew = tape.param(store, self.embed.0);
        let eb = tape.param(store, self.embed.1);
        let x = tape.matmul(pv, ew)?;
        let x = tape.add_row(x, eb)?;
        let pos = tape.param(store, self.pos);
        tape.add(x, pos)
    }

    /// Block `i`: `x + attn(ln1(x))`, then `+ mlp(ln2(·))`.
    pub fn block_on(&self, tape: &mut Tape, store: &ParamStore, i: usize, x: Var) -> Result<Var> {
        let b = &self.blocks[i];
        let dh = self.width / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();

        let (g, be) = (tape.param(store, b.ln1.0), tape.param(store, b.ln1.1));
        let y = tape.layer_norm(x, g, be, LN_EPS)?;
        let mut attn: Option<Var> = None;
        for ids in &b.heads {
            let [wq, wk, wv, wo] = ids.map(|id| tape.param(store, id));
            let q = tape.matmul(y, wq)?;
            let k = tape.matmul(y, wk)?;
            let v = tape.matmul(y, wv)?;
            let s = tape.matmul_nt(q, k)?;
            let s = tape.scale(s, scale);
            let p = tape.softmax_rows(s)?;
            let o = tape.matmul(p, v)?;
            let o = tape.matmul(o, wo)?;
            attn = Some(match attn {
                None => o,
                Some(acc) => tape.add(acc, o)?,
            });
        }
        let ab = tape.param(store, b.attn_bias);
        let attn = tape.add_row(attn.expect("at least one head"), ab)?;
        let x = tape.add(x, attn)?;

        let (g, be) = (tape.param(store, b.ln2.0), tape.param(store, b.ln2.1));
        let y = tape.layer_norm(x, g, be, LN_EPS)?;
        let (w1, b1) = (tape.param(store, b.fc1.0), tape.param(store, b.fc1.1));
        let hmid = tape.matmul(y, w1)?;
        let hmid = tape.add_row(hmid, b1)?;
        let hmid = tape.gelu(hmid);
        let (w2, b2) = (tape.param(store, b.fc2.0), tape.param(store, b.fc2.1));
        let out = tape.matmul(hmid, w2)?;
        let out = tape.add_row(out, b2)?;
        tape.add(x, out)
    }

    /// Final layer norm ahead of the head.
    pub fn norm_on(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let (g, b) = (tape.param(store, self.norm.0), tape.param(store, self.norm.1));
        tape.layer_norm(x, g, b, LN_EPS)
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = vec![self.embed.0, self.embed.1, self.pos];
        for b in &self.blocks {
            ids.extend([b.ln1.0, b.ln1.1]);
            for h in &b.heads {
                ids.extend_from_slice(h);
            }
            ids.extend([b.attn_bias, b.ln2.0, b.ln2.1, b.fc1.0, b.fc1.1, b.fc2.0, b.fc2.1]);
        }
        ids.extend([self.norm.0, self.norm.1]);
        ids
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn patchify_orders_rows_then_bands() {
        let img = Tensor::from_fn(&[4, 4, 2], |i| i as f64);
        let p = patchify(&img, 2).unwrap();
        assert_eq!(p.shape(), &[4, 8]);
        // patch (0,1): pixels (0,2),(0,3),(1,2),(1,3)
        assert_eq!(p.row(1), &[4.0, 5.0, 6.0, 7.0, 12.0, 13.0, 14.0, 15.0]);
        assert!(patchify(&img, 3).is_err());
    }

    #[test]
    fn init_is_deterministic_and_frozen() {
        let cfg = LandMoeConfig::default();
        let mut s1 = ParamStore::new();
        let mut s2 = ParamStore::new();
        let b1 = ToyBackbone::init(&cfg, &mut s1);
        ToyBackbone::init(&cfg, &mut s2);
        for id in b1.param_ids() {
            assert_eq!(s1.get(id), s2.get(id));
            assert!(!s1.get(id).requires_grad());
        }
        assert_eq!(b1.param_ids().len(), s1.len());
        assert_eq!(s1.trainable_scalars(), 0);
    }
}
