use crate::error::{Error, Result};
use crate::tensor::{ParamId, ParamStore};

/// Adaptive moments with decoupled weight decay.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Default for AdamW {
    fn default() -> Self {
        AdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }
}

impl AdamW {
    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One update of every `requires_grad` parameter in `store` from its
    /// accumulated `grad` (absent means zero). Frozen parameters are never
    /// touched. Fails before changing anything if a gradient is not finite.
    pub fn step(&mut self, store: &mut ParamStore, lr: f64, wd: f64) -> Result<()> {
        let ids: Vec<ParamId> = store.ids().filter(|&id| store.get(id).requires_grad()).collect();
        for &id in &ids {
            if let Some(g) = store.get(id).grad() {
                if let Some(j) = g.iter().position(|v| !v.is_finite()) {
                    return Err(Error::Numerical(format!(
                        "gradient of `{}` is {} at index {j}",
                        store.name(id),
                        g[j]
                    )));
                }
            }
        }
        if self.m.len() < store.len() {
            self.m.resize(store.len(), Vec::new());
            self.v.resize(store.len(), Vec::new());
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for id in ids {
            let i = id.index();
            let p = store.get_mut(id);
            let n = p.numel();
            if self.m[i].len() != n {
                self.m[i] = vec![0.0; n];
                self.v[i] = vec![0.0; n];
            }
            let g = p.grad().map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; n]);
            let dtype = p.dtype();
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, w) in p.data_mut().iter_mut().enumerate() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g[j];
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g[j] * g[j];
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                *w *= 1.0 - lr * wd;
                *w -= lr * mhat / (vhat.sqrt() + self.eps);
                *w = dtype.round(*w);
            }
        }
        Ok(())
    }
}
