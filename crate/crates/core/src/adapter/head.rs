//! Per-pixel linear classification head.

use crate::error::{shape_err, Result};
use crate::tensor::{matmul, Tensor};

#[derive(Clone, Debug)]
pub struct HeadParams {
    /// `d × K`.
    pub w: Tensor,
    /// `K`.
    pub b: Tensor,
}

impl HeadParams {
    pub fn zeros(d: usize, k: usize) -> Self {
        HeadParams {
            w: Tensor::zeros(&[d, k]),
            b: Tensor::zeros(&[k]),
        }
    }

    pub fn num_classes(&self) -> usize {
        self.b.numel()
    }
}

/// Nearest-neighbour upsampling of patch-grid rows `[(gh·gw) × K]` to an
/// `(gh·p) × (gw·p) × K` map.
pub fn upsample_nearest(logits: &Tensor, grid: (usize, usize), patch: usize) -> Result<Tensor> {
    let (n, k) = logits.dims2()?;
    let (gh, gw) = grid;
    if n != gh * gw || patch == 0 {
        return shape_err(format!("{n} rows for a {gh}x{gw} grid"));
    }
    let (h, w) = (gh * patch, gw * patch);
    let src = logits.data();
    let mut out = Vec::with_capacity(h * w * k);
    for y in 0..h {
        for x in 0..w {
            let t = (y / patch) * gw + x / patch;
            out.extend_from_slice(&src[t * k..(t + 1) * k]);
        }
    }
    Tensor::new(&[h, w, k], out)
}

/// Projects every token to `K` class logits and upsamples to pixels.
pub fn head_predict(
    features: &Tensor,
    head: &HeadParams,
    grid: (usize, usize),
    patch: usize,
) -> Result<Tensor> {
    let (_, d) = features.dims2()?;
    let (hd, k) = head.w.dims2()?;
    if hd != d || head.b.numel() != k {
        return shape_err(format!(
            "head {:?}/{:?} does not fit features of width {d}",
            head.w.shape(),
            head.b.shape()
        ));
    }
    let mut tok = matmul(features, &head.w)?;
    for row in tok.data_mut().chunks_mut(k) {
        row.iter_mut().zip(head.b.data()).for_each(|(o, b)| *o += b);
    }
    upsample_nearest(&tok, grid, patch)
}

/// Per-pixel argmax over the last axis; ties go to the lowest class.
pub fn argmax_labels(logits: &Tensor) -> Vec<usize> {
    let k = *logits.shape().last().expect("non-empty shape");
    crate::router::argmax_rows(logits.data(), k)
}
