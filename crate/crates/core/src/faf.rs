//! Frequency-aware filter: tokens are laid back onto their patch grid,
//! transformed with the real 2-D FFT, scaled bin-by-bin by a real learnable
//! filter and transformed back.

use crate::error::{shape_err, Result};
use crate::spectral::half_width;
use crate::tensor::{Tape, Tensor, Var};

/// The single filter shared by every adapter layer of a model.
#[derive(Clone, Debug)]
pub struct FrequencyFilter {
    /// `h × (⌊w/2⌋+1) × d` real weights.
    pub weights: Tensor,
    pub h: usize,
    pub w: usize,
}

impl FrequencyFilter {
    pub fn new(weights: Tensor, h: usize, w: usize) -> Result<Self> {
        match weights.shape() {
            [a, b, _] if *a == h && *b == half_width(w) => Ok(FrequencyFilter { weights, h, w }),
            s => shape_err(format!("filter {s:?} does not fit a {h}x{w} grid")),
        }
    }

    pub fn constant(h: usize, w: usize, d: usize, value: f64) -> Self {
        FrequencyFilter {
            weights: Tensor::full(&[h, half_width(w), d], value),
            h,
            w,
        }
    }

    pub fn channels(&self) -> usize {
        self.weights.shape()[2]
    }
}

/// `irfft2(rfft2(z) ⊙ W)` on the tape, for tokens `z[(h·w)×d]`.
pub fn faf_on(tape: &mut Tape, z: Var, filter: Var, h: usize, w: usize) -> Result<Var> {
    let spec = tape.rfft2(z, h, w)?;
    let filtered = tape.mul_spectrum(spec, filter)?;
    tape.irfft2(filtered, w)
}

pub fn faf_forward(z: &Tensor, filt: &FrequencyFilter) -> Result<Tensor> {
    let (n, d) = z.dims2()?;
    if n != filt.h * filt.w || d != filt.channels() {
        return shape_err(format!(
            "{n}x{d} tokens do not match a {}x{}x{} filter grid",
            filt.h,
            filt.w,
            filt.channels()
        ));
    }
    let mut tape = Tape::new(z.dtype());
    let zv = tape.constant(z);
    let fv = tape.constant(&filt.weights);
    let out = faf_on(&mut tape, zv, fv, filt.h, filt.w)?;
    tape.check_finite()?;
    Ok(tape.tensor(out))
}
