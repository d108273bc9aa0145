//! Real-input 2-D discrete Fourier transform over a patch grid, applied
//! independently to every channel.
//!
//! Layout: spatial fields are `[h, w, d]` row-major (equivalently `h·w`
//! tokens of width `d`). Spectra keep the non-redundant half of the width
//! axis, `⌊w/2⌋+1` bins. The forward transform is unnormalized and the
//! inverse carries `1/(h·w)`.
//!
//! The transforms are evaluated as two passes of direct 1-D DFTs with exact
//! twiddle tables, so any extent works (no power-of-two requirement). Grids
//! here are at most a few dozen bins per side.

use std::f64::consts::PI;

use crate::error::{contract_err, shape_err, Result};
use crate::tensor::Tensor;

/// Half-spectrum of a real field: `h × (⌊w/2⌋+1) × d` real and imaginary planes.
#[derive(Clone, Debug, PartialEq)]
pub struct FreqGrid {
    pub real: Tensor,
    pub imag: Tensor,
    pub h: usize,
    pub w: usize,
}

pub fn half_width(w: usize) -> usize {
    w / 2 + 1
}

impl FreqGrid {
    pub fn new(real: Tensor, imag: Tensor, h: usize, w: usize) -> Result<Self> {
        let wf = half_width(w);
        for (name, t) in [("real", &real), ("imag", &imag)] {
            match t.shape() {
                [a, b, _] if *a == h && *b == wf => {}
                s => {
                    return shape_err(format!(
                        "{name} plane {s:?} does not match a {h}x{w} grid ({h}x{wf}xd expected)"
                    ))
                }
            }
        }
        if real.shape() != imag.shape() {
            return shape_err("real and imaginary planes differ in shape");
        }
        Ok(FreqGrid { real, imag, h, w })
    }

    pub fn channels(&self) -> usize {
        self.real.shape()[2]
    }

    /// Packs into the `[2, h, wf, d]` layout used on the tape.
    pub fn to_packed(&self) -> Vec<f64> {
        let mut v = self.real.data().to_vec();
        v.extend_from_slice(self.imag.data());
        v
    }

    fn from_packed(packed: Vec<f64>, h: usize, w: usize, d: usize) -> Self {
        let half = packed.len() / 2;
        let shape = vec![h, half_width(w), d];
        let dtype = crate::tensor::DType::F64;
        FreqGrid {
            real: Tensor::from_parts(shape.clone(), packed[..half].to_vec(), dtype),
            imag: Tensor::from_parts(shape, packed[half..].to_vec(), dtype),
            h,
            w,
        }
    }
}

fn twiddles(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut cos = Vec::with_capacity(n);
    let mut sin = Vec::with_capacity(n);
    for j in 0..n {
        let a = 2.0 * PI * j as f64 / n as f64;
        cos.push(a.cos());
        sin.push(if j == 0 { 0.0 } else { a.sin() });
    }
    (cos, sin)
}

/// Weight of width bin `kx` when folding the half-spectrum back: bins whose
/// conjugate partner is stored implicitly count twice.
fn fold_weight(kx: usize, w: usize) -> f64 {
    if kx == 0 || (w.is_multiple_of(2) && kx == w / 2) {
        1.0
    } else {
        2.0
    }
}

/// Forward transform, `[h·w·d]` -> packed `[2, h, wf, d]`.
pub(crate) fn rfft2_raw(z: &[f64], h: usize, w: usize, d: usize) -> Vec<f64> {
    let wf = half_width(w);
    let (cw, sw) = twiddles(w);
    let (ch, sh) = twiddles(h);
    // Width pass.
    let mut r1 = vec![0.0; h * wf * d];
    let mut i1 = vec![0.0; h * wf * d];
    for y in 0..h {
        for kx in 0..wf {
            let o = (y * wf + kx) * d;
            for x in 0..w {
                let t = (kx * x) % w;
                let (c, s) = (cw[t], sw[t]);
                let src = &z[(y * w + x) * d..(y * w + x + 1) * d];
                for ch_ in 0..d {
                    r1[o + ch_] += src[ch_] * c;
                    i1[o + ch_] -= src[ch_] * s;
                }
            }
        }
    }
    // Height pass: multiply by e^{-i·2π·ky·y/h}.
    let plane = h * wf * d;
    let mut out = vec![0.0; 2 * plane];
    for ky in 0..h {
        for y in 0..h {
            let t = (ky * y) % h;
            let (c, s) = (ch[t], sh[t]);
            for kx in 0..wf {
                let o = (ky * wf + kx) * d;
                let src = (y * wf + kx) * d;
                for k in 0..d {
                    let (re, im) = (r1[src + k], i1[src + k]);
                    out[o + k] += re * c + im * s;
                    out[plane + o + k] += im * c - re * s;
                }
            }
        }
    }
    out
}

/// `Σ_{ky,kx} weight(kx)·Re(F·e^{+iθ})·scale`, the shared core of the inverse
/// transform and of the forward transform's adjoint.
fn inverse_core(f: &[f64], h: usize, w: usize, d: usize, weighted: bool, scale: f64) -> Vec<f64> {
    let wf = half_width(w);
    let (cw, sw) = twiddles(w);
    let (ch, sh) = twiddles(h);
    let plane = h * wf * d;
    // Height pass: multiply by e^{+i·2π·ky·y/h}.
    let mut yr = vec![0.0; plane];
    let mut yi = vec![0.0; plane];
    for y in 0..h {
        for ky in 0..h {
            let t = (ky * y) % h;
            let (c, s) = (ch[t], sh[t]);
            for kx in 0..wf {
                let o = (y * wf + kx) * d;
                let src = (ky * wf + kx) * d;
                for k in 0..d {
                    let (re, im) = (f[src + k], f[plane + src + k]);
                    yr[o + k] += re * c - im * s;
                    yi[o + k] += re * s + im * c;
                }
            }
        }
    }
    // Width pass, real part only.
    let mut out = vec![0.0; h * w * d];
    for y in 0..h {
        for x in 0..w {
            let o = (y * w + x) * d;
            for kx in 0..wf {
                let t = (kx * x) % w;
                let wt = if weighted { fold_weight(kx, w) } else { 1.0 };
                let (c, s) = (cw[t] * wt, sw[t] * wt);
                let src = (y * wf + kx) * d;
                for k in 0..d {
                    out[o + k] += yr[src + k] * c - yi[src + k] * s;
                }
            }
            if scale != 1.0 {
                out[o..o + d].iter_mut().for_each(|v| *v *= scale);
            }
        }
    }
    out
}

/// Inverse transform, packed `[2, h, wf, d]` -> `[h·w·d]`. The imaginary parts
/// of self-conjugate bins are ignored, matching the usual c2r convention.
pub(crate) fn irfft2_raw(f: &[f64], h: usize, w: usize, d: usize) -> Vec<f64> {
    inverse_core(f, h, w, d, true, 1.0 / (h * w) as f64)
}

/// Adjoint of [`rfft2_raw`].
pub(crate) fn rfft2_adjoint_raw(g: &[f64], h: usize, w: usize, d: usize) -> Vec<f64> {
    inverse_core(g, h, w, d, false, 1.0)
}

/// Adjoint of [`irfft2_raw`].
pub(crate) fn irfft2_adjoint_raw(g: &[f64], h: usize, w: usize, d: usize) -> Vec<f64> {
    let mut out = rfft2_raw(g, h, w, d);
    let wf = half_width(w);
    let norm = 1.0 / (h * w) as f64;
    for (i, v) in out.iter_mut().enumerate() {
        let kx = (i / d) % wf;
        *v *= fold_weight(kx, w) * norm;
    }
    out
}

fn grid_dims(z: &Tensor) -> Result<(usize, usize, usize)> {
    match z.shape() {
        [h, w, d] => Ok((*h, *w, *d)),
        s => shape_err(format!("expected an h×w×d field, got {s:?}")),
    }
}

/// Channel-wise 2-D real FFT of an `h × w × d` field.
pub fn rfft2(z: &Tensor) -> Result<FreqGrid> {
    let (h, w, d) = grid_dims(z)?;
    if !z.is_finite() {
        return crate::error::contract_err("rfft2 input contains non-finite values");
    }
    Ok(FreqGrid::from_packed(rfft2_raw(z.data(), h, w, d), h, w, d))
}

/// Inverse of [`rfft2`], normalized by `1/(h·w)`.
pub fn irfft2(f: &FreqGrid) -> Result<Tensor> {
    let (h, w, d) = (f.h, f.w, f.channels());
    let scale = f
        .real
        .data()
        .iter()
        .chain(f.imag.data())
        .fold(1.0f64, |m, v| m.max(v.abs()));
    for k in 0..d {
        let dc = f.imag.data()[k];
        if dc.abs() > 1e-12 * scale {
            return contract_err(format!(
                "DC bin of channel {k} has imaginary part {dc}; not the spectrum of a real field"
            ));
        }
    }
    let out = irfft2_raw(&f.to_packed(), h, w, d);
    Tensor::new(&[h, w, d], out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Full 2-D DFT by double summation, independent of the separable passes.
    fn naive_dft(z: &Tensor) -> (Vec<f64>, Vec<f64>) {
        let (h, w, d) = grid_dims(z).unwrap();
        let wf = half_width(w);
        let mut re = vec![0.0; h * wf * d];
        let mut im = vec![0.0; h * wf * d];
        for ky in 0..h {
            for kx in 0..wf {
                for k in 0..d {
                    let (mut sr, mut si) = (0.0, 0.0);
                    for y in 0..h {
                        for x in 0..w {
                            let th = 2.0 * PI * (ky as f64 * y as f64 / h as f64 + kx as f64 * x as f64 / w as f64);
                            let v = z.data()[(y * w + x) * d + k];
                            sr += v * th.cos();
                            si -= v * th.sin();
                        }
                    }
                    re[(ky * wf + kx) * d + k] = sr;
                    im[(ky * wf + kx) * d + k] = si;
                }
            }
        }
        (re, im)
    }

    #[test]
    fn constant_field_is_dc_only() {
        let z = Tensor::full(&[4, 4, 1], 2.5);
        let f = rfft2(&z).unwrap();
        assert_eq!(f.real.data()[0], 40.0);
        for (i, (&r, &im)) in f.real.data().iter().zip(f.imag.data()).enumerate() {
            assert!(im.abs() < 1e-12);
            if i > 0 {
                assert!(r.abs() < 1e-12);
            }
        }
    }

    #[test]
    fn impulse_has_flat_spectrum() {
        let mut z = Tensor::zeros(&[3, 5, 2]);
        z.data_mut()[0] = 1.0;
        z.data_mut()[1] = 1.0;
        let f = rfft2(&z).unwrap();
        assert!(f.real.data().iter().all(|&v| (v - 1.0).abs() < 1e-14));
        assert!(f.imag.data().iter().all(|&v| v.abs() < 1e-14));
    }

    #[test]
    fn width_cosine_lands_in_bin_one() {
        let (h, w) = (4, 8);
        let z = Tensor::from_fn(&[h, w, 1], |i| (2.0 * PI * (i % w) as f64 / w as f64).cos());
        let f = rfft2(&z).unwrap();
        let (nr, ni) = naive_dft(&z);
        let wf = half_width(w);
        for i in 0..h * wf {
            assert!((f.real.data()[i] - nr[i]).abs() < 1e-10);
            assert!((f.imag.data()[i] - ni[i]).abs() < 1e-10);
            let expected = if i == 1 { (h * w) as f64 / 2.0 } else { 0.0 };
            assert!((f.real.data()[i] - expected).abs() < 1e-10, "bin {i}");
            assert!(f.imag.data()[i].abs() < 1e-10);
        }
    }

    #[test]
    fn matches_naive_dft_on_odd_extents() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let z = Tensor::randn(&[5, 7, 3], 1.0, &mut rng);
        let f = rfft2(&z).unwrap();
        let (nr, ni) = naive_dft(&z);
        for i in 0..nr.len() {
            assert!((f.real.data()[i] - nr[i]).abs() < 1e-10);
            assert!((f.imag.data()[i] - ni[i]).abs() < 1e-10);
        }
    }

    #[test]
    fn roundtrip_and_inverse_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let z = Tensor::randn(&[8, 8, 3], 1.0, &mut rng);
        let back = irfft2(&rfft2(&z).unwrap()).unwrap();
        assert!(back.max_abs_diff(&z) < 1e-10);

        let zero = FreqGrid::new(Tensor::zeros(&[3, 3, 2]), Tensor::zeros(&[3, 3, 2]), 3, 4).unwrap();
        assert!(irfft2(&zero).unwrap().data().iter().all(|&v| v == 0.0));

        let mut re = Tensor::zeros(&[4, 3, 1]);
        re.data_mut()[0] = 16.0 * 0.75;
        let dc = FreqGrid::new(re, Tensor::zeros(&[4, 3, 1]), 4, 4).unwrap();
        let field = irfft2(&dc).unwrap();
        assert!(field.data().iter().all(|&v| (v - 0.75).abs() < 1e-15));
    }

    #[test]
    fn rejects_imaginary_dc() {
        let mut im = Tensor::zeros(&[2, 2, 1]);
        im.data_mut()[0] = 0.5;
        let f = FreqGrid::new(Tensor::zeros(&[2, 2, 1]), im, 2, 2).unwrap();
        assert!(matches!(irfft2(&f), Err(crate::error::Error::Contract(_))));
    }

    #[test]
    fn rejects_mismatched_planes() {
        assert!(FreqGrid::new(Tensor::zeros(&[2, 2, 1]), Tensor::zeros(&[2, 2, 1]), 2, 4).is_err());
    }

    #[test]
    fn adjoints_satisfy_inner_product_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for &(h, w) in &[(3usize, 4usize), (5, 5), (2, 7)] {
            let d = 2;
            let n = h * w * d;
            let m = 2 * h * half_width(w) * d;
            let x = Tensor::randn(&[n], 1.0, &mut rng);
            let y = Tensor::randn(&[m], 1.0, &mut rng);
            let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(p, q)| p * q).sum::<f64>();
            let fx = rfft2_raw(x.data(), h, w, d);
            let aty = rfft2_adjoint_raw(y.data(), h, w, d);
            assert!((dot(&fx, y.data()) - dot(x.data(), &aty)).abs() < 1e-10);
            let iy = irfft2_raw(y.data(), h, w, d);
            let atx = irfft2_adjoint_raw(x.data(), h, w, d);
            assert!((dot(&iy, x.data()) - dot(y.data(), &atx)).abs() < 1e-10);
        }
    }
}
