use super::Tensor;
use crate::error::{Error, Result};

/// Central-difference gradient of a scalar function over every coordinate of `theta`.
pub fn finite_diff_grad<F>(f: F, theta: &Tensor, h: f64) -> Result<Tensor>
where
    F: FnMut(&Tensor) -> Result<f64>,
{
    let coords: Vec<usize> = (0..theta.numel()).collect();
    let vals = finite_diff_coords(f, theta, &coords, h)?;
    Tensor::new(theta.shape(), vals)
}

/// Central differences `(f(θ+h·e_j) − f(θ−h·e_j)) / 2h` for the listed coordinates only.
pub fn finite_diff_coords<F>(mut f: F, theta: &Tensor, coords: &[usize], h: f64) -> Result<Vec<f64>>
where
    F: FnMut(&Tensor) -> Result<f64>,
{
    let mut probe = theta.clone();
    let mut out = Vec::with_capacity(coords.len());
    for &j in coords {
        let orig = probe.data()[j];
        probe.data_mut()[j] = orig + h;
        let plus = f(&probe)?;
        probe.data_mut()[j] = orig - h;
        let minus = f(&probe)?;
        probe.data_mut()[j] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::Numerical(format!(
                "non-finite evaluation at coordinate {j}"
            )));
        }
        out.push((plus - minus) / (2.0 * h));
    }
    Ok(out)
}
