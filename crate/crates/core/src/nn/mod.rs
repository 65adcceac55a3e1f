//! Tiny f64 autodiff engine plus the layers, optimizer, and checkpoint blob
//! format shared by the diffusion restorer and the 3D interpolation network.

pub mod adam;
pub mod blob;
pub mod conv;
pub mod graph;
pub mod layers;

pub use adam::{Adam, AdamConfig};
pub use graph::{Graph, T};

use ndarray::ArrayD;

/// Central finite-difference gradient of a scalar function of one array,
/// used as the independent oracle for analytic gradients.
pub fn finite_diff_grad<F>(x: &ArrayD<f64>, eps: f64, mut f: F) -> ArrayD<f64>
where
    F: FnMut(&ArrayD<f64>) -> f64,
{
    let mut grad = ArrayD::<f64>::zeros(x.raw_dim());
    let mut xp = x.clone();
    for idx in 0..x.len() {
        let orig = xp.as_slice_mut().unwrap()[idx];
        xp.as_slice_mut().unwrap()[idx] = orig + eps;
        let fp = f(&xp);
        xp.as_slice_mut().unwrap()[idx] = orig - eps;
        let fm = f(&xp);
        xp.as_slice_mut().unwrap()[idx] = orig;
        grad.as_slice_mut().unwrap()[idx] = (fp - fm) / (2.0 * eps);
    }
    grad
}

/// Max relative error between two gradient arrays, with an absolute floor so
/// near-zero entries compare absolutely.
pub fn max_rel_err(a: &ArrayD<f64>, b: &ArrayD<f64>, floor: f64) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(floor))
        .fold(0.0, f64::max)
}
