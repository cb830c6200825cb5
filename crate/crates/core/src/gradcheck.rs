//! Central finite differences, used as an independent oracle for the tape.
//!
//! Nothing here touches [`crate::graph`]; `f` is only ever evaluated.

use crate::module::Parameterized;
use crate::tensor::Tensor;

pub const DEFAULT_STEP: f64 = 1e-5;

/// `(f(p + h e_i) - f(p - h e_i)) / 2h` for every coordinate of every tensor.
pub fn finite_diff_grad<F>(mut f: F, params: &[Tensor], h: f64) -> Vec<Tensor>
where
    F: FnMut(&[Tensor]) -> f64,
{
    assert!(h > 0.0, "finite difference step must be positive");
    let mut work: Vec<Tensor> = params.to_vec();
    let mut out = Vec::with_capacity(params.len());
    for ti in 0..params.len() {
        let mut grad = vec![0.0; params[ti].numel()];
        for (i, gi) in grad.iter_mut().enumerate() {
            let orig = work[ti].data()[i];
            work[ti].data_mut()[i] = orig + h;
            let up = f(&work);
            work[ti].data_mut()[i] = orig - h;
            let down = f(&work);
            work[ti].data_mut()[i] = orig;
            *gi = (up - down) / (2.0 * h);
        }
        out.push(Tensor::new(params[ti].shape(), grad).expect("same shape"));
    }
    out
}

/// Finite differences over every parameter of a module, in
/// [`Parameterized::params_mut`] order.
pub fn finite_diff_module<M, F>(module: &M, mut f: F, h: f64) -> Vec<Vec<f64>>
where
    M: Parameterized + Clone,
    F: FnMut(&M) -> f64,
{
    assert!(h > 0.0, "finite difference step must be positive");
    let mut work = module.clone();
    let n_params = work.params_mut().len();
    let mut out = Vec::with_capacity(n_params);
    for pi in 0..n_params {
        let numel = work.params_mut()[pi].numel();
        let mut grad = vec![0.0; numel];
        for (i, gi) in grad.iter_mut().enumerate() {
            let orig = work.params_mut()[pi].data()[i];
            work.params_mut()[pi].data_mut()[i] = orig + h;
            let up = f(&work);
            work.params_mut()[pi].data_mut()[i] = orig - h;
            let down = f(&work);
            work.params_mut()[pi].data_mut()[i] = orig;
            *gi = (up - down) / (2.0 * h);
        }
        out.push(grad);
    }
    out
}

/// `|a - b| / max(1, |a|, |b|)`
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / 1f64.max(a.abs()).max(b.abs())
}

pub fn max_relative_error(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "gradient length mismatch");
    a.iter()
        .zip(b)
        .map(|(x, y)| relative_error(*x, *y))
        .fold(0.0, f64::max)
}
