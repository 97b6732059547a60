//! Gradient verification by central finite differences.

use rand::{Rng, RngCore};
use thiserror::Error;

use super::{no_grad, Tensor, TensorError};
use crate::scalar::Scalar;

#[derive(Debug, Error)]
pub enum GradCheckError {
    #[error("function produced a non-finite value at {0}")]
    NonFinite(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Compare the analytic gradient of a scalar-valued program against central
/// finite differences on randomly sampled parameter coordinates.
///
/// `f` must be a deterministic function of the leaf data (it is re-evaluated
/// many times with perturbed leaves). Relative error uses the denominator
/// `max(|analytic|, |numeric|, 1e-8)`; the maximum over all sampled
/// coordinates is returned.
pub fn grad_check<S: Scalar>(
    f: &dyn Fn(&[Tensor<S>]) -> Result<Tensor<S>, TensorError>,
    leaves: &[Tensor<S>],
    eps: f64,
    n_samples: usize,
    rng: &mut dyn RngCore,
) -> Result<f64, GradCheckError> {
    for leaf in leaves {
        leaf.zero_grad();
    }
    let loss = f(leaves)?;
    if !loss.item().as_f64().is_finite() {
        return Err(GradCheckError::NonFinite("loss".into()));
    }
    loss.backward()?;
    let analytic: Vec<Vec<f64>> = leaves
        .iter()
        .map(|l| {
            l.grad_vec()
                .map(|g| g.iter().map(|v| v.as_f64()).collect())
                .unwrap_or_else(|| vec![0.0; l.len()])
        })
        .collect();

    let sizes: Vec<usize> = leaves.iter().map(|l| l.len()).collect();
    let total: usize = sizes.iter().sum();
    assert!(total > 0, "grad_check needs at least one parameter");

    let coords: Vec<usize> = if n_samples >= total {
        (0..total).collect()
    } else {
        (0..n_samples).map(|_| rng.random_range(0..total)).collect()
    };

    let eval = |leaves: &[Tensor<S>]| -> Result<f64, GradCheckError> {
        let y = no_grad(|| f(leaves))?;
        let v = y.item().as_f64();
        if !v.is_finite() {
            return Err(GradCheckError::NonFinite("perturbed loss".into()));
        }
        Ok(v)
    };

    let mut max_rel = 0.0f64;
    for flat in coords {
        let (li, idx) = locate(&sizes, flat);
        let leaf = &leaves[li];
        let mut data = leaf.data_vec();
        let original = data[idx];

        data[idx] = original + S::from_f64(eps);
        leaf.set_data(&data);
        let plus = eval(leaves)?;

        data[idx] = original - S::from_f64(eps);
        leaf.set_data(&data);
        let minus = eval(leaves)?;

        data[idx] = original;
        leaf.set_data(&data);

        let numeric = (plus - minus) / (2.0 * eps);
        let a = analytic[li][idx];
        let denom = a.abs().max(numeric.abs()).max(1e-8);
        let rel = (a - numeric).abs() / denom;
        if !rel.is_finite() {
            return Err(GradCheckError::NonFinite(format!(
                "relative error at leaf {li} coord {idx}"
            )));
        }
        max_rel = max_rel.max(rel);
    }
    Ok(max_rel)
}

fn locate(sizes: &[usize], mut flat: usize) -> (usize, usize) {
    for (i, &s) in sizes.iter().enumerate() {
        if flat < s {
            return (i, flat);
        }
        flat -= s;
    }
    unreachable!("coordinate out of range");
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    #[test]
    fn quadratic_bowl_matches_analytic_gradient() {
        let x = Tensor::leaf(vec![5], vec![0.3, -1.2, 2.0, 0.0, 4.5]);
        let f = |leaves: &[Tensor<f64>]| Ok(leaves[0].mul(&leaves[0])?.sum());
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        let err = grad_check(&f, &[x], 1e-5, 100, &mut rng).unwrap();
        assert!(err < 1e-9, "relative error {err}");
    }

    #[test]
    fn two_layer_net_passes_fd_check() {
        let mut rng = ChaCha12Rng::seed_from_u64(2);
        let randv = |n: usize, rng: &mut ChaCha12Rng| -> Vec<f64> {
            (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
        };
        let w1 = Tensor::leaf(vec![3, 4], randv(12, &mut rng));
        let w2 = Tensor::leaf(vec![4, 2], randv(8, &mut rng));
        let x = Tensor::constant(vec![2, 3], randv(6, &mut rng));
        let f = move |leaves: &[Tensor<f64>]| {
            let h = x.matmul(&leaves[0])?.relu();
            let y = h.matmul(&leaves[1])?.sigmoid();
            Ok(y.sum())
        };
        let err = grad_check(&f, &[w1, w2], 1e-5, 500, &mut rng).unwrap();
        assert!(err < 1e-6, "relative error {err}");
    }
}
