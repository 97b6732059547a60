//! Fixed 2-D sinusoidal positional encoding for grid tokens.

use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Encoding for a `g x g` token grid at width `d` (d divisible by 4): the
/// first d/2 dims encode the column with interleaved sin/cos at geometric
/// frequencies, the second half the row. Returned as a `[g*g, d]` constant.
pub fn sinusoidal_2d<S: Scalar>(g: usize, d: usize) -> Tensor<S> {
    assert!(d % 4 == 0, "positional encoding needs d divisible by 4");
    let half = d / 2;
    let pairs = half / 2;
    let mut data = vec![S::zero(); g * g * d];
    for row in 0..g {
        for col in 0..g {
            let token = row * g + col;
            for k in 0..pairs {
                let freq = 1.0 / 10000f64.powf(2.0 * k as f64 / half as f64);
                let (sx, cx) = (col as f64 * freq).sin_cos();
                let (sy, cy) = (row as f64 * freq).sin_cos();
                data[token * d + 2 * k] = S::from_f64(sx);
                data[token * d + 2 * k + 1] = S::from_f64(cx);
                data[token * d + half + 2 * k] = S::from_f64(sy);
                data[token * d + half + 2 * k + 1] = S::from_f64(cy);
            }
        }
    }
    Tensor::constant(vec![g * g, d], data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn encoding_distinguishes_positions() {
        let pe: Tensor<f64> = sinusoidal_2d(4, 8);
        assert_eq!(pe.shape(), &[16, 8]);
        let data = pe.data_vec();
        // distinct tokens get distinct encodings
        for a in 0..16 {
            for b in (a + 1)..16 {
                let same = (0..8).all(|k| (data[a * 8 + k] - data[b * 8 + k]).abs() < 1e-12);
                assert!(!same, "tokens {a} and {b} collide");
            }
        }
        // transposed grid positions swap the two halves
        let (r, c) = (1, 3);
        let t1 = r * 4 + c;
        let t2 = c * 4 + r;
        for k in 0..4 {
            assert!((data[t1 * 8 + k] - data[t2 * 8 + 4 + k]).abs() < 1e-12);
        }
    }
}
