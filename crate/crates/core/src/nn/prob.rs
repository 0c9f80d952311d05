//! Softmax utilities shared by the SSL and supervised losses.

use ndarray::{Array2, Array3, Axis};

/// Row-wise tempered softmax of an (N, K) logit matrix, max-subtracted.
pub fn softmax_rows(z: &Array2<f64>, tau: f64) -> Array2<f64> {
    assert!(tau > 0.0, "temperature must be positive");
    let mut p = z.clone();
    for mut row in p.rows_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = ((*v - max) / tau).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    p
}

/// Per-frame tempered softmax over the last axis of (B, T, K) logits.
pub fn softmax_frames(z: &Array3<f64>, tau: f64) -> Array3<f64> {
    assert!(tau > 0.0, "temperature must be positive");
    let mut p = z.clone();
    for mut row in p.rows_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = ((*v - max) / tau).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    p
}

/// Chain a gradient wrt probabilities back to logits through a tempered
/// softmax: `g_z = (p .* (g_p - sum(g_p .* p))) / tau` per row.
pub fn softmax_backward_frames(p: &Array3<f64>, g_p: &Array3<f64>, tau: f64) -> Array3<f64> {
    let dot = (g_p * p).sum_axis(Axis(2)).insert_axis(Axis(2));
    (p * &(g_p - &dot)) / tau
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr2;

    #[test]
    fn rows_sum_to_one_and_match_direct_formula() {
        let z = arr2(&[
            [0.3, -1.2, 2.0, 0.0, 0.7, -0.4, 1.1],
            [1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0],
            [-3.0, 0.5, 0.2, -0.1, 4.0, 2.2, -2.0],
            [0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6],
            [9.0, -9.0, 3.0, 1.0, 0.0, -1.0, 2.0],
        ]);
        let tau = 0.7;
        let p = softmax_rows(&z, tau);
        for i in 0..5 {
            let sum: f64 = p.row(i).sum();
            assert!((sum - 1.0).abs() < 1e-12);
            // direct exp/sum oracle
            let denom: f64 = z.row(i).iter().map(|v| (v / tau).exp()).sum();
            for j in 0..7 {
                let want = (z[[i, j]] / tau).exp() / denom;
                assert!((p[[i, j]] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn constant_row_is_uniform() {
        let z = Array2::from_elem((2, 8), 3.25);
        let p = softmax_rows(&z, 0.1);
        assert!(p.iter().all(|v| (*v - 0.125).abs() < 1e-14));
    }

    #[test]
    fn small_temperature_concentrates_on_argmax() {
        let z = arr2(&[[1.0, 0.0, -1.0, 2.0]]);
        let p = softmax_rows(&z, 0.01);
        assert!(p[[0, 3]] >= 0.999);
    }
}
