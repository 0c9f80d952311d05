//! Dense layers operating on (B, T, D) sequence tensors.

use ndarray::{Array3, Axis};
use rand::Rng;

use super::{flatten_bt, init_constant, init_fan_in_uniform, seq_linear, GradBuf, ParamArena, ParamId};

const LN_EPS: f64 = 1e-5;

/// Fully connected layer, `y = x W^T + b`, weight shape (out, in).
#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(arena: &mut ParamArena, name: &str, in_dim: usize, out_dim: usize) -> Self {
        let w = arena.alloc(&format!("{name}.weight"), &[out_dim, in_dim]);
        let b = arena.alloc(&format!("{name}.bias"), &[out_dim]);
        Linear {
            w,
            b: Some(b),
            in_dim,
            out_dim,
        }
    }

    /// Linear layer without bias (prototype logits).
    pub fn new_no_bias(arena: &mut ParamArena, name: &str, in_dim: usize, out_dim: usize) -> Self {
        let w = arena.alloc(&format!("{name}.weight"), &[out_dim, in_dim]);
        Linear {
            w,
            b: None,
            in_dim,
            out_dim,
        }
    }

    pub fn init(&self, arena: &mut ParamArena, rng: &mut impl Rng) {
        init_fan_in_uniform(arena, self.w, self.in_dim, rng);
        if let Some(b) = self.b {
            init_fan_in_uniform(arena, b, self.in_dim, rng);
        }
    }

    pub fn forward(&self, arena: &ParamArena, x: &Array3<f64>) -> Array3<f64> {
        let w = arena.view2(self.w);
        let b = self.b.map(|b| arena.view1(b));
        seq_linear(x, &w, b.as_ref())
    }

    /// Returns the gradient wrt the input; accumulates parameter gradients.
    pub fn backward(
        &self,
        arena: &ParamArena,
        x: &Array3<f64>,
        gy: &Array3<f64>,
        grads: &mut GradBuf,
    ) -> Array3<f64> {
        let (bsz, t, _) = x.dim();
        let x2 = flatten_bt(x);
        let gy2 = flatten_bt(gy);
        {
            let mut gw = grads.view2_mut(arena, self.w);
            gw += &gy2.t().dot(&x2);
        }
        if let Some(b) = self.b {
            let mut gb = grads.view1_mut(arena, b);
            gb += &gy2.sum_axis(Axis(0));
        }
        let gx2 = gy2.dot(&arena.view2(self.w));
        gx2.into_shape((bsz, t, self.in_dim)).unwrap().to_owned()
    }
}

/// LayerNorm over the feature axis with learnable gain/shift.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub dim: usize,
}

/// Cache produced by [`LayerNorm::forward`], consumed by the backward pass.
pub struct LayerNormCache {
    xhat: Array3<f64>,
    inv_std: Array3<f64>, // (B, T, 1)
}

impl LayerNorm {
    pub fn new(arena: &mut ParamArena, name: &str, dim: usize) -> Self {
        let gamma = arena.alloc(&format!("{name}.gamma"), &[dim]);
        let beta = arena.alloc(&format!("{name}.beta"), &[dim]);
        LayerNorm { gamma, beta, dim }
    }

    pub fn init(&self, arena: &mut ParamArena) {
        init_constant(arena, self.gamma, 1.0);
        init_constant(arena, self.beta, 0.0);
    }

    pub fn forward(&self, arena: &ParamArena, x: &Array3<f64>) -> (Array3<f64>, LayerNormCache) {
        let mean = x.mean_axis(Axis(2)).unwrap().insert_axis(Axis(2));
        let centered = x - &mean;
        let var = centered.mapv(|v| v * v).mean_axis(Axis(2)).unwrap();
        let inv_std = var.mapv(|v| 1.0 / (v + LN_EPS).sqrt()).insert_axis(Axis(2));
        let xhat = &centered * &inv_std;
        let gamma = arena.view1(self.gamma);
        let beta = arena.view1(self.beta);
        let y = &xhat * &gamma + &beta;
        (
            y,
            LayerNormCache {
                xhat,
                inv_std,
            },
        )
    }

    pub fn backward(
        &self,
        arena: &ParamArena,
        cache: &LayerNormCache,
        gy: &Array3<f64>,
        grads: &mut GradBuf,
    ) -> Array3<f64> {
        let d = self.dim as f64;
        let gamma = arena.view1(self.gamma);
        {
            let gy2 = flatten_bt(gy);
            let xhat2 = flatten_bt(&cache.xhat);
            let mut ggamma = grads.view1_mut(arena, self.gamma);
            ggamma += &(&gy2 * &xhat2).sum_axis(Axis(0));
            let mut gbeta = grads.view1_mut(arena, self.beta);
            gbeta += &gy2.sum_axis(Axis(0));
        }
        // dx = inv_std/D * (D*gxhat - sum(gxhat) - xhat * sum(gxhat*xhat))
        let gxhat = gy * &gamma;
        let sum_g = gxhat.sum_axis(Axis(2)).insert_axis(Axis(2));
        let sum_gx = (&gxhat * &cache.xhat).sum_axis(Axis(2)).insert_axis(Axis(2));
        let dx = (&gxhat * d - &sum_g - &cache.xhat * &sum_gx) * &cache.inv_std / d;
        dx
    }
}

/// SiLU activation, `x * sigmoid(x)`.
pub fn silu(x: &Array3<f64>) -> Array3<f64> {
    x.mapv(|v| v * sigmoid(v))
}

/// Gradient of SiLU given the pre-activation input.
pub fn silu_backward(x: &Array3<f64>, gy: &Array3<f64>) -> Array3<f64> {
    let mut gx = gy.clone();
    ndarray::Zip::from(&mut gx).and(x).for_each(|g, &v| {
        let s = sigmoid(v);
        *g *= s * (1.0 + v * (1.0 - s));
    });
    gx
}

#[inline]
pub fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

/// Inverted dropout; identity in eval mode.
#[derive(Debug, Clone)]
pub struct Dropout {
    pub rate: f64,
}

impl Dropout {
    pub fn new(rate: f64) -> Self {
        assert!((0.0..1.0).contains(&rate), "dropout rate in [0,1)");
        Dropout { rate }
    }

    /// Returns (output, keep-mask). Mask is `None` when inactive.
    pub fn forward(
        &self,
        x: &Array3<f64>,
        train: bool,
        rng: &mut (impl Rng + ?Sized),
    ) -> (Array3<f64>, Option<Array3<f64>>) {
        if !train || self.rate == 0.0 {
            return (x.clone(), None);
        }
        let keep = 1.0 - self.rate;
        let mask = Array3::from_shape_simple_fn(x.dim(), || {
            if rng.gen::<f64>() < keep {
                1.0 / keep
            } else {
                0.0
            }
        });
        (x * &mask, Some(mask))
    }

    pub fn backward(&self, gy: &Array3<f64>, mask: Option<&Array3<f64>>) -> Array3<f64> {
        match mask {
            Some(m) => gy * m,
            None => gy.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn randn3(dim: (usize, usize, usize), rng: &mut ChaCha8Rng) -> Array3<f64> {
        use rand_distr::StandardNormal;
        Array3::from_shape_simple_fn(dim, || rng.sample(StandardNormal))
    }

    #[test]
    fn linear_forward_matches_manual() {
        let mut arena = ParamArena::new();
        let lin = Linear::new(&mut arena, "l", 3, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        lin.init(&mut arena, &mut rng);
        let x = randn3((2, 4, 3), &mut rng);
        let y = lin.forward(&arena, &x);
        let w = arena.view2(lin.w);
        let b = arena.view1(lin.b.unwrap());
        for bi in 0..2 {
            for t in 0..4 {
                for o in 0..2 {
                    let want: f64 =
                        (0..3).map(|i| x[[bi, t, i]] * w[[o, i]]).sum::<f64>() + b[o];
                    assert!((y[[bi, t, o]] - want).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn layernorm_normalizes_rows() {
        let mut arena = ParamArena::new();
        let ln = LayerNorm::new(&mut arena, "ln", 8);
        ln.init(&mut arena);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = randn3((2, 3, 8), &mut rng) * 4.0 + 1.5;
        let (y, _) = ln.forward(&arena, &x);
        for b in 0..2 {
            for t in 0..3 {
                let row: Vec<f64> = (0..8).map(|i| y[[b, t, i]]).collect();
                let mean: f64 = row.iter().sum::<f64>() / 8.0;
                let var: f64 = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 8.0;
                assert!(mean.abs() < 1e-10);
                assert!((var - 1.0).abs() < 1e-3);
            }
        }
    }

    #[test]
    fn dropout_eval_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = randn3((1, 5, 4), &mut rng);
        let d = Dropout::new(0.5);
        let (y, mask) = d.forward(&x, false, &mut rng);
        assert!(mask.is_none());
        assert_eq!(x, y);
    }

    #[test]
    fn dropout_train_scales_kept_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = Array3::<f64>::ones((1, 10, 10));
        let d = Dropout::new(0.3);
        let (y, mask) = d.forward(&x, true, &mut rng);
        let mask = mask.unwrap();
        for (v, m) in y.iter().zip(mask.iter()) {
            assert!((*v - *m).abs() < 1e-15);
            assert!(*m == 0.0 || (*m - 1.0 / 0.7).abs() < 1e-12);
        }
    }
}
