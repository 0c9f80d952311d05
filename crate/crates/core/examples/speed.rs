use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::time::Instant;
use syrinx_core::model::{build_model, HeadSpec, ModelConfig};
use syrinx_core::nn::GradBuf;

fn main() {
    for (hidden, b, t) in [(32usize, 8usize, 690usize), (64, 8, 690), (32, 4, 1379), (64, 4, 1379)] {
        let cfg = ModelConfig::desk(hidden, HeadSpec::Classifier { classes: 9 });
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let model = build_model(&cfg, &mut rng).unwrap();
        let x = Array3::from_shape_simple_fn((b, t, 256), || rng.gen::<f64>());
        let start = Instant::now();
        let mut rng2 = ChaCha8Rng::seed_from_u64(1);
        let (y, trace) = model.forward(&x, true, Some(&mut rng2)).unwrap();
        let fwd = start.elapsed();
        let start = Instant::now();
        let mut grads = GradBuf::zeros_like(&model.params);
        let _ = model.backward(&x, &trace, &y, &mut grads);
        let bwd = start.elapsed();
        println!("hidden={hidden} B={b} T={t}: fwd={:?} bwd={:?} (params {})", fwd, bwd, model.param_count());
    }
}
