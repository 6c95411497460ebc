//! Times training-mode forward+backward passes for a few network widths.

use std::time::Instant;

use cmems::segnet::{UNet, UNetConfig};
use cmems::tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() {
    let side: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(64);
    let batch: usize = std::env::args().nth(2).and_then(|s| s.parse().ok()).unwrap_or(2);
    for base in [4usize, 8, 16] {
        let mut net = UNet::<f32>::new(UNetConfig::new(4).with_base_channels(base), 0).unwrap();
        let x = Tensor::<f32>::from_vec(
            (0..batch * side * side).map(|i| (i % 97) as f32 / 97.0).collect(),
            1,
            batch,
            side,
            side,
        );
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let reps = 20;
        let t = Instant::now();
        for _ in 0..reps {
            let (y, tape) = net.forward_train(&x, &mut rng).unwrap();
            net.backward(&tape, &y);
        }
        let fb = t.elapsed().as_secs_f64() / reps as f64;
        let t = Instant::now();
        for _ in 0..reps {
            std::hint::black_box(net.forward_eval(&x).unwrap());
        }
        let f = t.elapsed().as_secs_f64() / reps as f64;
        println!("base {base:2} {side}x{side} batch {batch}: fwd+bwd {:.2} ms, eval fwd {:.2} ms, params {}", fb * 1e3, f * 1e3, net.param_count());
    }
}
