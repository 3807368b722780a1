//! Fixtures shared by the criterion benches under `benches/`.

use vaediff::diffusion::{linear_schedule, Conditioning, DenoiserModel, NoiseSchedule};
use vaediff::nn::{RngStream, Tensor};

/// Desk-default sized refiner on 2-D data with a `T = 100` schedule.
pub fn refiner(seed: u64) -> (DenoiserModel, NoiseSchedule) {
    let mut rng = RngStream::new(seed);
    let den = DenoiserModel::init(2, &[128, 128, 128], 32, Conditioning::Form1Concat, &mut rng).expect("valid dims");
    (den, linear_schedule(100, 1e-3, 0.2).expect("valid betas"))
}

/// `n` points in `[-1, 1]^dim`.
pub fn points(seed: u64, n: usize, dim: usize) -> Tensor {
    RngStream::new(seed).gaussian(&[n, dim]).map(|v| (0.4 * v).clamp(-1.0, 1.0))
}
