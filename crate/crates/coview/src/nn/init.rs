//! Deterministic parameter initialization.

use ndarray::{ArrayD, IxDyn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

/// Seeded initializer. Parameters must be drawn in a fixed order to make
/// network construction reproducible.
pub struct Initializer {
    rng: ChaCha8Rng,
}

impl Initializer {
    pub fn new(seed: u64) -> Self {
        Initializer {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// He-style normal init for a conv weight `[O, C, kh, kw]`.
    pub fn kaiming_conv(&mut self, shape: [usize; 4]) -> ArrayD<f32> {
        let fan_in = (shape[1] * shape[2] * shape[3]) as f64;
        let std = (2.0 / fan_in).sqrt();
        let dist = Normal::new(0.0, std).expect("valid std");
        ArrayD::from_shape_simple_fn(IxDyn(&shape), || dist.sample(&mut self.rng) as f32)
    }

    pub fn zeros(&mut self, shape: &[usize]) -> ArrayD<f32> {
        ArrayD::zeros(IxDyn(shape))
    }
}

/// Bilinear-interpolation kernel for a transposed conv `[C, C, k, k]` that
/// upsamples by `stride`. Off-diagonal channel pairs are zero.
pub fn bilinear_deconv(channels: usize, kernel: usize, stride: usize) -> ArrayD<f32> {
    assert_eq!(kernel, 2 * stride, "bilinear kernel must be twice the stride");
    let factor = ((kernel + 1) / 2) as f32;
    let center = if kernel % 2 == 1 {
        factor - 1.0
    } else {
        factor - 0.5
    };
    let taps: Vec<f32> = (0..kernel)
        .map(|i| 1.0 - (i as f32 - center).abs() / factor)
        .collect();
    let mut w = ArrayD::zeros(IxDyn(&[channels, channels, kernel, kernel]));
    for ch in 0..channels {
        for i in 0..kernel {
            for j in 0..kernel {
                w[[ch, ch, i, j]] = taps[i] * taps[j];
            }
        }
    }
    w
}
