//! Synthetic linearly separable sequences for fast end-to-end checks.
//!
//! The generator produces a two-class problem whose answer lives exactly
//! where the classifier looks: channel 0 of the final time step is drawn
//! from `±[0.8, 1.2]` with the sign giving the class, while every other
//! value is low-amplitude uniform noise. A threshold on that single reading
//! separates the classes perfectly, so any competent sequence model should
//! reach ~100% accuracy within a few epochs.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::tensor::Tensor;

use super::{SplitDataset, WindowedDataset};

/// Builds balanced train/test splits of the two-class toy problem.
///
/// `train_per_class`/`test_per_class` windows per class, each `window_len`
/// steps of `channels` channels. Classes alternate, so batches stay mixed
/// even before shuffling. Fully determined by `seed`.
pub fn toy_two_class(
    train_per_class: usize,
    test_per_class: usize,
    window_len: usize,
    channels: usize,
    seed: u64,
) -> SplitDataset {
    assert!(window_len >= 1 && channels >= 1, "degenerate toy geometry");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let train = generate(train_per_class, window_len, channels, &mut rng);
    let test = generate(test_per_class, window_len, channels, &mut rng);
    SplitDataset {
        train,
        test,
        class_names: vec!["negative".to_string(), "positive".to_string()],
    }
}

fn generate(
    per_class: usize,
    window_len: usize,
    channels: usize,
    rng: &mut ChaCha8Rng,
) -> WindowedDataset {
    let n = per_class * 2;
    let mut data = Vec::with_capacity(n * window_len * channels);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % 2;
        for t in 0..window_len {
            for c in 0..channels {
                let v = if t == window_len - 1 && c == 0 {
                    let magnitude = 0.8 + 0.4 * rng.gen::<f64>();
                    if class == 1 {
                        magnitude
                    } else {
                        -magnitude
                    }
                } else {
                    // Noise well inside the signal margin.
                    (rng.gen::<f64>() * 2.0 - 1.0) * 0.3
                };
                data.push(v);
            }
        }
        labels.push(class);
    }
    WindowedDataset {
        samples: Tensor::new(vec![n, window_len, channels], data).expect("toy shape"),
        labels,
        class_count: 2,
        window_len,
        step: window_len,
    }
}
