// SPDX-License-Identifier: MIT OR Apache-2.0

use nmri_core::scan_struct::tensor_stats;
use rand::SeedableRng;
use rand_distr::{Distribution, Normal, Uniform};

#[test]
fn million_normal_samples_have_zero_excess_kurtosis() {
    let mut rng = rand::rngs::StdRng::seed_from_u64(2024);
    let normal = Normal::new(0.0f32, 1.0).unwrap();
    let xs: Vec<f32> = (0..1_000_000).map(|_| normal.sample(&mut rng)).collect();
    let s = tensor_stats("normal", &xs).unwrap();
    let k = s.excess_kurtosis.unwrap();
    assert!(k.abs() <= 0.05, "{k}");
    assert!(s.mean.abs() < 0.01);
    assert!((s.variance - 1.0).abs() < 0.01);
}

#[test]
fn uniform_samples_have_closed_form_kurtosis() {
    // Excess kurtosis of a continuous uniform distribution is -6/5.
    let mut rng = rand::rngs::StdRng::seed_from_u64(7);
    let u = Uniform::new(-1.0f32, 1.0).unwrap();
    let xs: Vec<f32> = (0..1_000_000).map(|_| u.sample(&mut rng)).collect();
    let k = tensor_stats("uniform", &xs).unwrap().excess_kurtosis.unwrap();
    assert!((k + 1.2).abs() < 0.01, "{k}");
}
