//! Seeded synthetic checkpoints for tests, benchmarks and the `synth` command.

use half::f16;
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::tensor::{Checkpoint, TensorBlob};

/// Weight scale typical of initialized transformer layers.
const MODEL_STD: f32 = 0.02;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normal_f32(rng: &mut impl Rng, n: usize, mean: f32, std: f32) -> Vec<f32> {
    let d = Normal::new(mean, std).expect("finite std");
    (0..n).map(|_| d.sample(rng)).collect()
}

pub fn normal_f16_bits(rng: &mut impl Rng, n: usize, std: f32) -> Vec<u16> {
    normal_f32(rng, n, 0.0, std)
        .into_iter()
        .map(|v| f16::from_f32(v).to_bits())
        .collect()
}

/// Model tensors `model.<i>` (F16) and optimizer tensors `optim.<i>` (F32,
/// unit normal), one-dimensional with the given element counts.
pub fn random_checkpoint(
    iteration: u64,
    model_numels: &[usize],
    optimizer_numels: &[usize],
    seed: u64,
) -> Checkpoint {
    let mut rng = rng(seed);
    let model = model_numels
        .iter()
        .enumerate()
        .map(|(i, &n)| {
            let bits = normal_f16_bits(&mut rng, n, MODEL_STD);
            TensorBlob::from_f16_bits(format!("model.{i}"), vec![n as u64], &bits).unwrap()
        })
        .collect();
    let optimizer = optimizer_numels
        .iter()
        .enumerate()
        .map(|(i, &n)| {
            let v = normal_f32(&mut rng, n, 0.0, 1.0);
            TensorBlob::from_f32(format!("optim.{i}"), vec![n as u64], &v).unwrap()
        })
        .collect();
    Checkpoint::new(iteration, model, optimizer).unwrap()
}

/// Changes exactly `round(fraction * n)` elements of every model tensor by
/// flipping low mantissa bits (so finite values stay finite) and redraws all
/// optimizer values.
pub fn mutate(ckpt: &Checkpoint, iteration: u64, fraction: f64, seed: u64) -> Checkpoint {
    let mut rng = rng(seed);
    let model = ckpt
        .model_states
        .iter()
        .map(|t| {
            let mut bits = t.f16_bits();
            change_exactly(&mut rng, &mut bits, fraction);
            TensorBlob::from_f16_bits(t.name(), t.shape().to_vec(), &bits).unwrap()
        })
        .collect();
    let optimizer = ckpt
        .optimizer_states
        .iter()
        .map(|t| {
            let v = normal_f32(&mut rng, t.numel(), 0.0, 1.0);
            TensorBlob::from_f32(t.name(), t.shape().to_vec(), &v).unwrap()
        })
        .collect();
    Checkpoint::new(iteration, model, optimizer).unwrap()
}

/// Flips low mantissa bits at `round(fraction * len)` distinct positions.
/// Returns the number of changed elements.
pub fn change_exactly(rng: &mut impl Rng, bits: &mut [u16], fraction: f64) -> usize {
    let k = ((fraction.clamp(0.0, 1.0) * bits.len() as f64).round() as usize).min(bits.len());
    for i in index::sample(rng, bits.len(), k) {
        bits[i] ^= rng.random_range(1..=0x3FFu16);
    }
    k
}
