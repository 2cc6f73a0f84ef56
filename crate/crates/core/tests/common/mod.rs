#![allow(dead_code)]

pub mod gradcheck;
pub mod oracle;
pub mod smoke;

use st3d::{Rng, Shape, Tensor};

/// Uniform values in `[-scale, scale)`.
pub fn random_tensor(shape: Shape, scale: f32, rng: &mut Rng) -> Tensor {
    let data = (0..shape.numel())
        .map(|_| ((rng.uniform() * 2.0 - 1.0) as f32) * scale)
        .collect();
    Tensor::from_vec(shape, data).unwrap()
}

/// Distinct values at least `gap` apart in shuffled order, centred on zero
/// and avoiding it, so max-pool winners and ReLU signs are stable under
/// small perturbations.
pub fn separated_tensor(shape: Shape, gap: f32, rng: &mut Rng) -> Tensor {
    let n = shape.numel();
    let mut order: Vec<usize> = (0..n).collect();
    rng.shuffle(&mut order);
    let data = order
        .iter()
        .map(|&i| (i as f32 - n as f32 / 2.0 + 0.5) * gap)
        .collect();
    Tensor::from_vec(shape, data).unwrap()
}
