#![allow(dead_code)]

use mctseg::data::{PhantomSpec, VolumeSample};
use mctseg::model::ModelConfig;
use mctseg::Error;
use mctseg_tensor::{Scalar, Tensor, TensorError};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normal<T: Scalar>(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<T> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| T::from_f64(rng.sample(StandardNormal))).collect();
    Tensor::new(shape, data).unwrap()
}

pub fn uniform<T: Scalar>(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor<T> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| T::from_f64(rng.random_range(lo..hi))).collect();
    Tensor::new(shape, data).unwrap()
}

/// Bridges crate errors into the tensor crate's gradient-check closures.
pub fn tensor_err(e: Error) -> TensorError {
    match e {
        Error::Tensor(t) => t,
        other => panic!("unexpected error in gradient check: {other}"),
    }
}

pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        widths: [2, 4, 8, 16, 32],
        ..ModelConfig::default()
    }
}

pub fn small_config() -> ModelConfig {
    ModelConfig {
        widths: [4, 4, 8, 8, 16],
        num_heads: 2,
        ..ModelConfig::default()
    }
}

/// Grid-32 phantoms with a tumor that survives a central 16-voxel crop.
pub fn small_phantom_spec(seed: u64) -> PhantomSpec {
    PhantomSpec {
        grid: 32,
        wt_radius: (9.0, 10.0),
        center_jitter: 2.0,
        seed,
        ..PhantomSpec::default()
    }
}

pub fn images_of<T: Scalar>(s: &VolumeSample) -> [Option<Tensor<T>>; 4] {
    s.images.each_ref().map(|t| Some(t.cast::<T>()))
}
