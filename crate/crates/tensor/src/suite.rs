//! Randomized finite-difference sweep over every primitive on the tape.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::gradcheck::FiniteDiff;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Worst relative error observed for one primitive across all seeds.
#[derive(Clone, Debug, PartialEq)]
pub struct PrimitiveResult {
    pub name: &'static str,
    pub max_rel_error: f64,
}

fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect()).expect("valid shape")
}

/// Values with magnitude in `[0.1, 1]`, away from the kinks of abs/LeakyReLU.
fn away_from_zero(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let mut t = uniform(shape, 0.1, 1.0, rng);
    for v in t.data_mut() {
        if rng.random_bool(0.5) {
            *v = -*v;
        }
    }
    t
}

/// Reduces `out` to a scalar through a fixed random projection, so every
/// output coordinate contributes a distinct weight to the gradient.
fn project(tape: &mut Tape<f64>, out: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let r = uniform(tape.shape(out), -1.0, 1.0, &mut rng);
    let r = tape.constant(r);
    let prod = tape.mul(out, r)?;
    tape.sum(prod)
}

type Case = (Vec<Tensor<f64>>, Box<dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>>);

fn case(name: &str, rng: &mut ChaCha8Rng) -> Case {
    let mut dim = |lo: usize, hi: usize| rng.random_range(lo..=hi);
    let (a, b, c) = (dim(1, 3), dim(2, 4), dim(2, 4));
    match name {
        "add" | "sub" | "mul" | "div" => {
            let x = uniform(&[a, b], -1.0, 1.0, rng);
            let y = if name == "div" {
                away_from_zero(&[a, b], rng)
            } else {
                uniform(&[a, b], -1.0, 1.0, rng)
            };
            let op: fn(&mut Tape<f64>, Var, Var) -> Result<Var> = match name {
                "add" => Tape::add,
                "sub" => Tape::sub,
                "mul" => Tape::mul,
                _ => Tape::div,
            };
            (vec![x, y], Box::new(move |t, v| op(t, v[0], v[1])))
        }
        "scale" => (
            vec![uniform(&[a, b], -1.0, 1.0, rng)],
            Box::new(|t, v| t.scale(v[0], -1.7)),
        ),
        "add_scalar" => (
            vec![uniform(&[a, b], -1.0, 1.0, rng)],
            Box::new(|t, v| t.add_scalar(v[0], 0.3)),
        ),
        "abs" => (vec![away_from_zero(&[a, b], rng)], Box::new(|t, v| t.abs(v[0]))),
        "leaky_relu" => (
            vec![away_from_zero(&[a, b], rng)],
            Box::new(|t, v| t.leaky_relu(v[0], 0.01)),
        ),
        "gelu" => (vec![uniform(&[a, b], -3.0, 3.0, rng)], Box::new(|t, v| t.gelu(v[0]))),
        "sum" => (vec![uniform(&[a, b], -1.0, 1.0, rng)], Box::new(|t, v| t.sum(v[0]))),
        "sum_last" => (
            vec![uniform(&[a, b, c], -1.0, 1.0, rng)],
            Box::new(|t, v| t.sum_last(v[0])),
        ),
        "reshape" => (
            vec![uniform(&[a, b, c], -1.0, 1.0, rng)],
            Box::new(move |t, v| t.reshape(v[0], &[a * b, c])),
        ),
        "permute" => (
            vec![uniform(&[a, b, c], -1.0, 1.0, rng)],
            Box::new(|t, v| t.permute(v[0], &[2, 0, 1])),
        ),
        "concat" => (
            vec![uniform(&[a, b], -1.0, 1.0, rng), uniform(&[a, c], -1.0, 1.0, rng)],
            Box::new(|t, v| t.concat(&[v[0], v[1]], 1)),
        ),
        "narrow" => (
            vec![uniform(&[a, b + 2], -1.0, 1.0, rng)],
            Box::new(move |t, v| t.narrow(v[0], 1, 1, b)),
        ),
        "matmul" => (
            vec![uniform(&[a, b, c], -1.0, 1.0, rng), uniform(&[c, b], -1.0, 1.0, rng)],
            Box::new(|t, v| t.matmul(v[0], v[1])),
        ),
        "conv3d" => {
            let stride = rng.random_range(1..=2);
            let (cin, cout) = (rng.random_range(1..=2), rng.random_range(1..=2));
            let dims: Vec<usize> = (0..3).map(|_| rng.random_range(2..=4)).collect();
            (
                vec![
                    uniform(&[cin, dims[0], dims[1], dims[2]], -1.0, 1.0, rng),
                    uniform(&[cout, cin, 3, 3, 3], -1.0, 1.0, rng),
                    uniform(&[cout], -1.0, 1.0, rng),
                ],
                Box::new(move |t, v| t.conv3d(v[0], v[1], Some(v[2]), stride, 1)),
            )
        }
        "softmax" => (
            vec![uniform(&[a, b, c], -2.0, 2.0, rng)],
            Box::new(|t, v| t.softmax(v[0], 1)),
        ),
        "log_softmax" => (
            vec![uniform(&[a, b, c], -2.0, 2.0, rng)],
            Box::new(|t, v| t.log_softmax(v[0], 0)),
        ),
        "layer_norm" => (
            vec![
                uniform(&[a, c + 1], -1.0, 1.0, rng),
                uniform(&[c + 1], 0.5, 1.5, rng),
                uniform(&[c + 1], -0.5, 0.5, rng),
            ],
            Box::new(|t, v| t.layer_norm(v[0], v[1], v[2], 1e-5)),
        ),
        "instance_norm" => (
            vec![
                uniform(&[a, 2, b, c], -1.0, 1.0, rng),
                uniform(&[a], 0.5, 1.5, rng),
                uniform(&[a], -0.5, 0.5, rng),
            ],
            Box::new(|t, v| t.instance_norm(v[0], v[1], v[2], 1e-5)),
        ),
        "resize_linear" => (
            vec![uniform(&[a, b, c], -1.0, 1.0, rng)],
            Box::new(move |t, v| t.resize_linear(v[0], 1, 2 * b)),
        ),
        other => panic!("no gradient case for primitive {other}"),
    }
}

/// Runs `seeds` randomized gradient checks per primitive in `names`.
pub fn primitive_sweep(names: &[&'static str], seeds: u64, check: &FiniteDiff) -> Result<Vec<PrimitiveResult>> {
    names
        .iter()
        .map(|&name| {
            let mut worst = 0.0f64;
            for seed in 0..seeds {
                let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9e37_79b9) ^ name.len() as u64);
                let (inputs, f) = case(name, &mut rng);
                let report = check.check(
                    |tape, vars| {
                        let out = f(tape, vars)?;
                        if tape.value(out).is_scalar() {
                            Ok(out)
                        } else {
                            project(tape, out, seed)
                        }
                    },
                    &inputs,
                )?;
                worst = worst.max(report.max_rel_error);
            }
            Ok(PrimitiveResult {
                name,
                max_rel_error: worst,
            })
        })
        .collect()
}
