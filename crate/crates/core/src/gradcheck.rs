//! Central finite-difference gradient checking.
//!
//! Panics on graph errors: intended for tests and diagnostics.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Var};
use crate::tensor::Tensor;

pub const EPS: f64 = 1e-5;

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

pub fn random_tensor(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn eval<F>(inputs: &[Tensor], f: &F) -> f64
where
    F: Fn(&mut Graph, &[Var]) -> Var,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let loss = f(&mut g, &vars);
    g.value(loss).item()
}

/// Largest relative error between analytic and central-difference gradients,
/// probing up to `points` coordinates per input (all of them if fewer).
pub fn max_rel_error<F>(inputs: &[Tensor], points: usize, f: F) -> f64
where
    F: Fn(&mut Graph, &[Var]) -> Var,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let loss = f(&mut g, &vars);
    g.backward(loss).unwrap();
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| g.grad(v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; t.len()]))
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut worst: f64 = 0.0;
    for (i, t) in inputs.iter().enumerate() {
        let coords: Vec<usize> = if t.len() <= points {
            (0..t.len()).collect()
        } else {
            (0..points).map(|_| rng.gen_range(0..t.len())).collect()
        };
        for j in coords {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += EPS;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= EPS;
            let numeric = (eval(&plus, &f) - eval(&minus, &f)) / (2.0 * EPS);
            worst = worst.max(rel_err(analytic[i][j], numeric));
        }
    }
    worst
}
