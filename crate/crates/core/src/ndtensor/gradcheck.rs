//! Numerical gradient verification.
//!
//! [`check_gradients`] compares reverse-mode gradients against central finite
//! differences of the same forward function. The numeric side only ever runs
//! forward passes on detached tensors, so it is independent of every backward
//! rule it is checking.
//!
//! The error measure is `|g_num − g_ana| / max(|g_ana|, 1e-8)` per element;
//! the harness returns the maximum over all inputs.

use crate::error::{Error, Result};
use crate::ndtensor::{DiffGraph, DiffTensor};

/// Step size and acceptance threshold for a finite-difference run.
#[derive(Clone, Copy, Debug)]
pub struct GradCheck {
    /// Central-difference step.
    pub h: f64,
    /// Maximum tolerated relative error.
    pub tol: f64,
}

impl Default for GradCheck {
    fn default() -> Self {
        GradCheck { h: 1e-5, tol: 1e-4 }
    }
}

impl GradCheck {
    /// Relative error with an absolute floor on the denominator.
    pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
        (numeric - analytic).abs() / analytic.abs().max(1e-8)
    }
}

/// Checks `f`'s reverse-mode gradients w.r.t. every element of `inputs`.
///
/// `f` must build a scalar loss from the given tensors and graph, and must be
/// a pure function of the tensor values. Returns the maximum relative error
/// on success, or a numeric error naming the offending input/element.
pub fn check_gradients<F>(f: F, inputs: &[DiffTensor], cfg: GradCheck) -> Result<f64>
where
    F: Fn(&mut DiffGraph, &[DiffTensor]) -> Result<DiffTensor>,
{
    // Analytic pass: bind every input as a leaf, run forward, sweep backward.
    let mut g = DiffGraph::new();
    let bound: Vec<DiffTensor> = inputs
        .iter()
        .map(|t| g.leaf(&t.clone().requiring_grad()))
        .collect::<Result<_>>()?;
    let loss = f(&mut g, &bound)?;
    if loss.len() != 1 {
        return Err(Error::Contract(format!(
            "check_gradients: f must return a scalar, got {} elements",
            loss.len()
        )));
    }
    let grads = g.backward(&loss)?;
    let analytic: Vec<Vec<f64>> = bound
        .iter()
        .map(|t| grads.get(t).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; t.len()]))
        .collect();

    // Numeric pass: central differences of the detached forward.
    let eval = |vals: &[DiffTensor]| -> Result<f64> {
        let mut g = DiffGraph::new();
        Ok(f(&mut g, vals)?.item())
    };
    let base: Vec<DiffTensor> = inputs.iter().map(DiffTensor::detached).collect();

    let mut worst = 0.0f64;
    for (ti, t) in base.iter().enumerate() {
        for ei in 0..t.len() {
            let mut probe = base.clone();
            let orig = probe[ti].data()[ei];
            probe[ti].data_mut()[ei] = orig + cfg.h;
            let up = eval(&probe)?;
            probe[ti].data_mut()[ei] = orig - cfg.h;
            let down = eval(&probe)?;
            let numeric = (up - down) / (2.0 * cfg.h);
            let err = GradCheck::rel_err(analytic[ti][ei], numeric);
            if err > cfg.tol {
                return Err(Error::Numeric(format!(
                    "gradient mismatch: input {ti} element {ei}: analytic {}, numeric {numeric}, rel err {err:.3e}",
                    analytic[ti][ei]
                )));
            }
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ndtensor::{
        activation, add, depthwise_conv2d, gather, layer_norm, linear, mul, pointwise_conv2d,
        reshape, scale, softmax_cross_entropy, spatial_contract, stack_rows, sum, Activation,
    };
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_t(rng: &mut ChaCha8Rng, shape: &[usize]) -> DiffTensor {
        let n = shape.iter().product();
        let data = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
        DiffTensor::new(shape, data).unwrap()
    }

    #[test]
    fn linear_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..5 {
            let inputs =
                vec![rand_t(&mut rng, &[3, 4]), rand_t(&mut rng, &[4, 2]), rand_t(&mut rng, &[2])];
            check_gradients(
                |g, ts| {
                    let y = linear(g, &ts[0], &ts[1], &ts[2])?;
                    sum(g, &y)
                },
                &inputs,
                GradCheck::default(),
            )
            .unwrap();
        }
    }

    #[test]
    fn depthwise_conv_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let inputs = vec![
            rand_t(&mut rng, &[2, 4, 4]),
            rand_t(&mut rng, &[2, 3, 3]),
            rand_t(&mut rng, &[2]),
        ];
        check_gradients(
            |g, ts| {
                let y = depthwise_conv2d(g, &ts[0], &ts[1], &ts[2])?;
                // Non-uniform loss so dx isn't constant across positions.
                let sq = mul(g, &y, &y)?;
                sum(g, &sq)
            },
            &inputs,
            GradCheck::default(),
        )
        .unwrap();
    }

    #[test]
    fn pointwise_conv_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let inputs = vec![
            rand_t(&mut rng, &[3, 3, 3]),
            rand_t(&mut rng, &[3, 2]),
            rand_t(&mut rng, &[2]),
        ];
        check_gradients(
            |g, ts| {
                let y = pointwise_conv2d(g, &ts[0], &ts[1], &ts[2])?;
                let sq = mul(g, &y, &y)?;
                sum(g, &sq)
            },
            &inputs,
            GradCheck::default(),
        )
        .unwrap();
    }

    #[test]
    fn activation_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for kind in
            [Activation::Sigmoid, Activation::Silu, Activation::Softplus, Activation::Exp]
        {
            let inputs = vec![rand_t(&mut rng, &[2, 5])];
            check_gradients(
                |g, ts| {
                    let y = activation(g, &ts[0], kind)?;
                    let sq = mul(g, &y, &y)?;
                    sum(g, &sq)
                },
                &inputs,
                GradCheck::default(),
            )
            .unwrap();
        }
    }

    #[test]
    fn layer_norm_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let inputs =
            vec![rand_t(&mut rng, &[3, 6]), rand_t(&mut rng, &[6]), rand_t(&mut rng, &[6])];
        check_gradients(
            |g, ts| {
                let y = layer_norm(g, &ts[0], &ts[1], &ts[2], 1e-5)?;
                let sq = mul(g, &y, &y)?;
                sum(g, &sq)
            },
            &inputs,
            GradCheck::default(),
        )
        .unwrap();
    }

    #[test]
    fn cross_entropy_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let inputs = vec![rand_t(&mut rng, &[4, 5])];
        check_gradients(
            |g, ts| softmax_cross_entropy(g, &ts[0], &[0, 3, 2, 4]),
            &inputs,
            GradCheck::default(),
        )
        .unwrap();
    }

    #[test]
    fn spatial_contract_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let inputs = vec![rand_t(&mut rng, &[4, 3, 3]), rand_t(&mut rng, &[4, 3, 3])];
        check_gradients(
            |g, ts| {
                let y = spatial_contract(g, &ts[0], &ts[1])?;
                let sq = mul(g, &y, &y)?;
                sum(g, &sq)
            },
            &inputs,
            GradCheck::default(),
        )
        .unwrap();
    }

    #[test]
    fn plumbing_op_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let inputs = vec![rand_t(&mut rng, &[6]), rand_t(&mut rng, &[6])];
        check_gradients(
            |g, ts| {
                // gather with repeats -> mul -> add -> reshape -> stack -> scale
                let a = gather(g, &ts[0], &[5, 5, 0, 1, 2, 3], &[6])?;
                let b = gather(g, &ts[1], &[0, 1, 2, 3, 4, 5], &[6])?;
                let prod = mul(g, &a, &b)?;
                let shifted = add(g, &prod, &b)?;
                let m = reshape(g, &shifted, &[2, 3])?;
                let flat = reshape(g, &m, &[6])?;
                let rows = stack_rows(g, &[&flat, &a])?;
                let total = sum(g, &rows)?;
                scale(g, &total, 0.5)
            },
            &inputs,
            GradCheck::default(),
        )
        .unwrap();
    }

    #[test]
    fn fan_out_matches_sum_of_branches() {
        // y = f(x) + g(x): gradient must be the exact sum of both branches.
        let x = DiffTensor::new(&[3], vec![0.4, -1.1, 2.0]).unwrap();
        let mut g1 = DiffGraph::new();
        let bx = g1.leaf(&x.clone().requiring_grad()).unwrap();
        let f = activation(&mut g1, &bx, Activation::Silu).unwrap();
        let h = mul(&mut g1, &bx, &bx).unwrap();
        let y = add(&mut g1, &f, &h).unwrap();
        let loss = sum(&mut g1, &y).unwrap();
        let joint = g1.backward(&loss).unwrap().get(&bx).unwrap().to_vec();

        let branch = |only_f: bool| -> Vec<f64> {
            let mut g = DiffGraph::new();
            let bx = g.leaf(&x.clone().requiring_grad()).unwrap();
            let y = if only_f {
                activation(&mut g, &bx, Activation::Silu).unwrap()
            } else {
                mul(&mut g, &bx, &bx).unwrap()
            };
            let loss = sum(&mut g, &y).unwrap();
            g.backward(&loss).unwrap().get(&bx).unwrap().to_vec()
        };
        let (bf, bh) = (branch(true), branch(false));
        for i in 0..3 {
            assert_eq!(joint[i], bf[i] + bh[i]);
        }
    }
}
