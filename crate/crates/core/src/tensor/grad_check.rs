//! Finite-difference gradient checking.
//!
//! The check compares the tape's analytic gradient against central
//! differences of the same scalar-valued function. The finite-difference
//! side only uses forward evaluation, so it is independent of every
//! backward rule it validates. Intended to run with `S = f64`.

use crate::error::Result;
use crate::scalar::{from_f64, to_f64, Scalar};
use crate::tensor::tape::Tape;
use crate::tensor::Tensor;

/// Max relative error between analytic and central-difference gradients
/// of `f` with respect to `x`. `f` must return a single-element tensor.
///
/// relative error per element: |analytic - cd| / max(|analytic|, |cd|, 1e-8)
pub fn grad_check<S, F>(f: F, x: &Tensor<S>, eps: f64) -> Result<f64>
where
    S: Scalar,
    F: Fn(&mut Tape<S>, &Tensor<S>) -> Result<Tensor<S>>,
{
    let xg = x.clone().with_requires_grad(true);
    let mut tape = Tape::new();
    let loss = f(&mut tape, &xg)?;
    let grads = tape.backward(&loss)?;
    let analytic = grads
        .get(&xg)
        .expect("grad_check: x does not require a gradient")
        .clone();

    let mut max_rel = 0.0f64;
    let eps_s = from_f64::<S>(eps);
    for i in 0..x.numel() {
        let plus = perturbed(x, i, eps_s);
        let minus = perturbed(x, i, -eps_s);
        let fp = eval_scalar(&f, &plus)?;
        let fm = eval_scalar(&f, &minus)?;
        let cd = (fp - fm) / (2.0 * eps);
        let an = to_f64(analytic.data()[i]);
        let rel = (an - cd).abs() / an.abs().max(cd.abs()).max(1e-8);
        if rel > max_rel {
            max_rel = rel;
        }
    }
    Ok(max_rel)
}

fn perturbed<S: Scalar>(x: &Tensor<S>, i: usize, delta: S) -> Tensor<S> {
    Tensor::from_fn(x.shape(), |j| {
        if j == i {
            x.data()[j] + delta
        } else {
            x.data()[j]
        }
    })
}

fn eval_scalar<S, F>(f: &F, x: &Tensor<S>) -> Result<f64>
where
    S: Scalar,
    F: Fn(&mut Tape<S>, &Tensor<S>) -> Result<Tensor<S>>,
{
    // A fresh throwaway tape: recording does not change forward values.
    let mut tape = Tape::new();
    let out = f(&mut tape, x)?;
    Ok(to_f64(out.scalar_value()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use crate::tensor::tape::Ops;
    use crate::tensor::Shape;

    fn random(shape: Shape, seed: u64, lo: f64, hi: f64) -> Tensor<f64> {
        let mut rng = Rng::seed_from(seed);
        Tensor::from_fn(shape, |_| rng.uniform(lo, hi))
    }

    #[test]
    fn linear_sum_is_exact() {
        // mean(x) via l1 against a target far below: loss = mean(x - t),
        // linear in x, so central differences are exact to fp noise.
        let x = random(Shape::new(1, 2, 3, 3), 1, 0.0, 1.0);
        let target = Tensor::filled(Shape::new(1, 2, 3, 3), -10.0);
        // linear in x, so any eps is exact up to fp cancellation; the
        // larger eps keeps that cancellation term below 1e-10
        let err = grad_check(|tape, x| tape.l1_loss(x, &target), &x, 1e-2).unwrap();
        assert!(err < 1e-10, "linear op relative error {err}");
    }

    #[test]
    fn conv_relu_l1_composite() {
        for seed in 0..5u64 {
            let x = random(Shape::new(1, 2, 5, 5), 100 + seed, -1.0, 1.0);
            let w = random(Shape::new(3, 2, 3, 3), 200 + seed, -0.6, 0.6);
            let b = random(Shape::new(1, 3, 1, 1), 300 + seed, -0.2, 0.2);
            let target = random(Shape::new(1, 3, 5, 5), 400 + seed, 0.0, 1.0);
            let err = grad_check(
                |tape, x| {
                    let y = tape.conv2d(x, &w, Some(&b), 1, 1)?;
                    let y = tape.relu(&y)?;
                    tape.l1_loss(&y, &target)
                },
                &x,
                1e-4,
            )
            .unwrap();
            assert!(err < 1e-4, "seed {seed}: relative error {err}");
        }
    }

    #[test]
    fn sigmoid_chain() {
        for seed in 0..5u64 {
            let x = random(Shape::new(1, 1, 4, 4), 500 + seed, -2.0, 2.0);
            let target = random(Shape::new(1, 1, 4, 4), 600 + seed, 0.0, 1.0);
            let err = grad_check(
                |tape, x| {
                    let y = tape.sigmoid(x)?;
                    let y = tape.sigmoid(&y)?;
                    tape.l1_loss(&y, &target)
                },
                &x,
                1e-4,
            )
            .unwrap();
            assert!(err < 1e-4, "seed {seed}: relative error {err}");
        }
    }
}
