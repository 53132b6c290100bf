//! Finite-difference gradient verification.
//!
//! [`grad_check`] compares reverse-mode gradients against central
//! differences, coordinate by coordinate, and reports the worst relative
//! error. It is the independent oracle behind the gradient acceptance
//! suite: every differentiable op, and the full losses, are validated
//! through it.

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Max over coordinates of |analytic − central difference| / max(1, |analytic|).
///
/// `f` builds a scalar loss from a leaf var on the given tape; it is
/// evaluated once for the analytic gradient and `2·len(x)` more times for
/// the finite differences. `eps` must lie in `[1e-7, 1e-3]`.
pub fn grad_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&Tape, &Var) -> Result<Var>,
{
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(Error::invalid(
            "grad_check",
            format!("eps {eps} outside [1e-7, 1e-3]"),
        ));
    }
    // Analytic pass.
    let tape = Tape::new();
    let leaf = tape.param(x.clone());
    let loss = f(&tape, &leaf)?;
    if !loss.value().is_scalar() {
        return Err(Error::invalid("grad_check", "f must return a scalar"));
    }
    tape.backward(&loss)?;
    let analytic = leaf
        .grad()
        .ok_or_else(|| Error::invalid("grad_check", "no gradient reached the input"))?;

    // Central differences, one coordinate at a time.
    let eval = |pt: &Tensor| -> Result<f64> {
        let tape = Tape::new();
        let leaf = tape.constant(pt.clone());
        Ok(f(&tape, &leaf)?.value().item())
    };
    let mut worst = 0.0f64;
    for i in 0..x.len() {
        let mut plus = x.clone();
        plus.data_mut()[i] += eps;
        let mut minus = x.clone();
        minus.data_mut()[i] -= eps;
        let fd = (eval(&plus)? - eval(&minus)?) / (2.0 * eps);
        let a = analytic.data()[i];
        let err = (a - fd).abs() / a.abs().max(1.0);
        worst = worst.max(err);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::randn;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn constant_gradient_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = randn(&[6], &mut rng);
        let err = grad_check(|_, v| Ok(v.sum()), &x, 1e-5).unwrap();
        assert!(err <= 1e-9, "err = {err}");
    }

    #[test]
    fn sum_exp_in_unit_box() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = randn(&[4], &mut rng).map(|v| v.clamp(-1.0, 1.0));
        let err = grad_check(|_, v| Ok(v.exp().sum()), &x, 1e-5).unwrap();
        assert!(err <= 1e-5, "err = {err}");
    }

    #[test]
    fn tanh_gradient_at_0_7() {
        let x = Tensor::scalar(0.7);
        let err = grad_check(|_, v| Ok(v.tanh().sum()), &x, 1e-5).unwrap();
        assert!(err <= 1e-6, "err = {err}");
    }

    #[test]
    fn matmul_gradient_vs_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = randn(&[3, 4], &mut rng);
        let b = randn(&[4, 2], &mut rng);
        // gradient with respect to a
        let err = grad_check(
            |t, v| v.matmul(&t.constant(b.clone()))?.sum().mul(&t.scalar(1.0)),
            &a,
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-6, "err wrt lhs = {err}");
        // and with respect to b
        let err = grad_check(
            |t, v| t.constant(a.clone()).matmul(v)?.sum().mul(&t.scalar(1.0)),
            &b,
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-6, "err wrt rhs = {err}");
    }

    #[test]
    fn eps_domain_is_enforced() {
        let x = Tensor::scalar(1.0);
        assert!(grad_check(|_, v| Ok(v.sum()), &x, 1e-8).is_err());
        assert!(grad_check(|_, v| Ok(v.sum()), &x, 1e-2).is_err());
    }
}
