/// Largest relative disagreement between an analytic gradient and central
/// differences, `|g − fd| / max(|g|, |fd|, 1e-12)`, over all parameters.
///
/// `loss_and_grad` returns the loss and its analytic gradient at the given
/// parameters; it must be deterministic.
pub fn grad_check<F>(loss_and_grad: F, params: &[f64], eps: f64) -> f64
where
    F: Fn(&[f64]) -> (f64, Vec<f64>),
{
    let (_, analytic) = loss_and_grad(params);
    assert_eq!(analytic.len(), params.len(), "gradient length");
    let mut probe = params.to_vec();
    let mut worst = 0.0f64;
    for i in 0..params.len() {
        probe[i] = params[i] + eps;
        let (lp, _) = loss_and_grad(&probe);
        probe[i] = params[i] - eps;
        let (lm, _) = loss_and_grad(&probe);
        probe[i] = params[i];
        let fd = (lp - lm) / (2.0 * eps);
        let denom = analytic[i].abs().max(fd.abs()).max(1e-12);
        worst = worst.max((analytic[i] - fd).abs() / denom);
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic() {
        let f = |p: &[f64]| (p[0] * p[0], vec![2.0 * p[0]]);
        assert!(grad_check(f, &[3.0], 1e-5) < 1e-9);
    }

    #[test]
    fn constant_loss_has_zero_error() {
        let f = |p: &[f64]| (4.0, vec![0.0; p.len()]);
        assert_eq!(grad_check(f, &[1.0, 2.0, 3.0], 1e-5), 0.0);
    }

    #[test]
    fn detects_wrong_gradient() {
        let f = |p: &[f64]| (p[0] * p[0], vec![3.0 * p[0]]);
        assert!(grad_check(f, &[1.0], 1e-5) > 0.3);
    }
}
