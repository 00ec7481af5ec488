//! Finite-difference checking of analytic gradients.
//!
//! Runs a scalar-valued program at `f64`, once with backprop and twice per
//! input coordinate with central differences. Programs evaluated too close to
//! a relu/clamp kink are rejected rather than silently compared.

use super::{DiffError, Graph, NodeId, Result, Tensor};

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// Largest relative error over all checked coordinates.
    pub max_rel_err: f64,
    /// Number of coordinates compared.
    pub checked: usize,
    /// (input index, coordinate, analytic, numeric) of the worst coordinate.
    pub worst: Option<(usize, usize, f64, f64)>,
    pub rel_tol: f64,
    pub abs_floor: f64,
    pub passed: bool,
}

/// Check `build` (a scalar-valued graph program over the given leaf points)
/// against central finite differences with step `eps`.
///
/// A coordinate passes when `|analytic - numeric|` is within
/// `rel_tol * max(|analytic|, |numeric|)` or below the absolute floor 1e-8.
pub fn grad_check<F>(
    build: F,
    points: &[Tensor<f64>],
    eps: f64,
    rel_tol: f64,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[NodeId]) -> Result<NodeId>,
{
    const ABS_FLOOR: f64 = 1e-8;
    let margin = eps * 4.0;

    let eval = |pts: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::with_kink_guard(margin);
        let ids = bind(&mut g, pts)?;
        let out = build(&mut g, &ids)?;
        expect_scalar(&g, out)?;
        Ok(g.data(out)[0])
    };

    // analytic gradients at the center point
    let mut g = Graph::with_kink_guard(margin);
    let ids = bind(&mut g, points)?;
    let out = build(&mut g, &ids)?;
    expect_scalar(&g, out)?;
    let grads = g.backward(out, None)?;

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        checked: 0,
        worst: None,
        rel_tol,
        abs_floor: ABS_FLOOR,
        passed: true,
    };

    let mut work: Vec<Tensor<f64>> = points.to_vec();
    for (pi, point) in points.iter().enumerate() {
        let analytic = grads.get(ids[pi]);
        for ci in 0..point.len() {
            let a = analytic.map(|g| g[ci]).unwrap_or(0.0);
            let orig = work[pi].data()[ci];
            work[pi].data_mut()[ci] = orig + eps;
            let fp = eval(&work)?;
            work[pi].data_mut()[ci] = orig - eps;
            let fm = eval(&work)?;
            work[pi].data_mut()[ci] = orig;
            let n = (fp - fm) / (2.0 * eps);

            let diff = (a - n).abs();
            let denom = a.abs().max(n.abs());
            let rel = if diff <= ABS_FLOOR { 0.0 } else { diff / denom };
            report.checked += 1;
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst = Some((pi, ci, a, n));
            }
            if diff > ABS_FLOOR && rel > rel_tol {
                report.passed = false;
            }
        }
    }
    Ok(report)
}

fn bind(g: &mut Graph<f64>, points: &[Tensor<f64>]) -> Result<Vec<NodeId>> {
    points.iter().map(|t| g.leaf(t, true)).collect()
}

fn expect_scalar(g: &Graph<f64>, out: NodeId) -> Result<()> {
    if g.shape(out) != (1, 1) {
        return Err(DiffError::Shape {
            op: "grad_check",
            detail: format!("program output is {:?}, expected 1x1", g.shape(out)),
        });
    }
    Ok(())
}

/// Convenience used by tests: build a report and panic with detail on failure.
pub fn assert_grad_check<F>(build: F, points: &[Tensor<f64>], eps: f64, rel_tol: f64)
where
    F: Fn(&mut Graph<f64>, &[NodeId]) -> Result<NodeId>,
{
    let report = grad_check(build, points, eps, rel_tol).expect("grad check evaluable");
    assert!(
        report.passed,
        "gradient check failed: max rel err {:.3e} at {:?}",
        report.max_rel_err, report.worst
    );
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn softmax_cross_entropy_matches_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..5 {
            let logits = Tensor::<f64>::randn(3, 5, 1.0, &mut rng);
            let report = grad_check(
                |g, ids| {
                    let w = vec![1.0 / 3.0; 3];
                    g.cross_entropy(ids[0], &[1, 4, 0], &w)
                },
                &[logits],
                1e-6,
                1e-4,
            )
            .unwrap();
            assert!(report.passed, "rel err {:.3e}", report.max_rel_err);
        }
    }

    #[test]
    fn layer_norm_matches_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..5 {
            let x = Tensor::<f64>::randn(2, 6, 1.0, &mut rng);
            let gamma = Tensor::<f64>::randn(1, 6, 0.5, &mut rng);
            let beta = Tensor::<f64>::randn(1, 6, 0.5, &mut rng);
            let report = grad_check(
                |g, ids| {
                    let y = g.layer_norm(ids[0], ids[1], ids[2], 1e-6)?;
                    let t = g.tanh(y)?;
                    g.sum(t, None)
                },
                &[x, gamma, beta],
                1e-6,
                1e-4,
            )
            .unwrap();
            assert!(report.passed, "rel err {:.3e}", report.max_rel_err);
        }
    }

    #[test]
    fn rejects_clamp_kink() {
        let x = Tensor::<f64>::scalar(1.0); // exactly on the hi bound
        let err = grad_check(
            |g, ids| {
                let c = g.clamp(ids[0], 0.0, 1.0)?;
                g.sum(c, None)
            },
            &[x],
            1e-6,
            1e-4,
        )
        .unwrap_err();
        assert!(matches!(err, DiffError::NonDifferentiable(_)));
    }
}
