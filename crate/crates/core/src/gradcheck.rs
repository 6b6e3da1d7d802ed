//! Central finite-difference verification of backward passes.
//!
//! The oracle path rebuilds the forward computation on perturbed leaves and
//! never consults the backward machinery it checks.

use crate::autodiff::{AdResult, Graph, NodeId};
use crate::tensor::{Precision, Tensor};

/// Default step for central differences, chosen for f64 headroom.
pub const DEFAULT_STEP: f64 = 1e-4;

/// Builds a scalar-shaped output node from the given leaf nodes.
/// The closure must be a pure function of the leaf values.
pub type BuildFn<'a> = &'a dyn Fn(&mut Graph, &[NodeId]) -> AdResult<NodeId>;

fn forward_value(build: BuildFn, leaves: &[Tensor]) -> AdResult<f64> {
    let mut g = Graph::new(Precision::F64);
    let ids: Vec<NodeId> = leaves.iter().map(|t| g.leaf(t.clone())).collect();
    let out = build(&mut g, &ids)?;
    Ok(g.value(out).scalar_value())
}

/// Maximum relative error between reverse-mode gradients and central finite
/// differences over every element of every leaf. The error is
/// `|ad - fd| / max(1, |fd|)`.
pub fn max_gradient_error(build: BuildFn, leaves: &[Tensor], step: f64) -> AdResult<f64> {
    let mut g = Graph::new(Precision::F64);
    let ids: Vec<NodeId> = leaves.iter().map(|t| g.leaf(t.clone())).collect();
    let out = build(&mut g, &ids)?;
    let grads = g.backward(out, &ids)?;

    let mut worst: f64 = 0.0;
    for (li, id) in ids.iter().enumerate() {
        let analytic = g.value(grads[id]).clone();
        for e in 0..leaves[li].len() {
            let mut plus = leaves.to_vec();
            plus[li].data_mut()[e] += step;
            let mut minus = leaves.to_vec();
            minus[li].data_mut()[e] -= step;
            let fd = (forward_value(build, &plus)? - forward_value(build, &minus)?) / (2.0 * step);
            let ad = analytic.data()[e];
            let rel = (ad - fd).abs() / fd.abs().max(1.0);
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}

/// Convenience assertion used across the test suites.
pub fn assert_gradients_close(build: BuildFn, leaves: &[Tensor], step: f64, tol: f64) {
    let err = max_gradient_error(build, leaves, step).expect("gradient check build failed");
    assert!(
        err < tol,
        "gradient mismatch: max relative error {err:.3e} >= tolerance {tol:.1e}"
    );
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_passes() {
        let build: BuildFn = &|g, ids| {
            let sq = g.square(ids[0])?;
            g.reduce_mean(sq)
        };
        let leaves = [Tensor::matrix(2, 2, vec![0.5, -1.2, 2.0, 0.3])];
        assert_gradients_close(build, &leaves, DEFAULT_STEP, 1e-6);
    }

    #[test]
    fn detects_a_wrong_gradient() {
        // sqrt has a nonlinear derivative; an intentionally mismatched
        // forward (cube) against its backward would not slip through
        let build: BuildFn = &|g, ids| {
            let c = g.exp(ids[0])?;
            g.reduce_mean(c)
        };
        let leaves = [Tensor::matrix(1, 2, vec![0.4, 0.9])];
        let err = max_gradient_error(build, &leaves, DEFAULT_STEP).unwrap();
        assert!(err < 1e-6);
        let bad = max_gradient_error(build, &leaves, 1.0).unwrap();
        assert!(bad > 1e-2, "huge step must visibly disagree, got {bad:.3e}");
    }
}
