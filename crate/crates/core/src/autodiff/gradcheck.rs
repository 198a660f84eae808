//! Finite-difference verification of tape gradients.

use ndarray::Array2;

use super::{Graph, NodeId};
use crate::scalar::Scalar;

/// Central-difference step for double precision.
pub const DEFAULT_EPS: f64 = 1e-5;

/// Worst element found by a check, for diagnostics.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub input_index: usize,
    pub element: (usize, usize),
    pub analytic: f64,
    pub numeric: f64,
}

/// Numerical gradient of `f` at `x` by central differences, element by
/// element. `f` must be a pure function of the array.
pub fn numerical_grad<S, F>(x: &Array2<S>, f: F, eps: f64) -> Array2<f64>
where
    S: Scalar,
    F: Fn(&Array2<S>) -> f64,
{
    let mut grad = Array2::zeros(x.dim());
    let mut probe = x.clone();
    for idx in 0..x.len() {
        let (r, c) = (idx / x.ncols(), idx % x.ncols());
        let orig = probe[(r, c)];
        probe[(r, c)] = orig + S::cast(eps);
        let plus = f(&probe);
        probe[(r, c)] = orig - S::cast(eps);
        let minus = f(&probe);
        probe[(r, c)] = orig;
        grad[(r, c)] = (plus - minus) / (2.0 * eps);
    }
    grad
}

/// Compare tape gradients of a scalar loss against central finite
/// differences for every element of every input.
///
/// `build` constructs the loss from leaf nodes created for `inputs` (in
/// order) and must be deterministic. An element passes when
/// `|a - n| <= rtol * max(|a|, |n|) + atol`.
pub fn check_gradients<S, F>(
    build: &F,
    inputs: &[Array2<S>],
    eps: f64,
    rtol: f64,
    atol: f64,
) -> Result<GradCheckReport, String>
where
    S: Scalar,
    F: Fn(&mut Graph<S>, &[NodeId]) -> NodeId,
{
    let eval = |arrays: &[Array2<S>]| -> f64 {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = arrays.iter().map(|a| g.var(a.clone())).collect();
        let loss = build(&mut g, &ids);
        g.scalar(loss).to_f64_lossy()
    };

    let mut g = Graph::new();
    let ids: Vec<NodeId> = inputs.iter().map(|a| g.var(a.clone())).collect();
    let loss = build(&mut g, &ids);
    g.backward(loss);

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        input_index: 0,
        element: (0, 0),
        analytic: 0.0,
        numeric: 0.0,
    };

    let mut arrays: Vec<Array2<S>> = inputs.to_vec();
    for (k, input) in inputs.iter().enumerate() {
        let analytic: Array2<f64> = match g.grad(ids[k]) {
            Some(a) => a.mapv(|v| v.to_f64_lossy()),
            None => Array2::zeros(input.dim()),
        };
        for idx in 0..input.len() {
            let (r, c) = (idx / input.ncols(), idx % input.ncols());
            let orig = arrays[k][(r, c)];
            arrays[k][(r, c)] = orig + S::cast(eps);
            let plus = eval(&arrays);
            arrays[k][(r, c)] = orig - S::cast(eps);
            let minus = eval(&arrays);
            arrays[k][(r, c)] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic[(r, c)];
            let err = (a - numeric).abs();
            let bound = rtol * a.abs().max(numeric.abs()) + atol;
            let rel = if bound > 0.0 { err / bound } else { 0.0 };
            if rel > report.max_rel_err {
                report = GradCheckReport {
                    max_rel_err: rel,
                    input_index: k,
                    element: (r, c),
                    analytic: a,
                    numeric,
                };
            }
            if err > bound {
                return Err(format!(
                    "gradient mismatch at input {k} element ({r},{c}): analytic {a:.10e} vs numeric {numeric:.10e} (|diff| {err:.3e} > {bound:.3e})"
                ));
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn numerical_grad_of_square_sum() {
        let x = array![[1.0f64, -2.0]];
        let g = numerical_grad(&x, |a| a.iter().map(|v| v * v).sum(), 1e-5);
        assert!((g[(0, 0)] - 2.0).abs() < 1e-8);
        assert!((g[(0, 1)] + 4.0).abs() < 1e-8);
    }

    #[test]
    fn check_gradients_catches_everything_simple() {
        let x = array![[0.3f64, -0.7], [1.1, 0.2]];
        let w = array![[0.5f64, -0.2], [0.8, 0.1]];
        let build = |g: &mut Graph<f64>, ids: &[NodeId]| {
            let y = g.matmul(ids[0], ids[1]);
            let act = g.gelu(y);
            g.sum_all(act)
        };
        check_gradients(&build, &[x, w], DEFAULT_EPS, 1e-6, 1e-9).unwrap();
    }

    #[test]
    fn check_gradients_through_softmax_and_norm() {
        let x = array![[0.4f64, -1.2, 0.9], [2.0, 0.1, -0.3]];
        let build = |g: &mut Graph<f64>, ids: &[NodeId]| {
            let n = g.normalize_rows(ids[0], 1e-12, crate::autodiff::DegenerateRows::Zero);
            let sm = g.log_softmax_rows(n);
            let mask = ndarray::array![[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]];
            g.mask_sum(sm, mask)
        };
        check_gradients(&build, &[x], DEFAULT_EPS, 1e-6, 1e-9).unwrap();
    }
}
