//! Central-difference gradient verification.

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Denominator floor for the relative error.
pub const REL_FLOOR: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Flat index (across all checked parameters) of the worst element.
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

/// Compares `analytic` with the central-difference gradient of `f` at
/// `params`, returning the largest `|ga - gfd| / max(|ga|, |gfd|, 1e-8)`.
pub fn finite_diff_check(
    f: impl Fn(&[f64]) -> f64,
    params: &[f64],
    analytic: &[f64],
    epsilon: f64,
) -> Result<GradCheckReport> {
    let all: Vec<usize> = (0..params.len()).collect();
    finite_diff_check_at(f, params, analytic, epsilon, &all)
}

/// As [`finite_diff_check`], restricted to the coordinates in `indices`.
pub fn finite_diff_check_at(
    f: impl Fn(&[f64]) -> f64,
    params: &[f64],
    analytic: &[f64],
    epsilon: f64,
    indices: &[usize],
) -> Result<GradCheckReport> {
    if !(epsilon > 0.0) {
        return Err(Error::Parameter(format!("epsilon must be positive, got {epsilon}")));
    }
    if analytic.len() != params.len() {
        return Err(Error::dim("gradient", params.len(), analytic.len()));
    }
    if let Some(&i) = indices.iter().find(|&&i| i >= params.len()) {
        return Err(Error::dim("coordinate", params.len(), i));
    }
    let mut x = params.to_vec();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
        checked: indices.len(),
    };
    for (n, &i) in indices.iter().enumerate() {
        let orig = x[i];
        x[i] = orig + epsilon;
        let fp = f(&x);
        x[i] = orig - epsilon;
        let fm = f(&x);
        x[i] = orig;
        if !fp.is_finite() || !fm.is_finite() {
            return Err(Error::Numeric(format!("objective not finite near parameter {i}")));
        }
        let numeric = (fp - fm) / (2.0 * epsilon);
        let ga = analytic[i];
        let rel = (ga - numeric).abs() / ga.abs().max(numeric.abs()).max(REL_FLOOR);
        if rel > report.max_rel_error || n == 0 {
            report.max_rel_error = rel;
            report.worst_index = i;
            report.analytic = ga;
            report.numeric = numeric;
        }
    }
    Ok(report)
}

/// Checks a graph built by `build` from leaf tensors. The graph must return a
/// single-element tensor; gradients for every element of every input are
/// verified.
pub fn check_graph<F>(inputs: &[Tensor<f64>], epsilon: f64, build: F) -> Result<GradCheckReport>
where
    F: Fn(&Tape<f64>, &[Var<f64>]) -> Result<Var<f64>>,
{
    check_graph_at(inputs, epsilon, None, build)
}

/// As [`check_graph`], verifying only the flat coordinates in `indices`
/// (all of them when `None`). Coordinates run over the inputs in order.
pub fn check_graph_at<F>(inputs: &[Tensor<f64>], epsilon: f64, indices: Option<&[usize]>, build: F) -> Result<GradCheckReport>
where
    F: Fn(&Tape<f64>, &[Var<f64>]) -> Result<Var<f64>>,
{
    let tape = Tape::new();
    let leaves: Vec<Var<f64>> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = build(&tape, &leaves)?;
    if out.value().len() != 1 {
        return Err(Error::dim("objective elements", 1, out.value().len()));
    }
    let grads = tape.backward(&out);
    let analytic: Vec<f64> = leaves
        .iter()
        .flat_map(|l| grads.get_or_zeros(l).into_data())
        .collect();
    let flat: Vec<f64> = inputs.iter().flat_map(|t| t.data().to_vec()).collect();
    let eval = |x: &[f64]| -> f64 {
        let tape = Tape::inference();
        let mut off = 0;
        let leaves: Vec<Var<f64>> = inputs
            .iter()
            .map(|t| {
                let n = t.len();
                let v = Tensor::new(t.shape(), x[off..off + n].to_vec()).expect("same shape");
                off += n;
                tape.constant(v)
            })
            .collect();
        build(&tape, &leaves).map_or(f64::NAN, |v| v.value().item())
    };
    match indices {
        Some(idx) => finite_diff_check_at(eval, &flat, &analytic, epsilon, idx),
        None => finite_diff_check(eval, &flat, &analytic, epsilon),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape;

    #[test]
    fn quadratic_is_exact() {
        let r = finite_diff_check(|x| x[0] * x[0], &[3.0], &[6.0], 1e-5).unwrap();
        assert!(r.max_rel_error < 1e-8, "{r:?}");
    }

    #[test]
    fn wrong_gradient_is_detected() {
        let r = finite_diff_check(|x| x[0] * x[0], &[3.0], &[5.0], 1e-5).unwrap();
        assert!(r.max_rel_error > 0.1);
    }

    #[test]
    fn rejects_bad_epsilon_and_nan() {
        assert!(finite_diff_check(|x| x[0], &[1.0], &[1.0], 0.0).is_err());
        assert!(finite_diff_check(|_| f64::NAN, &[1.0], &[1.0], 1e-5).is_err());
    }

    #[test]
    fn graph_check_on_product() {
        let a = Tensor::new(Shape::new(1, 1, 3), vec![0.5, -1.2, 2.0]).unwrap();
        let b = Tensor::new(Shape::new(1, 1, 3), vec![1.5, 0.3, -0.7]).unwrap();
        let r = check_graph(&[a, b], 1e-5, |t, v| {
            let p = t.mul(&v[0], &v[1])?;
            let p = t.mul(&p, &v[0])?;
            Ok(t.sum(&p))
        })
        .unwrap();
        assert!(r.max_rel_error < 1e-8, "{r:?}");
        assert_eq!(r.checked, 6);
    }
}
