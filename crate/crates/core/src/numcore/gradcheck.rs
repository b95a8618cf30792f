use super::{Tape, Tensor, Var};
use crate::error::Result;

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    /// max over checked coordinates of |analytic − numeric| / max(1, |analytic|)
    pub max_rel_error: f64,
    /// (parameter, flat coordinate) achieving the maximum
    pub worst: Option<(usize, usize)>,
    /// coordinates where a probe evaluated to a non-finite value
    pub non_finite: Vec<(usize, usize)>,
    pub checked: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.non_finite.is_empty() && self.max_rel_error < tol
    }
}

fn evaluate<F>(f: &F, theta: &[Tensor]) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let tape = Tape::new();
    let params: Vec<Var<'_>> = theta.iter().map(|t| tape.constant(t.clone())).collect();
    Ok(f(&tape, &params)?.item())
}

fn analytic<F>(f: &F, theta: &[Tensor]) -> Result<Vec<Tensor>>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let tape = Tape::new();
    let params: Vec<Var<'_>> = theta.iter().map(|t| tape.param(t.clone())).collect();
    let loss = f(&tape, &params)?;
    let grads = tape.gradients(loss)?;
    Ok(params.iter().map(|p| grads.get(*p)).collect())
}

/// Compares tape gradients of the scalar `f` against central differences
/// at every coordinate of every tensor in `theta`.
pub fn grad_check<F>(f: F, theta: &[Tensor], step: f64) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let coords: Vec<(usize, usize)> = theta
        .iter()
        .enumerate()
        .flat_map(|(p, t)| (0..t.len()).map(move |i| (p, i)))
        .collect();
    grad_check_coords(f, theta, step, &coords)
}

/// Same as [`grad_check`] restricted to the listed `(tensor, coordinate)` pairs.
pub fn grad_check_coords<F>(
    f: F,
    theta: &[Tensor],
    step: f64,
    coords: &[(usize, usize)],
) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let grads = analytic(&f, theta)?;
    let mut report = GradCheckReport::default();
    let mut probe = theta.to_vec();
    for &(p, i) in coords {
        let original = probe[p].data()[i];
        probe[p].data_mut()[i] = original + step;
        let plus = evaluate(&f, &probe)?;
        probe[p].data_mut()[i] = original - step;
        let minus = evaluate(&f, &probe)?;
        probe[p].data_mut()[i] = original;

        report.checked += 1;
        if !plus.is_finite() || !minus.is_finite() {
            report.non_finite.push((p, i));
            continue;
        }
        let numeric = (plus - minus) / (2.0 * step);
        let a = grads[p].data()[i];
        let err = (a - numeric).abs() / a.abs().max(1.0);
        if err > report.max_rel_error || report.worst.is_none() {
            report.max_rel_error = err;
            report.worst = Some((p, i));
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tanh_sum_matches_differences() {
        let theta = [Tensor::vector(vec![0.5, -0.5])];
        let r = grad_check(|_, p| Ok(p[0].tanh().sum()), &theta, 1e-6).unwrap();
        assert!(r.max_rel_error < 1e-6, "{r:?}");
        assert_eq!(r.checked, 2);
    }

    #[test]
    fn linear_function_is_exact() {
        let theta = [Tensor::vector(vec![0.3, -1.2, 2.0])];
        let r = grad_check(
            |tape, p| {
                let c = tape.constant(Tensor::vector(vec![1.0, -2.0, 0.5]));
                p[0].dot(c)
            },
            &theta,
            1e-6,
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-9, "{r:?}");
    }

    #[test]
    fn softmax_component_matches_differences() {
        let theta = [Tensor::vector(vec![1.0, 2.0, 3.0])];
        let r = grad_check(
            |_, p| p[0].softmax()?.gather(vec![0].into()).map(|v| v.sum()),
            &theta,
            1e-6,
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-6, "{r:?}");
    }

    #[test]
    fn non_finite_probe_is_reported() {
        // the minus probe lands below zero
        let theta = [Tensor::vector(vec![1e-7])];
        let r = grad_check(|_, p| Ok(p[0].ln().sum()), &theta, 1e-6).unwrap();
        assert_eq!(r.non_finite, vec![(0, 0)]);
        assert!(!r.passes(1.0));
    }
}
