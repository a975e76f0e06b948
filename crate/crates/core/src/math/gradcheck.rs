use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(tensor index, flat coordinate)` of the worst coordinate.
    pub worst: (usize, usize),
    pub checked: usize,
}

/// Compares `analytic` gradients against central differences of `f`.
///
/// At most `samples_per_tensor` coordinates are drawn from each tensor (all of
/// them when the tensor is smaller). The error of one coordinate is
/// `|a - c| / (|a| + |c| + 1e-12)`.
pub fn finite_diff_check<F>(
    mut f: F,
    params: &[Tensor<f64>],
    analytic: &[Tensor<f64>],
    h: f64,
    samples_per_tensor: usize,
    seed: u64,
) -> Result<GradCheckReport>
where
    F: FnMut(&[Tensor<f64>]) -> Result<f64>,
{
    if params.len() != analytic.len() {
        return Err(Error::Argument(format!(
            "{} parameter tensors but {} gradients",
            params.len(),
            analytic.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut work: Vec<Tensor<f64>> = params.to_vec();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: (0, 0),
        checked: 0,
    };
    let mut eval = |work: &[Tensor<f64>]| -> Result<f64> {
        let v = f(work)?;
        if !v.is_finite() {
            return Err(Error::Evaluation("objective is not finite".into()));
        }
        Ok(v)
    };
    for (ti, (p, g)) in params.iter().zip(analytic).enumerate() {
        if p.shape() != g.shape() {
            return Err(Error::Dimension(format!(
                "tensor {ti}: parameter {:?} vs gradient {:?}",
                p.shape(),
                g.shape()
            )));
        }
        let coords: Vec<usize> = if p.len() <= samples_per_tensor {
            (0..p.len()).collect()
        } else {
            let mut c = sample(&mut rng, p.len(), samples_per_tensor).into_vec();
            c.sort_unstable();
            c
        };
        for c in coords {
            let orig = p.data()[c];
            work[ti].data_mut()[c] = orig + h;
            let plus = eval(&work)?;
            work[ti].data_mut()[c] = orig - h;
            let minus = eval(&work)?;
            work[ti].data_mut()[c] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let a = g.data()[c];
            let err = (a - numeric).abs() / (a.abs() + numeric.abs() + 1e-12);
            if err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = (ti, c);
            }
            report.checked += 1;
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_function_is_exact() {
        let w = [0.5, -1.5, 2.0, 3.0];
        let x = Tensor::from_f64(&[4], &[1.0, 2.0, 3.0, 4.0]).unwrap();
        let grad = Tensor::from_f64(&[4], &w).unwrap();
        let f = |p: &[Tensor<f64>]| Ok(p[0].data().iter().zip(&w).map(|(a, b)| a * b).sum());
        let r = finite_diff_check(f, &[x], &[grad], 1e-5, 200, 0).unwrap();
        assert!(r.max_rel_error <= 1e-9, "{}", r.max_rel_error);
        assert_eq!(r.checked, 4);
    }

    #[test]
    fn corrupted_gradient_is_caught() {
        let x = Tensor::from_f64(&[3], &[1.0, 2.0, 3.0]).unwrap();
        let bad = Tensor::from_f64(&[3], &[2.0, 4.0, 6.3]).unwrap();
        let f = |p: &[Tensor<f64>]| Ok(p[0].data().iter().map(|v| v * v).sum());
        let r = finite_diff_check(f, &[x], &[bad], 1e-5, 200, 0).unwrap();
        assert!(r.max_rel_error > 1e-2);
        assert_eq!(r.worst, (0, 2));
    }

    #[test]
    fn non_finite_objective_errors() {
        let x = Tensor::from_f64(&[1], &[1.0]).unwrap();
        let g = x.clone();
        let f = |_: &[Tensor<f64>]| Ok(f64::NAN);
        assert!(matches!(
            finite_diff_check(f, &[x], &[g], 1e-5, 10, 0),
            Err(Error::Evaluation(_))
        ));
    }
}
