use std::collections::BTreeMap;

use super::params::ParamSet;
use crate::error::{Error, Result};

/// Denominator floor for the relative error, so coordinates whose true
/// gradient is ~0 are judged on absolute error instead.
pub const RELATIVE_ERROR_FLOOR: f64 = 1e-4;

/// Outcome of a finite-difference comparison.
#[derive(Clone, Debug)]
pub struct GradCheck {
    pub max_relative_error: f64,
    /// Parameter name and flat index of the worst coordinate.
    pub worst: Option<(String, usize)>,
    pub coordinates: usize,
}

/// Compares `analytic` against central differences of `f` on every
/// coordinate of the parameters named in `analytic`.
///
/// Relative error per coordinate is `|a − n| / max(|a|, |n|, RELATIVE_ERROR_FLOOR)`.
pub fn grad_check<F>(
    mut f: F,
    params: &ParamSet,
    analytic: &BTreeMap<String, Vec<f64>>,
    h: f64,
) -> Result<GradCheck>
where
    F: FnMut(&ParamSet) -> Result<f64>,
{
    let mut work = params.clone();
    let mut report = GradCheck {
        max_relative_error: 0.0,
        worst: None,
        coordinates: 0,
    };
    for (name, grad) in analytic {
        let n = work.get(name)?.len();
        if grad.len() != n {
            return Err(Error::Shape(format!("grad_check: `{name}` gradient length")));
        }
        for i in 0..n {
            let orig = work.get(name)?.data()[i];
            work.get_mut(name)?.data_mut()[i] = orig + h;
            let plus = f(&work)?;
            work.get_mut(name)?.data_mut()[i] = orig - h;
            let minus = f(&work)?;
            work.get_mut(name)?.data_mut()[i] = orig;
            if !plus.is_finite() || !minus.is_finite() {
                return Err(Error::NonFinite(format!("grad_check objective at `{name}`[{i}]")));
            }
            let numeric = (plus - minus) / (2.0 * h);
            let err = relative_error(grad[i], numeric);
            report.coordinates += 1;
            if report.worst.is_none() || err > report.max_relative_error {
                report.max_relative_error = err;
                report.worst = Some((name.clone(), i));
            }
        }
    }
    Ok(report)
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(RELATIVE_ERROR_FLOOR)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tensor;

    #[test]
    fn sum_of_squares_is_exact() {
        let mut p = ParamSet::new();
        p.insert("w", Tensor::new(vec![4], vec![0.3, -1.2, 2.5, 0.0]).unwrap());
        let analytic = BTreeMap::from([(
            "w".to_string(),
            p.get("w").unwrap().data().iter().map(|x| 2.0 * x).collect(),
        )]);
        let f = |ps: &ParamSet| Ok(ps.get("w")?.data().iter().map(|x| x * x).sum());
        let r = grad_check(f, &p, &analytic, 1e-5).unwrap();
        assert!(r.max_relative_error <= 1e-8, "{}", r.max_relative_error);
        assert_eq!(r.coordinates, 4);
    }

    #[test]
    fn wrong_gradient_is_detected() {
        let mut p = ParamSet::new();
        p.insert("w", Tensor::new(vec![2], vec![1.0, 2.0]).unwrap());
        let analytic = BTreeMap::from([("w".to_string(), vec![2.0, 4.4])]);
        let f = |ps: &ParamSet| Ok(ps.get("w")?.data().iter().map(|x| x * x).sum());
        let r = grad_check(f, &p, &analytic, 1e-5).unwrap();
        assert!(r.max_relative_error > 1e-2);
        assert_eq!(r.worst, Some(("w".to_string(), 1)));
    }

    #[test]
    fn non_finite_objective_is_an_error() {
        let mut p = ParamSet::new();
        p.insert("w", Tensor::scalar(0.0));
        let analytic = BTreeMap::from([("w".to_string(), vec![0.0])]);
        let f = |ps: &ParamSet| Ok(ps.get("w")?.item().ln());
        assert!(grad_check(f, &p, &analytic, 1e-5).is_err());
    }
}
