//! Central-difference verification of analytic gradients.

use std::fmt;

use super::Matrix;
use crate::error::{CkmlError, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct GroupError {
    pub name: String,
    pub max_rel_error: f64,
    /// Flat index of the worst entry within the group.
    pub worst_entry: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradientReport {
    pub groups: Vec<GroupError>,
    pub max_rel_error: f64,
}

impl GradientReport {
    pub fn passes(&self, threshold: f64) -> bool {
        self.max_rel_error < threshold
    }

    pub fn worst_group(&self) -> Option<&GroupError> {
        self.groups
            .iter()
            .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
    }

    pub fn failing(&self, threshold: f64) -> impl Iterator<Item = &GroupError> {
        self.groups.iter().filter(move |g| g.max_rel_error >= threshold)
    }
}

impl fmt::Display for GradientReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for g in &self.groups {
            writeln!(f, "{:<32} {:.3e}", g.name, g.max_rel_error)?;
        }
        write!(f, "{:<32} {:.3e}", "max", self.max_rel_error)
    }
}

#[inline]
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

/// Compares `analytic` against central differences of `loss`, perturbing
/// every entry of every parameter in turn.
pub fn finite_difference_gradcheck<F>(
    names: &[String],
    params: &[Matrix],
    analytic: &[Matrix],
    epsilon: f64,
    mut loss: F,
) -> Result<GradientReport>
where
    F: FnMut(&[Matrix]) -> Result<f64>,
{
    assert_eq!(names.len(), params.len());
    assert_eq!(analytic.len(), params.len());
    let mut work: Vec<Matrix> = params.to_vec();
    let mut groups = Vec::with_capacity(params.len());
    let mut overall: f64 = 0.0;
    for (p, name) in names.iter().enumerate() {
        if analytic[p].shape() != params[p].shape() {
            return Err(CkmlError::Shape(format!("gradient for {name} has wrong shape")));
        }
        let mut worst = 0.0f64;
        let mut worst_entry = 0;
        for j in 0..params[p].len() {
            let original = work[p].as_slice()[j];
            work[p].as_mut_slice()[j] = original + epsilon;
            let plus = loss(&work)?;
            work[p].as_mut_slice()[j] = original - epsilon;
            let minus = loss(&work)?;
            work[p].as_mut_slice()[j] = original;
            if !plus.is_finite() || !minus.is_finite() {
                return Err(CkmlError::Numeric(format!(
                    "non-finite loss while perturbing {name}[{j}]"
                )));
            }
            let numeric = (plus - minus) / (2.0 * epsilon);
            let err = relative_error(analytic[p].as_slice()[j], numeric);
            if err > worst {
                worst = err;
                worst_entry = j;
            }
        }
        overall = overall.max(worst);
        groups.push(GroupError {
            name: name.clone(),
            max_rel_error: worst,
            worst_entry,
        });
    }
    Ok(GradientReport {
        groups,
        max_rel_error: overall,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sum_sq(ps: &[Matrix]) -> Result<f64> {
        Ok(ps.iter().map(Matrix::frobenius_sq).sum())
    }

    #[test]
    fn quadratic_loss_matches() {
        let p = vec![Matrix::from_rows(&[vec![0.3, -1.2], vec![2.0, 0.7]]).unwrap()];
        let analytic: Vec<Matrix> = p
            .iter()
            .map(|m| Matrix::from_vec(2, 2, m.as_slice().iter().map(|v| 2.0 * v).collect()).unwrap())
            .collect();
        let report =
            finite_difference_gradcheck(&["theta".into()], &p, &analytic, 1e-5, sum_sq).unwrap();
        assert!(report.max_rel_error < 1e-8, "{report}");
    }

    #[test]
    fn constant_loss_matches_zero_gradient() {
        let p = vec![Matrix::filled(3, 1, 0.4)];
        let report = finite_difference_gradcheck(
            &["theta".into()],
            &p,
            &[Matrix::zeros(3, 1)],
            1e-5,
            |_| Ok(4.2),
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-8);
    }

    #[test]
    fn wrong_gradient_is_flagged() {
        let p = vec![Matrix::filled(1, 2, 1.0), Matrix::filled(1, 1, 0.5)];
        let analytic = vec![Matrix::filled(1, 2, 2.0), Matrix::filled(1, 1, 2.0)];
        let report = finite_difference_gradcheck(
            &["good".into(), "bad".into()],
            &p,
            &analytic,
            1e-5,
            sum_sq,
        )
        .unwrap();
        assert!(!report.passes(1e-4));
        assert_eq!(report.worst_group().unwrap().name, "bad");
        assert_eq!(report.failing(1e-4).count(), 1);
    }

    #[test]
    fn non_finite_loss_is_error() {
        let p = vec![Matrix::filled(1, 1, 1.0)];
        let r = finite_difference_gradcheck(&["x".into()], &p, &[Matrix::zeros(1, 1)], 1e-5, |_| {
            Ok(f64::NAN)
        });
        assert!(matches!(r, Err(CkmlError::Numeric(_))));
    }
}
