//! Central-difference verification of reverse-mode gradients.
//!
//! For a scalar function f of a flat parameter vector, each analytic
//! partial is compared against (f(θ+h·eᵢ) − f(θ−h·eᵢ)) / 2h. Coordinates
//! where the second difference reveals a kink (a non-smooth point such as
//! a relu boundary) are skipped rather than reported as mismatches, since
//! a subgradient need not equal the two-sided difference quotient there.

use crate::tensor::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum GradCheckError {
    #[error("function evaluation failed")]
    Eval(#[from] TensorError),
    #[error("non-finite {what} at coordinate {index}")]
    NonFinite { index: usize, what: String },
    #[error("gradient has {got} entries for {expected} parameters")]
    GradLength { got: usize, expected: usize },
}

/// Tuning for [`gradient_check`].
#[derive(Debug, Clone)]
pub struct GradCheckConfig {
    /// Central-difference step h.
    pub step: f64,
    /// Maximum relative error for the check to pass.
    pub rel_tolerance: f64,
    /// A coordinate is skipped as a kink when
    /// |f⁺ + f⁻ − 2f₀| > kink_factor · h² · max(1, |f₀|).
    pub kink_factor: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            step: 1e-4,
            rel_tolerance: 1e-4,
            kink_factor: 1000.0,
        }
    }
}

/// One compared coordinate.
#[derive(Debug, Clone, Copy)]
pub struct GradCheckEntry {
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

/// Outcome of a full sweep over the parameter vector.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub checked: usize,
    pub skipped_kinks: usize,
    pub max_rel_err: f64,
    pub worst: Option<GradCheckEntry>,
    pub passed: bool,
}

fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Sweep every coordinate of `theta`, comparing the analytic gradient
/// returned by `f` at `theta` against central differences of its value.
///
/// `f` must return the loss and the full gradient at the queried point;
/// only the loss is used for the perturbed evaluations.
pub fn gradient_check<F>(
    mut f: F,
    theta: &[f64],
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport, GradCheckError>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>), TensorError>,
{
    let (f0, grad) = f(theta)?;
    if !f0.is_finite() {
        return Err(GradCheckError::NonFinite {
            index: 0,
            what: format!("loss {f0}"),
        });
    }
    if grad.len() != theta.len() {
        return Err(GradCheckError::GradLength {
            got: grad.len(),
            expected: theta.len(),
        });
    }
    if let Some(index) = grad.iter().position(|g| !g.is_finite()) {
        return Err(GradCheckError::NonFinite {
            index,
            what: format!("analytic gradient {}", grad[index]),
        });
    }

    let h = cfg.step;
    let mut point = theta.to_vec();
    let mut report = GradCheckReport {
        checked: 0,
        skipped_kinks: 0,
        max_rel_err: 0.0,
        worst: None,
        passed: true,
    };
    for i in 0..theta.len() {
        point[i] = theta[i] + h;
        let f_plus = f(&point)?.0;
        point[i] = theta[i] - h;
        let f_minus = f(&point)?.0;
        point[i] = theta[i];
        for (what, v) in [("f(θ+h)", f_plus), ("f(θ−h)", f_minus)] {
            if !v.is_finite() {
                return Err(GradCheckError::NonFinite {
                    index: i,
                    what: format!("{what} = {v}"),
                });
            }
        }
        let second_diff = (f_plus + f_minus - 2.0 * f0).abs();
        if second_diff > cfg.kink_factor * h * h * f0.abs().max(1.0) {
            report.skipped_kinks += 1;
            continue;
        }
        let numeric = (f_plus - f_minus) / (2.0 * h);
        let err = rel_err(grad[i], numeric);
        report.checked += 1;
        if err > report.max_rel_err {
            report.max_rel_err = err;
            report.worst = Some(GradCheckEntry {
                index: i,
                analytic: grad[i],
                numeric,
                rel_err: err,
            });
        }
    }
    report.passed = report.max_rel_err <= cfg.rel_tolerance;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{Tape, Tensor};

    #[test]
    fn quadratic_gradient_passes() {
        let theta = [0.3, -1.2, 2.5];
        let report = gradient_check(
            |t| {
                let loss: f64 = t.iter().map(|&x| x * x).sum();
                Ok((loss, t.iter().map(|&x| 2.0 * x).collect()))
            },
            &theta,
            &GradCheckConfig::default(),
        )
        .unwrap();
        assert!(report.passed, "max rel err {}", report.max_rel_err);
        assert_eq!(report.checked, 3);
        assert_eq!(report.skipped_kinks, 0);
        assert!(report.max_rel_err < 1e-6);
    }

    #[test]
    fn wrong_gradient_is_caught_with_worst_coordinate() {
        let theta = [1.0, 2.0];
        let report = gradient_check(
            |t| {
                let loss: f64 = t.iter().map(|&x| x * x).sum();
                let mut g: Vec<f64> = t.iter().map(|&x| 2.0 * x).collect();
                g[1] += 0.5;
                Ok((loss, g))
            },
            &theta,
            &GradCheckConfig::default(),
        )
        .unwrap();
        assert!(!report.passed);
        assert_eq!(report.worst.unwrap().index, 1);
    }

    #[test]
    fn kink_at_relu_boundary_is_skipped() {
        let theta = [0.0, 1.0];
        let report = gradient_check(
            |t| {
                let mut tape = Tape::new();
                let x = tape.leaf(Tensor::new(vec![2], t.to_vec()).unwrap(), true);
                let r = tape.relu(x);
                let loss = tape.mean(r);
                tape.backward(loss)?;
                Ok((tape.scalar_value(loss)?, tape.grad(x).unwrap().to_vec()))
            },
            &theta,
            &GradCheckConfig::default(),
        )
        .unwrap();
        assert_eq!(report.skipped_kinks, 1);
        assert_eq!(report.checked, 1);
        assert!(report.passed);
    }

    #[test]
    fn non_finite_loss_is_an_error() {
        let err = gradient_check(
            |t| Ok((1.0 / t[0], vec![0.0])),
            &[0.0],
            &GradCheckConfig::default(),
        )
        .unwrap_err();
        assert!(matches!(err, GradCheckError::NonFinite { .. }));
    }

    #[test]
    fn gradient_length_mismatch_is_an_error() {
        let err = gradient_check(
            |_| Ok((0.0, vec![0.0; 5])),
            &[0.0, 0.0],
            &GradCheckConfig::default(),
        )
        .unwrap_err();
        assert!(matches!(
            err,
            GradCheckError::GradLength { got: 5, expected: 2 }
        ));
    }
}
