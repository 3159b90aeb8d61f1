//! Central finite-difference gradient checking.

/// Finite-difference step.
pub const GRADCHECK_STEP: f64 = 1e-4;
/// Maximum accepted relative error between analytic and numeric gradients.
pub const GRADCHECK_TOL: f64 = 1e-4;
/// Denominator floor so near-zero gradients compare by absolute error.
pub const GRADCHECK_FLOOR: f64 = 1e-5;
/// Test points must keep every ReLU input, max-selection gap and hinge
/// argument at least this far from its switching point, so no
/// non-differentiable point lies within one finite-difference step.
pub const KINK_MARGIN: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < GRADCHECK_TOL
    }
}

pub fn relative_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(GRADCHECK_FLOOR)
}

/// Compares `analytic` against central differences of `f` at every
/// coordinate of `point`.
pub fn check_gradient<F: FnMut(&[f64]) -> f64>(
    f: F,
    point: &[f64],
    analytic: &[f64],
    step: f64,
) -> GradCheckReport {
    let all: Vec<usize> = (0..point.len()).collect();
    check_gradient_at(f, point, analytic, &all, step)
}

/// As [`check_gradient`], restricted to the listed coordinates.
pub fn check_gradient_at<F: FnMut(&[f64]) -> f64>(
    mut f: F,
    point: &[f64],
    analytic: &[f64],
    coords: &[usize],
    step: f64,
) -> GradCheckReport {
    assert_eq!(point.len(), analytic.len(), "gradient length");
    let mut x = point.to_vec();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
        checked: coords.len(),
    };
    for &i in coords {
        let orig = x[i];
        x[i] = orig + step;
        let plus = f(&x);
        x[i] = orig - step;
        let minus = f(&x);
        x[i] = orig;
        let numeric = (plus - minus) / (2.0 * step);
        let err = relative_error(analytic[i], numeric);
        if err > report.max_rel_error || !err.is_finite() {
            report.max_rel_error = if err.is_finite() { err } else { f64::INFINITY };
            report.worst_index = i;
            report.analytic = analytic[i];
            report.numeric = numeric;
        }
    }
    report
}
