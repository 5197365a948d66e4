//! Central finite-difference verification of analytic gradients.

use serde::Serialize;

/// Default step for central differences.
pub const STEP: f64 = 1e-5;

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_error: f64,
    pub worst_index: Option<usize>,
    pub analytic: f64,
    pub numeric: f64,
}

impl GradCheckReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_rel_error < tolerance
    }
}

/// `|a − n| / max(|a|, |n|, 1e-6)`; the floor keeps exact zeros from
/// producing spurious blow-ups.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Compares `analytic` against central differences of `f` at `x` for every
/// coordinate.
pub fn check_gradient(f: &dyn Fn(&[f64]) -> f64, x: &[f64], analytic: &[f64], h: f64) -> GradCheckReport {
    let coords: Vec<usize> = (0..x.len()).collect();
    check_coordinates(f, x, analytic, &coords, h)
}

/// Same as [`check_gradient`] restricted to `coords`.
pub fn check_coordinates(
    f: &dyn Fn(&[f64]) -> f64,
    x: &[f64],
    analytic: &[f64],
    coords: &[usize],
    h: f64,
) -> GradCheckReport {
    assert_eq!(x.len(), analytic.len(), "gradient length mismatch");
    let mut probe = x.to_vec();
    let mut report = GradCheckReport {
        checked: 0,
        max_rel_error: 0.0,
        worst_index: None,
        analytic: 0.0,
        numeric: 0.0,
    };
    for &i in coords {
        let orig = probe[i];
        probe[i] = orig + h;
        let up = f(&probe);
        probe[i] = orig - h;
        let down = f(&probe);
        probe[i] = orig;
        let numeric = (up - down) / (2.0 * h);
        let err = relative_error(analytic[i], numeric);
        report.checked += 1;
        if err > report.max_rel_error || report.worst_index.is_none() {
            report.max_rel_error = err;
            report.worst_index = Some(i);
            report.analytic = analytic[i];
            report.numeric = numeric;
        }
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_gradient_passes() {
        let f = |x: &[f64]| x[0] * x[0] * x[1] + x[1].sin();
        let x = [0.7, -1.2];
        let g = [2.0 * 0.7 * -1.2, 0.49 + (-1.2f64).cos()];
        assert!(check_gradient(&f, &x, &g, STEP).passes(1e-6));
    }

    #[test]
    fn wrong_gradient_is_reported() {
        let f = |x: &[f64]| x[0] * x[0];
        let rep = check_gradient(&f, &[1.0, 0.0], &[3.0, 0.0], STEP);
        assert_eq!(rep.worst_index, Some(0));
        assert!(!rep.passes(1e-4));
    }
}
