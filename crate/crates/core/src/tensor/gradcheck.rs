//! Central-difference verification of analytic gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct GradCheckOptions {
    pub step: f64,
    /// Coordinates probed; all of them when this exceeds the parameter count.
    pub samples: usize,
    pub seed: u64,
    /// Gradient magnitude below which errors are measured absolutely.
    pub floor: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            samples: 64,
            seed: 0,
            floor: 1e-6,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

impl GradCheckReport {
    pub fn passed(&self, tolerance: f64) -> bool {
        self.max_rel_error < tolerance
    }
}

/// `|a - n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares the gradient returned by `closure` at `params` with central
/// differences on a seeded random subset of coordinates. The closure
/// returns `(loss, gradient)`.
pub fn gradient_check<F>(mut closure: F, params: &[f64], opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: FnMut(&[f64]) -> (f64, Vec<f64>),
{
    let (loss, analytic) = closure(params);
    if !loss.is_finite() {
        return Err(Error::Probe(format!("loss at probe point is {loss}")));
    }
    if analytic.len() != params.len() {
        return Err(Error::Probe(format!(
            "closure returned {} gradients for {} parameters",
            analytic.len(),
            params.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let indices: Vec<usize> = if opts.samples >= params.len() {
        (0..params.len()).collect()
    } else {
        let mut v = sample(&mut rng, params.len(), opts.samples).into_vec();
        v.sort_unstable();
        v
    };
    let mut probe = params.to_vec();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
        checked: indices.len(),
    };
    for &k in &indices {
        let original = probe[k];
        probe[k] = original + opts.step;
        let (up, _) = closure(&probe);
        probe[k] = original - opts.step;
        let (down, _) = closure(&probe);
        probe[k] = original;
        if !(up.is_finite() && down.is_finite()) {
            return Err(Error::Probe(format!("non-finite loss while probing coordinate {k}")));
        }
        let numeric = (up - down) / (2.0 * opts.step);
        let err = relative_error(analytic[k], numeric, opts.floor);
        if err > report.max_rel_error {
            report.max_rel_error = err;
            report.worst_index = k;
            report.analytic = analytic[k];
            report.numeric = numeric;
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_matches_analytic_gradient() {
        let w = vec![0.5, -1.5, 2.0, 3.25];
        let f = |x: &[f64]| (x.iter().map(|v| v * v).sum(), x.iter().map(|v| 2.0 * v).collect());
        let opts = GradCheckOptions { samples: usize::MAX, ..Default::default() };
        let report = gradient_check(f, &w, &opts).unwrap();
        assert!(report.max_rel_error < 1e-7);
        assert_eq!(report.checked, 4);
    }

    #[test]
    fn corrupted_gradient_is_caught() {
        let w = vec![0.5, -1.5, 2.0];
        let f = |x: &[f64]| {
            let mut g: Vec<f64> = x.iter().map(|v| 2.0 * v).collect();
            g[1] *= 1.01;
            (x.iter().map(|v| v * v).sum(), g)
        };
        let opts = GradCheckOptions { samples: usize::MAX, ..Default::default() };
        let report = gradient_check(f, &w, &opts).unwrap();
        assert!(!report.passed(1e-4));
        assert_eq!(report.worst_index, 1);
    }

    #[test]
    fn non_finite_loss_is_a_probe_error() {
        let f = |x: &[f64]| (x[0].ln(), vec![1.0 / x[0]]);
        assert!(matches!(gradient_check(f, &[-1.0], &GradCheckOptions::default()), Err(Error::Probe(_))));
    }
}
