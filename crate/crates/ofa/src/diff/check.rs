//! Finite-difference gradient verification.

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use super::DiffError;

/// Above this many coordinates the check switches to a random subsample.
pub const FULL_CHECK_LIMIT: usize = 10_000;

#[derive(Debug, Clone)]
pub struct GradCheckOpts {
    /// Central-difference step.
    pub epsilon: f64,
    /// Subsample size used when the parameter count exceeds
    /// [`FULL_CHECK_LIMIT`].
    pub subsample: usize,
    pub seed: u64,
}

impl Default for GradCheckOpts {
    fn default() -> Self {
        Self { epsilon: 1e-5, subsample: 2048, seed: 0 }
    }
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub coords_checked: usize,
    pub params_total: usize,
    pub worst_coord: usize,
    pub analytic_at_worst: f64,
    pub numeric_at_worst: f64,
}

/// Compare the analytic gradient of a deterministic scalar function against
/// central finite differences.
///
/// `f(params, want_grad)` evaluates the function; when `want_grad` is true
/// it must also return the full gradient. The base point is evaluated twice
/// and must agree bitwise, otherwise the function is rejected as
/// non-deterministic. Relative error per coordinate is
/// `|a - n| / max(1e-8, |a| + |n|)`.
pub fn grad_check<F, E>(f: F, params: &[f64], opts: &GradCheckOpts) -> Result<GradCheckReport, E>
where
    F: Fn(&[f64], bool) -> Result<(f64, Option<Vec<f64>>), E>,
    E: From<DiffError>,
{
    let (v1, grad) = f(params, true)?;
    let (v2, _) = f(params, false)?;
    if v1.to_bits() != v2.to_bits() {
        return Err(DiffError::NonDeterministic.into());
    }
    let grad = grad.expect("want_grad=true must return a gradient");
    assert_eq!(grad.len(), params.len(), "gradient length must match parameters");

    let coords: Vec<usize> = if params.len() <= FULL_CHECK_LIMIT {
        (0..params.len()).collect()
    } else {
        let mut rng = ChaCha20Rng::seed_from_u64(opts.seed);
        rand::seq::index::sample(&mut rng, params.len(), opts.subsample).into_vec()
    };

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        coords_checked: coords.len(),
        params_total: params.len(),
        worst_coord: 0,
        analytic_at_worst: 0.0,
        numeric_at_worst: 0.0,
    };
    let mut x = params.to_vec();
    for &i in &coords {
        let orig = x[i];
        x[i] = orig + opts.epsilon;
        let (fp, _) = f(&x, false)?;
        x[i] = orig - opts.epsilon;
        let (fm, _) = f(&x, false)?;
        x[i] = orig;
        let numeric = (fp - fm) / (2.0 * opts.epsilon);
        let analytic = grad[i];
        let rel = (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8);
        if rel > report.max_rel_err {
            report.max_rel_err = rel;
            report.worst_coord = i;
            report.analytic_at_worst = analytic;
            report.numeric_at_worst = numeric;
        }
    }
    Ok(report)
}
