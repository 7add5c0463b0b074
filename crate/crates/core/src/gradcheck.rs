//! Central finite-difference verification of autodiff gradients.

use rand::seq::index::sample;

use crate::error::{Error, Result};
use crate::rng::stream;

/// Coordinates checked per parameter group.
pub const MAX_COORDS_PER_GROUP: usize = 64;

/// Outcome of a gradient check.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Largest `|g_ad − g_fd| / (|g_fd| + 1e-8)` over checked coordinates.
    pub max_rel_error: f64,
    pub coords_checked: usize,
    /// (group, coordinate, autodiff, finite difference) at the worst coordinate.
    pub worst: Option<(usize, usize, f64, f64)>,
}

/// Compares `grad` against central differences of `f`.
///
/// `params` holds one flat vector per parameter group; `f` evaluates the loss
/// and `grad` returns the autodiff gradient per group, both at the given
/// parameters. At most [`MAX_COORDS_PER_GROUP`] random coordinates are checked
/// per group.
pub fn finite_diff_check(
    mut f: impl FnMut(&[Vec<f64>]) -> Result<f64>,
    grad: impl FnOnce(&[Vec<f64>]) -> Result<Vec<Vec<f64>>>,
    params: &[Vec<f64>],
    eps: f64,
    seed: u64,
) -> Result<GradCheckReport> {
    if !(1e-6..=1e-2).contains(&eps) {
        return Err(Error::Contract(format!("finite-difference eps {eps} outside [1e-6, 1e-2]")));
    }
    let analytic = grad(params)?;
    if analytic.len() != params.len() || analytic.iter().zip(params).any(|(g, p)| g.len() != p.len()) {
        return Err(Error::Dimension("gradient groups do not match parameter groups".into()));
    }
    let mut work: Vec<Vec<f64>> = params.to_vec();
    let mut rng = stream(seed, 0);
    let mut report = GradCheckReport { max_rel_error: 0.0, coords_checked: 0, worst: None };
    for gi in 0..params.len() {
        let len = params[gi].len();
        let picks = sample(&mut rng, len, len.min(MAX_COORDS_PER_GROUP));
        for ci in picks.iter() {
            let orig = work[gi][ci];
            work[gi][ci] = orig + eps;
            let up = f(&work)?;
            work[gi][ci] = orig - eps;
            let down = f(&work)?;
            work[gi][ci] = orig;
            if !up.is_finite() || !down.is_finite() {
                return Err(Error::Numeric(format!("loss not finite at group {gi} coord {ci}")));
            }
            let fd = (up - down) / (2.0 * eps);
            let ad = analytic[gi][ci];
            let rel = (ad - fd).abs() / (fd.abs() + 1e-8);
            report.coords_checked += 1;
            if rel > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(rel);
                report.worst = Some((gi, ci, ad, fd));
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quad(p: &[Vec<f64>]) -> f64 {
        // 0.5 xᵀAx with A = [[2,1],[1,3]] plus a linear term
        let x = &p[0];
        0.5 * (2.0 * x[0] * x[0] + 2.0 * x[0] * x[1] + 3.0 * x[1] * x[1]) + x[0] - 2.0 * x[1]
    }

    #[test]
    fn quadratic_is_exact() {
        let p = vec![vec![0.7, -1.3]];
        let report = finite_diff_check(
            |p| Ok(quad(p)),
            |p| {
                let x = &p[0];
                Ok(vec![vec![2.0 * x[0] + x[1] + 1.0, x[0] + 3.0 * x[1] - 2.0]])
            },
            &p,
            1e-4,
            0,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-7, "{report:?}");
        assert_eq!(report.coords_checked, 2);
    }

    #[test]
    fn eps_outside_range_is_rejected() {
        let p = vec![vec![1.0]];
        for eps in [0.0, 1e-7, 0.5] {
            let r = finite_diff_check(|_| Ok(0.0), |_| Ok(vec![vec![0.0]]), &p, eps, 0);
            assert!(matches!(r, Err(Error::Contract(_))));
        }
    }

    #[test]
    fn non_finite_loss_is_reported() {
        let p = vec![vec![1.0]];
        let r = finite_diff_check(|_| Ok(f64::NAN), |_| Ok(vec![vec![0.0]]), &p, 1e-4, 0);
        assert!(matches!(r, Err(Error::Numeric(_))));
    }
}
