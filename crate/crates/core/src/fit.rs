//! Small bounded Levenberg–Marquardt solver and the timescale models built
//! on it. Parameter counts here are at most three, so the normal equations
//! are solved directly.

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FitError {
    #[error("need at least {needed} points to fit, got {got}")]
    InsufficientPoints { needed: usize, got: usize },
    #[error("fit did not converge: {0}")]
    Diverged(String),
    #[error("fit residual {residual:.3} exceeds threshold {threshold:.3}")]
    ResidualTooLarge { residual: f64, threshold: f64 },
    #[error("fitted timescale {0} is not positive")]
    NonPositiveTimescale(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitOutcome {
    pub params: Vec<f64>,
    /// Weighted sum of squared residuals.
    pub chi2: f64,
    pub iterations: usize,
}

/// Minimizes `Σ wᵢ (yᵢ − f(p, xᵢ))²` with `lower ≤ p ≤ upper` enforced by
/// projection.
pub fn levenberg_marquardt<F>(
    model: F,
    initial: &[f64],
    lower: &[f64],
    upper: &[f64],
    x: &[f64],
    y: &[f64],
    weights: &[f64],
) -> Result<FitOutcome, FitError>
where
    F: Fn(&[f64], f64) -> f64,
{
    let n = initial.len();
    if x.len() < n + 1 {
        return Err(FitError::InsufficientPoints { needed: n + 1, got: x.len() });
    }
    let project = |p: &mut [f64]| {
        for ((v, lo), hi) in p.iter_mut().zip(lower).zip(upper) {
            *v = v.clamp(*lo, *hi);
        }
    };
    let chi2 = |p: &[f64]| -> f64 { x.iter().zip(y).zip(weights).map(|((&xi, &yi), &wi)| wi * (yi - model(p, xi)).powi(2)).sum() };

    let mut p = initial.to_vec();
    project(&mut p);
    let mut current = chi2(&p);
    if !current.is_finite() {
        return Err(FitError::Diverged("non-finite objective at the initial point".into()));
    }
    let mut lambda = 1e-3;
    let mut iterations = 0;
    for _ in 0..500 {
        iterations += 1;
        // Forward-difference Jacobian.
        let mut jac = vec![vec![0.0; n]; x.len()];
        for k in 0..n {
            let step = 1e-7 * p[k].abs().max(1e-8);
            let mut q = p.clone();
            q[k] += step;
            for (row, &xi) in jac.iter_mut().zip(x) {
                row[k] = (model(&q, xi) - model(&p, xi)) / step;
            }
        }
        let mut jtj = vec![vec![0.0; n]; n];
        let mut jtr = vec![0.0; n];
        for ((row, (&xi, &yi)), &wi) in jac.iter().zip(x.iter().zip(y)).zip(weights) {
            let r = yi - model(&p, xi);
            for a in 0..n {
                jtr[a] += wi * row[a] * r;
                for b in 0..n {
                    jtj[a][b] += wi * row[a] * row[b];
                }
            }
        }
        let mut improved = false;
        while lambda < 1e12 {
            let mut damped = jtj.clone();
            for a in 0..n {
                damped[a][a] += lambda * jtj[a][a].max(1e-300);
            }
            let Some(delta) = solve(damped, jtr.clone()) else {
                lambda *= 10.0;
                continue;
            };
            let mut trial: Vec<f64> = p.iter().zip(&delta).map(|(a, b)| a + b).collect();
            project(&mut trial);
            let value = chi2(&trial);
            if value.is_finite() && value <= current {
                let gain = current - value;
                p = trial;
                current = value;
                lambda = (lambda / 10.0).max(1e-12);
                improved = gain > 1e-14 * current.max(1e-300);
                break;
            }
            lambda *= 10.0;
        }
        if !improved {
            break;
        }
    }
    Ok(FitOutcome { params: p, chi2: current, iterations })
}

/// Gaussian elimination with partial pivoting.
fn solve(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Option<Vec<f64>> {
    let n = b.len();
    for col in 0..n {
        let pivot = (col..n).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))?;
        if a[pivot][col].abs() < 1e-300 {
            return None;
        }
        a.swap(col, pivot);
        b.swap(col, pivot);
        for row in col + 1..n {
            let f = a[row][col] / a[col][col];
            for k in col..n {
                a[row][k] -= f * a[col][k];
            }
            b[row] -= f * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for row in (0..n).rev() {
        let s: f64 = (row + 1..n).map(|k| a[row][k] * x[k]).sum();
        x[row] = (b[row] - s) / a[row][row];
    }
    x.iter().all(|v| v.is_finite()).then_some(x)
}

/// Variance of the bin average of a unit-variance process with correlation
/// `exp(−t/τ)`, relative to its zero-width value: `2(u − 1 + e^{−u})/u²` with
/// `u = w/τ`.
pub fn telegraph_knee(u: f64) -> f64 {
    if u < 1e-6 {
        1.0 - u / 3.0
    } else {
        2.0 * (u - 1.0 + (-u).exp()) / (u * u)
    }
}

/// Parameters of a fitted timescale model.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimescaleFit {
    pub amplitude: f64,
    pub timescale: f64,
    pub offset: f64,
    /// Weighted RMS residual relative to the largest `|y|`.
    pub relative_residual: f64,
    /// The timescale sits on its upper bound: the data are flat.
    pub at_upper_bound: bool,
}

fn relative_residual(chi2: f64, weights: &[f64], y: &[f64]) -> f64 {
    let wsum: f64 = weights.iter().sum();
    let scale = y.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if scale == 0.0 {
        0.0
    } else {
        (chi2 / wsum).sqrt() / scale
    }
}

fn inverse_variance_weights(errors: Option<&[f64]>, n: usize) -> Vec<f64> {
    match errors {
        Some(e) => {
            let floor = e.iter().copied().filter(|v| *v > 0.0).fold(f64::INFINITY, f64::min);
            e.iter().map(|&s| 1.0 / s.max(if floor.is_finite() { floor } else { 1.0 }).powi(2)).collect()
        }
        None => vec![1.0; n],
    }
}

/// Fits `y = A · telegraph_knee(w/τ)` to a bin-width sweep.
pub fn fit_telegraph_knee(widths: &[f64], y: &[f64], errors: Option<&[f64]>, tau_max: f64) -> Result<TimescaleFit, FitError> {
    let w = inverse_variance_weights(errors, widths.len());
    let a0 = y.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    // Start at the width where y has fallen to half of its first value.
    let half = y[0] / 2.0;
    let tau0 = widths.iter().zip(y).find(|(_, v)| **v < half).map_or(widths[widths.len() / 2], |(x, _)| *x / 2.0);
    let lo_tau = widths[0] * 1e-3;
    let out = levenberg_marquardt(
        |p, x| p[0] * telegraph_knee(x / p[1]),
        &[a0, tau0],
        &[f64::NEG_INFINITY, lo_tau],
        &[f64::INFINITY, tau_max],
        widths,
        y,
        &w,
    )?;
    Ok(TimescaleFit {
        amplitude: out.params[0],
        timescale: out.params[1],
        offset: 0.0,
        relative_residual: relative_residual(out.chi2, &w, y),
        at_upper_bound: out.params[1] >= tau_max * (1.0 - 1e-9),
    })
}

/// Fits `y = C · exp(−x/τ) + C₀`.
pub fn fit_exponential_knee(x: &[f64], y: &[f64], errors: Option<&[f64]>, tau_max: f64) -> Result<TimescaleFit, FitError> {
    let w = inverse_variance_weights(errors, x.len());
    let (first, last) = (y[0], y[y.len() - 1]);
    let tau0 = (x[0] * x[x.len() - 1]).sqrt();
    let out = levenberg_marquardt(
        |p, xi| p[0] * (-xi / p[1]).exp() + p[2],
        &[first - last, tau0, last],
        &[f64::NEG_INFINITY, x[0] * 1e-3, f64::NEG_INFINITY],
        &[f64::INFINITY, tau_max, f64::INFINITY],
        x,
        y,
        &w,
    )?;
    Ok(TimescaleFit {
        amplitude: out.params[0],
        timescale: out.params[1],
        offset: out.params[2],
        relative_residual: relative_residual(out.chi2, &w, y),
        at_upper_bound: out.params[1] >= tau_max * (1.0 - 1e-9),
    })
}

/// Fits `y = A · exp(−x/τ)` (no offset), e.g. to an autocorrelation at
/// lags ≥ 1.
pub fn fit_exponential_decay(x: &[f64], y: &[f64], tau_max: f64) -> Result<TimescaleFit, FitError> {
    let w = vec![1.0; x.len()];
    let a0 = y[0].max(1e-6);
    let tau0 = x.iter().zip(y).find(|(_, v)| **v < a0 / std::f64::consts::E).map_or(x[x.len() / 2], |(xi, _)| *xi);
    let out = levenberg_marquardt(
        |p, xi| p[0] * (-xi / p[1]).exp(),
        &[a0, tau0],
        &[f64::NEG_INFINITY, x[0] * 1e-3],
        &[f64::INFINITY, tau_max],
        x,
        y,
        &w,
    )?;
    Ok(TimescaleFit {
        amplitude: out.params[0],
        timescale: out.params[1],
        offset: 0.0,
        relative_residual: relative_residual(out.chi2, &w, y),
        at_upper_bound: out.params[1] >= tau_max * (1.0 - 1e-9),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn recovers_noise_free_exponential_knee() {
        let x: Vec<f64> = (0..10).map(|k| 25.0 * 2f64.powi(k)).collect();
        let y: Vec<f64> = x.iter().map(|v| 0.7 * (-v / 250.0).exp() + 0.1).collect();
        let fit = fit_exponential_knee(&x, &y, None, 1e6).unwrap();
        assert!((fit.timescale - 250.0).abs() < 1e-3, "{fit:?}");
        assert!((fit.amplitude - 0.7).abs() < 1e-6 && (fit.offset - 0.1).abs() < 1e-6);
    }

    #[test]
    fn recovers_noise_free_telegraph_knee() {
        let x: Vec<f64> = (0..8).map(|k| 25.0 * 2f64.powi(k)).collect();
        let y: Vec<f64> = x.iter().map(|v| 0.07 * telegraph_knee(v / 125.0)).collect();
        let fit = fit_telegraph_knee(&x, &y, None, 1e6).unwrap();
        assert!((fit.timescale - 125.0).abs() < 1e-3, "{fit:?}");
    }

    #[test]
    fn recovers_decay() {
        let x: Vec<f64> = (1..=40).map(|k| 100.0 * k as f64).collect();
        let y: Vec<f64> = x.iter().map(|v| 0.4 * (-v / 1500.0).exp()).collect();
        let fit = fit_exponential_decay(&x, &y, 1e7).unwrap();
        assert!((fit.timescale - 1500.0).abs() < 1e-2, "{fit:?}");
    }

    #[test]
    fn knee_series_matches_closed_form() {
        // Small-u expansion agrees with the closed form where both are valid.
        let u: f64 = 1e-4;
        let closed = 2.0 * (u - 1.0 + (-u).exp()) / (u * u);
        assert!((telegraph_knee(1e-7) - 1.0).abs() < 1e-6);
        assert!((closed - (1.0 - u / 3.0)).abs() < 1e-4);
    }

    #[test]
    fn too_few_points() {
        assert!(matches!(fit_exponential_knee(&[1.0], &[1.0], None, 10.0), Err(FitError::InsufficientPoints { .. })));
    }
}
