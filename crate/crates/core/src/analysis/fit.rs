//! Least-squares convergence-order fits on log-log data.

use serde::Serialize;

use crate::error::{Error, Result};

pub const MIN_FIT_POINTS: usize = 4;
pub const MIN_R_SQUARED: f64 = 0.95;
/// Errors at or below this are treated as round-off, not signal.
pub const DEGENERATE_FLOOR: f64 = 1e-14;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OrderFit {
    /// Decreasing.
    pub step_sizes: Vec<f64>,
    pub errors: Vec<f64>,
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
    /// Number of largest-h points excluded as pre-asymptotic.
    pub dropped_largest: usize,
}

/// Checks a step-size list: at least four distinct positive values spanning
/// at least one decade.
pub fn check_step_list(h_list: &[f64]) -> Result<()> {
    if h_list.len() < MIN_FIT_POINTS {
        return Err(Error::Fit(format!(
            "need at least {MIN_FIT_POINTS} step sizes, got {}",
            h_list.len()
        )));
    }
    if !h_list.iter().all(|h| h.is_finite() && *h > 0.0) {
        return Err(Error::Fit("step sizes must be positive and finite".into()));
    }
    let mut sorted = h_list.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    if sorted.windows(2).any(|w| w[0] == w[1]) {
        return Err(Error::Fit("step sizes must be distinct".into()));
    }
    if sorted[sorted.len() - 1] < 10.0 * sorted[0] {
        return Err(Error::Fit("step sizes must span at least one decade".into()));
    }
    Ok(())
}

impl OrderFit {
    pub fn fit(step_sizes: &[f64], errors: &[f64]) -> Result<Self> {
        if step_sizes.len() != errors.len() {
            return Err(Error::Fit(format!(
                "{} step sizes but {} errors",
                step_sizes.len(),
                errors.len()
            )));
        }
        if step_sizes.len() < MIN_FIT_POINTS {
            return Err(Error::Fit(format!(
                "need at least {MIN_FIT_POINTS} points, got {}",
                step_sizes.len()
            )));
        }
        if !step_sizes.iter().all(|h| h.is_finite() && *h > 0.0) {
            return Err(Error::Fit("step sizes must be positive and finite".into()));
        }
        if !errors.iter().all(|e| e.is_finite() && *e >= 0.0) {
            return Err(Error::Fit("errors must be finite and non-negative".into()));
        }
        let worst = errors.iter().cloned().fold(0.0f64, f64::max);
        if errors.iter().any(|e| *e <= DEGENERATE_FLOOR) {
            return Err(Error::Fit(format!(
                "degenerate: errors at round-off level (max {worst:e}), no order to fit"
            )));
        }
        let mut pairs: Vec<(f64, f64)> = step_sizes.iter().cloned().zip(errors.iter().cloned()).collect();
        pairs.sort_by(|a, b| b.0.total_cmp(&a.0));

        let n = pairs.len() as f64;
        let xs: Vec<f64> = pairs.iter().map(|p| p.0.ln()).collect();
        let ys: Vec<f64> = pairs.iter().map(|p| p.1.ln()).collect();
        let mx = xs.iter().sum::<f64>() / n;
        let my = ys.iter().sum::<f64>() / n;
        let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
        let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
        let syy: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
        if sxx == 0.0 {
            return Err(Error::Fit("step sizes are all equal".into()));
        }
        let slope = sxy / sxx;
        let intercept = my - slope * mx;
        let r_squared = if syy == 0.0 { 1.0 } else { (sxy * sxy / (sxx * syy)).clamp(0.0, 1.0) };
        Ok(Self {
            step_sizes: pairs.iter().map(|p| p.0).collect(),
            errors: pairs.iter().map(|p| p.1).collect(),
            slope,
            intercept,
            r_squared,
            dropped_largest: 0,
        })
    }

    /// Fits all points; when that fit is unreliable and enough points remain,
    /// refits without the two largest step sizes and keeps the better one.
    pub fn fit_asymptotic(step_sizes: &[f64], errors: &[f64]) -> Result<Self> {
        let full = Self::fit(step_sizes, errors)?;
        if full.is_reliable() || full.step_sizes.len() < MIN_FIT_POINTS + 2 {
            return Ok(full);
        }
        let mut trimmed = Self::fit(&full.step_sizes[2..], &full.errors[2..])?;
        if trimmed.r_squared > full.r_squared {
            trimmed.dropped_largest = 2;
            Ok(trimmed)
        } else {
            Ok(full)
        }
    }

    pub fn is_reliable(&self) -> bool {
        self.r_squared >= MIN_R_SQUARED
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn exact_power_law() {
        let h = [0.1, 0.05, 0.02, 0.01, 0.005];
        let e: Vec<f64> = h.iter().map(|h| 3.0 * h * h).collect();
        let fit = OrderFit::fit(&h, &e).unwrap();
        assert_abs_diff_eq!(fit.slope, 2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(fit.intercept, 3.0f64.ln(), epsilon = 1e-12);
        assert_abs_diff_eq!(fit.r_squared, 1.0, epsilon = 1e-12);
        assert!(fit.is_reliable());
    }

    #[test]
    fn sorts_by_decreasing_step() {
        let h = [0.01, 0.1, 0.001, 0.05];
        let e = [0.01, 0.1, 0.001, 0.05];
        let fit = OrderFit::fit(&h, &e).unwrap();
        assert_eq!(fit.step_sizes, vec![0.1, 0.05, 0.01, 0.001]);
        assert_abs_diff_eq!(fit.slope, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn rejects_degenerate_and_short_inputs() {
        assert!(OrderFit::fit(&[0.1, 0.01, 0.001], &[1.0, 0.1, 0.01]).is_err());
        let err = OrderFit::fit(&[0.1, 0.05, 0.01, 0.001], &[0.0, 0.0, 1e-17, 0.0]).unwrap_err();
        assert!(err.to_string().contains("degenerate"));
        assert!(OrderFit::fit(&[0.1, 0.05, 0.01], &[0.1, 0.05]).is_err());
    }

    #[test]
    fn step_list_rules() {
        assert!(check_step_list(&[0.1, 0.05, 0.02]).is_err());
        assert!(check_step_list(&[0.1, 0.08, 0.06, 0.05]).is_err());
        assert!(check_step_list(&[0.1, 0.05, 0.05, 0.01]).is_err());
        assert!(check_step_list(&[0.1, 0.05, 0.02, 0.01]).is_ok());
    }

    #[test]
    fn asymptotic_fit_drops_preasymptotic_points() {
        let h = [0.4, 0.2, 0.1, 0.05, 0.025, 0.0125];
        let mut e: Vec<f64> = h.iter().map(|h| h * h).collect();
        e[0] = 1e-6;
        e[1] = 5.0;
        let fit = OrderFit::fit_asymptotic(&h, &e).unwrap();
        assert_eq!(fit.dropped_largest, 2);
        assert_abs_diff_eq!(fit.slope, 2.0, epsilon = 1e-12);
    }
}
