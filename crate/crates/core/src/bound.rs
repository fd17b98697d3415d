//! The non-divergence bound: with a retirement threshold τ, an evidence
//! floor N_min sized so the contribution estimate is within ε of truth with
//! probability 1−δ per skill, and at most C active skills, the expected
//! eval pass rate cannot drift below `E[p0] − (τ + ε) − C·δ`. The simulation
//! backend checks this floor empirically by Monte Carlo.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum BoundError {
    #[error("domain error: {0}")]
    DomainError(String),
}

/// Hoeffding deviation: `ε = sqrt(ln(2/δ) / (2·N_min))`.
pub fn hoeffding_eps(n_min: u64, delta: f64) -> Result<f64, BoundError> {
    if n_min < 1 {
        return Err(BoundError::DomainError("n_min must be at least 1".to_string()));
    }
    if !(delta > 0.0 && delta < 1.0) {
        return Err(BoundError::DomainError(format!("delta must be in (0, 1), got {delta}")));
    }
    Ok(((2.0 / delta).ln() / (2.0 * n_min as f64)).sqrt())
}

/// Parameters of the floor; `epsilon` is derived from `n_min` and `delta`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundParams {
    pub tau: f64,
    pub n_min: u64,
    pub cap: usize,
    pub delta: f64,
    pub epsilon: f64,
}

impl BoundParams {
    pub fn new(tau: f64, n_min: u64, cap: usize, delta: f64) -> Result<Self, BoundError> {
        Ok(BoundParams { tau, n_min, cap, delta, epsilon: hoeffding_eps(n_min, delta)? })
    }
}

/// The floor itself: `p0_mean − (τ + ε) − C·δ`.
pub fn nondivergence_floor(p0_mean: f64, p: &BoundParams) -> f64 {
    p0_mean - (p.tau + p.epsilon) - (p.cap as f64) * p.delta
}

#[cfg(test)]
mod tests {
    use super::*;

    // frozen from a 30-digit mpmath evaluation of sqrt(ln(2/δ)/(2N))
    pub(crate) const EPS_100_1E3: f64 = 0.194947460352040523337476421483;
    pub(crate) const EPS_20_1E3: f64 = 0.43591577338810769286633794377;

    #[test]
    fn matches_high_precision_reference() {
        assert!((hoeffding_eps(100, 1e-3).unwrap() - EPS_100_1E3).abs() < 1e-12);
        assert!((hoeffding_eps(20, 1e-3).unwrap() - EPS_20_1E3).abs() < 1e-12);
    }

    #[test]
    fn paper_scale_rounding() {
        // the reported values round these to 0.20 and 0.44
        assert!((hoeffding_eps(100, 1e-3).unwrap() - 0.20).abs() < 0.01);
        assert!((hoeffding_eps(20, 1e-3).unwrap() - 0.44).abs() < 0.005);
    }

    #[test]
    fn quarter_sample_doubles_epsilon() {
        let e = hoeffding_eps(400, 1e-3).unwrap();
        let e4 = hoeffding_eps(100, 1e-3).unwrap();
        assert!((e4 / e - 2.0).abs() < 1e-12);
    }

    #[test]
    fn domain_errors() {
        assert!(hoeffding_eps(0, 0.5).is_err());
        assert!(hoeffding_eps(10, 0.0).is_err());
        assert!(hoeffding_eps(10, 1.0).is_err());
        assert!(hoeffding_eps(10, -0.1).is_err());
    }

    #[test]
    fn floor_margin_at_default_knobs() {
        let p = BoundParams::new(0.10, 100, 50, 1e-3).unwrap();
        let margin = 0.10 + EPS_100_1E3 + 50.0 * 1e-3;
        assert!((nondivergence_floor(0.0, &p) + margin).abs() < 1e-12);
        // rounds to 0.345 at three decimals
        assert!((margin - 0.345).abs() < 5e-4);
    }

    #[test]
    fn degenerate_bound_is_p0() {
        let p = BoundParams { tau: 0.0, n_min: 1, cap: 10, delta: 1e-9, epsilon: 0.0 };
        let floor = nondivergence_floor(0.42, &p);
        assert!((floor - (0.42 - 10.0 * 1e-9)).abs() < 1e-15);
        let p0 = BoundParams { tau: 0.0, n_min: 1, cap: 0, delta: 1e-9, epsilon: 0.0 };
        assert_eq!(nondivergence_floor(0.42, &p0), 0.42);
    }

    #[test]
    fn doubling_cap_doubles_only_the_cap_term() {
        let a = BoundParams::new(0.10, 100, 50, 1e-3).unwrap();
        let b = BoundParams::new(0.10, 100, 100, 1e-3).unwrap();
        let fa = nondivergence_floor(0.5, &a);
        let fb = nondivergence_floor(0.5, &b);
        assert!(((fa - fb) - 50.0 * 1e-3).abs() < 1e-12);
    }
}
