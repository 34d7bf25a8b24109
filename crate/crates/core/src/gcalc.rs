//! Volatility ambiguity band and the generator functions `G` and `G̲`.

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum BoundsError {
    #[error("volatility bounds must satisfy 0 < sigma_lower <= sigma_upper < inf, got [{lower}, {upper}]")]
    Invalid { lower: f64, upper: f64 },
}

/// The band `[σ̲, σ̄]` of admissible volatilities.
///
/// Stored as volatilities; the variance band `[σ̲², σ̄²]` that bounds the
/// quadratic-variation density is squared on demand.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AmbiguityBounds {
    sigma_lower: f64,
    sigma_upper: f64,
}

impl AmbiguityBounds {
    pub fn new(sigma_lower: f64, sigma_upper: f64) -> Result<Self, BoundsError> {
        if sigma_lower > 0.0 && sigma_lower <= sigma_upper && sigma_upper.is_finite() {
            Ok(Self {
                sigma_lower,
                sigma_upper,
            })
        } else {
            Err(BoundsError::Invalid {
                lower: sigma_lower,
                upper: sigma_upper,
            })
        }
    }

    /// No ambiguity: a single volatility.
    pub fn classical(sigma: f64) -> Result<Self, BoundsError> {
        Self::new(sigma, sigma)
    }

    pub fn sigma_lower(&self) -> f64 {
        self.sigma_lower
    }

    pub fn sigma_upper(&self) -> f64 {
        self.sigma_upper
    }

    /// `σ̲²`
    pub fn var_lower(&self) -> f64 {
        self.sigma_lower * self.sigma_lower
    }

    /// `σ̄²`
    pub fn var_upper(&self) -> f64 {
        self.sigma_upper * self.sigma_upper
    }

    pub fn is_classical(&self) -> bool {
        self.sigma_lower == self.sigma_upper
    }

    /// Clamps a variance rate into `[σ̲², σ̄²]`.
    pub fn clamp_var(&self, v: f64) -> f64 {
        v.clamp(self.var_lower(), self.var_upper())
    }

    /// `G(α) = ½(σ̄²α⁺ − σ̲²α⁻)`, the upper generator.
    pub fn g_upper(&self, alpha: f64) -> f64 {
        g_upper(alpha, self)
    }

    /// `G̲(α) = ½(σ̲²α⁺ − σ̄²α⁻)`, the lower generator.
    pub fn g_lower(&self, alpha: f64) -> f64 {
        g_lower(alpha, self)
    }
}

pub fn g_upper(alpha: f64, b: &AmbiguityBounds) -> f64 {
    0.5 * (b.var_upper() * alpha.max(0.0) - b.var_lower() * (-alpha).max(0.0))
}

pub fn g_lower(alpha: f64, b: &AmbiguityBounds) -> f64 {
    0.5 * (b.var_lower() * alpha.max(0.0) - b.var_upper() * (-alpha).max(0.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn rejects_bad_bounds() {
        assert!(AmbiguityBounds::new(0.0, 1.0).is_err());
        assert!(AmbiguityBounds::new(-0.5, 1.0).is_err());
        assert!(AmbiguityBounds::new(1.0, 0.5).is_err());
        assert!(AmbiguityBounds::new(0.5, f64::INFINITY).is_err());
        assert!(AmbiguityBounds::new(f64::NAN, 1.0).is_err());
        assert!(AmbiguityBounds::new(0.5, 0.5).is_ok());
    }

    #[test]
    fn upper_examples() {
        let b = AmbiguityBounds::new(0.5, 1.0).unwrap();
        assert_eq!(g_upper(2.0, &b), 1.0);
        assert_eq!(g_upper(0.0, &b), 0.0);
        assert_eq!(g_upper(-2.0, &b), -0.25);
    }

    #[test]
    fn lower_examples() {
        let b = AmbiguityBounds::new(0.5, 1.0).unwrap();
        assert_eq!(g_lower(2.0, &b), 0.25);
        assert_eq!(g_lower(0.0, &b), 0.0);
        assert_eq!(g_lower(-2.0, &b), -1.0);
    }

    #[test]
    fn classical_collapse() {
        let b = AmbiguityBounds::classical(0.7).unwrap();
        for a in [-3.0, -0.1, 0.0, 0.4, 9.0] {
            assert_eq!(g_upper(a, &b), g_lower(a, &b));
            assert_eq!(g_upper(a, &b), 0.5 * a * 0.7 * 0.7);
        }
    }

    proptest! {
        #[test]
        fn sandwich_over_band(a in -100.0f64..100.0, lo in 0.01f64..2.0, w in 0.0f64..2.0, s in 0.0f64..=1.0) {
            let b = AmbiguityBounds::new(lo, lo + w).unwrap();
            let v = b.var_lower() + s * (b.var_upper() - b.var_lower());
            let v = b.clamp_var(v);
            prop_assert!(g_lower(a, &b) <= 0.5 * a * v);
            prop_assert!(0.5 * a * v <= g_upper(a, &b));
        }

        #[test]
        fn lower_is_superadditive(a in -50.0f64..50.0, c in -50.0f64..50.0) {
            let b = AmbiguityBounds::new(0.3, 1.1).unwrap();
            prop_assert!(g_lower(a + c, &b) >= g_lower(a, &b) + g_lower(c, &b) - 1e-12);
            prop_assert!(g_upper(a + c, &b) <= g_upper(a, &b) + g_upper(c, &b) + 1e-12);
        }
    }
}
