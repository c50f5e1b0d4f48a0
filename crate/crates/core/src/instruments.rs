//! Option payoffs and the Black-Scholes delta used as the hedging anchor.
//!
//! Rates and dividends are zero throughout.

use serde::{Deserialize, Serialize};

use crate::error::{HedgeError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptionKind {
    EuropeanCall,
    LookbackCall,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptionSpec {
    pub kind: OptionKind,
    pub strike: f64,
    pub maturity_years: f64,
}

impl OptionSpec {
    pub fn new(kind: OptionKind, strike: f64, maturity_years: f64) -> Result<Self> {
        let spec = Self {
            kind,
            strike,
            maturity_years,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn european(strike: f64, maturity_years: f64) -> Result<Self> {
        Self::new(OptionKind::EuropeanCall, strike, maturity_years)
    }

    pub fn lookback(strike: f64, maturity_years: f64) -> Result<Self> {
        Self::new(OptionKind::LookbackCall, strike, maturity_years)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.strike > 0.0 && self.strike.is_finite()) {
            return Err(HedgeError::Config {
                field: "strike",
                reason: format!("must be > 0, got {}", self.strike),
            });
        }
        if !(self.maturity_years > 0.0 && self.maturity_years.is_finite()) {
            return Err(HedgeError::Config {
                field: "maturity_years",
                reason: format!("must be > 0, got {}", self.maturity_years),
            });
        }
        Ok(())
    }
}

/// Liability owed at maturity on `path`.
pub fn payoff(spec: &OptionSpec, path: &[f64]) -> Result<f64> {
    let last = *path
        .last()
        .ok_or_else(|| HedgeError::Input("payoff needs a nonempty path".into()))?;
    let reference = match spec.kind {
        OptionKind::EuropeanCall => last,
        OptionKind::LookbackCall => path.iter().copied().fold(f64::NEG_INFINITY, f64::max),
    };
    Ok((reference - spec.strike).max(0.0))
}

/// Standardized moneyness `[ln(P/K) + sigma^2 tau / 2] / (sigma sqrt(tau))`.
///
/// Returns [`HedgeError::Degenerate`] when `sigma <= 0` or `tau <= 0`;
/// [`bs_delta`] handles that limit itself.
pub fn bs_standardized(price: f64, strike: f64, sigma: f64, tau: f64) -> Result<f64> {
    if !(sigma > 0.0) || !(tau > 0.0) {
        return Err(HedgeError::Degenerate(format!(
            "sigma = {sigma}, tau = {tau}; both must be positive"
        )));
    }
    let vol = sigma * tau.sqrt();
    Ok(((price / strike).ln() + 0.5 * sigma * sigma * tau) / vol)
}

/// Which reading of the delta formula to use.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DeltaVariant {
    /// `Phi(bs) = (1 + erf(bs / sqrt 2)) / 2`, the textbook call delta.
    #[default]
    Standard,
    /// `(1 + erf(bs)) / 2`, the formula exactly as printed in the source
    /// derivation. Equals `Phi(bs * sqrt 2)`.
    PaperLiteral,
}

/// Standard normal CDF via `erfc` so both tails keep full relative accuracy.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x * std::f64::consts::FRAC_1_SQRT_2)
}

/// Black-Scholes call delta in `[0, 1]`.
///
/// With no time or no volatility left the delta is the step function
/// `1{P > K}`, and `0.5` at the money.
pub fn bs_delta(price: f64, strike: f64, sigma: f64, tau: f64, variant: DeltaVariant) -> f64 {
    match bs_standardized(price, strike, sigma, tau) {
        Ok(bs) => match variant {
            DeltaVariant::Standard => normal_cdf(bs),
            DeltaVariant::PaperLiteral => 0.5 * libm::erfc(-bs),
        },
        Err(_) => {
            if price > strike {
                1.0
            } else if price < strike {
                0.0
            } else {
                0.5
            }
        }
    }
}
