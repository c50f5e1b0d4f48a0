//! Entropic risk, its certainty-equivalent form, indifference pricing and
//! the two report metrics (Entropic Loss, Expected Shortfall).
//!
//! All exponential sums are shifted by their maximum before exponentiation.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{HedgeError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RiskSpec {
    /// Risk aversion of the training objective.
    pub lambda: f64,
    /// Expected Shortfall confidence level.
    pub es_alpha: f64,
    /// Aversion used by the Entropic Loss report metric.
    pub loss_aversion: f64,
}

impl Default for RiskSpec {
    fn default() -> Self {
        Self {
            lambda: 1.0,
            es_alpha: 0.9,
            loss_aversion: 1.0,
        }
    }
}

impl RiskSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return Err(HedgeError::Config {
                field: "risk_aversion",
                reason: format!("must be > 0, got {}", self.lambda),
            });
        }
        if !(self.es_alpha > 0.0 && self.es_alpha < 1.0) {
            return Err(HedgeError::Config {
                field: "es_alpha",
                reason: format!("must lie in (0, 1), got {}", self.es_alpha),
            });
        }
        if !(self.loss_aversion > 0.0 && self.loss_aversion.is_finite()) {
            return Err(HedgeError::Config {
                field: "loss_aversion",
                reason: format!("must be > 0, got {}", self.loss_aversion),
            });
        }
        Ok(())
    }
}

fn nonempty(samples: &[f64], what: &str) -> Result<()> {
    if samples.is_empty() {
        return Err(HedgeError::Input(format!("{what} needs at least one sample")));
    }
    Ok(())
}

fn positive(value: f64, field: &'static str) -> Result<()> {
    if !(value > 0.0 && value.is_finite()) {
        return Err(HedgeError::Config {
            field,
            reason: format!("must be > 0, got {value}"),
        });
    }
    Ok(())
}

/// `log(mean(exp(a_i)))` with a max shift.
pub fn log_mean_exp(a: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = a.clone().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    let (sum, n) = a.fold((0.0, 0usize), |(s, n), x| (s + (x - max).exp(), n + 1));
    max + (sum / n as f64).ln()
}

/// `(1/lambda) * log(lambda * mean(exp(-lambda * V)))`.
pub fn entropic_risk(v: &[f64], lambda: f64) -> Result<f64> {
    nonempty(v, "entropic_risk")?;
    positive(lambda, "risk_aversion")?;
    let lme = log_mean_exp(v.iter().map(|x| -lambda * x));
    Ok((lambda.ln() + lme) / lambda)
}

/// Entropic risk together with its derivative in each sample:
/// `d rho / d V_i = -softmax(-lambda V)_i`. The weights sum to `-1`.
pub fn entropic_risk_with_weights(v: &[f64], lambda: f64) -> Result<(f64, Vec<f64>)> {
    let rho = entropic_risk(v, lambda)?;
    let max = v.iter().map(|x| -lambda * x).fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = v.iter().map(|x| (-lambda * x - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    Ok((rho, exps.into_iter().map(|e| -e / total).collect()))
}

/// Minimizer and minimum of `theta + E[exp(lambda (X - theta))] - (1 + ln lambda) / lambda`
/// with `X = -V`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CertaintyEquivalent {
    pub theta: f64,
    pub objective: f64,
}

/// Bisection on the stationarity condition `lambda E[exp(lambda (X - theta))] = 1`,
/// evaluated in log space.
pub fn certainty_equivalent(v: &[f64], lambda: f64) -> Result<CertaintyEquivalent> {
    nonempty(v, "certainty_equivalent")?;
    positive(lambda, "risk_aversion")?;
    let x_min = v.iter().map(|x| -x).fold(f64::INFINITY, f64::min);
    let x_max = v.iter().map(|x| -x).fold(f64::NEG_INFINITY, f64::max);
    let lme = log_mean_exp(v.iter().map(|x| -lambda * x));
    // log of the stationarity residual; decreasing in theta
    let residual = |theta: f64| lambda.ln() + lme - lambda * theta;

    let shift = lambda.ln() / lambda;
    let (mut lo, mut hi) = (x_min + shift, x_max + shift);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if residual(mid) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let theta = 0.5 * (lo + hi);
    let expectation = (lme - lambda * theta).exp();
    let objective = theta + expectation - (1.0 + lambda.ln()) / lambda;
    Ok(CertaintyEquivalent { theta, objective })
}

/// Which sign convention the Entropic Loss uses.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntropicLossSign {
    /// `(1/a) log E[exp(-a PNL)]`: large losses dominate.
    #[default]
    LossAverse,
    /// `(1/a) log E[exp(a PNL)]`, the sign as typeset in the source.
    Printed,
}

pub fn entropic_loss(pnl: &[f64], aversion: f64) -> Result<f64> {
    entropic_loss_with(pnl, aversion, EntropicLossSign::LossAverse)
}

pub fn entropic_loss_with(pnl: &[f64], aversion: f64, sign: EntropicLossSign) -> Result<f64> {
    nonempty(pnl, "entropic_loss")?;
    positive(aversion, "loss_aversion")?;
    let s = match sign {
        EntropicLossSign::LossAverse => -1.0,
        EntropicLossSign::Printed => 1.0,
    };
    Ok(log_mean_exp(pnl.iter().map(|p| s * aversion * p)) / aversion)
}

/// Value at risk and Expected Shortfall of the losses `-PNL`.
///
/// Uses the top `k = ceil((1 - alpha) n)` losses; VaR is the smallest of them.
pub fn expected_shortfall(pnl: &[f64], alpha: f64) -> Result<(f64, f64)> {
    nonempty(pnl, "expected_shortfall")?;
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(HedgeError::Config {
            field: "es_alpha",
            reason: format!("must lie in (0, 1), got {alpha}"),
        });
    }
    let n = pnl.len();
    let mut losses: Vec<f64> = pnl.iter().map(|p| -p).collect();
    losses.sort_by(|a, b| b.total_cmp(a));
    // the small guard keeps e.g. (1 - 0.9) * 10 = 0.99999... at k = 1
    let k = (((1.0 - alpha) * n as f64 - 1e-9).ceil() as usize).clamp(1, n);
    let tail = &losses[..k];
    let es = tail.iter().sum::<f64>() / k as f64;
    Ok((tail[k - 1], es))
}

/// Sample mean and standard deviation (`n - 1` denominator, 0 for `n = 1`).
pub fn mean_std(x: &[f64]) -> Result<(f64, f64)> {
    nonempty(x, "mean_std")?;
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    if x.len() == 1 {
        return Ok((mean, 0.0));
    }
    let ss: f64 = x.iter().map(|v| (v - mean).powi(2)).sum();
    Ok((mean, (ss / (n - 1.0)).sqrt()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub n: usize,
    pub mean: f64,
    pub std: f64,
    pub entropic_risk: f64,
    pub entropic_loss: f64,
    pub var_alpha: f64,
    pub expected_shortfall: f64,
    pub risk: RiskSpec,
}

impl MetricsReport {
    pub fn compute(pnl: &[f64], risk: &RiskSpec) -> Result<Self> {
        risk.validate()?;
        let (mean, std) = mean_std(pnl)?;
        let (var_alpha, expected_shortfall) = expected_shortfall(pnl, risk.es_alpha)?;
        Ok(Self {
            n: pnl.len(),
            mean,
            std,
            entropic_risk: entropic_risk(pnl, risk.lambda)?,
            entropic_loss: entropic_loss(pnl, risk.loss_aversion)?,
            var_alpha,
            expected_shortfall,
            risk: *risk,
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// An optimized risk value plus the settings it was obtained under.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizedRisk {
    pub rho: f64,
    /// Everything that must agree between the two trainings, e.g. data hash,
    /// cost rate, risk aversion, network and trainer settings.
    pub context: BTreeMap<String, String>,
}

/// `q(Z) = rho(with Z) - rho(without Z)`. The two contexts must match.
pub fn indifference_price(with_liability: &OptimizedRisk, without: &OptimizedRisk) -> Result<f64> {
    let keys: std::collections::BTreeSet<&String> =
        with_liability.context.keys().chain(without.context.keys()).collect();
    let differing: Vec<String> = keys
        .into_iter()
        .filter(|k| with_liability.context.get(*k) != without.context.get(*k))
        .map(|k| {
            format!(
                "{k}: {:?} vs {:?}",
                with_liability.context.get(k),
                without.context.get(k)
            )
        })
        .collect();
    if !differing.is_empty() {
        return Err(HedgeError::Comparison(format!(
            "trainings differ beyond the liability: {}",
            differing.join("; ")
        )));
    }
    Ok(with_liability.rho - without.rho)
}
