//! Discrete-time price trajectories of the underlying and the per-step
//! features fed to hedging policies.
//!
//! Paths follow geometric Brownian motion sampled exactly on a uniform grid:
//!
//! ```text
//! P(t_i) = P_0 * exp(mu * t_i + B(t_i) - sigma^2 * t_i / 2),   B(t_i) = sigma * W(t_i)
//! ```
//!
//! Every path draws its Gaussian increments from its own ChaCha stream keyed
//! by `(seed, path_index)`, so results do not depend on how the work is split
//! across threads.

use std::io::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{HedgeError, Result};

/// Daily step in ACT/365 years.
pub const DAY: f64 = 1.0 / 365.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GbmConfig {
    pub p0: f64,
    pub mu: f64,
    pub sigma: f64,
    pub maturity_years: f64,
    pub steps: usize,
    pub n_paths: usize,
    pub seed: u64,
}

impl Default for GbmConfig {
    /// 30 daily steps, unit initial price, zero drift, sigma = 0.1.
    fn default() -> Self {
        Self {
            p0: 1.0,
            mu: 0.0,
            sigma: 0.1,
            maturity_years: 30.0 * DAY,
            steps: 30,
            n_paths: 1000,
            seed: 0,
        }
    }
}

impl GbmConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.p0 > 0.0 && self.p0.is_finite()) {
            return Err(config_err("p0", format!("must be > 0, got {}", self.p0)));
        }
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return Err(config_err("sigma", format!("must be >= 0, got {}", self.sigma)));
        }
        if !self.mu.is_finite() {
            return Err(config_err("mu", "must be finite".into()));
        }
        if !(self.maturity_years > 0.0 && self.maturity_years.is_finite()) {
            return Err(config_err(
                "maturity_years",
                format!("must be > 0, got {}", self.maturity_years),
            ));
        }
        if self.steps < 1 {
            return Err(config_err("steps", "must be >= 1".into()));
        }
        if self.n_paths < 1 {
            return Err(config_err("n_paths", "must be >= 1".into()));
        }
        Ok(())
    }

    pub fn dt(&self) -> f64 {
        self.maturity_years / self.steps as f64
    }
}

fn config_err(field: &'static str, reason: String) -> HedgeError {
    HedgeError::Config { field, reason }
}

/// Uniform time grid `t_0 = 0, ..., t_n = maturity`.
pub fn time_grid(maturity_years: f64, steps: usize) -> Vec<f64> {
    let dt = maturity_years / steps as f64;
    let mut times: Vec<f64> = (0..=steps).map(|i| i as f64 * dt).collect();
    times[steps] = maturity_years;
    times
}

/// A rectangular batch of strictly positive price paths on a shared time grid.
#[derive(Debug, Clone, PartialEq)]
pub struct PathBatch {
    n_paths: usize,
    steps: usize,
    prices: Vec<f64>,
    dt: f64,
    times: Vec<f64>,
    /// Volatility the batch was generated with, or estimated from for real data.
    sigma: f64,
}

impl PathBatch {
    /// Builds a batch from explicit rows. Every row must have `steps + 1`
    /// strictly positive prices.
    pub fn from_rows(rows: &[Vec<f64>], maturity_years: f64, sigma: f64) -> Result<Self> {
        let first = rows
            .first()
            .ok_or_else(|| HedgeError::Input("path batch needs at least one path".into()))?;
        if first.len() < 2 {
            return Err(HedgeError::Input("each path needs at least two prices".into()));
        }
        if !(maturity_years > 0.0) {
            return Err(config_err("maturity_years", "must be > 0".into()));
        }
        let steps = first.len() - 1;
        let mut prices = Vec::with_capacity(rows.len() * (steps + 1));
        for (i, row) in rows.iter().enumerate() {
            if row.len() != steps + 1 {
                return Err(HedgeError::Shape(format!(
                    "path {i} has {} prices, expected {}",
                    row.len(),
                    steps + 1
                )));
            }
            if let Some(bad) = row.iter().find(|p| !(**p > 0.0 && p.is_finite())) {
                return Err(HedgeError::Input(format!(
                    "path {i} contains a non-positive price {bad}"
                )));
            }
            prices.extend_from_slice(row);
        }
        Ok(Self {
            n_paths: rows.len(),
            steps,
            prices,
            dt: maturity_years / steps as f64,
            times: time_grid(maturity_years, steps),
            sigma,
        })
    }

    pub fn n_paths(&self) -> usize {
        self.n_paths
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn maturity(&self) -> f64 {
        self.times[self.steps]
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn prices(&self) -> &[f64] {
        &self.prices
    }

    /// Prices of one path, `steps + 1` entries.
    pub fn path(&self, index: usize) -> &[f64] {
        let w = self.steps + 1;
        &self.prices[index * w..(index + 1) * w]
    }

    pub fn paths(&self) -> impl Iterator<Item = &[f64]> {
        self.prices.chunks_exact(self.steps + 1)
    }

    /// A new batch holding the selected paths, in the given order.
    pub fn select(&self, indices: &[usize]) -> Self {
        let mut prices = Vec::with_capacity(indices.len() * (self.steps + 1));
        for &i in indices {
            prices.extend_from_slice(self.path(i));
        }
        Self {
            n_paths: indices.len(),
            prices,
            ..self.clone_meta()
        }
    }

    fn clone_meta(&self) -> Self {
        Self {
            n_paths: 0,
            steps: self.steps,
            prices: Vec::new(),
            dt: self.dt,
            times: self.times.clone(),
            sigma: self.sigma,
        }
    }

    /// Writes `path_id,step,time,price`, one row per (path, step).
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "path_id,step,time,price")?;
        for (pid, path) in self.paths().enumerate() {
            for (step, price) in path.iter().enumerate() {
                writeln!(out, "{pid},{step},{},{price}", self.times[step])?;
            }
        }
        out.flush()?;
        Ok(())
    }
}

/// Samples `n_paths` GBM trajectories.
pub fn simulate_gbm(config: &GbmConfig) -> Result<PathBatch> {
    config.validate()?;
    let steps = config.steps;
    let dt = config.dt();
    let sqrt_dt = dt.sqrt();
    let times = time_grid(config.maturity_years, steps);
    let half_var = 0.5 * config.sigma * config.sigma;

    let rows: Vec<Vec<f64>> = (0..config.n_paths)
        .into_par_iter()
        .map(|path_index| {
            let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
            rng.set_stream(path_index as u64);
            let mut row = Vec::with_capacity(steps + 1);
            row.push(config.p0);
            let mut brownian = 0.0;
            for &t in &times[1..] {
                let z: f64 = StandardNormal.sample(&mut rng);
                brownian += config.sigma * sqrt_dt * z;
                let exponent = config.mu * t + brownian - half_var * t;
                row.push(config.p0 * exponent.exp());
            }
            row
        })
        .collect();

    let mut prices = Vec::with_capacity(config.n_paths * (steps + 1));
    for row in &rows {
        prices.extend_from_slice(row);
    }
    Ok(PathBatch {
        n_paths: config.n_paths,
        steps,
        prices,
        dt,
        times,
        sigma: config.sigma,
    })
}

/// Which inputs a policy network sees at each step.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureMode {
    /// Append the currently held position as a fourth input.
    pub include_prev_position: bool,
}

impl FeatureMode {
    pub fn dim(&self) -> usize {
        if self.include_prev_position {
            4
        } else {
            3
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FeatureVector {
    pub log_moneyness: f64,
    pub time_to_expiry: f64,
    pub volatility: f64,
    pub prev_position: Option<f64>,
}

impl FeatureVector {
    /// Features from raw market state. No normalisation is applied.
    pub fn new(price: f64, strike: f64, time_to_expiry: f64, sigma: f64) -> Self {
        Self {
            log_moneyness: (price / strike).ln(),
            time_to_expiry: time_to_expiry.max(0.0),
            volatility: sigma,
            prev_position: None,
        }
    }

    pub fn with_prev_position(mut self, prev: Option<f64>) -> Self {
        self.prev_position = prev;
        self
    }

    pub fn dim(&self) -> usize {
        3 + usize::from(self.prev_position.is_some())
    }

    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = vec![self.log_moneyness, self.time_to_expiry, self.volatility];
        if let Some(p) = self.prev_position {
            v.push(p);
        }
        v
    }

    pub fn write_into(&self, buf: &mut Vec<f64>) {
        buf.clear();
        buf.extend_from_slice(&[self.log_moneyness, self.time_to_expiry, self.volatility]);
        if let Some(p) = self.prev_position {
            buf.push(p);
        }
    }
}

/// Features of `batch[path_index]` at `step_index`. `prev_position` is only
/// included when supplied.
pub fn features_at(
    batch: &PathBatch,
    path_index: usize,
    step_index: usize,
    strike: f64,
    sigma: f64,
    prev_position: Option<f64>,
) -> Result<FeatureVector> {
    if path_index >= batch.n_paths {
        return Err(HedgeError::Bounds {
            what: "path_index",
            index: path_index,
            len: batch.n_paths,
        });
    }
    if step_index > batch.steps {
        return Err(HedgeError::Bounds {
            what: "step_index",
            index: step_index,
            len: batch.steps + 1,
        });
    }
    if !(strike > 0.0) {
        return Err(HedgeError::Input(format!("strike must be > 0, got {strike}")));
    }
    let price = batch.path(path_index)[step_index];
    let tau = batch.maturity() - batch.times[step_index];
    Ok(FeatureVector::new(price, strike, tau, sigma).with_prev_position(prev_position))
}
