//! Nested training on a linearized objective, and a plain backprop
//! baseline.
//!
//! An outer iteration caches per-sample head gradients at the anchor `w^r`,
//! evaluates the exact PNL `V^r` and the risk weights `rho'(V^r)`, then takes
//! up to `N` inner steps on the linearized, squared-cost PNL `V_hat`.
//!
//! Positions are differentiated with a straight-through rule for the band
//! clamp: a position clamped to an edge moves with that edge's head, a
//! position left unchanged keeps the dependence of the trade that set it.

mod cache;

use std::io::Write;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use cache::{cache_bytes, check_budget, GradientCache, LinGradVariant, PathCache};
use cache::{sum_in_order, SUM_CHUNK};

use crate::error::{HedgeError, Result};
use crate::hedging::{
    evaluate_batch, pnl_with_liability, rollout_with, CostSpec, PolicyConfig, PolicyMode, PositionLink,
};
use crate::instruments::payoff;
use crate::market_paths::PathBatch;
use crate::neural_net::{AdamState, Mlp, ParamVector, Workspace};
use crate::risk::{entropic_loss, entropic_risk_with_weights, expected_shortfall, RiskSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    /// Cached gradients, inner steps on the linearized objective.
    Dhlnn,
    /// One Adam step per minibatch on the exact PNL gradient.
    Plain,
}

/// How inner steps turn the risk gradient into a parameter update.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InnerUpdate {
    /// Adam consumes the anchor gradient once per outer iteration; every
    /// inner step uses that Adam direction with the first moment refreshed
    /// by the current inner gradient, under the same preconditioner.
    #[default]
    Adam,
    /// `w <- w - lr * sum_i rho'_i grad V_hat_i`.
    Sgd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainerConfig {
    pub mode: TrainMode,
    /// Outer iterations per minibatch.
    pub outer_iterations: usize,
    pub inner_iterations: usize,
    pub lr: f64,
    /// Inner loop stops once the Euclidean step norm drops below this.
    pub tolerance: f64,
    pub risk: RiskSpec,
    pub batch_paths: usize,
    pub epochs: usize,
    pub seed: u64,
    pub lin_grad: LinGradVariant,
    pub inner_update: InnerUpdate,
    pub budget_bytes: u64,
    /// Train against `-Z` (true) or hedge the bare portfolio (false).
    pub include_liability: bool,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        Self {
            mode: TrainMode::Dhlnn,
            outer_iterations: 1,
            inner_iterations: 5,
            lr: 1e-3,
            tolerance: 1e-6,
            risk: RiskSpec::default(),
            batch_paths: 100,
            epochs: 10,
            seed: 0,
            lin_grad: LinGradVariant::FullQuadratic,
            inner_update: InnerUpdate::Adam,
            budget_bytes: 1 << 30,
            include_liability: true,
        }
    }
}

impl TrainerConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &'static str, reason: &str| {
            Err(HedgeError::Config {
                field,
                reason: reason.to_string(),
            })
        };
        if self.outer_iterations == 0 {
            return bad("outer_iterations", "must be >= 1");
        }
        if self.inner_iterations == 0 {
            return bad("inner_iterations", "must be >= 1");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr", "must be > 0");
        }
        if !(self.tolerance >= 0.0) {
            return bad("tolerance", "must be >= 0");
        }
        if self.batch_paths == 0 {
            return bad("batch_paths", "must be >= 1");
        }
        self.risk.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub rho: f64,
    pub mean_pnl: f64,
    pub entropic_loss: f64,
    pub expected_shortfall: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingCurve {
    pub records: Vec<EpochRecord>,
}

impl TrainingCurve {
    pub fn last(&self) -> Option<&EpochRecord> {
        self.records.last()
    }

    /// `epoch,rho,mean_pnl,entropic_loss,expected_shortfall,seconds`.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "epoch,rho,mean_pnl,entropic_loss,expected_shortfall,seconds")?;
        for r in &self.records {
            writeln!(
                out,
                "{},{},{},{},{},{}",
                r.epoch, r.rho, r.mean_pnl, r.entropic_loss, r.expected_shortfall, r.seconds
            )?;
        }
        Ok(())
    }
}

/// Parameters plus optimizer state; enough to resume training.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub params: ParamVector,
    pub adam: AdamState,
    pub epochs_completed: usize,
}

impl TrainState {
    pub fn fresh(net: &Mlp, lr: f64) -> Self {
        let params = net.init();
        let adam = AdamState::with_lr(params.len(), lr);
        Self {
            params,
            adam,
            epochs_completed: 0,
        }
    }
}

/// Everything a training run needs apart from its state.
#[derive(Debug, Clone, Copy)]
pub struct TrainingProblem<'a> {
    pub net: &'a Mlp,
    pub data: &'a PathBatch,
    pub policy: &'a PolicyConfig,
    pub cost: CostSpec,
}

/// Exact PNL at `w^r` for every path of `batch`.
pub fn eval_pnl_at_anchor(
    net: &Mlp,
    params: &[f64],
    batch: &PathBatch,
    policy: &PolicyConfig,
    cost: CostSpec,
) -> Result<Vec<f64>> {
    Ok(evaluate_batch(Some(net), params, batch, policy, cost, true)?
        .into_iter()
        .map(|s| s.v)
        .collect())
}

/// `(rho, d rho / d V_i)` for the entropic risk.
pub fn risk_derivative_weights(v: &[f64], lambda: f64) -> Result<(f64, Vec<f64>)> {
    entropic_risk_with_weights(v, lambda)
}

/// `w - lr * sum_i weights_i * grads_i`.
pub fn inner_step(w: &[f64], lr: f64, weights: &[f64], grads: &[Vec<f64>]) -> Result<Vec<f64>> {
    if weights.len() != grads.len() {
        return Err(HedgeError::Shape(format!(
            "{} weights for {} gradients",
            weights.len(),
            grads.len()
        )));
    }
    let mut next = w.to_vec();
    for (wt, g) in weights.iter().zip(grads) {
        if g.len() != w.len() {
            return Err(HedgeError::Shape(format!(
                "gradient of length {} for {} parameters",
                g.len(),
                w.len()
            )));
        }
        for (n, gi) in next.iter_mut().zip(g) {
            *n -= lr * wt * gi;
        }
    }
    Ok(next)
}

/// Training-set metrics for one curve record (seconds left at 0).
pub fn curve_point(
    problem: &TrainingProblem<'_>,
    params: &[f64],
    config: &TrainerConfig,
    epoch: usize,
) -> Result<EpochRecord> {
    let pnl: Vec<f64> = evaluate_batch(
        Some(problem.net),
        params,
        problem.data,
        problem.policy,
        problem.cost,
        config.include_liability,
    )?
    .into_iter()
    .map(|s| s.v)
    .collect();
    let (rho, _) = entropic_risk_with_weights(&pnl, config.risk.lambda)?;
    let mean_pnl = pnl.iter().sum::<f64>() / pnl.len() as f64;
    Ok(EpochRecord {
        epoch,
        rho,
        mean_pnl,
        entropic_loss: entropic_loss(&pnl, config.risk.loss_aversion)?,
        expected_shortfall: expected_shortfall(&pnl, config.risk.es_alpha)?.1,
        seconds: 0.0,
    })
}

/// Trains until `state.epochs_completed == config.epochs`, returning the
/// records of the epochs run by this call.
///
/// Minibatch order in epoch `e` depends only on `(config.seed, e)`, so a run
/// resumed from a saved state reproduces the uninterrupted run.
pub fn train(
    config: &TrainerConfig,
    problem: &TrainingProblem<'_>,
    mut state: TrainState,
) -> Result<(TrainState, TrainingCurve)> {
    config.validate()?;
    if problem.policy.mode == PolicyMode::BsDelta {
        return Err(HedgeError::Config {
            field: "mode",
            reason: "bs_delta requires no training".into(),
        });
    }
    if state.params.layout != problem.net.layout() || state.adam.len() != state.params.len() {
        return Err(HedgeError::CacheStale(
            "training state does not match the network layout".into(),
        ));
    }
    let data = problem.data;
    let batch_size = config.batch_paths.min(data.n_paths());
    if config.mode == TrainMode::Dhlnn {
        check_budget(
            batch_size,
            data.steps(),
            problem.net.heads(),
            problem.net.param_len(),
            config.budget_bytes,
        )?;
    }

    let mut curve = TrainingCurve::default();
    while state.epochs_completed < config.epochs {
        let epoch = state.epochs_completed + 1;
        let started = Instant::now();
        let mut order: Vec<usize> = (0..data.n_paths()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(epoch as u64);
        order.shuffle(&mut rng);

        for (b, chunk) in order.chunks(config.batch_paths).enumerate() {
            let minibatch = data.select(chunk);
            for r in 0..config.outer_iterations {
                let iteration = b * config.outer_iterations + r;
                let at = |detail: String| HedgeError::Divergence {
                    epoch,
                    iteration,
                    detail,
                };
                let next = match config.mode {
                    TrainMode::Dhlnn => dhlnn_outer(config, problem, &minibatch, &state.params, &mut state.adam)
                        .map_err(|e| divergence_or(e, &at))?,
                    TrainMode::Plain => plain_step(config, problem, &minibatch, &state.params, &mut state.adam)
                        .map_err(|e| divergence_or(e, &at))?,
                };
                if let Some(i) = next.iter().position(|v| !v.is_finite()) {
                    return Err(at(format!("parameter {i} became non-finite")));
                }
                state.params = state.params.with_values(next)?;
            }
        }

        let mut record = curve_point(problem, &state.params.values, config, epoch)?;
        if !record.rho.is_finite() {
            return Err(HedgeError::Divergence {
                epoch,
                iteration: 0,
                detail: format!("training risk is {}", record.rho),
            });
        }
        record.seconds = started.elapsed().as_secs_f64();
        curve.records.push(record);
        state.epochs_completed = epoch;
    }
    Ok((state, curve))
}

/// Degenerate-input errors raised mid-training are reported as divergence.
fn divergence_or(err: HedgeError, at: &impl Fn(String) -> HedgeError) -> HedgeError {
    match err {
        HedgeError::Degenerate(detail) => at(detail),
        other => other,
    }
}

fn check_pnl(v: &[f64]) -> Result<()> {
    match v.iter().position(|x| !x.is_finite()) {
        Some(i) => Err(HedgeError::Degenerate(format!("PNL of path {i} is {}", v[i]))),
        None => Ok(()),
    }
}

/// One outer iteration; returns `w^{r+1}`.
fn dhlnn_outer(
    config: &TrainerConfig,
    problem: &TrainingProblem<'_>,
    minibatch: &PathBatch,
    params: &ParamVector,
    adam: &mut AdamState,
) -> Result<Vec<f64>> {
    let cache = GradientCache::build(
        problem.net,
        params,
        minibatch,
        problem.policy,
        problem.cost,
        config.include_liability,
        config.budget_bytes,
    )?;
    let v_r = cache.anchor_pnl();
    check_pnl(&v_r)?;
    let (_, weights) = risk_derivative_weights(&v_r, config.risk.lambda)?;

    let mut w = params.values.clone();
    let g0 = cache.weighted_grad(&w, &weights, config.lin_grad)?;
    let adam_terms = match config.inner_update {
        InnerUpdate::Adam => {
            let (direction, precond) = adam.advance(&g0)?;
            let c1 = 1.0 - adam.beta1.powi(i32::try_from(adam.t).unwrap_or(i32::MAX));
            Some((direction, precond, (1.0 - adam.beta1) / c1))
        }
        InnerUpdate::Sgd => None,
    };

    for j in 0..config.inner_iterations {
        let g = if j == 0 {
            g0.clone()
        } else {
            cache.weighted_grad(&w, &weights, config.lin_grad)?
        };
        let step: Vec<f64> = match &adam_terms {
            Some((direction, precond, m_scale)) => direction
                .iter()
                .zip(precond)
                .zip(g.iter().zip(&g0))
                .map(|((d, p), (gj, g0))| config.lr * (d + m_scale * p * (gj - g0)))
                .collect(),
            None => g.iter().map(|gj| config.lr * gj).collect(),
        };
        let norm = step.iter().map(|s| s * s).sum::<f64>().sqrt();
        for (wi, s) in w.iter_mut().zip(&step) {
            *wi -= s;
        }
        if norm < config.tolerance {
            break;
        }
    }
    Ok(w)
}

/// Exact gradient of the batch entropic risk through the realized positions,
/// followed by one Adam step. `|0|` has subgradient 0.
fn plain_step(
    config: &TrainerConfig,
    problem: &TrainingProblem<'_>,
    minibatch: &PathBatch,
    params: &ParamVector,
    adam: &mut AdamState,
) -> Result<Vec<f64>> {
    let net = problem.net;
    let policy = problem.policy;
    let w = &params.values;
    let c = problem.cost.rate;

    struct PathTrace {
        inputs: Vec<Vec<f64>>,
        beta: Vec<f64>,
        v: f64,
    }

    let traces = (0..minibatch.n_paths())
        .into_par_iter()
        .map_init(Workspace::default, |ws, i| {
            let t = rollout_with(Some(net), w, minibatch, i, policy, ws)?;
            let path = minibatch.path(i);
            let z = if config.include_liability {
                payoff(&policy.option, path)?
            } else {
                0.0
            };
            let v = pnl_with_liability(path, &t.trajectory, z, problem.cost)?.v;
            let d = &t.trajectory.deltas;
            let n = d.len();
            let sgn = |x: f64| {
                if x > 0.0 {
                    1.0
                } else if x < 0.0 {
                    -1.0
                } else {
                    0.0
                }
            };
            let mut beta = vec![0.0; n * t.heads];
            for (k, link) in t.links.iter().enumerate() {
                let PositionLink::Head { step, head, sign, .. } = *link else {
                    continue;
                };
                let prev = if k == 0 {
                    t.trajectory.initial_position
                } else {
                    d[k - 1]
                };
                let mut alpha = path[k + 1] - path[k] - c * path[k] * sgn(d[k] - prev);
                if k + 1 < n {
                    alpha += c * path[k + 1] * sgn(d[k + 1] - d[k]);
                }
                beta[step * t.heads + head] += sign * alpha;
            }
            Ok(PathTrace {
                inputs: t.inputs,
                beta,
                v,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let v: Vec<f64> = traces.iter().map(|t| t.v).collect();
    check_pnl(&v)?;
    let (_, weights) = risk_derivative_weights(&v, config.risk.lambda)?;

    let p = net.param_len();
    let heads = net.heads();
    let partials: Vec<Vec<f64>> = traces
        .par_chunks(SUM_CHUNK)
        .zip(weights.par_chunks(SUM_CHUNK))
        .map(|(chunk, ws)| -> Result<Vec<f64>> {
            let mut acc = vec![0.0; p];
            let mut scratch = vec![0.0; heads * p];
            let mut work = Workspace::default();
            for (t, &wt) in chunk.iter().zip(ws) {
                for (step, x) in t.inputs.iter().enumerate() {
                    let b = &t.beta[step * heads..(step + 1) * heads];
                    if b.iter().all(|&v| v == 0.0) {
                        continue;
                    }
                    net.backward_into(w, x, &mut work, &mut scratch)?;
                    for (h, &bh) in b.iter().enumerate() {
                        if bh == 0.0 {
                            continue;
                        }
                        let coeff = wt * bh;
                        for (a, g) in acc.iter_mut().zip(&scratch[h * p..(h + 1) * p]) {
                            *a += coeff * g;
                        }
                    }
                }
            }
            Ok(acc)
        })
        .collect::<Result<Vec<_>>>()?;
    let grad = sum_in_order(partials, p);

    let mut next = w.clone();
    adam.step(&mut next, &grad)?;
    Ok(next)
}
