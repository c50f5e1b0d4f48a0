//! Policy rollouts, the no-trade band around the Black-Scholes delta, and
//! self-financed PNL with proportional costs.
//!
//! Timing: the position `delta[i]` is held over `[t_i, t_{i+1})` and is
//! chosen from information at `t_i`. The first trade is charged against an
//! initial position (0 by default). There is no liquidation at maturity.

use std::io::Write;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{HedgeError, Result};
use crate::instruments::{bs_delta, payoff, DeltaVariant, OptionSpec};
use crate::market_paths::{FeatureMode, FeatureVector, PathBatch};
use crate::neural_net::{Mlp, Workspace};

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct CostSpec {
    pub rate: f64,
}

impl CostSpec {
    pub fn new(rate: f64) -> Result<Self> {
        if !(rate >= 0.0 && rate.is_finite()) {
            return Err(HedgeError::Config {
                field: "cost",
                reason: format!("must be >= 0, got {rate}"),
            });
        }
        Ok(Self { rate })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PositionTrajectory {
    pub deltas: Vec<f64>,
    pub initial_position: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AnchorBand {
    pub lower: f64,
    pub upper: f64,
}

/// `[delta_bs - lower_width, delta_bs + upper_width]`.
pub fn anchor_band(delta_bs: f64, lower_width: f64, upper_width: f64) -> Result<AnchorBand> {
    if !(lower_width >= 0.0) || !(upper_width >= 0.0) {
        return Err(HedgeError::ContractViolation(format!(
            "band widths must be >= 0, got ({lower_width}, {upper_width})"
        )));
    }
    Ok(AnchorBand {
        lower: delta_bs - lower_width,
        upper: delta_bs + upper_width,
    })
}

/// Moves `prev` to the nearest point of the band; unchanged when inside.
pub fn clamp_position(prev: f64, band: AnchorBand) -> f64 {
    prev.max(band.lower).min(band.upper)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PnlSample {
    pub v: f64,
    pub liability: f64,
    pub trading_gain: f64,
    pub total_cost: f64,
}

/// `V = -Z + sum delta_i (P_{i+1} - P_i) - c sum |delta_i - delta_{i-1}| P_i`,
/// with `delta_{-1}` the initial position. Sums run left to right and
/// `v` is formed as `(-Z + gain) - cost`.
pub fn compute_pnl(
    path: &[f64],
    positions: &PositionTrajectory,
    spec: &OptionSpec,
    cost: CostSpec,
) -> Result<PnlSample> {
    let liability = payoff(spec, path)?;
    pnl_with_liability(path, positions, liability, cost)
}

pub(crate) fn pnl_with_liability(
    path: &[f64],
    positions: &PositionTrajectory,
    liability: f64,
    cost: CostSpec,
) -> Result<PnlSample> {
    let steps = positions.deltas.len();
    if path.len() != steps + 1 {
        return Err(HedgeError::Shape(format!(
            "{} positions need a path of {} prices, got {}",
            steps,
            steps + 1,
            path.len()
        )));
    }
    let mut gain = 0.0;
    let mut traded = 0.0;
    let mut prev = positions.initial_position;
    for (i, &d) in positions.deltas.iter().enumerate() {
        gain += d * (path[i + 1] - path[i]);
        traded += (d - prev).abs() * path[i];
        prev = d;
    }
    let total_cost = cost.rate * traded;
    Ok(PnlSample {
        v: -liability + gain - total_cost,
        liability,
        trading_gain: gain,
        total_cost,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyMode {
    /// Band around the delta; trained with the nested linearized scheme.
    DhlnnBand,
    /// Same band policy; trained with plain backprop.
    NtbBand,
    /// The network output is the position.
    DirectMlp,
    /// Pure Black-Scholes delta hedging.
    BsDelta,
}

impl PolicyMode {
    pub fn is_band(self) -> bool {
        matches!(self, PolicyMode::DhlnnBand | PolicyMode::NtbBand)
    }

    pub fn needs_network(self) -> bool {
        self != PolicyMode::BsDelta
    }

    pub fn as_str(self) -> &'static str {
        match self {
            PolicyMode::DhlnnBand => "dhlnn",
            PolicyMode::NtbBand => "ntb_plain",
            PolicyMode::DirectMlp => "direct_plain",
            PolicyMode::BsDelta => "bs_delta",
        }
    }
}

impl FromStr for PolicyMode {
    type Err = HedgeError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dhlnn" | "dhlnn_band" => Ok(PolicyMode::DhlnnBand),
            "ntb" | "ntb_plain" | "ntb_band" => Ok(PolicyMode::NtbBand),
            "direct" | "direct_plain" | "direct_mlp" => Ok(PolicyMode::DirectMlp),
            "bs_delta" | "bsdh" => Ok(PolicyMode::BsDelta),
            other => Err(HedgeError::Config {
                field: "mode",
                reason: format!("unknown mode {other:?}; expected dhlnn, ntb_plain, direct_plain or bs_delta"),
            }),
        }
    }
}

impl std::fmt::Display for PolicyMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Everything a rollout needs apart from the network and the path.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PolicyConfig {
    pub mode: PolicyMode,
    pub option: OptionSpec,
    /// Volatility fed to the delta anchor and the network features.
    pub feature_sigma: f64,
    pub delta_variant: DeltaVariant,
    pub features: FeatureMode,
    pub initial_position: f64,
}

impl PolicyConfig {
    pub fn new(mode: PolicyMode, option: OptionSpec, feature_sigma: f64) -> Self {
        Self {
            mode,
            option,
            feature_sigma,
            delta_variant: DeltaVariant::Standard,
            features: FeatureMode::default(),
            initial_position: 0.0,
        }
    }

    fn check_network(&self, net: Option<&Mlp>) -> Result<()> {
        if !self.mode.needs_network() {
            return Ok(());
        }
        let net = net.ok_or_else(|| HedgeError::Config {
            field: "mode",
            reason: format!("{} needs a network", self.mode),
        })?;
        if net.spec().input_dim != self.features.dim() {
            return Err(HedgeError::Shape(format!(
                "network takes {} inputs, feature mode produces {}",
                net.spec().input_dim,
                self.features.dim()
            )));
        }
        if self.mode == PolicyMode::DirectMlp && net.heads() != 1 {
            return Err(HedgeError::Config {
                field: "heads",
                reason: "direct_plain uses a single-head network".into(),
            });
        }
        Ok(())
    }
}

/// How a realized position depends on the network.
///
/// `Head` means `position = offset + sign * f_head(x_step)`. Band modes
/// produce `Head` links when the clamp hits an edge and repeat the previous
/// link when no trade happens, which gives the straight-through gradient of
/// the clamp.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PositionLink {
    Fixed(f64),
    Head {
        step: usize,
        head: usize,
        sign: f64,
        offset: f64,
    },
}

impl PositionLink {
    pub fn value(&self, mut outputs: impl FnMut(usize, usize) -> f64) -> f64 {
        match *self {
            PositionLink::Fixed(v) => v,
            PositionLink::Head {
                step,
                head,
                sign,
                offset,
            } => offset + sign * outputs(step, head),
        }
    }
}

/// A rollout together with the network outputs it used.
#[derive(Debug, Clone, PartialEq)]
pub struct TracedRollout {
    pub trajectory: PositionTrajectory,
    pub links: Vec<PositionLink>,
    /// Network inputs per step (empty for `bs_delta`).
    pub inputs: Vec<Vec<f64>>,
    /// Head outputs per step, `steps x heads`.
    pub outputs: Vec<f64>,
    pub heads: usize,
}

/// Positions for one path of `batch`.
pub fn rollout(
    net: Option<&Mlp>,
    params: &[f64],
    batch: &PathBatch,
    path_index: usize,
    config: &PolicyConfig,
) -> Result<PositionTrajectory> {
    rollout_traced(net, params, batch, path_index, config).map(|t| t.trajectory)
}

pub fn rollout_traced(
    net: Option<&Mlp>,
    params: &[f64],
    batch: &PathBatch,
    path_index: usize,
    config: &PolicyConfig,
) -> Result<TracedRollout> {
    let mut ws = Workspace::default();
    rollout_with(net, params, batch, path_index, config, &mut ws)
}

pub(crate) fn rollout_with(
    net: Option<&Mlp>,
    params: &[f64],
    batch: &PathBatch,
    path_index: usize,
    config: &PolicyConfig,
    ws: &mut Workspace,
) -> Result<TracedRollout> {
    config.check_network(net)?;
    if path_index >= batch.n_paths() {
        return Err(HedgeError::Bounds {
            what: "path_index",
            index: path_index,
            len: batch.n_paths(),
        });
    }
    let path = batch.path(path_index);
    let times = batch.times();
    let steps = batch.steps();
    let strike = config.option.strike;
    let sigma = config.feature_sigma;
    let heads = net.map_or(0, Mlp::heads);

    let mut deltas = Vec::with_capacity(steps);
    let mut links = Vec::with_capacity(steps);
    let mut inputs = Vec::new();
    let mut outputs = Vec::with_capacity(steps * heads);
    let mut prev = config.initial_position;
    let mut prev_link = PositionLink::Fixed(prev);
    let mut x = Vec::with_capacity(4);

    for i in 0..steps {
        let tau = batch.maturity() - times[i];
        let anchor = bs_delta(path[i], strike, sigma, tau, config.delta_variant);
        let (delta, link) = match (config.mode, net) {
            (PolicyMode::BsDelta, _) => (anchor, PositionLink::Fixed(anchor)),
            (mode, Some(net)) => {
                let prev_feature = config.features.include_prev_position.then_some(prev);
                FeatureVector::new(path[i], strike, tau, sigma)
                    .with_prev_position(prev_feature)
                    .write_into(&mut x);
                let out = net.forward_with(params, &x, ws)?;
                outputs.extend_from_slice(out.as_slice());
                inputs.push(x.clone());
                if mode == PolicyMode::DirectMlp {
                    let d = out.get(0);
                    let link = PositionLink::Head {
                        step: i,
                        head: 0,
                        sign: 1.0,
                        offset: 0.0,
                    };
                    (d, link)
                } else {
                    let upper_head = heads - 1;
                    let band = anchor_band(anchor, out.get(0), out.get(upper_head))?;
                    let next = clamp_position(prev, band);
                    let link = if prev < band.lower {
                        PositionLink::Head {
                            step: i,
                            head: 0,
                            sign: -1.0,
                            offset: anchor,
                        }
                    } else if prev > band.upper {
                        PositionLink::Head {
                            step: i,
                            head: upper_head,
                            sign: 1.0,
                            offset: anchor,
                        }
                    } else {
                        prev_link
                    };
                    (next, link)
                }
            }
            (_, None) => unreachable!("checked by check_network"),
        };
        if !delta.is_finite() {
            return Err(HedgeError::Degenerate(format!(
                "non-finite position at path {path_index}, step {i}"
            )));
        }
        deltas.push(delta);
        links.push(link);
        prev = delta;
        prev_link = link;
    }
    Ok(TracedRollout {
        trajectory: PositionTrajectory {
            deltas,
            initial_position: config.initial_position,
        },
        links,
        inputs,
        outputs,
        heads,
    })
}

/// Rollouts for every path, in path order.
pub fn rollout_batch(
    net: Option<&Mlp>,
    params: &[f64],
    batch: &PathBatch,
    config: &PolicyConfig,
) -> Result<Vec<PositionTrajectory>> {
    (0..batch.n_paths())
        .into_par_iter()
        .map_init(Workspace::default, |ws, i| {
            rollout_with(net, params, batch, i, config, ws).map(|t| t.trajectory)
        })
        .collect()
}

/// PNL of every path under `config`'s policy. `include_liability = false`
/// drops the option payoff, which is what the indifference price compares
/// against.
pub fn evaluate_batch(
    net: Option<&Mlp>,
    params: &[f64],
    batch: &PathBatch,
    config: &PolicyConfig,
    cost: CostSpec,
    include_liability: bool,
) -> Result<Vec<PnlSample>> {
    (0..batch.n_paths())
        .into_par_iter()
        .map_init(Workspace::default, |ws, i| {
            let t = rollout_with(net, params, batch, i, config, ws)?;
            let path = batch.path(i);
            let z = if include_liability {
                payoff(&config.option, path)?
            } else {
                0.0
            };
            pnl_with_liability(path, &t.trajectory, z, cost)
        })
        .collect()
}

/// Writes `path_id,step,delta` rows.
pub fn write_positions_csv<W: Write>(trajectories: &[PositionTrajectory], mut out: W) -> Result<()> {
    writeln!(out, "path_id,step,delta")?;
    for (p, t) in trajectories.iter().enumerate() {
        for (i, d) in t.deltas.iter().enumerate() {
            writeln!(out, "{p},{i},{d}")?;
        }
    }
    Ok(())
}
