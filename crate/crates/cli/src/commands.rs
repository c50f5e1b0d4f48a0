//! The five subcommands. Each writes its artifacts under `config.out` and
//! finishes by writing `manifest.json`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{anyhow, bail, Context, Result};
use hedgelab::hedging::{evaluate_batch, CostSpec, PolicyMode};
use hedgelab::market_paths::{simulate_gbm, PathBatch, DAY};
use hedgelab::neural_net::{Checkpoint, Mlp, ParamVector};
use hedgelab::orderbook::{build_wap_series, parse_orderbook, realized_vol};
use hedgelab::risk::{mean_std, MetricsReport};
use hedgelab::trainer::{train as run_training, TrainState, TrainingCurve, TrainingProblem};
use hedgelab::HedgeError;
use serde::Serialize;
use serde_json::json;

use crate::config::ExperimentConfig;
use crate::manifest::{input_hash, sha256_hex, ArtifactSet, InputFile, RunManifest, Timings, CODE_VERSION};
use crate::seeds::{derive_seed, test_paths_label};

pub const PATHS_CSV: &str = "paths.csv";
pub const CHECKPOINT_JSON: &str = "checkpoint.json";
pub const CURVE_CSV: &str = "training_curve.csv";
pub const COMPARISON_CSV: &str = "comparison.csv";
pub const WAP_CSV: &str = "wap.csv";
pub const INGEST_JSON: &str = "ingest.json";

pub fn pnl_samples_name(sigma: f64) -> String {
    format!("pnl_samples_sigma{sigma}.csv")
}

pub fn metrics_name(sigma: f64) -> String {
    format!("metrics_sigma{sigma}.json")
}

struct Run {
    command: &'static str,
    config: ExperimentConfig,
    inputs: Vec<(PathBuf, Vec<u8>)>,
    artifacts: ArtifactSet,
    started: Instant,
}

impl Run {
    fn start(command: &'static str, config: &ExperimentConfig) -> Result<Self> {
        config.validate()?;
        std::fs::create_dir_all(&config.out)
            .with_context(|| format!("creating output directory {}", config.out.display()))?;
        Ok(Self {
            command,
            config: config.clone(),
            inputs: Vec::new(),
            artifacts: ArtifactSet::new(&config.out),
            started: Instant::now(),
        })
    }

    fn read_input(&mut self, path: &Path) -> Result<Vec<u8>> {
        let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
        self.inputs.push((path.to_path_buf(), bytes.clone()));
        Ok(bytes)
    }

    fn finish(self, summary: serde_json::Value) -> Result<RunManifest> {
        let manifest = RunManifest {
            code_version: CODE_VERSION.to_string(),
            command: self.command.to_string(),
            input_hash: input_hash(self.command, &self.config, &self.inputs, CODE_VERSION)?,
            inputs: self
                .inputs
                .iter()
                .map(|(p, b)| InputFile {
                    path: p.clone(),
                    sha256: sha256_hex(b),
                })
                .collect(),
            artifacts: self.artifacts.into_items(),
            summary,
            timings: Timings {
                total_seconds: self.started.elapsed().as_secs_f64(),
            },
            config: self.config,
        };
        manifest.write(&manifest.config.out)?;
        Ok(manifest)
    }
}

fn csv_bytes(write: impl FnOnce(&mut Vec<u8>) -> hedgelab::Result<()>) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    write(&mut buf)?;
    Ok(buf)
}

fn json_bytes(value: &impl Serialize) -> Result<Vec<u8>> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    Ok(text.into_bytes())
}

pub fn training_paths(config: &ExperimentConfig) -> Result<PathBatch> {
    let seed = derive_seed(config.seed, "train_paths");
    Ok(simulate_gbm(&config.gbm(config.train_sigma, config.paths, seed))?)
}

pub fn test_paths(config: &ExperimentConfig, sigma: f64) -> Result<PathBatch> {
    let seed = derive_seed(config.seed, &test_paths_label(sigma));
    Ok(simulate_gbm(&config.gbm(sigma, config.test_paths, seed))?)
}

/// Freshly initialized network for `mode`, `None` for `bs_delta`.
pub fn build_network(config: &ExperimentConfig, mode: PolicyMode) -> Result<Option<Mlp>> {
    config
        .mlp_spec(mode, derive_seed(config.seed, "network"))
        .map(|spec| Ok(Mlp::new(spec)?))
        .transpose()
}

/// Trains `state` up to `epochs` total epochs.
pub fn train_to(
    config: &ExperimentConfig,
    mode: PolicyMode,
    cost: f64,
    net: &Mlp,
    data: &PathBatch,
    state: TrainState,
    epochs: usize,
) -> Result<(TrainState, TrainingCurve)> {
    let policy = config.policy(mode, config.train_sigma)?;
    let mut trainer = config.trainer_config(mode, derive_seed(config.seed, "minibatch_order"));
    trainer.epochs = epochs;
    let problem = TrainingProblem {
        net,
        data,
        policy: &policy,
        cost: CostSpec::new(cost)?,
    };
    Ok(run_training(&trainer, &problem, state)?)
}

/// PNL of every test path simulated at `sigma`.
pub fn test_pnl(
    config: &ExperimentConfig,
    mode: PolicyMode,
    cost: f64,
    trained: Option<(&Mlp, &ParamVector)>,
    sigma: f64,
) -> Result<Vec<f64>> {
    let batch = test_paths(config, sigma)?;
    let policy = config.policy(mode, config.eval_feature_sigma(sigma))?;
    let (net, params) = match trained {
        Some((n, p)) => (Some(n), p.as_slice()),
        None => (None, &[][..]),
    };
    Ok(
        evaluate_batch(net, params, &batch, &policy, CostSpec::new(cost)?, true)?
            .into_iter()
            .map(|s| s.v)
            .collect(),
    )
}

pub fn write_pnl_csv(pnl: &[f64]) -> Vec<u8> {
    let mut s = String::from("path_id,pnl\n");
    for (i, v) in pnl.iter().enumerate() {
        let _ = writeln!(s, "{i},{v}");
    }
    s.into_bytes()
}

fn checkpoint_for(net: &Mlp, state: &TrainState, mode: PolicyMode, cost: f64) -> Result<Checkpoint> {
    let mut ck = Checkpoint::new(net, &state.params)?;
    ck.optimizer = Some(state.adam.clone());
    ck.epochs_completed = state.epochs_completed;
    ck.labels.insert("mode".into(), mode.to_string());
    ck.labels.insert("cost".into(), cost.to_string());
    Ok(ck)
}

/// Restores a checkpoint, checking it against the configured network.
pub fn load_checkpoint(
    config: &ExperimentConfig,
    mode: PolicyMode,
    text: &str,
) -> Result<(Checkpoint, Mlp, ParamVector)> {
    let ck = Checkpoint::from_json(text)?;
    if let Some(stored) = ck.labels.get("mode") {
        if stored.parse::<PolicyMode>()? != mode {
            return Err(HedgeError::Version(format!(
                "checkpoint was trained for mode {stored}, config asks for {mode}"
            ))
            .into());
        }
    }
    let expected = config
        .mlp_spec(mode, derive_seed(config.seed, "network"))
        .ok_or_else(|| anyhow!("{mode} does not use a checkpoint"))?;
    let (net, params) = ck.restore_matching(&expected)?;
    Ok((ck, net, params))
}

pub fn simulate(config: &ExperimentConfig) -> Result<RunManifest> {
    let mut run = Run::start("simulate", config)?;
    let seed = derive_seed(config.seed, "simulate");
    let batch = simulate_gbm(&config.gbm(config.train_sigma, config.paths, seed))?;
    run.artifacts
        .write(PATHS_CSV, &csv_bytes(|b| batch.write_csv(b))?, false)?;
    let terminal: Vec<f64> = batch.paths().map(|p| p[p.len() - 1]).collect();
    let (mean, std) = if terminal.len() > 1 {
        mean_std(&terminal)?
    } else {
        (terminal[0], 0.0)
    };
    let se = std / (terminal.len() as f64).sqrt();
    run.finish(json!({
        "n_paths": batch.n_paths(),
        "steps": batch.steps(),
        "sigma": config.train_sigma,
        "p0": config.p0,
        "mean_terminal_price": mean,
        "terminal_standard_error": se,
        "expected_terminal_price": config.p0 * (config.mu * config.maturity_years()).exp(),
    }))
}

pub fn train(config: &ExperimentConfig, resume: Option<&Path>) -> Result<RunManifest> {
    let mode = config.policy_mode()?;
    if mode == PolicyMode::BsDelta {
        bail!("bs_delta requires no training");
    }
    let mut run = Run::start("train", config)?;
    let (net, state) = match resume {
        Some(path) => {
            let text = String::from_utf8(run.read_input(path)?).context("checkpoint is not UTF-8")?;
            let (ck, net, params) = load_checkpoint(config, mode, &text)?;
            let adam = ck
                .optimizer
                .ok_or_else(|| anyhow!("checkpoint {} has no optimizer state to resume", path.display()))?;
            let state = TrainState {
                params,
                adam,
                epochs_completed: ck.epochs_completed,
            };
            (net, state)
        }
        None => {
            let net = build_network(config, mode)?.expect("network modes build a network");
            let state = TrainState::fresh(&net, config.lr);
            (net, state)
        }
    };
    let data = training_paths(config)?;
    let (state, curve) = train_to(config, mode, config.cost, &net, &data, state, config.epochs)?;

    let ck = checkpoint_for(&net, &state, mode, config.cost)?;
    let mut text = ck.to_json()?;
    text.push('\n');
    run.artifacts.write(CHECKPOINT_JSON, text.as_bytes(), false)?;
    run.artifacts
        .write(CURVE_CSV, &csv_bytes(|b| curve.write_csv(b))?, true)?;
    let last = curve.last().copied();
    run.finish(json!({
        "mode": mode.to_string(),
        "epochs_completed": state.epochs_completed,
        "epochs_run": curve.records.len(),
        "final_rho": last.map(|r| r.rho),
        "final_entropic_loss": last.map(|r| r.entropic_loss),
        "final_expected_shortfall": last.map(|r| r.expected_shortfall),
    }))
}

pub fn evaluate(config: &ExperimentConfig, checkpoint: Option<&Path>) -> Result<RunManifest> {
    let mode = config.policy_mode()?;
    let mut run = Run::start("evaluate", config)?;
    let trained = match (mode.needs_network(), checkpoint) {
        (false, _) => None,
        (true, None) => bail!("{mode} evaluation needs --checkpoint"),
        (true, Some(path)) => {
            let text = String::from_utf8(run.read_input(path)?).context("checkpoint is not UTF-8")?;
            let (_, net, params) = load_checkpoint(config, mode, &text)?;
            Some((net, params))
        }
    };
    let mut summary = BTreeMap::new();
    for &sigma in &config.test_sigmas {
        let pnl = test_pnl(config, mode, config.cost, trained.as_ref().map(|(n, p)| (n, p)), sigma)?;
        let report = MetricsReport::compute(&pnl, &config.risk())?;
        run.artifacts
            .write(&pnl_samples_name(sigma), &write_pnl_csv(&pnl), false)?;
        run.artifacts
            .write(&metrics_name(sigma), &json_bytes(&report)?, false)?;
        summary.insert(
            sigma.to_string(),
            json!({
                "mean": report.mean,
                "entropic_loss": report.entropic_loss,
                "expected_shortfall": report.expected_shortfall,
            }),
        );
    }
    run.finish(json!({ "mode": mode.to_string(), "by_sigma": summary }))
}

/// One row of the comparison table.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ComparisonRow {
    pub mode: PolicyMode,
    pub cost: f64,
    pub sigma: f64,
    pub epoch: usize,
    pub mean_pnl: f64,
    pub std_pnl: f64,
    pub entropic_loss: f64,
    pub expected_shortfall: f64,
}

/// The grid a comparison must cover.
#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonGrid {
    pub modes: Vec<PolicyMode>,
    pub costs: Vec<f64>,
    pub sigmas: Vec<f64>,
    pub epochs: Vec<usize>,
}

impl ComparisonGrid {
    pub fn from_config(config: &ExperimentConfig) -> Result<Self> {
        Ok(Self {
            modes: config.mode_list()?,
            costs: config.cost_grid(),
            sigmas: config.test_sigmas.clone(),
            epochs: config.eval_epoch_grid(),
        })
    }
}

/// Orders `rows` by (cost, sigma, epoch, mode) following the grid, or
/// fails listing every cell without a row.
pub fn assemble_table(grid: &ComparisonGrid, rows: &[ComparisonRow]) -> Result<Vec<ComparisonRow>> {
    let mut table = Vec::new();
    let mut missing = Vec::new();
    for &cost in &grid.costs {
        for &sigma in &grid.sigmas {
            for &epoch in &grid.epochs {
                for &mode in &grid.modes {
                    match rows
                        .iter()
                        .find(|r| r.mode == mode && r.cost == cost && r.sigma == sigma && r.epoch == epoch)
                    {
                        Some(r) => table.push(*r),
                        None => missing.push(format!("(mode={mode}, cost={cost}, sigma={sigma}, epoch={epoch})")),
                    }
                }
            }
        }
    }
    if !missing.is_empty() {
        bail!(
            "comparison is missing {} cell(s): {}",
            missing.len(),
            missing.join(", ")
        );
    }
    Ok(table)
}

pub fn write_comparison_csv(rows: &[ComparisonRow]) -> Vec<u8> {
    let mut s = String::from("mode,cost,sigma,epoch,mean_pnl,std_pnl,entropic_loss,expected_shortfall\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{}",
            r.mode, r.cost, r.sigma, r.epoch, r.mean_pnl, r.std_pnl, r.entropic_loss, r.expected_shortfall
        );
    }
    s.into_bytes()
}

fn row(
    config: &ExperimentConfig,
    mode: PolicyMode,
    cost: f64,
    sigma: f64,
    epoch: usize,
    pnl: &[f64],
) -> Result<ComparisonRow> {
    let report = MetricsReport::compute(pnl, &config.risk())?;
    Ok(ComparisonRow {
        mode,
        cost,
        sigma,
        epoch,
        mean_pnl: report.mean,
        std_pnl: report.std,
        entropic_loss: report.entropic_loss,
        expected_shortfall: report.expected_shortfall,
    })
}

/// Table rows in grid order plus one training curve per trained run.
#[derive(Debug, Clone)]
pub struct Comparison {
    pub rows: Vec<ComparisonRow>,
    /// `(<mode>_c<cost>, curve)`.
    pub curves: Vec<(String, TrainingCurve)>,
}

/// Runs every (mode, cost) training and evaluates each at every grid
/// epoch and test sigma.
pub fn compare_rows(config: &ExperimentConfig) -> Result<Comparison> {
    config.validate()?;
    let grid = ComparisonGrid::from_config(config)?;
    let data = training_paths(config)?;
    let mut rows = Vec::new();
    let mut curves = Vec::new();
    for &cost in &grid.costs {
        for &mode in &grid.modes {
            let Some(net) = build_network(config, mode)? else {
                for &sigma in &grid.sigmas {
                    let pnl = test_pnl(config, mode, cost, None, sigma)?;
                    for &epoch in &grid.epochs {
                        rows.push(row(config, mode, cost, sigma, epoch, &pnl)?);
                    }
                }
                continue;
            };
            let mut state = TrainState::fresh(&net, config.lr);
            let mut curve = TrainingCurve::default();
            for &epoch in &grid.epochs {
                let (next, part) = train_to(config, mode, cost, &net, &data, state, epoch)?;
                state = next;
                curve.records.extend(part.records);
                for &sigma in &grid.sigmas {
                    let pnl = test_pnl(config, mode, cost, Some((&net, &state.params)), sigma)?;
                    rows.push(row(config, mode, cost, sigma, epoch, &pnl)?);
                }
            }
            curves.push((format!("{mode}_c{cost}"), curve));
        }
    }
    Ok(Comparison {
        rows: assemble_table(&grid, &rows)?,
        curves,
    })
}

pub fn compare(config: &ExperimentConfig) -> Result<RunManifest> {
    let mut run = Run::start("compare", config)?;
    let Comparison { rows, curves } = compare_rows(config)?;
    run.artifacts
        .write(COMPARISON_CSV, &write_comparison_csv(&rows), false)?;
    for (name, curve) in &curves {
        let rel = format!("curves/{name}.csv");
        run.artifacts.write(&rel, &csv_bytes(|b| curve.write_csv(b))?, true)?;
    }
    run.finish(json!({ "rows": rows.len(), "trained_runs": curves.len() }))
}

/// Cuts `values` into consecutive non-overlapping windows of `len`
/// observations, each divided by its first value. A short tail is dropped.
pub fn normalized_windows(values: &[f64], len: usize) -> Result<Vec<Vec<f64>>> {
    if values.len() < len {
        return Err(HedgeError::InsufficientData {
            needed: len,
            got: values.len(),
        }
        .into());
    }
    Ok(values
        .chunks_exact(len)
        .map(|w| w.iter().map(|v| v / w[0]).collect())
        .collect())
}

pub fn ingest(config: &ExperimentConfig, input: &Path) -> Result<RunManifest> {
    let mut run = Run::start("ingest", config)?;
    let bytes = run.read_input(input)?;
    let snapshots = parse_orderbook(bytes.as_slice()).with_context(|| format!("parsing {}", input.display()))?;
    let source = input
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let series = build_wap_series(&snapshots, source)?;
    let dt_years = config.ingest_dt_days * DAY;
    let windows = normalized_windows(&series.values, config.steps + 1)?;
    let sigma = realized_vol(&series, dt_years)?;
    let batch = PathBatch::from_rows(&windows, config.steps as f64 * dt_years, sigma)?;

    run.artifacts
        .write(WAP_CSV, &csv_bytes(|b| series.write_csv(b))?, false)?;
    run.artifacts
        .write(PATHS_CSV, &csv_bytes(|b| batch.write_csv(b))?, false)?;
    let stats = json!({
        "source": series.source_id,
        "snapshots": snapshots.len(),
        "observations": series.len(),
        "crossed_books": series.crossed_books,
        "realized_sigma": sigma,
        "windows": windows.len(),
        "window_length": config.steps + 1,
        "dropped_tail": series.len() - windows.len() * (config.steps + 1),
    });
    run.artifacts.write(INGEST_JSON, &json_bytes(&stats)?, false)?;
    run.finish(stats)
}
