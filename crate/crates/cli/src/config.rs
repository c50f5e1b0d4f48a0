//! Experiment configuration: a flat TOML file, then command-line overrides.
//!
//! Every key is optional. Unknown keys are rejected so typos surface early.
//!
//! | key | default | meaning |
//! |---|---|---|
//! | `option` | `"european"` | `european` or `lookback` call |
//! | `strike` | `1.2` | strike price (presets 1.0 and 1.2) |
//! | `p0`, `mu` | `1.0`, `0.0` | initial price and drift |
//! | `steps`, `maturity_days` | `30`, `30.0` | hedging grid, ACT/365 |
//! | `cost` | `0.002` | proportional cost rate for train/evaluate |
//! | `costs` | `[cost]` | cost grid for `compare` |
//! | `train_sigma` | `0.1` | volatility of the training paths |
//! | `test_sigmas` | `[0.1, 0.2, 0.3, 0.4]` | evaluation grid |
//! | `eval_observes_test_sigma` | `true` | feed the test volatility to the delta and features; `false` feeds the training one |
//! | `paths`, `test_paths` | `1000`, `1000` | training and evaluation path counts |
//! | `epochs` | `10` | training epochs |
//! | `eval_epochs` | `[epochs]` | epochs at which `compare` evaluates |
//! | `mode` | `"dhlnn"` | `dhlnn`, `ntb_plain`, `direct_plain`, `bs_delta` |
//! | `modes` | all four | modes run by `compare` |
//! | `hidden` | `[32, 32]` | hidden layer widths |
//! | `activation` | `"relu"` | `relu` or `softplus` |
//! | `heads`, `head_activation` | `2`, `"abs"` | band-mode readout |
//! | `direct_head_activation` | `"identity"` | readout of `direct_plain` |
//! | `freeze_heads` | `false` | keep readout weights at init |
//! | `include_prev_position` | `false` | append the previous position as a feature |
//! | `delta_variant` | `"standard"` | `standard` or `paper_literal` |
//! | `lr`, `batch_paths` | `0.001`, `100` | Adam rate, minibatch size |
//! | `outer_iterations`, `inner_iterations`, `tolerance` | `1`, `5`, `1e-6` | linearized loop |
//! | `lin_grad`, `inner_update` | `"full_quadratic"`, `"adam"` | linearized update variants |
//! | `risk_aversion`, `es_alpha`, `loss_aversion` | `1.0`, `0.9`, `1.0` | risk settings |
//! | `budget_bytes` | `1073741824` | gradient cache limit |
//! | `seed` | `0` | master seed |
//! | `out` | `"runs/latest"` | output directory |
//! | `ingest_dt_days` | `1.0` | spacing of order-book observations |

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use hedgelab::hedging::{CostSpec, PolicyConfig, PolicyMode};
use hedgelab::instruments::{DeltaVariant, OptionKind, OptionSpec};
use hedgelab::market_paths::{FeatureMode, GbmConfig, DAY};
use hedgelab::neural_net::{Activation, HeadActivation, MlpSpec};
use hedgelab::risk::RiskSpec;
use hedgelab::trainer::{InnerUpdate, LinGradVariant, TrainMode, TrainerConfig};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptionChoice {
    European,
    Lookback,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub option: OptionChoice,
    pub strike: f64,
    pub p0: f64,
    pub mu: f64,
    pub steps: usize,
    pub maturity_days: f64,
    pub cost: f64,
    pub costs: Option<Vec<f64>>,
    pub train_sigma: f64,
    pub test_sigmas: Vec<f64>,
    pub eval_observes_test_sigma: bool,
    pub paths: usize,
    pub test_paths: usize,
    pub epochs: usize,
    pub eval_epochs: Option<Vec<usize>>,
    pub mode: String,
    pub modes: Vec<String>,
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub heads: usize,
    pub head_activation: HeadActivation,
    pub direct_head_activation: HeadActivation,
    pub freeze_heads: bool,
    pub include_prev_position: bool,
    pub delta_variant: DeltaVariant,
    pub lr: f64,
    pub batch_paths: usize,
    pub outer_iterations: usize,
    pub inner_iterations: usize,
    pub tolerance: f64,
    pub lin_grad: LinGradVariant,
    pub inner_update: InnerUpdate,
    pub risk_aversion: f64,
    pub es_alpha: f64,
    pub loss_aversion: f64,
    pub budget_bytes: u64,
    pub seed: u64,
    pub out: PathBuf,
    pub ingest_dt_days: f64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            option: OptionChoice::European,
            strike: 1.2,
            p0: 1.0,
            mu: 0.0,
            steps: 30,
            maturity_days: 30.0,
            cost: 2e-3,
            costs: None,
            train_sigma: 0.1,
            test_sigmas: vec![0.1, 0.2, 0.3, 0.4],
            eval_observes_test_sigma: true,
            paths: 1000,
            test_paths: 1000,
            epochs: 10,
            eval_epochs: None,
            mode: "dhlnn".into(),
            modes: ["dhlnn", "ntb_plain", "direct_plain", "bs_delta"]
                .map(String::from)
                .to_vec(),
            hidden: vec![32, 32],
            activation: Activation::Relu,
            heads: 2,
            head_activation: HeadActivation::Abs,
            direct_head_activation: HeadActivation::Identity,
            freeze_heads: false,
            include_prev_position: false,
            delta_variant: DeltaVariant::Standard,
            lr: 1e-3,
            batch_paths: 100,
            outer_iterations: 1,
            inner_iterations: 5,
            tolerance: 1e-6,
            lin_grad: LinGradVariant::FullQuadratic,
            inner_update: InnerUpdate::Adam,
            risk_aversion: 1.0,
            es_alpha: 0.9,
            loss_aversion: 1.0,
            budget_bytes: 1 << 30,
            seed: 0,
            out: PathBuf::from("runs/latest"),
            ingest_dt_days: 1.0,
        }
    }
}

/// Values given on the command line; `None` keeps the file value.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub mode: Option<String>,
    pub paths: Option<usize>,
    pub epochs: Option<usize>,
    pub cost: Option<f64>,
    pub sigma: Option<f64>,
    pub strike: Option<f64>,
    pub budget_bytes: Option<u64>,
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        Ok(toml::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::from_toml_str(&text).with_context(|| format!("parsing {}", path.display()))
    }

    /// `--cost` also replaces the compare grid, `--epochs` the eval epochs.
    pub fn apply(&mut self, o: &Overrides) {
        if let Some(v) = o.seed {
            self.seed = v;
        }
        if let Some(v) = &o.out {
            self.out = v.clone();
        }
        if let Some(v) = &o.mode {
            self.mode = v.clone();
        }
        if let Some(v) = o.paths {
            self.paths = v;
        }
        if let Some(v) = o.epochs {
            self.epochs = v;
            self.eval_epochs = None;
        }
        if let Some(v) = o.cost {
            self.cost = v;
            self.costs = None;
        }
        if let Some(v) = o.sigma {
            self.train_sigma = v;
        }
        if let Some(v) = o.strike {
            self.strike = v;
        }
        if let Some(v) = o.budget_bytes {
            self.budget_bytes = v;
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.paths == 0 || self.test_paths == 0 {
            bail!("paths and test_paths must be >= 1");
        }
        if self.steps == 0 {
            bail!("steps must be >= 1");
        }
        if !(self.maturity_days > 0.0 && self.maturity_days.is_finite()) {
            bail!("maturity_days must be > 0, got {}", self.maturity_days);
        }
        if !(self.ingest_dt_days > 0.0 && self.ingest_dt_days.is_finite()) {
            bail!("ingest_dt_days must be > 0, got {}", self.ingest_dt_days);
        }
        for &c in &self.cost_grid() {
            CostSpec::new(c)?;
        }
        if self.test_sigmas.is_empty() {
            bail!("test_sigmas must not be empty");
        }
        for &s in self.test_sigmas.iter().chain([&self.train_sigma]) {
            if !(s >= 0.0 && s.is_finite()) {
                bail!("volatilities must be finite and >= 0, got {s}");
            }
        }
        self.policy_mode()?;
        if self.modes.is_empty() {
            bail!("modes must not be empty");
        }
        for m in &self.modes {
            m.parse::<PolicyMode>()?;
        }
        if self.eval_epoch_grid().contains(&0) {
            bail!("eval_epochs must be >= 1");
        }
        self.option_spec()?;
        self.gbm(self.train_sigma, 1, 0).validate()?;
        self.trainer_config(PolicyMode::DhlnnBand, 0).validate()?;
        Ok(())
    }

    pub fn maturity_years(&self) -> f64 {
        self.maturity_days * DAY
    }

    pub fn policy_mode(&self) -> Result<PolicyMode> {
        Ok(self.mode.parse()?)
    }

    pub fn mode_list(&self) -> Result<Vec<PolicyMode>> {
        self.modes.iter().map(|m| Ok(m.parse()?)).collect()
    }

    pub fn cost_grid(&self) -> Vec<f64> {
        self.costs.clone().unwrap_or_else(|| vec![self.cost])
    }

    /// Sorted and deduplicated.
    pub fn eval_epoch_grid(&self) -> Vec<usize> {
        let mut e = self.eval_epochs.clone().unwrap_or_else(|| vec![self.epochs]);
        e.sort_unstable();
        e.dedup();
        e
    }

    pub fn option_spec(&self) -> Result<OptionSpec> {
        let kind = match self.option {
            OptionChoice::European => OptionKind::EuropeanCall,
            OptionChoice::Lookback => OptionKind::LookbackCall,
        };
        Ok(OptionSpec::new(kind, self.strike, self.maturity_years())?)
    }

    pub fn gbm(&self, sigma: f64, n_paths: usize, seed: u64) -> GbmConfig {
        GbmConfig {
            p0: self.p0,
            mu: self.mu,
            sigma,
            maturity_years: self.maturity_years(),
            steps: self.steps,
            n_paths,
            seed,
        }
    }

    /// Volatility the policy sees on a test set simulated at `test_sigma`.
    pub fn eval_feature_sigma(&self, test_sigma: f64) -> f64 {
        if self.eval_observes_test_sigma {
            test_sigma
        } else {
            self.train_sigma
        }
    }

    pub fn features(&self) -> FeatureMode {
        FeatureMode {
            include_prev_position: self.include_prev_position,
        }
    }

    pub fn policy(&self, mode: PolicyMode, feature_sigma: f64) -> Result<PolicyConfig> {
        let mut p = PolicyConfig::new(mode, self.option_spec()?, feature_sigma);
        p.delta_variant = self.delta_variant;
        p.features = self.features();
        Ok(p)
    }

    /// `None` for `bs_delta`.
    pub fn mlp_spec(&self, mode: PolicyMode, seed: u64) -> Option<MlpSpec> {
        let (heads, head_activation) = match mode {
            PolicyMode::BsDelta => return None,
            PolicyMode::DirectMlp => (1, self.direct_head_activation),
            PolicyMode::DhlnnBand | PolicyMode::NtbBand => (self.heads, self.head_activation),
        };
        Some(MlpSpec {
            input_dim: self.features().dim(),
            hidden_widths: self.hidden.clone(),
            output_heads: heads,
            activation: self.activation,
            head_activation,
            freeze_heads: self.freeze_heads,
            seed,
        })
    }

    pub fn risk(&self) -> RiskSpec {
        RiskSpec {
            lambda: self.risk_aversion,
            es_alpha: self.es_alpha,
            loss_aversion: self.loss_aversion,
        }
    }

    pub fn trainer_config(&self, mode: PolicyMode, seed: u64) -> TrainerConfig {
        TrainerConfig {
            mode: if mode == PolicyMode::DhlnnBand {
                TrainMode::Dhlnn
            } else {
                TrainMode::Plain
            },
            outer_iterations: self.outer_iterations,
            inner_iterations: self.inner_iterations,
            lr: self.lr,
            tolerance: self.tolerance,
            risk: self.risk(),
            batch_paths: self.batch_paths,
            epochs: self.epochs,
            seed,
            lin_grad: self.lin_grad,
            inner_update: self.inner_update,
            budget_bytes: self.budget_bytes,
            include_liability: true,
        }
    }
}
