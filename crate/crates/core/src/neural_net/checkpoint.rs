use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::adam::AdamState;
use super::mlp::{LayoutStamp, Mlp, MlpSpec, ParamVector};
use crate::error::{HedgeError, Result};

pub const CHECKPOINT_FORMAT: &str = "hedgelab-mlp";
pub const CHECKPOINT_VERSION: u32 = 1;

/// JSON checkpoint. Floats use shortest round-trip formatting, so a save
/// and load reproduces every parameter bit for bit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub spec: MlpSpec,
    pub layout: LayoutStamp,
    pub params: Vec<f64>,
    #[serde(default)]
    pub optimizer: Option<AdamState>,
    #[serde(default)]
    pub epochs_completed: usize,
    /// Free-form labels, e.g. the policy mode the net was trained for.
    #[serde(default)]
    pub labels: std::collections::BTreeMap<String, String>,
}

impl Checkpoint {
    pub fn new(net: &Mlp, params: &ParamVector) -> Result<Self> {
        if params.layout != net.layout() {
            return Err(HedgeError::Version(format!(
                "parameter layout {:?} does not match network {:?}",
                params.layout,
                net.layout()
            )));
        }
        Ok(Self {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            spec: net.spec().clone(),
            layout: params.layout,
            params: params.values.clone(),
            optimizer: None,
            epochs_completed: 0,
            labels: Default::default(),
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let ck: Self = serde_json::from_str(text)?;
        ck.verify()?;
        Ok(ck)
    }

    /// Writes to a sibling temp file first, then renames.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let tmp = path.with_extension("json.tmp");
        {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(self.to_json()?.as_bytes())?;
            f.write_all(b"\n")?;
            f.sync_all()?;
        }
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }

    fn verify(&self) -> Result<()> {
        if self.format != CHECKPOINT_FORMAT {
            return Err(HedgeError::Version(format!("unknown format {:?}", self.format)));
        }
        if self.version != CHECKPOINT_VERSION {
            return Err(HedgeError::Version(format!(
                "checkpoint version {} unsupported (expected {CHECKPOINT_VERSION})",
                self.version
            )));
        }
        let net = Mlp::new(self.spec.clone())?;
        if net.layout() != self.layout || self.params.len() != self.layout.len {
            return Err(HedgeError::Version(format!(
                "stored layout {:?} disagrees with spec layout {:?}",
                self.layout,
                net.layout()
            )));
        }
        if let Some(opt) = &self.optimizer {
            if opt.len() != self.params.len() {
                return Err(HedgeError::Version("optimizer state length mismatch".into()));
            }
        }
        Ok(())
    }

    /// Rebuilds the network and its parameters.
    pub fn restore(&self) -> Result<(Mlp, ParamVector)> {
        self.verify()?;
        let net = Mlp::new(self.spec.clone())?;
        let params = net.params_from(self.params.clone())?;
        Ok((net, params))
    }

    /// Restores and checks that the stored network matches `expected`.
    pub fn restore_matching(&self, expected: &MlpSpec) -> Result<(Mlp, ParamVector)> {
        let same_shape = self.spec.input_dim == expected.input_dim
            && self.spec.hidden_widths == expected.hidden_widths
            && self.spec.output_heads == expected.output_heads
            && self.spec.activation == expected.activation
            && self.spec.head_activation == expected.head_activation;
        if !same_shape {
            return Err(HedgeError::Version(format!(
                "checkpoint network {:?} does not match configured {:?}",
                self.spec, expected
            )));
        }
        self.restore()
    }
}
