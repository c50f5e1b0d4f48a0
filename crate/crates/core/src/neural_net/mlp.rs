use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{HedgeError, Result};

/// Bumped whenever the flat parameter layout changes.
pub const LAYOUT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Softplus,
}

impl Activation {
    #[inline]
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Softplus => softplus(z),
        }
    }

    /// Derivative; ReLU uses 0 at the kink.
    #[inline]
    fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Softplus => sigmoid(z),
        }
    }
}

/// Applied to each head after the `1/sqrt(m)`-scaled readout.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadActivation {
    Abs,
    Softplus,
    Identity,
}

impl HeadActivation {
    #[inline]
    fn apply(self, r: f64) -> f64 {
        match self {
            HeadActivation::Abs => r.abs(),
            HeadActivation::Softplus => softplus(r),
            HeadActivation::Identity => r,
        }
    }

    #[inline]
    fn derivative(self, r: f64) -> f64 {
        match self {
            HeadActivation::Abs => {
                if r > 0.0 {
                    1.0
                } else if r < 0.0 {
                    -1.0
                } else {
                    0.0
                }
            }
            HeadActivation::Softplus => sigmoid(r),
            HeadActivation::Identity => 1.0,
        }
    }
}

#[inline]
fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

#[inline]
fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub input_dim: usize,
    pub hidden_widths: Vec<usize>,
    pub output_heads: usize,
    pub activation: Activation,
    pub head_activation: HeadActivation,
    /// Keep the readout weights at their initial values.
    #[serde(default)]
    pub freeze_heads: bool,
    pub seed: u64,
}

impl MlpSpec {
    /// Four hidden layers of 64 ReLU units, two `abs` heads.
    pub fn desk_preset(input_dim: usize, seed: u64) -> Self {
        Self {
            input_dim,
            hidden_widths: vec![64; 4],
            output_heads: 2,
            activation: Activation::Relu,
            head_activation: HeadActivation::Abs,
            freeze_heads: false,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(HedgeError::Config {
                field: "input_dim",
                reason: "must be >= 1".into(),
            });
        }
        if self.hidden_widths.is_empty() || self.hidden_widths.contains(&0) {
            return Err(HedgeError::Config {
                field: "hidden_widths",
                reason: format!("need at least one layer, all widths >= 1, got {:?}", self.hidden_widths),
            });
        }
        if !(1..=2).contains(&self.output_heads) {
            return Err(HedgeError::Config {
                field: "output_heads",
                reason: format!("must be 1 or 2, got {}", self.output_heads),
            });
        }
        Ok(())
    }
}

/// Identifies a parameter layout so stale caches and checkpoints are caught.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LayoutStamp {
    pub version: u32,
    pub fingerprint: u64,
    pub len: usize,
}

/// Flat network parameters.
///
/// Layout, layer-major: for each hidden layer `l` the weight matrix
/// `W(l)` (row-major, `out x in`) followed by the bias `b(l)`; then the
/// readout vectors `a_1`, `a_2`, each of length `m` (last hidden width).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamVector {
    pub values: Vec<f64>,
    pub layout: LayoutStamp,
}

impl ParamVector {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn with_values(&self, values: Vec<f64>) -> Result<Self> {
        if values.len() != self.layout.len {
            return Err(HedgeError::Shape(format!(
                "{} values for a layout of {}",
                values.len(),
                self.layout.len
            )));
        }
        Ok(Self {
            values,
            layout: self.layout,
        })
    }
}

/// Gradient of one head output with respect to every parameter, in
/// [`ParamVector`] layout.
pub type SampleGradient = Vec<f64>;

#[derive(Debug, Clone, Copy)]
struct LayerShape {
    fan_in: usize,
    fan_out: usize,
    w_offset: usize,
    b_offset: usize,
}

/// A fully connected network with one or two scalar heads.
#[derive(Debug, Clone)]
pub struct Mlp {
    spec: MlpSpec,
    layers: Vec<LayerShape>,
    head_offset: usize,
    width: usize,
    param_len: usize,
    stamp: LayoutStamp,
}

/// Scratch buffers reused across forward/backward calls.
#[derive(Debug, Clone, Default)]
pub struct Workspace {
    pre: Vec<Vec<f64>>,
    act: Vec<Vec<f64>>,
    delta: Vec<f64>,
    next_delta: Vec<f64>,
}

/// Head values, at most two.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Outputs {
    values: [f64; 2],
    heads: usize,
}

impl Outputs {
    pub fn as_slice(&self) -> &[f64] {
        &self.values[..self.heads]
    }

    pub fn get(&self, head: usize) -> f64 {
        self.as_slice()[head]
    }

    pub fn heads(&self) -> usize {
        self.heads
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Backward {
    pub outputs: Outputs,
    /// One gradient per head.
    pub grads: Vec<SampleGradient>,
}

impl Mlp {
    pub fn new(spec: MlpSpec) -> Result<Self> {
        spec.validate()?;
        let mut layers = Vec::with_capacity(spec.hidden_widths.len());
        let mut offset = 0;
        let mut fan_in = spec.input_dim;
        for &fan_out in &spec.hidden_widths {
            layers.push(LayerShape {
                fan_in,
                fan_out,
                w_offset: offset,
                b_offset: offset + fan_in * fan_out,
            });
            offset += fan_in * fan_out + fan_out;
            fan_in = fan_out;
        }
        let width = fan_in;
        let head_offset = offset;
        let param_len = offset + spec.output_heads * width;
        let stamp = LayoutStamp {
            version: LAYOUT_VERSION,
            fingerprint: fingerprint(&spec),
            len: param_len,
        };
        Ok(Self {
            spec,
            layers,
            head_offset,
            width,
            param_len,
            stamp,
        })
    }

    pub fn spec(&self) -> &MlpSpec {
        &self.spec
    }

    pub fn param_len(&self) -> usize {
        self.param_len
    }

    pub fn heads(&self) -> usize {
        self.spec.output_heads
    }

    pub fn layout(&self) -> LayoutStamp {
        self.stamp
    }

    /// Offset of head `k`'s readout vector.
    pub fn head_offset(&self, head: usize) -> usize {
        self.head_offset + head * self.width
    }

    /// Offset of the first bias entry of each hidden layer.
    pub fn bias_ranges(&self) -> Vec<std::ops::Range<usize>> {
        self.layers.iter().map(|l| l.b_offset..l.b_offset + l.fan_out).collect()
    }

    /// Hidden weights ~ U(-sqrt(6/fan_in), sqrt(6/fan_in)), biases zero,
    /// readouts ~ U(-1/sqrt(m), 1/sqrt(m)).
    pub fn init(&self) -> ParamVector {
        let mut rng = ChaCha8Rng::seed_from_u64(self.spec.seed);
        let mut values = vec![0.0; self.param_len];
        for layer in &self.layers {
            let bound = (6.0 / layer.fan_in as f64).sqrt();
            for w in &mut values[layer.w_offset..layer.b_offset] {
                *w = rng.random_range(-bound..bound);
            }
        }
        let bound = 1.0 / (self.width as f64).sqrt();
        for a in &mut values[self.head_offset..] {
            *a = rng.random_range(-bound..bound);
        }
        ParamVector {
            values,
            layout: self.stamp,
        }
    }

    /// Wraps raw values in this network's layout.
    pub fn params_from(&self, values: Vec<f64>) -> Result<ParamVector> {
        if values.len() != self.param_len {
            return Err(HedgeError::Shape(format!(
                "expected {} parameters, got {}",
                self.param_len,
                values.len()
            )));
        }
        Ok(ParamVector {
            values,
            layout: self.stamp,
        })
    }

    fn check(&self, params: &[f64], x: &[f64]) -> Result<()> {
        if params.len() != self.param_len {
            return Err(HedgeError::Shape(format!(
                "expected {} parameters, got {}",
                self.param_len,
                params.len()
            )));
        }
        if x.len() != self.spec.input_dim {
            return Err(HedgeError::Shape(format!(
                "input has {} features, network expects {}",
                x.len(),
                self.spec.input_dim
            )));
        }
        Ok(())
    }

    fn hidden_pass(&self, params: &[f64], x: &[f64], ws: &mut Workspace) {
        let n = self.layers.len();
        ws.pre.resize(n, Vec::new());
        ws.act.resize(n + 1, Vec::new());
        ws.act[0].clear();
        ws.act[0].extend_from_slice(x);
        for (l, layer) in self.layers.iter().enumerate() {
            let (input, rest) = ws.act.split_at_mut(l + 1);
            let input = &input[l];
            let out = &mut rest[0];
            let pre = &mut ws.pre[l];
            pre.clear();
            out.clear();
            let weights = &params[layer.w_offset..layer.b_offset];
            let biases = &params[layer.b_offset..layer.b_offset + layer.fan_out];
            for (row, b) in weights.chunks_exact(layer.fan_in).zip(biases) {
                let z = row.iter().zip(input.iter()).fold(*b, |acc, (w, h)| acc + w * h);
                pre.push(z);
                out.push(self.spec.activation.apply(z));
            }
        }
    }

    fn readout(&self, params: &[f64], ws: &Workspace) -> [f64; 2] {
        let last = &ws.act[self.layers.len()];
        let scale = 1.0 / (self.width as f64).sqrt();
        let mut raw = [0.0; 2];
        for (k, r) in raw.iter_mut().enumerate().take(self.spec.output_heads) {
            let a = &params[self.head_offset(k)..self.head_offset(k) + self.width];
            *r = scale * a.iter().zip(last).map(|(a, h)| a * h).sum::<f64>();
        }
        raw
    }

    /// Head values before the head activation.
    pub fn forward_raw(&self, params: &[f64], x: &[f64]) -> Result<Outputs> {
        self.check(params, x)?;
        let mut ws = Workspace::default();
        self.hidden_pass(params, x, &mut ws);
        Ok(Outputs {
            values: self.readout(params, &ws),
            heads: self.spec.output_heads,
        })
    }

    pub fn forward(&self, params: &[f64], x: &[f64]) -> Result<Outputs> {
        let mut ws = Workspace::default();
        self.forward_with(params, x, &mut ws)
    }

    pub fn forward_with(&self, params: &[f64], x: &[f64], ws: &mut Workspace) -> Result<Outputs> {
        self.check(params, x)?;
        self.hidden_pass(params, x, ws);
        let raw = self.readout(params, ws);
        let mut values = [0.0; 2];
        for k in 0..self.spec.output_heads {
            values[k] = self.spec.head_activation.apply(raw[k]);
        }
        Ok(Outputs {
            values,
            heads: self.spec.output_heads,
        })
    }

    /// Exact reverse-mode gradient of each head with respect to all
    /// parameters.
    pub fn backward_per_sample(&self, params: &[f64], x: &[f64]) -> Result<Backward> {
        let mut ws = Workspace::default();
        let mut flat = vec![0.0; self.spec.output_heads * self.param_len];
        let outputs = self.backward_into(params, x, &mut ws, &mut flat)?;
        let grads = flat.chunks_exact(self.param_len).map(<[f64]>::to_vec).collect();
        Ok(Backward { outputs, grads })
    }

    /// Writes head gradients into `grads` (`heads x param_len`, head-major)
    /// and returns the head values.
    pub fn backward_into(&self, params: &[f64], x: &[f64], ws: &mut Workspace, grads: &mut [f64]) -> Result<Outputs> {
        self.check(params, x)?;
        let heads = self.spec.output_heads;
        if grads.len() != heads * self.param_len {
            return Err(HedgeError::Shape(format!(
                "gradient buffer has {} slots, need {}",
                grads.len(),
                heads * self.param_len
            )));
        }
        self.hidden_pass(params, x, ws);
        let raw = self.readout(params, ws);
        let scale = 1.0 / (self.width as f64).sqrt();
        let n_layers = self.layers.len();
        let mut values = [0.0; 2];

        for k in 0..heads {
            values[k] = self.spec.head_activation.apply(raw[k]);
            let d_out = self.spec.head_activation.derivative(raw[k]);
            let grad = &mut grads[k * self.param_len..(k + 1) * self.param_len];
            grad.fill(0.0);

            let last = &ws.act[n_layers];
            if !self.spec.freeze_heads {
                let slot = &mut grad[self.head_offset(k)..self.head_offset(k) + self.width];
                for (g, h) in slot.iter_mut().zip(last) {
                    *g = d_out * scale * h;
                }
            }

            let a = &params[self.head_offset(k)..self.head_offset(k) + self.width];
            ws.delta.clear();
            ws.delta.extend(
                a.iter()
                    .zip(&ws.pre[n_layers - 1])
                    .map(|(a, z)| d_out * scale * a * self.spec.activation.derivative(*z)),
            );

            for l in (0..n_layers).rev() {
                let layer = self.layers[l];
                let input = &ws.act[l];
                let (gw, gb) =
                    grad[layer.w_offset..layer.b_offset + layer.fan_out].split_at_mut(layer.fan_in * layer.fan_out);
                for ((row, gb_i), d) in gw.chunks_exact_mut(layer.fan_in).zip(gb.iter_mut()).zip(&ws.delta) {
                    *gb_i = *d;
                    for (g, h) in row.iter_mut().zip(input) {
                        *g = d * h;
                    }
                }
                if l > 0 {
                    let weights = &params[layer.w_offset..layer.b_offset];
                    ws.next_delta.clear();
                    ws.next_delta.resize(layer.fan_in, 0.0);
                    for (row, d) in weights.chunks_exact(layer.fan_in).zip(&ws.delta) {
                        for (nd, w) in ws.next_delta.iter_mut().zip(row) {
                            *nd += w * d;
                        }
                    }
                    for (nd, z) in ws.next_delta.iter_mut().zip(&ws.pre[l - 1]) {
                        *nd *= self.spec.activation.derivative(*z);
                    }
                    std::mem::swap(&mut ws.delta, &mut ws.next_delta);
                }
            }
        }
        Ok(Outputs { values, heads })
    }

    /// Smallest |pre-activation| and |raw head| over a forward pass. Used to
    /// pick kink-free points for finite-difference checks.
    pub fn min_kink_distance(&self, params: &[f64], x: &[f64]) -> Result<f64> {
        self.check(params, x)?;
        let mut ws = Workspace::default();
        self.hidden_pass(params, x, &mut ws);
        let raw = self.readout(params, &ws);
        let hidden = ws.pre.iter().flatten().map(|z| z.abs()).fold(f64::INFINITY, f64::min);
        let heads = raw[..self.spec.output_heads]
            .iter()
            .map(|r| r.abs())
            .fold(f64::INFINITY, f64::min);
        Ok(hidden.min(heads))
    }
}

/// FNV-1a over the structural fields of the spec.
fn fingerprint(spec: &MlpSpec) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    let mut eat = |v: u64| {
        for b in v.to_le_bytes() {
            h ^= u64::from(b);
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
    };
    eat(u64::from(LAYOUT_VERSION));
    eat(spec.input_dim as u64);
    eat(spec.hidden_widths.len() as u64);
    for &w in &spec.hidden_widths {
        eat(w as u64);
    }
    eat(spec.output_heads as u64);
    h
}
