use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{HedgeError, Result};
use crate::hedging::{pnl_with_liability, rollout_with, CostSpec, PolicyConfig, PositionLink};
use crate::instruments::payoff;
use crate::market_paths::PathBatch;
use crate::neural_net::{LayoutStamp, Mlp, ParamVector, Workspace};

/// Which gradient of the smoothed objective the inner loop follows.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LinGradVariant {
    /// Exact gradient of the squared-cost surrogate, including the cross
    /// terms between consecutive positions.
    #[default]
    FullQuadratic,
    /// `-2c sum P_k [d_k G_k - d_{k-1} G_{k-1}]` for the cost part, which
    /// drops those cross terms.
    AsPrinted,
}

/// Bytes needed to cache `paths x steps x heads x params` gradients at f32.
pub fn cache_bytes(paths: usize, steps: usize, heads: usize, params: usize) -> u64 {
    [paths, steps, heads, params]
        .iter()
        .fold(4u64, |acc, &n| acc.saturating_mul(n as u64))
}

pub fn check_budget(paths: usize, steps: usize, heads: usize, params: usize, budget: u64) -> Result<()> {
    let required = cache_bytes(paths, steps, heads, params);
    if required > budget {
        return Err(HedgeError::MemoryBudget {
            required,
            budget,
            paths,
            steps,
            heads,
            params,
        });
    }
    Ok(())
}

/// One path's slice of the cache.
#[derive(Debug, Clone)]
pub struct PathCache {
    prices: Vec<f64>,
    liability: f64,
    initial_position: f64,
    links: Vec<PositionLink>,
    /// `steps x heads`, kept at f64 so the anchor identity is exact.
    outputs: Vec<f64>,
    /// `steps x heads x params`.
    grads: Vec<f32>,
    /// Exact PNL at the anchor, absolute-value costs.
    v_anchor: f64,
}

impl PathCache {
    pub fn v_anchor(&self) -> f64 {
        self.v_anchor
    }

    pub fn links(&self) -> &[PositionLink] {
        &self.links
    }
}

/// Per-sample network gradients at the anchor `w^r` for a minibatch.
#[derive(Debug, Clone)]
pub struct GradientCache {
    anchor: Vec<f64>,
    layout: LayoutStamp,
    heads: usize,
    steps: usize,
    cost: CostSpec,
    paths: Vec<PathCache>,
}

impl GradientCache {
    /// Rolls out the policy at `anchor` on every path of `batch` and stores
    /// the head outputs and their gradients at every step.
    pub fn build(
        net: &Mlp,
        anchor: &ParamVector,
        batch: &PathBatch,
        policy: &PolicyConfig,
        cost: CostSpec,
        include_liability: bool,
        budget_bytes: u64,
    ) -> Result<Self> {
        if anchor.layout != net.layout() {
            return Err(HedgeError::CacheStale(format!(
                "anchor layout {:?} does not match network {:?}",
                anchor.layout,
                net.layout()
            )));
        }
        let heads = net.heads();
        let steps = batch.steps();
        let p = net.param_len();
        check_budget(batch.n_paths(), steps, heads, p, budget_bytes)?;

        let paths = (0..batch.n_paths())
            .into_par_iter()
            .map_init(
                || (Workspace::default(), vec![0.0; heads * p]),
                |(ws, scratch), i| {
                    let trace = rollout_with(Some(net), &anchor.values, batch, i, policy, ws)?;
                    let mut grads = Vec::with_capacity(steps * heads * p);
                    for x in &trace.inputs {
                        net.backward_into(&anchor.values, x, ws, scratch)?;
                        grads.extend(scratch.iter().map(|&g| g as f32));
                    }
                    let prices = batch.path(i).to_vec();
                    let liability = if include_liability {
                        payoff(&policy.option, &prices)?
                    } else {
                        0.0
                    };
                    let v_anchor = pnl_with_liability(&prices, &trace.trajectory, liability, cost)?.v;
                    Ok(PathCache {
                        prices,
                        liability,
                        initial_position: policy.initial_position,
                        links: trace.links,
                        outputs: trace.outputs,
                        grads,
                        v_anchor,
                    })
                },
            )
            .collect::<Result<Vec<_>>>()?;

        Ok(Self {
            anchor: anchor.values.clone(),
            layout: anchor.layout,
            heads,
            steps,
            cost,
            paths,
        })
    }

    pub fn n_paths(&self) -> usize {
        self.paths.len()
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn param_len(&self) -> usize {
        self.anchor.len()
    }

    pub fn anchor(&self) -> &[f64] {
        &self.anchor
    }

    pub fn path(&self, index: usize) -> Result<&PathCache> {
        self.paths.get(index).ok_or(HedgeError::Bounds {
            what: "path",
            index,
            len: self.paths.len(),
        })
    }

    /// Exact PNL at the anchor for every path.
    pub fn anchor_pnl(&self) -> Vec<f64> {
        self.paths.iter().map(|p| p.v_anchor).collect()
    }

    pub fn bytes(&self) -> u64 {
        cache_bytes(self.paths.len(), self.steps, self.heads, self.anchor.len())
    }

    fn check(&self, w: &ParamVector) -> Result<()> {
        if w.layout != self.layout {
            return Err(HedgeError::CacheStale(format!(
                "parameters have layout {:?}, cache was built for {:?}",
                w.layout, self.layout
            )));
        }
        Ok(())
    }

    fn grad_row<'a>(&self, path: &'a PathCache, step: usize, head: usize) -> &'a [f32] {
        let p = self.anchor.len();
        let start = (step * self.heads + head) * p;
        &path.grads[start..start + p]
    }

    /// `f(x, w^r) + grad f(x, w^r) . (w - w^r)`.
    pub fn linearized_output(&self, w: &ParamVector, path: usize, step: usize, head: usize) -> Result<f64> {
        self.check(w)?;
        let pc = self.path(path)?;
        if step >= self.steps {
            return Err(HedgeError::Bounds {
                what: "step",
                index: step,
                len: self.steps,
            });
        }
        if head >= self.heads {
            return Err(HedgeError::Bounds {
                what: "head",
                index: head,
                len: self.heads,
            });
        }
        let dw = self.displacement(&w.values);
        Ok(self.linear_at(pc, &dw, step, head))
    }

    fn displacement(&self, w: &[f64]) -> Vec<f64> {
        w.iter().zip(&self.anchor).map(|(a, b)| a - b).collect()
    }

    fn linear_at(&self, pc: &PathCache, dw: &[f64], step: usize, head: usize) -> f64 {
        let base = pc.outputs[step * self.heads + head];
        let row = self.grad_row(pc, step, head);
        let dot: f64 = row.iter().zip(dw).map(|(&g, d)| f64::from(g) * d).sum();
        base + dot
    }

    /// Linearized positions `d_k(w)` for one path; `dw = w - w^r`.
    fn linear_positions(&self, pc: &PathCache, dw: &[f64]) -> Vec<f64> {
        let mut memo = vec![None; self.steps * self.heads];
        pc.links
            .iter()
            .map(|link| {
                link.value(|s, h| *memo[s * self.heads + h].get_or_insert_with(|| self.linear_at(pc, dw, s, h)))
            })
            .collect()
    }

    /// Smoothed PNL `-Z + sum d_k dP_k - c sum P_k (d_k - d_{k-1})^2` with
    /// linearized positions.
    pub fn v_hat(&self, w: &ParamVector, path: usize) -> Result<f64> {
        self.check(w)?;
        let pc = self.path(path)?;
        let dw = self.displacement(&w.values);
        Ok(self.v_hat_inner(pc, &dw))
    }

    fn v_hat_inner(&self, pc: &PathCache, dw: &[f64]) -> f64 {
        let d = self.linear_positions(pc, dw);
        let mut gain = 0.0;
        let mut smooth_cost = 0.0;
        let mut prev = pc.initial_position;
        for (k, &dk) in d.iter().enumerate() {
            gain += dk * (pc.prices[k + 1] - pc.prices[k]);
            smooth_cost += pc.prices[k] * (dk - prev) * (dk - prev);
            prev = dk;
        }
        -pc.liability + gain - self.cost.rate * smooth_cost
    }

    /// `dV_hat / d d_k` for every position.
    fn position_sensitivities(&self, pc: &PathCache, d: &[f64], variant: LinGradVariant) -> Vec<f64> {
        let c = self.cost.rate;
        let n = d.len();
        let prev = |k: usize| if k == 0 { pc.initial_position } else { d[k - 1] };
        (0..n)
            .map(|k| {
                let dp = pc.prices[k + 1] - pc.prices[k];
                let cost_part = match variant {
                    LinGradVariant::FullQuadratic => {
                        let own = pc.prices[k] * (d[k] - prev(k));
                        let next = if k + 1 < n {
                            pc.prices[k + 1] * (d[k + 1] - d[k])
                        } else {
                            0.0
                        };
                        own - next
                    }
                    LinGradVariant::AsPrinted => {
                        let next_price = if k + 1 < n { pc.prices[k + 1] } else { 0.0 };
                        d[k] * (pc.prices[k] - next_price)
                    }
                };
                dp - 2.0 * c * cost_part
            })
            .collect()
    }

    /// Adds `scale * grad_w V_hat(path)` evaluated at `w^r + dw` into `acc`.
    fn accumulate_grad(&self, pc: &PathCache, dw: &[f64], variant: LinGradVariant, scale: f64, acc: &mut [f64]) {
        let d = self.linear_positions(pc, dw);
        let alpha = self.position_sensitivities(pc, &d, variant);
        let mut beta = vec![0.0; self.steps * self.heads];
        for (link, a) in pc.links.iter().zip(&alpha) {
            if let PositionLink::Head { step, head, sign, .. } = *link {
                beta[step * self.heads + head] += sign * a;
            }
        }
        for (slot, &b) in beta.iter().enumerate() {
            if b == 0.0 {
                continue;
            }
            let coeff = scale * b;
            let row = self.grad_row(pc, slot / self.heads, slot % self.heads);
            for (g, r) in acc.iter_mut().zip(row) {
                *g += coeff * f64::from(*r);
            }
        }
    }

    /// `grad_w V_hat` for one path, computed with per-step vector products
    /// only.
    pub fn grad_v_hat(&self, w: &ParamVector, path: usize, variant: LinGradVariant) -> Result<Vec<f64>> {
        self.check(w)?;
        let pc = self.path(path)?;
        let dw = self.displacement(&w.values);
        let mut acc = vec![0.0; self.anchor.len()];
        self.accumulate_grad(pc, &dw, variant, 1.0, &mut acc);
        Ok(acc)
    }

    /// `sum_i weights_i * grad_w V_hat_i`, summed in a thread-count
    /// independent order.
    pub fn weighted_grad(&self, w: &[f64], weights: &[f64], variant: LinGradVariant) -> Result<Vec<f64>> {
        if w.len() != self.anchor.len() {
            return Err(HedgeError::CacheStale(format!(
                "{} parameters, cache has {}",
                w.len(),
                self.anchor.len()
            )));
        }
        if weights.len() != self.paths.len() {
            return Err(HedgeError::Shape(format!(
                "{} weights for {} cached paths",
                weights.len(),
                self.paths.len()
            )));
        }
        let dw = self.displacement(w);
        let p = self.anchor.len();
        let partials: Vec<Vec<f64>> = self
            .paths
            .par_chunks(SUM_CHUNK)
            .zip(weights.par_chunks(SUM_CHUNK))
            .map(|(paths, ws)| {
                let mut acc = vec![0.0; p];
                for (pc, &wt) in paths.iter().zip(ws) {
                    self.accumulate_grad(pc, &dw, variant, wt, &mut acc);
                }
                acc
            })
            .collect();
        Ok(sum_in_order(partials, p))
    }
}

/// Paths per parallel work unit; partial sums are combined sequentially.
pub(crate) const SUM_CHUNK: usize = 8;

pub(crate) fn sum_in_order(partials: Vec<Vec<f64>>, len: usize) -> Vec<f64> {
    partials.into_iter().fold(vec![0.0; len], |mut acc, part| {
        for (a, b) in acc.iter_mut().zip(part) {
            *a += b;
        }
        acc
    })
}
