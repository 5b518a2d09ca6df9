//! Mixture-of-experts feed-forward layer with top-2 softmax gating.
//!
//! A frame `x` is scored by the router, `g = softmax(x W)`, and sent to the
//! two experts with the largest gate values. The layer output is
//! `g_1 e_1(x) + g_2 e_2(x)` using the raw softmax probabilities of the
//! selected pair (they are *not* renormalized to sum to one).
//!
//! Load balancing uses `l_aux = (1/N) Σ_i (c_i / S) · m_i`, where `c_i` is
//! how many top-2 slots expert `i` won in the batch, `m_i` its mean gate
//! probability over all `S` frames. `c_i` is a constant for differentiation;
//! the gradient flows through `m_i`.
//!
//! Only the selected experts are evaluated. [`MoeExecution::DenseMixture`]
//! evaluates every expert on every frame and zeroes the non-selected gate
//! weights instead; it computes the same function and exists to cross-check
//! the sparse path and to measure dense-equivalent cost.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::FeedForward;
use crate::params::{Initializer, ParamId, ParamStore};
use crate::tensor::{top_k, Real, Tensor};

/// Experts selected per frame.
pub const TOP_K: usize = 2;

/// How the selected experts are evaluated.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum MoeExecution {
    /// Gather the frames routed to each expert and run only those.
    #[default]
    Sparse,
    /// Run all experts on all frames, weight by the top-2-masked gates.
    DenseMixture,
}

impl FromStr for MoeExecution {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sparse" => Ok(MoeExecution::Sparse),
            "dense" => Ok(MoeExecution::DenseMixture),
            other => Err(Error::config(format!("unknown moe execution `{other}`"))),
        }
    }
}

impl fmt::Display for MoeExecution {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MoeExecution::Sparse => "sparse",
            MoeExecution::DenseMixture => "dense",
        })
    }
}

/// Router plus a set of identically shaped expert FFNs.
#[derive(Clone, Debug)]
pub struct MoeLayer {
    /// Router weights, `[model_dim × num_experts]`, zero at initialization.
    pub gate: ParamId,
    pub experts: Vec<FeedForward>,
    pub model_dim: usize,
    pub hidden_dim: usize,
    pub execution: MoeExecution,
}

/// Top-2 selection for a batch of frames plus the aggregates used by the
/// auxiliary loss and the capacity statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct RoutingDecision {
    pub num_experts: usize,
    /// Per frame: expert indices in descending gate order.
    pub experts: Vec<[usize; TOP_K]>,
    /// Per frame: the raw gate probabilities of the selected experts.
    pub weights: Vec<[f64; TOP_K]>,
    /// `c_i`: number of frames that selected expert `i`.
    pub counts: Vec<usize>,
    /// `m_i`: mean gate probability of expert `i` over all frames.
    pub mean_gates: Vec<f64>,
}

impl RoutingDecision {
    /// `S`, the number of routed frames.
    pub fn frames(&self) -> usize {
        self.experts.len()
    }

    /// `c_i / S` for every expert; sums to 2.
    pub fn load_fractions(&self) -> Vec<f64> {
        let s = self.frames().max(1) as f64;
        self.counts.iter().map(|&c| c as f64 / s).collect()
    }

    /// Frames routed to `expert`, in frame order.
    pub fn frames_for(&self, expert: usize) -> Vec<usize> {
        self.experts
            .iter()
            .enumerate()
            .filter(|(_, sel)| sel.contains(&expert))
            .map(|(t, _)| t)
            .collect()
    }
}

/// Per-expert over-capacity ratios of one batch.
#[derive(Clone, Debug, PartialEq)]
pub struct CapacityStats {
    pub ratios: Vec<f64>,
    /// Frames an expert may take before counting as over capacity.
    pub threshold: f64,
    pub frames: usize,
}

/// Result of [`MoeLayer::forward`].
pub struct MoeOutput {
    pub y: Var,
    pub decision: RoutingDecision,
    /// `l_aux` as a differentiable `[1 × 1]` node.
    pub aux_loss: Var,
    /// Expert FFN evaluations performed, counted per frame.
    pub expert_evaluations: usize,
}

impl MoeLayer {
    pub fn new<F: Real>(
        store: &mut ParamStore<F>,
        init: &Initializer,
        name: &str,
        model_dim: usize,
        hidden_dim: usize,
        num_experts: usize,
    ) -> Result<Self> {
        if num_experts < TOP_K {
            return Err(Error::config(format!(
                "a top-2 MoE layer needs at least 2 experts, got {num_experts}"
            )));
        }
        let gate = store.add(
            format!("{name}.gate"),
            Tensor::zeros(&[model_dim, num_experts]),
        );
        let experts = (0..num_experts)
            .map(|i| {
                FeedForward::new(
                    store,
                    init,
                    &format!("{name}.expert{i}"),
                    model_dim,
                    hidden_dim,
                )
            })
            .collect();
        Ok(MoeLayer {
            gate,
            experts,
            model_dim,
            hidden_dim,
            execution: MoeExecution::Sparse,
        })
    }

    pub fn num_experts(&self) -> usize {
        self.experts.len()
    }

    /// Total parameters: router plus every expert.
    pub fn num_params(model_dim: usize, hidden_dim: usize, num_experts: usize) -> usize {
        model_dim * num_experts + num_experts * FeedForward::num_params(model_dim, hidden_dim)
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = vec![self.gate];
        for e in &self.experts {
            ids.extend(e.param_ids());
        }
        ids
    }

    pub fn forward<F: Real>(&self, g: &mut Graph<'_, F>, x: Var) -> Result<MoeOutput> {
        let shape = g.shape(x).to_vec();
        if shape.len() != 2 || shape[1] != self.model_dim {
            return Err(Error::param(format!(
                "moe input shape {shape:?}, expected [frames, {}]",
                self.model_dim
            )));
        }
        let frames = shape[0];
        let n = self.num_experts();
        if frames == 0 {
            let y = g.input(Tensor::zeros(&[0, self.model_dim]));
            let aux_loss = g.input(Tensor::scalar(F::zero()));
            let decision = RoutingDecision {
                num_experts: n,
                experts: Vec::new(),
                weights: Vec::new(),
                counts: vec![0; n],
                mean_gates: vec![0.0; n],
            };
            return Ok(MoeOutput {
                y,
                decision,
                aux_loss,
                expert_evaluations: 0,
            });
        }

        let w = g.param(self.gate);
        let logits = g.matmul(x, w)?;
        let gates = g.softmax_rows(logits)?;
        let decision = route_top2(g.value(gates))?;

        let mut parts = Vec::with_capacity(n);
        let mut evaluations = 0;
        match self.execution {
            MoeExecution::Sparse => {
                for (e, expert) in self.experts.iter().enumerate() {
                    let rows = decision.frames_for(e);
                    if rows.is_empty() {
                        continue;
                    }
                    let xe = g.gather_rows(x, &rows)?;
                    let he = expert.forward(g, xe)?;
                    let positions: Vec<_> = rows.iter().map(|&t| (t, e)).collect();
                    let we = g.gather_elems(gates, &positions)?;
                    let part = g.mul_col(he, we)?;
                    evaluations += rows.len();
                    parts.push((part, rows));
                }
            }
            MoeExecution::DenseMixture => {
                let mut mask = vec![F::zero(); frames * n];
                for (t, sel) in decision.experts.iter().enumerate() {
                    for &e in sel {
                        mask[t * n + e] = F::one();
                    }
                }
                let mask = g.input(Tensor::from_parts(vec![frames, n], mask));
                let masked = g.mul(gates, mask)?;
                let all_rows: Vec<usize> = (0..frames).collect();
                for (e, expert) in self.experts.iter().enumerate() {
                    let he = expert.forward(g, x)?;
                    let we = g.slice_cols(masked, e, 1)?;
                    let part = g.mul_col(he, we)?;
                    evaluations += frames;
                    parts.push((part, all_rows.clone()));
                }
            }
        }
        let y = g.scatter_add(frames, self.model_dim, parts)?;

        // l_aux = (1/N) Σ (c_i/S) m_i with c_i constant
        let m = g.mean_rows(gates)?;
        let load = Tensor::from_parts(
            vec![1, n],
            decision
                .load_fractions()
                .into_iter()
                .map(F::from_f64_lossy)
                .collect(),
        );
        let load = g.input(load);
        let weighted = g.mul(m, load)?;
        let total = g.sum(weighted);
        let aux_loss = g.scale(total, F::one() / F::from_usize(n).unwrap());

        Ok(MoeOutput {
            y,
            decision,
            aux_loss,
            expert_evaluations: evaluations,
        })
    }
}

/// Router probabilities `softmax(x W)` for `x: [frames × d]`, `W: [d × N]`.
pub fn gate<F: Real>(x: &Tensor<F>, gate_weights: &Tensor<F>) -> Result<Tensor<F>> {
    if x.rank() != 2 || gate_weights.rank() != 2 || x.cols() != gate_weights.rows() {
        return Err(Error::param(format!(
            "gate: input {:?} does not match router {:?}",
            x.shape(),
            gate_weights.shape()
        )));
    }
    x.matmul(gate_weights)?.softmax(1)
}

/// Selects the two largest gates per frame (ties go to the lower expert
/// index) and fills the batch aggregates.
pub fn route_top2<F: Real>(gates: &Tensor<F>) -> Result<RoutingDecision> {
    if gates.rank() != 2 {
        return Err(Error::param("route_top2 expects [frames × experts] gates"));
    }
    let (frames, n) = (gates.rows(), gates.cols());
    if n < TOP_K {
        return Err(Error::config(format!(
            "top-2 routing needs at least 2 experts, got {n}"
        )));
    }
    let mut experts = Vec::with_capacity(frames);
    let mut weights = Vec::with_capacity(frames);
    let mut counts = vec![0usize; n];
    let mut sums = vec![0.0f64; n];
    for t in 0..frames {
        let row = gates.row(t);
        let (idx, vals) = top_k(row, TOP_K)?;
        for &e in &idx {
            counts[e] += 1;
        }
        for (s, &v) in sums.iter_mut().zip(row) {
            *s += v.to_f64_lossy();
        }
        experts.push([idx[0], idx[1]]);
        weights.push([vals[0].to_f64_lossy(), vals[1].to_f64_lossy()]);
    }
    let mean_gates = sums
        .into_iter()
        .map(|s| if frames == 0 { 0.0 } else { s / frames as f64 })
        .collect();
    Ok(RoutingDecision {
        num_experts: n,
        experts,
        weights,
        counts,
        mean_gates,
    })
}

/// `y_t = g_{t,1} e1_t + g_{t,2} e2_t`, where `e1`/`e2` hold each frame's
/// top-1 / top-2 expert outputs.
pub fn combine<F: Real>(
    decision: &RoutingDecision,
    top1_outputs: &Tensor<F>,
    top2_outputs: &Tensor<F>,
) -> Result<Tensor<F>> {
    let frames = decision.frames();
    if top1_outputs.rank() != 2
        || top1_outputs.shape() != top2_outputs.shape()
        || top1_outputs.rows() != frames
    {
        return Err(Error::param(format!(
            "combine: expert outputs {:?} / {:?} for {frames} frames",
            top1_outputs.shape(),
            top2_outputs.shape()
        )));
    }
    let d = top1_outputs.cols();
    let mut out = Vec::with_capacity(frames * d);
    for t in 0..frames {
        let [g1, g2] = decision.weights[t].map(F::from_f64_lossy);
        out.extend(
            top1_outputs
                .row(t)
                .iter()
                .zip(top2_outputs.row(t))
                .map(|(&a, &b)| g1 * a + g2 * b),
        );
    }
    Ok(Tensor::from_parts(vec![frames, d], out))
}

/// `l_aux = (1/N) Σ_i (c_i / S) · m_i`.
pub fn aux_load_balance_loss(decision: &RoutingDecision) -> Result<f64> {
    let s = decision.frames();
    if s == 0 {
        return Err(Error::param("auxiliary loss of an empty batch"));
    }
    let n = decision.num_experts as f64;
    let total: f64 = decision
        .counts
        .iter()
        .zip(&decision.mean_gates)
        .map(|(&c, &m)| c as f64 / s as f64 * m)
        .sum();
    Ok(total / n)
}

/// Over-capacity ratio per expert: with threshold `T = factor · 2S/N`,
/// `ratio_i = max(0, c_i - T) / S`.
pub fn over_capacity_ratio(
    decision: &RoutingDecision,
    capacity_factor: f64,
) -> Result<CapacityStats> {
    if !(capacity_factor > 0.0) {
        return Err(Error::param(format!(
            "capacity factor must be positive, got {capacity_factor}"
        )));
    }
    let s = decision.frames();
    let threshold = capacity_factor * (TOP_K * s) as f64 / decision.num_experts as f64;
    let ratios = decision
        .counts
        .iter()
        .map(|&c| {
            if s == 0 {
                0.0
            } else {
                (c as f64 - threshold).max(0.0) / s as f64
            }
        })
        .collect();
    Ok(CapacityStats {
        ratios,
        threshold,
        frames: s,
    })
}

/// Output of [`moe_forward`].
#[derive(Clone, Debug)]
pub struct MoeResult<F> {
    pub y: Tensor<F>,
    pub decision: RoutingDecision,
    pub expert_evaluations: usize,
}

/// Runs one MoE layer on a plain tensor.
pub fn moe_forward<F: Real>(
    x: &Tensor<F>,
    layer: &MoeLayer,
    params: &ParamStore<F>,
) -> Result<MoeResult<F>> {
    let mut g = Graph::new(params);
    let xv = g.input(x.clone());
    let out = layer.forward(&mut g, xv)?;
    Ok(MoeResult {
        y: g.value(out.y).clone(),
        decision: out.decision,
        expert_evaluations: out.expert_evaluations,
    })
}

/// One line of the routing statistics stream:
/// `layer=<l> expert=<i> count=<c_i> mean_gate=<m_i> over_capacity=<ratio>`.
#[derive(Clone, Debug, PartialEq)]
pub struct RoutingRecord {
    pub layer: usize,
    pub expert: usize,
    pub count: usize,
    pub mean_gate: f64,
    pub over_capacity: f64,
}

impl RoutingRecord {
    /// One record per expert of a routed batch.
    pub fn from_decision(
        layer: usize,
        decision: &RoutingDecision,
        capacity_factor: f64,
    ) -> Result<Vec<RoutingRecord>> {
        let stats = over_capacity_ratio(decision, capacity_factor)?;
        Ok((0..decision.num_experts)
            .map(|e| RoutingRecord {
                layer,
                expert: e,
                count: decision.counts[e],
                mean_gate: decision.mean_gates[e],
                over_capacity: stats.ratios[e],
            })
            .collect())
    }
}

fn parse_value<T: FromStr>(field: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::param(format!("bad value in `{field}`")))
}

impl fmt::Display for RoutingRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "layer={} expert={} count={} mean_gate={} over_capacity={}",
            self.layer, self.expert, self.count, self.mean_gate, self.over_capacity
        )
    }
}

impl FromStr for RoutingRecord {
    type Err = Error;

    fn from_str(line: &str) -> Result<Self> {
        let mut rec = RoutingRecord {
            layer: 0,
            expert: 0,
            count: 0,
            mean_gate: 0.0,
            over_capacity: 0.0,
        };
        let mut seen = 0;
        for field in line.split_whitespace() {
            let (k, v) = field
                .split_once('=')
                .ok_or_else(|| Error::param(format!("malformed field `{field}`")))?;
            match k {
                "layer" => rec.layer = parse_value(field, v)?,
                "expert" => rec.expert = parse_value(field, v)?,
                "count" => rec.count = parse_value(field, v)?,
                "mean_gate" => rec.mean_gate = parse_value(field, v)?,
                "over_capacity" => rec.over_capacity = parse_value(field, v)?,
                _ => continue,
            }
            seen += 1;
        }
        if seen != 5 {
            return Err(Error::param(format!("incomplete routing record `{line}`")));
        }
        Ok(rec)
    }
}
