//! Closed-form parameter and multiply-accumulate counts.
//!
//! Every count mirrors the module structure built by
//! [`Encoder::new`](crate::conformer::Encoder::new): linear maps carry a
//! bias, layer norms a gain and an offset. "Inference" counts what one frame
//! actually touches: the router plus two experts of every MoE module and a
//! single adapter group.

use std::fmt;

use crate::config::KvWriter;
use crate::conformer::encoder::InputConv;
use crate::conformer::layer::DepthwiseConv;
use crate::conformer::ResidualAdapter;
use crate::conformer::{
    AdapterConfig, ConformerLayerConfig, EncoderConfig, MoePlacement, MoeSelector,
};
use crate::error::{Error, Result};
use crate::moe::TOP_K;
use crate::nn::{FeedForward, LayerNorm, Linear};

/// Parameter counts per component.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Breakdown {
    /// Input projection and input convolutions.
    pub frontend: usize,
    pub causal: usize,
    /// Non-causal layers excluding routers and experts, plus the bridge
    /// projection into the non-causal width.
    pub non_causal: usize,
    pub gates: usize,
    pub experts: usize,
    pub adapters: usize,
}

impl Breakdown {
    pub fn sum(&self) -> usize {
        self.frontend + self.causal + self.non_causal + self.gates + self.experts + self.adapters
    }

    fn fields(&self) -> [(&'static str, usize); 6] {
        [
            ("frontend", self.frontend),
            ("causal", self.causal),
            ("non_causal", self.non_causal),
            ("gates", self.gates),
            ("experts", self.experts),
            ("adapters", self.adapters),
        ]
    }
}

/// Multiply-accumulates per encoder output frame.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct FlopCount {
    /// Two experts per MoE module.
    pub sparse: u64,
    /// Every expert of every MoE module.
    pub dense_equivalent: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamReport {
    pub total_params: usize,
    pub inference_params: usize,
    pub total: Breakdown,
    pub inference: Breakdown,
    pub flops_per_frame: FlopCount,
}

impl ParamReport {
    pub fn activation_ratio(&self) -> f64 {
        self.inference_params as f64 / self.total_params as f64
    }

    pub fn write_kv(&self, w: &mut KvWriter) {
        w.put("total_params", self.total_params)
            .put("inference_params", self.inference_params);
        for (k, v) in self.total.fields() {
            w.put(&format!("total.{k}"), v);
        }
        for (k, v) in self.inference.fields() {
            w.put(&format!("inference.{k}"), v);
        }
        w.put("flops_per_frame.sparse", self.flops_per_frame.sparse)
            .put(
                "flops_per_frame.dense_equivalent",
                self.flops_per_frame.dense_equivalent,
            );
    }
}

impl fmt::Display for ParamReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<12} {:>14} {:>14}", "component", "total", "inference")?;
        for ((k, t), (_, i)) in self.total.fields().iter().zip(self.inference.fields()) {
            writeln!(f, "{k:<12} {t:>14} {i:>14}")?;
        }
        writeln!(
            f,
            "{:<12} {:>14} {:>14}",
            "sum", self.total_params, self.inference_params
        )?;
        writeln!(
            f,
            "activated {:.2}% of parameters; MACs/frame sparse {} dense-equivalent {}",
            100.0 * self.activation_ratio(),
            self.flops_per_frame.sparse,
            self.flops_per_frame.dense_equivalent
        )
    }
}

fn attention_params(d: usize) -> usize {
    LayerNorm::num_params(d) + 4 * Linear::num_params(d, d)
}

fn conv_module_params(d: usize, kernel: usize) -> usize {
    LayerNorm::num_params(d)
        + Linear::num_params(d, 2 * d)
        + DepthwiseConv::num_params(d, kernel)
        + LayerNorm::num_params(d)
        + Linear::num_params(d, d)
}

/// `(rest, gates, experts)` of one FFN slot; `rest` includes the norm and a
/// plain FFN. `experts_used` limits the experts counted.
fn ffn_slot_params(
    cfg: &ConformerLayerConfig,
    moe: bool,
    experts_used: Option<usize>,
) -> (usize, usize, usize) {
    let d = cfg.model_dim;
    let ln = LayerNorm::num_params(d);
    if moe {
        let n = experts_used.unwrap_or(cfg.num_experts).min(cfg.num_experts);
        let expert = FeedForward::num_params(d, cfg.expert_mult * d);
        (ln, d * cfg.num_experts, n * expert)
    } else {
        (ln + FeedForward::num_params(d, cfg.ffn_mult * d), 0, 0)
    }
}

/// `(rest, gates, experts)` of a Conformer layer.
pub fn layer_params(
    cfg: &ConformerLayerConfig,
    experts_used: Option<usize>,
) -> (usize, usize, usize) {
    let d = cfg.model_dim;
    let s = ffn_slot_params(cfg, cfg.moe_placement.start(), experts_used);
    let e = ffn_slot_params(cfg, cfg.moe_placement.end(), experts_used);
    let rest =
        attention_params(d) + conv_module_params(d, cfg.conv_kernel) + LayerNorm::num_params(d);
    (rest + s.0 + e.0, s.1 + e.1, s.2 + e.2)
}

fn breakdown(
    config: &EncoderConfig,
    experts_used: Option<usize>,
    adapter_groups: Option<usize>,
) -> Breakdown {
    let d_in = config.input_dim;
    let frontend = Linear::num_params(config.stacked_feature_dim(), d_in)
        + config.input_convs * InputConv::num_params(d_in, config.input_kernel);

    let mut causal: usize = config
        .causal_layers()
        .iter()
        .map(|l| layer_params(l, None).0)
        .sum();
    if config.causal.layers > 1 && config.stacked_dim() != config.causal.dim {
        causal += Linear::num_params(config.stacked_dim(), config.causal.dim);
    }

    let nc_dim = config.non_causal.dim;
    let mut b = Breakdown {
        frontend,
        causal,
        ..Breakdown::default()
    };
    if config.non_causal.layers > 0 && config.causal_output_dim() != nc_dim {
        b.non_causal += Linear::num_params(config.causal_output_dim(), nc_dim);
    }
    for l in config.non_causal_layers() {
        let (rest, gates, experts) = layer_params(&l, experts_used);
        b.non_causal += rest;
        b.gates += gates;
        b.experts += experts;
    }
    if let Some(AdapterConfig { dim, groups }) = config.adapters {
        let groups = adapter_groups.unwrap_or(groups).min(groups);
        b.adapters = config.non_causal.layers * groups * ResidualAdapter::group_params(nc_dim, dim);
    }
    b
}

fn layer_macs(cfg: &ConformerLayerConfig, experts_used: Option<usize>) -> u64 {
    let d = cfg.model_dim as u64;
    let slot = |moe: bool| -> u64 {
        if moe {
            let n = experts_used.unwrap_or(cfg.num_experts).min(cfg.num_experts) as u64;
            d * cfg.num_experts as u64
                + n * FeedForward::macs(cfg.model_dim, cfg.expert_mult * cfg.model_dim)
        } else {
            FeedForward::macs(cfg.model_dim, cfg.ffn_mult * cfg.model_dim)
        }
    };
    let attention = 4 * d * d;
    let conv = 2 * d * d + cfg.conv_kernel as u64 * d + d * d;
    slot(cfg.moe_placement.start()) + attention + conv + slot(cfg.moe_placement.end())
}

fn macs_per_frame(config: &EncoderConfig, experts_used: Option<usize>) -> u64 {
    let d_in = config.input_dim as u64;
    let per_input_frame = config.stacked_feature_dim() as u64 * d_in
        + config.input_convs as u64 * (config.input_kernel as u64 * d_in + d_in * d_in);
    let mut macs = per_input_frame * config.time_stack as u64;
    macs += config
        .causal_layers()
        .iter()
        .map(|l| layer_macs(l, None))
        .sum::<u64>();
    if config.causal.layers > 1 && config.stacked_dim() != config.causal.dim {
        macs += (config.stacked_dim() * config.causal.dim) as u64;
    }
    let nc_dim = config.non_causal.dim;
    if config.non_causal.layers > 0 && config.causal_output_dim() != nc_dim {
        macs += (config.causal_output_dim() * nc_dim) as u64;
    }
    macs += config
        .non_causal_layers()
        .iter()
        .map(|l| layer_macs(l, experts_used))
        .sum::<u64>();
    if let Some(a) = &config.adapters {
        macs += (config.non_causal.layers * 2 * nc_dim * a.dim) as u64;
    }
    macs
}

/// Weight multiply-accumulates per encoder output frame of the cascaded
/// forward pass. Attention score products are not included.
pub fn flops_per_frame(config: &EncoderConfig) -> FlopCount {
    FlopCount {
        sparse: macs_per_frame(config, Some(TOP_K)),
        dense_equivalent: macs_per_frame(config, None),
    }
}

pub fn count_params(config: &EncoderConfig) -> ParamReport {
    let total = breakdown(config, None, None);
    let inference = breakdown(config, Some(TOP_K), Some(1));
    ParamReport {
        total_params: total.sum(),
        inference_params: inference.sum(),
        total,
        inference,
        flops_per_frame: flops_per_frame(config),
    }
}

/// Model rows of the published size tables.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PublishedModel {
    B1,
    E1,
    E2,
    E3,
    E4,
    E5,
    E6,
    E7,
    E8,
    E9,
    E10,
    B3,
}

impl PublishedModel {
    pub const ALL: [PublishedModel; 12] = [
        PublishedModel::B1,
        PublishedModel::E1,
        PublishedModel::E2,
        PublishedModel::E3,
        PublishedModel::E4,
        PublishedModel::E5,
        PublishedModel::E6,
        PublishedModel::E7,
        PublishedModel::E8,
        PublishedModel::E9,
        PublishedModel::E10,
        PublishedModel::B3,
    ];

    pub fn name(self) -> &'static str {
        match self {
            PublishedModel::B1 => "B1",
            PublishedModel::E1 => "E1",
            PublishedModel::E2 => "E2",
            PublishedModel::E3 => "E3",
            PublishedModel::E4 => "E4",
            PublishedModel::E5 => "E5",
            PublishedModel::E6 => "E6",
            PublishedModel::E7 => "E7",
            PublishedModel::E8 => "E8",
            PublishedModel::E9 => "E9",
            PublishedModel::E10 => "E10",
            PublishedModel::B3 => "B3",
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name().eq_ignore_ascii_case(name))
            .ok_or_else(|| Error::config(format!("unknown model row `{name}`")))
    }

    /// Published `(total, inference)` sizes in millions.
    pub fn reported_millions(self) -> (f64, f64) {
        match self {
            PublishedModel::B1 => (180.0, 180.0),
            PublishedModel::E1 | PublishedModel::E2 => (400.0, 211.0),
            PublishedModel::E3 => (640.0, 246.0),
            PublishedModel::E4 => (295.0, 211.0),
            PublishedModel::E5 => (211.0, 211.0),
            PublishedModel::E6 => (295.0, 196.0),
            PublishedModel::E7 => (203.0, 183.0),
            PublishedModel::E8 => (336.0, 187.0),
            PublishedModel::E9 => (532.0, 187.0),
            PublishedModel::E10 => (729.0, 187.0),
            PublishedModel::B3 => (280.0, 187.0),
        }
    }

    pub fn config(self) -> EncoderConfig {
        let mut c = published_baseline();
        let moe = |c: &mut EncoderConfig, placement, experts, mult, selector| {
            c.moe.placement = placement;
            c.moe.num_experts = experts;
            c.moe.expert_mult = mult;
            c.moe.selector = selector;
        };
        use MoePlacement::*;
        use MoeSelector::*;
        match self {
            PublishedModel::B1 => {}
            PublishedModel::E1 => moe(&mut c, Start, 8, 4, All),
            PublishedModel::E2 => moe(&mut c, End, 8, 4, All),
            PublishedModel::E3 => moe(&mut c, Both, 8, 4, All),
            PublishedModel::E4 => moe(&mut c, End, 4, 4, All),
            PublishedModel::E5 => moe(&mut c, End, 2, 4, All),
            PublishedModel::E6 => moe(&mut c, End, 8, 4, Odd),
            PublishedModel::E7 => moe(&mut c, End, 8, 4, FirstOnly),
            PublishedModel::E8 => moe(&mut c, End, 8, 3, All),
            PublishedModel::E9 => moe(&mut c, End, 16, 3, All),
            PublishedModel::E10 => moe(&mut c, End, 24, 3, All),
            PublishedModel::B3 => {
                c.adapters = Some(AdapterConfig {
                    dim: 512,
                    groups: 12,
                })
            }
        }
        c
    }
}

/// Full-size cascaded geometry: 128-D features stacked 4 frames and
/// downsampled 3x, a 512-D input block with 3 convolutions, 7 causal layers
/// (the first at the stacked 1024-D width), 10 non-causal layers of width
/// 640 with 15 frames of total right context.
pub fn published_baseline() -> EncoderConfig {
    let mut c = EncoderConfig::default();
    c.frontend.feature_dim = 128;
    c.frontend.stack = 4;
    c.frontend.downsample = 3;
    c.input_dim = 512;
    c.input_convs = 3;
    c.input_kernel = 5;
    c.time_stack = 2;
    c.causal.layers = 7;
    c.causal.dim = 512;
    c.causal.heads = 8;
    c.causal.conv_kernel = 15;
    c.causal.left_context = 65;
    c.non_causal.layers = 10;
    c.non_causal.dim = 640;
    c.non_causal.heads = 8;
    c.non_causal.conv_kernel = 15;
    c.non_causal.left_context = 65;
    c.non_causal.right_context = 15;
    c.moe.placement = MoePlacement::None;
    c.moe.num_experts = 8;
    c
}

/// Parameters outside the counted encoder (decoders, embeddings), fitted so
/// that the baseline total equals its published size.
pub fn fit_remainder(baseline: &ParamReport, reported_total: f64) -> f64 {
    reported_total - baseline.total_params as f64
}

/// One published model size next to the count of its config.
#[derive(Clone, Debug, PartialEq)]
pub struct PublishedRow {
    pub model: PublishedModel,
    pub report: ParamReport,
    /// Fitted remainder in millions, added to both total and inference.
    pub remainder_millions: f64,
    pub reported_millions: (f64, f64),
}

impl PublishedRow {
    /// `(total, inference)` in millions, remainder included.
    pub fn counted_millions(&self) -> (f64, f64) {
        (
            self.report.total_params as f64 / 1e6 + self.remainder_millions,
            self.report.inference_params as f64 / 1e6 + self.remainder_millions,
        )
    }

    /// Inference over total, remainder included on both sides.
    pub fn activation_ratio(&self) -> f64 {
        let (t, i) = self.counted_millions();
        i / t
    }
}

/// Every published row, with the remainder fitted once on the baseline.
pub fn published_rows() -> Vec<PublishedRow> {
    let baseline = count_params(&PublishedModel::B1.config());
    let remainder = fit_remainder(&baseline, 1e6 * PublishedModel::B1.reported_millions().0) / 1e6;
    PublishedModel::ALL
        .into_iter()
        .map(|model| PublishedRow {
            model,
            report: count_params(&model.config()),
            remainder_millions: remainder,
            reported_millions: model.reported_millions(),
        })
        .collect()
}

/// Text table of [`published_rows`].
pub fn published_table() -> String {
    let rows = published_rows();
    let mut out = format!(
        "{:<5} {:>10} {:>10} {:>10} {:>10} {:>7}\n",
        "model", "total_M", "reported", "infer_M", "reported", "ratio"
    );
    for r in &rows {
        let (t, i) = r.counted_millions();
        out.push_str(&format!(
            "{:<5} {:>10.2} {:>10.0} {:>10.2} {:>10.0} {:>7.4}\n",
            r.model.name(),
            t,
            r.reported_millions.0,
            i,
            r.reported_millions.1,
            r.activation_ratio()
        ));
    }
    if let Some(r) = rows.first() {
        out.push_str(&format!("remainder_M={:.3}\n", r.remainder_millions));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_ffn_count() {
        assert_eq!(FeedForward::num_params(4, 8), 76);
    }

    #[test]
    fn breakdown_sums_and_no_moe_equality() {
        let mut cfg = EncoderConfig::default();
        cfg.moe.placement = MoePlacement::None;
        let r = count_params(&cfg);
        assert_eq!(r.total_params, r.inference_params);
        assert_eq!(r.flops_per_frame.sparse, r.flops_per_frame.dense_equivalent);
        assert_eq!(r.total.sum(), r.total_params);

        cfg.moe.placement = MoePlacement::End;
        cfg.moe.num_experts = 2;
        let r = count_params(&cfg);
        assert_eq!(r.total_params, r.inference_params);

        cfg.moe.num_experts = 8;
        let r = count_params(&cfg);
        assert!(r.inference_params < r.total_params);
        let expert_macs = FeedForward::macs(96, 4 * 96);
        assert_eq!(
            r.flops_per_frame.dense_equivalent - r.flops_per_frame.sparse,
            6 * expert_macs * 4
        );
    }

    #[test]
    fn adding_an_expert_grows_total_not_activated_experts() {
        let mut cfg = EncoderConfig::default();
        let modules = cfg.moe_module_count();
        for n in 2..10 {
            cfg.moe.num_experts = n;
            let a = count_params(&cfg);
            cfg.moe.num_experts = n + 1;
            let b = count_params(&cfg);
            assert!(b.total_params > a.total_params);
            assert_eq!(b.inference.experts, a.inference.experts);
            // only the new router column is activated
            assert_eq!(b.inference_params - a.inference_params, modules * 96);
        }
    }

    #[test]
    fn model_rows_round_trip_names() {
        for m in PublishedModel::ALL {
            assert_eq!(PublishedModel::from_name(m.name()).unwrap(), m);
            m.config().validate().unwrap();
        }
        assert!(PublishedModel::from_name("E99").is_err());
    }
}
