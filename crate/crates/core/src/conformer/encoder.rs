//! Cascaded causal / non-causal encoder.

use std::collections::HashMap;
use std::sync::Arc;

use crate::conformer::adapter::ResidualAdapter;
use crate::conformer::config::EncoderConfig;
use crate::conformer::frontend::sinusoidal_encoding;
use crate::conformer::layer::{ConformerLayer, DepthwiseConv, FfnPosition};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::moe::{MoeLayer, MoeOutput};
use crate::nn::Linear;
use crate::params::{Initializer, ParamId, ParamStore};
use crate::sequence::{AttentionMask, Segments};
use crate::tensor::{Real, Tensor};

/// Which output of the cascade to produce.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EncoderMode {
    /// Streaming output of the causal stack.
    CausalOnly,
    /// Causal stack followed by the non-causal stack.
    Cascaded,
}

/// Causal convolution block of the input stage: `x + pw(swish(dw(x)))`.
#[derive(Clone, Debug)]
pub struct InputConv {
    pub depthwise: DepthwiseConv,
    pub pointwise: Linear,
}

impl InputConv {
    fn forward<F: Real>(&self, g: &mut Graph<'_, F>, x: Var, segments: &Segments) -> Result<Var> {
        let h = self.depthwise.forward(g, x, segments)?;
        let h = g.swish(h);
        let h = self.pointwise.forward(g, h)?;
        g.add(x, h)
    }

    pub fn num_params(dim: usize, kernel: usize) -> usize {
        DepthwiseConv::num_params(dim, kernel) + Linear::num_params(dim, dim)
    }

    fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = self.depthwise.param_ids();
        ids.extend(self.pointwise.param_ids());
        ids
    }
}

/// Routing of one MoE module during a forward pass.
pub struct MoeTrace {
    /// Index of the non-causal layer.
    pub layer: usize,
    pub position: FfnPosition,
    pub output: MoeOutput,
}

pub struct EncoderOutput {
    pub y: Var,
    /// Sequence lengths at the output frame rate.
    pub segments: Segments,
    pub moe: Vec<MoeTrace>,
}

#[derive(Clone, Debug)]
pub struct Encoder {
    pub config: EncoderConfig,
    pub input_proj: Linear,
    pub input_convs: Vec<InputConv>,
    pub causal: Vec<ConformerLayer>,
    /// Between the first causal layer and the rest when widths differ.
    pub causal_proj: Option<Linear>,
    /// From the causal output to the non-causal width when they differ.
    pub bridge: Option<Linear>,
    pub non_causal: Vec<ConformerLayer>,
    /// One per non-causal layer when adapters are configured.
    pub adapters: Vec<ResidualAdapter>,
}

impl Encoder {
    pub fn new<F: Real>(
        store: &mut ParamStore<F>,
        init: &Initializer,
        config: &EncoderConfig,
    ) -> Result<Self> {
        config.validate()?;
        let d_in = config.input_dim;
        let input_proj = Linear::new(
            store,
            init,
            "input.proj",
            config.stacked_feature_dim(),
            d_in,
        );
        let input_convs = (0..config.input_convs)
            .map(|i| InputConv {
                depthwise: DepthwiseConv::new(
                    store,
                    init,
                    &format!("input.conv{i}.dw"),
                    d_in,
                    config.input_kernel,
                ),
                pointwise: Linear::new(store, init, &format!("input.conv{i}.pw"), d_in, d_in),
            })
            .collect();

        let mut causal = Vec::new();
        let mut causal_proj = None;
        for (i, cfg) in config.causal_layers().iter().enumerate() {
            causal.push(ConformerLayer::new(
                store,
                init,
                &format!("causal{i}"),
                cfg,
            )?);
            if i == 0 && config.causal.layers > 1 && config.stacked_dim() != config.causal.dim {
                causal_proj = Some(Linear::new(
                    store,
                    init,
                    "causal.proj",
                    config.stacked_dim(),
                    config.causal.dim,
                ));
            }
        }

        let nc_dim = config.non_causal.dim;
        let bridge =
            (config.non_causal.layers > 0 && config.causal_output_dim() != nc_dim).then(|| {
                Linear::new(
                    store,
                    init,
                    "noncausal.proj",
                    config.causal_output_dim(),
                    nc_dim,
                )
            });
        let mut non_causal = Vec::new();
        let mut adapters = Vec::new();
        for (i, cfg) in config.non_causal_layers().iter().enumerate() {
            non_causal.push(ConformerLayer::new(
                store,
                init,
                &format!("noncausal{i}"),
                cfg,
            )?);
            if let Some(a) = &config.adapters {
                adapters.push(ResidualAdapter::new(
                    store,
                    init,
                    &format!("adapter{i}"),
                    nc_dim,
                    a.dim,
                    a.groups,
                ));
            }
        }

        Ok(Encoder {
            config: config.clone(),
            input_proj,
            input_convs,
            causal,
            causal_proj,
            bridge,
            non_causal,
            adapters,
        })
    }

    pub fn output_dim(&self, mode: EncoderMode) -> usize {
        match mode {
            EncoderMode::CausalOnly => self.config.causal_output_dim(),
            EncoderMode::Cascaded => self.config.output_dim(),
        }
    }

    /// `features` is `[ΣT × feature_dim]` packed per `segments`. `groups`
    /// gives one adapter group per sequence and is only read by adapters.
    pub fn forward<F: Real>(
        &self,
        g: &mut Graph<'_, F>,
        features: Var,
        segments: &Segments,
        mode: EncoderMode,
        groups: Option<&[usize]>,
    ) -> Result<EncoderOutput> {
        let cfg = &self.config;
        let width = g.shape(features).get(1).copied();
        if width != Some(cfg.frontend.feature_dim) {
            return Err(Error::param(format!(
                "encoder expects {} features per frame, got shape {:?}",
                cfg.frontend.feature_dim,
                g.shape(features)
            )));
        }

        let (x, seg) = g.frame_stack(
            features,
            cfg.frontend.stack,
            cfg.frontend.downsample,
            segments,
        )?;
        let mut x = self.input_proj.forward(g, x)?;
        let positions = seg.lengths().iter().flat_map(|&len| 0..len);
        let pe = Tensor::from_parts(
            vec![seg.total(), cfg.input_dim],
            sinusoidal_encoding(positions, cfg.input_dim),
        );
        let pe = g.input(pe);
        x = g.add(x, pe)?;
        for conv in &self.input_convs {
            x = conv.forward(g, x, &seg)?;
        }
        let (mut x, seg) = g.frame_stack(x, cfg.time_stack, cfg.time_stack, &seg)?;

        let mut masks: HashMap<(usize, usize), Arc<AttentionMask>> = HashMap::new();
        let mut mask_for = |layer: &ConformerLayer| {
            let key = (layer.config.left_context, layer.config.right_context);
            masks
                .entry(key)
                .or_insert_with(|| Arc::new(layer.mask(&seg)))
                .clone()
        };

        for (i, layer) in self.causal.iter().enumerate() {
            x = layer.forward(g, x, &seg, mask_for(layer))?.y;
            if i == 0 {
                if let Some(p) = &self.causal_proj {
                    x = p.forward(g, x)?;
                }
            }
        }
        let mut moe = Vec::new();
        if mode == EncoderMode::Cascaded {
            if let Some(b) = &self.bridge {
                x = b.forward(g, x)?;
            }
            let frame_groups = if self.adapters.is_empty() {
                None
            } else {
                let groups =
                    groups.ok_or_else(|| Error::param("adapters need a group id per sequence"))?;
                if groups.len() != seg.len() {
                    return Err(Error::param(format!(
                        "{} group ids for {} sequences",
                        groups.len(),
                        seg.len()
                    )));
                }
                Some(
                    seg.frame_owner()
                        .into_iter()
                        .map(|s| groups[s])
                        .collect::<Vec<_>>(),
                )
            };
            for (i, layer) in self.non_causal.iter().enumerate() {
                let out = layer.forward(g, x, &seg, mask_for(layer))?;
                x = out.y;
                moe.extend(out.moe.into_iter().map(|(position, output)| MoeTrace {
                    layer: i,
                    position,
                    output,
                }));
                if let (Some(adapter), Some(fg)) = (self.adapters.get(i), &frame_groups) {
                    x = adapter.forward_frames(g, x, fg)?;
                }
            }
        }
        Ok(EncoderOutput {
            y: x,
            segments: seg,
            moe,
        })
    }

    /// Every MoE module in layer order.
    pub fn moe_layers(&self) -> Vec<&MoeLayer> {
        self.non_causal
            .iter()
            .flat_map(|l| [l.ffn_start.moe(), l.ffn_end.moe()])
            .flatten()
            .collect()
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = self.input_proj.param_ids();
        for c in &self.input_convs {
            ids.extend(c.param_ids());
        }
        for l in &self.causal {
            ids.extend(l.param_ids());
        }
        for p in self.causal_proj.iter().chain(&self.bridge) {
            ids.extend(p.param_ids());
        }
        for l in &self.non_causal {
            ids.extend(l.param_ids());
        }
        for a in &self.adapters {
            ids.extend(a.param_ids());
        }
        ids
    }
}

/// An encoder together with its parameters.
#[derive(Clone, Debug)]
pub struct EncoderModel<F> {
    pub config: EncoderConfig,
    pub params: ParamStore<F>,
    pub encoder: Encoder,
}

impl<F: Real> EncoderModel<F> {
    pub fn build(config: &EncoderConfig, seed: u64) -> Result<Self> {
        let mut params = ParamStore::new();
        let encoder = Encoder::new(&mut params, &Initializer::new(seed), config)?;
        Ok(EncoderModel {
            config: config.clone(),
            params,
            encoder,
        })
    }

    /// Forward of packed sequences on plain tensors.
    pub fn forward(
        &self,
        features: &Tensor<F>,
        segments: &Segments,
        mode: EncoderMode,
        groups: Option<&[usize]>,
    ) -> Result<Tensor<F>> {
        let mut g = Graph::new(&self.params);
        let x = g.input(features.clone());
        let out = self.encoder.forward(&mut g, x, segments, mode, groups)?;
        Ok(g.value(out.y).clone())
    }
}

pub fn build_encoder(config: &EncoderConfig, seed: u64) -> Result<EncoderModel<f32>> {
    EncoderModel::build(config, seed)
}

/// Forward of a single sequence `[T × feature_dim]`.
pub fn encoder_forward<F: Real>(
    model: &EncoderModel<F>,
    features: &Tensor<F>,
    mode: EncoderMode,
) -> Result<Tensor<F>> {
    let segments = Segments::single(features.rows());
    let groups = (!model.encoder.adapters.is_empty()).then_some(&[0usize][..]);
    model.forward(features, &segments, mode, groups)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::conformer::config::AdapterConfig;

    fn features(rows: usize, dim: usize, shift: f64) -> Tensor<f64> {
        Tensor::from_fn(rows, dim, |i, j| {
            ((i * 13 + j * 5) as f64 * 0.11 + shift).sin()
        })
    }

    #[test]
    fn store_matches_param_ids_and_is_deterministic() {
        let cfg = EncoderConfig::default();
        let a = EncoderModel::<f32>::build(&cfg, 9).unwrap();
        let b = EncoderModel::<f32>::build(&cfg, 9).unwrap();
        let mut ids = a.encoder.param_ids();
        ids.sort();
        ids.dedup();
        assert_eq!(ids.len(), a.params.len());
        for ((_, na, ta), (_, nb, tb)) in a.params.iter().zip(b.params.iter()) {
            assert_eq!(na, nb);
            assert_eq!(ta, tb);
        }
    }

    #[test]
    fn zero_length_input_gives_zero_length_output() {
        let model = EncoderModel::<f64>::build(&EncoderConfig::default(), 1).unwrap();
        let x: Tensor<f64> = Tensor::zeros(&[0, 16]);
        for mode in [EncoderMode::CausalOnly, EncoderMode::Cascaded] {
            let y = encoder_forward(&model, &x, mode).unwrap();
            assert_eq!(y.rows(), 0);
        }
    }

    #[test]
    fn fresh_adapters_are_identity() {
        let plain = EncoderConfig::default();
        let mut with = plain.clone();
        with.adapters = Some(AdapterConfig { dim: 8, groups: 3 });
        let a = EncoderModel::<f64>::build(&plain, 4).unwrap();
        let b = EncoderModel::<f64>::build(&with, 4).unwrap();
        let x = features(36, 16, 0.0);
        let seg = Segments::single(36);
        let ya = a.forward(&x, &seg, EncoderMode::Cascaded, None).unwrap();
        let yb = b
            .forward(&x, &seg, EncoderMode::Cascaded, Some(&[2]))
            .unwrap();
        assert_eq!(ya, yb);
        assert!(b.forward(&x, &seg, EncoderMode::Cascaded, None).is_err());
    }

    #[test]
    fn packed_batch_matches_separate_sequences() {
        let model = EncoderModel::<f64>::build(&EncoderConfig::default(), 2).unwrap();
        let a = features(24, 16, 0.0);
        let b = features(18, 16, 1.0);
        let mut data = a.data().to_vec();
        data.extend_from_slice(b.data());
        let packed = Tensor::new(vec![42, 16], data).unwrap();
        let y = model
            .forward(
                &packed,
                &Segments::new(vec![24, 18]),
                EncoderMode::Cascaded,
                None,
            )
            .unwrap();
        let ya = encoder_forward(&model, &a, EncoderMode::Cascaded).unwrap();
        let yb = encoder_forward(&model, &b, EncoderMode::Cascaded).unwrap();
        assert_eq!(y.rows(), ya.rows() + yb.rows());
        let d = y.cols();
        let mut max = 0.0f64;
        for (p, q) in y.data().iter().zip(ya.data().iter().chain(yb.data())) {
            max = max.max((p - q).abs());
        }
        assert!(max < 1e-9, "{max} over width {d}");
    }
}
