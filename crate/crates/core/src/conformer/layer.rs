//! One Conformer layer with optional MoE feed-forward modules.
//!
//! ```text
//! x = x + 0.5 * ffn1(ln(x))        (or x + moe(ln(x)) when placed at start)
//! x = x + mhsa(ln(x))
//! x = x + conv(x)
//! x = x + 0.5 * ffn2(ln(x))        (or x + moe(ln(x)) when placed at end)
//! y = ln(x)
//! ```

use std::sync::Arc;

use crate::conformer::config::{ConformerLayerConfig, MoeResidual};
use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::moe::{MoeLayer, MoeOutput};
use crate::nn::{FeedForward, LayerNorm, Linear};
use crate::params::{Initializer, ParamId, ParamStore};
use crate::sequence::{AttentionMask, Segments};
use crate::tensor::{Real, Tensor};

/// Position of a feed-forward module inside the layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FfnPosition {
    Start,
    End,
}

#[derive(Clone, Debug)]
pub enum FfnBody {
    Plain(FeedForward),
    Moe(MoeLayer, MoeResidual),
}

/// Pre-norm feed-forward module with its residual.
#[derive(Clone, Debug)]
pub struct FfnSlot {
    pub norm: LayerNorm,
    pub body: FfnBody,
}

impl FfnSlot {
    fn new<F: Real>(
        store: &mut ParamStore<F>,
        init: &Initializer,
        name: &str,
        cfg: &ConformerLayerConfig,
        moe: bool,
    ) -> Result<Self> {
        let d = cfg.model_dim;
        let norm = LayerNorm::new(store, &format!("{name}.ln"), d);
        let body = if moe {
            let mut layer = MoeLayer::new(
                store,
                init,
                &format!("{name}.moe"),
                d,
                cfg.expert_mult * d,
                cfg.num_experts,
            )?;
            layer.execution = cfg.moe_execution;
            FfnBody::Moe(layer, cfg.moe_residual)
        } else {
            FfnBody::Plain(FeedForward::new(
                store,
                init,
                &format!("{name}.ffn"),
                d,
                cfg.ffn_mult * d,
            ))
        };
        Ok(FfnSlot { norm, body })
    }

    fn forward<F: Real>(&self, g: &mut Graph<'_, F>, x: Var) -> Result<(Var, Option<MoeOutput>)> {
        let h = self.norm.forward(g, x)?;
        match &self.body {
            FfnBody::Plain(ffn) => {
                let h = ffn.forward(g, h)?;
                let h = g.scale(h, F::from_f64_lossy(0.5));
                Ok((g.add(x, h)?, None))
            }
            FfnBody::Moe(moe, residual) => {
                let out = moe.forward(g, h)?;
                let y = match residual {
                    MoeResidual::Full => out.y,
                    MoeResidual::Half => g.scale(out.y, F::from_f64_lossy(0.5)),
                };
                Ok((g.add(x, y)?, Some(out)))
            }
        }
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = self.norm.param_ids();
        match &self.body {
            FfnBody::Plain(ffn) => ids.extend(ffn.param_ids()),
            FfnBody::Moe(moe, _) => ids.extend(moe.param_ids()),
        }
        ids
    }

    pub fn moe(&self) -> Option<&MoeLayer> {
        match &self.body {
            FfnBody::Moe(moe, _) => Some(moe),
            FfnBody::Plain(_) => None,
        }
    }
}

/// Pre-norm multi-head self-attention with output projection.
#[derive(Clone, Debug)]
pub struct SelfAttention {
    pub norm: LayerNorm,
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub heads: usize,
}

impl SelfAttention {
    fn new<F: Real>(
        store: &mut ParamStore<F>,
        init: &Initializer,
        name: &str,
        d: usize,
        heads: usize,
    ) -> Self {
        SelfAttention {
            norm: LayerNorm::new(store, &format!("{name}.ln"), d),
            query: Linear::new(store, init, &format!("{name}.q"), d, d),
            key: Linear::new(store, init, &format!("{name}.k"), d, d),
            value: Linear::new(store, init, &format!("{name}.v"), d, d),
            output: Linear::new(store, init, &format!("{name}.o"), d, d),
            heads,
        }
    }

    fn forward<F: Real>(
        &self,
        g: &mut Graph<'_, F>,
        x: Var,
        mask: Arc<AttentionMask>,
    ) -> Result<Var> {
        let h = self.norm.forward(g, x)?;
        let q = self.query.forward(g, h)?;
        let k = self.key.forward(g, h)?;
        let v = self.value.forward(g, h)?;
        let a = g.attention(q, k, v, self.heads, mask)?;
        let o = self.output.forward(g, a)?;
        g.add(x, o)
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = self.norm.param_ids();
        for l in [&self.query, &self.key, &self.value, &self.output] {
            ids.extend(l.param_ids());
        }
        ids
    }
}

/// Causal depthwise convolution with bias, kernel `[K × C]`.
#[derive(Clone, Debug)]
pub struct DepthwiseConv {
    pub kernel: ParamId,
    pub bias: ParamId,
    pub width: usize,
}

impl DepthwiseConv {
    pub fn new<F: Real>(
        store: &mut ParamStore<F>,
        init: &Initializer,
        name: &str,
        channels: usize,
        width: usize,
    ) -> Self {
        let kernel = store.add(
            format!("{name}.w"),
            init.uniform_fan_in(&format!("{name}.w"), &[width, channels], width),
        );
        let bias = store.add(format!("{name}.b"), Tensor::zeros(&[1, channels]));
        DepthwiseConv {
            kernel,
            bias,
            width,
        }
    }

    pub fn forward<F: Real>(
        &self,
        g: &mut Graph<'_, F>,
        x: Var,
        segments: &Segments,
    ) -> Result<Var> {
        let w = g.param(self.kernel);
        let b = g.param(self.bias);
        g.causal_depthwise_conv(x, w, b, segments)
    }

    pub fn num_params(channels: usize, width: usize) -> usize {
        channels * width + channels
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        vec![self.kernel, self.bias]
    }
}

/// Convolution module: ln, pointwise to 2d, GLU, causal depthwise conv,
/// ln, swish, pointwise back to d.
#[derive(Clone, Debug)]
pub struct ConvModule {
    pub norm: LayerNorm,
    pub pointwise_in: Linear,
    pub depthwise: DepthwiseConv,
    pub conv_norm: LayerNorm,
    pub pointwise_out: Linear,
}

impl ConvModule {
    fn new<F: Real>(
        store: &mut ParamStore<F>,
        init: &Initializer,
        name: &str,
        d: usize,
        kernel: usize,
    ) -> Self {
        ConvModule {
            norm: LayerNorm::new(store, &format!("{name}.ln"), d),
            pointwise_in: Linear::new(store, init, &format!("{name}.pw_in"), d, 2 * d),
            depthwise: DepthwiseConv::new(store, init, &format!("{name}.dw"), d, kernel),
            conv_norm: LayerNorm::new(store, &format!("{name}.dw_ln"), d),
            pointwise_out: Linear::new(store, init, &format!("{name}.pw_out"), d, d),
        }
    }

    fn forward<F: Real>(&self, g: &mut Graph<'_, F>, x: Var, segments: &Segments) -> Result<Var> {
        let d = self.pointwise_out.output;
        let h = self.norm.forward(g, x)?;
        let h = self.pointwise_in.forward(g, h)?;
        let a = g.slice_cols(h, 0, d)?;
        let b = g.slice_cols(h, d, d)?;
        let b = g.sigmoid(b);
        let h = g.mul(a, b)?;
        let h = self.depthwise.forward(g, h, segments)?;
        let h = self.conv_norm.forward(g, h)?;
        let h = g.swish(h);
        let h = self.pointwise_out.forward(g, h)?;
        g.add(x, h)
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = self.norm.param_ids();
        ids.extend(self.pointwise_in.param_ids());
        ids.extend(self.depthwise.param_ids());
        ids.extend(self.conv_norm.param_ids());
        ids.extend(self.pointwise_out.param_ids());
        ids
    }
}

#[derive(Clone, Debug)]
pub struct ConformerLayer {
    pub config: ConformerLayerConfig,
    pub ffn_start: FfnSlot,
    pub attention: SelfAttention,
    pub conv: ConvModule,
    pub ffn_end: FfnSlot,
    pub norm: LayerNorm,
}

/// Output of one layer plus the routing of its MoE modules.
pub struct LayerOutput {
    pub y: Var,
    pub moe: Vec<(FfnPosition, MoeOutput)>,
}

impl ConformerLayer {
    pub fn new<F: Real>(
        store: &mut ParamStore<F>,
        init: &Initializer,
        name: &str,
        config: &ConformerLayerConfig,
    ) -> Result<Self> {
        config.validate()?;
        let d = config.model_dim;
        let p = config.moe_placement;
        Ok(ConformerLayer {
            ffn_start: FfnSlot::new(store, init, &format!("{name}.ffn1"), config, p.start())?,
            attention: SelfAttention::new(store, init, &format!("{name}.mhsa"), d, config.heads),
            conv: ConvModule::new(store, init, &format!("{name}.conv"), d, config.conv_kernel),
            ffn_end: FfnSlot::new(store, init, &format!("{name}.ffn2"), config, p.end())?,
            norm: LayerNorm::new(store, &format!("{name}.ln"), d),
            config: config.clone(),
        })
    }

    /// Attention mask for this layer's context window.
    pub fn mask(&self, segments: &Segments) -> AttentionMask {
        AttentionMask::windowed(
            segments,
            self.config.left_context,
            self.config.right_context,
        )
    }

    pub fn forward<F: Real>(
        &self,
        g: &mut Graph<'_, F>,
        x: Var,
        segments: &Segments,
        mask: Arc<AttentionMask>,
    ) -> Result<LayerOutput> {
        let mut moe = Vec::new();
        let (x, m) = self.ffn_start.forward(g, x)?;
        moe.extend(m.map(|m| (FfnPosition::Start, m)));
        let x = self.attention.forward(g, x, mask)?;
        let x = self.conv.forward(g, x, segments)?;
        let (x, m) = self.ffn_end.forward(g, x)?;
        moe.extend(m.map(|m| (FfnPosition::End, m)));
        let y = self.norm.forward(g, x)?;
        Ok(LayerOutput { y, moe })
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = self.ffn_start.param_ids();
        ids.extend(self.attention.param_ids());
        ids.extend(self.conv.param_ids());
        ids.extend(self.ffn_end.param_ids());
        ids.extend(self.norm.param_ids());
        ids
    }
}

/// Forward of a single layer on one sequence, for tests and tools.
pub fn conformer_layer_forward<F: Real>(
    layer: &ConformerLayer,
    params: &ParamStore<F>,
    x: &Tensor<F>,
) -> Result<Tensor<F>> {
    let segments = Segments::single(x.rows());
    let mask = Arc::new(layer.mask(&segments));
    let mut g = Graph::new(params);
    let xv = g.input(x.clone());
    let out = layer.forward(&mut g, xv, &segments, mask)?;
    Ok(g.value(out.y).clone())
}
