//! Encoder geometry.
//!
//! [`EncoderConfig`] is the single description used to build, train and
//! count a model. The per-layer [`ConformerLayerConfig`] lists are derived
//! from it, so the flat file format only carries stack-level keys.
//!
//! Layout of the cascaded encoder:
//!
//! ```text
//! features -> frame stack (stack, downsample)
//!          -> input projection + sinusoidal positions + causal conv blocks
//!          -> time stacking (concatenate neighbouring frames, halve the rate)
//!          -> causal Conformer layers (first at the stacked width, then a
//!             projection down to `causal.dim`)          = causal_only output
//!          -> projection -> non-causal Conformer layers (+ adapters)
//!                                                       = cascaded output
//! ```

use std::fmt;
use std::str::FromStr;

use crate::config::{KvMap, KvWriter};
use crate::error::{Error, Result};
use crate::moe::MoeExecution;

/// Which feed-forward modules of a Conformer layer are MoE layers.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum MoePlacement {
    #[default]
    None,
    Start,
    End,
    Both,
}

impl MoePlacement {
    pub fn start(self) -> bool {
        matches!(self, MoePlacement::Start | MoePlacement::Both)
    }

    pub fn end(self) -> bool {
        matches!(self, MoePlacement::End | MoePlacement::Both)
    }
}

/// Which non-causal layers receive the MoE placement.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum MoeSelector {
    #[default]
    All,
    /// Layers 1, 3, 5, ... counting from one.
    Odd,
    FirstOnly,
}

impl MoeSelector {
    pub fn selects(self, index: usize) -> bool {
        match self {
            MoeSelector::All => true,
            MoeSelector::Odd => index % 2 == 0,
            MoeSelector::FirstOnly => index == 0,
        }
    }
}

macro_rules! keyword_enum {
    ($ty:ty, $what:literal, $($variant:path => $name:literal),+ $(,)?) => {
        impl FromStr for $ty {
            type Err = Error;
            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($name => Ok($variant),)+
                    other => Err(Error::config(format!(concat!("unknown ", $what, " `{}`"), other))),
                }
            }
        }

        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(match self {
                    $($variant => $name,)+
                })
            }
        }
    };
}

keyword_enum!(MoePlacement, "moe placement",
    MoePlacement::None => "none",
    MoePlacement::Start => "start",
    MoePlacement::End => "end",
    MoePlacement::Both => "both",
);

keyword_enum!(MoeSelector, "moe layer selector",
    MoeSelector::All => "all",
    MoeSelector::Odd => "odd",
    MoeSelector::FirstOnly => "first_only",
);

/// Residual connection around an MoE feed-forward module.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum MoeResidual {
    /// `x + moe(x)`.
    #[default]
    Full,
    /// `x + 0.5 moe(x)`, like the plain macaron FFNs.
    Half,
}

keyword_enum!(MoeResidual, "moe residual",
    MoeResidual::Full => "full",
    MoeResidual::Half => "half",
);

/// One Conformer layer.
#[derive(Clone, Debug, PartialEq)]
pub struct ConformerLayerConfig {
    pub model_dim: usize,
    pub ffn_mult: usize,
    pub heads: usize,
    pub conv_kernel: usize,
    pub causal: bool,
    pub left_context: usize,
    pub right_context: usize,
    pub moe_placement: MoePlacement,
    pub num_experts: usize,
    pub expert_mult: usize,
    pub moe_residual: MoeResidual,
    pub moe_execution: MoeExecution,
}

impl ConformerLayerConfig {
    /// Plain causal layer of the given width, no MoE.
    pub fn plain(model_dim: usize, heads: usize, conv_kernel: usize) -> Self {
        ConformerLayerConfig {
            model_dim,
            ffn_mult: 4,
            heads,
            conv_kernel,
            causal: true,
            left_context: 64,
            right_context: 0,
            moe_placement: MoePlacement::None,
            num_experts: 0,
            expert_mult: 4,
            moe_residual: MoeResidual::Full,
            moe_execution: MoeExecution::Sparse,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.model_dim == 0 || self.ffn_mult == 0 || self.conv_kernel == 0 {
            return Err(Error::config(
                "layer dims, ffn_mult and conv kernel must be positive",
            ));
        }
        if self.heads == 0 || self.model_dim % self.heads != 0 {
            return Err(Error::config(format!(
                "{} heads do not divide model dim {}",
                self.heads, self.model_dim
            )));
        }
        if self.causal && self.right_context != 0 {
            return Err(Error::config("a causal layer cannot have right context"));
        }
        if self.moe_placement != MoePlacement::None {
            if self.num_experts < 2 {
                return Err(Error::config(format!(
                    "MoE placement needs at least 2 experts, got {}",
                    self.num_experts
                )));
            }
            if self.expert_mult == 0 {
                return Err(Error::config("expert_mult must be positive"));
            }
        }
        Ok(())
    }
}

/// Feature frontend: stacking and downsampling of input feature frames.
#[derive(Clone, Debug, PartialEq)]
pub struct FrontendConfig {
    pub feature_dim: usize,
    pub stack: usize,
    pub downsample: usize,
}

/// One Conformer stack (causal or non-causal).
#[derive(Clone, Debug, PartialEq)]
pub struct StackConfig {
    pub layers: usize,
    pub dim: usize,
    pub heads: usize,
    pub ffn_mult: usize,
    pub conv_kernel: usize,
    pub left_context: usize,
    /// Total right context of the stack in frames, split across layers.
    pub right_context: usize,
}

/// Mixture-of-experts settings for the non-causal stack.
#[derive(Clone, Debug, PartialEq)]
pub struct MoeConfig {
    pub placement: MoePlacement,
    pub num_experts: usize,
    pub expert_mult: usize,
    pub selector: MoeSelector,
    pub residual: MoeResidual,
    pub execution: MoeExecution,
}

/// Residual adapters after every non-causal layer, one set per group.
#[derive(Clone, Debug, PartialEq)]
pub struct AdapterConfig {
    pub dim: usize,
    pub groups: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderConfig {
    pub frontend: FrontendConfig,
    /// Width of the causal input block.
    pub input_dim: usize,
    pub input_convs: usize,
    pub input_kernel: usize,
    /// Neighbouring frames concatenated by the mid-stack stacking step.
    pub time_stack: usize,
    pub causal: StackConfig,
    pub non_causal: StackConfig,
    pub moe: MoeConfig,
    pub adapters: Option<AdapterConfig>,
}

impl Default for EncoderConfig {
    /// Desk-scale geometry: 3 causal layers of width 64, 4 non-causal layers
    /// of width 96, 4 heads, end-MoE with 4 experts.
    fn default() -> Self {
        EncoderConfig {
            frontend: FrontendConfig {
                feature_dim: 16,
                stack: 3,
                downsample: 3,
            },
            input_dim: 64,
            input_convs: 3,
            input_kernel: 3,
            time_stack: 2,
            causal: StackConfig {
                layers: 3,
                dim: 64,
                heads: 4,
                ffn_mult: 4,
                conv_kernel: 5,
                left_context: 32,
                right_context: 0,
            },
            non_causal: StackConfig {
                layers: 4,
                dim: 96,
                heads: 4,
                ffn_mult: 4,
                conv_kernel: 5,
                left_context: 32,
                right_context: 8,
            },
            moe: MoeConfig {
                placement: MoePlacement::End,
                num_experts: 4,
                expert_mult: 4,
                selector: MoeSelector::All,
                residual: MoeResidual::Full,
                execution: MoeExecution::Sparse,
            },
            adapters: None,
        }
    }
}

impl EncoderConfig {
    /// Width of the frontend output.
    pub fn stacked_feature_dim(&self) -> usize {
        self.frontend.feature_dim * self.frontend.stack
    }

    /// Input feature frames per encoder output frame.
    pub fn total_downsample(&self) -> usize {
        self.frontend.downsample * self.time_stack
    }

    /// Width entering the first causal layer.
    pub fn stacked_dim(&self) -> usize {
        self.input_dim * self.time_stack
    }

    /// Width of the causal stack output.
    pub fn causal_output_dim(&self) -> usize {
        if self.causal.layers <= 1 {
            self.stacked_dim()
        } else {
            self.causal.dim
        }
    }

    /// Width of the cascaded output.
    pub fn output_dim(&self) -> usize {
        if self.non_causal.layers == 0 {
            self.causal_output_dim()
        } else {
            self.non_causal.dim
        }
    }

    pub fn causal_layers(&self) -> Vec<ConformerLayerConfig> {
        let s = &self.causal;
        (0..s.layers)
            .map(|i| ConformerLayerConfig {
                model_dim: if i == 0 { self.stacked_dim() } else { s.dim },
                ffn_mult: s.ffn_mult,
                heads: s.heads,
                conv_kernel: s.conv_kernel,
                causal: true,
                left_context: s.left_context,
                right_context: 0,
                moe_placement: MoePlacement::None,
                num_experts: 0,
                expert_mult: self.moe.expert_mult,
                moe_residual: self.moe.residual,
                moe_execution: self.moe.execution,
            })
            .collect()
    }

    /// Right context of each non-causal layer: the total split as evenly as
    /// possible, earlier layers taking the remainder.
    pub fn right_context_split(&self) -> Vec<usize> {
        let n = self.non_causal.layers;
        if n == 0 {
            return Vec::new();
        }
        let total = self.non_causal.right_context;
        (0..n)
            .map(|i| total / n + usize::from(i < total % n))
            .collect()
    }

    pub fn non_causal_layers(&self) -> Vec<ConformerLayerConfig> {
        let s = &self.non_causal;
        self.right_context_split()
            .into_iter()
            .enumerate()
            .map(|(i, right)| {
                let placement = if self.moe.selector.selects(i) {
                    self.moe.placement
                } else {
                    MoePlacement::None
                };
                ConformerLayerConfig {
                    model_dim: s.dim,
                    ffn_mult: s.ffn_mult,
                    heads: s.heads,
                    conv_kernel: s.conv_kernel,
                    causal: false,
                    left_context: s.left_context,
                    right_context: right,
                    moe_placement: placement,
                    num_experts: self.moe.num_experts,
                    expert_mult: self.moe.expert_mult,
                    moe_residual: self.moe.residual,
                    moe_execution: self.moe.execution,
                }
            })
            .collect()
    }

    /// Number of non-causal layers with at least one MoE module.
    pub fn moe_layer_count(&self) -> usize {
        self.non_causal_layers()
            .iter()
            .filter(|l| l.moe_placement != MoePlacement::None)
            .count()
    }

    /// Number of MoE modules (a `both` layer has two).
    pub fn moe_module_count(&self) -> usize {
        self.non_causal_layers()
            .iter()
            .map(|l| usize::from(l.moe_placement.start()) + usize::from(l.moe_placement.end()))
            .sum()
    }

    pub fn validate(&self) -> Result<()> {
        let f = &self.frontend;
        if f.feature_dim == 0 || f.stack == 0 || f.downsample == 0 {
            return Err(Error::config("frontend dims must be positive"));
        }
        if self.input_dim == 0 || self.input_kernel == 0 || self.time_stack == 0 {
            return Err(Error::config("input block dims must be positive"));
        }
        if self.causal.layers > 0 && self.causal.dim == 0 {
            return Err(Error::config("causal.dim must be positive"));
        }
        if self.non_causal.layers > 0 && self.non_causal.dim == 0 {
            return Err(Error::config("noncausal.dim must be positive"));
        }
        if self.non_causal.layers == 0 && self.non_causal.right_context > 0 {
            return Err(Error::config("right context needs non-causal layers"));
        }
        for layer in self.causal_layers().iter().chain(&self.non_causal_layers()) {
            layer.validate()?;
        }
        if self.moe.placement != MoePlacement::None && self.moe.num_experts < 2 {
            return Err(Error::config("moe.num_experts must be at least 2"));
        }
        if let Some(a) = &self.adapters {
            if a.dim == 0 || a.groups == 0 {
                return Err(Error::config("adapters need positive dim and groups"));
            }
            if self.non_causal.layers == 0 {
                return Err(Error::config(
                    "adapters sit after non-causal layers; none configured",
                ));
            }
        }
        Ok(())
    }

    /// Reads the encoder keys from a flat config, defaulting missing keys to
    /// [`EncoderConfig::default`].
    pub fn from_kv(kv: &mut KvMap) -> Result<Self> {
        let d = EncoderConfig::default();
        let stack = |kv: &mut KvMap, prefix: &str, def: &StackConfig| -> Result<StackConfig> {
            Ok(StackConfig {
                layers: kv.get_or(&format!("{prefix}.layers"), def.layers)?,
                dim: kv.get_or(&format!("{prefix}.dim"), def.dim)?,
                heads: kv.get_or(&format!("{prefix}.heads"), def.heads)?,
                ffn_mult: kv.get_or(&format!("{prefix}.ffn_mult"), def.ffn_mult)?,
                conv_kernel: kv.get_or(&format!("{prefix}.kernel"), def.conv_kernel)?,
                left_context: kv.get_or(&format!("{prefix}.left_context"), def.left_context)?,
                right_context: kv.get_or(&format!("{prefix}.right_context"), def.right_context)?,
            })
        };
        let causal = stack(kv, "causal", &d.causal)?;
        let non_causal = stack(kv, "noncausal", &d.non_causal)?;
        let adapter_dim: usize = kv.get_or("adapters.dim", 0)?;
        let adapter_groups: usize = kv.get_or("adapters.groups", 0)?;
        let adapters = match (adapter_dim, adapter_groups) {
            (0, 0) => None,
            (dim, groups) => Some(AdapterConfig { dim, groups }),
        };
        let cfg = EncoderConfig {
            frontend: FrontendConfig {
                feature_dim: kv.get_or("frontend.feature_dim", d.frontend.feature_dim)?,
                stack: kv.get_or("frontend.stack", d.frontend.stack)?,
                downsample: kv.get_or("frontend.downsample", d.frontend.downsample)?,
            },
            input_dim: kv.get_or("input.dim", d.input_dim)?,
            input_convs: kv.get_or("input.convs", d.input_convs)?,
            input_kernel: kv.get_or("input.kernel", d.input_kernel)?,
            time_stack: kv.get_or("input.time_stack", d.time_stack)?,
            causal,
            non_causal,
            moe: MoeConfig {
                placement: kv.get_or("moe.placement", d.moe.placement)?,
                num_experts: kv.get_or("moe.num_experts", d.moe.num_experts)?,
                expert_mult: kv.get_or("moe.expert_mult", d.moe.expert_mult)?,
                selector: kv.get_or("moe.selector", d.moe.selector)?,
                residual: kv.get_or("moe.residual", d.moe.residual)?,
                execution: kv.get_or("moe.execution", d.moe.execution)?,
            },
            adapters,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut kv = KvMap::parse(text)?;
        let cfg = Self::from_kv(&mut kv)?;
        kv.finish()?;
        Ok(cfg)
    }

    pub fn write_kv(&self, w: &mut KvWriter) {
        w.put("frontend.feature_dim", self.frontend.feature_dim)
            .put("frontend.stack", self.frontend.stack)
            .put("frontend.downsample", self.frontend.downsample)
            .put("input.dim", self.input_dim)
            .put("input.convs", self.input_convs)
            .put("input.kernel", self.input_kernel)
            .put("input.time_stack", self.time_stack);
        for (prefix, s) in [("causal", &self.causal), ("noncausal", &self.non_causal)] {
            w.put(&format!("{prefix}.layers"), s.layers)
                .put(&format!("{prefix}.dim"), s.dim)
                .put(&format!("{prefix}.heads"), s.heads)
                .put(&format!("{prefix}.ffn_mult"), s.ffn_mult)
                .put(&format!("{prefix}.kernel"), s.conv_kernel)
                .put(&format!("{prefix}.left_context"), s.left_context)
                .put(&format!("{prefix}.right_context"), s.right_context);
        }
        w.put("moe.placement", self.moe.placement)
            .put("moe.num_experts", self.moe.num_experts)
            .put("moe.expert_mult", self.moe.expert_mult)
            .put("moe.selector", self.moe.selector)
            .put("moe.residual", self.moe.residual)
            .put("moe.execution", self.moe.execution);
        let (dim, groups) = self.adapters.as_ref().map_or((0, 0), |a| (a.dim, a.groups));
        w.put("adapters.dim", dim).put("adapters.groups", groups);
    }

    pub fn to_kv_string(&self) -> String {
        let mut w = KvWriter::new();
        self.write_kv(&mut w);
        w.finish()
    }
}
