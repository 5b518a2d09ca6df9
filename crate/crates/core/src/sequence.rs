//! Batches of variable-length sequences packed along the time axis.
//!
//! Every activation in the encoder is a `[frames × channels]` matrix in which
//! the frames of all sequences of a batch are stored back to back. A
//! [`Segments`] value records the sequence lengths so that convolutions,
//! frame stacking and attention never mix frames of different sequences.

use std::sync::Arc;

use crate::error::{Error, Result};

/// Lengths of the sequences packed into one activation matrix.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Segments {
    lengths: Arc<Vec<usize>>,
}

impl Segments {
    pub fn new(lengths: Vec<usize>) -> Self {
        Segments {
            lengths: Arc::new(lengths),
        }
    }

    /// One sequence of `len` frames.
    pub fn single(len: usize) -> Self {
        Self::new(vec![len])
    }

    pub fn lengths(&self) -> &[usize] {
        &self.lengths
    }

    pub fn total(&self) -> usize {
        self.lengths.iter().sum()
    }

    pub fn len(&self) -> usize {
        self.lengths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lengths.is_empty()
    }

    /// `(offset, len)` of each sequence.
    pub fn spans(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.lengths.iter().scan(0usize, |off, &len| {
            let start = *off;
            *off += len;
            Some((start, len))
        })
    }

    /// Sequence index of every frame.
    pub fn frame_owner(&self) -> Vec<usize> {
        self.lengths
            .iter()
            .enumerate()
            .flat_map(|(i, &len)| std::iter::repeat_n(i, len))
            .collect()
    }

    /// Lengths after keeping every `downsample`-th frame (starting at 0).
    pub fn downsampled(&self, downsample: usize) -> Segments {
        Segments::new(
            self.lengths
                .iter()
                .map(|&l| l.div_ceil(downsample))
                .collect(),
        )
    }
}

/// Block-diagonal boolean attention mask: one explicit `len × len` matrix per
/// sequence (`true` = may attend); frames of different sequences never see
/// each other.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMask {
    blocks: Vec<MaskBlock>,
}

#[derive(Clone, Debug, PartialEq)]
pub(crate) struct MaskBlock {
    pub offset: usize,
    pub len: usize,
    pub allowed: Vec<bool>,
}

impl AttentionMask {
    /// A single sequence with an explicit row-major `len × len` mask.
    pub fn explicit(len: usize, allowed: Vec<bool>) -> Result<Self> {
        if allowed.len() != len * len {
            return Err(Error::param(format!(
                "mask for {len} frames needs {} entries, got {}",
                len * len,
                allowed.len()
            )));
        }
        Ok(AttentionMask {
            blocks: vec![MaskBlock {
                offset: 0,
                len,
                allowed,
            }],
        })
    }

    /// Frame `t` may attend to `s` iff `t - left <= s <= t + right`, within
    /// its own sequence.
    pub fn windowed(segments: &Segments, left: usize, right: usize) -> Self {
        let blocks = segments
            .spans()
            .map(|(offset, len)| {
                let mut allowed = vec![false; len * len];
                for t in 0..len {
                    let lo = t.saturating_sub(left);
                    let hi = t.saturating_add(right).min(len.saturating_sub(1));
                    for s in lo..=hi {
                        allowed[t * len + s] = true;
                    }
                }
                MaskBlock {
                    offset,
                    len,
                    allowed,
                }
            })
            .collect();
        AttentionMask { blocks }
    }

    pub(crate) fn blocks(&self) -> &[MaskBlock] {
        &self.blocks
    }

    pub fn total_frames(&self) -> usize {
        self.blocks.iter().map(|b| b.len).sum()
    }

    /// Whether absolute frame `t` may attend to absolute frame `s`.
    pub fn allows(&self, t: usize, s: usize) -> bool {
        self.blocks.iter().any(|b| {
            t >= b.offset
                && t < b.offset + b.len
                && s >= b.offset
                && s < b.offset + b.len
                && b.allowed[(t - b.offset) * b.len + (s - b.offset)]
        })
    }
}
