//! Encoder plus a frame classifier on the cascaded output.

use crate::config::{KvMap, KvWriter};
use crate::conformer::{Encoder, EncoderConfig, EncoderMode, EncoderOutput};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::harness::task::Batch;
use crate::nn::Linear;
use crate::params::{Initializer, ParamStore};
use crate::tensor::Real;

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub num_labels: usize,
}

impl ModelConfig {
    pub fn to_kv_string(&self) -> String {
        let mut w = KvWriter::new();
        self.encoder.write_kv(&mut w);
        w.put("head.labels", self.num_labels);
        w.finish()
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut kv = KvMap::parse(text)?;
        let encoder = EncoderConfig::from_kv(&mut kv)?;
        let num_labels = kv
            .get("head.labels")?
            .ok_or_else(|| Error::config("missing head.labels"))?;
        kv.finish()?;
        Ok(ModelConfig {
            encoder,
            num_labels,
        })
    }
}

#[derive(Clone, Debug)]
pub struct Model<F> {
    pub config: ModelConfig,
    pub params: ParamStore<F>,
    pub encoder: Encoder,
    pub head: Linear,
}

pub struct ModelForward {
    /// `[frames × num_labels]`.
    pub logits: Var,
    pub encoder: EncoderOutput,
}

impl<F: Real> Model<F> {
    pub fn build(config: &ModelConfig, seed: u64) -> Result<Self> {
        if config.num_labels == 0 {
            return Err(Error::config("classifier needs at least one label"));
        }
        let mut params = ParamStore::new();
        let init = Initializer::new(seed);
        let encoder = Encoder::new(&mut params, &init, &config.encoder)?;
        let head = Linear::new(
            &mut params,
            &init,
            "head",
            config.encoder.output_dim(),
            config.num_labels,
        );
        Ok(Model {
            config: config.clone(),
            params,
            encoder,
            head,
        })
    }

    pub fn has_adapters(&self) -> bool {
        !self.encoder.adapters.is_empty()
    }

    /// Language ids reach the network only through adapters; a model
    /// without adapters never sees them.
    pub fn forward(&self, g: &mut Graph<'_, F>, batch: &Batch) -> Result<ModelForward> {
        let x = g.input(batch.features.cast());
        let groups = self.has_adapters().then_some(batch.languages.as_slice());
        let encoder = self
            .encoder
            .forward(g, x, &batch.segments, EncoderMode::Cascaded, groups)?;
        let logits = self.head.forward(g, encoder.y)?;
        if g.shape(logits)[0] != batch.labels.len() {
            return Err(Error::param(format!(
                "batch has {} labels for {} output frames",
                batch.labels.len(),
                g.shape(logits)[0]
            )));
        }
        Ok(ModelForward { logits, encoder })
    }

    /// Same model at another precision.
    pub fn cast<G: Real>(&self) -> Model<G> {
        Model {
            config: self.config.clone(),
            params: self.params.cast(),
            encoder: self.encoder.clone(),
            head: self.head.clone(),
        }
    }
}

/// Index of the largest logit per row.
pub fn argmax_rows<F: Real>(logits: &crate::tensor::Tensor<F>) -> Vec<usize> {
    (0..logits.rows())
        .map(|i| {
            let row = logits.row(i);
            let mut best = 0;
            for (j, v) in row.iter().enumerate() {
                if *v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}
