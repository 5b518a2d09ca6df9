//! Synthetic-task experiments: data, training, evaluation, checkpoints.

pub mod checkpoint;
pub mod compare;
pub mod eval;
pub mod model;
pub mod task;
pub mod train;

use std::path::Path;

use crate::config::{KvMap, KvWriter};
use crate::conformer::EncoderConfig;
use crate::error::{Error, Result};

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use compare::{compare_adapter_vs_moe, CompareReport};
pub use eval::{evaluate, EvalConfig, EvalReport, RoutingReport};
pub use model::{Model, ModelConfig};
pub use task::{generate_batch, Batch, SyntheticTask, SyntheticTaskSpec};
pub use train::{train, StepMetrics, TrainConfig};

/// Everything one CLI invocation needs, read from a single flat file.
#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    /// Model initialization seed.
    pub seed: u64,
    pub encoder: EncoderConfig,
    pub task: SyntheticTaskSpec,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    /// Adapter bottleneck for the comparison; `None` matches the MoE
    /// inference budget automatically.
    pub compare_adapter_dim: Option<usize>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let encoder = EncoderConfig::default();
        let task = SyntheticTaskSpec {
            feature_dim: encoder.frontend.feature_dim,
            input_frames_per_output: encoder.total_downsample(),
            ..SyntheticTaskSpec::default()
        };
        ExperimentConfig {
            seed: 1,
            encoder,
            task,
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
            compare_adapter_dim: None,
        }
    }
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut kv = KvMap::parse(text)?;
        let d = ExperimentConfig::default();
        let seed = kv.get_or("seed", d.seed)?;
        let encoder = EncoderConfig::from_kv(&mut kv)?;
        let task_defaults = SyntheticTaskSpec {
            feature_dim: encoder.frontend.feature_dim,
            input_frames_per_output: encoder.total_downsample(),
            ..d.task
        };
        let task = SyntheticTaskSpec::from_kv(&mut kv, &task_defaults)?;
        let train = TrainConfig::from_kv(&mut kv, &d.train)?;
        let eval = EvalConfig {
            batches: kv.get_or("eval.batches", d.eval.batches)?,
            batch_size: kv.get_or("eval.batch_size", d.eval.batch_size)?,
            seed: kv.get_or("eval.seed", d.eval.seed)?,
            capacity_factor: train.capacity_factor,
        };
        let compare_adapter_dim = match kv.get_or("compare.adapter_dim", 0usize)? {
            0 => None,
            a => Some(a),
        };
        kv.finish()?;
        let cfg = ExperimentConfig {
            seed,
            encoder,
            task,
            train,
            eval,
            compare_adapter_dim,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if self.task.feature_dim != self.encoder.frontend.feature_dim {
            return Err(Error::config(format!(
                "task.feature_dim {} differs from frontend.feature_dim {}",
                self.task.feature_dim, self.encoder.frontend.feature_dim
            )));
        }
        if self.eval.batches == 0 || self.eval.batch_size == 0 {
            return Err(Error::config(
                "eval.batches and eval.batch_size must be positive",
            ));
        }
        Ok(())
    }

    /// Overrides both the model and the training seed.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.train.seed = seed.wrapping_add(1);
        self
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            encoder: self.encoder.clone(),
            num_labels: self.task.num_labels(),
        }
    }

    pub fn to_kv_string(&self) -> String {
        let mut w = KvWriter::new();
        w.put("seed", self.seed);
        self.encoder.write_kv(&mut w);
        self.task.write_kv(&mut w);
        self.train.write_kv(&mut w);
        w.put("eval.batches", self.eval.batches)
            .put("eval.batch_size", self.eval.batch_size)
            .put("eval.seed", self.eval.seed)
            .put("compare.adapter_dim", self.compare_adapter_dim.unwrap_or(0));
        w.finish()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn experiment_round_trip() {
        let mut cfg = ExperimentConfig::default();
        cfg.train.specaug = Some(Default::default());
        cfg.compare_adapter_dim = Some(12);
        let back = ExperimentConfig::parse(&cfg.to_kv_string()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn mismatched_feature_dims_rejected() {
        assert!(ExperimentConfig::parse("task.feature_dim=5\n").is_err());
        assert!(ExperimentConfig::parse("train.batch_size=0\n").is_err());
    }
}
