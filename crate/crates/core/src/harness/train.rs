//! Training loop: frame cross-entropy plus weighted auxiliary load losses,
//! Adam with linear warmup, batches produced ahead on a bounded queue.

use std::fmt;
use std::sync::mpsc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{KvMap, KvWriter};
use crate::conformer::{spec_augment, SpecAugConfig};
use crate::error::{Error, Result};
use crate::graph::{Gradients, Graph};
use crate::harness::model::{argmax_rows, Model};
use crate::harness::task::{Batch, SyntheticTask};
use crate::moe::over_capacity_ratio;
use crate::params::ParamStore;
use crate::tensor::{Real, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub warmup_steps: usize,
    /// λ, weight of the summed auxiliary losses.
    pub aux_weight: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Global gradient-norm clip; 0 disables.
    pub grad_clip: f64,
    pub capacity_factor: f64,
    pub specaug: Option<SpecAugConfig>,
    /// Batches generated ahead of the trainer.
    pub queue_capacity: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 300,
            batch_size: 8,
            learning_rate: 2e-3,
            warmup_steps: 100,
            aux_weight: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            grad_clip: 5.0,
            capacity_factor: 1.0,
            specaug: None,
            queue_capacity: 4,
            seed: 7,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("train.batch_size must be positive"));
        }
        if !(self.aux_weight >= 0.0) {
            return Err(Error::config("train.aux_weight must be non-negative"));
        }
        if !(self.learning_rate > 0.0) || !(self.capacity_factor > 0.0) {
            return Err(Error::config(
                "train.lr and train.capacity_factor must be positive",
            ));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::config("Adam betas must lie in [0, 1)"));
        }
        if self.queue_capacity == 0 {
            return Err(Error::config("train.queue must be at least 1"));
        }
        Ok(())
    }

    pub fn from_kv(kv: &mut KvMap, defaults: &TrainConfig) -> Result<Self> {
        let d = defaults;
        let specaug = if kv.get_or("train.specaug", d.specaug.is_some())? {
            let base = d.specaug.clone().unwrap_or_default();
            Some(SpecAugConfig {
                freq_masks: kv.get_or("train.specaug.freq_masks", base.freq_masks)?,
                max_freq_width: kv.get_or("train.specaug.freq_width", base.max_freq_width)?,
                time_masks: kv.get_or("train.specaug.time_masks", base.time_masks)?,
                max_time_width: kv.get_or("train.specaug.time_width", base.max_time_width)?,
            })
        } else {
            None
        };
        let cfg = TrainConfig {
            steps: kv.get_or("train.steps", d.steps)?,
            batch_size: kv.get_or("train.batch_size", d.batch_size)?,
            learning_rate: kv.get_or("train.lr", d.learning_rate)?,
            warmup_steps: kv.get_or("train.warmup", d.warmup_steps)?,
            aux_weight: kv.get_or("train.aux_weight", d.aux_weight)?,
            beta1: kv.get_or("train.beta1", d.beta1)?,
            beta2: kv.get_or("train.beta2", d.beta2)?,
            epsilon: kv.get_or("train.eps", d.epsilon)?,
            grad_clip: kv.get_or("train.grad_clip", d.grad_clip)?,
            capacity_factor: kv.get_or("train.capacity_factor", d.capacity_factor)?,
            specaug,
            queue_capacity: kv.get_or("train.queue", d.queue_capacity)?,
            seed: kv.get_or("train.seed", d.seed)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn write_kv(&self, w: &mut KvWriter) {
        w.put("train.steps", self.steps)
            .put("train.batch_size", self.batch_size)
            .put("train.lr", self.learning_rate)
            .put("train.warmup", self.warmup_steps)
            .put("train.aux_weight", self.aux_weight)
            .put("train.beta1", self.beta1)
            .put("train.beta2", self.beta2)
            .put("train.eps", self.epsilon)
            .put("train.grad_clip", self.grad_clip)
            .put("train.capacity_factor", self.capacity_factor)
            .put("train.specaug", self.specaug.is_some())
            .put("train.queue", self.queue_capacity)
            .put("train.seed", self.seed);
        if let Some(s) = &self.specaug {
            w.put("train.specaug.freq_masks", s.freq_masks)
                .put("train.specaug.freq_width", s.max_freq_width)
                .put("train.specaug.time_masks", s.time_masks)
                .put("train.specaug.time_width", s.max_time_width);
        }
    }

    /// Learning rate at `step` (0-based) after linear warmup.
    pub fn learning_rate_at(&self, step: usize) -> f64 {
        if self.warmup_steps == 0 {
            self.learning_rate
        } else {
            self.learning_rate * ((step + 1) as f64 / self.warmup_steps as f64).min(1.0)
        }
    }
}

/// Metrics of one optimizer step. MoE statistics are listed per MoE module
/// in encoder order.
#[derive(Clone, Debug, PartialEq)]
pub struct StepMetrics {
    /// 1-based.
    pub step: usize,
    pub loss: f64,
    pub cross_entropy: f64,
    pub accuracy: f64,
    pub learning_rate: f64,
    pub grad_norm: f64,
    pub aux: Vec<f64>,
    pub max_load: Vec<f64>,
    pub max_over_capacity: Vec<f64>,
}

impl fmt::Display for StepMetrics {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "step={} loss={:.6} ce={:.6} acc={:.4} lr={:.6e} grad_norm={:.4}",
            self.step,
            self.loss,
            self.cross_entropy,
            self.accuracy,
            self.learning_rate,
            self.grad_norm
        )?;
        for (i, ((a, l), o)) in self
            .aux
            .iter()
            .zip(&self.max_load)
            .zip(&self.max_over_capacity)
            .enumerate()
        {
            write!(
                f,
                " aux.{i}={a:.6} max_load.{i}={l:.4} over_capacity.{i}={o:.4}"
            )?;
        }
        Ok(())
    }
}

/// Adam moments for every parameter of a store.
pub struct Adam<F> {
    m: Vec<Vec<F>>,
    v: Vec<Vec<F>>,
    t: i32,
    beta1: f64,
    beta2: f64,
    epsilon: f64,
}

impl<F: Real> Adam<F> {
    pub fn new(params: &ParamStore<F>, beta1: f64, beta2: f64, epsilon: f64) -> Self {
        let zeros = || {
            params
                .iter()
                .map(|(_, _, t)| vec![F::zero(); t.numel()])
                .collect()
        };
        Adam {
            m: zeros(),
            v: zeros(),
            t: 0,
            beta1,
            beta2,
            epsilon,
        }
    }

    /// One update; parameters without a gradient are treated as having a
    /// zero gradient. `scale` multiplies every gradient first.
    pub fn step(&mut self, params: &mut ParamStore<F>, grads: &Gradients<F>, lr: f64, scale: f64) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        let (b1, b2) = (F::from_f64_lossy(self.beta1), F::from_f64_lossy(self.beta2));
        let (one_b1, one_b2) = (F::one() - b1, F::one() - b2);
        let step = F::from_f64_lossy(lr / c1);
        let inv_c2 = F::from_f64_lossy(1.0 / c2);
        let eps = F::from_f64_lossy(self.epsilon);
        let scale = F::from_f64_lossy(scale);
        let ids: Vec<_> = params.ids().collect();
        for id in ids {
            let i = id.index();
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let g = grads.get(id).map(Tensor::data);
            let p = params.get_mut(id).data_mut();
            for j in 0..p.len() {
                let gj = g.map_or(F::zero(), |g| g[j] * scale);
                m[j] = b1 * m[j] + one_b1 * gj;
                v[j] = b2 * v[j] + one_b2 * gj * gj;
                p[j] = p[j] - step * m[j] / ((v[j] * inv_c2).sqrt() + eps);
            }
        }
    }
}

/// Applies SpecAugment to every sequence of a batch.
pub fn augment_batch(batch: &mut Batch, cfg: &SpecAugConfig, rng: &mut ChaCha8Rng) {
    let d = batch.features.cols();
    let mut data = batch.features.data().to_vec();
    for (off, len) in batch.segments.spans() {
        let seq = Tensor::from_parts(vec![len, d], data[off * d..(off + len) * d].to_vec());
        let masked = spec_augment(&seq, cfg, rng);
        data[off * d..(off + len) * d].copy_from_slice(masked.data());
    }
    batch.features = Tensor::from_parts(vec![batch.features.rows(), d], data);
}

/// Batches for `cfg.steps` steps, in order, from the training seed.
fn produce(task: &SyntheticTask, cfg: &TrainConfig, tx: mpsc::SyncSender<Batch>) {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut aug_rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0x5eed));
    for _ in 0..cfg.steps {
        let mut batch = task.generate_batch(cfg.batch_size, &mut rng);
        if let Some(s) = &cfg.specaug {
            augment_batch(&mut batch, s, &mut aug_rng);
        }
        if tx.send(batch).is_err() {
            return;
        }
    }
}

/// One optimizer step on `batch`.
pub fn train_step<F: Real>(
    model: &mut Model<F>,
    adam: &mut Adam<F>,
    batch: &Batch,
    cfg: &TrainConfig,
    step: usize,
) -> Result<StepMetrics> {
    let mut g = Graph::new(&model.params);
    let fwd = model.forward(&mut g, batch)?;
    let ce = g.cross_entropy(fwd.logits, &batch.labels)?;
    let mut loss = ce;
    let mut aux = Vec::new();
    let mut max_load = Vec::new();
    let mut max_over_capacity = Vec::new();
    for t in &fwd.encoder.moe {
        aux.push(g.value(t.output.aux_loss).data()[0].to_f64_lossy());
        let decision = &t.output.decision;
        max_load.push(decision.load_fractions().into_iter().fold(0.0, f64::max));
        let cap = if decision.frames() == 0 {
            0.0
        } else {
            over_capacity_ratio(decision, cfg.capacity_factor)?
                .ratios
                .into_iter()
                .fold(0.0, f64::max)
        };
        max_over_capacity.push(cap);
        let weighted = g.scale(t.output.aux_loss, F::from_f64_lossy(cfg.aux_weight));
        loss = g.add(loss, weighted)?;
    }
    let loss_value = g.value(loss).data()[0].to_f64_lossy();
    if !loss_value.is_finite() {
        return Err(Error::Divergence {
            step,
            detail: format!("loss is {loss_value}"),
        });
    }
    let predictions = argmax_rows(g.value(fwd.logits));
    let correct = predictions
        .iter()
        .zip(&batch.labels)
        .filter(|(p, l)| p == l)
        .count();
    let cross_entropy = g.value(ce).data()[0].to_f64_lossy();
    let grads = g.backward(loss)?;
    drop(g);

    let grad_norm = grads.global_norm();
    if !grad_norm.is_finite() {
        return Err(Error::Divergence {
            step,
            detail: format!("gradient norm is {grad_norm}"),
        });
    }
    let scale = if cfg.grad_clip > 0.0 && grad_norm > cfg.grad_clip {
        cfg.grad_clip / grad_norm
    } else {
        1.0
    };
    let lr = cfg.learning_rate_at(step - 1);
    adam.step(&mut model.params, &grads, lr, scale);

    Ok(StepMetrics {
        step,
        loss: loss_value,
        cross_entropy,
        accuracy: correct as f64 / batch.labels.len().max(1) as f64,
        learning_rate: lr,
        grad_norm,
        aux,
        max_load,
        max_over_capacity,
    })
}

/// Trains `model` in place. `on_step` sees every step's metrics as they are
/// produced (for streaming them to a file); the full history is returned.
pub fn train<F: Real>(
    model: &mut Model<F>,
    task: &SyntheticTask,
    cfg: &TrainConfig,
    mut on_step: impl FnMut(&StepMetrics) -> Result<()>,
) -> Result<Vec<StepMetrics>> {
    cfg.validate()?;
    if task.spec.feature_dim != model.config.encoder.frontend.feature_dim {
        return Err(Error::config(format!(
            "task produces {}-dim features, encoder expects {}",
            task.spec.feature_dim, model.config.encoder.frontend.feature_dim
        )));
    }
    if task.spec.num_labels() != model.config.num_labels {
        return Err(Error::config(format!(
            "task has {} labels, classifier has {}",
            task.spec.num_labels(),
            model.config.num_labels
        )));
    }
    if let Some(a) = &model.config.encoder.adapters {
        if a.groups != task.spec.num_languages {
            return Err(Error::config(format!(
                "{} adapter groups for {} languages",
                a.groups, task.spec.num_languages
            )));
        }
    }
    let mut adam = Adam::new(&model.params, cfg.beta1, cfg.beta2, cfg.epsilon);
    let (tx, rx) = mpsc::sync_channel(cfg.queue_capacity);
    std::thread::scope(|scope| {
        scope.spawn(move || produce(task, cfg, tx));
        // owned here so an early return drops it and unblocks the producer
        let rx = rx;
        let mut history = Vec::with_capacity(cfg.steps);
        for (i, batch) in rx.iter().enumerate() {
            let metrics = train_step(model, &mut adam, &batch, cfg, i + 1)?;
            on_step(&metrics)?;
            history.push(metrics);
        }
        Ok(history)
    })
}
