//! Evaluation: frame accuracy and routing analytics.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::config::KvWriter;
use crate::conformer::FfnPosition;
use crate::error::Result;
use crate::graph::Graph;
use crate::harness::model::{argmax_rows, Model};
use crate::harness::task::SyntheticTask;
use crate::moe::{over_capacity_ratio, RoutingDecision, RoutingRecord};
use crate::tensor::Real;

#[derive(Clone, Debug, PartialEq)]
pub struct EvalConfig {
    pub batches: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub capacity_factor: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            batches: 16,
            batch_size: 8,
            seed: 99,
            capacity_factor: 1.0,
        }
    }
}

/// Number of bins of the over-capacity histogram; bin `b` holds ratios in
/// `[b/20, (b+1)/20)`, the last bin also holds 1.0.
pub const OVER_CAPACITY_BINS: usize = 20;

/// Routing of one MoE module over the evaluation set.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerRouting {
    /// Non-causal layer index.
    pub layer: usize,
    pub position: FfnPosition,
    pub num_experts: usize,
    pub frames: usize,
    /// `c_i` summed over batches.
    pub counts: Vec<usize>,
    /// Gate probability of each expert summed over frames.
    pub gate_mass: Vec<f64>,
    /// `c_i / S`; sums to 2.
    pub load: Vec<f64>,
    /// Per language, `c_i / S_language`.
    pub load_by_language: Vec<Vec<f64>>,
    /// Bits, from (language, top-1 expert) counts.
    pub mi_top1: f64,
    /// Bits, from (language, expert) mass where each frame splits its unit
    /// weight over its two experts in proportion to their gates.
    pub mi_top2: f64,
    /// Largest per-batch over-capacity ratio of each expert.
    pub max_over_capacity: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RoutingReport {
    pub layers: Vec<LayerRouting>,
    /// Mean of the per-module top-1 mutual information.
    pub mi_top1: f64,
    pub mi_top2: f64,
    pub over_capacity_histogram: Vec<usize>,
    pub max_over_capacity: f64,
    /// Expert FFN evaluations, counted per frame.
    pub activated_expert_evaluations: usize,
    /// Output frames routed per module.
    pub frames: usize,
}

impl RoutingReport {
    /// Largest load fraction of any expert in any module.
    pub fn max_load(&self) -> f64 {
        self.layers
            .iter()
            .flat_map(|l| l.load.iter().copied())
            .fold(0.0, f64::max)
    }

    /// One [`RoutingRecord`] per module and expert; `layer` is the module
    /// index.
    pub fn records(&self) -> Vec<RoutingRecord> {
        self.layers
            .iter()
            .enumerate()
            .flat_map(|(m, l)| {
                (0..l.num_experts).map(move |e| RoutingRecord {
                    layer: m,
                    expert: e,
                    count: l.counts[e],
                    mean_gate: l.gate_mass[e] / l.frames.max(1) as f64,
                    over_capacity: l.max_over_capacity[e],
                })
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub accuracy: f64,
    pub frames: usize,
    pub routing: RoutingReport,
    /// Frames that went through each adapter group; empty without adapters.
    pub adapter_usage: Vec<usize>,
}

impl EvalReport {
    pub fn write_kv(&self, w: &mut KvWriter) {
        let join = |v: &[f64]| {
            v.iter()
                .map(|x| format!("{x:.4}"))
                .collect::<Vec<_>>()
                .join(",")
        };
        let r = &self.routing;
        w.put("accuracy", format!("{:.6}", self.accuracy))
            .put("frames", self.frames)
            .put("mi_top1_bits", format!("{:.6}", r.mi_top1))
            .put("mi_top2_bits", format!("{:.6}", r.mi_top2))
            .put("max_load", format!("{:.6}", r.max_load()))
            .put("max_over_capacity", format!("{:.6}", r.max_over_capacity))
            .put(
                "activated_expert_evaluations",
                r.activated_expert_evaluations,
            );
        let hist: Vec<String> = r
            .over_capacity_histogram
            .iter()
            .map(|c| c.to_string())
            .collect();
        w.put("over_capacity_histogram", hist.join(","));
        for (m, l) in r.layers.iter().enumerate() {
            let pos = match l.position {
                FfnPosition::Start => "start",
                FfnPosition::End => "end",
            };
            w.put(&format!("moe.{m}.layer"), format!("{}:{pos}", l.layer))
                .put(&format!("moe.{m}.load"), join(&l.load))
                .put(
                    &format!("moe.{m}.mi_top1_bits"),
                    format!("{:.6}", l.mi_top1),
                )
                .put(
                    &format!("moe.{m}.mi_top2_bits"),
                    format!("{:.6}", l.mi_top2),
                )
                .put(
                    &format!("moe.{m}.max_over_capacity"),
                    join(&l.max_over_capacity),
                );
            for (k, row) in l.load_by_language.iter().enumerate() {
                w.put(&format!("moe.{m}.load.language{k}"), join(row));
            }
        }
        if !self.adapter_usage.is_empty() {
            let usage: Vec<String> = self.adapter_usage.iter().map(|c| c.to_string()).collect();
            w.put("adapter_group_frames", usage.join(","));
        }
    }

    pub fn to_kv_string(&self) -> String {
        let mut w = KvWriter::new();
        self.write_kv(&mut w);
        w.finish()
    }
}

/// Mutual information in bits of a joint count table.
pub fn mutual_information(joint: &[Vec<f64>]) -> f64 {
    let total: f64 = joint.iter().flatten().sum();
    if total <= 0.0 {
        return 0.0;
    }
    let cols = joint.first().map_or(0, Vec::len);
    let rows: Vec<f64> = joint.iter().map(|r| r.iter().sum()).collect();
    let col_sums: Vec<f64> = (0..cols)
        .map(|j| joint.iter().map(|r| r[j]).sum())
        .collect();
    let mut mi = 0.0;
    for (i, r) in joint.iter().enumerate() {
        for (j, &n) in r.iter().enumerate() {
            if n > 0.0 {
                mi += n / total * (n * total / (rows[i] * col_sums[j])).log2();
            }
        }
    }
    mi.max(0.0)
}

#[derive(Clone)]
struct ModuleTally {
    layer: usize,
    position: FfnPosition,
    counts: Vec<usize>,
    gate_mass: Vec<f64>,
    frames: usize,
    lang_frames: Vec<usize>,
    lang_counts: Vec<Vec<f64>>,
    top1: Vec<Vec<f64>>,
    top2: Vec<Vec<f64>>,
    ratios: Vec<Vec<f64>>,
}

impl ModuleTally {
    fn new(layer: usize, position: FfnPosition, k: usize, n: usize) -> Self {
        ModuleTally {
            layer,
            position,
            counts: vec![0; n],
            gate_mass: vec![0.0; n],
            frames: 0,
            lang_frames: vec![0; k],
            lang_counts: vec![vec![0.0; n]; k],
            top1: vec![vec![0.0; n]; k],
            top2: vec![vec![0.0; n]; k],
            ratios: Vec::new(),
        }
    }

    fn add(
        &mut self,
        decision: &RoutingDecision,
        languages: &[usize],
        capacity_factor: f64,
    ) -> Result<()> {
        let s = decision.frames();
        for e in 0..decision.num_experts {
            self.counts[e] += decision.counts[e];
            self.gate_mass[e] += decision.mean_gates[e] * s as f64;
        }
        self.frames += s;
        for ((sel, w), &lang) in decision
            .experts
            .iter()
            .zip(&decision.weights)
            .zip(languages)
        {
            self.lang_frames[lang] += 1;
            self.top1[lang][sel[0]] += 1.0;
            let z = w[0] + w[1];
            for (slot, &e) in sel.iter().enumerate() {
                self.lang_counts[lang][e] += 1.0;
                self.top2[lang][e] += if z > 0.0 { w[slot] / z } else { 0.5 };
            }
        }
        if s > 0 {
            self.ratios
                .push(over_capacity_ratio(decision, capacity_factor)?.ratios);
        }
        Ok(())
    }

    fn merge(&mut self, other: &ModuleTally) {
        for e in 0..self.counts.len() {
            self.counts[e] += other.counts[e];
            self.gate_mass[e] += other.gate_mass[e];
        }
        self.frames += other.frames;
        for k in 0..self.lang_frames.len() {
            self.lang_frames[k] += other.lang_frames[k];
            for e in 0..self.counts.len() {
                self.lang_counts[k][e] += other.lang_counts[k][e];
                self.top1[k][e] += other.top1[k][e];
                self.top2[k][e] += other.top2[k][e];
            }
        }
        self.ratios.extend(other.ratios.iter().cloned());
    }

    fn finish(&self) -> LayerRouting {
        let n = self.counts.len();
        let s = self.frames.max(1) as f64;
        let max_over_capacity = (0..n)
            .map(|e| self.ratios.iter().map(|r| r[e]).fold(0.0, f64::max))
            .collect();
        LayerRouting {
            layer: self.layer,
            position: self.position,
            num_experts: n,
            frames: self.frames,
            counts: self.counts.clone(),
            gate_mass: self.gate_mass.clone(),
            load: self.counts.iter().map(|&c| c as f64 / s).collect(),
            load_by_language: self
                .lang_counts
                .iter()
                .zip(&self.lang_frames)
                .map(|(row, &f)| row.iter().map(|c| c / f.max(1) as f64).collect())
                .collect(),
            mi_top1: mutual_information(&self.top1),
            mi_top2: mutual_information(&self.top2),
            max_over_capacity,
        }
    }
}

struct BatchTally {
    correct: usize,
    frames: usize,
    evaluations: usize,
    modules: Vec<ModuleTally>,
    adapter_usage: Vec<usize>,
}

fn evaluate_batch<F: Real>(
    model: &Model<F>,
    task: &SyntheticTask,
    cfg: &EvalConfig,
    index: usize,
) -> Result<BatchTally> {
    let seed = cfg
        .seed
        .wrapping_mul(0x9e37_79b9_7f4a_7c15)
        .wrapping_add(index as u64);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let batch = task.generate_batch(cfg.batch_size, &mut rng);
    let mut g = Graph::new(&model.params);
    let fwd = model.forward(&mut g, &batch)?;
    let predictions = argmax_rows(g.value(fwd.logits));
    let correct = predictions
        .iter()
        .zip(&batch.labels)
        .filter(|(p, l)| p == l)
        .count();
    let frame_languages = batch.frame_languages(&fwd.encoder.segments);
    let k = task.spec.num_languages;
    let mut modules = Vec::new();
    let mut evaluations = 0;
    for t in &fwd.encoder.moe {
        let d = &t.output.decision;
        let mut m = ModuleTally::new(t.layer, t.position, k, d.num_experts);
        m.add(d, &frame_languages, cfg.capacity_factor)?;
        evaluations += t.output.expert_evaluations;
        modules.push(m);
    }
    let mut adapter_usage = Vec::new();
    if let Some(a) = &model.config.encoder.adapters {
        adapter_usage = vec![0; a.groups];
        for &lang in &frame_languages {
            adapter_usage[lang] += 1;
        }
    }
    Ok(BatchTally {
        correct,
        frames: batch.labels.len(),
        evaluations,
        modules,
        adapter_usage,
    })
}

/// Evaluates on `cfg.batches` fresh batches. Batches run in parallel; the
/// reduction is in batch order so results do not depend on scheduling.
pub fn evaluate<F: Real>(
    model: &Model<F>,
    task: &SyntheticTask,
    cfg: &EvalConfig,
) -> Result<EvalReport> {
    let tallies: Vec<BatchTally> = (0..cfg.batches)
        .into_par_iter()
        .map(|i| evaluate_batch(model, task, cfg, i))
        .collect::<Result<_>>()?;

    let mut correct = 0;
    let mut frames = 0;
    let mut evaluations = 0;
    let mut modules: Option<Vec<ModuleTally>> = None;
    let mut adapter_usage: Vec<usize> = Vec::new();
    for t in &tallies {
        correct += t.correct;
        frames += t.frames;
        evaluations += t.evaluations;
        match &mut modules {
            None => modules = Some(t.modules.clone()),
            Some(ms) => ms.iter_mut().zip(&t.modules).for_each(|(a, b)| a.merge(b)),
        }
        if adapter_usage.is_empty() {
            adapter_usage = t.adapter_usage.clone();
        } else {
            adapter_usage
                .iter_mut()
                .zip(&t.adapter_usage)
                .for_each(|(a, b)| *a += b);
        }
    }

    let modules = modules.unwrap_or_default();
    let mut histogram = vec![0; OVER_CAPACITY_BINS];
    let mut max_over_capacity = 0.0f64;
    for m in &modules {
        for r in m.ratios.iter().flatten() {
            let bin = ((r * OVER_CAPACITY_BINS as f64) as usize).min(OVER_CAPACITY_BINS - 1);
            histogram[bin] += 1;
            max_over_capacity = max_over_capacity.max(*r);
        }
    }
    let layers: Vec<LayerRouting> = modules.iter().map(ModuleTally::finish).collect();
    let mean = |f: fn(&LayerRouting) -> f64| {
        if layers.is_empty() {
            0.0
        } else {
            layers.iter().map(f).sum::<f64>() / layers.len() as f64
        }
    };
    let routing = RoutingReport {
        mi_top1: mean(|l| l.mi_top1),
        mi_top2: mean(|l| l.mi_top2),
        over_capacity_histogram: histogram,
        max_over_capacity,
        activated_expert_evaluations: evaluations,
        frames,
        layers,
    };
    Ok(EvalReport {
        accuracy: correct as f64 / frames.max(1) as f64,
        frames,
        routing,
        adapter_usage,
    })
}
