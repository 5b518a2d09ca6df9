//! Oracle-language adapters versus language-blind MoE at a matched
//! inference budget.

use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::accounting::count_params;
use crate::conformer::{AdapterConfig, EncoderConfig, MoePlacement};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::harness::eval::{evaluate, EvalReport};
use crate::harness::model::{Model, ModelConfig};
use crate::harness::task::SyntheticTask;
use crate::harness::train::{train, StepMetrics};
use crate::harness::ExperimentConfig;

/// Largest accepted relative gap between the two inference budgets.
pub const BUDGET_TOLERANCE: f64 = 0.02;

#[derive(Clone, Debug, PartialEq)]
pub struct ArmReport {
    pub name: &'static str,
    pub encoder: EncoderConfig,
    pub total_params: usize,
    pub inference_params: usize,
    pub final_loss: f64,
    pub eval: EvalReport,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CompareReport {
    pub adapter: ArmReport,
    pub moe: ArmReport,
    /// `|inf(adapter) − inf(moe)| / inf(adapter)`.
    pub budget_gap: f64,
    /// The MoE model's outputs were unchanged when the language ids of a
    /// batch were scrambled.
    pub moe_ignores_language_ids: bool,
}

/// The two encoders of the comparison: `(adapter, moe)`. The MoE arm is the
/// base config (end placement if none is set); the adapter arm removes the
/// MoE modules and adds one adapter group per language.
pub fn comparison_pair(
    base: &EncoderConfig,
    languages: usize,
    adapter_dim: Option<usize>,
) -> Result<(EncoderConfig, EncoderConfig)> {
    let mut moe = base.clone();
    moe.adapters = None;
    if moe.moe.placement == MoePlacement::None {
        moe.moe.placement = MoePlacement::End;
    }
    moe.validate()?;
    let target = count_params(&moe).inference_params;

    let mut adapter = base.clone();
    adapter.moe.placement = MoePlacement::None;
    let with_dim = |dim: usize| {
        let mut c = adapter.clone();
        c.adapters = Some(AdapterConfig {
            dim,
            groups: languages,
        });
        c
    };
    let dim = match adapter_dim {
        Some(d) => d,
        None => (1..=16 * base.non_causal.dim.max(1))
            .min_by_key(|&d| count_params(&with_dim(d)).inference_params.abs_diff(target))
            .unwrap_or(1),
    };
    let adapter = with_dim(dim);
    adapter.validate()?;
    let gap = budget_gap(&adapter, &moe);
    if gap > BUDGET_TOLERANCE {
        return Err(Error::config(format!(
            "inference budgets differ by {:.2}% (adapter {} vs MoE {}), limit {:.0}%",
            100.0 * gap,
            count_params(&adapter).inference_params,
            target,
            100.0 * BUDGET_TOLERANCE
        )));
    }
    Ok((adapter, moe))
}

pub fn budget_gap(adapter: &EncoderConfig, moe: &EncoderConfig) -> f64 {
    let a = count_params(adapter).inference_params as f64;
    let m = count_params(moe).inference_params as f64;
    (a - m).abs() / a
}

/// Whether scrambling the language ids of a batch leaves the model output
/// bit-identical.
pub fn ignores_language_ids(model: &Model<f32>, task: &SyntheticTask, seed: u64) -> Result<bool> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let batch = task.generate_batch(4, &mut rng);
    let mut scrambled = batch.clone();
    let k = task.spec.num_languages;
    for l in &mut scrambled.languages {
        *l = (*l + 1) % k;
    }
    let run = |b| -> Result<Vec<f32>> {
        let mut g = Graph::new(&model.params);
        let fwd = model.forward(&mut g, b)?;
        Ok(g.value(fwd.logits).data().to_vec())
    };
    Ok(run(&batch)? == run(&scrambled)?)
}

fn run_arm(
    name: &'static str,
    encoder: EncoderConfig,
    exp: &ExperimentConfig,
    task: &SyntheticTask,
    on_step: &mut impl FnMut(&str, &StepMetrics) -> Result<()>,
) -> Result<(ArmReport, Model<f32>)> {
    let config = ModelConfig {
        encoder: encoder.clone(),
        num_labels: task.spec.num_labels(),
    };
    let mut model = Model::<f32>::build(&config, exp.seed)?;
    let history = train(&mut model, task, &exp.train, |m| on_step(name, m))?;
    let eval = evaluate(&model, task, &exp.eval)?;
    let report = count_params(&encoder);
    Ok((
        ArmReport {
            name,
            encoder,
            total_params: report.total_params,
            inference_params: report.inference_params,
            final_loss: history.last().map_or(f64::NAN, |m| m.loss),
            eval,
        },
        model,
    ))
}

/// Trains and evaluates both arms with the same data and schedule.
pub fn compare_adapter_vs_moe(
    exp: &ExperimentConfig,
    mut on_step: impl FnMut(&str, &StepMetrics) -> Result<()>,
) -> Result<CompareReport> {
    let task = SyntheticTask::new(&exp.task)?;
    let (adapter_cfg, moe_cfg) = comparison_pair(
        &exp.encoder,
        exp.task.num_languages,
        exp.compare_adapter_dim,
    )?;
    let budget_gap = budget_gap(&adapter_cfg, &moe_cfg);
    let (adapter, _) = run_arm("adapter", adapter_cfg, exp, &task, &mut on_step)?;
    let (moe, moe_model) = run_arm("moe", moe_cfg, exp, &task, &mut on_step)?;
    let moe_ignores_language_ids = ignores_language_ids(&moe_model, &task, exp.eval.seed)?;
    Ok(CompareReport {
        adapter,
        moe,
        budget_gap,
        moe_ignores_language_ids,
    })
}

impl fmt::Display for CompareReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for arm in [&self.adapter, &self.moe] {
            let n = arm.name;
            writeln!(f, "{n}.total_params={}", arm.total_params)?;
            writeln!(f, "{n}.inference_params={}", arm.inference_params)?;
            writeln!(f, "{n}.final_loss={:.6}", arm.final_loss)?;
            writeln!(f, "{n}.accuracy={:.4}", arm.eval.accuracy)?;
        }
        if let Some(a) = &self.adapter.encoder.adapters {
            writeln!(f, "adapter.dim={}", a.dim)?;
        }
        let usage: Vec<String> = self
            .adapter
            .eval
            .adapter_usage
            .iter()
            .map(|u| u.to_string())
            .collect();
        writeln!(f, "adapter.group_frames={}", usage.join(","))?;
        let r = &self.moe.eval.routing;
        writeln!(f, "moe.mi_top1_bits={:.4}", r.mi_top1)?;
        writeln!(f, "moe.mi_top2_bits={:.4}", r.mi_top2)?;
        writeln!(f, "moe.max_load={:.4}", r.max_load())?;
        writeln!(f, "moe.max_over_capacity={:.4}", r.max_over_capacity)?;
        writeln!(
            f,
            "moe.activated_expert_evaluations={}",
            r.activated_expert_evaluations
        )?;
        writeln!(
            f,
            "moe.ignores_language_ids={}",
            self.moe_ignores_language_ids
        )?;
        writeln!(f, "budget_gap={:.5}", self.budget_gap)?;
        write!(
            f,
            "accuracy_gap={:.4}",
            (self.adapter.eval.accuracy - self.moe.eval.accuracy).abs()
        )
    }
}
