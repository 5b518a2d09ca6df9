//! Perturbation checks of causality and right-context budgets.

use moe_conformer::conformer::{
    conformer_layer_forward, ConformerLayer, EncoderMode, EncoderModel,
};
use moe_conformer::params::{Initializer, ParamStore};
use moe_conformer::sequence::Segments;
use moe_conformer::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{random_encoder_config, random_layer_config};

pub fn rows_equal(a: &Tensor<f32>, b: &Tensor<f32>, rows: std::ops::Range<usize>) -> bool {
    rows.into_iter().all(|r| a.row(r) == b.row(r))
}

/// Replaces every row after `after` with fresh noise.
pub fn perturb_after(x: &Tensor<f32>, after: usize, rng: &mut ChaCha8Rng) -> Tensor<f32> {
    let mut y = x.clone();
    let c = x.cols();
    for v in &mut y.data_mut()[(after + 1) * c..] {
        *v = rng.random_range(-3.0..3.0);
    }
    y
}

pub fn random_input(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor<f32> {
    Tensor::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
}

/// Random single layers: frame `t` must ignore inputs after `t + r` and
/// must react to input `t + r`.
pub fn check_layers(seed: u64, configs: usize) -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..configs {
        let cfg = random_layer_config(&mut rng, true);
        let mut store = ParamStore::<f32>::new();
        let layer = ConformerLayer::new(&mut store, &Initializer::new(rng.random()), "l", &cfg)
            .map_err(|e| e.to_string())?;
        let t = 10;
        let x = random_input(&mut rng, t, cfg.model_dim);
        let run =
            |x: &Tensor<f32>| conformer_layer_forward(&layer, &store, x).map_err(|e| e.to_string());
        let base = run(&x)?;
        let r = cfg.right_context;
        for p in 0..t - 1 {
            let y = run(&perturb_after(&x, p, &mut rng))?;
            // frames up to p - r cannot see frames after p
            let stable = (p + 1).saturating_sub(r);
            if !rows_equal(&base, &y, 0..stable) {
                return Err(format!("{cfg:?}: perturbing after {p} leaked backwards"));
            }
            // the first frame whose window reaches p + 1 must move
            if stable < t && rows_equal(&base, &y, stable..stable + 1) {
                return Err(format!("{cfg:?}: frame {stable} ignores its right context"));
            }
        }
    }
    Ok(())
}

/// Random encoders in both modes: output `u` reads input frames up to
/// `(u + R)·D` and no further.
pub fn check_encoders(seed: u64, configs: usize) -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..configs {
        let cfg = random_encoder_config(&mut rng);
        let model = EncoderModel::<f32>::build(&cfg, rng.random()).map_err(|e| e.to_string())?;
        let d = cfg.total_downsample();
        let outputs = 9;
        let len = outputs * d;
        let x = random_input(&mut rng, len, cfg.frontend.feature_dim);
        let segs = Segments::single(len);
        let groups = cfg.adapters.as_ref().map(|_| vec![1]);
        for (mode, r) in [
            (EncoderMode::CausalOnly, 0),
            (EncoderMode::Cascaded, cfg.non_causal.right_context),
        ] {
            let run = |x: &Tensor<f32>| {
                model
                    .forward(x, &segs, mode, groups.as_deref())
                    .map_err(|e| e.to_string())
            };
            let base = run(&x)?;
            if base.rows() != outputs {
                return Err(format!("{mode:?} {cfg:?}: {} outputs", base.rows()));
            }
            for u in 0..outputs {
                let last = (u + r) * d;
                if last + 1 >= len {
                    break;
                }
                let y = run(&perturb_after(&x, last, &mut rng))?;
                if !rows_equal(&base, &y, 0..u + 1) {
                    return Err(format!(
                        "{mode:?} {cfg:?}: output {u} reads past frame {last}"
                    ));
                }
                // output u + 1 reads frame (u + 1 + r) * d, which was perturbed
                if (u + 1 + r) * d < len && rows_equal(&base, &y, u + 1..u + 2) {
                    return Err(format!(
                        "{mode:?} {cfg:?}: output {} ignores its budget",
                        u + 1
                    ));
                }
            }
        }
    }
    Ok(())
}
