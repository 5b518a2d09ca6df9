//! Randomized small graphs for finite-difference gradient checks. Every
//! builder returns a parameter store and a scalar loss over it.

use std::sync::Arc;

use moe_conformer::conformer::{
    AdapterConfig, ConformerLayer, Encoder, EncoderConfig, EncoderMode, MoePlacement,
    ResidualAdapter,
};
use moe_conformer::graph::{Graph, Var};
use moe_conformer::moe::{MoeExecution, MoeLayer};
use moe_conformer::nn::{FeedForward, LayerNorm, Linear};
use moe_conformer::params::{Initializer, ParamStore};
use moe_conformer::sequence::{AttentionMask, Segments};
use moe_conformer::tensor::Tensor;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{random_layer_config, random_mat, randomize, tensor};

pub type Loss = Box<dyn Fn(&mut Graph<'_, f64>) -> Var>;

pub struct Case {
    pub name: &'static str,
    pub store: ParamStore<f64>,
    pub loss: Loss,
}

fn rand_tensor(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor<f64> {
    tensor(&random_mat(rng, rows, cols, 1.0))
}

/// `Σ y ⊙ R` with a fixed random `R`.
fn probe(g: &mut Graph<'_, f64>, y: Var, r: &Tensor<f64>) -> Var {
    let rv = g.input(r.clone());
    let p = g.mul(y, rv).unwrap();
    g.sum(p)
}

fn case(
    name: &'static str,
    store: ParamStore<f64>,
    loss: impl Fn(&mut Graph<'_, f64>) -> Var + 'static,
) -> Case {
    Case {
        name,
        store,
        loss: Box::new(loss),
    }
}

/// A tiny cascaded encoder with MoE and adapters.
pub fn tiny_encoder() -> EncoderConfig {
    let mut c = EncoderConfig::default();
    c.frontend.feature_dim = 3;
    c.frontend.stack = 2;
    c.frontend.downsample = 1;
    c.input_dim = 4;
    c.input_convs = 1;
    c.input_kernel = 2;
    c.time_stack = 1;
    c.causal.layers = 1;
    c.causal.dim = 4;
    c.causal.heads = 2;
    c.causal.ffn_mult = 1;
    c.causal.conv_kernel = 2;
    c.causal.left_context = 3;
    c.non_causal.layers = 2;
    c.non_causal.dim = 6;
    c.non_causal.heads = 2;
    c.non_causal.ffn_mult = 1;
    c.non_causal.conv_kernel = 2;
    c.non_causal.left_context = 3;
    c.non_causal.right_context = 2;
    c.moe.placement = MoePlacement::End;
    c.moe.num_experts = 3;
    c.moe.expert_mult = 1;
    c.adapters = Some(AdapterConfig { dim: 2, groups: 2 });
    c
}

pub fn all(rng: &mut ChaCha8Rng) -> Vec<Case> {
    let mut cases = Vec::new();

    {
        let mut s = ParamStore::new();
        let w = s.add("w", rand_tensor(rng, 4, 3));
        let b = s.add("b", rand_tensor(rng, 1, 3));
        let x = rand_tensor(rng, 5, 4);
        let r = rand_tensor(rng, 5, 3);
        cases.push(case("matmul_add_row", s, move |g| {
            let xv = g.input(x.clone());
            let (wv, bv) = (g.param(w), g.param(b));
            let h = g.matmul(xv, wv).unwrap();
            let y = g.add_row(h, bv).unwrap();
            probe(g, y, &r)
        }));
    }
    {
        let mut s = ParamStore::new();
        let a = s.add("a", rand_tensor(rng, 4, 4));
        let r = rand_tensor(rng, 4, 4);
        cases.push(case("sigmoid_swish", s, move |g| {
            let av = g.param(a);
            let p = g.sigmoid(av);
            let q = g.swish(av);
            let y = g.mul(p, q).unwrap();
            probe(g, y, &r)
        }));
    }
    {
        let mut s = ParamStore::new();
        let x = s.add("x", rand_tensor(rng, 4, 5));
        let gain = s.add("gain", rand_tensor(rng, 1, 5));
        let bias = s.add("bias", rand_tensor(rng, 1, 5));
        let r = rand_tensor(rng, 4, 5);
        cases.push(case("layer_norm", s, move |g| {
            let (xv, gv, bv) = (g.param(x), g.param(gain), g.param(bias));
            let y = g.layer_norm(xv, gv, bv).unwrap();
            probe(g, y, &r)
        }));
    }
    {
        let mut s = ParamStore::new();
        let a = s.add("a", rand_tensor(rng, 3, 6));
        let r = rand_tensor(rng, 3, 6);
        cases.push(case("softmax_rows", s, move |g| {
            let av = g.param(a);
            let y = g.softmax_rows(av).unwrap();
            probe(g, y, &r)
        }));
    }
    {
        let mut s = ParamStore::new();
        let a = s.add("logits", rand_tensor(rng, 6, 5));
        let labels: Vec<usize> = (0..6).map(|_| rng.random_range(0..5)).collect();
        cases.push(case("cross_entropy", s, move |g| {
            let av = g.param(a);
            g.cross_entropy(av, &labels).unwrap()
        }));
    }
    {
        let mut s = ParamStore::new();
        let x = s.add("x", rand_tensor(rng, 7, 3));
        let k = s.add("k", rand_tensor(rng, 3, 3));
        let b = s.add("b", rand_tensor(rng, 1, 3));
        let r = rand_tensor(rng, 7, 3);
        let segs = Segments::new(vec![4, 3]);
        cases.push(case("causal_depthwise_conv", s, move |g| {
            let (xv, kv, bv) = (g.param(x), g.param(k), g.param(b));
            let y = g.causal_depthwise_conv(xv, kv, bv, &segs).unwrap();
            probe(g, y, &r)
        }));
    }
    {
        let mut s = ParamStore::new();
        let q = s.add("q", rand_tensor(rng, 7, 4));
        let k = s.add("k", rand_tensor(rng, 7, 4));
        let v = s.add("v", rand_tensor(rng, 7, 4));
        let r = rand_tensor(rng, 7, 4);
        let mask = Arc::new(AttentionMask::windowed(&Segments::new(vec![5, 2]), 2, 1));
        cases.push(case("windowed_attention", s, move |g| {
            let (qv, kv, vv) = (g.param(q), g.param(k), g.param(v));
            let y = g.attention(qv, kv, vv, 2, mask.clone()).unwrap();
            probe(g, y, &r)
        }));
    }
    {
        let mut s = ParamStore::new();
        let a = s.add("a", rand_tensor(rng, 3, 2));
        let b = s.add("b", rand_tensor(rng, 3, 4));
        let r = rand_tensor(rng, 3, 3);
        cases.push(case("concat_slice", s, move |g| {
            let (av, bv) = (g.param(a), g.param(b));
            let c = g.concat_cols(&[av, bv]).unwrap();
            let y = g.slice_cols(c, 1, 3).unwrap();
            let y = g.scale(y, 1.7);
            probe(g, y, &r)
        }));
    }
    {
        let mut s = ParamStore::new();
        let x = s.add("x", rand_tensor(rng, 5, 3));
        let r = rand_tensor(rng, 6, 3);
        cases.push(case("gather_scatter", s, move |g| {
            let xv = g.param(x);
            let a = g.gather_rows(xv, &[4, 0, 0, 2]).unwrap();
            let b = g.gather_rows(xv, &[1, 3]).unwrap();
            let b = g.swish(b);
            let y = g
                .scatter_add(6, 3, vec![(a, vec![0, 1, 5, 2]), (b, vec![5, 3])])
                .unwrap();
            probe(g, y, &r)
        }));
    }
    {
        let mut s = ParamStore::new();
        let x = s.add("x", rand_tensor(rng, 4, 3));
        let w = s.add("w", rand_tensor(rng, 4, 2));
        let r = rand_tensor(rng, 4, 3);
        cases.push(case("gather_elems_mul_col", s, move |g| {
            let (xv, wv) = (g.param(x), g.param(w));
            let col = g
                .gather_elems(wv, &[(0, 1), (1, 0), (2, 1), (3, 1)])
                .unwrap();
            let y = g.mul_col(xv, col).unwrap();
            probe(g, y, &r)
        }));
    }
    {
        let mut s = ParamStore::new();
        let x = s.add("x", rand_tensor(rng, 5, 4));
        let r = rand_tensor(rng, 1, 4);
        cases.push(case("mean_rows", s, move |g| {
            let xv = g.param(x);
            let sq = g.mul(xv, xv).unwrap();
            let y = g.mean_rows(sq).unwrap();
            probe(g, y, &r)
        }));
    }
    {
        let mut s = ParamStore::new();
        let x = s.add("x", rand_tensor(rng, 9, 2));
        let segs = Segments::new(vec![5, 4]);
        let (_, out) = {
            let g0 = ParamStore::<f64>::new();
            let mut g = Graph::new(&g0);
            let xi = g.input(Tensor::zeros(&[9, 2]));
            let (y, seg) = g.frame_stack(xi, 3, 2, &segs).unwrap();
            (g.shape(y).to_vec(), seg)
        };
        let r = rand_tensor(rng, out.total(), 6);
        cases.push(case("frame_stack", s, move |g| {
            let xv = g.param(x);
            let (y, _) = g.frame_stack(xv, 3, 2, &segs).unwrap();
            let y = g.sigmoid(y);
            probe(g, y, &r)
        }));
    }
    {
        let mut s = ParamStore::new();
        let init = Initializer::new(rng.random());
        let lin = Linear::new(&mut s, &init, "lin", 3, 4);
        let ffn = FeedForward::new(&mut s, &init, "ffn", 4, 6);
        let ln = LayerNorm::new(&mut s, "ln", 4);
        randomize(&mut s, rng, 0.8);
        let x = rand_tensor(rng, 5, 3);
        let labels: Vec<usize> = (0..5).map(|_| rng.random_range(0..4)).collect();
        cases.push(case("linear_ffn_layer_norm_ce", s, move |g| {
            let xv = g.input(x.clone());
            let h = lin.forward(g, xv).unwrap();
            let h = ln.forward(g, h).unwrap();
            let y = ffn.forward(g, h).unwrap();
            g.cross_entropy(y, &labels).unwrap()
        }));
    }
    for execution in [MoeExecution::Sparse, MoeExecution::DenseMixture] {
        let mut s = ParamStore::new();
        let init = Initializer::new(rng.random());
        let mut moe = MoeLayer::new(&mut s, &init, "moe", 4, 6, 4).unwrap();
        moe.execution = execution;
        randomize(&mut s, rng, 0.8);
        let x = rand_tensor(rng, 8, 4);
        let r = rand_tensor(rng, 8, 4);
        let name = match execution {
            MoeExecution::Sparse => "moe_sparse_with_aux",
            MoeExecution::DenseMixture => "moe_dense_mixture_with_aux",
        };
        cases.push(case(name, s, move |g| {
            let xv = g.input(x.clone());
            let out = moe.forward(g, xv).unwrap();
            let p = probe(g, out.y, &r);
            let aux = g.scale(out.aux_loss, 3.0);
            g.add(p, aux).unwrap()
        }));
    }
    {
        let mut s = ParamStore::new();
        let init = Initializer::new(rng.random());
        let mut cfg = random_layer_config(rng, false);
        cfg.causal = false;
        cfg.right_context = 2;
        let layer = ConformerLayer::new(&mut s, &init, "layer", &cfg).unwrap();
        randomize(&mut s, rng, 0.5);
        let t = 6;
        let x = rand_tensor(rng, t, cfg.model_dim);
        let r = rand_tensor(rng, t, cfg.model_dim);
        let segs = Segments::single(t);
        let mask = Arc::new(layer.mask(&segs));
        cases.push(case("plain_conformer_layer", s, move |g| {
            let xv = g.input(x.clone());
            let out = layer.forward(g, xv, &segs, mask.clone()).unwrap();
            probe(g, out.y, &r)
        }));
    }
    for placement in [MoePlacement::End, MoePlacement::Both] {
        let mut s = ParamStore::new();
        let init = Initializer::new(rng.random());
        let mut cfg = random_layer_config(rng, false);
        cfg.causal = false;
        cfg.right_context = 1;
        cfg.moe_placement = placement;
        cfg.num_experts = 3;
        cfg.expert_mult = 2;
        let layer = ConformerLayer::new(&mut s, &init, "layer", &cfg).unwrap();
        randomize(&mut s, rng, 0.5);
        let t = 7;
        let x = rand_tensor(rng, t, cfg.model_dim);
        let r = rand_tensor(rng, t, cfg.model_dim);
        let segs = Segments::new(vec![4, 3]);
        let mask = Arc::new(layer.mask(&segs));
        let name = match placement {
            MoePlacement::End => "moe_conformer_layer_end",
            _ => "moe_conformer_layer_both",
        };
        cases.push(case(name, s, move |g| {
            let xv = g.input(x.clone());
            let out = layer.forward(g, xv, &segs, mask.clone()).unwrap();
            let mut loss = probe(g, out.y, &r);
            for (_, m) in out.moe {
                let aux = g.scale(m.aux_loss, 0.5);
                loss = g.add(loss, aux).unwrap();
            }
            loss
        }));
    }
    {
        let mut s = ParamStore::new();
        let init = Initializer::new(rng.random());
        let adapter = ResidualAdapter::new(&mut s, &init, "adapter", 4, 3, 3);
        randomize(&mut s, rng, 0.8);
        let x = rand_tensor(rng, 6, 4);
        let r = rand_tensor(rng, 6, 4);
        let groups = vec![2, 0, 0, 1, 2, 2];
        cases.push(case("residual_adapter_frames", s, move |g| {
            let xv = g.input(x.clone());
            let y = adapter.forward_frames(g, xv, &groups).unwrap();
            probe(g, y, &r)
        }));
    }
    for mode in [EncoderMode::CausalOnly, EncoderMode::Cascaded] {
        let mut s = ParamStore::new();
        let cfg = tiny_encoder();
        let encoder = Encoder::new(&mut s, &Initializer::new(rng.random()), &cfg).unwrap();
        randomize(&mut s, rng, 0.5);
        let segs = Segments::new(vec![5, 4]);
        let x = rand_tensor(rng, 9, cfg.frontend.feature_dim);
        let width = encoder.output_dim(mode);
        let labels: Vec<usize> = (0..9).map(|_| rng.random_range(0..width)).collect();
        let name = match mode {
            EncoderMode::CausalOnly => "encoder_causal_only",
            EncoderMode::Cascaded => "encoder_cascaded_moe_adapters",
        };
        cases.push(case(name, s, move |g| {
            let xv = g.input(x.clone());
            let out = encoder.forward(g, xv, &segs, mode, Some(&[1, 0])).unwrap();
            let mut loss = g.cross_entropy(out.y, &labels).unwrap();
            for m in out.moe {
                let aux = g.scale(m.output.aux_loss, 0.1);
                loss = g.add(loss, aux).unwrap();
            }
            loss
        }));
    }
    cases
}
