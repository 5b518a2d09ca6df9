//! Independent f64 reference implementations and test helpers. Nothing here
//! goes through the autodiff graph except the finite-difference driver.

#![allow(dead_code)]

pub mod graphs;
pub mod streaming;

use moe_conformer::conformer::layer::{ConvModule, FfnBody, FfnSlot, SelfAttention};
use moe_conformer::conformer::{
    AdapterConfig, ConformerLayer, ConformerLayerConfig, EncoderConfig, MoePlacement, MoeResidual,
    MoeSelector,
};
use moe_conformer::graph::{Graph, Var};
use moe_conformer::moe::MoeLayer;
use moe_conformer::nn::{FeedForward, LayerNorm, Linear};
use moe_conformer::params::{ParamId, ParamStore};
use moe_conformer::tensor::Tensor;
use rand::Rng;

pub type Mat = Vec<Vec<f64>>;

pub fn mat(t: &Tensor<f64>) -> Mat {
    (0..t.rows()).map(|i| t.row(i).to_vec()).collect()
}

pub fn tensor(m: &Mat) -> Tensor<f64> {
    Tensor::from_rows(m).unwrap()
}

pub fn random_mat<R: Rng>(rng: &mut R, rows: usize, cols: usize, scale: f64) -> Mat {
    (0..rows)
        .map(|_| (0..cols).map(|_| rng.random_range(-scale..scale)).collect())
        .collect()
}

pub fn max_abs_diff(a: &Mat, b: &Tensor<f64>) -> f64 {
    assert_eq!(a.len(), b.rows());
    let mut worst: f64 = 0.0;
    for (i, row) in a.iter().enumerate() {
        assert_eq!(row.len(), b.cols());
        for (j, &v) in row.iter().enumerate() {
            worst = worst.max((v - b.at(i, j)).abs());
        }
    }
    worst
}

/// Sets every parameter to uniform noise in `±scale`, so no gate ties and
/// no zero-initialized projection hide a code path.
pub fn randomize<R: Rng>(store: &mut ParamStore<f64>, rng: &mut R, scale: f64) {
    let ids: Vec<ParamId> = store.ids().collect();
    for id in ids {
        for v in store.get_mut(id).data_mut() {
            *v = rng.random_range(-scale..scale);
        }
    }
}

fn param(store: &ParamStore<f64>, id: ParamId) -> Mat {
    mat(store.get(id))
}

pub fn matmul(a: &Mat, b: &Mat) -> Mat {
    let inner = b.len();
    let cols = b.first().map_or(0, Vec::len);
    a.iter()
        .map(|row| {
            assert_eq!(row.len(), inner);
            (0..cols)
                .map(|j| (0..inner).map(|k| row[k] * b[k][j]).sum())
                .collect()
        })
        .collect()
}

pub fn add(a: &Mat, b: &Mat) -> Mat {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.iter().zip(y).map(|(p, q)| p + q).collect())
        .collect()
}

pub fn scale(a: &Mat, s: f64) -> Mat {
    a.iter()
        .map(|r| r.iter().map(|v| v * s).collect())
        .collect()
}

pub fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

pub fn swish(a: &Mat) -> Mat {
    a.iter()
        .map(|r| r.iter().map(|&v| v * sigmoid(v)).collect())
        .collect()
}

pub fn softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
    let z: f64 = e.iter().sum();
    e.iter().map(|v| v / z).collect()
}

pub fn linear(store: &ParamStore<f64>, l: &Linear, x: &Mat) -> Mat {
    let b = &param(store, l.bias)[0];
    matmul(x, &param(store, l.weight))
        .into_iter()
        .map(|r| r.iter().zip(b).map(|(v, c)| v + c).collect())
        .collect()
}

pub fn layer_norm(store: &ParamStore<f64>, ln: &LayerNorm, x: &Mat) -> Mat {
    let g = &param(store, ln.gain)[0];
    let b = &param(store, ln.bias)[0];
    x.iter()
        .map(|r| {
            let n = r.len() as f64;
            let mean = r.iter().sum::<f64>() / n;
            let var = r.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            let s = (var + 1e-5).sqrt();
            r.iter()
                .enumerate()
                .map(|(j, v)| (v - mean) / s * g[j] + b[j])
                .collect()
        })
        .collect()
}

pub fn ffn(store: &ParamStore<f64>, f: &FeedForward, x: &Mat) -> Mat {
    linear(store, &f.down, &swish(&linear(store, &f.up, x)))
}

/// Windowed multi-head attention over one sequence.
pub fn attention(q: &Mat, k: &Mat, v: &Mat, heads: usize, left: usize, right: usize) -> Mat {
    let t = q.len();
    let d = q.first().map_or(0, Vec::len);
    let dh = d / heads;
    let mut out = vec![vec![0.0; d]; t];
    for h in 0..heads {
        let cols = h * dh..(h + 1) * dh;
        for i in 0..t {
            let lo = i.saturating_sub(left);
            let hi = (i + right).min(t - 1);
            let scores: Vec<f64> = (lo..=hi)
                .map(|j| cols.clone().map(|c| q[i][c] * k[j][c]).sum::<f64>() / (dh as f64).sqrt())
                .collect();
            let p = softmax(&scores);
            for (w, j) in p.iter().zip(lo..=hi) {
                for c in cols.clone() {
                    out[i][c] += w * v[j][c];
                }
            }
        }
    }
    out
}

/// `y[t] = b + Σ_j w[j] x[t - K + 1 + j]`, zero before the start.
pub fn causal_conv(x: &Mat, w: &Mat, b: &[f64]) -> Mat {
    let k = w.len();
    (0..x.len())
        .map(|t| {
            (0..b.len())
                .map(|c| {
                    let mut acc = b[c];
                    for (j, wr) in w.iter().enumerate() {
                        if t + j + 1 >= k {
                            acc += wr[c] * x[t + j + 1 - k][c];
                        }
                    }
                    acc
                })
                .collect()
        })
        .collect()
}

/// Top-2 indices in descending gate order, lowest index first on ties.
pub fn top2(gates: &[f64]) -> [usize; 2] {
    let mut idx: Vec<usize> = (0..gates.len()).collect();
    idx.sort_by(|&a, &b| gates[b].partial_cmp(&gates[a]).unwrap().then(a.cmp(&b)));
    [idx[0], idx[1]]
}

pub fn gates(store: &ParamStore<f64>, layer: &MoeLayer, x: &Mat) -> Mat {
    matmul(x, &param(store, layer.gate))
        .iter()
        .map(|r| softmax(r))
        .collect()
}

/// Evaluates every expert on every frame and zeroes the contributions of the
/// experts a frame did not select.
pub fn moe_dense(store: &ParamStore<f64>, layer: &MoeLayer, x: &Mat) -> Mat {
    let g = gates(store, layer, x);
    let outs: Vec<Mat> = layer.experts.iter().map(|e| ffn(store, e, x)).collect();
    let d = layer.model_dim;
    (0..x.len())
        .map(|t| {
            let sel = top2(&g[t]);
            let mut y = vec![0.0; d];
            for (e, out) in outs.iter().enumerate() {
                let w = if sel.contains(&e) { g[t][e] } else { 0.0 };
                for c in 0..d {
                    y[c] += w * out[t][c];
                }
            }
            y
        })
        .collect()
}

/// `(1/N) Σ_i (c_i/S) m_i` recomputed from raw gates.
pub fn aux_loss(gates: &Mat) -> f64 {
    let n = gates[0].len();
    let s = gates.len() as f64;
    let mut counts = vec![0.0; n];
    let mut mean = vec![0.0; n];
    for row in gates {
        for e in top2(row) {
            counts[e] += 1.0;
        }
        for (m, g) in mean.iter_mut().zip(row) {
            *m += g / s;
        }
    }
    (0..n).map(|i| counts[i] / s * mean[i]).sum::<f64>() / n as f64
}

fn ffn_slot(store: &ParamStore<f64>, slot: &FfnSlot, x: &Mat) -> Mat {
    let h = layer_norm(store, &slot.norm, x);
    match &slot.body {
        FfnBody::Plain(f) => add(x, &scale(&ffn(store, f, &h), 0.5)),
        FfnBody::Moe(m, residual) => {
            let s = if *residual == MoeResidual::Half {
                0.5
            } else {
                1.0
            };
            add(x, &scale(&moe_dense(store, m, &h), s))
        }
    }
}

fn self_attention(
    store: &ParamStore<f64>,
    a: &SelfAttention,
    x: &Mat,
    cfg: &ConformerLayerConfig,
) -> Mat {
    let h = layer_norm(store, &a.norm, x);
    let q = linear(store, &a.query, &h);
    let k = linear(store, &a.key, &h);
    let v = linear(store, &a.value, &h);
    let o = attention(&q, &k, &v, a.heads, cfg.left_context, cfg.right_context);
    add(x, &linear(store, &a.output, &o))
}

fn conv_module(store: &ParamStore<f64>, c: &ConvModule, x: &Mat) -> Mat {
    let d = c.pointwise_out.output;
    let h = linear(store, &c.pointwise_in, &layer_norm(store, &c.norm, x));
    let glu: Mat = h
        .iter()
        .map(|r| (0..d).map(|j| r[j] * sigmoid(r[d + j])).collect())
        .collect();
    let w = param(store, c.depthwise.kernel);
    let b = param(store, c.depthwise.bias)[0].clone();
    let h = causal_conv(&glu, &w, &b);
    let h = swish(&layer_norm(store, &c.conv_norm, &h));
    add(x, &linear(store, &c.pointwise_out, &h))
}

/// One Conformer layer on a single sequence.
pub fn conformer_layer(store: &ParamStore<f64>, layer: &ConformerLayer, x: &Mat) -> Mat {
    let x = ffn_slot(store, &layer.ffn_start, x);
    let x = self_attention(store, &layer.attention, &x, &layer.config);
    let x = conv_module(store, &layer.conv, &x);
    let x = ffn_slot(store, &layer.ffn_end, &x);
    layer_norm(store, &layer.norm, &x)
}

/// Small random layer geometry.
pub fn random_layer_config<R: Rng>(rng: &mut R, allow_moe: bool) -> ConformerLayerConfig {
    let heads = [1, 2, 4][rng.random_range(0..3)];
    // width 2 would make layer norm a sign function
    let model_dim = heads * rng.random_range(2..=6).max(4 / heads);
    let causal = rng.random_bool(0.5);
    let mut cfg = ConformerLayerConfig::plain(model_dim, heads, rng.random_range(1..=5));
    cfg.ffn_mult = rng.random_range(1..=3);
    cfg.causal = causal;
    cfg.left_context = rng.random_range(0..=6);
    cfg.right_context = if causal { 0 } else { rng.random_range(0..=4) };
    if allow_moe && rng.random_bool(0.6) {
        cfg.moe_placement =
            [MoePlacement::Start, MoePlacement::End, MoePlacement::Both][rng.random_range(0..3)];
        cfg.num_experts = rng.random_range(2..=4);
        cfg.expert_mult = rng.random_range(1..=2);
        if rng.random_bool(0.5) {
            cfg.moe_residual = MoeResidual::Half;
        }
    }
    cfg
}

/// Worst per-tensor relative error between the analytic gradient and
/// central differences with step 1e-5. Tensors with more than
/// `max_entries` elements are checked on an evenly spaced subset.
pub fn gradient_check(
    store: &mut ParamStore<f64>,
    max_entries: usize,
    loss: &dyn Fn(&mut Graph<'_, f64>) -> Var,
) -> f64 {
    const STEP: f64 = 1e-5;
    let eval = |store: &ParamStore<f64>| {
        let mut g = Graph::new(store);
        let l = loss(&mut g);
        g.value(l).data()[0]
    };
    let analytic = {
        let mut g = Graph::new(store);
        let l = loss(&mut g);
        g.backward(l).unwrap()
    };
    let ids: Vec<ParamId> = store.ids().collect();
    let mut worst: f64 = 0.0;
    for id in ids {
        let n = store.get(id).numel();
        let a: Vec<f64> = analytic
            .get(id)
            .map_or_else(|| vec![0.0; n], |t| t.data().to_vec());
        let stride = n.div_ceil(max_entries).max(1);
        let (mut diff, mut na, mut nn) = (0.0, 0.0, 0.0);
        for i in (0..n).step_by(stride) {
            let orig = store.get(id).data()[i];
            store.get_mut(id).data_mut()[i] = orig + STEP;
            let fp = eval(store);
            store.get_mut(id).data_mut()[i] = orig - STEP;
            let fm = eval(store);
            store.get_mut(id).data_mut()[i] = orig;
            let num = (fp - fm) / (2.0 * STEP);
            diff += (a[i] - num).powi(2);
            na += a[i] * a[i];
            nn += num * num;
        }
        let denom = na.sqrt().max(nn.sqrt());
        let rel = if denom < 1e-9 {
            diff.sqrt()
        } else {
            diff.sqrt() / denom
        };
        worst = worst.max(rel);
    }
    worst
}

/// Small random encoder geometry, MoE and adapters included at random.
pub fn random_encoder_config<R: Rng>(rng: &mut R) -> EncoderConfig {
    let mut c = EncoderConfig::default();
    c.frontend.feature_dim = rng.random_range(2..=4);
    c.frontend.stack = rng.random_range(1..=3);
    c.frontend.downsample = rng.random_range(1..=3);
    c.input_dim = [4, 8][rng.random_range(0..2)];
    c.input_convs = rng.random_range(0..=2);
    c.input_kernel = rng.random_range(1..=3);
    c.time_stack = rng.random_range(1..=2);
    c.causal.layers = rng.random_range(1..=2);
    c.causal.dim = [4, 8][rng.random_range(0..2)];
    c.causal.heads = rng.random_range(1..=2);
    c.causal.ffn_mult = rng.random_range(1..=2);
    c.causal.conv_kernel = rng.random_range(1..=4);
    c.causal.left_context = rng.random_range(0..=5);
    c.non_causal.layers = rng.random_range(1..=3);
    c.non_causal.dim = [4, 6, 8][rng.random_range(0..3)];
    c.non_causal.heads = 2;
    c.non_causal.ffn_mult = rng.random_range(1..=2);
    c.non_causal.conv_kernel = rng.random_range(1..=4);
    c.non_causal.left_context = rng.random_range(0..=5);
    c.non_causal.right_context = rng.random_range(0..=5);
    c.moe.placement = [
        MoePlacement::None,
        MoePlacement::Start,
        MoePlacement::End,
        MoePlacement::Both,
    ][rng.random_range(0..4)];
    c.moe.num_experts = rng.random_range(2..=4);
    c.moe.expert_mult = rng.random_range(1..=2);
    c.moe.selector =
        [MoeSelector::All, MoeSelector::Odd, MoeSelector::FirstOnly][rng.random_range(0..3)];
    if rng.random_bool(0.3) {
        c.adapters = Some(AdapterConfig { dim: 2, groups: 2 });
    }
    c.validate().unwrap();
    c
}
