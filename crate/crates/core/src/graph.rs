//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation of a forward pass as a node holding
//! its output value. Nodes are appended in evaluation order, so the tape is
//! topologically sorted by construction and [`Graph::backward`] is a single
//! reverse sweep that visits each node once.
//!
//! Parameters are borrowed from a [`ParamStore`]; each parameter becomes one
//! leaf no matter how often it is used, and gradients are reported per
//! [`ParamId`]. Index lists (routing selections, gathers, labels) are plain
//! data on the tape and are constants for differentiation.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::sequence::{AttentionMask, Segments};
use crate::tensor::{gemm, MatRef, Real, Tensor};

/// Layer-norm variance epsilon.
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Multiply-accumulate counts of a forward pass.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct MacTally {
    /// MACs of products against parameter tensors (linear maps, depthwise
    /// convolution kernels).
    pub weight_macs: u64,
    /// MACs of attention score and context products.
    pub attention_macs: u64,
}

enum Op<F> {
    Input,
    Param(ParamId),
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    MulCol(Var, Var),
    Scale(Var, F),
    Sigmoid(Var),
    Swish(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<F>,
        rstd: Vec<F>,
    },
    SoftmaxRows(Var),
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<F>,
    },
    DepthwiseConv {
        x: Var,
        kernel: Var,
        bias: Var,
        segments: Segments,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        mask: Arc<AttentionMask>,
        probs: Vec<Vec<F>>,
    },
    ConcatCols(Vec<Var>),
    SliceCols {
        x: Var,
        start: usize,
    },
    GatherRows {
        x: Var,
        index: Vec<usize>,
    },
    ScatterAdd(Vec<(Var, Vec<usize>)>),
    GatherElems {
        x: Var,
        positions: Vec<(usize, usize)>,
    },
    MeanRows(Var),
    Sum(Var),
    FrameStack {
        x: Var,
        sources: Vec<Option<usize>>,
        stack: usize,
    },
}

struct Node<F> {
    value: Tensor<F>,
    op: Op<F>,
}

/// Recording of one forward computation.
pub struct Graph<'p, F: Real> {
    params: &'p ParamStore<F>,
    nodes: Vec<Node<F>>,
    param_vars: Vec<Option<Var>>,
    tally: MacTally,
}

/// Gradient of a scalar loss with respect to every parameter of a store.
/// Parameters the loss does not depend on have no entry (zero gradient).
#[derive(Clone, Debug)]
pub struct Gradients<F> {
    grads: Vec<Option<Tensor<F>>>,
}

impl<F: Real> Gradients<F> {
    pub fn get(&self, id: ParamId) -> Option<&Tensor<F>> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    /// True if the parameter received any gradient contribution at all.
    pub fn touched(&self, id: ParamId) -> bool {
        self.get(id).is_some()
    }

    /// Global L2 norm over all gradients.
    pub fn global_norm(&self) -> f64 {
        self.grads
            .iter()
            .flatten()
            .flat_map(|t| t.data().iter())
            .map(|v| {
                let v = v.to_f64_lossy();
                v * v
            })
            .sum::<f64>()
            .sqrt()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor<F>)> {
        self.grads
            .iter()
            .enumerate()
            .filter_map(|(i, g)| g.as_ref().map(|g| (ParamId(i), g)))
    }
}

fn dims2<F: Real>(t: &Tensor<F>, what: &str) -> Result<(usize, usize)> {
    if t.rank() != 2 {
        return Err(Error::param(format!(
            "{what}: expected a matrix, got shape {:?}",
            t.shape()
        )));
    }
    Ok((t.shape()[0], t.shape()[1]))
}

fn sigmoid<F: Real>(x: F) -> F {
    F::one() / (F::one() + (-x).exp())
}

impl<'p, F: Real> Graph<'p, F> {
    pub fn new(params: &'p ParamStore<F>) -> Self {
        Graph {
            params,
            nodes: Vec::new(),
            param_vars: vec![None; params.len()],
            tally: MacTally::default(),
        }
    }

    pub fn params(&self) -> &'p ParamStore<F> {
        self.params
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn tally(&self) -> MacTally {
        self.tally
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    fn is_param(&self, v: Var) -> bool {
        matches!(self.nodes[v.0].op, Op::Param(_))
    }

    /// Constant leaf.
    pub fn input(&mut self, value: Tensor<F>) -> Var {
        self.push(value, Op::Input)
    }

    /// Leaf bound to a parameter; repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.0] {
            return v;
        }
        let v = self.push(self.params.get(id).clone(), Op::Param(id));
        self.param_vars[id.0] = Some(v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = dims2(self.value(a), "matmul lhs")?;
        let (k2, n) = dims2(self.value(b), "matmul rhs")?;
        if k != k2 {
            return Err(Error::param(format!(
                "matmul shape mismatch [{m}, {k}] x [{k2}, {n}]"
            )));
        }
        let out = self.value(a).matmul(self.value(b))?;
        if self.is_param(b) {
            self.tally.weight_macs += (m * k * n) as u64;
        }
        Ok(self.push(out, Op::MatMul(a, b)))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::param(format!(
                "{what}: shape mismatch {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    fn zip_map(&self, a: Var, b: Var, f: impl Fn(F, F) -> F) -> Tensor<F> {
        let (ta, tb) = (self.value(a), self.value(b));
        Tensor::from_parts(
            ta.shape().to_vec(),
            ta.data()
                .iter()
                .zip(tb.data())
                .map(|(&x, &y)| f(x, y))
                .collect(),
        )
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let out = self.zip_map(a, b, |x, y| x + y);
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let out = self.zip_map(a, b, |x, y| x * y);
        Ok(self.push(out, Op::Mul(a, b)))
    }

    /// `a[m × n] + row[1 × n]` broadcast over rows.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (m, n) = dims2(self.value(a), "add_row")?;
        if self.value(row).numel() != n {
            return Err(Error::param(format!(
                "add_row: row of {} elements for {n} columns",
                self.value(row).numel()
            )));
        }
        let (ta, tr) = (self.value(a), self.value(row));
        let mut out = ta.data().to_vec();
        for i in 0..m {
            for (o, &r) in out[i * n..(i + 1) * n].iter_mut().zip(tr.data()) {
                *o = *o + r;
            }
        }
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::AddRow(a, row)))
    }

    /// `a[m × n] * col[m × 1]` broadcast over columns.
    pub fn mul_col(&mut self, a: Var, col: Var) -> Result<Var> {
        let (m, n) = dims2(self.value(a), "mul_col")?;
        if self.value(col).numel() != m {
            return Err(Error::param(format!(
                "mul_col: column of {} elements for {m} rows",
                self.value(col).numel()
            )));
        }
        let (ta, tc) = (self.value(a), self.value(col));
        let mut out = ta.data().to_vec();
        for i in 0..m {
            let c = tc.data()[i];
            for o in &mut out[i * n..(i + 1) * n] {
                *o = *o * c;
            }
        }
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::MulCol(a, col)))
    }

    pub fn scale(&mut self, a: Var, s: F) -> Var {
        let out = self.value(a).map(|x| x * s);
        self.push(out, Op::Scale(a, s))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(sigmoid);
        self.push(out, Op::Sigmoid(a))
    }

    /// `x * sigmoid(x)`.
    pub fn swish(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x * sigmoid(x));
        self.push(out, Op::Swish(a))
    }

    /// Row-wise layer normalization with affine gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (m, n) = dims2(self.value(x), "layer_norm")?;
        if self.value(gain).numel() != n || self.value(bias).numel() != n {
            return Err(Error::param(format!(
                "layer_norm: affine terms must have {n} elements"
            )));
        }
        let eps = F::from_f64_lossy(LAYER_NORM_EPS);
        let nf = F::from_usize(n.max(1)).unwrap();
        let tx = self.value(x);
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        let mut xhat = vec![F::zero(); m * n];
        let mut rstd = vec![F::zero(); m];
        let mut out = vec![F::zero(); m * n];
        for i in 0..m {
            let row = tx.row(i);
            let mean = row.iter().copied().sum::<F>() / nf;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / nf;
            let r = F::one() / (var + eps).sqrt();
            rstd[i] = r;
            for j in 0..n {
                let h = (row[j] - mean) * r;
                xhat[i * n + j] = h;
                out[i * n + j] = h * g[j] + b[j];
            }
        }
        Ok(self.push(
            Tensor::from_parts(vec![m, n], out),
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
        ))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        dims2(self.value(a), "softmax_rows")?;
        let out = self.value(a).softmax(1)?;
        Ok(self.push(out, Op::SoftmaxRows(a)))
    }

    /// Mean negative log-likelihood of `labels` under row-wise softmax of
    /// `logits`. Returns a `[1 × 1]` scalar.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (m, n) = dims2(self.value(logits), "cross_entropy")?;
        if labels.len() != m {
            return Err(Error::param(format!(
                "cross_entropy: {} labels for {m} rows",
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= n) {
            return Err(Error::param(format!(
                "cross_entropy: label {bad} out of range for {n} classes"
            )));
        }
        let probs = self.value(logits).softmax(1)?.into_data();
        let mut total = 0.0f64;
        let tl = self.value(logits);
        for (i, &l) in labels.iter().enumerate() {
            let row = tl.row(i);
            let max = row.iter().copied().fold(F::neg_infinity(), F::max);
            let lse = max.to_f64_lossy()
                + row
                    .iter()
                    .map(|&v| (v - max).to_f64_lossy().exp())
                    .sum::<f64>()
                    .ln();
            total += lse - row[l].to_f64_lossy();
        }
        let mean = if m == 0 { 0.0 } else { total / m as f64 };
        Ok(self.push(
            Tensor::scalar(F::from_f64_lossy(mean)),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
        ))
    }

    /// Causal depthwise 1-D convolution along time: output frame `t` of a
    /// sequence sees input frames `t-K+1 ..= t` of the same sequence, zero
    /// padded at the sequence start. `kernel` is `[K × C]`, `bias` has `C`
    /// elements.
    pub fn causal_depthwise_conv(
        &mut self,
        x: Var,
        kernel: Var,
        bias: Var,
        segments: &Segments,
    ) -> Result<Var> {
        let (t_total, c) = dims2(self.value(x), "conv input")?;
        let (ksize, kc) = dims2(self.value(kernel), "conv kernel")?;
        if kc != c || self.value(bias).numel() != c {
            return Err(Error::param(format!(
                "conv: kernel [{ksize}, {kc}] / bias {} for {c} channels",
                self.value(bias).numel()
            )));
        }
        if segments.total() != t_total {
            return Err(Error::param(format!(
                "conv: segments cover {} frames, input has {t_total}",
                segments.total()
            )));
        }
        let (tx, tw, tb) = (self.value(x), self.value(kernel), self.value(bias));
        let (xd, wd, bd) = (tx.data(), tw.data(), tb.data());
        let mut out = vec![F::zero(); t_total * c];
        for (off, len) in segments.spans() {
            for t in 0..len {
                let o = &mut out[(off + t) * c..(off + t + 1) * c];
                o.copy_from_slice(bd);
                for j in 0..ksize {
                    // tap j reads frame t - (K-1) + j
                    let Some(src) = (t + j).checked_sub(ksize - 1) else {
                        continue;
                    };
                    let xr = &xd[(off + src) * c..(off + src + 1) * c];
                    let wr = &wd[j * c..(j + 1) * c];
                    for ch in 0..c {
                        o[ch] = o[ch] + wr[ch] * xr[ch];
                    }
                }
            }
        }
        self.tally.weight_macs += (t_total * c * ksize) as u64;
        Ok(self.push(
            Tensor::from_parts(vec![t_total, c], out),
            Op::DepthwiseConv {
                x,
                kernel,
                bias,
                segments: segments.clone(),
            },
        ))
    }

    /// Multi-head scaled dot-product attention over `[T × D]` projections.
    /// Heads split the `D` columns evenly. Disallowed mask entries get a
    /// `-inf` score before the softmax.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        mask: Arc<AttentionMask>,
    ) -> Result<Var> {
        let (t_total, d) = dims2(self.value(q), "attention q")?;
        if self.shape(k) != [t_total, d] || self.shape(v) != [t_total, d] {
            return Err(Error::param("attention: q, k, v shapes differ"));
        }
        if heads == 0 || d % heads != 0 {
            return Err(Error::param(format!(
                "attention: {heads} heads do not divide width {d}"
            )));
        }
        if mask.total_frames() != t_total {
            return Err(Error::param(format!(
                "attention: mask covers {} frames, input has {t_total}",
                mask.total_frames()
            )));
        }
        let dh = d / heads;
        let scale = F::one() / F::from_usize(dh).unwrap().sqrt();
        let (qd, kd, vd) = (
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
        );
        let mut out = vec![F::zero(); t_total * d];
        let mut probs = Vec::with_capacity(mask.blocks().len() * heads);
        let mut macs = 0u64;
        let head_view = |data, off: usize, len: usize, h: usize| MatRef {
            data,
            offset: off * d + h * dh,
            rows: len,
            cols: dh,
            rs: d,
            cs: 1,
        };
        for block in mask.blocks() {
            let (off, len) = (block.offset, block.len);
            for h in 0..heads {
                let mut scores = vec![F::zero(); len * len];
                gemm(
                    head_view(qd, off, len, h),
                    head_view(kd, off, len, h).t(),
                    &mut scores,
                    0,
                    len,
                    false,
                );
                for t in 0..len {
                    let row = &mut scores[t * len..(t + 1) * len];
                    let allowed = &block.allowed[t * len..(t + 1) * len];
                    let mut max = F::neg_infinity();
                    for (s, a) in row.iter_mut().zip(allowed) {
                        *s = if *a { *s * scale } else { F::neg_infinity() };
                        max = max.max(*s);
                    }
                    if max == F::neg_infinity() {
                        row.fill(F::zero());
                        continue;
                    }
                    let mut total = F::zero();
                    for s in row.iter_mut() {
                        *s = (*s - max).exp();
                        total = total + *s;
                    }
                    for s in row.iter_mut() {
                        *s = *s / total;
                    }
                }
                gemm(
                    MatRef::dense(&scores, len, len),
                    head_view(vd, off, len, h),
                    &mut out,
                    off * d + h * dh,
                    d,
                    false,
                );
                probs.push(scores);
            }
            macs += (2 * len * len * d) as u64;
        }
        self.tally.attention_macs += macs;
        Ok(self.push(
            Tensor::from_parts(vec![t_total, d], out),
            Op::Attention {
                q,
                k,
                v,
                heads,
                mask,
                probs,
            },
        ))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::param("concat_cols of nothing"));
        };
        let (m, _) = dims2(self.value(first), "concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pm, pn) = dims2(self.value(p), "concat_cols")?;
            if pm != m {
                return Err(Error::param("concat_cols: row counts differ"));
            }
            widths.push(pn);
        }
        let n: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(m * n);
        for i in 0..m {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(i));
            }
        }
        Ok(self.push(
            Tensor::from_parts(vec![m, n], out),
            Op::ConcatCols(parts.to_vec()),
        ))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = dims2(self.value(x), "slice_cols")?;
        if start + len > n {
            return Err(Error::param(format!(
                "slice_cols {start}..{} out of {n} columns",
                start + len
            )));
        }
        let tx = self.value(x);
        let out = (0..m)
            .flat_map(|i| tx.row(i)[start..start + len].iter().copied())
            .collect();
        Ok(self.push(
            Tensor::from_parts(vec![m, len], out),
            Op::SliceCols { x, start },
        ))
    }

    pub fn gather_rows(&mut self, x: Var, index: &[usize]) -> Result<Var> {
        let (m, n) = dims2(self.value(x), "gather_rows")?;
        if let Some(&bad) = index.iter().find(|&&i| i >= m) {
            return Err(Error::param(format!("gather_rows: row {bad} of {m}")));
        }
        let tx = self.value(x);
        let out = index
            .iter()
            .flat_map(|&i| tx.row(i).iter().copied())
            .collect();
        Ok(self.push(
            Tensor::from_parts(vec![index.len(), n], out),
            Op::GatherRows {
                x,
                index: index.to_vec(),
            },
        ))
    }

    /// Sums row blocks into a zero `[rows × n]` matrix: row `j` of part `p`
    /// is added to output row `index_p[j]`. Parts are accumulated in order.
    pub fn scatter_add(
        &mut self,
        rows: usize,
        n: usize,
        parts: Vec<(Var, Vec<usize>)>,
    ) -> Result<Var> {
        let mut out = vec![F::zero(); rows * n];
        for (p, index) in &parts {
            let (pm, pn) = dims2(self.value(*p), "scatter_add")?;
            if pn != n || pm != index.len() {
                return Err(Error::param(format!(
                    "scatter_add: part [{pm}, {pn}] with {} indices into width {n}",
                    index.len()
                )));
            }
            let tp = self.value(*p);
            for (j, &r) in index.iter().enumerate() {
                if r >= rows {
                    return Err(Error::param(format!("scatter_add: row {r} of {rows}")));
                }
                for (o, &v) in out[r * n..(r + 1) * n].iter_mut().zip(tp.row(j)) {
                    *o = *o + v;
                }
            }
        }
        Ok(self.push(
            Tensor::from_parts(vec![rows, n], out),
            Op::ScatterAdd(parts),
        ))
    }

    /// Picks single elements into a `[len × 1]` column.
    pub fn gather_elems(&mut self, x: Var, positions: &[(usize, usize)]) -> Result<Var> {
        let (m, n) = dims2(self.value(x), "gather_elems")?;
        if let Some(&(i, j)) = positions.iter().find(|&&(i, j)| i >= m || j >= n) {
            return Err(Error::param(format!(
                "gather_elems: ({i}, {j}) outside [{m}, {n}]"
            )));
        }
        let tx = self.value(x);
        let out = positions.iter().map(|&(i, j)| tx.at(i, j)).collect();
        Ok(self.push(
            Tensor::from_parts(vec![positions.len(), 1], out),
            Op::GatherElems {
                x,
                positions: positions.to_vec(),
            },
        ))
    }

    /// Column means, `[m × n] -> [1 × n]`.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let (m, n) = dims2(self.value(x), "mean_rows")?;
        if m == 0 {
            return Err(Error::param("mean_rows of an empty matrix"));
        }
        let tx = self.value(x);
        let mf = F::from_usize(m).unwrap();
        let mut out = vec![F::zero(); n];
        for i in 0..m {
            for (o, &v) in out.iter_mut().zip(tx.row(i)) {
                *o = *o + v;
            }
        }
        for o in &mut out {
            *o = *o / mf;
        }
        Ok(self.push(Tensor::from_parts(vec![1, n], out), Op::MeanRows(x)))
    }

    /// Sum of all elements as a `[1 × 1]` scalar.
    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum();
        self.push(Tensor::scalar(s), Op::Sum(x))
    }

    /// Frame stacking per sequence: output frame `r` of a sequence is input
    /// frame `t = r * downsample` concatenated with frames `t-1, ...,
    /// t-stack+1` (zeros before the sequence start). Returns the stacked
    /// matrix and its segments.
    pub fn frame_stack(
        &mut self,
        x: Var,
        stack: usize,
        downsample: usize,
        segments: &Segments,
    ) -> Result<(Var, Segments)> {
        if stack == 0 || downsample == 0 {
            return Err(Error::param(
                "frame_stack: stack and downsample must be >= 1",
            ));
        }
        let (t_total, d) = dims2(self.value(x), "frame_stack")?;
        if segments.total() != t_total {
            return Err(Error::param(format!(
                "frame_stack: segments cover {} frames, input has {t_total}",
                segments.total()
            )));
        }
        let out_segments = segments.downsampled(downsample);
        let mut sources = Vec::new();
        for (off, len) in segments.spans() {
            for t in (0..len).step_by(downsample) {
                for s in 0..stack {
                    sources.push(t.checked_sub(s).map(|src| off + src));
                }
            }
        }
        let rows = out_segments.total();
        let tx = self.value(x);
        let mut out = vec![F::zero(); rows * stack * d];
        for (slot, src) in sources.iter().enumerate() {
            if let Some(src) = *src {
                out[slot * d..(slot + 1) * d].copy_from_slice(tx.row(src));
            }
        }
        let v = self.push(
            Tensor::from_parts(vec![rows, stack * d], out),
            Op::FrameStack { x, sources, stack },
        );
        Ok((v, out_segments))
    }

    /// Reverse sweep from a scalar loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients<F>> {
        if self.value(loss).numel() != 1 {
            return Err(Error::param(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<F>>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        grads[loss.0] = Some(vec![F::one()]);
        let mut out: Vec<Option<Tensor<F>>> = vec![None; self.params.len()];

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            self.backward_node(node, &g, &mut grads, &mut out);
        }
        Ok(Gradients { grads: out })
    }

    fn backward_node(
        &self,
        node: &Node<F>,
        g: &[F],
        grads: &mut [Option<Vec<F>>],
        params_out: &mut [Option<Tensor<F>>],
    ) {
        let val = |v: Var| &self.nodes[v.0].value;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [F])| {
            let slot =
                grads[v.0].get_or_insert_with(|| vec![F::zero(); self.nodes[v.0].value.numel()]);
            f(slot);
        };
        let y = node.value.data();
        match &node.op {
            Op::Input => {}
            Op::Param(id) => {
                params_out[id.0] =
                    Some(Tensor::from_parts(node.value.shape().to_vec(), g.to_vec()));
            }
            Op::MatMul(a, b) => {
                let (m, k) = (val(*a).shape()[0], val(*a).shape()[1]);
                let n = val(*b).shape()[1];
                let gm = MatRef::dense(g, m, n);
                acc(*a, &mut |ga| {
                    gemm(gm, MatRef::dense(val(*b).data(), k, n).t(), ga, 0, k, true)
                });
                acc(*b, &mut |gb| {
                    gemm(MatRef::dense(val(*a).data(), m, k).t(), gm, gb, 0, n, true)
                });
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    acc(v, &mut |gv| {
                        gv.iter_mut().zip(g).for_each(|(o, &d)| *o = *o + d)
                    });
                }
            }
            Op::AddRow(a, row) => {
                acc(*a, &mut |ga| {
                    ga.iter_mut().zip(g).for_each(|(o, &d)| *o = *o + d)
                });
                let n = val(*row).numel();
                acc(*row, &mut |gr| {
                    for chunk in g.chunks(n) {
                        gr.iter_mut().zip(chunk).for_each(|(o, &d)| *o = *o + d);
                    }
                });
            }
            Op::Mul(a, b) => {
                let (va, vb) = (val(*a).data(), val(*b).data());
                acc(*a, &mut |ga| {
                    for ((o, &d), &w) in ga.iter_mut().zip(g).zip(vb) {
                        *o = *o + d * w;
                    }
                });
                acc(*b, &mut |gb| {
                    for ((o, &d), &w) in gb.iter_mut().zip(g).zip(va) {
                        *o = *o + d * w;
                    }
                });
            }
            Op::MulCol(a, col) => {
                let (va, vc) = (val(*a).data(), val(*col).data());
                let m = vc.len();
                let n = if m == 0 { 0 } else { va.len() / m };
                acc(*a, &mut |ga| {
                    for i in 0..m {
                        for j in 0..n {
                            ga[i * n + j] = ga[i * n + j] + g[i * n + j] * vc[i];
                        }
                    }
                });
                acc(*col, &mut |gc| {
                    for i in 0..m {
                        let mut s = F::zero();
                        for j in 0..n {
                            s = s + g[i * n + j] * va[i * n + j];
                        }
                        gc[i] = gc[i] + s;
                    }
                });
            }
            Op::Scale(a, s) => {
                acc(*a, &mut |ga| {
                    ga.iter_mut().zip(g).for_each(|(o, &d)| *o = *o + d * *s)
                });
            }
            Op::Sigmoid(a) => {
                acc(*a, &mut |ga| {
                    for ((o, &d), &yv) in ga.iter_mut().zip(g).zip(y) {
                        *o = *o + d * yv * (F::one() - yv);
                    }
                });
            }
            Op::Swish(a) => {
                let xa = val(*a).data();
                acc(*a, &mut |ga| {
                    for ((o, &d), &x) in ga.iter_mut().zip(g).zip(xa) {
                        let s = sigmoid(x);
                        *o = *o + d * (s + x * s * (F::one() - s));
                    }
                });
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let n = val(*gain).numel();
                let m = rstd.len();
                let gv = val(*gain).data();
                acc(*bias, &mut |gb| {
                    for chunk in g.chunks(n) {
                        gb.iter_mut().zip(chunk).for_each(|(o, &d)| *o = *o + d);
                    }
                });
                acc(*gain, &mut |gg| {
                    for (chunk, hrow) in g.chunks(n).zip(xhat.chunks(n)) {
                        for j in 0..n {
                            gg[j] = gg[j] + chunk[j] * hrow[j];
                        }
                    }
                });
                let nf = F::from_usize(n).unwrap();
                acc(*x, &mut |gx| {
                    for i in 0..m {
                        let dyr = &g[i * n..(i + 1) * n];
                        let hr = &xhat[i * n..(i + 1) * n];
                        let mut mean_dh = F::zero();
                        let mut mean_dh_h = F::zero();
                        for j in 0..n {
                            let dh = dyr[j] * gv[j];
                            mean_dh = mean_dh + dh;
                            mean_dh_h = mean_dh_h + dh * hr[j];
                        }
                        mean_dh = mean_dh / nf;
                        mean_dh_h = mean_dh_h / nf;
                        for j in 0..n {
                            let dh = dyr[j] * gv[j];
                            gx[i * n + j] =
                                gx[i * n + j] + rstd[i] * (dh - mean_dh - hr[j] * mean_dh_h);
                        }
                    }
                });
            }
            Op::SoftmaxRows(a) => {
                let n = node.value.shape()[1];
                acc(*a, &mut |ga| {
                    for (i, (gr, yr)) in g.chunks(n).zip(y.chunks(n)).enumerate() {
                        let dot: F = gr.iter().zip(yr).map(|(&d, &p)| d * p).sum();
                        for j in 0..n {
                            ga[i * n + j] = ga[i * n + j] + yr[j] * (gr[j] - dot);
                        }
                    }
                });
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let m = labels.len();
                if m == 0 {
                    return;
                }
                let n = probs.len() / m;
                let scale = g[0] / F::from_usize(m).unwrap();
                acc(*logits, &mut |gl| {
                    for (i, &l) in labels.iter().enumerate() {
                        for j in 0..n {
                            let target = if j == l { F::one() } else { F::zero() };
                            gl[i * n + j] = gl[i * n + j] + scale * (probs[i * n + j] - target);
                        }
                    }
                });
            }
            Op::DepthwiseConv {
                x,
                kernel,
                bias,
                segments,
            } => {
                let (xd, wd) = (val(*x).data(), val(*kernel).data());
                let (ksize, c) = (val(*kernel).shape()[0], val(*kernel).shape()[1]);
                acc(*bias, &mut |gb| {
                    for chunk in g.chunks(c) {
                        gb.iter_mut().zip(chunk).for_each(|(o, &d)| *o = *o + d);
                    }
                });
                let taps = |f: &mut dyn FnMut(usize, usize, usize)| {
                    for (off, len) in segments.spans() {
                        for t in 0..len {
                            for j in 0..ksize {
                                if let Some(src) = (t + j).checked_sub(ksize - 1) {
                                    f(off + t, off + src, j);
                                }
                            }
                        }
                    }
                };
                acc(*kernel, &mut |gw| {
                    taps(&mut |dst, src, j| {
                        for ch in 0..c {
                            gw[j * c + ch] = gw[j * c + ch] + g[dst * c + ch] * xd[src * c + ch];
                        }
                    })
                });
                acc(*x, &mut |gx| {
                    taps(&mut |dst, src, j| {
                        for ch in 0..c {
                            gx[src * c + ch] = gx[src * c + ch] + g[dst * c + ch] * wd[j * c + ch];
                        }
                    })
                });
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                mask,
                probs,
            } => self.attention_backward(*q, *k, *v, *heads, mask, probs, g, grads),
            Op::ConcatCols(parts) => {
                let m = node.value.shape()[0];
                let n = node.value.shape()[1];
                let mut start = 0;
                for &p in parts {
                    let w = val(p).shape()[1];
                    acc(p, &mut |gp| {
                        for i in 0..m {
                            for j in 0..w {
                                gp[i * w + j] = gp[i * w + j] + g[i * n + start + j];
                            }
                        }
                    });
                    start += w;
                }
            }
            Op::SliceCols { x, start } => {
                let (m, w) = (node.value.shape()[0], node.value.shape()[1]);
                let n = val(*x).shape()[1];
                acc(*x, &mut |gx| {
                    for i in 0..m {
                        for j in 0..w {
                            gx[i * n + start + j] = gx[i * n + start + j] + g[i * w + j];
                        }
                    }
                });
            }
            Op::GatherRows { x, index } => {
                let n = node.value.shape()[1];
                acc(*x, &mut |gx| {
                    for (j, &r) in index.iter().enumerate() {
                        for c in 0..n {
                            gx[r * n + c] = gx[r * n + c] + g[j * n + c];
                        }
                    }
                });
            }
            Op::ScatterAdd(parts) => {
                let n = node.value.shape()[1];
                for (p, index) in parts {
                    acc(*p, &mut |gp| {
                        for (j, &r) in index.iter().enumerate() {
                            for c in 0..n {
                                gp[j * n + c] = gp[j * n + c] + g[r * n + c];
                            }
                        }
                    });
                }
            }
            Op::GatherElems { x, positions } => {
                let n = val(*x).shape()[1];
                acc(*x, &mut |gx| {
                    for (j, &(r, c)) in positions.iter().enumerate() {
                        gx[r * n + c] = gx[r * n + c] + g[j];
                    }
                });
            }
            Op::MeanRows(x) => {
                let (m, n) = (val(*x).shape()[0], val(*x).shape()[1]);
                let mf = F::from_usize(m).unwrap();
                acc(*x, &mut |gx| {
                    for i in 0..m {
                        for j in 0..n {
                            gx[i * n + j] = gx[i * n + j] + g[j] / mf;
                        }
                    }
                });
            }
            Op::Sum(x) => {
                acc(*x, &mut |gx| gx.iter_mut().for_each(|o| *o = *o + g[0]));
            }
            Op::FrameStack { x, sources, stack } => {
                let width = node.value.shape()[1];
                let d = width / stack;
                acc(*x, &mut |gx| {
                    for (slot, src) in sources.iter().enumerate() {
                        if let Some(src) = *src {
                            for c in 0..d {
                                gx[src * d + c] = gx[src * d + c] + g[slot * d + c];
                            }
                        }
                    }
                });
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        mask: &AttentionMask,
        probs: &[Vec<F>],
        g: &[F],
        grads: &mut [Option<Vec<F>>],
    ) {
        let (qt, kt, vt) = (
            &self.nodes[q.0].value,
            &self.nodes[k.0].value,
            &self.nodes[v.0].value,
        );
        let d = qt.shape()[1];
        let dh = d / heads;
        let scale = F::one() / F::from_usize(dh).unwrap().sqrt();
        let numel = qt.numel();
        let mut gq = vec![F::zero(); numel];
        let mut gk = vec![F::zero(); numel];
        let mut gv = vec![F::zero(); numel];
        let view = |data, off: usize, len: usize, h: usize| MatRef {
            data,
            offset: off * d + h * dh,
            rows: len,
            cols: dh,
            rs: d,
            cs: 1,
        };
        let mut p_iter = probs.iter();
        for block in mask.blocks() {
            let (off, len) = (block.offset, block.len);
            for h in 0..heads {
                let p = p_iter.next().expect("one probability block per head");
                let pm = MatRef::dense(p, len, len);
                let go = view(g, off, len, h);
                // dV = P^T dO
                gemm(pm.t(), go, &mut gv, off * d + h * dh, d, true);
                // dP = dO V^T
                let mut dp = vec![F::zero(); len * len];
                gemm(go, view(vt.data(), off, len, h).t(), &mut dp, 0, len, false);
                for t in 0..len {
                    let pr = &p[t * len..(t + 1) * len];
                    let dr = &mut dp[t * len..(t + 1) * len];
                    let dot: F = pr.iter().zip(dr.iter()).map(|(&a, &b)| a * b).sum();
                    for (dv, &pv) in dr.iter_mut().zip(pr) {
                        *dv = pv * (*dv - dot) * scale;
                    }
                }
                let ds = MatRef::dense(&dp, len, len);
                gemm(
                    ds,
                    view(kt.data(), off, len, h),
                    &mut gq,
                    off * d + h * dh,
                    d,
                    true,
                );
                gemm(
                    ds.t(),
                    view(qt.data(), off, len, h),
                    &mut gk,
                    off * d + h * dh,
                    d,
                    true,
                );
            }
        }
        for (var, local) in [(q, gq), (k, gk), (v, gv)] {
            let slot = grads[var.0].get_or_insert_with(|| vec![F::zero(); numel]);
            slot.iter_mut().zip(local).for_each(|(o, d)| *o = *o + d);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn backward_of_sum_of_product() {
        let mut store = ParamStore::<f64>::new();
        let w = store.add("w", Tensor::from_fn(2, 3, |i, j| (i + j) as f64));
        let mut g = Graph::new(&store);
        let x = g.input(Tensor::from_fn(3, 1, |i, _| i as f64 + 1.0));
        let wv = g.param(w);
        let y = g.matmul(wv, x).unwrap();
        let loss = g.sum(y);
        let grads = g.backward(loss).unwrap();
        // d sum(W x) / dW[i, j] = x[j]
        let gw = grads.get(w).unwrap();
        assert_eq!(gw.data(), &[1.0, 2.0, 3.0, 1.0, 2.0, 3.0]);
    }

    #[test]
    fn backward_requires_scalar() {
        let store = ParamStore::<f64>::new();
        let mut g = Graph::new(&store);
        let x = g.input(Tensor::zeros(&[2, 2]));
        assert!(matches!(g.backward(x), Err(Error::Parameter(_))));
    }

    #[test]
    fn layer_norm_of_constant_row_is_zero() {
        let store = ParamStore::<f64>::new();
        let mut g = Graph::new(&store);
        let x = g.input(Tensor::full(&[1, 5], 3.25));
        let gain = g.input(Tensor::full(&[1, 5], 1.0));
        let bias = g.input(Tensor::zeros(&[1, 5]));
        let y = g.layer_norm(x, gain, bias).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn shape_errors_are_parameter_errors() {
        let store = ParamStore::<f64>::new();
        let mut g = Graph::new(&store);
        let a = g.input(Tensor::zeros(&[2, 3]));
        let b = g.input(Tensor::zeros(&[2, 3]));
        assert!(matches!(g.matmul(a, b), Err(Error::Parameter(_))));
        let c = g.input(Tensor::zeros(&[3, 2]));
        assert!(matches!(g.add(a, c), Err(Error::Parameter(_))));
    }

    #[test]
    fn causal_conv_ignores_future_frames() {
        let store = ParamStore::<f64>::new();
        let segs = Segments::single(6);
        let run = |x: Tensor<f64>| {
            let mut g = Graph::new(&store);
            let xv = g.input(x);
            let k = g.input(Tensor::from_fn(3, 2, |i, j| {
                0.3 * i as f64 - 0.2 * j as f64 + 0.1
            }));
            let b = g.input(Tensor::from_fn(1, 2, |_, j| j as f64));
            let y = g.causal_depthwise_conv(xv, k, b, &segs).unwrap();
            g.value(y).clone()
        };
        let base = Tensor::from_fn(6, 2, |i, j| (i * 2 + j) as f64 * 0.37);
        let mut pert = base.clone();
        pert.data_mut()[4 * 2] += 10.0;
        let (a, b) = (run(base), run(pert));
        for t in 0..4 {
            assert_eq!(a.row(t), b.row(t));
        }
        assert_ne!(a.row(4), b.row(4));
    }

    #[test]
    fn frame_stack_uses_previous_frames() {
        let store = ParamStore::<f64>::new();
        let mut g = Graph::new(&store);
        let x = g.input(Tensor::from_fn(4, 1, |i, _| i as f64 + 1.0));
        let (y, segs) = g.frame_stack(x, 2, 2, &Segments::single(4)).unwrap();
        assert_eq!(segs.lengths(), &[2]);
        assert_eq!(g.value(y).data(), &[1.0, 0.0, 3.0, 2.0]);
    }
}
