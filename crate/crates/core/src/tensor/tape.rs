use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};
use std::rc::Rc;

use rand::Rng as _;

use super::kernels::{gemm, Mat};
use super::{ParamId, ParamStore, Tensor};
use crate::error::{config_err, Error, Result};
use crate::rng::Rng;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

/// Symmetric aggregation over a neighbor axis.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Reduction {
    Max,
    Sum,
    Mean,
}

impl Reduction {
    pub fn name(self) -> &'static str {
        match self {
            Reduction::Max => "max",
            Reduction::Sum => "sum",
            Reduction::Mean => "avg",
        }
    }
}

impl std::str::FromStr for Reduction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "max" => Ok(Reduction::Max),
            "sum" => Ok(Reduction::Sum),
            "avg" | "mean" => Ok(Reduction::Mean),
            other => config_err(format!("unknown aggregation `{other}` (max|sum|avg)")),
        }
    }
}

/// Every differentiable operation the tape records.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    MatMul,
    Linear,
    Add,
    Sub,
    Mul,
    Scale,
    Relu,
    Map,
    Sum,
    Mean,
    Reshape,
    Concat,
    GatherRows,
    Reduce,
    GatherReduce,
    BatchNorm,
    Dropout,
    Interpolate,
    SoftmaxCrossEntropy,
    CosineLoss,
}

impl OpKind {
    pub const ALL: [OpKind; 20] = [
        OpKind::MatMul,
        OpKind::Linear,
        OpKind::Add,
        OpKind::Sub,
        OpKind::Mul,
        OpKind::Scale,
        OpKind::Relu,
        OpKind::Map,
        OpKind::Sum,
        OpKind::Mean,
        OpKind::Reshape,
        OpKind::Concat,
        OpKind::GatherRows,
        OpKind::Reduce,
        OpKind::GatherReduce,
        OpKind::BatchNorm,
        OpKind::Dropout,
        OpKind::Interpolate,
        OpKind::SoftmaxCrossEntropy,
        OpKind::CosineLoss,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::MatMul => "matmul",
            OpKind::Linear => "grouped_linear",
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::Scale => "scale",
            OpKind::Relu => "relu",
            OpKind::Map => "map",
            OpKind::Sum => "sum",
            OpKind::Mean => "mean",
            OpKind::Reshape => "reshape",
            OpKind::Concat => "concat_channels",
            OpKind::GatherRows => "gather_rows",
            OpKind::Reduce => "reduce",
            OpKind::GatherReduce => "gather_reduce",
            OpKind::BatchNorm => "batch_norm",
            OpKind::Dropout => "dropout",
            OpKind::Interpolate => "interpolate",
            OpKind::SoftmaxCrossEntropy => "softmax_cross_entropy",
            OpKind::CosineLoss => "cosine_normal_loss",
        }
    }
}

enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
        groups: usize,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Map {
        x: Var,
        deriv: Vec<f64>,
    },
    Sum(Var),
    Mean(Var),
    Reshape(Var),
    Concat(Vec<Var>),
    GatherRows {
        x: Var,
        index: Rc<[usize]>,
    },
    Reduce {
        x: Var,
        axis: usize,
        kind: Reduction,
        argmax: Vec<u32>,
    },
    GatherReduce {
        x: Var,
        index: Rc<[usize]>,
        width: usize,
        kind: Reduction,
        argmax: Vec<u32>,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        // Present in training mode: row multiplicities (None = all ones).
        batch: Option<Option<Rc<[f64]>>>,
    },
    Dropout {
        x: Var,
        mask: Vec<f64>,
    },
    Interpolate {
        x: Var,
        index: Rc<[usize]>,
        weights: Rc<[f64]>,
        width: usize,
    },
    SoftmaxXent {
        logits: Var,
        probs: Vec<f64>,
        labels: Vec<usize>,
    },
    CosineLoss {
        pred: Var,
        gt: Vec<f64>,
        norms: Vec<f64>,
    },
}

impl Op {
    fn kind(&self) -> Option<OpKind> {
        Some(match self {
            Op::Leaf | Op::Param(_) => return None,
            Op::MatMul(..) => OpKind::MatMul,
            Op::Linear { .. } => OpKind::Linear,
            Op::Add(..) => OpKind::Add,
            Op::Sub(..) => OpKind::Sub,
            Op::Mul(..) => OpKind::Mul,
            Op::Scale(..) => OpKind::Scale,
            Op::Relu(_) => OpKind::Relu,
            Op::Map { .. } => OpKind::Map,
            Op::Sum(_) => OpKind::Sum,
            Op::Mean(_) => OpKind::Mean,
            Op::Reshape(_) => OpKind::Reshape,
            Op::Concat(_) => OpKind::Concat,
            Op::GatherRows { .. } => OpKind::GatherRows,
            Op::Reduce { .. } => OpKind::Reduce,
            Op::GatherReduce { .. } => OpKind::GatherReduce,
            Op::BatchNorm { .. } => OpKind::BatchNorm,
            Op::Dropout { .. } => OpKind::Dropout,
            Op::Interpolate { .. } => OpKind::Interpolate,
            Op::SoftmaxXent { .. } => OpKind::SoftmaxCrossEntropy,
            Op::CosineLoss { .. } => OpKind::CosineLoss,
        })
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Batch statistics returned by a training-mode batch norm.
#[derive(Clone, Debug)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Unbiased variance over the (weighted) population.
    pub var: Vec<f64>,
}

/// Append-only record of a forward computation.
///
/// Nodes are stored in creation order, which is a topological order; the
/// reverse pass walks them backwards once.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    fault: Option<OpKind>,
}

fn shape_err<T>(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Result<T> {
    Err(Error::Shape {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    })
}

fn rows_cols(shape: &[usize]) -> (usize, usize) {
    match shape.last() {
        None => (1, 1),
        Some(&c) => (shape.iter().product::<usize>() / c, c),
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Test fixture: scales the upstream gradient of every `kind` node by
    /// 1.01 during backward, so gradient checks of that op must fail.
    pub fn inject_fault(&mut self, kind: OpKind) {
        self.fault = Some(kind);
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Constant input; never receives gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Leaf input whose gradient is retained after [`Tape::backward`].
    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.push(store.value(id).clone(), Op::Param(id), !ParamStore::is_buffer(id))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn kind(&self, v: Var) -> Option<OpKind> {
        self.nodes[v.0].op.kind()
    }

    /// Gradient of the last backward seed with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return shape_err("matmul", sa, sb);
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm(
            self.value(a).data(),
            Mat::dense(m, k),
            self.value(b).data(),
            Mat::dense(k, n),
            0.0,
            &mut out,
            Mat::dense(m, n),
        );
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::MatMul(a, b), rg))
    }

    /// Grouped single-layer perceptron over the last axis.
    ///
    /// `w` has shape `[groups, ci/groups, co/groups]`, or `[ci, co]` when
    /// `groups == 1`. Input channel block `g` maps only to output block `g`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>, groups: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if groups == 0 {
            return config_err("group count must be positive");
        }
        let (cig, cog) = match (ws.len(), groups) {
            (2, 1) => (ws[0], ws[1]),
            (3, g) if ws[0] == g => (ws[1], ws[2]),
            _ => return shape_err("grouped_linear weight", &ws, &[groups]),
        };
        let (rows, ci) = rows_cols(&xs);
        if xs.is_empty() || ci != cig * groups {
            return shape_err("grouped_linear", &xs, &ws);
        }
        let co = cog * groups;
        if let Some(b) = b {
            if self.shape(b) != [co] {
                return shape_err("grouped_linear bias", self.shape(b), &[co]);
            }
        }
        let mut out = vec![0.0; rows * co];
        {
            let xd = self.value(x).data();
            let wd = self.value(w).data();
            for g in 0..groups {
                let wm = Mat {
                    offset: g * cig * cog,
                    ..Mat::dense(cig, cog)
                };
                gemm(
                    xd,
                    Mat::block(rows, ci, g * cig, cig),
                    wd,
                    wm,
                    0.0,
                    &mut out,
                    Mat::block(rows, co, g * cog, cog),
                );
            }
            if let Some(b) = b {
                let bd = self.value(b).data();
                for row in out.chunks_exact_mut(co) {
                    add_into(row, bd);
                }
            }
        }
        let mut shape = xs;
        *shape.last_mut().unwrap() = co;
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::Linear { x, w, b, groups },
            rg,
        ))
    }

    fn binary(&mut self, a: Var, b: Var, name: &'static str, f: fn(f64, f64) -> f64) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return shape_err(name, ta.shape(), tb.shape());
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| f(*x, *y)).collect();
        Ok(Tensor::from_parts(ta.shape().to_vec(), data))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, "add", |x, y| x + y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, "sub", |x, y| x - y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, "mul", |x, y| x * y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let t = self.value(x);
        let out = Tensor::from_parts(t.shape().to_vec(), t.data().iter().map(|v| v * s).collect());
        let rg = self.rg(x);
        self.push(out, Op::Scale(x, s), rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let out = Tensor::from_parts(t.shape().to_vec(), t.data().iter().map(|&v| if v > 0.0 || v.is_nan() { v } else { 0.0 }).collect());
        let rg = self.rg(x);
        self.push(out, Op::Relu(x), rg)
    }

    /// Elementwise `f` with caller-supplied derivative `df`.
    pub fn map(&mut self, x: Var, f: impl Fn(f64) -> f64, df: impl Fn(f64) -> f64) -> Var {
        let t = self.value(x);
        let out = Tensor::from_parts(t.shape().to_vec(), t.data().iter().map(|&v| f(v)).collect());
        let deriv = t.data().iter().map(|&v| df(v)).collect();
        let rg = self.rg(x);
        self.push(out, Op::Map { x, deriv }, rg)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s = t.data().iter().sum::<f64>() / t.numel() as f64;
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Mean(x), rg)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::Reshape(x), rg))
    }

    /// Concatenates along the last (channel) axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return config_err("concat of zero tensors");
        };
        let lead = self.shape(first)[..self.shape(first).len().saturating_sub(1)].to_vec();
        if self.shape(first).is_empty() {
            return shape_err("concat_channels", &[], &[]);
        }
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s.len() != lead.len() + 1 || s[..lead.len()] != lead[..] {
                return shape_err("concat_channels", self.shape(first), s);
            }
            widths.push(*s.last().unwrap());
        }
        let total: usize = widths.iter().sum();
        let rows: usize = lead.iter().product();
        let mut out = vec![0.0; rows * total];
        let mut off = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let src = self.value(p).data();
            for r in 0..rows {
                out[r * total + off..r * total + off + w].copy_from_slice(&src[r * w..(r + 1) * w]);
            }
            off += w;
        }
        let mut shape = lead;
        shape.push(total);
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(Tensor::from_parts(shape, out), Op::Concat(parts.to_vec()), rg))
    }

    /// Selects rows of a `[rows, channels]` tensor.
    pub fn gather_rows(&mut self, x: Var, index: Rc<[usize]>) -> Result<Var> {
        let (rows, c) = self.check_rank2(x, "gather_rows")?;
        if let Some(&bad) = index.iter().find(|&&i| i >= rows) {
            return Err(Error::Index(format!("gather_rows row {bad} of {rows}")));
        }
        if index.is_empty() {
            return config_err("gather_rows with empty index");
        }
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(index.len() * c);
        for &i in index.iter() {
            out.extend_from_slice(&src[i * c..(i + 1) * c]);
        }
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::from_parts(vec![index.len(), c], out),
            Op::GatherRows { x, index },
            rg,
        ))
    }

    fn check_rank2(&self, x: Var, op: &'static str) -> Result<(usize, usize)> {
        let s = self.shape(x);
        if s.len() != 2 {
            return shape_err(op, s, &[0, 0]);
        }
        Ok((s[0], s[1]))
    }

    /// Reduces `axis` with a symmetric aggregation. Max routes gradient to
    /// the lowest index among ties.
    pub fn reduce(&mut self, x: Var, axis: usize, kind: Reduction) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() {
            return Err(Error::Index(format!("reduce axis {axis} for rank {}", s.len())));
        }
        let outer: usize = s[..axis].iter().product();
        let m = s[axis];
        let inner: usize = s[axis + 1..].iter().product();
        let src = self.value(x).data();
        let mut out = vec![0.0; outer * inner];
        let mut argmax = Vec::new();
        match kind {
            Reduction::Max => {
                argmax = vec![0u32; outer * inner];
                for o in 0..outer {
                    let base = o * m * inner;
                    let dst = &mut out[o * inner..(o + 1) * inner];
                    let am = &mut argmax[o * inner..(o + 1) * inner];
                    dst.copy_from_slice(&src[base..base + inner]);
                    for j in 1..m {
                        let row = &src[base + j * inner..base + (j + 1) * inner];
                        for i in 0..inner {
                            // NaN wins so it stays visible downstream.
                            if row[i] > dst[i] || row[i].is_nan() {
                                dst[i] = row[i];
                                am[i] = j as u32;
                            }
                        }
                    }
                }
            }
            Reduction::Sum | Reduction::Mean => {
                let scale = if kind == Reduction::Mean { 1.0 / m as f64 } else { 1.0 };
                for o in 0..outer {
                    let dst = &mut out[o * inner..(o + 1) * inner];
                    for j in 0..m {
                        let base = (o * m + j) * inner;
                        add_into(dst, &src[base..base + inner]);
                    }
                    if scale != 1.0 {
                        dst.iter_mut().for_each(|v| *v *= scale);
                    }
                }
            }
        }
        let mut shape = s;
        shape.remove(axis);
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::Reduce {
                x,
                axis,
                kind,
                argmax,
            },
            rg,
        ))
    }

    /// Fused gather + reduce: output row `o` aggregates the input rows
    /// `index[o*width .. (o+1)*width]` without materializing them.
    pub fn gather_reduce(
        &mut self,
        x: Var,
        index: Rc<[usize]>,
        width: usize,
        kind: Reduction,
    ) -> Result<Var> {
        let (rows, c) = self.check_rank2(x, "gather_reduce")?;
        if width == 0 || index.is_empty() || index.len() % width != 0 {
            return shape_err("gather_reduce index", &[index.len()], &[width]);
        }
        if let Some(&bad) = index.iter().find(|&&i| i >= rows) {
            return Err(Error::Index(format!("gather_reduce row {bad} of {rows}")));
        }
        let n_out = index.len() / width;
        let src = self.value(x).data();
        let mut out = vec![0.0; n_out * c];
        let mut argmax = Vec::new();
        match kind {
            Reduction::Max => {
                argmax = vec![0u32; n_out * c];
                for o in 0..n_out {
                    let nb = &index[o * width..(o + 1) * width];
                    let dst = &mut out[o * c..(o + 1) * c];
                    let am = &mut argmax[o * c..(o + 1) * c];
                    dst.copy_from_slice(&src[nb[0] * c..(nb[0] + 1) * c]);
                    am.fill(nb[0] as u32);
                    for &j in &nb[1..] {
                        let row = &src[j * c..(j + 1) * c];
                        for i in 0..c {
                            // NaN wins so it stays visible downstream.
                            if row[i] > dst[i] || row[i].is_nan() {
                                dst[i] = row[i];
                                am[i] = j as u32;
                            }
                        }
                    }
                }
            }
            Reduction::Sum | Reduction::Mean => {
                let scale = if kind == Reduction::Mean { 1.0 / width as f64 } else { 1.0 };
                for o in 0..n_out {
                    let dst = &mut out[o * c..(o + 1) * c];
                    for &j in &index[o * width..(o + 1) * width] {
                        add_into(dst, &src[j * c..(j + 1) * c]);
                    }
                    if scale != 1.0 {
                        dst.iter_mut().for_each(|v| *v *= scale);
                    }
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::from_parts(vec![n_out, c], out),
            Op::GatherReduce {
                x,
                index,
                width,
                kind,
                argmax,
            },
            rg,
        ))
    }

    fn check_bn(&self, x: Var, gamma: Var, beta: Var) -> Result<(usize, usize)> {
        let (rows, c) = rows_cols(self.shape(x));
        if self.shape(x).is_empty() || self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return shape_err("batch_norm", self.shape(x), self.shape(gamma));
        }
        Ok((rows, c))
    }

    /// Training-mode batch norm over every row of `x` (channel = last axis).
    ///
    /// `weights` gives each row a multiplicity in the statistics population;
    /// the result equals normalizing the row-replicated tensor.
    pub fn batch_norm_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        weights: Option<Rc<[f64]>>,
        eps: f64,
    ) -> Result<(Var, BatchStats)> {
        let (rows, c) = self.check_bn(x, gamma, beta)?;
        if let Some(w) = &weights {
            if w.len() != rows {
                return shape_err("batch_norm weights", &[w.len()], &[rows]);
            }
        }
        let xd = self.value(x).data();
        let wsum: f64 = weights.as_ref().map_or(rows as f64, |w| w.iter().sum());
        if wsum <= 0.0 {
            return config_err("batch_norm population is empty");
        }
        let mut mean = vec![0.0; c];
        for r in 0..rows {
            let w = weights.as_ref().map_or(1.0, |w| w[r]);
            if w == 0.0 {
                continue;
            }
            for (m, v) in mean.iter_mut().zip(&xd[r * c..(r + 1) * c]) {
                *m += w * v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= wsum);
        let mut var = vec![0.0; c];
        for r in 0..rows {
            let w = weights.as_ref().map_or(1.0, |w| w[r]);
            if w == 0.0 {
                continue;
            }
            for ((s, v), m) in var.iter_mut().zip(&xd[r * c..(r + 1) * c]).zip(&mean) {
                *s += w * (v - m) * (v - m);
            }
        }
        var.iter_mut().for_each(|s| *s /= wsum);
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = vec![0.0; rows * c];
        let mut out = vec![0.0; rows * c];
        for ((xr, hr), or) in xd.chunks_exact(c).zip(xhat.chunks_exact_mut(c)).zip(out.chunks_exact_mut(c)) {
            for j in 0..c {
                let h = (xr[j] - mean[j]) * inv_std[j];
                hr[j] = h;
                or[j] = g[j] * h + b[j];
            }
        }
        let unbiased = if wsum > 1.0 {
            var.iter().map(|v| v * wsum / (wsum - 1.0)).collect()
        } else {
            var.clone()
        };
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        let v = self.push(
            Tensor::from_parts(shape, out),
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch: Some(weights),
            },
            rg,
        );
        Ok((v, BatchStats { mean, var: unbiased }))
    }

    /// Inference-mode batch norm with fixed running statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[f64],
        running_var: &[f64],
        eps: f64,
    ) -> Result<Var> {
        let (rows, c) = self.check_bn(x, gamma, beta)?;
        if running_mean.len() != c || running_var.len() != c {
            return shape_err("batch_norm running stats", &[running_mean.len()], &[c]);
        }
        let inv_std: Vec<f64> = running_var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let xd = self.value(x).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = vec![0.0; rows * c];
        let mut out = vec![0.0; rows * c];
        for r in 0..rows {
            for j in 0..c {
                let h = (xd[r * c + j] - running_mean[j]) * inv_std[j];
                xhat[r * c + j] = h;
                out[r * c + j] = g[j] * h + b[j];
            }
        }
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch: None,
            },
            rg,
        ))
    }

    /// Inverted dropout; identity outside training or at ratio 0.
    pub fn dropout(&mut self, x: Var, ratio: f64, training: bool, rng: &mut Rng) -> Result<Var> {
        if !(0.0..1.0).contains(&ratio) {
            return config_err(format!("dropout ratio must lie in [0, 1), got {ratio}"));
        }
        if !training || ratio == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - ratio);
        let t = self.value(x);
        let mask: Vec<f64> = (0..t.numel())
            .map(|_| if rng.random::<f64>() < ratio { 0.0 } else { keep })
            .collect();
        let out = t.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        let shape = t.shape().to_vec();
        let rg = self.rg(x);
        Ok(self.push(Tensor::from_parts(shape, out), Op::Dropout { x, mask }, rg))
    }

    /// Row `o` of the output is `Σ_j weights[o*width+j] · x[index[o*width+j]]`.
    pub fn interpolate(
        &mut self,
        x: Var,
        index: Rc<[usize]>,
        weights: Rc<[f64]>,
        width: usize,
    ) -> Result<Var> {
        let (rows, c) = self.check_rank2(x, "interpolate")?;
        if width == 0 || index.is_empty() || index.len() % width != 0 || weights.len() != index.len() {
            return shape_err("interpolate index", &[index.len(), weights.len()], &[width]);
        }
        if let Some(&bad) = index.iter().find(|&&i| i >= rows) {
            return Err(Error::Index(format!("interpolate row {bad} of {rows}")));
        }
        let n_out = index.len() / width;
        let src = self.value(x).data();
        let mut out = vec![0.0; n_out * c];
        for o in 0..n_out {
            let dst = &mut out[o * c..(o + 1) * c];
            for q in o * width..(o + 1) * width {
                let (j, w) = (index[q], weights[q]);
                for (d, s) in dst.iter_mut().zip(&src[j * c..(j + 1) * c]) {
                    *d += w * s;
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::from_parts(vec![n_out, c], out),
            Op::Interpolate {
                x,
                index,
                weights,
                width,
            },
            rg,
        ))
    }

    /// Mean over rows of `-log softmax(logits)[label]`; logits are `[batch, classes]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (b, k) = self.check_rank2(logits, "softmax_cross_entropy")?;
        if labels.len() != b {
            return shape_err("softmax_cross_entropy labels", &[labels.len()], &[b]);
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::Index(format!("label {bad} outside [0, {k})")));
        }
        let probs = softmax_rows(self.value(logits).data(), k);
        let ld = self.value(logits).data();
        let loss = labels
            .iter()
            .enumerate()
            .map(|(r, &l)| {
                let row = &ld[r * k..(r + 1) * k];
                let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
                lse - row[l]
            })
            .sum::<f64>()
            / b as f64;
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftmaxXent {
                logits,
                probs,
                labels: labels.to_vec(),
            },
            rg,
        ))
    }

    /// Mean over rows of `1 - <pred/|pred|, gt>`.
    pub fn cosine_loss(&mut self, pred: Var, gt: &Tensor) -> Result<Var> {
        let p = self.value(pred);
        if p.shape() != gt.shape() || p.rank() == 0 {
            return shape_err("cosine_normal_loss", p.shape(), gt.shape());
        }
        let (rows, d) = rows_cols(p.shape());
        const EPS: f64 = 1e-12;
        let pd = p.data();
        let gd = gt.data();
        let mut norms = Vec::with_capacity(rows);
        let mut total = 0.0;
        for r in 0..rows {
            let pr = &pd[r * d..(r + 1) * d];
            let gr = &gd[r * d..(r + 1) * d];
            let n = (pr.iter().map(|v| v * v).sum::<f64>() + EPS * EPS).sqrt();
            let dot: f64 = pr.iter().zip(gr).map(|(a, b)| a * b).sum();
            total += 1.0 - dot / n;
            norms.push(n);
        }
        let rg = self.rg(pred);
        Ok(self.push(
            Tensor::scalar(total / rows as f64),
            Op::CosineLoss {
                pred,
                gt: gd.to_vec(),
                norms,
            },
            rg,
        ))
    }

    /// Reverse pass from a scalar seed. Gradients of previous passes on this
    /// tape are discarded; parameter gradients are collected separately with
    /// [`Tape::accumulate_param_grads`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if !self.value(loss).is_scalar() {
            return Err(Error::NotScalar(self.shape(loss).to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                grads[i] = None;
                continue;
            }
            if matches!(node.op, Op::Leaf | Op::Param(_)) {
                continue;
            }
            let Some(mut g) = grads[i].take() else { continue };
            if self.fault.is_some() && self.kind(Var(i)) == self.fault {
                g.iter_mut().for_each(|v| *v *= 1.01);
            }
            self.backprop_node(i, &g, &mut grads);
        }
        self.grads = grads;
        Ok(())
    }

    /// Adds the gradients of every parameter leaf into `store` (`+=`).
    pub fn accumulate_param_grads(&self, store: &mut ParamStore) {
        for (node, g) in self.nodes.iter().zip(&self.grads) {
            if let (Op::Param(id), Some(g)) = (&node.op, g) {
                add_into(store.grad_mut(*id).data_mut(), g);
            }
        }
    }

    /// Convenience: backward then accumulate into the parameter store.
    pub fn backward_into(&mut self, loss: Var, store: &mut ParamStore) -> Result<()> {
        self.backward(loss)?;
        self.accumulate_param_grads(store);
        Ok(())
    }

    fn backprop_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        macro_rules! acc {
            ($v:expr) => {
                grad_slot(nodes, grads, $v)
            };
        }
        let out = &nodes[i].value;
        match &nodes[i].op {
            Op::Leaf | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                if let Some(da) = acc!(*a) {
                    gemm(g, Mat::dense(m, n), tb.data(), Mat::dense(k, n).t(), 1.0, da, Mat::dense(m, k));
                }
                if let Some(db) = acc!(*b) {
                    gemm(ta.data(), Mat::dense(m, k).t(), g, Mat::dense(m, n), 1.0, db, Mat::dense(k, n));
                }
            }
            Op::Linear { x, w, b, groups } => {
                let (tx, tw) = (&nodes[x.0].value, &nodes[w.0].value);
                let (rows, ci) = rows_cols(tx.shape());
                let co = *out.shape().last().unwrap();
                let (cig, cog) = (ci / groups, co / groups);
                if let Some(dx) = acc!(*x) {
                    for grp in 0..*groups {
                        let wm = Mat {
                            offset: grp * cig * cog,
                            ..Mat::dense(cig, cog)
                        };
                        gemm(
                            g,
                            Mat::block(rows, co, grp * cog, cog),
                            tw.data(),
                            wm.t(),
                            1.0,
                            dx,
                            Mat::block(rows, ci, grp * cig, cig),
                        );
                    }
                }
                if let Some(dw) = acc!(*w) {
                    for grp in 0..*groups {
                        let dwm = Mat {
                            offset: grp * cig * cog,
                            ..Mat::dense(cig, cog)
                        };
                        gemm(
                            tx.data(),
                            Mat::block(rows, ci, grp * cig, cig).t(),
                            g,
                            Mat::block(rows, co, grp * cog, cog),
                            1.0,
                            dw,
                            dwm,
                        );
                    }
                }
                if let Some(b) = b {
                    if let Some(db) = acc!(*b) {
                        for row in g.chunks_exact(co) {
                            add_into(db, row);
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                if let Some(da) = acc!(*a) {
                    add_into(da, g);
                }
                if let Some(db) = acc!(*b) {
                    add_into(db, g);
                }
            }
            Op::Sub(a, b) => {
                if let Some(da) = acc!(*a) {
                    add_into(da, g);
                }
                if let Some(db) = acc!(*b) {
                    for (d, s) in db.iter_mut().zip(g) {
                        *d -= s;
                    }
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (nodes[a.0].value.data(), nodes[b.0].value.data());
                if let Some(da) = acc!(*a) {
                    for ((d, s), y) in da.iter_mut().zip(g).zip(vb) {
                        *d += s * y;
                    }
                }
                if let Some(db) = acc!(*b) {
                    for ((d, s), y) in db.iter_mut().zip(g).zip(va) {
                        *d += s * y;
                    }
                }
            }
            Op::Scale(x, s) => {
                if let Some(dx) = acc!(*x) {
                    for (d, v) in dx.iter_mut().zip(g) {
                        *d += s * v;
                    }
                }
            }
            Op::Relu(x) => {
                if let Some(dx) = acc!(*x) {
                    for ((d, v), y) in dx.iter_mut().zip(g).zip(out.data()) {
                        if *y > 0.0 {
                            *d += v;
                        }
                    }
                }
            }
            Op::Map { x, deriv } => {
                if let Some(dx) = acc!(*x) {
                    for ((d, v), k) in dx.iter_mut().zip(g).zip(deriv) {
                        *d += v * k;
                    }
                }
            }
            Op::Sum(x) => {
                if let Some(dx) = acc!(*x) {
                    dx.iter_mut().for_each(|d| *d += g[0]);
                }
            }
            Op::Mean(x) => {
                if let Some(dx) = acc!(*x) {
                    let s = g[0] / dx.len() as f64;
                    dx.iter_mut().for_each(|d| *d += s);
                }
            }
            Op::Reshape(x) => {
                if let Some(dx) = acc!(*x) {
                    add_into(dx, g);
                }
            }
            Op::Concat(parts) => {
                let total = *out.shape().last().unwrap();
                let rows = out.numel() / total;
                let mut off = 0;
                for p in parts {
                    let w = *nodes[p.0].value.shape().last().unwrap();
                    if let Some(dp) = acc!(*p) {
                        for r in 0..rows {
                            add_into(&mut dp[r * w..(r + 1) * w], &g[r * total + off..r * total + off + w]);
                        }
                    }
                    off += w;
                }
            }
            Op::GatherRows { x, index } => {
                let c = *out.shape().last().unwrap();
                if let Some(dx) = acc!(*x) {
                    for (q, &src) in index.iter().enumerate() {
                        add_into(&mut dx[src * c..(src + 1) * c], &g[q * c..(q + 1) * c]);
                    }
                }
            }
            Op::Reduce {
                x,
                axis,
                kind,
                argmax,
            } => {
                let s = nodes[x.0].value.shape();
                let outer: usize = s[..*axis].iter().product();
                let m = s[*axis];
                let inner: usize = s[axis + 1..].iter().product();
                if let Some(dx) = acc!(*x) {
                    match kind {
                        Reduction::Max => {
                            for o in 0..outer {
                                for i in 0..inner {
                                    let j = argmax[o * inner + i] as usize;
                                    dx[(o * m + j) * inner + i] += g[o * inner + i];
                                }
                            }
                        }
                        Reduction::Sum | Reduction::Mean => {
                            let scale = if *kind == Reduction::Mean { 1.0 / m as f64 } else { 1.0 };
                            for o in 0..outer {
                                let go = &g[o * inner..(o + 1) * inner];
                                for j in 0..m {
                                    let base = (o * m + j) * inner;
                                    for (d, v) in dx[base..base + inner].iter_mut().zip(go) {
                                        *d += scale * v;
                                    }
                                }
                            }
                        }
                    }
                }
            }
            Op::GatherReduce {
                x,
                index,
                width,
                kind,
                argmax,
            } => {
                let c = *out.shape().last().unwrap();
                if let Some(dx) = acc!(*x) {
                    match kind {
                        Reduction::Max => {
                            for (q, (&src, v)) in argmax.iter().zip(g).enumerate() {
                                dx[src as usize * c + q % c] += v;
                            }
                        }
                        Reduction::Sum | Reduction::Mean => {
                            let scale = if *kind == Reduction::Mean { 1.0 / *width as f64 } else { 1.0 };
                            for (q, &src) in index.iter().enumerate() {
                                let o = q / width;
                                for (d, v) in dx[src * c..(src + 1) * c].iter_mut().zip(&g[o * c..(o + 1) * c]) {
                                    *d += scale * v;
                                }
                            }
                        }
                    }
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch,
            } => {
                let c = inv_std.len();
                let rows = xhat.len() / c;
                let gm = nodes[gamma.0].value.data().to_vec();
                let mut s1 = vec![0.0; c];
                let mut s2 = vec![0.0; c];
                for (gr, hr) in g.chunks_exact(c).zip(xhat.chunks_exact(c)) {
                    for j in 0..c {
                        s1[j] += gr[j];
                        s2[j] += gr[j] * hr[j];
                    }
                }
                if let Some(dg) = acc!(*gamma) {
                    add_into(dg, &s2);
                }
                if let Some(db) = acc!(*beta) {
                    add_into(db, &s1);
                }
                if let Some(dx) = acc!(*x) {
                    match batch {
                        None => {
                            let k: Vec<f64> = gm.iter().zip(inv_std).map(|(a, b)| a * b).collect();
                            for (dr, gr) in dx.chunks_exact_mut(c).zip(g.chunks_exact(c)) {
                                for j in 0..c {
                                    dr[j] += gr[j] * k[j];
                                }
                            }
                        }
                        Some(weights) => {
                            let wsum = weights.as_ref().map_or(rows as f64, |w| w.iter().sum());
                            // dx = k (g - w s1 / wsum - w xhat s2 / wsum) with k = gamma inv_std.
                            let k: Vec<f64> = gm.iter().zip(inv_std).map(|(a, b)| a * b).collect();
                            let a1: Vec<f64> = s1.iter().map(|v| v / wsum).collect();
                            let a2: Vec<f64> = s2.iter().map(|v| v / wsum).collect();
                            let rows_iter = dx.chunks_exact_mut(c).zip(g.chunks_exact(c)).zip(xhat.chunks_exact(c));
                            for (r, ((dr, gr), hr)) in rows_iter.enumerate() {
                                let w = weights.as_ref().map_or(1.0, |w| w[r]);
                                for j in 0..c {
                                    dr[j] += k[j] * (gr[j] - w * (a1[j] + hr[j] * a2[j]));
                                }
                            }
                        }
                    }
                }
            }
            Op::Dropout { x, mask } => {
                if let Some(dx) = acc!(*x) {
                    for ((d, v), m) in dx.iter_mut().zip(g).zip(mask) {
                        *d += v * m;
                    }
                }
            }
            Op::Interpolate {
                x,
                index,
                weights,
                width,
            } => {
                let c = *out.shape().last().unwrap();
                if let Some(dx) = acc!(*x) {
                    for (q, (&src, &w)) in index.iter().zip(weights.iter()).enumerate() {
                        let o = q / width;
                        for (d, v) in dx[src * c..(src + 1) * c].iter_mut().zip(&g[o * c..(o + 1) * c]) {
                            *d += w * v;
                        }
                    }
                }
            }
            Op::SoftmaxXent {
                logits,
                probs,
                labels,
            } => {
                let b = labels.len();
                let k = probs.len() / b;
                if let Some(dl) = acc!(*logits) {
                    let s = g[0] / b as f64;
                    for (r, &l) in labels.iter().enumerate() {
                        for j in 0..k {
                            let onehot = if j == l { 1.0 } else { 0.0 };
                            dl[r * k + j] += s * (probs[r * k + j] - onehot);
                        }
                    }
                }
            }
            Op::CosineLoss { pred, gt, norms } => {
                let pd = nodes[pred.0].value.data();
                let rows = norms.len();
                let d = pd.len() / rows;
                if let Some(dp) = acc!(*pred) {
                    let s = g[0] / rows as f64;
                    for r in 0..rows {
                        let p = &pd[r * d..(r + 1) * d];
                        let t = &gt[r * d..(r + 1) * d];
                        let n = norms[r];
                        let dot: f64 = p.iter().zip(t).map(|(a, b)| a * b).sum();
                        for j in 0..d {
                            dp[r * d + j] += -s * (t[j] / n - dot * p[j] / (n * n * n));
                        }
                    }
                }
            }
        }
    }

    /// Hash of every discrete branch taken in the forward pass (ReLU
    /// activity, max-aggregation winners). Two evaluations with equal
    /// fingerprints lie in the same smooth piece of the function.
    pub fn decision_fingerprint(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for node in &self.nodes {
            match &node.op {
                Op::Relu(_) => {
                    for v in node.value.data() {
                        (*v > 0.0).hash(&mut h);
                    }
                }
                Op::Reduce { argmax, .. } | Op::GatherReduce { argmax, .. } => argmax.hash(&mut h),
                _ => {}
            }
        }
        h.finish()
    }

    /// First of `vars` whose value contains a non-finite entry.
    pub fn first_non_finite(&self, vars: &[Var]) -> Option<Var> {
        vars.iter().copied().find(|&v| !self.value(v).is_finite())
    }
}

fn grad_slot<'a>(nodes: &[Node], grads: &'a mut [Option<Vec<f64>>], v: Var) -> Option<&'a mut Vec<f64>> {
    let n = &nodes[v.0];
    if !n.requires_grad {
        return None;
    }
    Some(grads[v.0].get_or_insert_with(|| vec![0.0; n.value.numel()]))
}

pub(crate) fn softmax_rows(logits: &[f64], k: usize) -> Vec<f64> {
    let mut probs = vec![0.0; logits.len()];
    for (row, dst) in logits.chunks_exact(k).zip(probs.chunks_exact_mut(k)) {
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for (d, v) in dst.iter_mut().zip(row) {
            *d = (v - m).exp();
            z += *d;
        }
        dst.iter_mut().for_each(|d| *d /= z);
    }
    probs
}
