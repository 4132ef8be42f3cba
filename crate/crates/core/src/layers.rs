//! Point convolution layers.
//!
//! Features travel as `[rows, channels]` tape values with rows ordered
//! sample-major (`b * points + i`). Neighborhoods are fixed-width lists of
//! global row indices.
//!
//! A per-neighbor composite `SLP → BN → ReLU` depends only on the neighbor's
//! own feature row, so for features that are not centroid-relative it is
//! evaluated once per input row and the aggregation gathers the results.
//! Batch norm then weights each input row by the number of neighbor slots
//! that reference it, which reproduces the statistics of the gathered
//! `(batch × centroids × neighbors)` population exactly.

use std::rc::Rc;

use rand::Rng as _;

use crate::error::{config_err, Error, Result};
use crate::geometry::{self, NeighborhoodMethod, NeighborhoodSpec, Point};
use crate::rng::Rng;
use crate::tensor::{grouped_weight_shape, BnUpdate, ParamId, ParamStore, Reduction, Tape, Tensor, Var};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// One recorded layer output, for shape checks and diagnostics.
#[derive(Clone, Debug)]
pub struct TraceEntry {
    pub name: String,
    pub var: Var,
    /// Points per sample, or `None` for a global (per-sample) tensor.
    pub points: Option<usize>,
}

/// Mutable state threaded through one forward pass.
pub struct Ctx<'a> {
    pub tape: &'a mut Tape,
    pub store: &'a ParamStore,
    pub training: bool,
    /// Drives dropout.
    pub rng: &'a mut Rng,
    /// One geometry stream per sample (neighbor sampling).
    pub sample_rngs: Vec<Rng>,
    pub bn_updates: Vec<BnUpdate>,
    pub trace: Vec<TraceEntry>,
}

impl<'a> Ctx<'a> {
    pub fn new(tape: &'a mut Tape, store: &'a ParamStore, training: bool, rng: &'a mut Rng, sample_rngs: Vec<Rng>) -> Self {
        Self {
            tape,
            store,
            training,
            rng,
            sample_rngs,
            bn_updates: Vec::new(),
            trace: Vec::new(),
        }
    }

    pub(crate) fn record(&mut self, name: &str, var: Var, points: Option<usize>) {
        self.trace.push(TraceEntry {
            name: name.to_string(),
            var,
            points,
        });
    }
}

fn uniform(shape: &[usize], bound: f64, rng: &mut Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-bound..=bound))
}

/// Single-layer perceptron, optionally grouped.
#[derive(Clone, Debug)]
pub struct Slp {
    pub weight: ParamId,
    pub bias: ParamId,
    pub ci: usize,
    pub co: usize,
    pub groups: usize,
}

impl Slp {
    /// Weights and bias ~ U(±√(1/fan_in)) with `fan_in = ci / groups`.
    pub fn new(store: &mut ParamStore, name: &str, ci: usize, co: usize, groups: usize, rng: &mut Rng) -> Result<Self> {
        let shape = grouped_weight_shape(ci, co, groups)?;
        let shape = if groups == 1 { vec![ci, co] } else { shape };
        let bound = (groups as f64 / ci as f64).sqrt();
        let weight = store.add(format!("{name}.weight"), uniform(&shape, bound, rng))?;
        let bias = store.add(format!("{name}.bias"), uniform(&[co], bound, rng))?;
        Ok(Self {
            weight,
            bias,
            ci,
            co,
            groups,
        })
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let w = ctx.tape.param(ctx.store, self.weight);
        let b = ctx.tape.param(ctx.store, self.bias);
        ctx.tape.linear(x, w, Some(b), self.groups)
    }

    pub fn num_params(&self) -> usize {
        self.ci * self.co / self.groups + self.co
    }
}

/// Per-channel batch norm with learnable scale/shift and running statistics.
#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub channels: usize,
}

impl BatchNorm {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Result<Self> {
        Ok(Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::full(&[channels], 1.0))?,
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[channels]))?,
            running_mean: store.add_buffer(format!("{name}.running_mean"), Tensor::zeros(&[channels]))?,
            running_var: store.add_buffer(format!("{name}.running_var"), Tensor::full(&[channels], 1.0))?,
            channels,
        })
    }

    /// Training mode normalizes with (row-weighted) batch statistics and
    /// queues a running-stat update; eval mode uses the running statistics.
    pub fn forward(&self, ctx: &mut Ctx, x: Var, weights: Option<Rc<[f64]>>) -> Result<Var> {
        let g = ctx.tape.param(ctx.store, self.gamma);
        let b = ctx.tape.param(ctx.store, self.beta);
        if ctx.training {
            let (y, stats) = ctx.tape.batch_norm_train(x, g, b, weights, BN_EPS)?;
            ctx.bn_updates.push(BnUpdate {
                running_mean: self.running_mean,
                running_var: self.running_var,
                mean: stats.mean,
                var: stats.var,
                momentum: BN_MOMENTUM,
            });
            Ok(y)
        } else {
            let rm = ctx.store.value(self.running_mean).data();
            let rv = ctx.store.value(self.running_var).data();
            ctx.tape.batch_norm_eval(x, g, b, rm, rv, BN_EPS)
        }
    }
}

/// `SLP → BN → ReLU`, or `BN → ReLU → SLP` when `preactivation` is set.
#[derive(Clone, Debug)]
pub struct Composite {
    pub slp: Slp,
    pub bn: BatchNorm,
    pub preactivation: bool,
}

impl Composite {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        slp_name: &str,
        bn_name: &str,
        (ci, co, groups): (usize, usize, usize),
        preactivation: bool,
        rng: &mut Rng,
    ) -> Result<Self> {
        let slp = Slp::new(store, &format!("{name}.{slp_name}"), ci, co, groups, rng)?;
        let bn = BatchNorm::new(store, &format!("{name}.{bn_name}"), if preactivation { ci } else { co })?;
        Ok(Self {
            slp,
            bn,
            preactivation,
        })
    }

    /// Applies the composite to every row of `x`; `weights` are the rows'
    /// multiplicities in the batch-norm population.
    pub fn forward(&self, ctx: &mut Ctx, x: Var, weights: Option<Rc<[f64]>>) -> Result<Var> {
        if self.preactivation {
            let y = self.bn.forward(ctx, x, weights)?;
            let y = ctx.tape.relu(y);
            self.slp.forward(ctx, y)
        } else {
            let y = self.slp.forward(ctx, x)?;
            let y = self.bn.forward(ctx, y, weights)?;
            Ok(ctx.tape.relu(y))
        }
    }
}

/// Batched point sets of one resolution level; every sample has the same
/// number of points.
#[derive(Clone, Debug, PartialEq)]
pub struct Level {
    pub coords: Vec<Vec<Point>>,
}

impl Level {
    pub fn new(coords: Vec<Vec<Point>>) -> Result<Self> {
        let Some(first) = coords.first() else {
            return config_err("empty batch");
        };
        let n = first.len();
        if n == 0 || coords.iter().any(|c| c.len() != n) {
            return config_err("every sample in a batch needs the same positive point count");
        }
        Ok(Self { coords })
    }

    pub fn batch(&self) -> usize {
        self.coords.len()
    }

    pub fn points(&self) -> usize {
        self.coords[0].len()
    }

    pub fn rows(&self) -> usize {
        self.batch() * self.points()
    }

    /// Coordinates as a `[rows, 3]` tensor.
    pub fn coord_tensor(&self) -> Tensor {
        let data = self.coords.iter().flatten().flat_map(|p| p.iter().copied()).collect();
        Tensor::new(vec![self.rows(), 3], data).expect("level is non-empty")
    }
}

/// Neighborhoods of a whole batch in global row indices.
#[derive(Clone, Debug)]
pub struct Neighborhood {
    pub index: Rc<[usize]>,
    pub width: usize,
    /// Number of input rows the index refers to.
    pub input_rows: usize,
    /// How many slots reference each input row.
    pub counts: Rc<[f64]>,
}

impl Neighborhood {
    pub fn new(index: Vec<usize>, width: usize, input_rows: usize) -> Result<Self> {
        if width == 0 || index.len() % width != 0 {
            return config_err("neighborhood index length must be a multiple of its width");
        }
        let mut counts = vec![0.0; input_rows];
        for &j in &index {
            *counts
                .get_mut(j)
                .ok_or_else(|| Error::Index(format!("neighbor row {j} of {input_rows}")))? += 1.0;
        }
        Ok(Self {
            index: index.into(),
            width,
            input_rows,
            counts: counts.into(),
        })
    }

    pub fn output_rows(&self) -> usize {
        self.index.len() / self.width
    }

    /// Per-sample neighborhoods of every point of `level` (no downsampling).
    pub fn same_level(level: &Level, spec: &NeighborhoodSpec, ctx: &mut Ctx) -> Result<Self> {
        let n = level.points();
        let all: Vec<usize> = (0..n).collect();
        Self::for_centroids(level, &vec![all; level.batch()], spec, ctx)
    }

    pub fn for_centroids(level: &Level, centroids: &[Vec<usize>], spec: &NeighborhoodSpec, ctx: &mut Ctx) -> Result<Self> {
        let n = level.points();
        let mut index = Vec::new();
        let mut width = 0;
        for (b, (coords, cents)) in level.coords.iter().zip(centroids).enumerate() {
            let nb = geometry::query(coords, cents, spec, &mut ctx.sample_rngs[b])?;
            width = nb.width;
            index.extend(nb.neighbors.iter().map(|&j| b * n + j));
        }
        Self::new(index, width, level.rows())
    }
}

#[derive(Clone, Debug)]
pub struct PConvLayer {
    pub phi: Composite,
    pub rho: Reduction,
}

impl PConvLayer {
    pub fn new(store: &mut ParamStore, name: &str, ci: usize, co: usize, rho: Reduction, preactivation: bool, rng: &mut Rng) -> Result<Self> {
        Ok(Self {
            phi: Composite::new(store, name, "slp", "bn", (ci, co, 1), preactivation, rng)?,
            rho,
        })
    }
}

/// `ρ` over neighbors of the per-neighbor composite.
pub fn pconv_forward(ctx: &mut Ctx, layer: &PConvLayer, features: Var, nb: &Neighborhood) -> Result<Var> {
    check_rows(ctx, features, nb, layer.phi.slp.ci, "pconv")?;
    let y = layer.phi.forward(ctx, features, Some(nb.counts.clone()))?;
    ctx.tape.gather_reduce(y, nb.index.clone(), nb.width, layer.rho)
}

fn check_rows(ctx: &Ctx, x: Var, nb: &Neighborhood, ci: usize, op: &'static str) -> Result<()> {
    let s = ctx.tape.shape(x);
    if s.len() != 2 || s[0] != nb.input_rows || s[1] != ci {
        return Err(Error::Shape {
            op,
            lhs: s.to_vec(),
            rhs: vec![nb.input_rows, ci],
        });
    }
    Ok(())
}

#[derive(Clone, Debug)]
pub struct EPConvLayer {
    pub phi: Composite,
    pub psi: Composite,
    pub dropout: f64,
    pub rho: Reduction,
}

impl EPConvLayer {
    /// Grouped `φ̃: ci → mid` and `ψ: mid → co`. The standard layer uses
    /// `mid = 4k`, `co = k`.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        (ci, mid, co): (usize, usize, usize),
        groups: usize,
        dropout: f64,
        rho: Reduction,
        preactivation: bool,
        rng: &mut Rng,
    ) -> Result<Self> {
        if !(0.0..1.0).contains(&dropout) {
            return config_err(format!("dropout ratio must lie in [0, 1), got {dropout}"));
        }
        Ok(Self {
            phi: Composite::new(store, name, "slp_phi", "bn_phi", (ci, mid, groups), preactivation, rng)?,
            psi: Composite::new(store, name, "slp_psi", "bn_psi", (mid, co, 1), preactivation, rng)?,
            dropout,
            rho,
        })
    }
}

/// Grouped composite per neighbor, `ρ`, dropout on the aggregate, then the
/// integrating composite `ψ`.
pub fn epconv_forward(ctx: &mut Ctx, layer: &EPConvLayer, features: Var, nb: &Neighborhood) -> Result<Var> {
    check_rows(ctx, features, nb, layer.phi.slp.ci, "epconv")?;
    let y = layer.phi.forward(ctx, features, Some(nb.counts.clone()))?;
    let f = ctx.tape.gather_reduce(y, nb.index.clone(), nb.width, layer.rho)?;
    let f = ctx.tape.dropout(f, layer.dropout, ctx.training, ctx.rng)?;
    layer.psi.forward(ctx, f, None)
}

#[derive(Clone, Debug)]
pub enum ConvLayer {
    PConv(PConvLayer),
    EPConv(EPConvLayer),
}

impl ConvLayer {
    pub fn in_channels(&self) -> usize {
        match self {
            ConvLayer::PConv(l) => l.phi.slp.ci,
            ConvLayer::EPConv(l) => l.phi.slp.ci,
        }
    }

    pub fn out_channels(&self) -> usize {
        match self {
            ConvLayer::PConv(l) => l.phi.slp.co,
            ConvLayer::EPConv(l) => l.psi.slp.co,
        }
    }

    pub fn forward(&self, ctx: &mut Ctx, features: Var, nb: &Neighborhood) -> Result<Var> {
        match self {
            ConvLayer::PConv(l) => pconv_forward(ctx, l, features, nb),
            ConvLayer::EPConv(l) => epconv_forward(ctx, l, features, nb),
        }
    }
}

/// One convolution inside a stage together with its neighborhood rule.
#[derive(Clone, Debug)]
pub struct StageLayer {
    pub name: String,
    pub conv: ConvLayer,
    pub neighborhood: NeighborhoodSpec,
}

fn run_layer(ctx: &mut Ctx, layer: &StageLayer, level: &Level, x: Var) -> Result<Var> {
    let nb = Neighborhood::same_level(level, &layer.neighborhood, ctx)?;
    let y = layer.conv.forward(ctx, x, &nb)?;
    ctx.record(&layer.name, y, Some(level.points()));
    Ok(y)
}

/// Each layer consumes the concatenation of the block input and every
/// earlier layer output; returns the final concatenation.
pub fn densepoint_block_forward(ctx: &mut Ctx, layers: &[StageLayer], level: &Level, features: Var) -> Result<Var> {
    let mut parts = vec![features];
    let mut running = features;
    for layer in layers {
        let y = run_layer(ctx, layer, level, running)?;
        parts.push(y);
        running = ctx.tape.concat(&parts)?;
    }
    Ok(running)
}

/// Classic chaining; with `concat_at_end` the stage output is the
/// concatenation of the input and all layer outputs.
pub fn layer_by_layer_forward(
    ctx: &mut Ctx,
    layers: &[StageLayer],
    level: &Level,
    features: Var,
    concat_at_end: bool,
) -> Result<Var> {
    let mut parts = vec![features];
    let mut x = features;
    for layer in layers {
        let ci = layer.conv.in_channels();
        let got = ctx.tape.shape(x)[1];
        if got != ci {
            return Err(Error::Shape {
                op: "layer_by_layer",
                lhs: vec![got],
                rhs: vec![ci],
            });
        }
        x = run_layer(ctx, layer, level, x)?;
        parts.push(x);
    }
    if concat_at_end && !layers.is_empty() {
        ctx.tape.concat(&parts)
    } else {
        Ok(x)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Sampling {
    /// Keep `round(ratio · N)` points chosen by farthest-point sampling.
    Ratio(f64),
    /// One output per sample aggregating every point.
    Global,
}

#[derive(Clone, Debug)]
pub struct PPoolLayer {
    pub name: String,
    pub sampling: Sampling,
    pub neighborhood: NeighborhoodSpec,
    pub conv: PConvLayer,
    /// Convolve centroid-relative coordinates instead of features.
    pub on_coords: bool,
}

impl PPoolLayer {
    pub fn output_points(&self, n_in: usize) -> Result<usize> {
        match self.sampling {
            Sampling::Global => Ok(1),
            Sampling::Ratio(r) => {
                let n = (n_in as f64 * r).round() as usize;
                if !(r > 0.0) || n == 0 || n > n_in {
                    return Err(Error::Index(format!("ratio {r} of {n_in} points gives {n} centroids")));
                }
                Ok(n)
            }
        }
    }
}

/// Farthest-point downsampling plus PConv over the centroids' neighborhoods.
/// Returns the downsampled level and the pooled features.
pub fn ppool_forward(ctx: &mut Ctx, layer: &PPoolLayer, level: &Level, features: Option<Var>) -> Result<(Level, Var)> {
    let n_in = level.points();
    let batch = level.batch();
    let n_out = layer.output_points(n_in)?;
    let (out_level, nb) = match layer.sampling {
        Sampling::Global => {
            let index: Vec<usize> = (0..level.rows()).collect();
            (Level::new(vec![vec![[0.0; 3]]; batch])?, Neighborhood::new(index, n_in, level.rows())?)
        }
        Sampling::Ratio(_) => {
            let deterministic = layer.neighborhood.method == NeighborhoodMethod::AllInRadius;
            let mut cents = Vec::with_capacity(batch);
            for coords in &level.coords {
                let seed = if deterministic { geometry::canonical_seed(coords) } else { 0 };
                cents.push(geometry::farthest_point_sample(coords, n_out, seed)?);
            }
            let nb = Neighborhood::for_centroids(level, &cents, &layer.neighborhood, ctx)?;
            let coords = level
                .coords
                .iter()
                .zip(&cents)
                .map(|(c, idx)| idx.iter().map(|&i| c[i]).collect())
                .collect();
            (Level::new(coords)?, nb)
        }
    };
    let y = if layer.on_coords {
        coords_pconv(ctx, &layer.conv, level, &out_level, &nb, layer.neighborhood.normalize)?
    } else {
        let x = features.ok_or_else(|| Error::Config(format!("{} needs input features", layer.name)))?;
        pconv_forward(ctx, &layer.conv, x, &nb)?
    };
    ctx.record(&layer.name, y, (layer.sampling != Sampling::Global).then_some(n_out));
    Ok((out_level, y))
}

/// PConv over materialized (optionally centroid-relative) neighbor coordinates.
fn coords_pconv(ctx: &mut Ctx, layer: &PConvLayer, level: &Level, out: &Level, nb: &Neighborhood, normalize: bool) -> Result<Var> {
    if layer.phi.slp.ci != 3 {
        return Err(Error::Shape {
            op: "ppool on coordinates",
            lhs: vec![3],
            rhs: vec![layer.phi.slp.ci],
        });
    }
    let n_in = level.points();
    let n_out = out.points();
    let mut data = Vec::with_capacity(nb.index.len() * 3);
    for (o, row) in nb.index.chunks_exact(nb.width).enumerate() {
        let b = o / n_out;
        let origin = if normalize { out.coords[b][o % n_out] } else { [0.0; 3] };
        for &j in row {
            let p = level.coords[b][j - b * n_in];
            data.extend([p[0] - origin[0], p[1] - origin[1], p[2] - origin[2]]);
        }
    }
    let g = ctx.tape.constant(Tensor::new(vec![nb.index.len(), 3], data)?);
    let y = layer.phi.forward(ctx, g, None)?;
    let co = layer.phi.slp.co;
    let y = ctx.tape.reshape(y, &[nb.output_rows(), nb.width, co])?;
    ctx.tape.reduce(y, 1, layer.rho)
}

#[derive(Clone, Debug)]
pub struct FpLayer {
    pub name: String,
    pub neighbors: usize,
    pub mlp: Vec<Composite>,
}

impl FpLayer {
    pub fn new(store: &mut ParamStore, name: &str, ci: usize, widths: &[usize], preactivation: bool, rng: &mut Rng) -> Result<Self> {
        let mut mlp = Vec::with_capacity(widths.len());
        let mut c = ci;
        for (i, &w) in widths.iter().enumerate() {
            mlp.push(Composite::new(store, name, &format!("mlp{i}"), &format!("bn{i}"), (c, w, 1), preactivation, rng)?);
            c = w;
        }
        Ok(Self {
            name: name.to_string(),
            neighbors: 3,
            mlp,
        })
    }
}

/// Inverse-squared-distance weights of the `k` nearest coarse points of every
/// fine point. A coarse point at distance exactly zero takes all the weight.
pub fn interpolation_weights(coarse: &Level, fine: &Level, k: usize) -> Result<(Vec<usize>, Vec<f64>, usize)> {
    if coarse.batch() != fine.batch() {
        return config_err("coarse and fine levels have different batch sizes");
    }
    let nc = coarse.points();
    let k = k.min(nc).max(1);
    let mut index = Vec::with_capacity(fine.rows() * k);
    let mut weights = Vec::with_capacity(fine.rows() * k);
    let mut order: Vec<(f64, usize)> = Vec::with_capacity(nc);
    for (b, (cc, fc)) in coarse.coords.iter().zip(&fine.coords).enumerate() {
        for p in fc {
            order.clear();
            order.extend(cc.iter().enumerate().map(|(j, q)| (geometry::dist2(p, q), j)));
            order.sort_unstable_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            let near = &order[..k];
            if near[0].0 == 0.0 {
                for (i, &(_, j)) in near.iter().enumerate() {
                    index.push(b * nc + j);
                    weights.push(if i == 0 { 1.0 } else { 0.0 });
                }
            } else {
                let total: f64 = near.iter().map(|(d, _)| 1.0 / d).sum();
                for &(d, j) in near {
                    index.push(b * nc + j);
                    weights.push(1.0 / d / total);
                }
            }
        }
    }
    Ok((index, weights, k))
}

/// Interpolates coarse features onto the fine points, concatenates the skip
/// features, and applies the MLP.
pub fn feature_propagate(
    ctx: &mut Ctx,
    layer: &FpLayer,
    coarse: &Level,
    coarse_features: Var,
    fine: &Level,
    skip: Option<Var>,
) -> Result<Var> {
    let (index, weights, k) = interpolation_weights(coarse, fine, layer.neighbors)?;
    let mut x = ctx.tape.interpolate(coarse_features, index.into(), weights.into(), k)?;
    if let Some(s) = skip {
        x = ctx.tape.concat(&[x, s])?;
    }
    for comp in &layer.mlp {
        x = comp.forward(ctx, x, None)?;
    }
    ctx.record(&layer.name, x, Some(fine.points()));
    Ok(x)
}

#[derive(Clone, Debug)]
pub struct FcLayer {
    pub name: String,
    pub slp: Slp,
    /// Absent on the terminal prediction layer.
    pub bn: Option<BatchNorm>,
    pub dropout: f64,
}

impl FcLayer {
    pub fn new(store: &mut ParamStore, name: &str, ci: usize, co: usize, dropout: f64, terminal: bool, rng: &mut Rng) -> Result<Self> {
        if !(0.0..1.0).contains(&dropout) {
            return config_err(format!("dropout ratio must lie in [0, 1), got {dropout}"));
        }
        Ok(Self {
            name: name.to_string(),
            slp: Slp::new(store, name, ci, co, 1, rng)?,
            bn: if terminal { None } else { Some(BatchNorm::new(store, &format!("{name}.bn"), co)?) },
            dropout,
        })
    }
}

/// `linear → BN → ReLU → dropout`, or just `linear` on the terminal layer.
pub fn fc_forward(ctx: &mut Ctx, layer: &FcLayer, x: Var, points: Option<usize>) -> Result<Var> {
    let mut y = layer.slp.forward(ctx, x)?;
    if let Some(bn) = &layer.bn {
        y = bn.forward(ctx, y, None)?;
        y = ctx.tape.relu(y);
        y = ctx.tape.dropout(y, layer.dropout, ctx.training, ctx.rng)?;
    }
    ctx.record(&layer.name, y, points);
    Ok(y)
}
