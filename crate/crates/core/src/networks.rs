//! Network configurations, builders and the parameter/FLOP accountant.
//!
//! A network is a list of stages (a PPool followed by a block of same-level
//! convolutions), an optional feature-propagation decoder that climbs back
//! up the stage levels, and a stack of fully connected layers.

use std::fmt;
use std::str::FromStr;

use crate::data::one_hot;
use crate::error::{config_err, Error, Result};
use crate::geometry::{NeighborhoodMethod, NeighborhoodSpec, PointCloud};
use crate::layers::{
    densepoint_block_forward, fc_forward, feature_propagate, layer_by_layer_forward, ppool_forward, ConvLayer, Ctx,
    EPConvLayer, FcLayer, FpLayer, Level, PConvLayer, PPoolLayer, Sampling, StageLayer, TraceEntry,
};
use crate::rng::{self, Rng};
use crate::tensor::{BnUpdate, ParamStore, Reduction, Tape, Tensor, Var};

/// Stream tag for weight initialization.
const INIT_STREAM: u64 = 0x1417;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Task {
    Classification,
    PartSegmentation,
    NormalEstimation,
    Custom,
}

impl Task {
    pub fn name(self) -> &'static str {
        match self {
            Task::Classification => "classification",
            Task::PartSegmentation => "segmentation",
            Task::NormalEstimation => "normal",
            Task::Custom => "custom",
        }
    }
}

impl FromStr for Task {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "classification" | "cls" => Ok(Task::Classification),
            "segmentation" | "part_segmentation" | "seg" => Ok(Task::PartSegmentation),
            "normal" | "normal_estimation" => Ok(Task::NormalEstimation),
            "custom" => Ok(Task::Custom),
            _ => config_err(format!("unknown task {s:?} (classification|segmentation|normal|custom)")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Connectivity {
    /// Every layer sees the concatenation of all earlier outputs in its stage.
    Dense,
    /// Classic chaining.
    LayerByLayer,
    /// Classic chaining whose stage output concatenates every layer output.
    ConcatAtEnd,
}

impl Connectivity {
    pub fn name(self) -> &'static str {
        match self {
            Connectivity::Dense => "dense",
            Connectivity::LayerByLayer => "layer",
            Connectivity::ConcatAtEnd => "concat_end",
        }
    }
}

impl FromStr for Connectivity {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dense" => Ok(Connectivity::Dense),
            "layer" | "layer_by_layer" => Ok(Connectivity::LayerByLayer),
            "concat_end" | "concat_at_end" => Ok(Connectivity::ConcatAtEnd),
            _ => config_err(format!("unknown connectivity {s:?} (dense|layer|concat_end)")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ConvKind {
    PConv,
    EPConv,
}

impl ConvKind {
    pub fn name(self) -> &'static str {
        match self {
            ConvKind::PConv => "pconv",
            ConvKind::EPConv => "epconv",
        }
    }
}

impl FromStr for ConvKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pconv" => Ok(ConvKind::PConv),
            "epconv" => Ok(ConvKind::EPConv),
            _ => config_err(format!("unknown conv kind {s:?} (pconv|epconv)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PPoolConfig {
    pub sampling: Sampling,
    pub radius: f64,
    pub neighbor_count: usize,
    pub out_channels: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerConfig {
    pub radius: f64,
    pub neighbor_count: usize,
    pub dropout: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StageConfig {
    pub ppool: PPoolConfig,
    pub layers: Vec<LayerConfig>,
    /// Overrides the network-wide connectivity for this stage.
    pub connectivity: Option<Connectivity>,
    /// Overrides the network-wide convolution for this stage.
    pub conv: Option<ConvKind>,
}

impl StageConfig {
    fn new(ppool: PPoolConfig, layers: usize, layer: LayerConfig) -> Self {
        Self {
            ppool,
            layers: vec![layer; layers],
            connectivity: None,
            conv: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FcConfig {
    pub out: usize,
    pub dropout: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NetworkConfig {
    pub task: Task,
    /// Points per input cloud, used for shape tables and FLOP counts.
    pub input_points: usize,
    /// Narrowness: output channels of every densely connected layer.
    pub k: usize,
    /// Group count of the grouped per-neighbor transform.
    pub groups: usize,
    /// ePConv hidden width is `bottleneck · k`.
    pub bottleneck: usize,
    /// Output channels of the terminal layer.
    pub classes: usize,
    /// Object-label one-hot concatenated before the fully connected head.
    pub one_hot_dim: Option<usize>,
    pub connectivity: Connectivity,
    pub conv: ConvKind,
    pub aggregation: Reduction,
    pub neighborhood: NeighborhoodMethod,
    pub preactivation: bool,
    /// Output width of every layer in chained baselines; `None` matches the
    /// widths the dense block has after each layer (`C0 + (ℓ+1)·k`).
    pub baseline_width: Option<usize>,
    /// Disabling zeroes the per-layer dropout inside convolutions.
    pub conv_dropout: bool,
    /// Disabling zeroes the dropout of fully connected layers.
    pub fc_dropout: bool,
    pub stages: Vec<StageConfig>,
    /// MLP widths of each feature-propagation layer, coarsest first.
    pub fp: Vec<Vec<usize>>,
    /// Hidden fully connected layers; the terminal layer maps to `classes`.
    pub fc: Vec<FcConfig>,
}

fn ppool(sampling: Sampling, radius: f64, neighbor_count: usize, out_channels: usize) -> PPoolConfig {
    PPoolConfig {
        sampling,
        radius,
        neighbor_count,
        out_channels,
    }
}

fn layer(radius: f64, neighbor_count: usize) -> LayerConfig {
    LayerConfig {
        radius,
        neighbor_count,
        dropout: 0.2,
    }
}

fn fc(out: usize, dropout: f64) -> FcConfig {
    FcConfig { out, dropout }
}

pub const DEPTH_PRESETS: [usize; 6] = [6, 9, 11, 15, 19, 23];

impl NetworkConfig {
    fn base(task: Task, input_points: usize, k: usize, groups: usize, classes: usize) -> Self {
        Self {
            task,
            input_points,
            k,
            groups,
            bottleneck: 4,
            classes,
            one_hot_dim: None,
            connectivity: Connectivity::Dense,
            conv: ConvKind::EPConv,
            aggregation: Reduction::Max,
            neighborhood: NeighborhoodMethod::RandomInSphere,
            preactivation: false,
            baseline_width: None,
            conv_dropout: true,
            fc_dropout: true,
            stages: Vec::new(),
            fp: Vec::new(),
            fc: Vec::new(),
        }
    }

    /// Two dense stages and a global pooling stage over 1024 points.
    pub fn classification(k: usize, groups: usize, classes: usize) -> Self {
        let mut c = Self::base(Task::Classification, 1024, k, groups, classes);
        c.stages = vec![
            StageConfig::new(ppool(Sampling::Ratio(0.5), 0.25, 64, 96), 3, layer(0.2, 32)),
            StageConfig::new(ppool(Sampling::Ratio(0.25), 0.3, 64, 144), 5, layer(0.4, 16)),
            StageConfig::new(ppool(Sampling::Global, 0.0, 0, 512), 0, layer(0.0, 0)),
        ];
        c.fc = vec![fc(512, 0.5), fc(256, 0.5)];
        c
    }

    /// Four stages over 2048 points, four propagation layers back up to the
    /// input resolution and a per-point head.
    pub fn segmentation(k: usize, groups: usize, parts: usize, one_hot_dim: usize) -> Self {
        let mut c = Self::base(Task::PartSegmentation, 2048, k, groups, parts);
        c.one_hot_dim = Some(one_hot_dim);
        c.stages = vec![
            StageConfig::new(ppool(Sampling::Ratio(0.5), 0.1, 32, 64), 0, layer(0.0, 0)),
            StageConfig::new(ppool(Sampling::Ratio(0.25), 0.2, 64, 128), 4, layer(0.3, 32)),
            StageConfig::new(ppool(Sampling::Ratio(0.25), 0.3, 32, 192), 6, layer(0.5, 16)),
            StageConfig::new(ppool(Sampling::Ratio(0.25), 0.8, 32, 360), 3, layer(0.8, 8)),
        ];
        c.fp = vec![vec![512, 512], vec![384, 384], vec![256, 256], vec![128, 128]];
        c.fc = vec![fc(128, 0.5)];
        c
    }

    /// The segmentation layout adapted to 1024 points with a 3-channel
    /// per-point output.
    pub fn normal_estimation(k: usize, groups: usize, one_hot_dim: usize) -> Self {
        let mut c = Self::segmentation(k, groups, 3, one_hot_dim);
        c.task = Task::NormalEstimation;
        c.input_points = 1024;
        c.stages[0].ppool = ppool(Sampling::Ratio(1.0), 0.2, 32, 64);
        c.stages[1].ppool = ppool(Sampling::Ratio(0.25), 0.2, 32, 128);
        c
    }

    /// Classification network with `depth - 3` convolutions split over the
    /// two dense stages in a 3:5 proportion. The shallowest preset also
    /// halves every neighborhood size.
    pub fn depth_preset(depth: usize) -> Result<Self> {
        if !DEPTH_PRESETS.contains(&depth) {
            return config_err(format!("no depth preset for L={depth} (choose from {DEPTH_PRESETS:?})"));
        }
        let d = depth - 3;
        let first = (3 * d + 4) / 8;
        let mut c = Self::classification(24, 2, 40);
        let (l1, l2) = (c.stages[0].layers[0].clone(), c.stages[1].layers[0].clone());
        c.stages[0].layers = vec![l1; first];
        c.stages[1].layers = vec![l2; d - first];
        if depth == 6 {
            for stage in &mut c.stages[..2] {
                stage.ppool.neighbor_count /= 2;
                for l in &mut stage.layers {
                    l.neighbor_count /= 2;
                }
            }
        }
        Ok(c)
    }

    pub fn per_point(&self) -> bool {
        !self.fp.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || self.groups == 0 || self.bottleneck == 0 {
            return config_err("k, groups and bottleneck must be positive");
        }
        if self.stages.is_empty() {
            return config_err("a network needs at least one stage");
        }
        if self.input_points == 0 {
            return config_err("input_points must be positive");
        }
        match self.task {
            Task::Classification | Task::PartSegmentation if self.classes < 2 => {
                return config_err(format!("{} needs at least 2 classes, got {}", self.task.name(), self.classes));
            }
            Task::NormalEstimation if self.classes != 3 => {
                return config_err("normal estimation predicts exactly 3 channels");
            }
            _ if self.classes == 0 => return config_err("classes must be positive"),
            _ => {}
        }
        if self.one_hot_dim == Some(0) {
            return config_err("one_hot_dim must be positive");
        }
        for (s, st) in self.stages.iter().enumerate() {
            let last = s + 1 == self.stages.len();
            if st.ppool.out_channels == 0 {
                return config_err(format!("stage{} pooling width must be positive", s + 1));
            }
            match st.ppool.sampling {
                Sampling::Global => {
                    if !last || !st.layers.is_empty() {
                        return config_err("global pooling must be the last stage and have no convolutions");
                    }
                }
                Sampling::Ratio(r) => {
                    if !(r > 0.0 && r <= 1.0) {
                        return config_err(format!("stage{} sampling ratio {r} outside (0, 1]", s + 1));
                    }
                    if st.ppool.neighbor_count == 0 || !(st.ppool.radius > 0.0) {
                        return config_err(format!("stage{} pooling needs a positive radius and neighbor count", s + 1));
                    }
                }
            }
            for (i, l) in st.layers.iter().enumerate() {
                if l.neighbor_count == 0 || !(l.radius > 0.0) || !(0.0..1.0).contains(&l.dropout) {
                    return config_err(format!("stage{} layer {} has an invalid radius, neighbor count or dropout", s + 1, i + 1));
                }
            }
        }
        let global = self.stages.last().is_some_and(|s| s.ppool.sampling == Sampling::Global);
        if self.per_point() {
            if global {
                return config_err("a per-point decoder cannot follow global pooling");
            }
            if self.fp.len() != self.stages.len() {
                return config_err(format!("{} propagation layers for {} stages", self.fp.len(), self.stages.len()));
            }
            if self.fp.iter().any(|w| w.is_empty() || w.contains(&0)) {
                return config_err("propagation layers need positive widths");
            }
        } else if !global {
            return config_err("without propagation layers the last stage must pool globally");
        }
        if self.fc.iter().any(|f| f.out == 0 || !(0.0..1.0).contains(&f.dropout)) {
            return config_err("fully connected layers need positive widths and dropout in [0, 1)");
        }
        Ok(())
    }

    fn stage_connectivity(&self, s: usize) -> Connectivity {
        self.stages[s].connectivity.unwrap_or(self.connectivity)
    }

    fn stage_conv(&self, s: usize) -> ConvKind {
        self.stages[s].conv.unwrap_or(self.conv)
    }

    /// `(in, out)` channels of every convolution of stage `s` fed with `c0`
    /// channels, and the stage output width.
    fn stage_widths(&self, s: usize, c0: usize) -> (Vec<(usize, usize)>, usize) {
        let n = self.stages[s].layers.len();
        let k = self.k;
        match self.stage_connectivity(s) {
            Connectivity::Dense => ((0..n).map(|l| (c0 + l * k, k)).collect(), c0 + n * k),
            conn => {
                let mut prev = c0;
                let mut total = c0;
                let mut io = Vec::with_capacity(n);
                for l in 0..n {
                    let w = self.baseline_width.unwrap_or(c0 + (l + 1) * k);
                    io.push((prev, w));
                    prev = w;
                    total += w;
                }
                let out = if conn == Connectivity::ConcatAtEnd { total } else { prev };
                (io, out)
            }
        }
    }

    /// Points per sample at every level, input first.
    pub fn level_points(&self, n: usize) -> Result<Vec<usize>> {
        let mut pts = vec![n];
        for st in &self.stages {
            let prev = *pts.last().unwrap_or(&n);
            pts.push(match st.ppool.sampling {
                Sampling::Global => 1,
                Sampling::Ratio(r) => {
                    let m = (prev as f64 * r).round() as usize;
                    if m == 0 || m > prev {
                        return Err(Error::Index(format!("ratio {r} of {prev} points gives {m} centroids")));
                    }
                    m
                }
            });
        }
        Ok(pts)
    }
}

#[derive(Clone, Debug)]
pub struct Stage {
    pub name: String,
    pub ppool: PPoolLayer,
    pub layers: Vec<StageLayer>,
    pub connectivity: Connectivity,
    pub out_channels: usize,
}

/// A built network and its parameters.
#[derive(Clone, Debug)]
pub struct Network {
    pub config: NetworkConfig,
    pub store: ParamStore,
    pub stages: Vec<Stage>,
    pub fps: Vec<FpLayer>,
    pub fcs: Vec<FcLayer>,
}

/// Result of one forward pass.
pub struct Forward {
    /// `[B, classes]` for global heads, `[B·N, classes]` for per-point heads.
    pub output: Var,
    pub trace: Vec<TraceEntry>,
    pub bn_updates: Vec<BnUpdate>,
}

/// Builds `config` with weights drawn from a stream derived from `seed`.
pub fn build(config: &NetworkConfig, seed: u64) -> Result<Network> {
    config.validate()?;
    let mut rng = rng::derive(seed, &[INIT_STREAM]);
    let mut store = ParamStore::new();
    let preact = config.preactivation;
    let rho = config.aggregation;
    let mut stages = Vec::with_capacity(config.stages.len());
    let mut outs = Vec::with_capacity(config.stages.len());
    let mut c = 3;
    for (s, st) in config.stages.iter().enumerate() {
        let name = format!("stage{}", s + 1);
        let pname = format!("{name}.ppool");
        let neighborhood = NeighborhoodSpec {
            method: config.neighborhood,
            radius: st.ppool.radius,
            neighbor_count: st.ppool.neighbor_count,
            normalize: s == 0,
        };
        let ppool = PPoolLayer {
            name: pname.clone(),
            sampling: st.ppool.sampling,
            neighborhood,
            conv: PConvLayer::new(&mut store, &pname, c, st.ppool.out_channels, rho, preact, &mut rng)?,
            on_coords: s == 0,
        };
        let c0 = st.ppool.out_channels;
        let (io, out) = config.stage_widths(s, c0);
        let conv = config.stage_conv(s);
        let mut layers = Vec::with_capacity(io.len());
        for (l, (&(ci, co), lc)) in io.iter().zip(&st.layers).enumerate() {
            let lname = format!("{name}.{}{}", conv.name(), l + 1);
            let layer = match conv {
                ConvKind::PConv => ConvLayer::PConv(PConvLayer::new(&mut store, &lname, ci, co, rho, preact, &mut rng)?),
                ConvKind::EPConv => {
                    let dropout = if config.conv_dropout { lc.dropout } else { 0.0 };
                    let mid = config.bottleneck * config.k;
                    ConvLayer::EPConv(EPConvLayer::new(&mut store, &lname, (ci, mid, co), config.groups, dropout, rho, preact, &mut rng)?)
                }
            };
            layers.push(StageLayer {
                name: lname,
                conv: layer,
                neighborhood: NeighborhoodSpec {
                    method: config.neighborhood,
                    radius: lc.radius,
                    neighbor_count: lc.neighbor_count,
                    normalize: false,
                },
            });
        }
        stages.push(Stage {
            name,
            ppool,
            layers,
            connectivity: config.stage_connectivity(s),
            out_channels: out,
        });
        outs.push(out);
        c = out;
    }
    let mut fps = Vec::with_capacity(config.fp.len());
    let n_stages = config.stages.len();
    for (i, widths) in config.fp.iter().enumerate() {
        let level = n_stages - i - 1;
        let skip = if level == 0 { 3 } else { outs[level - 1] };
        fps.push(FpLayer::new(&mut store, &format!("fp{}", i + 1), c + skip, widths, preact, &mut rng)?);
        c = *widths.last().expect("validated");
    }
    c += config.one_hot_dim.unwrap_or(0);
    let mut fcs = Vec::with_capacity(config.fc.len() + 1);
    for (i, f) in config.fc.iter().enumerate() {
        let dropout = if config.fc_dropout { f.dropout } else { 0.0 };
        fcs.push(FcLayer::new(&mut store, &format!("fc{}", i + 1), c, f.out, dropout, false, &mut rng)?);
        c = f.out;
    }
    let last = format!("fc{}", config.fc.len() + 1);
    fcs.push(FcLayer::new(&mut store, &last, c, config.classes, 0.0, true, &mut rng)?);
    Ok(Network {
        config: config.clone(),
        store,
        stages,
        fps,
        fcs,
    })
}

pub fn build_classification(k: usize, groups: usize, classes: usize, connectivity: Connectivity, seed: u64) -> Result<Network> {
    let mut c = NetworkConfig::classification(k, groups, classes);
    c.connectivity = connectivity;
    build(&c, seed)
}

pub fn build_segmentation(k: usize, groups: usize, parts: usize, one_hot_dim: usize, seed: u64) -> Result<Network> {
    build(&NetworkConfig::segmentation(k, groups, parts, one_hot_dim), seed)
}

pub fn build_normal_estimation(k: usize, groups: usize, one_hot_dim: usize, seed: u64) -> Result<Network> {
    build(&NetworkConfig::normal_estimation(k, groups, one_hot_dim), seed)
}

impl Network {
    pub fn param_names(&self) -> Vec<String> {
        self.store.named_tensors().map(|(n, _)| n.to_string()).collect()
    }

    /// Forward pass against this network's own parameters.
    pub fn forward(&self, tape: &mut Tape, clouds: &[PointCloud], training: bool, rng: &mut Rng, sample_rngs: Vec<Rng>) -> Result<Forward> {
        self.forward_with(&self.store, tape, clouds, training, rng, sample_rngs)
    }

    /// Forward pass against `store`, which must be structurally identical to
    /// the network's own store. `sample_rngs` drive each sample's neighbor
    /// sampling; `rng` drives dropout.
    pub fn forward_with(
        &self,
        store: &ParamStore,
        tape: &mut Tape,
        clouds: &[PointCloud],
        training: bool,
        rng: &mut Rng,
        sample_rngs: Vec<Rng>,
    ) -> Result<Forward> {
        if sample_rngs.len() != clouds.len() {
            return config_err(format!("{} sample streams for {} clouds", sample_rngs.len(), clouds.len()));
        }
        let input = Level::new(clouds.iter().map(|c| c.coords.clone()).collect())?;
        let n0 = input.points();
        let batch = input.batch();
        let mut ctx = Ctx::new(tape, store, training, rng, sample_rngs);
        let mut levels = vec![input];
        let mut outs = Vec::with_capacity(self.stages.len());
        let mut feats = None;
        for stage in &self.stages {
            let (level, x) = ppool_forward(&mut ctx, &stage.ppool, levels.last().expect("non-empty"), feats)?;
            let x = match stage.connectivity {
                Connectivity::Dense => densepoint_block_forward(&mut ctx, &stage.layers, &level, x)?,
                Connectivity::LayerByLayer => layer_by_layer_forward(&mut ctx, &stage.layers, &level, x, false)?,
                Connectivity::ConcatAtEnd => layer_by_layer_forward(&mut ctx, &stage.layers, &level, x, true)?,
            };
            if !stage.layers.is_empty() {
                ctx.record(&format!("{}.output", stage.name), x, Some(level.points()));
            }
            levels.push(level);
            outs.push(x);
            feats = Some(x);
        }
        let mut x = feats.expect("validated: at least one stage");
        let s = self.stages.len();
        for (i, fp) in self.fps.iter().enumerate() {
            let fine = s - i - 1;
            let skip = if fine == 0 {
                ctx.tape.constant(levels[0].coord_tensor())
            } else {
                outs[fine - 1]
            };
            x = feature_propagate(&mut ctx, fp, &levels[fine + 1], x, &levels[fine], Some(skip))?;
        }
        let per_point = self.config.per_point();
        if let Some(dim) = self.config.one_hot_dim {
            let rows = if per_point { n0 } else { 1 };
            let mut data = Vec::with_capacity(batch * rows * dim);
            for cloud in clouds {
                let label = cloud
                    .label
                    .ok_or_else(|| Error::Config("one-hot input needs every cloud to carry an object label".into()))?;
                let code = one_hot(label, dim)?;
                for _ in 0..rows {
                    data.extend_from_slice(code.data());
                }
            }
            let oh = ctx.tape.constant(Tensor::new(vec![batch * rows, dim], data)?);
            x = ctx.tape.concat(&[x, oh])?;
        }
        let points = per_point.then_some(n0);
        for f in &self.fcs {
            x = fc_forward(&mut ctx, f, x, points)?;
        }
        Ok(Forward {
            output: x,
            trace: ctx.trace,
            bn_updates: ctx.bn_updates,
        })
    }

    fn width(&self, spec: &NeighborhoodSpec, n_in: usize) -> usize {
        match spec.method {
            NeighborhoodMethod::RandomInSphere => spec.neighbor_count,
            NeighborhoodMethod::Knn => spec.neighbor_count.min(n_in),
            NeighborhoodMethod::AllInRadius => n_in,
        }
    }

    /// Layer-by-layer output shapes for `config.input_points` input points.
    pub fn shape_table(&self) -> Result<Vec<ShapeRow>> {
        let pts = self.config.level_points(self.config.input_points)?;
        let mut rows = vec![ShapeRow::new("input", "-", "Input", "-".into(), Some(3), Some(pts[0]))];
        for (s, stage) in self.stages.iter().enumerate() {
            let tag = (s + 1).to_string();
            let p = &stage.ppool;
            let (ratio, radius, m) = match p.sampling {
                Sampling::Global => ("-".to_string(), "-".to_string(), pts[s]),
                Sampling::Ratio(r) => (fmt_ratio(r), fmt_num(p.neighborhood.radius), self.width(&p.neighborhood, pts[s])),
            };
            let slp = &p.conv.phi.slp;
            let setting = format!("[{ratio}, {radius}, {m}, ({}, {})]", slp.ci, slp.co);
            let out_pts = (p.sampling != Sampling::Global).then_some(pts[s + 1]);
            rows.push(ShapeRow::new(&p.name, &tag, "PPool", setting, Some(slp.co), out_pts));
            for l in &stage.layers {
                let m = self.width(&l.neighborhood, pts[s + 1]);
                let r = fmt_num(l.neighborhood.radius);
                let (kind, setting) = match &l.conv {
                    ConvLayer::PConv(c) => ("PConv", format!("[{r}, {m}, ({}, {})]", c.phi.slp.ci, c.phi.slp.co)),
                    ConvLayer::EPConv(c) => (
                        "ePConv",
                        format!(
                            "[{r}, {m}, ({}, {}, {}), ({}, {}), {}%]",
                            c.phi.slp.ci,
                            c.phi.slp.co,
                            c.phi.slp.groups,
                            c.psi.slp.ci,
                            c.psi.slp.co,
                            fmt_num(c.dropout * 100.0)
                        ),
                    ),
                };
                rows.push(ShapeRow::new(&l.name, &tag, kind, setting, Some(l.conv.out_channels()), out_pts));
            }
            if !stage.layers.is_empty() {
                rows.push(ShapeRow::new(&format!("{}.output", stage.name), &tag, "output", "-".into(), Some(stage.out_channels), out_pts));
            }
        }
        let s = self.stages.len();
        for (i, fp) in self.fps.iter().enumerate() {
            let widths: Vec<String> = std::iter::once(fp.mlp[0].slp.ci)
                .chain(fp.mlp.iter().map(|c| c.slp.co))
                .map(|w| w.to_string())
                .collect();
            let co = fp.mlp.last().map(|c| c.slp.co);
            rows.push(ShapeRow::new(&fp.name, "-", "FP", format!("({})", widths.join(", ")), co, Some(pts[s - i - 1])));
        }
        let points = self.config.per_point().then_some(pts[0]);
        for (i, f) in self.fcs.iter().enumerate() {
            let ci = match (i, self.config.one_hot_dim) {
                (0, Some(d)) => format!("{}+{d}", f.slp.ci - d),
                _ => f.slp.ci.to_string(),
            };
            let drop = if f.bn.is_some() && f.dropout > 0.0 { format!("{}%", fmt_num(f.dropout * 100.0)) } else { "-".into() };
            rows.push(ShapeRow::new(&f.name, "-", "FC", format!("[({ci}, {}), {drop}]", f.slp.co), Some(f.slp.co), points));
        }
        Ok(rows)
    }
}

fn fmt_num(x: f64) -> String {
    let r = (x * 1e9).round() / 1e9;
    format!("{r}")
}

fn fmt_ratio(r: f64) -> String {
    let inv = 1.0 / r;
    if r < 1.0 && (inv - inv.round()).abs() < 1e-9 {
        format!("1/{}", inv.round())
    } else {
        fmt_num(r)
    }
}

/// One row of a network's shape table.
#[derive(Clone, Debug, PartialEq)]
pub struct ShapeRow {
    /// Trace name of the layer that produces this output.
    pub name: String,
    pub stage: String,
    pub kind: String,
    pub setting: String,
    pub channels: Option<usize>,
    /// Points per sample; `None` for a per-sample vector.
    pub points: Option<usize>,
}

impl ShapeRow {
    fn new(name: &str, stage: &str, kind: &str, setting: String, channels: Option<usize>, points: Option<usize>) -> Self {
        Self {
            name: name.to_string(),
            stage: stage.to_string(),
            kind: kind.to_string(),
            setting,
            channels,
            points,
        }
    }

    /// `(C, N)` or `(C, )`.
    pub fn shape(&self) -> String {
        let c = self.channels.map_or("-".to_string(), |c| c.to_string());
        match self.points {
            Some(n) => format!("({c}, {n})"),
            None => format!("({c}, )"),
        }
    }
}

/// Tab-separated `stage, layer, setting, output shape` lines.
pub fn shape_table_tsv(rows: &[ShapeRow]) -> String {
    let mut out = String::from("stage\tlayer\tsetting\toutput\n");
    for r in rows {
        out.push_str(&format!("{}\t{}\t{}\t{}\n", r.stage, r.kind, r.setting, r.shape()));
    }
    out
}

/// The part of a layer a cost row accounts for.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Unit {
    /// Per-neighbor transform of a PPool or PConv, or `φ̃` of an ePConv;
    /// includes the aggregation cost.
    Phi,
    /// Integrating transform `ψ` of an ePConv.
    Psi,
    /// Interpolation of a propagation layer.
    Interp,
    /// One MLP layer of a propagation layer.
    Fp,
    Fc,
}

impl Unit {
    pub fn name(self) -> &'static str {
        match self {
            Unit::Phi => "phi",
            Unit::Psi => "psi",
            Unit::Interp => "interp",
            Unit::Fp => "fp",
            Unit::Fc => "fc",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CostRow {
    pub layer: String,
    pub unit: Unit,
    /// Linear weights.
    pub weights: usize,
    pub biases: usize,
    /// Batch-norm scale and shift.
    pub bn: usize,
    pub flops: u64,
}

impl CostRow {
    pub fn params(&self) -> usize {
        self.weights + self.biases + self.bn
    }
}

/// Parameter and FLOP tallies. FLOPs count one multiply-accumulate as 2, one
/// per bias add, 2 per batch-norm element, 1 per ReLU element and 1 per
/// aggregated element; per-neighbor transforms are charged once for every
/// (centroid, neighbor) pair.
#[derive(Clone, Debug, PartialEq)]
pub struct CostReport {
    /// Input points per sample the FLOPs were counted for (batch of 1).
    pub points: usize,
    pub rows: Vec<CostRow>,
}

impl CostReport {
    pub fn total_params(&self) -> usize {
        self.rows.iter().map(CostRow::params).sum()
    }

    pub fn total_flops(&self) -> u64 {
        self.rows.iter().map(|r| r.flops).sum()
    }

    pub fn total_bn(&self) -> usize {
        self.rows.iter().map(|r| r.bn).sum()
    }

    /// Linear weights and biases only.
    pub fn params_without_bn(&self) -> usize {
        self.total_params() - self.total_bn()
    }

    pub fn unit_params(&self, unit: Unit) -> usize {
        self.rows.iter().filter(|r| r.unit == unit).map(CostRow::params).sum()
    }

    pub fn unit_weights(&self, unit: Unit) -> usize {
        self.rows.iter().filter(|r| r.unit == unit).map(|r| r.weights).sum()
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::from("layer\tunit\tweights\tbiases\tbn\tparams\tflops\n");
        for r in &self.rows {
            out.push_str(&format!("{}\t{}\t{}\t{}\t{}\t{}\t{}\n", r.layer, r.unit.name(), r.weights, r.biases, r.bn, r.params(), r.flops));
        }
        out.push_str(&format!(
            "total\t-\t{}\t{}\t{}\t{}\t{}\n",
            self.rows.iter().map(|r| r.weights).sum::<usize>(),
            self.rows.iter().map(|r| r.biases).sum::<usize>(),
            self.total_bn(),
            self.total_params(),
            self.total_flops()
        ));
        out
    }
}

impl fmt::Display for CostReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<24} {:>6} {:>10} {:>14}", "layer", "unit", "params", "flops")?;
        for r in &self.rows {
            writeln!(f, "{:<24} {:>6} {:>10} {:>14}", r.layer, r.unit.name(), r.params(), r.flops)?;
        }
        writeln!(
            f,
            "total: {} params ({:.4}M, {} without BN), {} FLOPs ({:.1}M) at {} points",
            self.total_params(),
            self.total_params() as f64 / 1e6,
            self.params_without_bn(),
            self.total_flops(),
            self.total_flops() as f64 / 1e6,
            self.points
        )
    }
}

fn composite_row(layer: &str, unit: Unit, c: &crate::layers::Composite, rows: usize) -> CostRow {
    let s = &c.slp;
    let macs = s.ci * s.co / s.groups;
    let bn_width = c.bn.channels;
    CostRow {
        layer: layer.to_string(),
        unit,
        weights: macs,
        biases: s.co,
        bn: 2 * bn_width,
        flops: (rows * (2 * macs + s.co + 3 * bn_width)) as u64,
    }
}

fn fc_row(f: &FcLayer, rows: usize) -> CostRow {
    let s = &f.slp;
    let macs = s.ci * s.co;
    let bn = f.bn.as_ref().map_or(0, |b| b.channels);
    CostRow {
        layer: f.name.clone(),
        unit: Unit::Fc,
        weights: macs,
        biases: s.co,
        bn: 2 * bn,
        flops: (rows * (2 * macs + s.co + 3 * bn)) as u64,
    }
}

/// Parameter tally plus FLOPs at the configured input size.
pub fn count_params(net: &Network) -> Result<CostReport> {
    count_flops(net, net.config.input_points)
}

/// Parameter tally plus FLOPs for one sample of `n_points` points.
pub fn count_flops(net: &Network, n_points: usize) -> Result<CostReport> {
    let pts = net.config.level_points(n_points)?;
    let mut rows = Vec::new();
    for (s, stage) in net.stages.iter().enumerate() {
        let p = &stage.ppool;
        let (cents, m) = match p.sampling {
            Sampling::Global => (1, pts[s]),
            Sampling::Ratio(_) => (pts[s + 1], net.width(&p.neighborhood, pts[s])),
        };
        let mut row = composite_row(&p.name, Unit::Phi, &p.conv.phi, cents * m);
        row.flops += (cents * m * p.conv.phi.slp.co) as u64;
        rows.push(row);
        let n = pts[s + 1];
        for l in &stage.layers {
            let m = net.width(&l.neighborhood, n);
            match &l.conv {
                ConvLayer::PConv(c) => {
                    let mut row = composite_row(&l.name, Unit::Phi, &c.phi, n * m);
                    row.flops += (n * m * c.phi.slp.co) as u64;
                    rows.push(row);
                }
                ConvLayer::EPConv(c) => {
                    let mut row = composite_row(&l.name, Unit::Phi, &c.phi, n * m);
                    row.flops += (n * m * c.phi.slp.co) as u64;
                    rows.push(row);
                    rows.push(composite_row(&l.name, Unit::Psi, &c.psi, n));
                }
            }
        }
    }
    let s = net.stages.len();
    for (i, fp) in net.fps.iter().enumerate() {
        let level = s - i - 1;
        let fine = pts[level];
        let skip = if level == 0 { 3 } else { net.stages[level - 1].out_channels };
        let coarse_channels = fp.mlp[0].slp.ci - skip;
        rows.push(CostRow {
            layer: fp.name.clone(),
            unit: Unit::Interp,
            weights: 0,
            biases: 0,
            bn: 0,
            flops: (fine * 2 * fp.neighbors * coarse_channels) as u64,
        });
        for c in &fp.mlp {
            rows.push(composite_row(&fp.name, Unit::Fp, c, fine));
        }
    }
    let fc_rows = if net.config.per_point() { pts[0] } else { 1 };
    for f in &net.fcs {
        rows.push(fc_row(f, fc_rows));
    }
    Ok(CostReport { points: n_points, rows })
}
