//! Finite-difference checks of every tape op and every composite layer at
//! tiny sizes.

use std::rc::Rc;

use rand::Rng as _;

use super::{check_inputs, check_params, CheckOptions, CheckReport, DEFAULT_TOLERANCE};
use crate::error::Result;
use crate::geometry::{NeighborhoodMethod, NeighborhoodSpec, PointCloud};
use crate::layers::{
    densepoint_block_forward, epconv_forward, fc_forward, feature_propagate, layer_by_layer_forward, pconv_forward,
    ppool_forward, BatchNorm, Composite, ConvLayer, Ctx, EPConvLayer, FcLayer, FpLayer, Level, Neighborhood,
    PConvLayer, PPoolLayer, Sampling, Slp, StageLayer,
};
use crate::networks::{build, NetworkConfig};
use crate::rng::{seeded, Rng};
use crate::tensor::{OpKind, ParamStore, Reduction, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EntryKind {
    Op,
    Layer,
}

impl EntryKind {
    pub fn name(self) -> &'static str {
        match self {
            EntryKind::Op => "op",
            EntryKind::Layer => "layer",
        }
    }
}

#[derive(Clone, Debug)]
pub struct SuiteEntry {
    pub name: String,
    pub kind: EntryKind,
    pub report: CheckReport,
}

impl SuiteEntry {
    pub fn passes(&self) -> bool {
        self.report.passes(DEFAULT_TOLERANCE)
    }
}

pub const TSV_HEADER: &str = "kind\tname\tmax_rel_err\tchecked\tskipped\tstatus";

pub fn to_tsv(entries: &[SuiteEntry]) -> String {
    let mut out = format!("{TSV_HEADER}\n");
    for e in entries {
        out.push_str(&format!(
            "{}\t{}\t{:.3e}\t{}\t{}\t{}\n",
            e.kind.name(),
            e.name,
            e.report.max_rel_err,
            e.report.checked,
            e.report.skipped,
            if e.passes() { "pass" } else { "FAIL" }
        ));
    }
    out
}

fn rand_tensor(shape: &[usize], rng: &mut Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

// Fixed random weights make every output element matter to the loss. The
// 1/numel scale keeps the loss O(1), so round-off in the central difference
// of a zero gradient stays well under the relative-error floor.
fn weighted_sum(tape: &mut Tape, x: Var, seed: u64) -> Result<Var> {
    let shape = tape.shape(x).to_vec();
    let n = shape.iter().product::<usize>() as f64;
    let mut r = seeded(seed);
    let w = tape.constant(Tensor::from_fn(&shape, |_| r.random_range(-1.0..1.0) / n));
    let p = tape.mul(x, w)?;
    Ok(tape.sum(p))
}

fn unit_rows(rows: usize, rng: &mut Rng) -> Tensor {
    let mut d = rand_tensor(&[rows, 3], rng).into_data();
    for r in d.chunks_exact_mut(3) {
        let n = r.iter().map(|v| v * v).sum::<f64>().sqrt();
        r.iter_mut().for_each(|v| *v /= n);
    }
    Tensor::from_fn(&[rows, 3], |i| d[i])
}

fn op_check(kind: OpKind, opts: CheckOptions, rng: &mut Rng) -> Result<CheckReport> {
    let mut r = seeded(kind as u64 + 100);
    let t2 = |rng: &mut Rng, a, b| rand_tensor(&[a, b], rng);
    match kind {
        OpKind::MatMul => check_inputs(&[t2(rng, 3, 4), t2(rng, 4, 2)], opts, &mut r, |t, v| {
            let c = t.matmul(v[0], v[1])?;
            weighted_sum(t, c, 1)
        }),
        OpKind::Linear => {
            let x = rand_tensor(&[2, 3, 4], rng);
            let w = rand_tensor(&[2, 2, 3], rng);
            let b = rand_tensor(&[6], rng);
            check_inputs(&[x, w, b], opts, &mut r, |t, v| {
                let y = t.linear(v[0], v[1], Some(v[2]), 2)?;
                weighted_sum(t, y, 2)
            })
        }
        OpKind::Add => check_inputs(&[t2(rng, 3, 3), t2(rng, 3, 3)], opts, &mut r, |t, v| {
            let y = t.add(v[0], v[1])?;
            weighted_sum(t, y, 3)
        }),
        OpKind::Sub => check_inputs(&[t2(rng, 3, 3), t2(rng, 3, 3)], opts, &mut r, |t, v| {
            let y = t.sub(v[0], v[1])?;
            weighted_sum(t, y, 4)
        }),
        OpKind::Mul => check_inputs(&[t2(rng, 3, 3), t2(rng, 3, 3)], opts, &mut r, |t, v| {
            let y = t.mul(v[0], v[1])?;
            Ok(t.sum(y))
        }),
        OpKind::Scale => check_inputs(&[t2(rng, 3, 3)], opts, &mut r, |t, v| {
            let y = t.scale(v[0], -1.7);
            weighted_sum(t, y, 5)
        }),
        OpKind::Relu => check_inputs(&[t2(rng, 4, 3)], opts, &mut r, |t, v| {
            let y = t.relu(v[0]);
            weighted_sum(t, y, 6)
        }),
        OpKind::Map => check_inputs(&[t2(rng, 4, 3)], opts, &mut r, |t, v| {
            let y = t.map(v[0], f64::tanh, |x| 1.0 - x.tanh().powi(2));
            weighted_sum(t, y, 7)
        }),
        OpKind::Sum => check_inputs(&[t2(rng, 3, 3)], opts, &mut r, |t, v| {
            let y = t.mul(v[0], v[0])?;
            Ok(t.sum(y))
        }),
        OpKind::Mean => check_inputs(&[t2(rng, 3, 3)], opts, &mut r, |t, v| {
            let y = t.mul(v[0], v[0])?;
            Ok(t.mean(y))
        }),
        OpKind::Reshape => check_inputs(&[t2(rng, 3, 4)], opts, &mut r, |t, v| {
            let y = t.reshape(v[0], &[2, 6])?;
            weighted_sum(t, y, 8)
        }),
        OpKind::Concat => check_inputs(&[t2(rng, 4, 2), t2(rng, 4, 3)], opts, &mut r, |t, v| {
            let y = t.concat(&[v[0], v[1]])?;
            weighted_sum(t, y, 9)
        }),
        OpKind::GatherRows => {
            let index: Rc<[usize]> = Rc::from(vec![4, 0, 0, 2, 1, 4]);
            check_inputs(&[t2(rng, 5, 3)], opts, &mut r, |t, v| {
                let y = t.gather_rows(v[0], index.clone())?;
                weighted_sum(t, y, 10)
            })
        }
        OpKind::Reduce => check_inputs(&[rand_tensor(&[3, 4, 2], rng)], opts, &mut r, |t, v| {
            let a = t.reduce(v[0], 1, Reduction::Max)?;
            let b = t.reduce(v[0], 1, Reduction::Sum)?;
            let c = t.reduce(v[0], 2, Reduction::Mean)?;
            let (a, b, c) = (weighted_sum(t, a, 11)?, weighted_sum(t, b, 12)?, weighted_sum(t, c, 13)?);
            let s = t.add(a, b)?;
            t.add(s, c)
        }),
        OpKind::GatherReduce => {
            let index: Rc<[usize]> = Rc::from(vec![4, 0, 0, 2, 1, 4, 3, 3, 2]);
            check_inputs(&[t2(rng, 5, 3)], opts, &mut r, |t, v| {
                let a = t.gather_reduce(v[0], index.clone(), 3, Reduction::Max)?;
                let b = t.gather_reduce(v[0], index.clone(), 3, Reduction::Mean)?;
                let (a, b) = (weighted_sum(t, a, 14)?, weighted_sum(t, b, 15)?);
                t.add(a, b)
            })
        }
        OpKind::BatchNorm => {
            let w: Rc<[f64]> = Rc::from(vec![1.0, 2.0, 0.0, 3.0, 1.0, 1.0]);
            check_inputs(&[t2(rng, 6, 3), rand_tensor(&[3], rng), rand_tensor(&[3], rng)], opts, &mut r, |t, v| {
                let (a, _) = t.batch_norm_train(v[0], v[1], v[2], None, 1e-5)?;
                let (b, _) = t.batch_norm_train(v[0], v[1], v[2], Some(w.clone()), 1e-5)?;
                let c = t.batch_norm_eval(v[0], v[1], v[2], &[0.1, -0.2, 0.3], &[0.5, 1.5, 2.0], 1e-5)?;
                let (a, b, c) = (weighted_sum(t, a, 16)?, weighted_sum(t, b, 17)?, weighted_sum(t, c, 18)?);
                let s = t.add(a, b)?;
                t.add(s, c)
            })
        }
        OpKind::Dropout => check_inputs(&[t2(rng, 4, 5)], opts, &mut r, |t, v| {
            let y = t.dropout(v[0], 0.4, true, &mut seeded(5))?;
            weighted_sum(t, y, 19)
        }),
        OpKind::Interpolate => {
            let index: Rc<[usize]> = Rc::from(vec![4, 0, 0, 2, 1, 4]);
            let weights: Rc<[f64]> = Rc::from(vec![0.2, 0.8, 0.5, 0.5, 0.9, 0.1]);
            check_inputs(&[t2(rng, 5, 3)], opts, &mut r, |t, v| {
                let y = t.interpolate(v[0], index.clone(), weights.clone(), 2)?;
                weighted_sum(t, y, 20)
            })
        }
        OpKind::SoftmaxCrossEntropy => check_inputs(&[t2(rng, 4, 5)], opts, &mut r, |t, v| {
            t.softmax_cross_entropy(v[0], &[0, 4, 2, 2])
        }),
        OpKind::CosineLoss => {
            let gt = unit_rows(4, rng);
            check_inputs(&[t2(rng, 4, 3)], opts, &mut r, |t, v| t.cosine_loss(v[0], &gt))
        }
    }
}

fn random_points(n: usize, rng: &mut Rng) -> Vec<[f64; 3]> {
    (0..n).map(|_| [0, 1, 2].map(|_| rng.random_range(-1.0..1.0))).collect()
}

fn knn(k: usize) -> NeighborhoodSpec {
    NeighborhoodSpec {
        method: NeighborhoodMethod::Knn,
        radius: 1.0,
        neighbor_count: k,
        normalize: false,
    }
}

// Loss of a layer output: fixed random projection, summed.
fn project(ctx: &mut Ctx, y: Var, seed: u64) -> Result<Var> {
    weighted_sum(ctx.tape, y, seed)
}

fn layer_checks(opts: CheckOptions, rng: &mut Rng) -> Result<Vec<(String, CheckReport)>> {
    let mut out = Vec::new();
    let x = rand_tensor(&[6, 4], rng);
    let idx: Vec<usize> = (0..6 * 3).map(|_| rng.random_range(0..6)).collect();
    let nb = Neighborhood::new(idx, 3, 6)?;

    let mut store = ParamStore::new();
    let slp = Slp::new(&mut store, "slp", 4, 6, 2, rng)?;
    let rep = check_params(&mut store, opts, &mut seeded(1), |tape, store| {
        let mut r = seeded(0);
        let mut ctx = Ctx::new(tape, store, true, &mut r, vec![]);
        let vx = ctx.tape.constant(x.clone());
        let y = slp.forward(&mut ctx, vx)?;
        project(&mut ctx, y, 30)
    })?;
    out.push(("slp".to_string(), rep));

    let mut store = ParamStore::new();
    let bn = BatchNorm::new(&mut store, "bn", 4)?;
    let w: Rc<[f64]> = Rc::from(vec![1.0, 2.0, 1.0, 3.0, 1.0, 2.0]);
    let rep = check_params(&mut store, opts, &mut seeded(2), |tape, store| {
        let mut r = seeded(0);
        let mut ctx = Ctx::new(tape, store, true, &mut r, vec![]);
        let vx = ctx.tape.constant(x.clone());
        let y = bn.forward(&mut ctx, vx, Some(w.clone()))?;
        project(&mut ctx, y, 31)
    })?;
    out.push(("batch_norm".to_string(), rep));

    for preact in [false, true] {
        let mut store = ParamStore::new();
        let comp = Composite::new(&mut store, "c", "slp", "bn", (4, 6, 1), preact, rng)?;
        let rep = check_params(&mut store, opts, &mut seeded(3), |tape, store| {
            let mut r = seeded(0);
            let mut ctx = Ctx::new(tape, store, true, &mut r, vec![]);
            let vx = ctx.tape.constant(x.clone());
            let y = comp.forward(&mut ctx, vx, None)?;
            project(&mut ctx, y, 32)
        })?;
        out.push((if preact { "composite_preact" } else { "composite" }.to_string(), rep));
    }

    let mut store = ParamStore::new();
    let pconv = PConvLayer::new(&mut store, "p", 4, 5, Reduction::Max, false, rng)?;
    let rep = check_params(&mut store, opts, &mut seeded(4), |tape, store| {
        let mut r = seeded(0);
        let mut ctx = Ctx::new(tape, store, true, &mut r, vec![]);
        let vx = ctx.tape.constant(x.clone());
        let y = pconv_forward(&mut ctx, &pconv, vx, &nb)?;
        project(&mut ctx, y, 33)
    })?;
    out.push(("pconv".to_string(), rep));

    let mut store = ParamStore::new();
    let epconv = EPConvLayer::new(&mut store, "e", (4, 8, 2), 2, 0.25, Reduction::Max, false, rng)?;
    let rep = check_params(&mut store, opts, &mut seeded(5), |tape, store| {
        let mut r = seeded(0);
        let mut ctx = Ctx::new(tape, store, true, &mut r, vec![]);
        let vx = ctx.tape.constant(x.clone());
        let y = epconv_forward(&mut ctx, &epconv, vx, &nb)?;
        project(&mut ctx, y, 34)
    })?;
    out.push(("epconv".to_string(), rep));

    // Stage-level checks on a batch of two tiny clouds.
    let level = Level::new(vec![random_points(8, rng), random_points(8, rng)])?;
    let feats = rand_tensor(&[16, 4], rng);
    let k = 2;
    let mut store = ParamStore::new();
    let mut dense = Vec::new();
    let mut chain = Vec::new();
    for l in 0..2 {
        let conv = EPConvLayer::new(&mut store, &format!("d{l}"), (4 + l * k, 4 * k, k), 2, 0.0, Reduction::Max, false, rng)?;
        dense.push(StageLayer {
            name: format!("d{l}"),
            conv: ConvLayer::EPConv(conv),
            neighborhood: knn(3),
        });
        let conv = PConvLayer::new(&mut store, &format!("c{l}"), if l == 0 { 4 } else { 3 }, 3, Reduction::Max, false, rng)?;
        chain.push(StageLayer {
            name: format!("c{l}"),
            conv: ConvLayer::PConv(conv),
            neighborhood: knn(3),
        });
    }
    let rep = check_params(&mut store, opts, &mut seeded(6), |tape, store| {
        let mut r = seeded(0);
        let mut ctx = Ctx::new(tape, store, true, &mut r, vec![seeded(1), seeded(2)]);
        let vx = ctx.tape.constant(feats.clone());
        let a = densepoint_block_forward(&mut ctx, &dense, &level, vx)?;
        let b = layer_by_layer_forward(&mut ctx, &chain, &level, vx, true)?;
        let (a, b) = (project(&mut ctx, a, 35)?, project(&mut ctx, b, 36)?);
        ctx.tape.add(a, b)
    })?;
    out.push(("dense_and_chained_blocks".to_string(), rep));

    let mut store = ParamStore::new();
    let spec = NeighborhoodSpec {
        method: NeighborhoodMethod::Knn,
        radius: 1.0,
        neighbor_count: 3,
        normalize: true,
    };
    let pool_coords = PPoolLayer {
        name: "pool0".into(),
        sampling: Sampling::Ratio(0.5),
        neighborhood: spec,
        conv: PConvLayer::new(&mut store, "pool0", 3, 4, Reduction::Max, false, rng)?,
        on_coords: true,
    };
    let pool_feats = PPoolLayer {
        name: "pool1".into(),
        sampling: Sampling::Global,
        neighborhood: knn(4),
        conv: PConvLayer::new(&mut store, "pool1", 4, 5, Reduction::Max, false, rng)?,
        on_coords: false,
    };
    let rep = check_params(&mut store, opts, &mut seeded(7), |tape, store| {
        let mut r = seeded(0);
        let mut ctx = Ctx::new(tape, store, true, &mut r, vec![seeded(1), seeded(2)]);
        let (mid, f) = ppool_forward(&mut ctx, &pool_coords, &level, None)?;
        let (_, g) = ppool_forward(&mut ctx, &pool_feats, &mid, Some(f))?;
        project(&mut ctx, g, 37)
    })?;
    out.push(("ppool".to_string(), rep));

    let mut store = ParamStore::new();
    let coarse = Level::new(vec![random_points(3, rng), random_points(3, rng)])?;
    let cf = rand_tensor(&[6, 4], rng);
    let skip = rand_tensor(&[16, 2], rng);
    let fp = FpLayer::new(&mut store, "fp", 6, &[5, 3], false, rng)?;
    let rep = check_params(&mut store, opts, &mut seeded(8), |tape, store| {
        let mut r = seeded(0);
        let mut ctx = Ctx::new(tape, store, true, &mut r, vec![]);
        let vc = ctx.tape.constant(cf.clone());
        let vs = ctx.tape.constant(skip.clone());
        let y = feature_propagate(&mut ctx, &fp, &coarse, vc, &level, Some(vs))?;
        project(&mut ctx, y, 38)
    })?;
    out.push(("feature_propagation".to_string(), rep));

    let mut store = ParamStore::new();
    let fcs = [
        FcLayer::new(&mut store, "fc1", 4, 5, 0.5, false, rng)?,
        FcLayer::new(&mut store, "fc2", 5, 3, 0.0, true, rng)?,
    ];
    let labels = [0, 2, 1, 1, 0, 2];
    let rep = check_params(&mut store, opts, &mut seeded(9), |tape, store| {
        let mut r = seeded(77);
        let mut ctx = Ctx::new(tape, store, true, &mut r, vec![]);
        let mut y = ctx.tape.constant(x.clone());
        for f in &fcs {
            y = fc_forward(&mut ctx, f, y, None)?;
        }
        ctx.tape.softmax_cross_entropy(y, &labels)
    })?;
    out.push(("fc_head".to_string(), rep));

    // A whole (narrow) classification network end to end.
    let mut cfg = NetworkConfig::classification(2, 1, 3);
    cfg.input_points = 16;
    for st in &mut cfg.stages {
        st.ppool.out_channels = 4;
        st.ppool.neighbor_count = st.ppool.neighbor_count.min(4);
        st.layers.truncate(1);
        for l in &mut st.layers {
            l.neighbor_count = 4;
        }
    }
    cfg.fc = vec![];
    let mut net = build(&cfg, 1)?;
    let clouds: Vec<PointCloud> = (0..2)
        .map(|i| {
            let mut c = PointCloud::new(random_points(16, rng))?;
            c.label = Some(i);
            Ok(c)
        })
        .collect::<Result<_>>()?;
    let mut store = std::mem::take(&mut net.store);
    let net_opts = CheckOptions {
        max_coords_per_tensor: Some(4),
        ..opts
    };
    let rep = check_params(&mut store, net_opts, &mut seeded(10), |tape, store| {
        let f = net.forward_with(store, tape, &clouds, true, &mut seeded(0), vec![seeded(1), seeded(2)])?;
        tape.softmax_cross_entropy(f.output, &[0, 1])
    })?;
    out.push(("classification_network".to_string(), rep));
    Ok(out)
}

/// Runs every op check (one row per [`OpKind`]) followed by the layer
/// checks. `fault` corrupts the backward of one op kind.
pub fn run_suite(fault: Option<OpKind>) -> Result<Vec<SuiteEntry>> {
    let opts = CheckOptions {
        fault,
        ..CheckOptions::default()
    };
    let mut rng = seeded(2024);
    let mut entries = Vec::new();
    for kind in OpKind::ALL {
        entries.push(SuiteEntry {
            name: kind.name().to_string(),
            kind: EntryKind::Op,
            report: op_check(kind, opts, &mut rng)?,
        });
    }
    for (name, report) in layer_checks(opts, &mut rng)? {
        entries.push(SuiteEntry {
            name,
            kind: EntryKind::Layer,
            report,
        });
    }
    Ok(entries)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clean_suite_passes_and_covers_every_op_once() {
        let entries = run_suite(None).unwrap();
        for e in &entries {
            assert!(e.passes(), "{} {:?}", e.name, e.report);
        }
        let ops: Vec<&str> = entries.iter().filter(|e| e.kind == EntryKind::Op).map(|e| e.name.as_str()).collect();
        let expected: Vec<&str> = OpKind::ALL.iter().map(|k| k.name()).collect();
        assert_eq!(ops, expected);
        assert_eq!(to_tsv(&entries).lines().count(), entries.len() + 1);
    }

    #[test]
    fn corrupted_op_fails_its_row() {
        for kind in [OpKind::Relu, OpKind::GatherReduce, OpKind::BatchNorm] {
            let entries = run_suite(Some(kind)).unwrap();
            let row = entries.iter().find(|e| e.name == kind.name()).unwrap();
            assert!(!row.passes(), "{kind:?}");
        }
    }
}
