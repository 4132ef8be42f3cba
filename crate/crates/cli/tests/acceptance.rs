//! One line per acceptance criterion; exits non-zero if any fails.

use std::process::Command;
use std::time::{Duration, Instant};

use densepoint::data::{make_synthetic, sample_shape, ShapeFamily, Split, SyntheticShapeSpec};
use densepoint::geometry::{dist2, farthest_point_sample, knn_query, NeighborhoodMethod, NeighborhoodSpec, Point, PointCloud};
use densepoint::gradcheck::suite::run_suite;
use densepoint::layers::{densepoint_block_forward, ConvLayer, Ctx, EPConvLayer, Level, Slp, StageLayer};
use densepoint::networks::{build, count_flops, count_params, Connectivity, Network, NetworkConfig};
use densepoint::rng::{self, seeded, Rng};
use densepoint::tensor::{grouped_weight_count, ParamStore, Reduction, Tape, Tensor};
use densepoint::training::{evaluate_voting, train, TrainConfig};
use rand::seq::SliceRandom;
use rand::Rng as _;

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

const SHAPE_BUDGET: Duration = Duration::from_secs(1);
const COUNT_BUDGET: Duration = Duration::from_secs(1);
const PARAM_TOL: f64 = 0.05;
const NG_FLOP_RATIO: f64 = 1.58;
const NG_FLOP_TOL: f64 = 0.10;
const DEPTH_FLOP_RATIO: f64 = 148.0 / 651.0;
const DEPTH_FLOP_TOL: f64 = 0.15;
const GRAD_TOL: f64 = 1e-4;
const GRAD_BUDGET: Duration = Duration::from_secs(120);
const PERM_TOL: f64 = 1e-9;
const TARGET_ACC: f64 = 0.95;
const MAX_EPOCHS: usize = 30;
const LEARN_BUDGET: Duration = Duration::from_secs(600);
/// Equal epoch budget per arm for the dense vs layer-by-layer comparison.
const COMPARE_EPOCHS: usize = 3;
const SEEDS: [u64; 3] = [0, 1, 2];

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn classification(k: usize, groups: usize) -> Network {
    build(&NetworkConfig::classification(k, groups, 40), 0).unwrap()
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs()
}

fn shapes() -> Outcome {
    let start = Instant::now();
    let cases = [
        (NetworkConfig::classification(24, 2, 40), include_str!("../../core/tests/golden/classification.tsv"), 40),
        (NetworkConfig::segmentation(24, 2, 50, 16), include_str!("../../core/tests/golden/segmentation.tsv"), 50),
        (NetworkConfig::normal_estimation(24, 2, 40), include_str!("../../core/tests/golden/normal.tsv"), 3),
    ];
    let mut cells = 0;
    let mut mismatches = Vec::new();
    for (cfg, golden, classes) in cases {
        let rows = build(&cfg, 0).unwrap().shape_table().unwrap();
        let want: Vec<String> = golden
            .lines()
            .skip(1)
            .map(|l| l.rsplit('\t').next().unwrap().replace('K', &classes.to_string()))
            .collect();
        if rows.len() != want.len() {
            mismatches.push(format!("{:?}: {} rows, expected {}", cfg.task, rows.len(), want.len()));
        }
        for (r, w) in rows.iter().zip(&want) {
            cells += 1;
            if &r.shape() != w {
                mismatches.push(format!("{}: {} != {w}", r.name, r.shape()));
            }
        }
    }
    let t = start.elapsed();
    outcome(
        mismatches.is_empty() && t < SHAPE_BUDGET,
        format!("{cells} output-shape cells, {} mismatches {mismatches:?}, {:.3}s", mismatches.len(), t.as_secs_f64()),
    )
}

fn params() -> Outcome {
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    let mut parts = Vec::new();
    for (ng, want) in [(1, 0.73), (2, 0.67), (4, 0.62), (6, 0.61), (12, 0.60)] {
        let m = count_params(&classification(24, ng)).unwrap().total_params() as f64 / 1e6;
        worst = worst.max(rel(m, want));
        parts.push(format!("Ng={ng}:{m:.3}M/{want}"));
    }
    for (k, want) in [(12, 0.56), (24, 0.67), (36, 0.76), (48, 0.88)] {
        let m = count_params(&classification(k, 2)).unwrap().total_params() as f64 / 1e6;
        worst = worst.max(rel(m, want));
        parts.push(format!("k={k}:{m:.3}M/{want}"));
    }
    let t = start.elapsed();
    outcome(
        worst <= PARAM_TOL && t < COUNT_BUDGET,
        format!("worst deviation {:.1}% (tol {:.0}%), {}, {:.3}s", worst * 100.0, PARAM_TOL * 100.0, parts.join(" "), t.as_secs_f64()),
    )
}

fn flops() -> Outcome {
    let f = |net: &Network| count_flops(net, net.config.input_points).unwrap().total_flops() as f64;
    let ng = f(&classification(24, 1)) / f(&classification(24, 2));
    let depth = |l| build(&NetworkConfig::depth_preset(l).unwrap(), 0).unwrap();
    let dr = f(&depth(6)) / f(&depth(11));
    let ok = rel(ng, NG_FLOP_RATIO) <= NG_FLOP_TOL && rel(dr, DEPTH_FLOP_RATIO) <= DEPTH_FLOP_TOL;
    outcome(
        ok,
        format!(
            "Ng1/Ng2 = {ng:.3} (target {NG_FLOP_RATIO} ±{:.0}%), L6/L11 = {dr:.3} (target {DEPTH_FLOP_RATIO:.3} ±{:.0}%)",
            NG_FLOP_TOL * 100.0,
            DEPTH_FLOP_TOL * 100.0
        ),
    )
}

fn grouping() -> Outcome {
    let mut rng = seeded(4);
    let mut bad = Vec::new();
    for t in 0..50 {
        let ng = rng.random_range(1..=12);
        let ci = ng * rng.random_range(1..=32);
        let co = ng * rng.random_range(1..=32);
        let want = ci * co / ng;
        let mut store = ParamStore::new();
        let slp = Slp::new(&mut store, &format!("t{t}"), ci, co, ng, &mut rng).unwrap();
        let built = store.value(slp.weight).data().len();
        if grouped_weight_count(ci, co, ng).unwrap() != want || built != want {
            bad.push((ci, co, ng, built));
        }
    }
    outcome(bad.is_empty(), format!("50 triples, weight count = Ci*Co/Ng, failures {bad:?}"))
}

fn gradients() -> Outcome {
    let start = Instant::now();
    let entries = run_suite(None).unwrap();
    let t = start.elapsed();
    let worst = entries.iter().map(|e| e.report.max_rel_err).fold(0.0, f64::max);
    let failed: Vec<&str> = entries
        .iter()
        .filter(|e| !(e.report.checked > 0 && e.report.max_rel_err <= GRAD_TOL))
        .map(|e| e.name.as_str())
        .collect();
    outcome(
        failed.is_empty() && t < GRAD_BUDGET,
        format!("{} ops and layers, worst rel err {worst:.2e} (tol {GRAD_TOL:.0e}), failed {failed:?}, {:.1}s", entries.len(), t.as_secs_f64()),
    )
}

fn logits(net: &Network, cloud: &PointCloud) -> Vec<f64> {
    let mut tape = Tape::new();
    let f = net.forward(&mut tape, std::slice::from_ref(cloud), false, &mut seeded(0), vec![seeded(1)]).unwrap();
    tape.value(f.output).data().to_vec()
}

fn permutation() -> Outcome {
    let mut c = NetworkConfig::classification(24, 2, 40);
    c.input_points = 256;
    c.neighborhood = NeighborhoodMethod::AllInRadius;
    c.aggregation = Reduction::Max;
    let net = build(&c, 0).unwrap();
    let mut rng = seeded(6);
    let mut worst: f64 = 0.0;
    for i in 0..20 {
        let fam = ShapeFamily::ALL[i % ShapeFamily::ALL.len()];
        let cloud = sample_shape(fam, 256, 0.01, 0, &mut rng).unwrap();
        let mut perm: Vec<usize> = (0..cloud.len()).collect();
        perm.shuffle(&mut rng);
        let shuffled = cloud.select(&perm);
        let (a, b) = (logits(&net, &cloud), logits(&net, &shuffled));
        worst = a.iter().zip(&b).map(|(x, y)| (x - y).abs()).fold(worst, f64::max);
    }
    outcome(worst <= PERM_TOL, format!("20 clouds, all-in-radius + max, max |Δlogit| {worst:.2e} (tol {PERM_TOL:.0e})"))
}

fn fps_oracle(coords: &[Point], count: usize, seed: usize) -> Vec<usize> {
    let mut picked = vec![seed];
    while picked.len() < count {
        let (mut best, mut best_d) = (0, -1.0);
        for i in 0..coords.len() {
            if picked.contains(&i) {
                continue;
            }
            let d = picked.iter().map(|&p| dist2(&coords[i], &coords[p])).fold(f64::INFINITY, f64::min);
            if d > best_d {
                best_d = d;
                best = i;
            }
        }
        picked.push(best);
    }
    picked
}

fn knn_oracle(coords: &[Point], c: usize, k: usize) -> Vec<usize> {
    let mut all: Vec<usize> = (0..coords.len()).collect();
    all.sort_by(|&a, &b| dist2(&coords[a], &coords[c]).total_cmp(&dist2(&coords[b], &coords[c])).then(a.cmp(&b)));
    all.truncate(k);
    all
}

fn oracles() -> Outcome {
    let mut rng = seeded(7);
    let (mut fps_bad, mut knn_bad) = (0, 0);
    for _ in 0..100 {
        let n = rng.random_range(1..=256);
        let pts: Vec<Point> = (0..n).map(|_| [0, 1, 2].map(|_| rng.random_range(-1.0..1.0))).collect();
        let count = rng.random_range(1..=n);
        let seed = rng.random_range(0..n);
        if farthest_point_sample(&pts, count, seed).unwrap() != fps_oracle(&pts, count, seed) {
            fps_bad += 1;
        }
        let k = rng.random_range(1..=n.min(64));
        let cents: Vec<usize> = (0..n).collect();
        let idx = knn_query(&pts, &cents, k).unwrap();
        if cents.iter().enumerate().any(|(o, &c)| idx.row(o) != knn_oracle(&pts, c, k)) {
            knn_bad += 1;
        }
    }
    outcome(fps_bad == 0 && knn_bad == 0, format!("100 clouds, N <= 256: FPS mismatches {fps_bad}, kNN mismatches {knn_bad}"))
}

fn desk_net(connectivity: Connectivity, seed: u64) -> Network {
    let mut c = NetworkConfig::classification(24, 2, 4);
    c.input_points = 256;
    c.connectivity = connectivity;
    build(&c, seed).unwrap()
}

fn test_accuracy(net: &Network, data: &densepoint::data::Dataset, seed: u64) -> f64 {
    let idx = data.indices(Split::Test);
    let ev = evaluate_voting(net, data, &idx, 1, &densepoint::geometry::AugmentParams::IDENTITY, seed, 16).unwrap();
    ev.metrics.accuracy.unwrap()
}

fn learning() -> Outcome {
    let data = make_synthetic(&SyntheticShapeSpec::default()).unwrap();

    // Time to target: dense k=24, evaluated after every epoch, stopped at the target.
    let mut net = desk_net(Connectivity::Dense, SEEDS[0]);
    let cfg = TrainConfig {
        epochs: MAX_EPOCHS,
        votes: 1,
        seed: SEEDS[0],
        eval_each_epoch: true,
        stop_at: Some(TARGET_ACC),
        ..TrainConfig::default()
    };
    let start = Instant::now();
    let logs = train(&mut net, &data, &cfg, &mut |l| eprintln!("  dense seed 0: {}", l.tsv())).unwrap();
    let elapsed = start.elapsed();
    let last = logs.last().unwrap();
    let best = logs.iter().filter_map(|l| l.test_acc).fold(0.0, f64::max);
    let reached = last.test_acc.is_some_and(|a| a >= TARGET_ACC);
    let target_ok = reached && elapsed <= LEARN_BUDGET;

    // Equal-budget comparison over seeds.
    let mean = |conn: Connectivity| -> (f64, Vec<f64>) {
        let accs: Vec<f64> = SEEDS
            .iter()
            .map(|&seed| {
                let mut net = desk_net(conn, seed);
                let cfg = TrainConfig {
                    epochs: COMPARE_EPOCHS,
                    votes: 1,
                    seed,
                    eval_each_epoch: false,
                    ..TrainConfig::default()
                };
                train(&mut net, &data, &cfg, &mut |_| {}).unwrap();
                let acc = test_accuracy(&net, &data, seed);
                eprintln!("  {} seed {seed}: test accuracy {acc:.4} after {COMPARE_EPOCHS} epochs", conn.name());
                acc
            })
            .collect();
        (accs.iter().sum::<f64>() / accs.len() as f64, accs)
    };
    let (dense, dense_all) = mean(Connectivity::Dense);
    let (layer, layer_all) = mean(Connectivity::LayerByLayer);
    outcome(
        target_ok && dense >= layer,
        format!(
            "dense reached {:.4} at epoch {} in {:.0}s (target {TARGET_ACC} within {MAX_EPOCHS} epochs and {}s; best {best:.4}); \
             {COMPARE_EPOCHS}-epoch mean over seeds {SEEDS:?}: dense {dense:.4} {dense_all:.3?} vs layer-by-layer {layer:.4} {layer_all:.3?}",
            last.test_acc.unwrap_or(f64::NAN),
            last.epoch,
            elapsed.as_secs_f64(),
            LEARN_BUDGET.as_secs()
        ),
    )
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(
        dir.path().join("run.ini"),
        "[network]\nk = 4\n[train]\nepochs = 2\nbatch_size = 4\nseed = 9\n[data]\nsynth_points = 64\ntrain_per_class = 6\ntest_per_class = 2\n",
    )
    .unwrap();
    let run = |out: &str| {
        let status = Command::new(env!("CARGO_BIN_EXE_densepoint"))
            .current_dir(dir.path())
            .args(["train", "--config", "run.ini", "--dir", out])
            .output()
            .unwrap()
            .status;
        assert!(status.success());
        std::fs::read(dir.path().join(out).join("model.ckpt")).unwrap()
    };
    let (a, b) = (run("a"), run("b"));
    outcome(a == b, format!("two train runs, same config and seed: {} bytes each, identical = {}", a.len(), a == b))
}

fn growth() -> Outcome {
    let mut rng: Rng = seeded(10);
    let mut bad = Vec::new();
    for t in 0..50 {
        let c0 = rng.random_range(1..=64);
        let k = rng.random_range(1..=32);
        let l = rng.random_range(0..=8);
        let mut store = ParamStore::new();
        let layers: Vec<StageLayer> = (0..l)
            .map(|i| {
                let ci = c0 + i * k;
                let ng = if ci % 2 == 0 && k % 2 == 0 { 2 } else { 1 };
                let name = format!("t{t}.epconv{i}");
                StageLayer {
                    conv: ConvLayer::EPConv(EPConvLayer::new(&mut store, &name, (ci, 4 * k, k), ng, 0.2, Reduction::Max, false, &mut rng).unwrap()),
                    name,
                    neighborhood: NeighborhoodSpec {
                        method: NeighborhoodMethod::Knn,
                        radius: 1.0,
                        neighbor_count: 4,
                        normalize: true,
                    },
                }
            })
            .collect();
        let pts: Vec<Vec<Point>> = (0..2).map(|_| (0..8).map(|_| [0, 1, 2].map(|_| rng.random_range(-1.0..1.0))).collect()).collect();
        let level = Level::new(pts).unwrap();
        let x = Tensor::from_fn(&[16, c0], |_| rng.random_range(-1.0..1.0));
        let mut tape = Tape::new();
        let mut drop = rng::derive(10, &[t]);
        let mut ctx = Ctx::new(&mut tape, &store, true, &mut drop, vec![seeded(1), seeded(2)]);
        let vx = ctx.tape.constant(x);
        let y = densepoint_block_forward(&mut ctx, &layers, &level, vx).unwrap();
        let width = ctx.tape.shape(y)[1];
        if width != c0 + l * k {
            bad.push((c0, k, l, width));
        }
    }
    outcome(bad.is_empty(), format!("50 (C0, k, L) triples, output channels = C0 + L*k, failures {bad:?}"))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 10] = [
        ("shape golden tables", shapes),
        ("parameter counts", params),
        ("FLOP ratios", flops),
        ("grouped weight count", grouping),
        ("gradient suite", gradients),
        ("permutation invariance", permutation),
        ("FPS and kNN oracles", oracles),
        ("desk-scale learning", learning),
        ("checkpoint determinism", determinism),
        ("dense growth law", growth),
    ];
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let o = run();
        if !o.pass {
            failed += 1;
        }
        println!("criterion {:>2} {} {name}: {}", i + 1, if o.pass { "PASS" } else { "FAIL" }, o.detail);
    }
    println!("acceptance: {} of {} criteria pass", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
