use std::fs;
use std::path::Path;
use std::time::Instant;

use densepoint::data::{self, Dataset, Split};
use densepoint::gradcheck::suite;
use densepoint::networks::{build, count_params, shape_table_tsv, Network, NetworkConfig, Task};
use densepoint::rng;
use densepoint::tensor::{checkpoint, OpKind, Tape};
use densepoint::training::{self, EpochLog, Objective};
use densepoint::{Error, Result};

use crate::config::{DataShape, RunConfig};

fn err(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

pub fn parse_list(s: &str) -> Result<Vec<usize>> {
    s.split(',')
        .map(|v| v.trim().parse().map_err(|_| err(format!("invalid list element `{v}` in `{s}`"))))
        .collect()
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, text)?;
    Ok(())
}

pub fn count(cfg: &RunConfig, sweep: Option<&str>) -> Result<()> {
    let Some(sweep) = sweep else {
        let net = build(&cfg.network(None)?, cfg.train.seed)?;
        let report = count_params(&net)?;
        print!("{report}");
        write(&cfg.dir.join("cost.tsv"), &report.to_tsv())?;
        write(&cfg.dir.join("shapes.tsv"), &shape_table_tsv(&net.shape_table()?))?;
        return Ok(());
    };
    let (var, values) = sweep
        .split_once('=')
        .ok_or_else(|| err(format!("sweep `{sweep}` must look like ng=1,2,4")))?;
    let values = parse_list(values)?;
    let mut out = format!("{var}\tparams\tparams_M\tflops\tflops_M\n");
    for &v in &values {
        let mut c = cfg.clone();
        match var {
            "ng" | "groups" => c.groups = v,
            "k" => c.k = v,
            "depth" | "L" => c.depth = Some(v),
            other => return Err(err(format!("unknown sweep variable `{other}` (ng|k|depth)"))),
        }
        let report = count_params(&build(&c.network(None)?, cfg.train.seed)?)?;
        out.push_str(&format!(
            "{v}\t{}\t{:.2}\t{}\t{:.0}\n",
            report.total_params(),
            report.total_params() as f64 / 1e6,
            report.total_flops(),
            report.total_flops() as f64 / 1e6
        ));
    }
    print!("{out}");
    write(&cfg.dir.join(format!("sweep_{var}.tsv")), &out)
}

pub fn load_dataset(cfg: &RunConfig) -> Result<Dataset> {
    let mut d = match cfg.source.as_str() {
        "synthetic" => data::make_synthetic(&cfg.synthetic)?,
        "xyz" => {
            let manifest = cfg.root.join(&cfg.manifest);
            if !manifest.is_file() {
                return Err(err(format!("dataset missing: no manifest at {}", manifest.display())));
            }
            data::load_xyz_dir(&cfg.root, &manifest, cfg.points.unwrap_or(1024), cfg.synthetic.seed)?
        }
        "cache" => {
            if !cfg.cache.is_file() {
                return Err(err(format!("dataset missing: no cache at {}", cfg.cache.display())));
            }
            data::load_cache(&cfg.cache)?
        }
        other => return Err(err(format!("unknown data source `{other}`"))),
    };
    d.task = cfg.task;
    d.validate()?;
    Ok(d)
}

fn data_shape(d: &Dataset) -> DataShape {
    DataShape {
        object_classes: d.class_names.len(),
        part_labels: d.num_part_labels(),
        points: d.samples.first().map_or(0, |s| s.len()),
    }
}

fn network_for(cfg: &RunConfig, d: &Dataset) -> Result<NetworkConfig> {
    let net = cfg.network(Some(data_shape(d)))?;
    if net.task == Task::PartSegmentation && d.num_part_labels() > net.classes {
        return Err(err(format!("dataset has {} part labels but the network has {} outputs", d.num_part_labels(), net.classes)));
    }
    Ok(net)
}

pub fn train(cfg: &RunConfig) -> Result<()> {
    let d = load_dataset(cfg)?;
    let mut net = build(&network_for(cfg, &d)?, cfg.train.seed)?;
    fs::create_dir_all(&cfg.dir)?;
    let mut log = format!("{}\n", EpochLog::HEADER);
    println!("{}", EpochLog::HEADER);
    let mut io_err = None;
    training::train(&mut net, &d, &cfg.train, &mut |l| {
        println!("{}", l.tsv());
        log.push_str(&l.tsv());
        log.push('\n');
        if let Err(e) = write(&cfg.log, &log) {
            io_err.get_or_insert(e);
        }
    })?;
    if let Some(e) = io_err {
        return Err(e);
    }
    write(&cfg.log, &log)?;
    if let Some(dir) = cfg.checkpoint.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    checkpoint::save(&net.store, &cfg.checkpoint)?;
    eprintln!("wrote {} and {}", cfg.checkpoint.display(), cfg.log.display());
    Ok(())
}

pub fn eval(cfg: &RunConfig, dump: Option<&Path>) -> Result<()> {
    let d = load_dataset(cfg)?;
    let mut net: Network = build(&network_for(cfg, &d)?, cfg.train.seed)?;
    checkpoint::load(&mut net.store, &cfg.checkpoint)?;
    let idx = d.indices(cfg.split);
    if idx.is_empty() {
        return Err(err(format!("the {} split is empty", cfg.split.name())));
    }
    let ev = training::evaluate_voting(
        &net,
        &d,
        &idx,
        cfg.train.votes,
        &cfg.train.vote_scaling(),
        cfg.train.seed,
        cfg.train.batch_size,
    )?;
    print!("{}", ev.metrics.to_tsv());
    if let Some(path) = dump {
        let classify = Objective::of(&net) == Objective::Classify;
        let mut out = String::from(if classify { "id\tlabel\tpred\tmax_prob\n" } else { "id\tlabel\tpred\tscore\n" });
        for p in &ev.predictions {
            let label = p.label.map_or("-".to_string(), |l| l.to_string());
            let pred = p.pred.map_or("-".to_string(), |l| l.to_string());
            out.push_str(&format!("{}\t{label}\t{pred}\t{:.6}\n", p.id, p.score));
        }
        write(path, &out)?;
    }
    Ok(())
}

pub fn gradcheck(fault: Option<&str>) -> Result<()> {
    let fault = match fault {
        None => None,
        Some(name) => Some(
            OpKind::ALL
                .into_iter()
                .find(|k| k.name() == name)
                .ok_or_else(|| err(format!("unknown op `{name}`")))?,
        ),
    };
    let entries = suite::run_suite(fault)?;
    print!("{}", suite::to_tsv(&entries));
    let failed: Vec<&str> = entries.iter().filter(|e| !e.passes()).map(|e| e.name.as_str()).collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(err(format!("gradient check failed for {}", failed.join(", "))))
    }
}

pub const BENCH_HEADER: &str = "preset\tmode\tbatch\tpoints\tmedian_ms\tmin_ms\tmax_ms";

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

pub fn bench(cfg: &RunConfig, presets: &[usize], warmup: usize, reps: usize, batch: usize) -> Result<()> {
    if reps == 0 || batch < 2 {
        return Err(err("bench needs at least one rep and a batch of two"));
    }
    let points = cfg.points.unwrap_or(1024);
    println!("{BENCH_HEADER}");
    let mut out = format!("{BENCH_HEADER}\n");
    for &l in presets {
        let mut c = cfg.clone();
        c.depth = Some(l);
        c.points = Some(points);
        let net = build(&c.network(None)?, cfg.train.seed)?;
        let clouds: Vec<_> = (0..batch)
            .map(|i| {
                let fam = data::ShapeFamily::ALL[i % 4];
                data::sample_shape(fam, points, 0.01, i % 4, &mut rng::derive(cfg.train.seed, &[0xB0, i as u64]))
            })
            .collect::<Result<_>>()?;
        let labels: Vec<usize> = clouds.iter().map(|c| c.label.unwrap_or(0) % net.config.classes).collect();
        for mode in ["forward", "forward_backward"] {
            let mut times = Vec::with_capacity(reps);
            let mut store = net.store.clone();
            for rep in 0..warmup + reps {
                let geo = (0..batch as u64).map(|b| rng::derive(cfg.train.seed, &[rep as u64, b])).collect();
                let start = Instant::now();
                let mut tape = Tape::new();
                let f = net.forward(&mut tape, &clouds, true, &mut rng::seeded(rep as u64), geo)?;
                if mode == "forward_backward" {
                    let loss = tape.softmax_cross_entropy(f.output, &labels)?;
                    tape.backward_into(loss, &mut store)?;
                }
                let ms = start.elapsed().as_secs_f64() * 1e3;
                if rep >= warmup {
                    times.push(ms);
                }
            }
            let (lo, hi) = times.iter().fold((f64::INFINITY, 0.0f64), |(a, b), &t| (a.min(t), b.max(t)));
            let med = median(&mut times);
            let line = format!("{l}\t{mode}\t{batch}\t{points}\t{med:.3}\t{lo:.3}\t{hi:.3}");
            println!("{line}");
            out.push_str(&line);
            out.push('\n');
        }
    }
    write(&cfg.dir.join("bench.tsv"), &out)
}

pub fn synth(cfg: &RunConfig, format: &str) -> Result<()> {
    let d = data::make_synthetic(&cfg.synthetic)?;
    match format {
        "xyz" => {
            fs::create_dir_all(&cfg.root)?;
            let manifest = data::save_xyz_dir(&d, &cfg.root)?;
            eprintln!("wrote {} clouds and {}", d.samples.len(), manifest.display());
        }
        "cache" => {
            if let Some(dir) = cfg.cache.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(dir)?;
            }
            data::save_cache(&d, &cfg.cache)?;
            eprintln!("wrote {} clouds to {}", d.samples.len(), cfg.cache.display());
        }
        other => return Err(err(format!("unknown synth format `{other}` (xyz|cache)"))),
    }
    let counts = [Split::Train, Split::Test].map(|s| d.indices(s).len());
    println!("train\t{}\ntest\t{}", counts[0], counts[1]);
    Ok(())
}
