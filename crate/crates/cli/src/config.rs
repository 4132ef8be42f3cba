//! Run configuration: a schema of every key, an INI-style file reader, and
//! the merge of defaults, file values and flags.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use densepoint::data::{ShapeFamily, Split, SyntheticShapeSpec};
use densepoint::geometry::{AugmentParams, NeighborhoodMethod};
use densepoint::networks::{Connectivity, ConvKind, NetworkConfig, Task};
use densepoint::tensor::optim::AdamConfig;
use densepoint::tensor::Reduction;
use densepoint::training::TrainConfig;
use densepoint::Error;

pub struct Key {
    pub section: &'static str,
    pub name: &'static str,
    pub default: &'static str,
    pub help: &'static str,
}

impl Key {
    pub fn flag(&self) -> String {
        self.name.replace('_', "-")
    }
}

const fn key(section: &'static str, name: &'static str, default: &'static str, help: &'static str) -> Key {
    Key {
        section,
        name,
        default,
        help,
    }
}

/// Every configurable key. Flag names are the key names with dashes.
pub const SCHEMA: &[Key] = &[
    key("network", "task", "classification", "classification | segmentation | normal"),
    key("network", "k", "24", "narrowness (output channels of each dense layer)"),
    key("network", "groups", "2", "group count of the grouped transform"),
    key("network", "classes", "auto", "output classes; auto = from the dataset (count: task preset)"),
    key("network", "one_hot_dim", "auto", "object one-hot width for per-point tasks; auto = dataset class count"),
    key("network", "connectivity", "dense", "dense | layer | concat_end"),
    key("network", "conv", "epconv", "epconv | pconv"),
    key("network", "aggregation", "max", "max | sum | avg"),
    key("network", "neighborhood", "sphere", "sphere | knn | all"),
    key("network", "preactivation", "false", "BN-ReLU-SLP ordering inside composites"),
    key("network", "depth", "none", "classification depth preset L (6, 9, 11, 15, 19, 23)"),
    key("network", "points", "auto", "points per cloud; auto = dataset points (count: task preset)"),
    key("network", "baseline_width", "auto", "layer width of chained baselines; auto = dense-matched"),
    key("train", "epochs", "30", "training epochs"),
    key("train", "batch_size", "16", "clouds per batch"),
    key("train", "lr", "0.001", "Adam learning rate"),
    key("train", "beta1", "0.9", "Adam first-moment decay"),
    key("train", "beta2", "0.999", "Adam second-moment decay"),
    key("train", "adam_eps", "1e-8", "Adam epsilon"),
    key("train", "seed", "0", "seed for initialization, shuffling, augmentation and sampling"),
    key("train", "votes", "10", "test-time votes averaged per sample"),
    key("train", "scale_low", "0.66", "lower bound of the per-axis random scale"),
    key("train", "scale_high", "1.5", "upper bound of the per-axis random scale"),
    key("train", "translate", "0.2", "bound of the per-axis random shift"),
    key("train", "augment", "true", "apply scale and shift augmentation while training"),
    key("train", "eval_each_epoch", "true", "report single-pass test score after every epoch"),
    key("train", "stop_at", "none", "stop once the per-epoch test score reaches this value"),
    key("data", "source", "synthetic", "synthetic | xyz | cache"),
    key("data", "root", "data", "xyz directory (source xyz) or synth output directory"),
    key("data", "manifest", "manifest.tsv", "manifest path relative to root"),
    key("data", "cache", "data.bin", "binary dataset cache (source cache)"),
    key("data", "families", "sphere,box,torus,plane", "synthetic shape families"),
    key("data", "synth_points", "256", "points per synthetic cloud"),
    key("data", "train_per_class", "200", "synthetic training clouds per family"),
    key("data", "test_per_class", "80", "synthetic test clouds per family"),
    key("data", "jitter", "0.01", "synthetic Gaussian jitter"),
    key("data", "data_seed", "0", "synthetic dataset seed"),
    key("data", "split", "test", "split evaluated by eval"),
    key("output", "dir", "out", "output directory"),
    key("output", "checkpoint", "auto", "checkpoint path; auto = <dir>/model.ckpt"),
    key("output", "log", "auto", "epoch log path; auto = <dir>/train_log.tsv"),
];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Source {
    Default,
    File,
    Flag,
}

impl fmt::Display for Source {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Source::Default => "default",
            Source::File => "file",
            Source::Flag => "flag",
        })
    }
}

/// Merged string values with their provenance, keyed by key name.
#[derive(Clone, Debug)]
pub struct RawConfig {
    values: BTreeMap<&'static str, (String, Source)>,
}

fn config_error(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

fn lookup(section: &str, name: &str) -> Option<&'static Key> {
    SCHEMA.iter().find(|k| k.section == section && k.name == name)
}

impl RawConfig {
    pub fn defaults() -> Self {
        Self {
            values: SCHEMA.iter().map(|k| (k.name, (k.default.to_string(), Source::Default))).collect(),
        }
    }

    /// Reads `[section]` / `key = value` text; unknown sections or keys are
    /// errors.
    pub fn apply_file(&mut self, path: &Path) -> Result<(), Error> {
        let ini = ini::Ini::load_from_file(path).map_err(|e| config_error(format!("{}: {e}", path.display())))?;
        for (section, props) in ini.iter() {
            let Some(section) = section else {
                if let Some((k, _)) = props.iter().next() {
                    return Err(config_error(format!("{}: key `{k}` outside any section", path.display())));
                }
                continue;
            };
            for (k, v) in props.iter() {
                let key = lookup(section, k)
                    .ok_or_else(|| config_error(format!("{}: unknown key `{section}.{k}`", path.display())))?;
                self.values.insert(key.name, (v.trim().to_string(), Source::File));
            }
        }
        Ok(())
    }

    pub fn set_flag(&mut self, name: &str, value: String) -> Result<(), Error> {
        let key = SCHEMA
            .iter()
            .find(|k| k.name == name)
            .ok_or_else(|| config_error(format!("unknown key `{name}`")))?;
        self.values.insert(key.name, (value, Source::Flag));
        Ok(())
    }

    pub fn get(&self, name: &str) -> &str {
        &self.values.get(name).unwrap_or_else(|| panic!("`{name}` is not in the schema")).0
    }

    fn parse<T: std::str::FromStr>(&self, name: &str) -> Result<T, Error>
    where
        T::Err: fmt::Display,
    {
        self.get(name)
            .parse()
            .map_err(|e| config_error(format!("invalid value `{}` for `{name}`: {e}", self.get(name))))
    }

    fn parse_auto<T: std::str::FromStr>(&self, name: &str) -> Result<Option<T>, Error>
    where
        T::Err: fmt::Display,
    {
        match self.get(name) {
            "auto" | "none" => Ok(None),
            _ => self.parse(name).map(Some),
        }
    }

    /// One `section.key = value  (source)` line per key.
    pub fn describe(&self) -> String {
        let mut out = String::new();
        for k in SCHEMA {
            let (v, src) = &self.values[k.name];
            out.push_str(&format!("# {}.{} = {v}  ({src})\n", k.section, k.name));
        }
        out
    }

    pub fn resolve(&self) -> Result<RunConfig, Error> {
        let task: Task = self.parse("task")?;
        if task == Task::Custom {
            return Err(config_error("the custom task is available through the library only"));
        }
        let families = self
            .get("families")
            .split(',')
            .map(|s| s.trim().parse::<ShapeFamily>())
            .collect::<Result<Vec<_>, _>>()?;
        let source = match self.get("source") {
            s @ ("synthetic" | "xyz" | "cache") => s.to_string(),
            other => return Err(config_error(format!("unknown data source `{other}` (synthetic|xyz|cache)"))),
        };
        let dir = PathBuf::from(self.get("dir"));
        let checkpoint = self.parse_auto::<PathBuf>("checkpoint")?.unwrap_or_else(|| dir.join("model.ckpt"));
        let log = self.parse_auto::<PathBuf>("log")?.unwrap_or_else(|| dir.join("train_log.tsv"));
        let cfg = RunConfig {
            task,
            k: self.parse("k")?,
            groups: self.parse("groups")?,
            classes: self.parse_auto("classes")?,
            one_hot_dim: self.parse_auto("one_hot_dim")?,
            connectivity: self.parse("connectivity")?,
            conv: self.parse("conv")?,
            aggregation: self.parse("aggregation")?,
            neighborhood: self.parse("neighborhood")?,
            preactivation: self.parse("preactivation")?,
            depth: self.parse_auto("depth")?,
            points: self.parse_auto("points")?,
            baseline_width: self.parse_auto("baseline_width")?,
            train: TrainConfig {
                epochs: self.parse("epochs")?,
                batch_size: self.parse("batch_size")?,
                adam: AdamConfig {
                    lr: self.parse("lr")?,
                    beta1: self.parse("beta1")?,
                    beta2: self.parse("beta2")?,
                    eps: self.parse("adam_eps")?,
                },
                augment: AugmentParams {
                    scale_low: self.parse("scale_low")?,
                    scale_high: self.parse("scale_high")?,
                    translate: self.parse("translate")?,
                },
                augment_enabled: self.parse("augment")?,
                seed: self.parse("seed")?,
                votes: self.parse("votes")?,
                eval_each_epoch: self.parse("eval_each_epoch")?,
                stop_at: self.parse_auto("stop_at")?,
            },
            source,
            root: PathBuf::from(self.get("root")),
            manifest: PathBuf::from(self.get("manifest")),
            cache: PathBuf::from(self.get("cache")),
            synthetic: SyntheticShapeSpec {
                families,
                points: self.parse("synth_points")?,
                jitter: self.parse("jitter")?,
                train_per_class: self.parse("train_per_class")?,
                test_per_class: self.parse("test_per_class")?,
                seed: self.parse("data_seed")?,
            },
            split: self.parse("split")?,
            dir,
            checkpoint,
            log,
        };
        cfg.train.validate()?;
        Ok(cfg)
    }
}

#[derive(Clone, Debug)]
pub struct RunConfig {
    pub task: Task,
    pub k: usize,
    pub groups: usize,
    pub classes: Option<usize>,
    pub one_hot_dim: Option<usize>,
    pub connectivity: Connectivity,
    pub conv: ConvKind,
    pub aggregation: Reduction,
    pub neighborhood: NeighborhoodMethod,
    pub preactivation: bool,
    pub depth: Option<usize>,
    pub points: Option<usize>,
    pub baseline_width: Option<usize>,
    pub train: TrainConfig,
    pub source: String,
    pub root: PathBuf,
    pub manifest: PathBuf,
    pub cache: PathBuf,
    pub synthetic: SyntheticShapeSpec,
    pub split: Split,
    pub dir: PathBuf,
    pub checkpoint: PathBuf,
    pub log: PathBuf,
}

/// What the dataset fixes about the network.
#[derive(Clone, Copy, Debug, Default)]
pub struct DataShape {
    pub object_classes: usize,
    pub part_labels: usize,
    pub points: usize,
}

impl RunConfig {
    /// Network configuration; `data` fills the `auto` values, otherwise the
    /// task presets do.
    pub fn network(&self, data: Option<DataShape>) -> Result<NetworkConfig, Error> {
        let classes = match (self.classes, data) {
            (Some(c), _) => c,
            (None, Some(d)) => match self.task {
                Task::Classification | Task::Custom => d.object_classes,
                Task::PartSegmentation => d.part_labels,
                Task::NormalEstimation => 3,
            },
            (None, None) => match self.task {
                Task::Classification | Task::Custom => 40,
                Task::PartSegmentation => 50,
                Task::NormalEstimation => 3,
            },
        };
        let one_hot = self
            .one_hot_dim
            .unwrap_or_else(|| data.map_or(if self.task == Task::PartSegmentation { 16 } else { 40 }, |d| d.object_classes));
        let mut c = match (self.task, self.depth) {
            (Task::Classification, Some(l)) => {
                let mut c = NetworkConfig::depth_preset(l)?;
                c.k = self.k;
                c.groups = self.groups;
                c.classes = classes;
                c
            }
            (_, Some(_)) => return Err(config_error("depth presets exist for classification only")),
            (Task::Classification | Task::Custom, None) => NetworkConfig::classification(self.k, self.groups, classes),
            (Task::PartSegmentation, None) => NetworkConfig::segmentation(self.k, self.groups, classes, one_hot),
            (Task::NormalEstimation, None) => NetworkConfig::normal_estimation(self.k, self.groups, one_hot),
        };
        c.connectivity = self.connectivity;
        c.conv = self.conv;
        c.aggregation = self.aggregation;
        c.neighborhood = self.neighborhood;
        c.preactivation = self.preactivation;
        c.baseline_width = self.baseline_width;
        if let Some(p) = self.points.or(data.map(|d| d.points)) {
            c.input_points = p;
        }
        c.validate()?;
        Ok(c)
    }
}
