//! Datasets, synthetic shapes and label encodings.
//!
//! On disk a dataset is a directory of plain-text point files plus a
//! tab-separated manifest (`relative_path, label_name, split`). A manifest
//! may start with a `# classes` line listing the class names in order.

use std::collections::BTreeSet;
use std::f64::consts::TAU;
use std::fmt::Write as _;
use std::fs;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{config_err, Error, Result};
use crate::geometry::{is_unit_normalized, normalize_unit_sphere, Point, PointCloud};
use crate::networks::Task;
use crate::rng::{self, Rng};
use crate::tensor::checkpoint::{read_tensors, write_tensors};
use crate::tensor::Tensor;

/// Loaded clouds count as normalized when already within this tolerance.
pub const NORMALIZED_TOL: f64 = 1e-9;

/// Standard basis vector `e_label` of length `dim`.
pub fn one_hot(label: usize, dim: usize) -> Result<Tensor> {
    if label >= dim {
        return Err(Error::Index(format!("label {label} out of range for one-hot width {dim}")));
    }
    Ok(Tensor::from_fn(&[dim], |i| if i == label { 1.0 } else { 0.0 }))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

impl FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            _ => config_err(format!("unknown split {s:?} (train|test)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub samples: Vec<PointCloud>,
    pub class_names: Vec<String>,
    /// Split of each sample.
    pub splits: Vec<Split>,
    pub task: Task,
}

impl Dataset {
    pub fn validate(&self) -> Result<()> {
        if self.samples.len() != self.splits.len() {
            return config_err("every sample needs exactly one split");
        }
        for (i, s) in self.samples.iter().enumerate() {
            if let Some(l) = s.label {
                if l >= self.class_names.len() {
                    return Err(Error::Index(format!("sample {i} has label {l} of {} classes", self.class_names.len())));
                }
            }
        }
        Ok(())
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.samples.len()).filter(|&i| self.splits[i] == split).collect()
    }

    /// One more than the largest part label.
    pub fn num_part_labels(&self) -> usize {
        self.samples
            .iter()
            .filter_map(|s| s.point_labels.as_ref())
            .flat_map(|l| l.iter().copied())
            .max()
            .map_or(0, |m| m + 1)
    }

    /// Part labels observed for each object class, sorted.
    pub fn part_sets(&self) -> Vec<Vec<usize>> {
        let mut sets = vec![BTreeSet::new(); self.class_names.len()];
        for s in &self.samples {
            if let (Some(c), Some(parts)) = (s.label, &s.point_labels) {
                sets[c].extend(parts.iter().copied());
            }
        }
        sets.into_iter().map(|s| s.into_iter().collect()).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ShapeFamily {
    Sphere,
    Box,
    Torus,
    Plane,
}

impl ShapeFamily {
    pub const ALL: [ShapeFamily; 4] = [ShapeFamily::Sphere, ShapeFamily::Box, ShapeFamily::Torus, ShapeFamily::Plane];

    pub fn name(self) -> &'static str {
        match self {
            ShapeFamily::Sphere => "sphere",
            ShapeFamily::Box => "box",
            ShapeFamily::Torus => "torus",
            ShapeFamily::Plane => "plane",
        }
    }

    /// Part labels are global across families: sphere 0-1, box 2-4,
    /// torus 5-6, plane 7-8.
    pub fn parts(self) -> std::ops::Range<usize> {
        match self {
            ShapeFamily::Sphere => 0..2,
            ShapeFamily::Box => 2..5,
            ShapeFamily::Torus => 5..7,
            ShapeFamily::Plane => 7..9,
        }
    }
}

impl FromStr for ShapeFamily {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|f| f.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown shape family {s:?} (sphere|box|torus|plane)")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticShapeSpec {
    pub families: Vec<ShapeFamily>,
    pub points: usize,
    /// Standard deviation of the Gaussian coordinate jitter.
    pub jitter: f64,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub seed: u64,
}

impl Default for SyntheticShapeSpec {
    fn default() -> Self {
        Self {
            families: ShapeFamily::ALL.to_vec(),
            points: 256,
            jitter: 0.01,
            train_per_class: 200,
            test_per_class: 80,
            seed: 0,
        }
    }
}

impl SyntheticShapeSpec {
    pub fn validate(&self) -> Result<()> {
        if self.points < 64 {
            return config_err(format!("synthetic samples need at least 64 points, got {}", self.points));
        }
        if !(self.jitter >= 0.0 && self.jitter.is_finite()) {
            return config_err("jitter must be finite and non-negative");
        }
        if self.families.is_empty() {
            return config_err("at least one shape family is required");
        }
        for (i, f) in self.families.iter().enumerate() {
            if self.families[..i].contains(f) {
                return config_err(format!("shape family {} listed twice", f.name()));
            }
        }
        Ok(())
    }
}

fn rotate_z(p: Point, c: f64, s: f64) -> Point {
    [c * p[0] - s * p[1], s * p[0] + c * p[1], p[2]]
}

/// Points, analytic normals and part labels on one random instance of
/// `family`, before jitter. Instances vary in proportions and in their
/// rotation about the z axis.
pub fn sample_surface(family: ShapeFamily, n: usize, rng: &mut Rng) -> (Vec<Point>, Vec<Point>, Vec<usize>) {
    let mut pts = Vec::with_capacity(n);
    let mut normals = Vec::with_capacity(n);
    let mut parts = Vec::with_capacity(n);
    let base = family.parts().start;
    match family {
        ShapeFamily::Sphere => {
            while pts.len() < n {
                let v: [f64; 3] = [0, 1, 2].map(|_| StandardNormal.sample(rng));
                let len = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
                if len < 1e-12 {
                    continue;
                }
                let p = v.map(|x| x / len);
                pts.push(p);
                normals.push(p);
                parts.push(base + usize::from(p[2] < 0.0));
            }
        }
        ShapeFamily::Box => {
            let a: [f64; 3] = [0, 1, 2].map(|_| rng.random_range(0.5..1.0));
            let areas = [a[1] * a[2], a[0] * a[2], a[0] * a[1]];
            let total: f64 = areas.iter().sum();
            for _ in 0..n {
                let mut u = rng.random_range(0.0..total);
                let mut axis = 2;
                for (k, &ar) in areas.iter().enumerate() {
                    if u < ar {
                        axis = k;
                        break;
                    }
                    u -= ar;
                }
                let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
                let mut p = [0.0; 3];
                for k in 0..3 {
                    p[k] = if k == axis { sign * a[k] } else { rng.random_range(-a[k]..a[k]) };
                }
                let mut nrm = [0.0; 3];
                nrm[axis] = sign;
                pts.push(p);
                normals.push(nrm);
                parts.push(base + axis);
            }
        }
        ShapeFamily::Torus => {
            let big = 0.7;
            let small = rng.random_range(0.2..0.35);
            while pts.len() < n {
                let theta = rng.random_range(0.0..TAU);
                let phi = rng.random_range(0.0..TAU);
                // Area element is proportional to R + r cos φ.
                if rng.random_range(0.0..big + small) > big + small * phi.cos() {
                    continue;
                }
                let ring = big + small * phi.cos();
                pts.push([ring * theta.cos(), ring * theta.sin(), small * phi.sin()]);
                normals.push([phi.cos() * theta.cos(), phi.cos() * theta.sin(), phi.sin()]);
                parts.push(base + usize::from(phi.cos() < 0.0));
            }
        }
        ShapeFamily::Plane => {
            let (a, b) = (rng.random_range(0.6..1.0), rng.random_range(0.6..1.0));
            for _ in 0..n {
                let p = [rng.random_range(-a..a), rng.random_range(-b..b), 0.0];
                pts.push(p);
                normals.push([0.0, 0.0, 1.0]);
                parts.push(base + usize::from(p[0] >= 0.0));
            }
        }
    }
    let angle = rng.random_range(0.0..TAU);
    let (s, c) = angle.sin_cos();
    for p in pts.iter_mut().chain(normals.iter_mut()) {
        *p = rotate_z(*p, c, s);
    }
    (pts, normals, parts)
}

/// Jitter vectors are Gaussian with their length clipped at this many σ.
pub const JITTER_CLIP: f64 = 3.0;

/// A jittered instance with normals, part labels and object label `label`.
/// Coordinates are not normalized.
pub fn sample_shape(family: ShapeFamily, n: usize, jitter: f64, label: usize, rng: &mut Rng) -> Result<PointCloud> {
    let (mut pts, normals, parts) = sample_surface(family, n, rng);
    if jitter > 0.0 {
        for p in &mut pts {
            let z: [f64; 3] = [0, 1, 2].map(|_| StandardNormal.sample(rng));
            let len = (z[0] * z[0] + z[1] * z[1] + z[2] * z[2]).sqrt();
            let clip = if len > JITTER_CLIP { JITTER_CLIP / len } else { 1.0 };
            for k in 0..3 {
                p[k] += jitter * clip * z[k];
            }
        }
    }
    let mut cloud = PointCloud::new(pts)?;
    cloud.normals = Some(normals);
    cloud.point_labels = Some(parts);
    cloud.label = Some(label);
    Ok(cloud)
}

/// Generates `train_per_class + test_per_class` unit-normalized samples per
/// family; class `i` is `spec.families[i]`.
pub fn make_synthetic(spec: &SyntheticShapeSpec) -> Result<Dataset> {
    spec.validate()?;
    let per_class = spec.train_per_class + spec.test_per_class;
    let mut samples = Vec::with_capacity(per_class * spec.families.len());
    let mut splits = Vec::with_capacity(samples.capacity());
    for (c, &family) in spec.families.iter().enumerate() {
        for i in 0..per_class {
            let mut r = rng::derive(spec.seed, &[family as u64, i as u64]);
            let mut cloud = sample_shape(family, spec.points, spec.jitter, c, &mut r)?;
            normalize_unit_sphere(&mut cloud.coords);
            samples.push(cloud);
            splits.push(if i < spec.train_per_class { Split::Train } else { Split::Test });
        }
    }
    Ok(Dataset {
        samples,
        class_names: spec.families.iter().map(|f| f.name().to_string()).collect(),
        splits,
        task: Task::Classification,
    })
}

fn parse_err(path: &Path, line: usize, detail: impl Into<String>) -> Error {
    Error::Parse {
        what: "point file",
        location: format!("{}:{line}", path.display()),
        detail: detail.into(),
    }
}

/// Reads `x y z[ nx ny nz][ part]` lines; blank lines and `#` comments are skipped.
pub fn read_xyz(path: &Path) -> Result<PointCloud> {
    let text = fs::read_to_string(path)?;
    let mut pts = Vec::new();
    let mut normals = Vec::new();
    let mut parts = Vec::new();
    let mut layout = None;
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        let n = fields.len();
        if !matches!(n, 3 | 4 | 6 | 7) {
            return Err(parse_err(path, i + 1, format!("expected 3, 4, 6 or 7 fields, found {n}")));
        }
        if *layout.get_or_insert(n) != n {
            return Err(parse_err(path, i + 1, "field count differs from earlier lines"));
        }
        let num = |j: usize| -> Result<f64> {
            let v: f64 = fields[j].parse().map_err(|_| parse_err(path, i + 1, format!("bad number {:?}", fields[j])))?;
            if v.is_finite() {
                Ok(v)
            } else {
                Err(parse_err(path, i + 1, "non-finite value"))
            }
        };
        pts.push([num(0)?, num(1)?, num(2)?]);
        if n >= 6 {
            normals.push([num(3)?, num(4)?, num(5)?]);
        }
        if n == 4 || n == 7 {
            let p = fields[n - 1];
            parts.push(p.parse().map_err(|_| parse_err(path, i + 1, format!("bad part label {p:?}")))?);
        }
    }
    if pts.is_empty() {
        return Err(parse_err(path, 0, "no points"));
    }
    let mut cloud = PointCloud::new(pts)?;
    cloud.normals = (!normals.is_empty()).then_some(normals);
    cloud.point_labels = (!parts.is_empty()).then_some(parts);
    Ok(cloud)
}

pub fn write_xyz(cloud: &PointCloud, path: &Path) -> Result<()> {
    let mut out = String::new();
    for i in 0..cloud.len() {
        let p = cloud.coords[i];
        write!(out, "{} {} {}", p[0], p[1], p[2]).expect("writing to a String");
        if let Some(n) = &cloud.normals {
            write!(out, " {} {} {}", n[i][0], n[i][1], n[i][2]).expect("writing to a String");
        }
        if let Some(l) = &cloud.point_labels {
            write!(out, " {}", l[i]).expect("writing to a String");
        }
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

/// Exactly `n` points: the cloud itself when it already has `n`, a random
/// subset when larger, and all points plus random repeats when smaller.
pub fn resample(cloud: &PointCloud, n: usize, rng: &mut Rng) -> PointCloud {
    let m = cloud.len();
    if m == n {
        return cloud.clone();
    }
    let idx: Vec<usize> = if m > n {
        let mut all: Vec<usize> = (0..m).collect();
        for i in 0..n {
            let j = rng.random_range(i..m);
            all.swap(i, j);
        }
        all.truncate(n);
        all
    } else {
        (0..m).chain((m..n).map(|_| rng.random_range(0..m))).collect()
    };
    cloud.select(&idx)
}

fn manifest_err(path: &Path, line: usize, detail: impl Into<String>) -> Error {
    Error::Parse {
        what: "manifest",
        location: format!("{}:{line}", path.display()),
        detail: detail.into(),
    }
}

/// Loads every manifest entry (paths relative to `root`), normalizes each
/// cloud to the unit sphere unless it already is, and resamples to `points`.
pub fn load_xyz_dir(root: &Path, manifest: &Path, points: usize, seed: u64) -> Result<Dataset> {
    if points == 0 {
        return config_err("points per sample must be positive");
    }
    let text = fs::read_to_string(manifest)?;
    let mut class_names: Vec<String> = Vec::new();
    let mut fixed_classes = false;
    let mut samples = Vec::new();
    let mut splits = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let fields: Vec<&str> = line.split('\t').collect();
        if line.trim().is_empty() {
            continue;
        }
        if let Some(rest) = fields[0].strip_prefix('#') {
            if rest.trim() == "classes" {
                class_names = fields[1..].iter().map(|s| s.to_string()).collect();
                fixed_classes = true;
            }
            continue;
        }
        if fields.len() != 3 {
            return Err(manifest_err(manifest, i + 1, format!("expected 3 tab-separated fields, found {}", fields.len())));
        }
        let label = match class_names.iter().position(|c| c == fields[1]) {
            Some(l) => l,
            None if fixed_classes => return Err(manifest_err(manifest, i + 1, format!("unknown label {:?}", fields[1]))),
            None => {
                class_names.push(fields[1].to_string());
                class_names.len() - 1
            }
        };
        let split: Split = fields[2].parse().map_err(|_| manifest_err(manifest, i + 1, format!("unknown split {:?}", fields[2])))?;
        let mut cloud = read_xyz(&root.join(fields[0]))?;
        if !is_unit_normalized(&cloud.coords, NORMALIZED_TOL) {
            normalize_unit_sphere(&mut cloud.coords);
        }
        let mut r = rng::derive(seed, &[samples.len() as u64]);
        let mut cloud = resample(&cloud, points, &mut r);
        cloud.label = Some(label);
        samples.push(cloud);
        splits.push(split);
    }
    let data = Dataset {
        samples,
        class_names,
        splits,
        task: Task::Classification,
    };
    data.validate()?;
    Ok(data)
}

/// Writes one point file per sample and `manifest.tsv` into `root`; returns
/// the manifest path.
pub fn save_xyz_dir(data: &Dataset, root: &Path) -> Result<PathBuf> {
    data.validate()?;
    fs::create_dir_all(root)?;
    let mut manifest = String::from("# classes");
    for c in &data.class_names {
        manifest.push('\t');
        manifest.push_str(c);
    }
    manifest.push('\n');
    for (i, (cloud, split)) in data.samples.iter().zip(&data.splits).enumerate() {
        let label = cloud
            .label
            .ok_or_else(|| Error::Config(format!("sample {i} has no label")))?;
        let name = format!("{i:05}.xyz");
        write_xyz(cloud, &root.join(&name))?;
        writeln!(manifest, "{name}\t{}\t{}", data.class_names[label], split.name()).expect("writing to a String");
    }
    let path = root.join("manifest.tsv");
    fs::write(&path, manifest)?;
    Ok(path)
}

/// Binary cache in the checkpoint container layout. Values are stored as
/// f32, so coordinates come back quantized.
pub fn save_cache(data: &Dataset, path: &Path) -> Result<()> {
    data.validate()?;
    let mut entries: Vec<(String, Tensor)> = vec![(format!("task.{}", data.task.name()), Tensor::scalar(0.0))];
    for (i, c) in data.class_names.iter().enumerate() {
        entries.push((format!("class.{i}.{c}"), Tensor::scalar(0.0)));
    }
    let flat = |pts: &[Point]| Tensor::new(vec![pts.len(), 3], pts.iter().flatten().copied().collect());
    for (i, (s, split)) in data.samples.iter().zip(&data.splits).enumerate() {
        let label = s.label.map_or(-1.0, |l| l as f64);
        let split = if *split == Split::Train { 0.0 } else { 1.0 };
        entries.push((format!("sample.{i}.meta"), Tensor::new(vec![2], vec![label, split])?));
        entries.push((format!("sample.{i}.coords"), flat(&s.coords)?));
        if let Some(n) = &s.normals {
            entries.push((format!("sample.{i}.normals"), flat(n)?));
        }
        if let Some(l) = &s.point_labels {
            entries.push((format!("sample.{i}.parts"), Tensor::new(vec![l.len()], l.iter().map(|&v| v as f64).collect())?));
        }
    }
    let w = BufWriter::new(fs::File::create(path)?);
    write_tensors(w, entries.iter().map(|(n, t)| (n.as_str(), t)))
}

pub fn load_cache(path: &Path) -> Result<Dataset> {
    let entries = read_tensors(BufReader::new(fs::File::open(path)?))?;
    let bad = |detail: String| Error::Parse {
        what: "dataset cache",
        location: path.display().to_string(),
        detail,
    };
    let mut task = Task::Classification;
    let mut class_names = Vec::new();
    let mut samples: Vec<PointCloud> = Vec::new();
    let mut splits = Vec::new();
    let points = |t: &Tensor| -> Vec<Point> { t.data().chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect() };
    let mut meta: Option<(Option<usize>, Split)> = None;
    for (name, t) in entries {
        let parts: Vec<&str> = name.splitn(3, '.').collect();
        match parts.as_slice() {
            ["task", t] => task = t.parse()?,
            ["class", _, c] => class_names.push(c.to_string()),
            ["sample", _, "meta"] => {
                let d = t.data();
                let label = (d[0] >= 0.0).then_some(d[0] as usize);
                meta = Some((label, if d[1] == 0.0 { Split::Train } else { Split::Test }));
            }
            ["sample", _, "coords"] => {
                let (label, split) = meta.take().ok_or_else(|| bad(format!("{name} without metadata")))?;
                let mut c = PointCloud::new(points(&t))?;
                c.label = label;
                samples.push(c);
                splits.push(split);
            }
            ["sample", _, "normals"] => {
                samples.last_mut().ok_or_else(|| bad(format!("{name} before coordinates")))?.normals = Some(points(&t));
            }
            ["sample", _, "parts"] => {
                samples.last_mut().ok_or_else(|| bad(format!("{name} before coordinates")))?.point_labels =
                    Some(t.data().iter().map(|&v| v as usize).collect());
            }
            _ => return Err(bad(format!("unexpected entry {name}"))),
        }
    }
    let data = Dataset {
        samples,
        class_names,
        splits,
        task,
    };
    data.validate()?;
    Ok(data)
}

#[cfg(test)]
mod tests;
