//! Losses, metrics, the training loop and test-time voting.

use std::time::Instant;

use crate::data::{Dataset, Split};
use crate::error::{config_err, Error, Result};
use crate::geometry::{apply_augmentation, augment, draw_augmentation, AugmentParams, Point, PointCloud};
use crate::networks::{Forward, Network, Task};
use crate::rng::{self, Rng};
use crate::tensor::optim::{Adam, AdamConfig};
use crate::tensor::{Tape, Tensor, Var};

// Stream tags for the per-purpose random streams derived from the seed.
const SHUFFLE: u64 = 1;
const AUGMENT: u64 = 2;
const GEOMETRY: u64 = 3;
const DROPOUT: u64 = 4;
const VOTE_SCALE: u64 = 5;
const VOTE_GEOMETRY: u64 = 6;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub augment: AugmentParams,
    pub augment_enabled: bool,
    pub seed: u64,
    /// Forward passes averaged per sample at evaluation.
    pub votes: usize,
    /// Evaluate on the test split after every epoch.
    pub eval_each_epoch: bool,
    /// Stop after the first epoch whose test score reaches this value.
    pub stop_at: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 16,
            adam: AdamConfig::default(),
            augment: AugmentParams::default(),
            augment_enabled: true,
            seed: 0,
            votes: 10,
            eval_each_epoch: true,
            stop_at: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.votes == 0 {
            return config_err("vote count must be at least 1");
        }
        if self.batch_size == 0 {
            return config_err("batch size must be positive");
        }
        if !(self.adam.lr >= 0.0) {
            return config_err("learning rate must be non-negative");
        }
        if self.stop_at.is_some() && !self.eval_each_epoch {
            return config_err("stop_at needs eval_each_epoch");
        }
        self.augment.validate()
    }

    /// Scaling used by voting: the training scale range without translation.
    pub fn vote_scaling(&self) -> AugmentParams {
        AugmentParams {
            translate: 0.0,
            ..self.augment
        }
    }
}

/// What the loss and score of a network are computed from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Objective {
    /// One label per cloud.
    Classify,
    /// One label per point.
    Segment,
    /// One unit normal per point.
    Normals,
}

impl Objective {
    pub fn of(net: &Network) -> Self {
        match net.config.task {
            Task::NormalEstimation => Objective::Normals,
            Task::PartSegmentation => Objective::Segment,
            Task::Classification => Objective::Classify,
            Task::Custom if net.config.per_point() => Objective::Segment,
            Task::Custom => Objective::Classify,
        }
    }
}

/// Mean softmax cross-entropy of `[B, K]` logits.
pub fn softmax_cross_entropy(tape: &mut Tape, logits: Var, labels: &[usize]) -> Result<Var> {
    tape.softmax_cross_entropy(logits, labels)
}

/// Mean over points of `1 - cos(pred, gt)` with `gt` unit rows.
pub fn cosine_normal_loss(tape: &mut Tape, pred: Var, gt: &Tensor) -> Result<Var> {
    tape.cosine_loss(pred, gt)
}

fn labels_of(clouds: &[PointCloud]) -> Result<Vec<usize>> {
    clouds
        .iter()
        .map(|c| c.label.ok_or_else(|| Error::Config("classification needs a label on every cloud".into())))
        .collect()
}

fn point_labels_of(clouds: &[PointCloud]) -> Result<Vec<usize>> {
    let mut out = Vec::new();
    for c in clouds {
        out.extend(
            c.point_labels
                .as_ref()
                .ok_or_else(|| Error::Config("segmentation needs part labels on every cloud".into()))?,
        );
    }
    Ok(out)
}

fn normals_of(clouds: &[PointCloud]) -> Result<Tensor> {
    let mut data = Vec::new();
    for c in clouds {
        let n = c
            .normals
            .as_ref()
            .ok_or_else(|| Error::Config("normal estimation needs normals on every cloud".into()))?;
        data.extend(n.iter().flatten());
    }
    Tensor::new(vec![data.len() / 3, 3], data)
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

fn unit(v: [f64; 3]) -> [f64; 3] {
    let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    if n > 0.0 {
        v.map(|x| x / n)
    } else {
        v
    }
}

fn dot(a: &Point, b: &Point) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

/// Loss plus a batch score: accuracy for labels, mean cosine for normals.
fn objective_loss(tape: &mut Tape, objective: Objective, out: Var, clouds: &[PointCloud]) -> Result<(Var, f64)> {
    match objective {
        Objective::Classify | Objective::Segment => {
            let labels = if objective == Objective::Classify {
                labels_of(clouds)?
            } else {
                point_labels_of(clouds)?
            };
            let loss = tape.softmax_cross_entropy(out, &labels)?;
            let logits = tape.value(out);
            let k = logits.shape()[1];
            let correct = logits
                .data()
                .chunks_exact(k)
                .zip(&labels)
                .filter(|(row, &l)| argmax(row) == l)
                .count();
            Ok((loss, correct as f64 / labels.len() as f64))
        }
        Objective::Normals => {
            let gt = normals_of(clouds)?;
            let loss = tape.cosine_loss(out, &gt)?;
            let score = 1.0 - tape.value(loss).data()[0];
            Ok((loss, score))
        }
    }
}

fn non_finite_error(tape: &Tape, fwd: &Forward) -> Error {
    let vars: Vec<Var> = fwd.trace.iter().map(|t| t.var).collect();
    let layer = match tape.first_non_finite(&vars) {
        Some(v) => fwd.trace.iter().find(|t| t.var == v).map(|t| t.name.clone()).unwrap_or_default(),
        None => "loss".to_string(),
    };
    Error::NonFinite { layer }
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    /// Accuracy for label tasks, mean cosine for normals.
    pub train_acc: f64,
    pub test_acc: Option<f64>,
    pub wall_seconds: f64,
}

impl EpochLog {
    pub const HEADER: &'static str = "epoch\ttrain_loss\ttrain_acc\ttest_acc\twall_seconds";

    pub fn tsv(&self) -> String {
        let test = self.test_acc.map_or("nan".to_string(), |a| format!("{a:.6}"));
        format!("{}\t{:.6}\t{:.6}\t{test}\t{:.3}", self.epoch, self.train_loss, self.train_acc, self.wall_seconds)
    }
}

/// Trains `net` in place on the train split. Each epoch shuffles, augments
/// every sample, and takes one Adam step per batch; a trailing batch of a
/// single cloud is dropped because batch statistics need two samples.
pub fn train(net: &mut Network, data: &Dataset, cfg: &TrainConfig, on_epoch: &mut dyn FnMut(&EpochLog)) -> Result<Vec<EpochLog>> {
    cfg.validate()?;
    data.validate()?;
    let train_idx = data.indices(Split::Train);
    let test_idx = data.indices(Split::Test);
    if train_idx.is_empty() {
        return config_err("the dataset has no training samples");
    }
    let objective = Objective::of(net);
    let mut adam = Adam::new(cfg.adam);
    let start = Instant::now();
    let mut logs = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let e = epoch as u64;
        let mut order = train_idx.clone();
        shuffle(&mut order, &mut rng::derive(cfg.seed, &[SHUFFLE, e]));
        let mut loss_sum = 0.0;
        let mut score_sum = 0.0;
        let mut seen = 0usize;
        for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
            if batch.len() < 2 && seen > 0 {
                continue;
            }
            let mut clouds = Vec::with_capacity(batch.len());
            for &i in batch {
                let c = &data.samples[i];
                clouds.push(if cfg.augment_enabled {
                    augment(c, &mut rng::derive(cfg.seed, &[AUGMENT, e, i as u64]), &cfg.augment)?
                } else {
                    c.clone()
                });
            }
            let geo = batch.iter().map(|&i| rng::derive(cfg.seed, &[GEOMETRY, e, i as u64])).collect();
            let mut drop = rng::derive(cfg.seed, &[DROPOUT, e, b as u64]);
            let mut tape = Tape::new();
            let fwd = net.forward(&mut tape, &clouds, true, &mut drop, geo)?;
            let (loss, score) = objective_loss(&mut tape, objective, fwd.output, &clouds)?;
            let lv = tape.value(loss).data()[0];
            if !lv.is_finite() {
                return Err(non_finite_error(&tape, &fwd));
            }
            net.store.zero_grad();
            tape.backward_into(loss, &mut net.store)?;
            adam.step(&mut net.store)?;
            net.store.apply_bn_updates(&fwd.bn_updates);
            loss_sum += lv * batch.len() as f64;
            score_sum += score * batch.len() as f64;
            seen += batch.len();
        }
        let test_acc = if cfg.eval_each_epoch && !test_idx.is_empty() {
            let ev = evaluate_voting(net, data, &test_idx, 1, &AugmentParams::IDENTITY, cfg.seed, cfg.batch_size)?;
            Some(ev.metrics.score())
        } else {
            None
        };
        let log = EpochLog {
            epoch: epoch + 1,
            train_loss: loss_sum / seen as f64,
            train_acc: score_sum / seen as f64,
            test_acc,
            wall_seconds: start.elapsed().as_secs_f64(),
        };
        on_epoch(&log);
        let done = matches!((cfg.stop_at, log.test_acc), (Some(t), Some(a)) if a >= t);
        logs.push(log);
        if done {
            break;
        }
    }
    Ok(logs)
}

fn shuffle(v: &mut [usize], rng: &mut Rng) {
    use rand::seq::SliceRandom;
    v.shuffle(rng);
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct Metrics {
    pub samples: usize,
    /// Cloud accuracy (classification) or point accuracy (segmentation).
    pub accuracy: Option<f64>,
    /// Accuracy of each object class; `None` for classes without samples.
    pub per_class_accuracy: Vec<Option<f64>>,
    pub mean_class_accuracy: Option<f64>,
    pub class_miou: Option<f64>,
    pub instance_miou: Option<f64>,
    /// Mean `1 - cos` between predicted and true normals.
    pub normal_cos_error: Option<f64>,
    /// Mean angle between predicted and true normals, in degrees.
    pub normal_angle_deg: Option<f64>,
}

impl Metrics {
    /// Headline number: accuracy for label tasks, mean cosine for normals.
    pub fn score(&self) -> f64 {
        self.accuracy.or(self.normal_cos_error.map(|e| 1.0 - e)).unwrap_or(f64::NAN)
    }

    pub fn to_tsv(&self) -> String {
        let f = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.6}"));
        let mut out = String::from("metric\tvalue\n");
        out.push_str(&format!("samples\t{}\n", self.samples));
        out.push_str(&format!("accuracy\t{}\n", f(self.accuracy)));
        out.push_str(&format!("mean_class_accuracy\t{}\n", f(self.mean_class_accuracy)));
        out.push_str(&format!("class_miou\t{}\n", f(self.class_miou)));
        out.push_str(&format!("instance_miou\t{}\n", f(self.instance_miou)));
        out.push_str(&format!("normal_cos_error\t{}\n", f(self.normal_cos_error)));
        out.push_str(&format!("normal_angle_deg\t{}\n", f(self.normal_angle_deg)));
        out
    }
}

/// Per-sample evaluation record.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub id: usize,
    pub label: Option<usize>,
    /// Predicted class (classification only).
    pub pred: Option<usize>,
    /// Largest averaged class probability, instance IoU, or mean cosine.
    pub score: f64,
    /// Averaged class probabilities (classification only).
    pub probs: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct Evaluation {
    pub metrics: Metrics,
    pub predictions: Vec<Prediction>,
}

/// Eval-mode predictions averaged over `votes` random rescalings of each
/// sample. Every sample's randomness is derived from its index, so results
/// do not depend on sample order or batching.
pub fn evaluate_voting(
    net: &Network,
    data: &Dataset,
    indices: &[usize],
    votes: usize,
    scaling: &AugmentParams,
    seed: u64,
    batch_size: usize,
) -> Result<Evaluation> {
    if votes == 0 {
        return config_err("vote count must be at least 1");
    }
    scaling.validate()?;
    let objective = Objective::of(net);
    let classes = net.config.classes;
    let part_sets = data.part_sets();
    let mut predictions = Vec::with_capacity(indices.len());
    let mut seg_preds = Vec::new();
    let mut seg_labels = Vec::new();
    let mut seg_classes = Vec::new();
    let mut normal_err = (0.0, 0.0, 0usize);
    for chunk in indices.chunks(batch_size.max(1)) {
        // Accumulated probabilities (labels) or de-scaled unit normals.
        let mut acc: Vec<Vec<f64>> = chunk.iter().map(|&i| vec![0.0; out_len(objective, &data.samples[i], classes)]).collect();
        for v in 0..votes as u64 {
            let mut clouds = Vec::with_capacity(chunk.len());
            let mut scales = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let (s, t) = draw_augmentation(scaling, &mut rng::derive(seed, &[VOTE_SCALE, i as u64, v]));
                clouds.push(apply_augmentation(&data.samples[i], s, t));
                scales.push(s);
            }
            let geo = chunk.iter().map(|&i| rng::derive(seed, &[VOTE_GEOMETRY, i as u64, v])).collect();
            let mut tape = Tape::new();
            let fwd = net.forward(&mut tape, &clouds, false, &mut rng::seeded(seed), geo)?;
            let out = tape.value(fwd.output).data();
            if !out.iter().all(|x| x.is_finite()) {
                return Err(non_finite_error(&tape, &fwd));
            }
            let mut offset = 0;
            for (j, a) in acc.iter_mut().enumerate() {
                let len = a.len();
                let rows = &out[offset..offset + len];
                offset += len;
                match objective {
                    Objective::Classify | Objective::Segment => {
                        let probs = softmax_rows(rows, classes);
                        a.iter_mut().zip(&probs).for_each(|(x, p)| *x += p);
                    }
                    Objective::Normals => {
                        // Normals transform with the inverse scale, so a
                        // prediction in scaled space maps back through `s`.
                        let s = scales[j];
                        for (dst, n) in a.chunks_exact_mut(3).zip(rows.chunks_exact(3)) {
                            let m = unit([n[0] * s[0], n[1] * s[1], n[2] * s[2]]);
                            dst.iter_mut().zip(m).for_each(|(x, y)| *x += y);
                        }
                    }
                }
            }
        }
        for (&i, a) in chunk.iter().zip(acc) {
            let sample = &data.samples[i];
            match objective {
                Objective::Classify => {
                    let probs: Vec<f64> = a.iter().map(|p| p / votes as f64).collect();
                    let pred = argmax(&probs);
                    predictions.push(Prediction {
                        id: i,
                        label: sample.label,
                        pred: Some(pred),
                        score: probs[pred],
                        probs,
                    });
                }
                Objective::Segment => {
                    let labels = sample
                        .point_labels
                        .clone()
                        .ok_or_else(|| Error::Config("segmentation needs part labels on every cloud".into()))?;
                    let allowed = sample.label.and_then(|c| part_sets.get(c)).filter(|s| !s.is_empty());
                    let pred: Vec<usize> = a
                        .chunks_exact(classes)
                        .map(|row| match allowed {
                            Some(set) => *set.iter().max_by(|&&x, &&y| row[x].total_cmp(&row[y]).then(y.cmp(&x))).expect("non-empty"),
                            None => argmax(row),
                        })
                        .collect();
                    let class = sample.label.unwrap_or(0);
                    let parts = allowed.cloned().unwrap_or_else(|| (0..classes).collect());
                    let iou = instance_iou(&pred, &labels, &parts);
                    predictions.push(Prediction {
                        id: i,
                        label: sample.label,
                        pred: None,
                        score: iou,
                        probs: Vec::new(),
                    });
                    seg_preds.push(pred);
                    seg_labels.push(labels);
                    seg_classes.push(class);
                }
                Objective::Normals => {
                    let gt = sample
                        .normals
                        .as_ref()
                        .ok_or_else(|| Error::Config("normal estimation needs normals on every cloud".into()))?;
                    let mut cos_sum = 0.0;
                    for (p, g) in a.chunks_exact(3).zip(gt) {
                        let p = unit([p[0], p[1], p[2]]);
                        let c = dot(&p, g).clamp(-1.0, 1.0);
                        cos_sum += c;
                        normal_err.0 += 1.0 - c;
                        normal_err.1 += c.acos().to_degrees();
                        normal_err.2 += 1;
                    }
                    predictions.push(Prediction {
                        id: i,
                        label: sample.label,
                        pred: None,
                        score: cos_sum / gt.len() as f64,
                        probs: Vec::new(),
                    });
                }
            }
        }
    }
    let mut metrics = Metrics {
        samples: predictions.len(),
        ..Metrics::default()
    };
    match objective {
        Objective::Classify => {
            let n = data.class_names.len().max(classes);
            let mut hits = vec![(0usize, 0usize); n];
            for p in &predictions {
                if let Some(l) = p.label {
                    hits[l].1 += 1;
                    if p.pred == Some(l) {
                        hits[l].0 += 1;
                    }
                }
            }
            let total: usize = hits.iter().map(|h| h.1).sum();
            if total > 0 {
                metrics.accuracy = Some(hits.iter().map(|h| h.0).sum::<usize>() as f64 / total as f64);
                metrics.per_class_accuracy = hits.iter().map(|&(c, t)| (t > 0).then(|| c as f64 / t as f64)).collect();
                let present: Vec<f64> = metrics.per_class_accuracy.iter().flatten().copied().collect();
                metrics.mean_class_accuracy = Some(present.iter().sum::<f64>() / present.len() as f64);
            }
        }
        Objective::Segment => {
            if !seg_preds.is_empty() {
                let total: usize = seg_labels.iter().map(Vec::len).sum();
                let correct: usize = seg_preds
                    .iter()
                    .zip(&seg_labels)
                    .map(|(p, l)| p.iter().zip(l).filter(|(a, b)| a == b).count())
                    .sum();
                metrics.accuracy = Some(correct as f64 / total as f64);
                let sets: Vec<Vec<usize>> = (0..part_sets.len().max(1))
                    .map(|c| part_sets.get(c).filter(|s| !s.is_empty()).cloned().unwrap_or_else(|| (0..classes).collect()))
                    .collect();
                let (class_miou, instance_miou) = compute_miou(&seg_preds, &seg_labels, &seg_classes, &sets)?;
                metrics.class_miou = Some(class_miou);
                metrics.instance_miou = Some(instance_miou);
            }
        }
        Objective::Normals => {
            if normal_err.2 > 0 {
                metrics.normal_cos_error = Some(normal_err.0 / normal_err.2 as f64);
                metrics.normal_angle_deg = Some(normal_err.1 / normal_err.2 as f64);
            }
        }
    }
    Ok(Evaluation { metrics, predictions })
}

fn out_len(objective: Objective, sample: &PointCloud, classes: usize) -> usize {
    match objective {
        Objective::Classify => classes,
        Objective::Segment => sample.len() * classes,
        Objective::Normals => sample.len() * 3,
    }
}

fn softmax_rows(logits: &[f64], k: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(logits.len());
    for row in logits.chunks_exact(k) {
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = row.iter().map(|x| (x - m).exp()).collect();
        let z: f64 = e.iter().sum();
        out.extend(e.iter().map(|x| x / z));
    }
    out
}

/// Mean IoU over `parts`; a part absent from both prediction and ground
/// truth scores 1.
pub fn instance_iou(pred: &[usize], labels: &[usize], parts: &[usize]) -> f64 {
    if parts.is_empty() {
        return 1.0;
    }
    let mut total = 0.0;
    for &p in parts {
        let mut inter = 0usize;
        let mut union = 0usize;
        for (&a, &b) in pred.iter().zip(labels) {
            let (x, y) = (a == p, b == p);
            inter += usize::from(x && y);
            union += usize::from(x || y);
        }
        total += if union == 0 { 1.0 } else { inter as f64 / union as f64 };
    }
    total / parts.len() as f64
}

/// `(class mIoU, instance mIoU)`. Instance IoU averages over the parts of
/// the instance's object class; class mIoU averages per-class means over the
/// classes that have instances.
pub fn compute_miou(preds: &[Vec<usize>], labels: &[Vec<usize>], class_of_instance: &[usize], part_sets: &[Vec<usize>]) -> Result<(f64, f64)> {
    if preds.is_empty() {
        return config_err("mIoU of an empty prediction set");
    }
    if preds.len() != labels.len() || preds.len() != class_of_instance.len() {
        return config_err("predictions, labels and classes must have one entry per instance");
    }
    let mut per_class: Vec<(f64, usize)> = vec![(0.0, 0); part_sets.len()];
    let mut inst_total = 0.0;
    for ((p, l), &c) in preds.iter().zip(labels).zip(class_of_instance) {
        if p.len() != l.len() {
            return config_err("prediction and label lengths differ");
        }
        let parts = part_sets
            .get(c)
            .ok_or_else(|| Error::Index(format!("object class {c} has no part set")))?;
        let iou = instance_iou(p, l, parts);
        inst_total += iou;
        per_class[c].0 += iou;
        per_class[c].1 += 1;
    }
    let present: Vec<f64> = per_class.iter().filter(|c| c.1 > 0).map(|c| c.0 / c.1 as f64).collect();
    Ok((present.iter().sum::<f64>() / present.len() as f64, inst_total / preds.len() as f64))
}

#[cfg(test)]
mod tests;
