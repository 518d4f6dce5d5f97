//! Two-stage training: registration losses on frame pairs, then the loop
//! head on revisit labels with the trunk frozen.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use log::{info, warn};
use nalgebra::Matrix3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::decoder::{similarity_match, FusedDescriptors};
use crate::encoder::EncodedCloud;
use crate::error::Error;
use crate::geometry::{random_sample_pad, Point3, PointCloud, PointLabel, RigidTransform};
use crate::io::SequenceSource;
use crate::model::Model;
use crate::numerics::{optimizer_step, AdamConfig, CosineSchedule, Graph, Tensor, Var};
use crate::training::augment::{augment, merge_frames, AugmentationConfig};
use crate::training::losses::{
    classify_pairs, coarse_pairing_loss, dynamic_seg_loss_ohem, importance_scoring_loss, offset_loss,
    pairing_loss, total_registration_loss, LossComponents, LossWeights,
};
use crate::Result;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainingConfig {
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    pub pairs_per_epoch: usize,
    pub learning_rate: f64,
    pub min_learning_rate: f64,
    pub weight_decay: f64,
    /// Global gradient-norm clip; 0 disables.
    pub grad_clip: f64,
    /// Destination frames are drawn within this many frames of the source.
    pub max_frame_gap: usize,
    pub weights: LossWeights,
    pub augmentation: AugmentationConfig,
    /// Covariance of the offset Mahalanobis norm, row-major.
    pub offset_covariance: [[f64; 3]; 3],
    /// Drop labeled dynamic descriptors before fusion during training.
    pub label_dynamic_filter: bool,
    pub loop_epochs: usize,
    pub loop_pairs_per_epoch: usize,
    pub loop_learning_rate: f64,
    pub loop_positive_distance: f64,
    pub loop_negative_distance: f64,
    pub checkpoint_dir: Option<PathBuf>,
    pub loss_csv: Option<PathBuf>,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            seed: 0,
            epochs: 12,
            batch_size: 4,
            pairs_per_epoch: 64,
            learning_rate: 1e-3,
            min_learning_rate: 1e-5,
            weight_decay: 1e-4,
            grad_clip: 10.0,
            max_frame_gap: 2,
            weights: LossWeights::default(),
            augmentation: AugmentationConfig::desk(),
            offset_covariance: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            label_dynamic_filter: true,
            loop_epochs: 4,
            loop_pairs_per_epoch: 64,
            loop_learning_rate: 1e-3,
            loop_positive_distance: 5.0,
            loop_negative_distance: 20.0,
            checkpoint_dir: None,
            loss_csv: None,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        self.augmentation.validate()?;
        if self.batch_size == 0 || self.max_frame_gap == 0 {
            return Err(Error::Config("batch_size and max_frame_gap must be positive".into()));
        }
        if !(self.learning_rate > 0.0) || self.min_learning_rate < 0.0 {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if self.loop_positive_distance >= self.loop_negative_distance {
            return Err(Error::Config("loop positive distance must be below the negative distance".into()));
        }
        self.covariance()?;
        Ok(())
    }

    pub fn covariance(&self) -> Result<Matrix3<f64>> {
        let c = &self.offset_covariance;
        let m = Matrix3::new(c[0][0], c[0][1], c[0][2], c[1][0], c[1][1], c[1][2], c[2][0], c[2][1], c[2][2]);
        if (m - m.transpose()).abs().max() > 1e-12 || m.cholesky().is_none() {
            return Err(Error::Config("offset covariance must be symmetric positive definite".into()));
        }
        Ok(m)
    }
}

/// One training example: `gt` maps `src` coordinates into `dst` coordinates.
#[derive(Debug, Clone)]
pub struct TrainingPair {
    pub src: PointCloud,
    pub dst: PointCloud,
    pub gt: RigidTransform,
}

fn poses_of(seq: &SequenceSource) -> Result<&[RigidTransform]> {
    seq.poses
        .as_deref()
        .ok_or_else(|| Error::Config("training sequences need ground-truth poses".into()))
}

/// Draws a source frame, a destination frame within `max_frame_gap` and a
/// local map of up to `localmap_frames(epoch)` neighbors around it.
pub fn sample_pair(
    dataset: &[SequenceSource],
    cfg: &TrainingConfig,
    epoch: usize,
    rng: &mut ChaCha8Rng,
) -> Result<TrainingPair> {
    let usable: Vec<&SequenceSource> = dataset.iter().filter(|s| s.len() >= 2).collect();
    if usable.is_empty() {
        return Err(Error::InsufficientPoints { needed: 2, available: 0 });
    }
    let seq = usable[rng.random_range(0..usable.len())];
    let poses = poses_of(seq)?;
    let n = seq.len();
    let i = rng.random_range(0..n);
    let gap = rng.random_range(1..=cfg.max_frame_gap.min(n - 1)) as isize;
    let j = {
        let fwd = i as isize + gap;
        let back = i as isize - gap;
        let pick_fwd = rng.random_bool(0.5);
        if (pick_fwd && fwd < n as isize) || back < 0 { fwd as usize } else { back as usize }
    };
    let extra = rng.random_range(0..=cfg.augmentation.localmap_frames(epoch));
    let mut neighbors: Vec<usize> = (0..n).filter(|&k| k != i && k != j).collect();
    neighbors.sort_by_key(|&k| (k as isize - j as isize).unsigned_abs());
    neighbors.truncate(extra);
    let mut members = vec![j];
    members.extend(neighbors);
    let frames: Vec<&PointCloud> = members.iter().map(|&k| &seq.frames[k]).collect();
    let member_poses: Vec<RigidTransform> = members.iter().map(|&k| poses[k]).collect();
    let local_map = merge_frames(&frames, &member_poses, 0);
    let dst = random_sample_pad(&local_map, cfg.augmentation.sample_n, rng.random());
    let aug = augment(&seq.frames[i], &cfg.augmentation, rng)?;
    let rel = poses[j].inverse().compose(&poses[i]);
    Ok(TrainingPair {
        src: aug.cloud,
        dst,
        gt: rel.compose(&aug.transform.inverse()),
    })
}

fn coords_tensor(points: &[Point3]) -> Tensor {
    let mut t = Tensor::zeros(points.len(), 3);
    for (r, p) in points.iter().enumerate() {
        t.row_mut(r).copy_from_slice(&p.to_array());
    }
    t
}

fn static_rows(enc: &EncodedCloud, filter: bool) -> Vec<usize> {
    let n = enc.deep_coords.len();
    match (&enc.deep_labels, filter) {
        (Some(labels), true) => {
            let keep: Vec<usize> = (0..n).filter(|&i| labels[i] == PointLabel::Static).collect();
            if keep.len() >= 3 { keep } else { (0..n).collect() }
        }
        _ => (0..n).collect(),
    }
}

/// Builds the five loss components of one pair inside `g`. Returns `None`
/// when the pair has no positive correspondences.
pub fn pair_losses(
    model: &Model,
    g: &mut Graph,
    pair: &TrainingPair,
    cfg: &TrainingConfig,
    rng: &mut impl Rng,
) -> Result<Option<LossComponents<Var>>> {
    let store = &model.store;
    let dec = &model.decoder;
    let w = &cfg.weights;
    let enc_s = model.encoder.forward(g, store, &pair.src)?;
    let enc_d = model.encoder.forward(g, store, &pair.dst)?;

    let mut seg_terms = Vec::new();
    for enc in [&enc_s, &enc_d] {
        if let Some(labels) = &enc.deep_labels {
            let logits = dec.segmentation_logits(g, store, enc.descriptors)?;
            seg_terms.push(dynamic_seg_loss_ohem(g, logits, labels, rng)?.0);
        }
    }
    let dynamic = match seg_terms.len() {
        0 => g.constant(Tensor::scalar(0.0)),
        1 => seg_terms[0],
        _ => {
            let s = g.add(seg_terms[0], seg_terms[1])?;
            g.scale(s, 0.5)
        }
    };

    let keep_s = static_rows(&enc_s, cfg.label_dynamic_filter);
    let keep_d = static_rows(&enc_d, cfg.label_dynamic_filter);
    let src_pts: Vec<Point3> = keep_s.iter().map(|&i| enc_s.deep_coords[i]).collect();
    let dst_pts: Vec<Point3> = keep_d.iter().map(|&i| enc_d.deep_coords[i]).collect();
    let src_in_dst: Vec<Point3> = src_pts.iter().map(|p| pair.gt.apply_point(*p)).collect();
    let classes = classify_pairs(&src_in_dst, &dst_pts, w.positive_radius);
    if classes.positives.is_empty() {
        return Ok(None);
    }
    let desc_s = g.gather_rows(enc_s.descriptors, &keep_s);
    let desc_d = g.gather_rows(enc_d.descriptors, &keep_d);
    let coarse = coarse_pairing_loss(g, desc_s, desc_d, &classes, w.alpha)?;
    let (fs, fd) = dec.fusion.forward(g, store, desc_s, desc_d)?;
    let pairing = pairing_loss(g, fs, fd, &classes, w.alpha)?;

    let near = &classes.neutrals;
    let offsets = dec.offsets(g, store, fs, fd, near)?;
    let target: Vec<Point3> = near.iter().map(|&(i, j)| src_in_dst[i] - dst_pts[j]).collect();
    let offset = offset_loss(g, offsets, &coords_tensor(&target), &cfg.covariance()?)?;

    // Scores are supervised on the near pairs and on the pairs the
    // similarity head would currently select, so that outlier matches are
    // seen during training.
    let mut scored: BTreeSet<(usize, usize)> = near.iter().copied().collect();
    let fused_s = FusedDescriptors { coords: src_pts.clone(), feats: g.value(fs).clone() };
    let fused_d = FusedDescriptors { coords: dst_pts.clone(), feats: g.value(fd).clone() };
    let dc = &model.config.decoder;
    if let Ok(m) = similarity_match(&fused_s, &fused_d, dc.tau_threshold, dc.coord_weight, dc.similarity_temperature) {
        scored.extend(m.pairs);
    }
    let scored: Vec<(usize, usize)> = scored.into_iter().collect();
    let sp: Vec<Point3> = scored.iter().map(|&(i, _)| src_pts[i]).collect();
    let dp: Vec<Point3> = scored.iter().map(|&(_, j)| dst_pts[j]).collect();
    let imp = dec.importance(g, store, fs, fd, &scored, &sp, &dp)?;
    let importance = importance_scoring_loss(g, imp.q_raw, imp.sigma_logits, &sp, &dp, w.rotation, w.score)?.total;

    Ok(Some(LossComponents { coarse, pairing, offset, importance, dynamic }))
}

/// One logged optimizer step.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepRecord {
    pub epoch: usize,
    pub step: usize,
    pub learning_rate: f64,
    pub components: LossComponents<f64>,
    pub total: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainReport {
    pub steps: Vec<StepRecord>,
    /// Mean total loss of each epoch.
    pub epoch_means: Vec<f64>,
    pub skipped_pairs: usize,
    pub checkpoints: Vec<PathBuf>,
}

fn clip_gradients(grads: &mut BTreeMap<String, Tensor>, max_norm: f64) {
    if max_norm <= 0.0 {
        return;
    }
    let norm = grads.values().flat_map(|t| t.data().iter()).map(|v| v * v).sum::<f64>().sqrt();
    if norm > max_norm {
        let k = max_norm / norm;
        for t in grads.values_mut() {
            t.data_mut().iter_mut().for_each(|v| *v *= k);
        }
    }
}

fn scalar(g: &Graph, v: Var) -> f64 {
    g.value(v).item()
}

fn checkpoint(model: &Model, dir: &Option<PathBuf>, name: String, report: &mut Vec<PathBuf>) -> Result<()> {
    if let Some(dir) = dir {
        fs::create_dir_all(dir)?;
        let path = dir.join(name);
        model.save(&path)?;
        report.push(path);
    }
    Ok(())
}

/// Stage 1: minimizes the weighted registration loss with AdamW and a
/// cosine learning-rate schedule. Aborts on a non-finite loss.
pub fn train_registration(model: &mut Model, dataset: &[SequenceSource], cfg: &TrainingConfig) -> Result<TrainReport> {
    cfg.validate()?;
    for seq in dataset {
        poses_of(seq)?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let steps_per_epoch = cfg.pairs_per_epoch.div_ceil(cfg.batch_size).max(1);
    let schedule = CosineSchedule {
        base_lr: cfg.learning_rate,
        min_lr: cfg.min_learning_rate,
        total_steps: steps_per_epoch * cfg.epochs,
    };
    let adam = AdamConfig::default();
    let mut report = TrainReport::default();
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        let mut epoch_total = 0.0;
        let mut epoch_steps = 0;
        for _ in 0..steps_per_epoch {
            let mut g = Graph::new();
            let mut parts: Vec<LossComponents<Var>> = Vec::new();
            for _ in 0..cfg.batch_size {
                let pair = sample_pair(dataset, cfg, epoch, &mut rng)?;
                match pair_losses(model, &mut g, &pair, cfg, &mut rng)? {
                    Some(p) => parts.push(p),
                    None => report.skipped_pairs += 1,
                }
            }
            if parts.is_empty() {
                warn!("step {step}: no pair had positive correspondences; skipped");
                continue;
            }
            let k = 1.0 / parts.len() as f64;
            let mut mean = |sel: fn(&LossComponents<Var>) -> Var| -> Result<Var> {
                let mut acc = sel(&parts[0]);
                for p in &parts[1..] {
                    acc = g.add(acc, sel(p))?;
                }
                Ok(g.scale(acc, k))
            };
            let batch = LossComponents {
                coarse: mean(|p| p.coarse)?,
                pairing: mean(|p| p.pairing)?,
                offset: mean(|p| p.offset)?,
                importance: mean(|p| p.importance)?,
                dynamic: mean(|p| p.dynamic)?,
            };
            let total = total_registration_loss(&mut g, &batch, &cfg.weights)?;
            let values = LossComponents {
                coarse: scalar(&g, batch.coarse),
                pairing: scalar(&g, batch.pairing),
                offset: scalar(&g, batch.offset),
                importance: scalar(&g, batch.importance),
                dynamic: scalar(&g, batch.dynamic),
            };
            let total_value = scalar(&g, total);
            if !total_value.is_finite() {
                return Err(Error::Diverged { step, detail: format!("{values:?}") });
            }
            g.backward(total);
            let mut grads = g.param_grads();
            clip_gradients(&mut grads, cfg.grad_clip);
            let lr = schedule.lr(step);
            optimizer_step(&mut model.store, &grads, lr, cfg.weight_decay, &adam)?;
            report.steps.push(StepRecord { epoch, step, learning_rate: lr, components: values, total: total_value });
            epoch_total += total_value;
            epoch_steps += 1;
            step += 1;
        }
        let mean = if epoch_steps > 0 { epoch_total / epoch_steps as f64 } else { f64::NAN };
        info!("epoch {epoch}: mean loss {mean:.5}");
        report.epoch_means.push(mean);
        checkpoint(model, &cfg.checkpoint_dir, format!("registration_epoch{epoch:02}.ckpt"), &mut report.checkpoints)?;
    }
    if let Some(path) = &cfg.loss_csv {
        write_loss_csv(path, &report.steps)?;
    }
    Ok(report)
}

pub fn write_loss_csv(path: &Path, steps: &[StepRecord]) -> Result<()> {
    let mut w = std::io::BufWriter::new(fs::File::create(path)?);
    writeln!(w, "epoch,step,lr,coarse,pairing,offset,importance,dynamic,total")?;
    for s in steps {
        let c = &s.components;
        writeln!(
            w,
            "{},{},{},{},{},{},{},{},{}",
            s.epoch, s.step, s.learning_rate, c.coarse, c.pairing, c.offset, c.importance, c.dynamic, s.total
        )?;
    }
    w.flush()?;
    Ok(())
}

/// One loop-head example with its revisit label.
#[derive(Debug, Clone)]
pub struct LoopPair {
    pub src: PointCloud,
    pub dst: PointCloud,
    pub revisit: bool,
}

/// Frames closer than `loop_positive_distance` are revisits, farther than
/// `loop_negative_distance` are not; pairs in between are never drawn.
pub fn sample_loop_pair(dataset: &[SequenceSource], cfg: &TrainingConfig, rng: &mut ChaCha8Rng) -> Result<Option<LoopPair>> {
    let want = rng.random_bool(0.5);
    for _ in 0..200 {
        let seq = &dataset[rng.random_range(0..dataset.len())];
        if seq.len() < 2 {
            continue;
        }
        let poses = poses_of(seq)?;
        let (i, j) = (rng.random_range(0..seq.len()), rng.random_range(0..seq.len()));
        if i == j {
            continue;
        }
        let d = poses[i].translation.distance(poses[j].translation);
        let label = if d < cfg.loop_positive_distance {
            true
        } else if d > cfg.loop_negative_distance {
            false
        } else {
            continue;
        };
        if label != want {
            continue;
        }
        let n = cfg.augmentation.sample_n;
        return Ok(Some(LoopPair {
            src: random_sample_pad(&seq.frames[i], n, rng.random()),
            dst: random_sample_pad(&seq.frames[j], n, rng.random()),
            revisit: label,
        }));
    }
    Ok(None)
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct LoopReport {
    pub losses: Vec<f64>,
    pub epoch_means: Vec<f64>,
    pub checkpoints: Vec<PathBuf>,
}

/// Stage 2: trains only the loop head (parameters under
/// [`crate::model::LOOP_PREFIX`]) on fused descriptors from the frozen trunk.
pub fn train_loop_head(model: &mut Model, dataset: &[SequenceSource], cfg: &TrainingConfig) -> Result<LoopReport> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x9e37_79b9_7f4a_7c15);
    let adam = AdamConfig::default();
    let mut report = LoopReport::default();
    let steps_per_epoch = cfg.loop_pairs_per_epoch.div_ceil(cfg.batch_size).max(1);
    for epoch in 0..cfg.loop_epochs {
        let mut sum = 0.0;
        let mut count = 0;
        for _ in 0..steps_per_epoch {
            let mut g = Graph::new();
            let mut terms = Vec::new();
            for _ in 0..cfg.batch_size {
                let Some(pair) = sample_loop_pair(dataset, cfg, &mut rng)? else { continue };
                let a = model.encoder.encode(&model.store, &pair.src)?;
                let b = model.encoder.encode(&model.store, &pair.dst)?;
                let (fa, fb) = crate::decoder::attention_fuse(model, &a, &b)?;
                let s = g.constant(fa.feats);
                let d = g.constant(fb.feats);
                let z = model.decoder.loop_logit(&mut g, &model.store, s, d)?;
                terms.push(g.bce_with_logits(z, &[if pair.revisit { 1.0 } else { 0.0 }])?);
            }
            if terms.is_empty() {
                continue;
            }
            let mut loss = terms[0];
            for t in &terms[1..] {
                loss = g.add(loss, *t)?;
            }
            let loss = g.scale(loss, 1.0 / terms.len() as f64);
            let value = scalar(&g, loss);
            if !value.is_finite() {
                return Err(Error::Diverged { step: report.losses.len(), detail: "loop loss".into() });
            }
            g.backward(loss);
            let mut grads = g.param_grads();
            grads.retain(|name, _| !Model::is_trunk_parameter(name));
            clip_gradients(&mut grads, cfg.grad_clip);
            optimizer_step(&mut model.store, &grads, cfg.loop_learning_rate, cfg.weight_decay, &adam)?;
            report.losses.push(value);
            sum += value;
            count += 1;
        }
        report.epoch_means.push(if count > 0 { sum / count as f64 } else { f64::NAN });
        checkpoint(model, &cfg.checkpoint_dir, format!("loop_epoch{epoch:02}.ckpt"), &mut report.checkpoints)?;
    }
    Ok(report)
}
