//! Registration losses: contrastive pairing, offset, importance scoring and
//! dynamic segmentation with online hard example mining.

use nalgebra::Matrix3;
use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::Error;
use crate::geometry::{Point3, PointLabel};
use crate::numerics::{Graph, Tensor, Var};
use crate::Result;

/// Statics drawn for the segmentation loss when a batch has no dynamic points.
pub const ZERO_DYNAMIC_STATICS: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub coarse: f64,
    pub pairing: f64,
    pub offset: f64,
    pub importance: f64,
    pub dynamic: f64,
    pub rotation: f64,
    pub score: f64,
    /// InfoNCE temperature.
    pub alpha: f64,
    /// Distance bound for positive and neutral pairs (m).
    pub positive_radius: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            coarse: 0.1,
            pairing: 1.0,
            offset: 1.0,
            importance: 1.0,
            dynamic: 1.0,
            rotation: 0.5,
            score: 0.2,
            alpha: 0.2,
            positive_radius: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.coarse,
            self.pairing,
            self.offset,
            self.importance,
            self.dynamic,
            self.rotation,
            self.score,
        ];
        if all.iter().any(|w| !(*w >= 0.0)) {
            return Err(Error::Config("loss weights must be non-negative".into()));
        }
        if !(self.alpha > 0.0) || !(self.positive_radius > 0.0) {
            return Err(Error::Config("alpha and positive_radius must be positive".into()));
        }
        Ok(())
    }
}

/// Index pairs `(src, dst)` split by distance after ground-truth alignment.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PairClassification {
    /// Nearest destination of a source point, within the radius.
    pub positives: Vec<(usize, usize)>,
    /// Every pair within the radius (positives included).
    pub neutrals: Vec<(usize, usize)>,
    /// Every pair beyond the radius.
    pub negatives: Vec<(usize, usize)>,
}

/// Classifies all `src × dst` pairs; `dst_aligned` must already be in the
/// source frame. The nearest destination of each source point is its
/// positive when within `radius`; ties go to the lowest index.
pub fn classify_pairs(src: &[Point3], dst_aligned: &[Point3], radius: f64) -> PairClassification {
    let mut out = PairClassification::default();
    for (i, p) in src.iter().enumerate() {
        let mut best: Option<(usize, f64)> = None;
        for (j, q) in dst_aligned.iter().enumerate() {
            let d = p.distance(*q);
            if d <= radius {
                out.neutrals.push((i, j));
            } else {
                out.negatives.push((i, j));
            }
            if best.is_none_or(|(_, b)| d < b) {
                best = Some((j, d));
            }
        }
        if let Some((j, d)) = best {
            if d <= radius {
                out.positives.push((i, j));
            }
        }
    }
    out
}

fn flat(pairs: &[(usize, usize)], cols: usize) -> Vec<usize> {
    pairs.iter().map(|&(i, j)| i * cols + j).collect()
}

/// `−log(Σ_num exp(f_i·f_j/α) / Σ_den exp(f_i·f_j/α))` over the dot
/// products of the given feature rows, one term per source row that has a
/// numerator pair, averaged over those rows.
pub fn info_nce(
    g: &mut Graph,
    src_feats: Var,
    dst_feats: Var,
    numerator: &[(usize, usize)],
    denominator: &[(usize, usize)],
    alpha: f64,
) -> Result<Var> {
    let mut by_row: std::collections::BTreeMap<usize, (Vec<(usize, usize)>, Vec<(usize, usize)>)> =
        std::collections::BTreeMap::new();
    for &p in numerator {
        by_row.entry(p.0).or_default().0.push(p);
    }
    for &p in denominator {
        if let Some(e) = by_row.get_mut(&p.0) {
            e.1.push(p);
        }
    }
    if by_row.is_empty() {
        return Err(Error::NoCorrespondences);
    }
    let cols = g.value(dst_feats).rows();
    let dt = g.transpose(dst_feats);
    let sim = g.matmul(src_feats, dt)?;
    let sim = g.scale(sim, 1.0 / alpha);
    let mut total: Option<Var> = None;
    for (num, den) in by_row.values() {
        let n = g.logsumexp_at(sim, &flat(num, cols))?;
        let d = g.logsumexp_at(sim, &flat(den, cols))?;
        let term = g.sub(d, n)?;
        total = Some(match total {
            Some(t) => g.add(t, term)?,
            None => term,
        });
    }
    let rows = by_row.len() as f64;
    Ok(g.scale(total.expect("non-empty"), 1.0 / rows))
}

/// Contrastive loss over every pair; features are unit-normalized first.
pub fn coarse_pairing_loss(
    g: &mut Graph,
    src_feats: Var,
    dst_feats: Var,
    pairs: &PairClassification,
    alpha: f64,
) -> Result<Var> {
    let s = g.l2_normalize_rows(src_feats);
    let d = g.l2_normalize_rows(dst_feats);
    let mut all = pairs.neutrals.clone();
    all.extend_from_slice(&pairs.negatives);
    info_nce(g, s, d, &pairs.positives, &all, alpha)
}

/// Contrastive loss normalized over pairs within the radius only.
pub fn pairing_loss(
    g: &mut Graph,
    src_feats: Var,
    dst_feats: Var,
    pairs: &PairClassification,
    alpha: f64,
) -> Result<Var> {
    let s = g.l2_normalize_rows(src_feats);
    let d = g.l2_normalize_rows(dst_feats);
    info_nce(g, s, d, &pairs.positives, &pairs.neutrals, alpha)
}

/// Mean Mahalanobis norm `√(vᵀΣ⁻¹v)` of the offset errors, `P×3` rows.
pub fn offset_loss(g: &mut Graph, predicted: Var, target: &Tensor, sigma: &Matrix3<f64>) -> Result<Var> {
    let chol = sigma
        .try_inverse()
        .and_then(|inv| inv.cholesky())
        .ok_or_else(|| Error::Config("offset covariance must be symmetric positive definite".into()))?;
    let l = chol.l();
    let lt = Tensor::from_rows(&[
        vec![l[(0, 0)], l[(0, 1)], l[(0, 2)]],
        vec![l[(1, 0)], l[(1, 1)], l[(1, 2)]],
        vec![l[(2, 0)], l[(2, 1)], l[(2, 2)]],
    ]);
    let t = g.constant(target.clone());
    let diff = g.sub(predicted, t)?;
    let l = g.constant(lt);
    let whitened = g.matmul(diff, l)?;
    let norms = g.row_norms(whitened);
    Ok(g.mean(norms))
}

#[derive(Debug, Clone, Copy)]
pub struct ImportanceLoss {
    pub total: Var,
    pub rotation: Var,
    pub score: Var,
}

fn points_tensor(points: &[Point3]) -> Tensor {
    let mut t = Tensor::zeros(points.len(), 3);
    for (r, p) in points.iter().enumerate() {
        t.row_mut(r).copy_from_slice(&p.to_array());
    }
    t
}

/// Score-weighted alignment residual under the predicted rotation and the
/// centroid translation, plus cross-entropy of the scores against one.
/// `sigma_logits` is `P×1`; scores are their sigmoids.
pub fn importance_scoring_loss(
    g: &mut Graph,
    q_raw: Var,
    sigma_logits: Var,
    src_pts: &[Point3],
    dst_pts: &[Point3],
    rotation_weight: f64,
    score_weight: f64,
) -> Result<ImportanceLoss> {
    if src_pts.is_empty() || src_pts.len() != dst_pts.len() {
        return Err(Error::LengthMismatch(src_pts.len(), dst_pts.len()));
    }
    let n = src_pts.len();
    let r = g.quat_to_rotation(q_raw)?;
    let rt = g.transpose(r);
    let src = g.constant(points_tensor(src_pts));
    let dst = g.constant(points_tensor(dst_pts));
    let src_mean = g.mean_rows(src);
    let dst_mean = g.mean_rows(dst);
    let rotated_mean = g.matmul(src_mean, rt)?;
    let translation = g.sub(dst_mean, rotated_mean)?;
    let rotated = g.matmul(src, rt)?;
    let moved = g.add_row(rotated, translation)?;
    let residual = g.sub(moved, dst)?;
    let dist = g.row_norms(residual);
    let sigma = g.sigmoid(sigma_logits);
    let weighted = g.mul(sigma, dist)?;
    let rotation = g.mean(weighted);
    let score = g.bce_with_logits(sigma_logits, &vec![1.0; n])?;
    let a = g.scale(rotation, rotation_weight);
    let b = g.scale(score, score_weight);
    let total = g.add(a, b)?;
    Ok(ImportanceLoss { total, rotation, score })
}

/// Points entering the segmentation loss.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct OhemSelection {
    pub dynamic: Vec<usize>,
    /// The `min(3·#dynamic, #static)` statics with the lowest static probability.
    pub hard_static: Vec<usize>,
    /// Random statics, used only when there are no dynamic points.
    pub random_static: Vec<usize>,
}

impl OhemSelection {
    pub fn indices(&self) -> Vec<usize> {
        let mut v = self.dynamic.clone();
        v.extend_from_slice(&self.hard_static);
        v.extend_from_slice(&self.random_static);
        v
    }
}

pub fn ohem_select(static_prob: &[f64], labels: &[PointLabel], rng: &mut impl Rng) -> Result<OhemSelection> {
    if static_prob.len() != labels.len() {
        return Err(Error::LengthMismatch(static_prob.len(), labels.len()));
    }
    let dynamic: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == PointLabel::Dynamic).collect();
    let mut statics: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == PointLabel::Static).collect();
    if dynamic.is_empty() {
        let take = statics.len().min(ZERO_DYNAMIC_STATICS);
        let mut random_static: Vec<usize> = sample(rng, statics.len(), take).into_iter().map(|k| statics[k]).collect();
        random_static.sort_unstable();
        return Ok(OhemSelection { random_static, ..Default::default() });
    }
    let k = (3 * dynamic.len()).min(statics.len());
    statics.sort_by(|&a, &b| static_prob[a].total_cmp(&static_prob[b]).then(a.cmp(&b)));
    statics.truncate(k);
    Ok(OhemSelection { dynamic, hard_static: statics, random_static: Vec::new() })
}

/// Two-channel `(dynamic, static)` cross-entropy over the OHEM selection;
/// `logits` is `N×2`.
pub fn dynamic_seg_loss_ohem(
    g: &mut Graph,
    logits: Var,
    labels: &[PointLabel],
    rng: &mut impl Rng,
) -> Result<(Var, OhemSelection)> {
    let lv = g.value(logits);
    let static_prob: Vec<f64> = (0..lv.rows()).map(|r| 1.0 / (1.0 + (-lv.get(r, 1)).exp())).collect();
    let selection = ohem_select(&static_prob, labels, rng)?;
    let idx = selection.indices();
    if idx.is_empty() {
        return Err(Error::EmptyPoints);
    }
    let picked = g.gather_rows(logits, &idx);
    let targets: Vec<f64> = idx
        .iter()
        .flat_map(|&i| match labels[i] {
            PointLabel::Dynamic => [1.0, 0.0],
            PointLabel::Static => [0.0, 1.0],
        })
        .collect();
    Ok((g.bce_with_logits(picked, &targets)?, selection))
}

/// The five registration loss components of one batch.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct LossComponents<T> {
    pub coarse: T,
    pub pairing: T,
    pub offset: T,
    pub importance: T,
    pub dynamic: T,
}

impl LossComponents<f64> {
    pub fn weighted_total(&self, w: &LossWeights) -> f64 {
        w.coarse * self.coarse
            + w.pairing * self.pairing
            + w.offset * self.offset
            + w.importance * self.importance
            + w.dynamic * self.dynamic
    }
}

pub fn total_registration_loss(g: &mut Graph, parts: &LossComponents<Var>, w: &LossWeights) -> Result<Var> {
    let terms = [
        (parts.coarse, w.coarse),
        (parts.pairing, w.pairing),
        (parts.offset, w.offset),
        (parts.importance, w.importance),
        (parts.dynamic, w.dynamic),
    ];
    let mut total = g.scale(terms[0].0, terms[0].1);
    for &(v, k) in &terms[1..] {
        let s = g.scale(v, k);
        total = g.add(total, s)?;
    }
    Ok(total)
}
