//! Decoding heads and the frame-to-frame registration pipeline.
//!
//! The graph-level methods on [`Decoder`] are shared by training and
//! inference; the free functions are value-level and carry no gradient.

use nalgebra::Matrix3;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::DescriptorSet;
use crate::geometry::{centroid, Point3, PointCloud, RigidTransform, UnitQuaternion};
use crate::model::Model;
use crate::numerics::{
    kan_forward, svd3, Graph, KanLinear, Linear, Mlp, MultiHeadAttention, ParameterStore, SplineGrid, Tensor, Var,
};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecoderConfig {
    pub attention_heads: usize,
    /// Stacked self-attention blocks in the segmentation head.
    pub segmentation_blocks: usize,
    pub tau_threshold: f64,
    pub sigma_min: f64,
    pub dynamic_threshold: f64,
    /// Softmax temperature applied to the cosine similarity matrix.
    pub similarity_temperature: f64,
    /// Weight of the coordinates when concatenated with features for matching.
    pub coord_weight: f64,
    /// Coordinates entering the importance head are divided by this, meters.
    pub coord_scale: f64,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            attention_heads: 4,
            segmentation_blocks: 2,
            tau_threshold: 0.05,
            sigma_min: 0.1,
            dynamic_threshold: 0.5,
            similarity_temperature: 0.1,
            coord_weight: 0.05,
            coord_scale: 10.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct FusedDescriptors {
    pub coords: Vec<Point3>,
    pub feats: Tensor,
}

#[derive(Debug, Clone, Default)]
pub struct MatchSet {
    pub pairs: Vec<(usize, usize)>,
    pub tau: Vec<f64>,
    pub src_pts: Vec<Point3>,
    pub dst_pts: Vec<Point3>,
    pub refined_dst_pts: Vec<Point3>,
}

impl MatchSet {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Mean retained confidence.
    pub fn frame_confidence(&self) -> f64 {
        if self.tau.is_empty() {
            0.0
        } else {
            self.tau.iter().sum::<f64>() / self.tau.len() as f64
        }
    }

    pub fn retain(&self, keep: &[bool]) -> MatchSet {
        let pick = |v: &[Point3]| -> Vec<Point3> {
            v.iter().zip(keep).filter(|(_, k)| **k).map(|(p, _)| *p).collect()
        };
        MatchSet {
            pairs: self.pairs.iter().zip(keep).filter(|(_, k)| **k).map(|(p, _)| *p).collect(),
            tau: self.tau.iter().zip(keep).filter(|(_, k)| **k).map(|(t, _)| *t).collect(),
            src_pts: pick(&self.src_pts),
            dst_pts: pick(&self.dst_pts),
            refined_dst_pts: pick(&self.refined_dst_pts),
        }
    }

    /// Pairs built from known correspondences, e.g. an oracle.
    pub fn from_points(src_pts: Vec<Point3>, dst_pts: Vec<Point3>) -> MatchSet {
        let n = src_pts.len().min(dst_pts.len());
        MatchSet {
            pairs: (0..n).map(|i| (i, i)).collect(),
            tau: vec![1.0; n],
            refined_dst_pts: dst_pts[..n].to_vec(),
            src_pts: src_pts[..n].to_vec(),
            dst_pts: dst_pts[..n].to_vec(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct DynamicPrediction {
    /// `N×2`: independent (dynamic, static) probabilities.
    pub probs: Tensor,
    pub keep_mask: Vec<bool>,
}

#[derive(Debug, Clone)]
pub struct ImportanceOutput {
    pub q_raw: [f64; 4],
    pub q: UnitQuaternion,
    pub sigma_p: Vec<f64>,
    pub t_tilde: Point3,
}

/// Self-attention within each set, cross-attention between them, then an
/// MLP, each with a residual connection.
#[derive(Debug, Clone)]
pub struct FusionBlock {
    pub self_attn: MultiHeadAttention,
    pub cross_attn: MultiHeadAttention,
    pub mlp: Mlp,
}

impl FusionBlock {
    pub fn forward(&self, g: &mut Graph, store: &ParameterStore, src: Var, dst: Var) -> Result<(Var, Var)> {
        let sa = self.self_attn.self_attention(g, store, src)?;
        let s = g.add(src, sa)?;
        let da = self.self_attn.self_attention(g, store, dst)?;
        let d = g.add(dst, da)?;
        let sc = self.cross_attn.forward(g, store, s, d, d)?;
        let dc = self.cross_attn.forward(g, store, d, s, s)?;
        let s = g.add(s, sc)?;
        let d = g.add(d, dc)?;
        let sm = self.mlp.forward(g, store, s)?;
        let dm = self.mlp.forward(g, store, d)?;
        Ok((g.add(s, sm)?, g.add(d, dm)?))
    }
}

/// Graph outputs of the importance head.
#[derive(Debug, Clone, Copy)]
pub struct ImportanceVars {
    /// `1×4` raw quaternion.
    pub q_raw: Var,
    /// `P×1` score logits.
    pub sigma_logits: Var,
}

#[derive(Debug, Clone)]
pub struct Decoder {
    pub config: DecoderConfig,
    pub fusion: FusionBlock,
    pub segmentation: Vec<MultiHeadAttention>,
    pub segmentation_mlp: Mlp,
    pub offset: Mlp,
    pub importance_mlp: Mlp,
    pub importance_kan: KanLinear,
    pub sigma_out: Linear,
    pub quat_kan: KanLinear,
    pub loop_shared: Mlp,
    pub loop_out: Mlp,
}

impl Decoder {
    pub fn init(store: &mut ParameterStore, dim: usize, config: DecoderConfig, rng: &mut impl Rng) -> Result<Self> {
        let heads = config.attention_heads;
        let fusion = FusionBlock {
            self_attn: MultiHeadAttention::init(store, "dec.fuse.self", dim, heads, rng)?,
            cross_attn: MultiHeadAttention::init(store, "dec.fuse.cross", dim, heads, rng)?,
            mlp: Mlp::init(store, "dec.fuse.mlp", &[dim, 2 * dim, dim], rng),
        };
        let segmentation = (0..config.segmentation_blocks)
            .map(|b| MultiHeadAttention::init(store, &format!("dec.seg.attn{b}"), dim, heads, rng))
            .collect::<Result<Vec<_>>>()?;
        let segmentation_mlp = Mlp::init(store, "dec.seg.mlp", &[dim, dim, 2], rng);
        let offset = Mlp::init(store, "dec.offset", &[2 * dim, dim, 3], rng);
        let importance_mlp = Mlp::init(store, "dec.imp.mlp", &[2 * dim + 6, dim, dim], rng);
        let grid = SplineGrid::default();
        let importance_kan = KanLinear::init(store, "dec.imp.kan", dim, dim, grid, rng);
        let sigma_out = Linear::init(store, "dec.imp.sigma", dim, 1, rng);
        let quat_kan = KanLinear::init(store, "dec.imp.quat", dim, 4, grid, rng);
        let loop_shared = Mlp::init(store, "loop.shared", &[dim, dim, dim], rng);
        let loop_out = Mlp::init(store, "loop.out", &[2 * dim, dim, 1], rng);
        Ok(Self {
            config,
            fusion,
            segmentation,
            segmentation_mlp,
            offset,
            importance_mlp,
            importance_kan,
            sigma_out,
            quat_kan,
            loop_shared,
            loop_out,
        })
    }

    /// `N×2` logits for (dynamic, static).
    pub fn segmentation_logits(&self, g: &mut Graph, store: &ParameterStore, feats: Var) -> Result<Var> {
        let mut h = feats;
        for block in &self.segmentation {
            let a = block.self_attention(g, store, h)?;
            h = g.add(h, a)?;
        }
        self.segmentation_mlp.forward(g, store, h)
    }

    /// `P×3` offsets from the concatenated matched features.
    pub fn offsets(&self, g: &mut Graph, store: &ParameterStore, src: Var, dst: Var, pairs: &[(usize, usize)]) -> Result<Var> {
        let (si, di): (Vec<usize>, Vec<usize>) = pairs.iter().copied().unzip();
        let s = g.gather_rows(src, &si);
        let d = g.gather_rows(dst, &di);
        let cat = g.concat_cols(&[s, d])?;
        self.offset.forward(g, store, cat)
    }

    /// Pairwise trunk (MLP, KAN), per-pair score logits and a pooled raw
    /// quaternion. The quaternion output is offset by the identity so an
    /// untrained head starts near no rotation.
    pub fn importance(
        &self,
        g: &mut Graph,
        store: &ParameterStore,
        src: Var,
        dst: Var,
        pairs: &[(usize, usize)],
        src_pts: &[Point3],
        dst_pts: &[Point3],
    ) -> Result<ImportanceVars> {
        let (si, di): (Vec<usize>, Vec<usize>) = pairs.iter().copied().unzip();
        let s = g.gather_rows(src, &si);
        let d = g.gather_rows(dst, &di);
        let scale = self.config.coord_scale;
        let mut geo = Tensor::zeros(pairs.len(), 6);
        for (r, (a, b)) in src_pts.iter().zip(dst_pts).enumerate() {
            let (a, b) = (*a / scale, *b / scale);
            geo.row_mut(r).copy_from_slice(&[a.x, a.y, a.z, b.x, b.y, b.z]);
        }
        let geo = g.constant(geo);
        let cat = g.concat_cols(&[s, d, geo])?;
        let h = self.importance_mlp.forward(g, store, cat)?;
        let h = g.tanh(h);
        let h = self.importance_kan.forward(g, store, h)?;
        let sigma_logits = self.sigma_out.forward(g, store, h)?;
        let pooled = g.mean_rows(h);
        let pooled = g.tanh(pooled);
        let q = kan_forward(std::slice::from_ref(&self.quat_kan), g, store, pooled)?;
        let identity = g.constant(Tensor::from_rows(&[vec![1.0, 0.0, 0.0, 0.0]]));
        let q_raw = g.add(q, identity)?;
        Ok(ImportanceVars { q_raw, sigma_logits })
    }

    /// Loop logit (`1×1`) from two descriptor sets through a shared
    /// per-descriptor MLP, max pooling and an output MLP.
    pub fn loop_logit(&self, g: &mut Graph, store: &ParameterStore, src: Var, dst: Var) -> Result<Var> {
        let a = self.loop_shared.forward(g, store, src)?;
        let b = self.loop_shared.forward(g, store, dst)?;
        let na = g.value(a).rows();
        let nb = g.value(b).rows();
        let a = g.group_max(a, na)?;
        let b = g.group_max(b, nb)?;
        let diff = g.sub(a, b)?;
        let sq = g.mul(diff, diff)?;
        let prod = g.mul(a, b)?;
        let cat = g.concat_cols(&[sq, prod])?;
        self.loop_out.forward(g, store, cat)
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Attention fusion of two descriptor sets; coordinates pass through.
pub fn attention_fuse(
    model: &Model,
    src: &DescriptorSet,
    dst: &DescriptorSet,
) -> Result<(FusedDescriptors, FusedDescriptors)> {
    if src.is_empty() || dst.is_empty() {
        return Err(Error::NoCorrespondences);
    }
    let mut g = Graph::new();
    let s = g.constant(src.feats.clone());
    let d = g.constant(dst.feats.clone());
    let (fs, fd) = model.decoder.fusion.forward(&mut g, &model.store, s, d)?;
    Ok((
        FusedDescriptors {
            coords: src.coords.clone(),
            feats: g.value(fs).clone(),
        },
        FusedDescriptors {
            coords: dst.coords.clone(),
            feats: g.value(fd).clone(),
        },
    ))
}

/// Probabilities from independent sigmoids; descriptors with dynamic
/// probability at or below `threshold` are kept.
pub fn dynamic_segment(model: &Model, desc: &DescriptorSet, threshold: f64) -> Result<DynamicPrediction> {
    let mut g = Graph::new();
    let x = g.constant(desc.feats.clone());
    let logits = model.decoder.segmentation_logits(&mut g, &model.store, x)?;
    Ok(prediction_from_logits(g.value(logits), threshold))
}

pub fn prediction_from_logits(logits: &Tensor, threshold: f64) -> DynamicPrediction {
    let probs = logits.map(sigmoid);
    let keep_mask = (0..probs.rows()).map(|r| probs.get(r, 0) <= threshold).collect();
    DynamicPrediction { probs, keep_mask }
}

/// Row vectors `[w·p, f/‖f‖]`, L2-normalized.
fn matching_rows(coords: &[Point3], feats: &Tensor, coord_weight: f64) -> Tensor {
    let c = feats.cols();
    let mut out = Tensor::zeros(coords.len(), c + 3);
    for (r, p) in coords.iter().enumerate() {
        let f = feats.row(r);
        let fnorm = f.iter().map(|v| v * v).sum::<f64>().sqrt() + 1e-12;
        let row = out.row_mut(r);
        row[..3].copy_from_slice(&[coord_weight * p.x, coord_weight * p.y, coord_weight * p.z]);
        for (o, v) in row[3..].iter_mut().zip(f) {
            *o = v / fnorm;
        }
        let n = row.iter().map(|v| v * v).sum::<f64>().sqrt() + 1e-12;
        row.iter_mut().for_each(|v| *v /= n);
    }
    out
}

/// Matching confidence matrix: row-softmax times column-softmax of the
/// scaled cosine similarity between the concatenated descriptors.
pub fn confidence_matrix(
    src: &FusedDescriptors,
    dst: &FusedDescriptors,
    coord_weight: f64,
    temperature: f64,
) -> Result<Tensor> {
    if src.coords.is_empty() || dst.coords.is_empty() {
        return Err(Error::NoCorrespondences);
    }
    let a = matching_rows(&src.coords, &src.feats, coord_weight);
    let b = matching_rows(&dst.coords, &dst.feats, coord_weight);
    let sim = a.matmul(&b.transpose())?.map(|v| v / temperature);
    let rows = crate::numerics::softmax_rows_value(&sim);
    let cols = crate::numerics::softmax_rows_value(&sim.transpose()).transpose();
    let mut out = rows;
    for (o, c) in out.data_mut().iter_mut().zip(cols.data()) {
        *o *= c;
    }
    Ok(out)
}

/// Row maxima of the confidence matrix; pairs with `τ ≥ tau_threshold` kept.
pub fn similarity_match(
    src: &FusedDescriptors,
    dst: &FusedDescriptors,
    tau_threshold: f64,
    coord_weight: f64,
    temperature: f64,
) -> Result<MatchSet> {
    let conf = confidence_matrix(src, dst, coord_weight, temperature)?;
    let mut m = MatchSet::default();
    for r in 0..conf.rows() {
        let row = conf.row(r);
        let (j, &tau) = row
            .iter()
            .enumerate()
            .fold((0, &f64::NEG_INFINITY), |best, cur| if *cur.1 > *best.1 { cur } else { best });
        if tau >= tau_threshold {
            m.pairs.push((r, j));
            m.tau.push(tau);
            m.src_pts.push(src.coords[r]);
            m.dst_pts.push(dst.coords[j]);
            m.refined_dst_pts.push(dst.coords[j]);
        }
    }
    if m.is_empty() {
        return Err(Error::NoCorrespondences);
    }
    Ok(m)
}

/// Applies predicted per-pair offsets to the destination side.
pub fn apply_offsets(matched: &MatchSet, offsets: &Tensor) -> MatchSet {
    let mut out = matched.clone();
    for (r, (p, d)) in out.refined_dst_pts.iter_mut().zip(&matched.dst_pts).enumerate() {
        let o = offsets.row(r);
        *p = *d + Point3::new(o[0], o[1], o[2]);
    }
    out
}

pub fn offset_predict(model: &Model, matched: &MatchSet, src: &FusedDescriptors, dst: &FusedDescriptors) -> Result<MatchSet> {
    if matched.is_empty() {
        return Err(Error::NoCorrespondences);
    }
    let mut g = Graph::new();
    let s = g.constant(src.feats.clone());
    let d = g.constant(dst.feats.clone());
    let o = model.decoder.offsets(&mut g, &model.store, s, d, &matched.pairs)?;
    Ok(apply_offsets(matched, g.value(o)))
}

/// Translation that carries the rotated source centroid onto the
/// destination centroid: `dst_ctr − R(q)·src_ctr`.
pub fn derive_translation(q: UnitQuaternion, src_pts: &[Point3], dst_pts: &[Point3]) -> Result<Point3> {
    let s = centroid(src_pts)?;
    let d = centroid(dst_pts)?;
    Ok(d - q.rotate(s))
}

pub fn importance_score(
    model: &Model,
    matched: &MatchSet,
    src: &FusedDescriptors,
    dst: &FusedDescriptors,
) -> Result<ImportanceOutput> {
    if matched.len() < 3 {
        return Err(Error::DegenerateCorrespondences(matched.len()));
    }
    let mut g = Graph::new();
    let s = g.constant(src.feats.clone());
    let d = g.constant(dst.feats.clone());
    let out = model.decoder.importance(
        &mut g,
        &model.store,
        s,
        d,
        &matched.pairs,
        &matched.src_pts,
        &matched.refined_dst_pts,
    )?;
    let raw = g.value(out.q_raw).data();
    let q_raw = [raw[0], raw[1], raw[2], raw[3]];
    let q = UnitQuaternion::new_normalize(q_raw[0], q_raw[1], q_raw[2], q_raw[3]);
    let sigma_p = g.value(out.sigma_logits).data().iter().map(|z| sigmoid(*z)).collect();
    let t_tilde = derive_translation(q, &matched.src_pts, &matched.refined_dst_pts)?;
    Ok(ImportanceOutput {
        q_raw,
        q,
        sigma_p,
        t_tilde,
    })
}

/// Weighted Kabsch: the rigid transform minimizing
/// `Σ w‖R·src + t − dst‖²`, with reflections excluded.
pub fn weighted_svd_solve(src: &[Point3], dst: &[Point3], weights: &[f64]) -> Result<RigidTransform> {
    if src.len() != dst.len() || src.len() != weights.len() {
        return Err(Error::LengthMismatch(src.len(), dst.len().min(weights.len())));
    }
    let live = weights.iter().filter(|w| **w > 0.0).count();
    let total: f64 = weights.iter().sum();
    if live < 3 || !(total > 0.0) {
        return Err(Error::DegenerateCorrespondences(live));
    }
    let mut xs = Point3::ZERO;
    let mut ys = Point3::ZERO;
    for ((x, y), w) in src.iter().zip(dst).zip(weights) {
        xs += *x * *w;
        ys += *y * *w;
    }
    let (xc, yc) = (xs / total, ys / total);
    let mut h = Matrix3::zeros();
    for ((x, y), w) in src.iter().zip(dst).zip(weights) {
        h += (*x - xc).to_vector() * (*w) * (*y - yc).to_vector().transpose();
    }
    let svd = svd3(&h);
    if !(svd.s[0] > 0.0) || svd.s[1] <= 1e-10 * svd.s[0] {
        return Err(Error::IllConditioned);
    }
    let d = (svd.v * svd.u.transpose()).determinant().signum();
    let r = svd.v * Matrix3::from_diagonal(&nalgebra::Vector3::new(1.0, 1.0, d)) * svd.u.transpose();
    let rotation = UnitQuaternion::from_matrix(&r);
    let t = yc - rotation.rotate(xc);
    Ok(RigidTransform::new(rotation, t))
}

/// Root mean squared residual `‖dst − T·src‖` over the pairs.
pub fn rmse_pairs(src: &[Point3], dst: &[Point3], t: &RigidTransform) -> Result<f64> {
    if src.is_empty() || src.len() != dst.len() {
        return Err(Error::EmptyPoints);
    }
    let s: f64 = src
        .iter()
        .zip(dst)
        .map(|(x, y)| (*y - t.apply_point(*x)).norm_squared())
        .sum();
    Ok((s / src.len() as f64).sqrt())
}

pub fn loop_closure_prob(model: &Model, src: &FusedDescriptors, dst: &FusedDescriptors) -> Result<f64> {
    if src.coords.is_empty() || dst.coords.is_empty() {
        return Err(Error::NoCorrespondences);
    }
    let mut g = Graph::new();
    let s = g.constant(src.feats.clone());
    let d = g.constant(dst.feats.clone());
    let z = model.decoder.loop_logit(&mut g, &model.store, s, d)?;
    Ok(sigmoid(g.value(z).item()))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RegisterOptions {
    pub dynamic_filter: bool,
}

impl Default for RegisterOptions {
    fn default() -> Self {
        Self { dynamic_filter: true }
    }
}

#[derive(Debug, Clone)]
pub struct Registration {
    /// Maps source coordinates into the destination frame.
    pub transform: RigidTransform,
    pub matches: MatchSet,
    pub sigma_p: Vec<f64>,
    pub tau_frame: f64,
    pub rmse: f64,
}

/// Keeps pairs with `σ_p ≥ sigma_min` and solves the weighted alignment.
pub fn solve_matches(matches: &MatchSet, sigma_p: &[f64], sigma_min: f64) -> Result<Registration> {
    let keep: Vec<bool> = sigma_p.iter().map(|s| *s >= sigma_min).collect();
    let kept = matches.retain(&keep);
    let weights: Vec<f64> = sigma_p.iter().copied().filter(|s| *s >= sigma_min).collect();
    if kept.len() < 3 {
        return Err(Error::DegenerateCorrespondences(kept.len()));
    }
    let transform = weighted_svd_solve(&kept.src_pts, &kept.refined_dst_pts, &weights)?;
    let rmse = rmse_pairs(&kept.src_pts, &kept.refined_dst_pts, &transform)?;
    Ok(Registration {
        transform,
        tau_frame: kept.frame_confidence(),
        matches: kept,
        sigma_p: weights,
        rmse,
    })
}

/// Descriptor sets of both clouds after optional dynamic filtering.
pub fn describe_pair(
    model: &Model,
    src_cloud: &PointCloud,
    dst_cloud: &PointCloud,
    options: RegisterOptions,
) -> Result<(DescriptorSet, DescriptorSet)> {
    let filter = |d: DescriptorSet| -> Result<DescriptorSet> {
        if !options.dynamic_filter {
            return Ok(d);
        }
        let pred = dynamic_segment(model, &d, model.config.decoder.dynamic_threshold)?;
        let keep: Vec<usize> = (0..d.len()).filter(|&i| pred.keep_mask[i]).collect();
        Ok(d.select(&keep))
    };
    let src = filter(model.encoder.encode(&model.store, src_cloud)?)?;
    let dst = filter(model.encoder.encode(&model.store, dst_cloud)?)?;
    Ok((src, dst))
}

/// Full pipeline: encode, filter dynamic descriptors, fuse, match, refine
/// with offsets, score, drop low-scoring pairs and solve.
pub fn register(
    model: &Model,
    src_cloud: &PointCloud,
    dst_cloud: &PointCloud,
    options: RegisterOptions,
) -> Result<Registration> {
    let (src, dst) = describe_pair(model, src_cloud, dst_cloud, options)?;
    register_descriptors(model, &src, &dst)
}

pub fn register_descriptors(model: &Model, src: &DescriptorSet, dst: &DescriptorSet) -> Result<Registration> {
    let cfg = &model.config.decoder;
    let (fs, fd) = attention_fuse(model, src, dst)?;
    let matched = similarity_match(&fs, &fd, cfg.tau_threshold, cfg.coord_weight, cfg.similarity_temperature)?;
    let refined = offset_predict(model, &matched, &fs, &fd)?;
    let imp = importance_score(model, &refined, &fs, &fd)?;
    solve_matches(&refined, &imp.sigma_p, cfg.sigma_min)
}
