//! Sparse descriptor encoder.
//!
//! A small hierarchical point encoder produces a dense shallow level and a
//! sparse deep level. Cross-layer sampling links every deep anchor to `K`
//! shallow points at a controlled distance band, and the intra-graph
//! convolution turns each neighborhood into one descriptor.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::geometry::{farthest_point_sampling, KdTree, Point3, PointCloud, PointLabel};
use crate::numerics::{Graph, Linear, Mlp, ParameterStore, Tensor, Var};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LevelTag {
    Shallow,
    Deep,
}

#[derive(Debug, Clone)]
pub struct FeatureLevel {
    pub coords: Vec<Point3>,
    pub feats: Tensor,
    pub level_tag: LevelTag,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DescriptorSet {
    pub coords: Vec<Point3>,
    pub feats: Tensor,
    pub source_frame: usize,
    /// Labels carried over from the input points the descriptors sit on.
    pub labels: Option<Vec<PointLabel>>,
}

impl DescriptorSet {
    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn select(&self, indices: &[usize]) -> DescriptorSet {
        DescriptorSet {
            coords: indices.iter().map(|&i| self.coords[i]).collect(),
            feats: self.feats.select_rows(indices),
            source_frame: self.source_frame,
            labels: self.labels.as_ref().map(|l| indices.iter().map(|&i| l[i]).collect()),
        }
    }
}

/// Deep anchors linked to `k` shallow points each; row `a·k + j` is the
/// `j`-th neighbor of anchor `a`.
#[derive(Debug, Clone, PartialEq)]
pub struct NeighborhoodGraph {
    pub k: usize,
    pub anchor_index: Vec<usize>,
    pub neighbor_index: Vec<usize>,
    /// Shallow point minus its deep anchor, meters.
    pub grouped_offsets: Vec<Point3>,
}

impl NeighborhoodGraph {
    pub fn anchors(&self) -> usize {
        self.anchor_index.len() / self.k.max(1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    /// Descriptor feature width `C`.
    pub feature_dim: usize,
    /// Shallow level size `M`.
    pub shallow_points: usize,
    /// Coarsest set-abstraction level size.
    pub coarse_points: usize,
    /// Deep level size `N`, the descriptor budget.
    pub deep_points: usize,
    /// Cross-layer neighbors per deep anchor.
    pub neighbors: usize,
    /// Points grouped per set-abstraction centroid.
    pub group_size: usize,
    pub shallow_radius: f64,
    pub coarse_radius: f64,
    pub band_lo: f64,
    pub band_hi: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            feature_dim: 32,
            shallow_points: 256,
            coarse_points: 16,
            deep_points: 64,
            neighbors: 8,
            group_size: 16,
            shallow_radius: 1.5,
            coarse_radius: 6.0,
            band_lo: 0.5,
            band_hi: 1.0,
        }
    }
}

/// Set-abstraction groups: for each center the `k` nearest points, with
/// neighbors beyond `radius` replaced by the nearest one.
fn ball_group(centers: &[Point3], points: &[Point3], k: usize, radius: f64) -> Vec<usize> {
    let tree = KdTree::build(points);
    let mut out = Vec::with_capacity(centers.len() * k);
    for c in centers {
        let nn = tree.nearest(*c, k);
        let first = nn[0].index;
        for j in 0..k {
            match nn.get(j) {
                Some(n) if n.distance <= radius => out.push(n.index),
                _ => out.push(first),
            }
        }
    }
    out
}

/// Relative offset and distance of each grouped point, scaled by `radius`.
fn group_geometry(centers: &[Point3], points: &[Point3], idx: &[usize], k: usize, radius: f64) -> Tensor {
    let mut t = Tensor::zeros(idx.len(), 4);
    for (r, &i) in idx.iter().enumerate() {
        let d = (points[i] - centers[r / k]) / radius;
        t.row_mut(r).copy_from_slice(&[d.x, d.y, d.z, d.norm()]);
    }
    t
}

/// Inverse-distance weights from each target to its three nearest sources.
fn interpolation_weights(targets: &[Point3], sources: &[Point3]) -> Tensor {
    let tree = KdTree::build(sources);
    let mut w = Tensor::zeros(targets.len(), sources.len());
    for (r, t) in targets.iter().enumerate() {
        let nn = tree.nearest(*t, 3);
        let inv: Vec<f64> = nn.iter().map(|n| 1.0 / (n.distance + 1e-8)).collect();
        let total: f64 = inv.iter().sum();
        for (n, v) in nn.iter().zip(&inv) {
            w.set(r, n.index, v / total);
        }
    }
    w
}

/// Picks `k` shallow neighbors per deep anchor: points whose distance lies in
/// `[d_lo, d_hi]` first, then points beyond `d_hi`, both nearest-first. If
/// both bands together hold fewer than `k` points, the remainder comes from
/// inside `d_lo`, farthest-first.
pub fn cross_layer_sample(
    deep: &[Point3],
    shallow: &[Point3],
    k: usize,
    d_lo: f64,
    d_hi: f64,
) -> Result<NeighborhoodGraph> {
    if k == 0 || shallow.len() < k {
        return Err(Error::InsufficientPoints {
            needed: k.max(1),
            available: shallow.len(),
        });
    }
    let mut anchor_index = Vec::with_capacity(deep.len() * k);
    let mut neighbor_index = Vec::with_capacity(deep.len() * k);
    let mut grouped_offsets = Vec::with_capacity(deep.len() * k);
    for (a, anchor) in deep.iter().enumerate() {
        let mut order: Vec<(f64, usize)> = shallow
            .iter()
            .enumerate()
            .map(|(i, p)| (p.distance(*anchor), i))
            .collect();
        order.sort_by(|x, y| x.0.total_cmp(&y.0).then(x.1.cmp(&y.1)));
        let in_band = order.iter().filter(|(d, _)| *d >= d_lo && *d <= d_hi);
        let beyond = order.iter().filter(|(d, _)| *d > d_hi);
        let inside = order.iter().rev().filter(|(d, _)| *d < d_lo);
        for &(_, i) in in_band.chain(beyond).chain(inside).take(k) {
            anchor_index.push(a);
            neighbor_index.push(i);
            grouped_offsets.push(shallow[i] - *anchor);
        }
    }
    Ok(NeighborhoodGraph {
        k,
        anchor_index,
        neighbor_index,
        grouped_offsets,
    })
}

/// Node branch (1×3 kernel along each neighborhood row), per-anchor edge
/// branch, and the integrating MLP followed by a max over each neighborhood.
#[derive(Debug, Clone)]
pub struct IntraGraphConv {
    pub prefix: String,
    pub dim: usize,
    pub k: usize,
    pub anchor_bank: usize,
    pub mlp: Mlp,
}

impl IntraGraphConv {
    pub fn init(
        store: &mut ParameterStore,
        prefix: &str,
        dim: usize,
        k: usize,
        anchor_bank: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let tap_bound = 1.0 / ((3 * dim) as f64).sqrt();
        for tap in 0..3 {
            let w = uniform(rng, dim, dim, tap_bound);
            store.insert(&format!("{prefix}.node.w{tap}"), w);
        }
        store.insert(&format!("{prefix}.node.b"), uniform(rng, 1, dim, tap_bound));
        // Every anchor's edge weights start from the same draw so descriptors
        // do not depend on anchor order at initialization.
        let w1 = uniform(rng, dim, k, 1.0 / (dim as f64).sqrt());
        let w2 = uniform(rng, k, 1, 1.0 / (k as f64).sqrt());
        store.insert(&format!("{prefix}.edge.w1"), tile_rows(&w1, anchor_bank));
        store.insert(&format!("{prefix}.edge.w2"), tile_rows(&w2, anchor_bank));
        let mlp = Mlp::init(store, &format!("{prefix}.mlp"), &[2 * dim, 2 * dim, dim], rng);
        Self {
            prefix: prefix.to_string(),
            dim,
            k,
            anchor_bank,
            mlp,
        }
    }

    /// `grouped` is `(N·K)×C`; returns `N×C`.
    pub fn forward(&self, g: &mut Graph, store: &ParameterStore, grouped: Var) -> Result<Var> {
        let rows = g.value(grouped).rows();
        let cols = g.value(grouped).cols();
        if cols != self.dim || !rows.is_multiple_of(self.k) {
            return Err(Error::ShapeMismatch {
                op: "intra_graph_conv",
                left: vec![rows, cols],
                right: vec![self.k, self.dim],
            });
        }
        let n = rows / self.k;
        if n > self.anchor_bank {
            return Err(Error::InsufficientPoints {
                needed: n,
                available: self.anchor_bank,
            });
        }
        let k = self.k;
        let p = &self.prefix;

        // Node branch: zero padding at both ends of each row.
        let shift = |d: isize| -> Vec<Option<usize>> {
            (0..rows)
                .map(|r| {
                    let j = (r % k) as isize + d;
                    (0..k as isize).contains(&j).then(|| (r as isize + d) as usize)
                })
                .collect()
        };
        let mut node = None;
        for (tap, d) in [-1isize, 0, 1].into_iter().enumerate() {
            let w = g.param(store, &format!("{p}.node.w{tap}"))?;
            let src = if d == 0 { grouped } else { g.gather_rows_opt(grouped, shift(d)) };
            let term = g.matmul(src, w)?;
            node = Some(match node {
                None => term,
                Some(acc) => g.add(acc, term)?,
            });
        }
        let bias = g.param(store, &format!("{p}.node.b"))?;
        let node = g.add_row(node.expect("three taps"), bias)?;

        // Edge branch: per-anchor (K×C)(C×K)(K×1).
        let w1 = g.param(store, &format!("{p}.edge.w1"))?;
        let w2 = g.param(store, &format!("{p}.edge.w2"))?;
        let w1 = g.slice_rows(w1, 0, n * self.dim);
        let w2 = g.slice_rows(w2, 0, n * k);
        let e = g.bmm(grouped, w1, n)?;
        let edge = g.bmm(e, w2, n)?;

        let gated = g.mul_col(node, edge)?;
        let cat = g.concat_cols(&[gated, grouped])?;
        let h = self.mlp.forward(g, store, cat)?;
        g.group_max(h, k)
    }
}

fn uniform(rng: &mut impl Rng, rows: usize, cols: usize, bound: f64) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.random_range(-bound..=bound)).collect();
    Tensor::from_vec(rows, cols, data).expect("uniform shape")
}

fn tile_rows(t: &Tensor, times: usize) -> Tensor {
    let mut data = Vec::with_capacity(t.len() * times);
    for _ in 0..times {
        data.extend_from_slice(t.data());
    }
    Tensor::from_vec(t.rows() * times, t.cols(), data).expect("tile shape")
}

/// Graph-level outputs of the point-set stage.
#[derive(Debug, Clone)]
pub struct Levels {
    pub shallow_coords: Vec<Point3>,
    pub shallow: Var,
    pub deep_coords: Vec<Point3>,
    pub deep: Var,
    /// Index into the input cloud of every deep point.
    pub input_index: Vec<usize>,
}

/// Graph-level outputs of one encoder pass.
#[derive(Debug, Clone)]
pub struct EncodedCloud {
    pub shallow_coords: Vec<Point3>,
    pub shallow: Var,
    pub deep_coords: Vec<Point3>,
    pub deep: Var,
    pub neighborhood: NeighborhoodGraph,
    pub descriptors: Var,
    pub deep_labels: Option<Vec<PointLabel>>,
    pub frame_id: usize,
}

#[derive(Debug, Clone)]
pub struct Encoder {
    pub config: EncoderConfig,
    pub sa1: Mlp,
    pub sa2: Mlp,
    pub upsample: Mlp,
    pub group_proj: Linear,
    pub conv: IntraGraphConv,
}

impl Encoder {
    pub fn init(store: &mut ParameterStore, config: EncoderConfig, rng: &mut impl Rng) -> Self {
        let c = config.feature_dim;
        let sa1 = Mlp::init(store, "enc.sa1", &[4, c / 2, c], rng);
        let sa2 = Mlp::init(store, "enc.sa2", &[4 + c, c, c], rng);
        let upsample = Mlp::init(store, "enc.up", &[2 * c, c, c], rng);
        let group_proj = Linear::init(store, "enc.group", 2 * c + 3, c, rng);
        let conv = IntraGraphConv::init(store, "enc.conv", c, config.neighbors, config.deep_points, rng);
        Self {
            config,
            sa1,
            sa2,
            upsample,
            group_proj,
            conv,
        }
    }

    /// Shallow level: first set abstraction; deep level: farthest-point
    /// subset of the shallow points with features interpolated up from the
    /// coarse level and fused with the shallow skip features.
    pub fn hierarchical(
        &self,
        g: &mut Graph,
        store: &ParameterStore,
        cloud: &PointCloud,
    ) -> Result<Levels> {
        let cfg = &self.config;
        let valid: Vec<usize> = (0..cloud.len()).filter(|&i| cloud.valid[i]).collect();
        if valid.len() < cfg.deep_points || cfg.deep_points == 0 {
            return Err(Error::InsufficientPoints {
                needed: cfg.deep_points.max(1),
                available: valid.len(),
            });
        }
        let points: Vec<Point3> = valid.iter().map(|&i| cloud.points[i]).collect();

        let shallow_n = cfg.shallow_points.max(cfg.deep_points).min(points.len());
        let shallow_idx = farthest_point_sampling(&points, shallow_n)?;
        let shallow_coords: Vec<Point3> = shallow_idx.iter().map(|&i| points[i]).collect();
        let k1 = cfg.group_size.min(points.len());
        let groups = ball_group(&shallow_coords, &points, k1, cfg.shallow_radius);
        let geo = g.constant(group_geometry(&shallow_coords, &points, &groups, k1, cfg.shallow_radius));
        let h = self.sa1.forward(g, store, geo)?;
        let shallow = g.group_max(h, k1)?;

        let coarse_n = cfg.coarse_points.min(shallow_coords.len());
        let coarse_idx = farthest_point_sampling(&shallow_coords, coarse_n)?;
        let coarse_coords: Vec<Point3> = coarse_idx.iter().map(|&i| shallow_coords[i]).collect();
        let k2 = cfg.group_size.min(shallow_coords.len());
        let groups2 = ball_group(&coarse_coords, &shallow_coords, k2, cfg.coarse_radius);
        let geo2 = g.constant(group_geometry(&coarse_coords, &shallow_coords, &groups2, k2, cfg.coarse_radius));
        let feats2 = g.gather_rows(shallow, &groups2);
        let in2 = g.concat_cols(&[geo2, feats2])?;
        let h2 = self.sa2.forward(g, store, in2)?;
        let coarse = g.group_max(h2, k2)?;

        let deep_idx = farthest_point_sampling(&shallow_coords, cfg.deep_points)?;
        let deep_coords: Vec<Point3> = deep_idx.iter().map(|&i| shallow_coords[i]).collect();
        let w = g.constant(interpolation_weights(&deep_coords, &coarse_coords));
        let up = g.matmul(w, coarse)?;
        let skip = g.gather_rows(shallow, &deep_idx);
        let cat = g.concat_cols(&[up, skip])?;
        let deep = self.upsample.forward(g, store, cat)?;

        let input_index = deep_idx.iter().map(|&d| valid[shallow_idx[d]]).collect();
        Ok(Levels {
            shallow_coords,
            shallow,
            deep_coords,
            deep,
            input_index,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParameterStore, cloud: &PointCloud) -> Result<EncodedCloud> {
        let cfg = &self.config;
        let Levels {
            shallow_coords,
            shallow,
            deep_coords,
            deep,
            input_index,
        } = self.hierarchical(g, store, cloud)?;
        let neighborhood = cross_layer_sample(&deep_coords, &shallow_coords, cfg.neighbors, cfg.band_lo, cfg.band_hi)?;

        // Each grouped row sees the shallow neighbor, its deep anchor and
        // their relative position.
        let nbr = g.gather_rows(shallow, &neighborhood.neighbor_index);
        let anc = g.gather_rows(deep, &neighborhood.anchor_index);
        let mut off = Tensor::zeros(neighborhood.grouped_offsets.len(), 3);
        for (r, o) in neighborhood.grouped_offsets.iter().enumerate() {
            let o = *o / cfg.band_hi;
            off.row_mut(r).copy_from_slice(&[o.x, o.y, o.z]);
        }
        let off = g.constant(off);
        let cat = g.concat_cols(&[nbr, anc, off])?;
        let grouped = self.group_proj.forward(g, store, cat)?;
        let descriptors = self.conv.forward(g, store, grouped)?;

        let deep_labels = cloud
            .labels
            .as_ref()
            .map(|l| input_index.iter().map(|&i| l[i]).collect());
        Ok(EncodedCloud {
            shallow_coords,
            shallow,
            deep_coords,
            deep,
            neighborhood,
            descriptors,
            deep_labels,
            frame_id: cloud.frame_id,
        })
    }

    /// Value-level shallow and deep feature levels.
    pub fn hierarchical_encode(&self, store: &ParameterStore, cloud: &PointCloud) -> Result<(FeatureLevel, FeatureLevel)> {
        let mut g = Graph::new();
        let levels = self.hierarchical(&mut g, store, cloud)?;
        Ok((
            FeatureLevel {
                coords: levels.shallow_coords,
                feats: g.value(levels.shallow).clone(),
                level_tag: LevelTag::Shallow,
            },
            FeatureLevel {
                coords: levels.deep_coords,
                feats: g.value(levels.deep).clone(),
                level_tag: LevelTag::Deep,
            },
        ))
    }

    pub fn encode(&self, store: &ParameterStore, cloud: &PointCloud) -> Result<DescriptorSet> {
        let mut g = Graph::new();
        let out = self.forward(&mut g, store, cloud)?;
        Ok(DescriptorSet {
            coords: out.deep_coords,
            feats: g.value(out.descriptors).clone(),
            source_frame: cloud.frame_id,
            labels: out.deep_labels,
        })
    }
}
