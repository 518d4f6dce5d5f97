//! Training-time augmentation: sampling, sector occlusion, random rigid
//! motion, noise and local-map assembly.

use rand::seq::index::sample;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::Error;
use crate::geometry::{random_sample_pad, Point3, PointCloud, RigidTransform, UnitQuaternion};
use crate::Result;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentationConfig {
    pub sample_n: usize,
    pub occlusion_regions: [usize; 2],
    pub occlusion_angle_deg: [f64; 2],
    pub occlusion_range: [f64; 2],
    /// Each rotation-vector component is uniform on `[−s, s]` (rad).
    pub rotation_scale: f64,
    /// Each translation component is uniform on `[−s, s]` (m).
    pub translation_scale: f64,
    pub localmap_start: usize,
    pub localmap_double_every: usize,
    pub localmap_cap: usize,
    pub noise_ratio: f64,
    pub noise_sigma: f64,
    pub noise_clamp: f64,
}

impl Default for AugmentationConfig {
    fn default() -> Self {
        AugmentationConfig {
            sample_n: 16384,
            occlusion_regions: [1, 3],
            occlusion_angle_deg: [10.0, 150.0],
            occlusion_range: [2.0, 10.0],
            rotation_scale: std::f64::consts::PI,
            translation_scale: 3.0,
            localmap_start: 2,
            localmap_double_every: 3,
            localmap_cap: 16,
            noise_ratio: 0.0,
            noise_sigma: 0.1,
            noise_clamp: 0.2,
        }
    }
}

impl AugmentationConfig {
    /// Desk-scale preset: 1024-point samples and small random motions.
    pub fn desk() -> Self {
        AugmentationConfig {
            sample_n: 1024,
            rotation_scale: 0.1,
            translation_scale: 1.0,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if self.sample_n == 0 {
            return bad("sample_n must be positive");
        }
        if self.occlusion_regions[0] > self.occlusion_regions[1]
            || self.occlusion_angle_deg[0] > self.occlusion_angle_deg[1]
            || self.occlusion_range[0] > self.occlusion_range[1]
        {
            return bad("occlusion ranges must be ordered");
        }
        if !(0.0..=0.5).contains(&self.noise_ratio) {
            return bad("noise_ratio must lie in [0, 0.5]");
        }
        if self.rotation_scale < 0.0 || self.translation_scale < 0.0 {
            return bad("transform scales must be non-negative");
        }
        Ok(())
    }

    /// Neighboring frames merged into the local map at `epoch`: starts at
    /// `localmap_start`, doubles every `localmap_double_every` epochs, capped.
    pub fn localmap_frames(&self, epoch: usize) -> usize {
        let doublings = (epoch / self.localmap_double_every.max(1)).min(32) as u32;
        self.localmap_start.saturating_mul(1usize << doublings).min(self.localmap_cap)
    }
}

/// Points with azimuth inside a sector and horizontal range inside a band.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OcclusionSector {
    pub center_azimuth: f64,
    pub width: f64,
    pub range_min: f64,
    pub range_max: f64,
}

impl OcclusionSector {
    pub fn contains(&self, p: Point3) -> bool {
        let r = (p.x * p.x + p.y * p.y).sqrt();
        if r < self.range_min || r > self.range_max {
            return false;
        }
        let d = (p.y.atan2(p.x) - self.center_azimuth + std::f64::consts::PI).rem_euclid(std::f64::consts::TAU)
            - std::f64::consts::PI;
        d.abs() <= self.width / 2.0
    }
}

pub fn random_sectors(cfg: &AugmentationConfig, rng: &mut impl Rng) -> Vec<OcclusionSector> {
    let count = rng.random_range(cfg.occlusion_regions[0]..=cfg.occlusion_regions[1]);
    (0..count)
        .map(|_| OcclusionSector {
            center_azimuth: rng.random_range(-std::f64::consts::PI..std::f64::consts::PI),
            width: rng.random_range(cfg.occlusion_angle_deg[0]..=cfg.occlusion_angle_deg[1]).to_radians(),
            range_min: cfg.occlusion_range[0],
            range_max: cfg.occlusion_range[1],
        })
        .collect()
}

/// Removes every point inside any sector.
pub fn occlude(cloud: &PointCloud, sectors: &[OcclusionSector]) -> PointCloud {
    let keep: Vec<usize> = (0..cloud.len())
        .filter(|&i| !sectors.iter().any(|s| s.contains(cloud.points[i])))
        .collect();
    cloud.select(&keep)
}

pub fn random_transform(rotation_scale: f64, translation_scale: f64, rng: &mut impl Rng) -> RigidTransform {
    let mut u = |s: f64| if s > 0.0 { rng.random_range(-s..=s) } else { 0.0 };
    let w = Point3::new(u(rotation_scale), u(rotation_scale), u(rotation_scale));
    let t = Point3::new(u(translation_scale), u(translation_scale), u(translation_scale));
    RigidTransform::new(UnitQuaternion::from_rotation_vector(w), t)
}

/// Perturbs `floor(ratio·n)` valid points by clipped Gaussian noise.
pub fn add_noise(cloud: &mut PointCloud, ratio: f64, sigma: f64, clamp: f64, rng: &mut impl Rng) -> Result<()> {
    let valid: Vec<usize> = (0..cloud.len()).filter(|&i| cloud.valid[i]).collect();
    let count = (ratio * valid.len() as f64).floor() as usize;
    if count == 0 {
        return Ok(());
    }
    let normal = Normal::new(0.0, sigma).map_err(|e| Error::Config(e.to_string()))?;
    for k in sample(rng, valid.len(), count) {
        let mut j = || normal.sample(rng).clamp(-clamp, clamp);
        let delta = Point3::new(j(), j(), j());
        cloud.points[valid[k]] += delta;
    }
    Ok(())
}

/// An augmented frame. `transform` maps the sampled cloud onto `cloud`.
#[derive(Debug, Clone)]
pub struct Augmented {
    pub cloud: PointCloud,
    pub sampled: PointCloud,
    pub transform: RigidTransform,
    pub sectors: Vec<OcclusionSector>,
}

/// Occludes, samples to `sample_n`, injects noise and applies a random
/// rigid transform.
pub fn augment(frame: &PointCloud, cfg: &AugmentationConfig, rng: &mut impl Rng) -> Result<Augmented> {
    let sectors = random_sectors(cfg, rng);
    let occluded = occlude(frame, &sectors);
    if occluded.valid_count() == 0 {
        return Err(Error::EmptyPoints);
    }
    let mut sampled = random_sample_pad(&occluded, cfg.sample_n, rng.random());
    add_noise(&mut sampled, cfg.noise_ratio, cfg.noise_sigma, cfg.noise_clamp, rng)?;
    let transform = random_transform(cfg.rotation_scale, cfg.translation_scale, rng);
    Ok(Augmented {
        cloud: transform.apply(&sampled),
        sampled,
        transform,
        sectors,
    })
}

/// Merges frames into the coordinates of `frames[center]`, given
/// sensor-to-world poses; labels are kept when every frame has them.
pub fn merge_frames(frames: &[&PointCloud], poses: &[RigidTransform], center: usize) -> PointCloud {
    let to_center = poses[center].inverse();
    let mut out = PointCloud::default();
    let labeled = frames.iter().all(|f| f.labels.is_some());
    let mut labels = Vec::new();
    for (f, p) in frames.iter().zip(poses) {
        let rel = to_center.compose(p);
        let moved = rel.apply(&f.valid_only());
        if labeled {
            labels.extend(moved.labels.clone().unwrap_or_default());
        }
        out.points.extend(moved.points);
        out.valid.extend(moved.valid);
    }
    if labeled {
        out.labels = Some(labels);
    }
    out.frame_id = frames[center].frame_id;
    out
}
