//! Synthetic lidar sequences: a ray-cast static scene, moving boxes and
//! clipped Gaussian noise, with exact poses and per-point labels.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::Error;
use crate::geometry::{Point3, PointCloud, PointLabel, RigidTransform, UnitQuaternion};
use crate::Result;

const NOISE_STREAM: u64 = 0x6e6f697365;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoxSpec {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

/// Vertical cylinder standing on `z = 0`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CylinderSpec {
    pub center: [f64; 2],
    pub radius: f64,
    pub height: f64,
}

/// Box of `size` centered at `center` on frame 0, displaced by `velocity`
/// every frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MoverSpec {
    pub center: [f64; 3],
    pub size: [f64; 3],
    pub velocity: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSceneConfig {
    pub seed: u64,
    pub frames: usize,
    /// Distance travelled along the route per frame (m).
    pub step: f64,
    pub waypoints: Vec<[f64; 2]>,
    /// Route returns to the first waypoint and wraps around.
    pub closed: bool,
    /// Arc-length half window for heading smoothing (m).
    pub heading_window: f64,
    pub sensor_height: f64,
    pub rings: usize,
    pub elevation_min_deg: f64,
    pub elevation_max_deg: f64,
    pub azimuth_steps: usize,
    pub min_range: f64,
    pub max_range: f64,
    pub ground: bool,
    /// Thin walls around the route bounding box, `wall_margin` outside it.
    pub walls: bool,
    pub wall_margin: f64,
    pub wall_height: f64,
    pub boxes: Vec<BoxSpec>,
    pub cylinders: Vec<CylinderSpec>,
    /// Random boxes and cylinders added beside the route.
    pub clutter: usize,
    /// Minimum clearance between clutter and the route (m).
    pub clutter_clearance: f64,
    pub movers: Vec<MoverSpec>,
    /// Random movers spawned beside the route.
    pub mover_count: usize,
    pub mover_size: [f64; 3],
    pub mover_speed: [f64; 2],
    pub points_per_mover: usize,
    pub noise_ratio: f64,
    pub noise_sigma: f64,
    pub noise_clamp: f64,
}

impl Default for SyntheticSceneConfig {
    fn default() -> Self {
        SyntheticSceneConfig {
            seed: 0,
            frames: 100,
            step: 0.8,
            waypoints: vec![[0.0, 0.0], [20.0, 0.0], [20.0, 20.0], [0.0, 20.0]],
            closed: true,
            heading_window: 2.0,
            sensor_height: 1.8,
            rings: 16,
            elevation_min_deg: -15.0,
            elevation_max_deg: 15.0,
            azimuth_steps: 180,
            min_range: 1.0,
            max_range: 30.0,
            ground: true,
            walls: true,
            wall_margin: 8.0,
            wall_height: 4.0,
            boxes: Vec::new(),
            cylinders: Vec::new(),
            clutter: 24,
            clutter_clearance: 3.0,
            movers: Vec::new(),
            mover_count: 0,
            mover_size: [4.0, 2.0, 1.6],
            mover_speed: [0.2, 1.0],
            points_per_mover: 200,
            noise_ratio: 0.0,
            noise_sigma: 0.1,
            noise_clamp: 0.2,
        }
    }
}

impl SyntheticSceneConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(0.0..=0.5).contains(&self.noise_ratio) {
            return bad("noise_ratio must lie in [0, 0.5]");
        }
        if self.noise_sigma < 0.0 || self.noise_clamp < 0.0 {
            return bad("noise sigma and clamp must be non-negative");
        }
        if self.waypoints.is_empty() {
            return bad("at least one waypoint is required");
        }
        if self.rings == 0 || self.azimuth_steps == 0 || self.max_range <= self.min_range {
            return bad("sensor needs rings, azimuth steps and max_range > min_range");
        }
        if self.step < 0.0 {
            return bad("step must be non-negative");
        }
        Ok(())
    }
}

/// Static scene geometry.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Primitive {
    /// Horizontal ground `z = 0`.
    Ground,
    Box(BoxSpec),
    Cylinder(CylinderSpec),
}

impl Primitive {
    /// Distance along a unit-direction ray to the first intersection.
    pub fn intersect(&self, origin: Point3, dir: Point3) -> Option<f64> {
        match *self {
            Primitive::Ground => (dir.z < 0.0).then(|| -origin.z / dir.z).filter(|&t| t > 0.0),
            Primitive::Box(b) => ray_box(origin, dir, b.min, b.max),
            Primitive::Cylinder(c) => ray_cylinder(origin, dir, c),
        }
    }

    /// Distance from a point to the primitive surface.
    pub fn surface_distance(&self, p: Point3) -> f64 {
        match *self {
            Primitive::Ground => p.z.abs(),
            Primitive::Box(b) => {
                let a = p.to_array();
                let mut outside = 0.0;
                let mut inside = f64::INFINITY;
                for k in 0..3 {
                    let d = (b.min[k] - a[k]).max(a[k] - b.max[k]);
                    if d > 0.0 {
                        outside += d * d;
                    }
                    inside = inside.min(-d);
                }
                if outside > 0.0 {
                    outside.sqrt()
                } else {
                    inside
                }
            }
            Primitive::Cylinder(c) => {
                let radial = ((p.x - c.center[0]).powi(2) + (p.y - c.center[1]).powi(2)).sqrt() - c.radius;
                let vertical = (-p.z).max(p.z - c.height);
                if radial <= 0.0 && vertical <= 0.0 {
                    -(radial.max(vertical))
                } else {
                    (radial.max(0.0).powi(2) + vertical.max(0.0).powi(2)).sqrt()
                }
            }
        }
    }
}

fn ray_box(o: Point3, d: Point3, lo: [f64; 3], hi: [f64; 3]) -> Option<f64> {
    let (o, d) = (o.to_array(), d.to_array());
    let (mut t0, mut t1) = (0.0f64, f64::INFINITY);
    for k in 0..3 {
        if d[k].abs() < 1e-15 {
            if o[k] < lo[k] || o[k] > hi[k] {
                return None;
            }
            continue;
        }
        let (a, b) = ((lo[k] - o[k]) / d[k], (hi[k] - o[k]) / d[k]);
        t0 = t0.max(a.min(b));
        t1 = t1.min(a.max(b));
        if t0 > t1 {
            return None;
        }
    }
    // A ray starting inside a box sees its far wall.
    if t0 > 0.0 {
        Some(t0)
    } else if t1 > 0.0 && t1.is_finite() {
        Some(t1)
    } else {
        None
    }
}

fn ray_cylinder(o: Point3, d: Point3, c: CylinderSpec) -> Option<f64> {
    let (ox, oy) = (o.x - c.center[0], o.y - c.center[1]);
    let mut best: Option<f64> = None;
    let mut take = |t: f64| {
        if t > 0.0 && best.is_none_or(|b| t < b) {
            best = Some(t);
        }
    };
    let a = d.x * d.x + d.y * d.y;
    if a > 1e-15 {
        let b = 2.0 * (ox * d.x + oy * d.y);
        let cc = ox * ox + oy * oy - c.radius * c.radius;
        let disc = b * b - 4.0 * a * cc;
        if disc >= 0.0 {
            let sq = disc.sqrt();
            for t in [(-b - sq) / (2.0 * a), (-b + sq) / (2.0 * a)] {
                let z = o.z + t * d.z;
                if (0.0..=c.height).contains(&z) {
                    take(t);
                }
            }
        }
    }
    if d.z.abs() > 1e-15 {
        for zc in [0.0, c.height] {
            let t = (zc - o.z) / d.z;
            let (x, y) = (ox + t * d.x, oy + t * d.y);
            if x * x + y * y <= c.radius * c.radius {
                take(t);
            }
        }
    }
    best
}

/// An ordered sequence of frames in sensor coordinates, with optional
/// sensor-to-world poses.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SequenceSource {
    pub frames: Vec<PointCloud>,
    pub poses: Option<Vec<RigidTransform>>,
}

impl SequenceSource {
    pub fn new(frames: Vec<PointCloud>, poses: Option<Vec<RigidTransform>>) -> Result<Self> {
        if let Some(p) = &poses {
            if p.len() != frames.len() {
                return Err(Error::LengthMismatch(frames.len(), p.len()));
            }
        }
        Ok(SequenceSource { frames, poses })
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}

/// A generated sequence plus the geometry it was sampled from.
#[derive(Debug, Clone)]
pub struct SyntheticSequence {
    pub source: SequenceSource,
    pub primitives: Vec<Primitive>,
    pub movers: Vec<MoverSpec>,
}

impl SyntheticSequence {
    pub fn poses(&self) -> &[RigidTransform] {
        self.source.poses.as_deref().unwrap_or(&[])
    }
}

/// Polyline parameterized by arc length.
struct Route {
    points: Vec<[f64; 2]>,
    cumulative: Vec<f64>,
    closed: bool,
}

impl Route {
    fn new(waypoints: &[[f64; 2]], closed: bool) -> Route {
        let mut points = waypoints.to_vec();
        if closed && points.len() > 1 {
            points.push(points[0]);
        }
        let mut cumulative = vec![0.0];
        for w in points.windows(2) {
            let seg = ((w[1][0] - w[0][0]).powi(2) + (w[1][1] - w[0][1]).powi(2)).sqrt();
            cumulative.push(cumulative.last().unwrap() + seg);
        }
        Route { points, cumulative, closed }
    }

    fn length(&self) -> f64 {
        *self.cumulative.last().unwrap()
    }

    fn at(&self, s: f64) -> [f64; 2] {
        let len = self.length();
        if len == 0.0 {
            return self.points[0];
        }
        let s = if self.closed { s.rem_euclid(len) } else { s.clamp(0.0, len) };
        let i = self.cumulative.partition_point(|&c| c <= s).clamp(1, self.points.len() - 1);
        let (a, b) = (self.points[i - 1], self.points[i]);
        let seg = self.cumulative[i] - self.cumulative[i - 1];
        let u = if seg > 0.0 { (s - self.cumulative[i - 1]) / seg } else { 0.0 };
        [a[0] + u * (b[0] - a[0]), a[1] + u * (b[1] - a[1])]
    }

    fn heading(&self, s: f64, window: f64) -> f64 {
        let (a, b) = (self.at(s - window), self.at(s + window));
        let (dx, dy) = (b[0] - a[0], b[1] - a[1]);
        if dx.abs() + dy.abs() < 1e-12 {
            if self.points.len() > 1 {
                let (p, q) = (self.points[0], self.points[1]);
                return (q[1] - p[1]).atan2(q[0] - p[0]);
            }
            return 0.0;
        }
        dy.atan2(dx)
    }

    fn distance_to(&self, p: [f64; 2]) -> f64 {
        if self.points.len() == 1 {
            return ((p[0] - self.points[0][0]).powi(2) + (p[1] - self.points[0][1]).powi(2)).sqrt();
        }
        self.points
            .windows(2)
            .map(|w| {
                let (a, b) = (w[0], w[1]);
                let (ex, ey) = (b[0] - a[0], b[1] - a[1]);
                let l2 = ex * ex + ey * ey;
                let u = if l2 > 0.0 { (((p[0] - a[0]) * ex + (p[1] - a[1]) * ey) / l2).clamp(0.0, 1.0) } else { 0.0 };
                ((p[0] - a[0] - u * ex).powi(2) + (p[1] - a[1] - u * ey).powi(2)).sqrt()
            })
            .fold(f64::INFINITY, f64::min)
    }

    fn bounds(&self) -> ([f64; 2], [f64; 2]) {
        let mut lo = [f64::INFINITY; 2];
        let mut hi = [f64::NEG_INFINITY; 2];
        for p in &self.points {
            for k in 0..2 {
                lo[k] = lo[k].min(p[k]);
                hi[k] = hi[k].max(p[k]);
            }
        }
        (lo, hi)
    }
}

fn scene_primitives(cfg: &SyntheticSceneConfig, route: &Route, rng: &mut ChaCha8Rng) -> Vec<Primitive> {
    let mut prims = Vec::new();
    if cfg.ground {
        prims.push(Primitive::Ground);
    }
    let (lo, hi) = route.bounds();
    let (lo, hi) = (
        [lo[0] - cfg.wall_margin, lo[1] - cfg.wall_margin],
        [hi[0] + cfg.wall_margin, hi[1] + cfg.wall_margin],
    );
    if cfg.walls {
        let (t, h) = (0.3, cfg.wall_height);
        prims.push(Primitive::Box(BoxSpec { min: [lo[0] - t, lo[1] - t, 0.0], max: [hi[0] + t, lo[1], h] }));
        prims.push(Primitive::Box(BoxSpec { min: [lo[0] - t, hi[1], 0.0], max: [hi[0] + t, hi[1] + t, h] }));
        prims.push(Primitive::Box(BoxSpec { min: [lo[0] - t, lo[1], 0.0], max: [lo[0], hi[1], h] }));
        prims.push(Primitive::Box(BoxSpec { min: [hi[0], lo[1], 0.0], max: [hi[0] + t, hi[1], h] }));
    }
    prims.extend(cfg.boxes.iter().copied().map(Primitive::Box));
    prims.extend(cfg.cylinders.iter().copied().map(Primitive::Cylinder));
    let mut placed = 0;
    let mut attempts = 0;
    while placed < cfg.clutter && attempts < cfg.clutter * 200 {
        attempts += 1;
        let c = [rng.random_range(lo[0]..hi[0]), rng.random_range(lo[1]..hi[1])];
        let cylinder = rng.random_bool(0.4);
        let (half, height) = if cylinder {
            (rng.random_range(0.2..0.8), rng.random_range(2.0..6.0))
        } else {
            (rng.random_range(0.5..2.5), rng.random_range(0.8..4.0))
        };
        if route.distance_to(c) < cfg.clutter_clearance + half * std::f64::consts::SQRT_2 {
            continue;
        }
        if cylinder {
            prims.push(Primitive::Cylinder(CylinderSpec { center: c, radius: half, height }));
        } else {
            let half_y: f64 = rng.random_range(0.5..2.5);
            prims.push(Primitive::Box(BoxSpec {
                min: [c[0] - half, c[1] - half_y.min(half * 2.0), 0.0],
                max: [c[0] + half, c[1] + half_y.min(half * 2.0), height],
            }));
        }
        placed += 1;
    }
    prims
}

fn spawn_movers(cfg: &SyntheticSceneConfig, route: &Route, rng: &mut ChaCha8Rng) -> Vec<MoverSpec> {
    let mut movers = cfg.movers.clone();
    let span = cfg.step * cfg.frames.max(1) as f64;
    for _ in 0..cfg.mover_count {
        let s = rng.random_range(0.0..span.max(1e-9));
        let p = route.at(s);
        let heading = route.heading(s, cfg.heading_window);
        let side = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
        let lateral = side * rng.random_range(3.0..6.0);
        let (nx, ny) = (-heading.sin(), heading.cos());
        let speed = rng.random_range(cfg.mover_speed[0]..=cfg.mover_speed[1]);
        let dir = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
        movers.push(MoverSpec {
            center: [p[0] + lateral * nx, p[1] + lateral * ny, cfg.mover_size[2] / 2.0],
            size: cfg.mover_size,
            velocity: [dir * speed * heading.cos(), dir * speed * heading.sin(), 0.0],
        });
    }
    movers
}

/// Surface samples of a box of the given size, centered on the origin,
/// spread over faces in proportion to their area.
fn box_surface_samples(size: [f64; 3], n: usize, rng: &mut ChaCha8Rng) -> Vec<Point3> {
    let h = [size[0] / 2.0, size[1] / 2.0, size[2] / 2.0];
    let areas = [size[1] * size[2], size[0] * size[2], size[0] * size[1]];
    let total: f64 = areas.iter().sum::<f64>() * 2.0;
    (0..n)
        .map(|_| {
            let mut r = rng.random_range(0.0..total.max(1e-12)) / 2.0;
            let mut axis = 2;
            for (k, a) in areas.iter().enumerate() {
                if r < *a {
                    axis = k;
                    break;
                }
                r -= a;
            }
            let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            let mut v = [0.0; 3];
            for (k, slot) in v.iter_mut().enumerate() {
                *slot = if k == axis { sign * h[k] } else { rng.random_range(-h[k]..=h[k]) };
            }
            Point3::from_array(v)
        })
        .collect()
}

/// Sensor-to-world pose of each frame along the route.
fn route_poses(cfg: &SyntheticSceneConfig, route: &Route) -> Vec<RigidTransform> {
    (0..cfg.frames)
        .map(|i| {
            let s = i as f64 * cfg.step;
            let p = route.at(s);
            let yaw = route.heading(s, cfg.heading_window);
            RigidTransform::new(
                UnitQuaternion::from_axis_angle(Point3::new(0.0, 0.0, 1.0), yaw),
                Point3::new(p[0], p[1], cfg.sensor_height),
            )
        })
        .collect()
}

fn ray_directions(cfg: &SyntheticSceneConfig) -> Vec<Point3> {
    let mut dirs = Vec::with_capacity(cfg.rings * cfg.azimuth_steps);
    for r in 0..cfg.rings {
        let u = if cfg.rings == 1 { 0.5 } else { r as f64 / (cfg.rings - 1) as f64 };
        let el = (cfg.elevation_min_deg + u * (cfg.elevation_max_deg - cfg.elevation_min_deg)).to_radians();
        for a in 0..cfg.azimuth_steps {
            let az = a as f64 / cfg.azimuth_steps as f64 * std::f64::consts::TAU;
            dirs.push(Point3::new(el.cos() * az.cos(), el.cos() * az.sin(), el.sin()));
        }
    }
    dirs
}

/// Casts every ray against the static scene and returns first hits in the
/// sensor frame.
pub fn scan_static(
    primitives: &[Primitive],
    pose: &RigidTransform,
    directions: &[Point3],
    min_range: f64,
    max_range: f64,
) -> Vec<Point3> {
    let origin = pose.translation;
    directions
        .iter()
        .filter_map(|&d| {
            let world_dir = pose.rotation.rotate(d);
            let hit = primitives
                .iter()
                .filter_map(|p| p.intersect(origin, world_dir))
                .fold(f64::INFINITY, f64::min);
            (hit >= min_range && hit <= max_range).then(|| d * hit)
        })
        .collect()
}

/// Generates the sequence described by `cfg`. Frames hold static returns
/// followed by mover samples within range, in sensor coordinates; mover
/// points are labeled dynamic and do not occlude the static scene.
pub fn synth_sequence(cfg: &SyntheticSceneConfig) -> Result<SyntheticSequence> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut noise_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    noise_rng.set_stream(NOISE_STREAM);
    let route = Route::new(&cfg.waypoints, cfg.closed);
    let primitives = scene_primitives(cfg, &route, &mut rng);
    let movers = spawn_movers(cfg, &route, &mut rng);
    let mover_samples: Vec<Vec<Point3>> =
        movers.iter().map(|m| box_surface_samples(m.size, cfg.points_per_mover, &mut rng)).collect();
    let poses = route_poses(cfg, &route);
    let directions = ray_directions(cfg);
    let normal = Normal::new(0.0, cfg.noise_sigma).map_err(|e| Error::Config(e.to_string()))?;

    let mut frames = Vec::with_capacity(cfg.frames);
    for (i, pose) in poses.iter().enumerate() {
        let mut points = scan_static(&primitives, pose, &directions, cfg.min_range, cfg.max_range);
        let mut labels = vec![PointLabel::Static; points.len()];
        let to_sensor = pose.inverse();
        for (m, samples) in movers.iter().zip(&mover_samples) {
            let c = Point3::from_array(m.center) + Point3::from_array(m.velocity) * i as f64;
            for &s in samples {
                let local = to_sensor.apply_point(c + s);
                if local.norm() <= cfg.max_range {
                    points.push(local);
                    labels.push(PointLabel::Dynamic);
                }
            }
        }
        let count = (cfg.noise_ratio * points.len() as f64).floor() as usize;
        if count > 0 {
            for idx in sample(&mut noise_rng, points.len(), count) {
                let mut jitter = || normal.sample(&mut noise_rng).clamp(-cfg.noise_clamp, cfg.noise_clamp);
                let delta = Point3::new(jitter(), jitter(), jitter());
                points[idx] += delta;
            }
        }
        frames.push(PointCloud::with_labels(points, labels).with_frame_id(i));
    }
    Ok(SyntheticSequence {
        source: SequenceSource::new(frames, Some(poses))?,
        primitives,
        movers,
    })
}
