use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Point3, PointCloud, PointLabel};
use crate::{Error, Result};

/// Per-axis arithmetic mean.
pub fn centroid(points: &[Point3]) -> Result<Point3> {
    if points.is_empty() {
        return Err(Error::EmptyPoints);
    }
    let mut acc = Point3::ZERO;
    for p in points {
        acc += *p;
    }
    Ok(acc / points.len() as f64)
}

/// Exactly `n` points: a uniform subset of the valid points when there are
/// enough, otherwise all of them followed by invalid zero padding.
pub fn random_sample_pad(cloud: &PointCloud, n: usize, seed: u64) -> PointCloud {
    assert!(n >= 1, "sample size must be positive");
    let valid: Vec<usize> = (0..cloud.len()).filter(|&i| cloud.valid[i]).collect();
    let mut out = if valid.len() >= n {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut picked: Vec<usize> = sample(&mut rng, valid.len(), n)
            .into_iter()
            .map(|j| valid[j])
            .collect();
        picked.sort_unstable();
        cloud.select(&picked)
    } else {
        cloud.select(&valid)
    };
    let pad = n - out.len();
    if pad > 0 {
        out.points.extend(std::iter::repeat_n(Point3::ZERO, pad));
        out.valid.extend(std::iter::repeat_n(false, pad));
        if let Some(labels) = out.labels.as_mut() {
            labels.extend(std::iter::repeat_n(PointLabel::Static, pad));
        }
    }
    out
}

/// Greedy farthest-point sampling of `n` distinct indices. The first pick is
/// the point nearest the centroid (lowest index on ties); later ties also go
/// to the lowest index, so the result does not depend on a seed.
pub fn farthest_point_sampling(points: &[Point3], n: usize) -> Result<Vec<usize>> {
    if n > points.len() {
        return Err(Error::InsufficientPoints {
            needed: n,
            available: points.len(),
        });
    }
    if n == 0 {
        return Ok(Vec::new());
    }
    let c = centroid(points)?;
    let mut first = 0;
    let mut best = f64::INFINITY;
    for (i, p) in points.iter().enumerate() {
        let d = p.distance_squared(c);
        if d < best {
            best = d;
            first = i;
        }
    }
    let mut chosen = Vec::with_capacity(n);
    let mut taken = vec![false; points.len()];
    let mut min_d2 = vec![f64::INFINITY; points.len()];
    let mut current = first;
    loop {
        chosen.push(current);
        taken[current] = true;
        if chosen.len() == n {
            break;
        }
        let cp = points[current];
        let mut next = usize::MAX;
        let mut far = f64::NEG_INFINITY;
        for (i, p) in points.iter().enumerate() {
            let d = p.distance_squared(cp);
            if d < min_d2[i] {
                min_d2[i] = d;
            }
            if !taken[i] && min_d2[i] > far {
                far = min_d2[i];
                next = i;
            }
        }
        current = next;
    }
    Ok(chosen)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use std::collections::HashSet;

    fn cloud_of(n: usize, seed: u64) -> PointCloud {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        PointCloud::new(
            (0..n)
                .map(|_| {
                    Point3::new(
                        rng.random_range(-10.0..10.0),
                        rng.random_range(-10.0..10.0),
                        rng.random_range(-2.0..2.0),
                    )
                })
                .collect(),
        )
    }

    #[test]
    fn centroid_of_two() {
        let c = centroid(&[Point3::ZERO, Point3::new(2.0, 0.0, 0.0)]).unwrap();
        assert_eq!(c, Point3::new(1.0, 0.0, 0.0));
    }

    #[test]
    fn centroid_single_and_empty() {
        let p = Point3::new(0.3, -7.0, 1.5);
        assert_eq!(centroid(&[p]).unwrap(), p);
        assert!(centroid(&[]).is_err());
    }

    #[test]
    fn centroid_matches_scalar_loop() {
        let cloud = cloud_of(50, 1);
        let c = centroid(&cloud.points).unwrap();
        let (mut sx, mut sy, mut sz) = (0.0, 0.0, 0.0);
        for i in 0..50 {
            sx += cloud.points[i].x;
            sy += cloud.points[i].y;
            sz += cloud.points[i].z;
        }
        assert!((c.x - sx / 50.0).abs() < 1e-12);
        assert!((c.y - sy / 50.0).abs() < 1e-12);
        assert!((c.z - sz / 50.0).abs() < 1e-12);
    }

    #[test]
    fn centroid_skips_padding() {
        let mut cloud = PointCloud::new(vec![Point3::new(4.0, 4.0, 4.0)]);
        cloud = random_sample_pad(&cloud, 5, 0);
        assert_eq!(cloud.centroid().unwrap(), Point3::new(4.0, 4.0, 4.0));
    }

    #[test]
    fn subsample_draws_distinct_originals() {
        let cloud = cloud_of(20_000, 2);
        let s = random_sample_pad(&cloud, 16_384, 9);
        assert_eq!(s.len(), 16_384);
        assert!(s.valid.iter().all(|v| *v));
        let originals: HashSet<[u64; 3]> = cloud
            .points
            .iter()
            .map(|p| [p.x.to_bits(), p.y.to_bits(), p.z.to_bits()])
            .collect();
        let picked: HashSet<[u64; 3]> = s
            .points
            .iter()
            .map(|p| [p.x.to_bits(), p.y.to_bits(), p.z.to_bits()])
            .collect();
        assert_eq!(picked.len(), 16_384);
        assert!(picked.is_subset(&originals));
    }

    #[test]
    fn short_cloud_is_padded() {
        let cloud = cloud_of(10, 3);
        let s = random_sample_pad(&cloud, 16, 0);
        assert_eq!(s.len(), 16);
        assert_eq!(&s.points[..10], &cloud.points[..]);
        assert!(s.valid[..10].iter().all(|v| *v));
        assert!(s.valid[10..].iter().all(|v| !*v));
        assert!(s.points[10..].iter().all(|p| *p == Point3::ZERO));
    }

    #[test]
    fn sampling_is_deterministic() {
        let cloud = cloud_of(500, 4);
        assert_eq!(random_sample_pad(&cloud, 100, 42), random_sample_pad(&cloud, 100, 42));
    }

    #[test]
    fn fps_on_duplicates_returns_distinct_indices() {
        let pts = vec![Point3::new(1.0, 1.0, 1.0); 32];
        let idx = farthest_point_sampling(&pts, 10).unwrap();
        let set: HashSet<usize> = idx.iter().copied().collect();
        assert_eq!(set.len(), 10);
    }

    #[test]
    fn fps_set_is_permutation_invariant() {
        let cloud = cloud_of(300, 5);
        let idx = farthest_point_sampling(&cloud.points, 40).unwrap();
        let mut perm: Vec<usize> = (0..300).collect();
        perm.reverse();
        perm.rotate_left(77);
        let permuted: Vec<Point3> = perm.iter().map(|&i| cloud.points[i]).collect();
        let idx2 = farthest_point_sampling(&permuted, 40).unwrap();
        let key = |p: &Point3| [p.x.to_bits(), p.y.to_bits(), p.z.to_bits()];
        let a: HashSet<_> = idx.iter().map(|&i| key(&cloud.points[i])).collect();
        let b: HashSet<_> = idx2.iter().map(|&i| key(&permuted[i])).collect();
        assert_eq!(a, b);
    }
}
