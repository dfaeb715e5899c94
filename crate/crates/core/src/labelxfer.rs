//! Per-scan labels from a densely labeled, accumulated world-frame map:
//! every scan point is moved into the world frame and takes the label of its
//! nearest map point, or the ignore id when no map point is close enough.

use std::path::Path;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::lidar_io::{read_labels, read_point_cloud, LabelMap, Point, PointCloud, Pose};
use crate::spatial::SpatialIndex;
use crate::vocab::IGNORE_ID;

pub const DEFAULT_RADIUS: f64 = 0.10;

/// Tolerance on the orthonormality of a pose's rotation block.
pub const RIGID_TOL: f64 = 1e-6;

pub struct AccumulatedMap {
    index: SpatialIndex,
    labels: LabelMap,
}

impl AccumulatedMap {
    pub fn new(points: &[Point], labels: LabelMap) -> Result<Self> {
        if points.len() != labels.len() {
            return Err(Error::LengthMismatch {
                expected: points.len() as u64,
                found: labels.len() as u64,
            });
        }
        // Cells of the default radius keep each lookup to a 3x3x3 block.
        let index = SpatialIndex::with_cell_size(points, DEFAULT_RADIUS)?;
        Ok(AccumulatedMap { index, labels })
    }

    pub fn read(cloud: impl AsRef<Path>, labels: impl AsRef<Path>) -> Result<Self> {
        let cloud = read_point_cloud(cloud)?;
        let labels = read_labels(labels, cloud.len())?;
        AccumulatedMap::new(&cloud.points, labels)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn points(&self) -> &[Point] {
        self.index.points()
    }

    pub fn labels(&self) -> &LabelMap {
        &self.labels
    }
}

/// Labels `scan` from `map`. A match needs distance `<= radius`; equally
/// near map points resolve to the smallest map index.
pub fn transfer_labels(scan: &PointCloud, pose: &Pose, map: &AccumulatedMap, radius: f64) -> Result<LabelMap> {
    if !pose.is_rigid(RIGID_TOL) {
        return Err(Error::arg("pose is not a rigid transform"));
    }
    if !(radius.is_finite() && radius >= 0.0) {
        return Err(Error::arg(format!("radius must be finite and non-negative, got {radius}")));
    }
    let hits: Vec<Option<usize>> = scan
        .points
        .par_iter()
        .map(|p| Ok(map.index.nearest_within(&pose.apply(p), radius)?.map(|(i, _)| i)))
        .collect::<Result<_>>()?;
    let mut semantic = Vec::with_capacity(hits.len());
    let mut instance = Vec::with_capacity(hits.len());
    for h in hits {
        match h {
            Some(i) => {
                semantic.push(map.labels.semantic[i]);
                instance.push(map.labels.instance[i]);
            }
            None => {
                semantic.push(IGNORE_ID);
                instance.push(0);
            }
        }
    }
    LabelMap::new(semantic, instance, map.labels.space)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lidar_io::LabelSpace;
    use crate::spatial::dist2;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn map_of(points: Vec<Point>, sem: Vec<u32>) -> AccumulatedMap {
        let n = sem.len();
        let inst = (0..n as u32).collect();
        AccumulatedMap::new(&points, LabelMap::new(sem, inst, LabelSpace::Raw).unwrap()).unwrap()
    }

    fn random_rotation(rng: &mut ChaCha8Rng) -> [[f64; 3]; 3] {
        // unit quaternion
        let mut q = [0.0f64; 4];
        q.iter_mut().for_each(|v| *v = rng.gen_range(-1.0..1.0));
        let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
        let [w, x, y, z] = q.map(|v| v / n);
        [
            [1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y - w * z), 2.0 * (x * z + w * y)],
            [2.0 * (x * y + w * z), 1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z - w * x)],
            [2.0 * (x * z - w * y), 2.0 * (y * z + w * x), 1.0 - 2.0 * (x * x + y * y)],
        ]
    }

    #[test]
    fn cutoff_examples() {
        let map = map_of(vec![[0.0, 0.0, 0.0], [5.0, 0.0, 0.0]], vec![10, 40]);
        let scan = PointCloud::new(vec![[0.05, 0.0, 0.0], [5.12, 0.0, 0.0], [0.0, 0.10, 0.0], [0.0, 0.100001, 0.0]]);
        let out = transfer_labels(&scan, &Pose::identity(), &map, DEFAULT_RADIUS).unwrap();
        assert_eq!(out.semantic, vec![10, 0, 10, 0]);
        assert_eq!(out.instance, vec![0, 0, 0, 0]);
    }

    #[test]
    fn identity_copy_and_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let pts: Vec<Point> = (0..300).map(|_| [0; 3].map(|_: i32| rng.gen_range(-10.0..10.0))).collect();
        let sem: Vec<u32> = (0..300).map(|i| i % 7 + 1).collect();
        let map = map_of(pts.clone(), sem.clone());
        let out = transfer_labels(&PointCloud::new(pts.clone()), &Pose::identity(), &map, DEFAULT_RADIUS).unwrap();
        assert_eq!(out.semantic, sem);
        assert_eq!(out.instance, (0..300).collect::<Vec<u32>>());

        let mut skew = Pose::identity();
        skew.rows[0][1] = 0.01;
        assert!(transfer_labels(&PointCloud::new(pts), &skew, &map, DEFAULT_RADIUS).is_err());
        assert!(AccumulatedMap::new(&[[0.0; 3]], LabelMap::zeros(2, LabelSpace::Raw)).is_err());
    }

    #[test]
    fn nearest_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(32);
        for _ in 0..100 {
            let m = rng.gen_range(1..300);
            let map_pts: Vec<Point> = (0..m).map(|_| [0; 3].map(|_: i32| rng.gen_range(0.0..2.0))).collect();
            let map = map_of(map_pts.clone(), (0..m as u32).map(|i| i + 1).collect());
            let scan: Vec<Point> = (0..100).map(|_| [0; 3].map(|_: i32| rng.gen_range(-0.2..2.2))).collect();
            let pose = Pose::from_rotation_translation(random_rotation(&mut rng), [0.01, -0.02, 0.0]);
            let out = transfer_labels(&PointCloud::new(scan.clone()), &pose, &map, DEFAULT_RADIUS).unwrap();
            for (k, p) in scan.iter().enumerate() {
                let w = pose.apply(p);
                let mut best: Option<(usize, f64)> = None;
                for (i, q) in map_pts.iter().enumerate() {
                    let d2 = dist2(&w, q);
                    if d2 <= DEFAULT_RADIUS * DEFAULT_RADIUS && best.is_none_or(|(_, bd)| d2 < bd) {
                        best = Some((i, d2));
                    }
                }
                assert_eq!(out.semantic[k], best.map_or(0, |(i, _)| i as u32 + 1));
            }
        }
    }

    #[test]
    fn equivariant_under_common_motion() {
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        for _ in 0..50 {
            let map_pts: Vec<Point> = (0..200).map(|_| [0; 3].map(|_: i32| rng.gen_range(0.0..3.0))).collect();
            let scan: Vec<Point> = (0..200).map(|_| [0; 3].map(|_: i32| rng.gen_range(0.0..3.0))).collect();
            let pose = Pose::from_rotation_translation(random_rotation(&mut rng), [0.1, 0.2, -0.1]);
            let extra = Pose::from_rotation_translation(random_rotation(&mut rng), [40.0, -7.0, 3.0]);
            let sem: Vec<u32> = (1..=200).collect();
            let a = transfer_labels(&PointCloud::new(scan.clone()), &pose, &map_of(map_pts.clone(), sem.clone()), DEFAULT_RADIUS).unwrap();
            let moved: Vec<Point> = map_pts.iter().map(|p| extra.apply(p)).collect();
            let b = transfer_labels(&PointCloud::new(scan.clone()), &extra.compose(&pose), &map_of(moved, sem), DEFAULT_RADIUS).unwrap();
            for k in 0..scan.len() {
                if a.semantic[k] == b.semantic[k] {
                    continue;
                }
                // only cutoff or tie ambiguities within rounding may differ
                let w = pose.apply(&scan[k]);
                let mut d: Vec<f64> = map_pts.iter().map(|q| dist2(&w, q).sqrt()).collect();
                d.sort_by(f64::total_cmp);
                let near_cut = (d[0] - DEFAULT_RADIUS).abs() < 1e-9;
                let near_tie = (d[1] - d[0]).abs() < 1e-9;
                assert!(near_cut || near_tie, "point {k}: {} vs {}", a.semantic[k], b.semantic[k]);
            }
        }
    }
}
