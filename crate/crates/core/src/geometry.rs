//! Point clouds, grasp poses, gripper control points, farthest point sampling
//! and point-cloud augmentation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Point3 = [f64; 3];

/// Tolerance used for rotation orthonormality and control-point rigidity.
pub const POSE_TOLERANCE: f64 = 1e-6;

#[inline]
pub fn sub(a: Point3, b: Point3) -> Point3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

#[inline]
pub fn add(a: Point3, b: Point3) -> Point3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

#[inline]
pub fn scale(a: Point3, s: f64) -> Point3 {
    [a[0] * s, a[1] * s, a[2] * s]
}

#[inline]
pub fn dot(a: Point3, b: Point3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

#[inline]
pub fn cross(a: Point3, b: Point3) -> Point3 {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

#[inline]
pub fn norm(a: Point3) -> f64 {
    dot(a, a).sqrt()
}

#[inline]
pub fn dist2(a: Point3, b: Point3) -> f64 {
    let d = sub(a, b);
    dot(d, d)
}

pub fn normalize(a: Point3) -> Point3 {
    scale(a, 1.0 / norm(a))
}

pub fn centroid(points: &[Point3]) -> Point3 {
    let n = points.len() as f64;
    let s = points.iter().fold([0.0; 3], |acc, p| add(acc, *p));
    scale(s, 1.0 / n)
}

/// 3×3 rotation matrix, row-major.
pub type Rot3 = [[f64; 3]; 3];

pub const IDENTITY_ROTATION: Rot3 = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];

pub fn rotate(r: &Rot3, p: Point3) -> Point3 {
    [dot(r[0], p), dot(r[1], p), dot(r[2], p)]
}

pub fn mat_mul3(a: &Rot3, b: &Rot3) -> Rot3 {
    let mut out = [[0.0; 3]; 3];
    for (i, row) in out.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            *v = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    out
}

pub fn transpose3(a: &Rot3) -> Rot3 {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = a[j][i];
        }
    }
    out
}

pub fn det3(a: &Rot3) -> f64 {
    dot(a[0], cross(a[1], a[2]))
}

/// Rotation of `angle` radians about a (not necessarily unit) axis.
pub fn axis_angle(axis: Point3, angle: f64) -> Rot3 {
    let [x, y, z] = normalize(axis);
    let (s, c) = angle.sin_cos();
    let t = 1.0 - c;
    [
        [t * x * x + c, t * x * y - s * z, t * x * z + s * y],
        [t * x * y + s * z, t * y * y + c, t * y * z - s * x],
        [t * x * z - s * y, t * y * z + s * x, t * z * z + c],
    ]
}

/// Uniformly distributed rotation (Shoemake's unit-quaternion construction).
pub fn random_rotation<R: Rng>(rng: &mut R) -> Rot3 {
    let u1: f64 = rng.random();
    let u2: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    let u3: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    let a = (1.0 - u1).sqrt();
    let b = u1.sqrt();
    let (w, x, y, z) = (a * u2.sin(), a * u2.cos(), b * u3.sin(), b * u3.cos());
    [
        [1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y - z * w), 2.0 * (x * z + y * w)],
        [2.0 * (x * y + z * w), 1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z - x * w)],
        [2.0 * (x * z - y * w), 2.0 * (y * z + x * w), 1.0 - 2.0 * (x * x + y * y)],
    ]
}

#[derive(Clone, Debug, PartialEq)]
pub struct PointCloud {
    points: Vec<Point3>,
}

impl PointCloud {
    pub fn new(points: Vec<Point3>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::Validation("point cloud must contain at least one point".into()));
        }
        if let Some(i) = points.iter().position(|p| p.iter().any(|v| !v.is_finite())) {
            return Err(Error::Validation(format!("point {i} has a non-finite coordinate")));
        }
        Ok(Self { points })
    }

    pub fn points(&self) -> &[Point3] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn centroid(&self) -> Point3 {
        centroid(&self.points)
    }

    /// Returns the cloud translated so its centroid is the origin, and the removed offset.
    pub fn centered(&self) -> (PointCloud, Point3) {
        let c = self.centroid();
        (PointCloud { points: self.points.iter().map(|p| sub(*p, c)).collect() }, c)
    }

    pub fn subset(&self, indices: &[usize]) -> PointCloud {
        PointCloud { points: indices.iter().map(|&i| self.points[i]).collect() }
    }

    pub fn map(&self, f: impl Fn(Point3) -> Point3) -> PointCloud {
        PointCloud { points: self.points.iter().map(|p| f(*p)).collect() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GraspPose {
    pub rotation: Rot3,
    pub translation: Point3,
}

impl GraspPose {
    pub fn new(rotation: Rot3, translation: Point3) -> Result<Self> {
        let pose = Self { rotation, translation };
        pose.validate()?;
        Ok(pose)
    }

    pub fn identity() -> Self {
        Self { rotation: IDENTITY_ROTATION, translation: [0.0; 3] }
    }

    pub fn validate(&self) -> Result<()> {
        if self.rotation.iter().flatten().chain(&self.translation).any(|v| !v.is_finite()) {
            return Err(Error::Validation("grasp pose has non-finite entries".into()));
        }
        let rtr = mat_mul3(&transpose3(&self.rotation), &self.rotation);
        for (i, row) in rtr.iter().enumerate() {
            for (j, v) in row.iter().enumerate() {
                let expect = if i == j { 1.0 } else { 0.0 };
                if (v - expect).abs() > POSE_TOLERANCE {
                    return Err(Error::Validation(format!("rotation is not orthonormal (RᵀR[{i}][{j}] = {v})")));
                }
            }
        }
        let det = det3(&self.rotation);
        if (det - 1.0).abs() > POSE_TOLERANCE {
            return Err(Error::Validation(format!("rotation determinant {det} is not +1")));
        }
        Ok(())
    }

    pub fn transform_point(&self, p: Point3) -> Point3 {
        add(rotate(&self.rotation, p), self.translation)
    }

    /// Pose after applying `p ↦ s·R·p + t` to the object frame. The rotation part
    /// is unaffected by the uniform scale.
    pub fn transformed(&self, s: f64, r: &Rot3, t: Point3) -> GraspPose {
        GraspPose { rotation: mat_mul3(r, &self.rotation), translation: add(scale(rotate(r, self.translation), s), t) }
    }
}

/// The six-point rigid gripper approximation, expressed in the gripper frame.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GripperTemplate {
    pub points: [Point3; 6],
}

impl Default for GripperTemplate {
    /// Parallel-jaw gripper with an 82 mm aperture: base, wrist, two fingertips,
    /// two finger roots. The approach axis is +z.
    fn default() -> Self {
        Self {
            points: [
                [0.0, 0.0, 0.0],
                [0.0, 0.0, 0.059],
                [0.041, 0.0, 0.112],
                [-0.041, 0.0, 0.112],
                [0.041, 0.0, 0.066],
                [-0.041, 0.0, 0.066],
            ],
        }
    }
}

impl GripperTemplate {
    pub fn centroid(&self) -> Point3 {
        centroid(&self.points)
    }

    pub const FINGERTIPS: [usize; 2] = [2, 3];
}

#[derive(Clone, Debug, PartialEq)]
pub struct ControlPointSet {
    pub points: [Point3; 6],
}

impl ControlPointSet {
    pub fn pairwise_distances(&self) -> [[f64; 6]; 6] {
        pairwise_distances(&self.points)
    }

    pub fn centroid(&self) -> Point3 {
        centroid(&self.points)
    }
}

pub fn pairwise_distances(points: &[Point3; 6]) -> [[f64; 6]; 6] {
    let mut out = [[0.0; 6]; 6];
    for i in 0..6 {
        for j in 0..6 {
            out[i][j] = dist2(points[i], points[j]).sqrt();
        }
    }
    out
}

/// Maps the template into the object frame: `R·pᵢ + T` for each template point.
pub fn pose_to_control_points(pose: &GraspPose, template: &GripperTemplate) -> Result<ControlPointSet> {
    pose.validate()?;
    let mut points = [[0.0; 3]; 6];
    for (out, p) in points.iter_mut().zip(&template.points) {
        *out = pose.transform_point(*p);
    }
    Ok(ControlPointSet { points })
}

/// Greedy farthest point sampling. Each step picks the index whose distance to
/// the already-chosen set is largest; ties go to the lowest index.
pub fn fps_select(points: &[Point3], count: usize, start: usize) -> Result<Vec<usize>> {
    let m = points.len();
    if count == 0 {
        return Err(Error::Validation("farthest point sampling needs count >= 1".into()));
    }
    if count > m {
        return Err(Error::Validation(format!("cannot select {count} points from {m}")));
    }
    if start >= m {
        return Err(Error::Validation(format!("start index {start} out of range for {m} points")));
    }
    let mut selected = Vec::with_capacity(count);
    let mut chosen = vec![false; m];
    let mut min_d = vec![f64::INFINITY; m];
    let mut current = start;
    loop {
        selected.push(current);
        chosen[current] = true;
        if selected.len() == count {
            break;
        }
        let c = points[current];
        let mut best = usize::MAX;
        let mut best_d = f64::NEG_INFINITY;
        for i in 0..m {
            if chosen[i] {
                continue;
            }
            let d = dist2(points[i], c);
            if d < min_d[i] {
                min_d[i] = d;
            }
            if min_d[i] > best_d {
                best_d = min_d[i];
                best = i;
            }
        }
        current = best;
    }
    Ok(selected)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    pub scale_min: f64,
    pub scale_max: f64,
    pub rotate: bool,
    pub jitter_sigma: f64,
    pub jitter_clip: f64,
    pub keep_probability: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            scale_min: 0.8,
            scale_max: 1.25,
            rotate: true,
            jitter_sigma: 0.005,
            jitter_clip: 0.02,
            keep_probability: 0.875,
        }
    }
}

impl AugmentConfig {
    /// No-op augmentation.
    pub fn disabled() -> Self {
        Self {
            scale_min: 1.0,
            scale_max: 1.0,
            rotate: false,
            jitter_sigma: 0.0,
            jitter_clip: 0.0,
            keep_probability: 1.0,
        }
    }
}

/// The similarity part of an augmentation, so grasp poses can follow the cloud.
#[derive(Clone, Debug, PartialEq)]
pub struct Similarity {
    pub scale: f64,
    pub rotation: Rot3,
}

impl Similarity {
    pub fn apply(&self, p: Point3) -> Point3 {
        scale(rotate(&self.rotation, p), self.scale)
    }

    pub fn apply_pose(&self, pose: &GraspPose) -> GraspPose {
        pose.transformed(self.scale, &self.rotation, [0.0; 3])
    }
}

/// Uniform scale, random rotation, clipped Gaussian jitter and point dropout,
/// in that order. Deterministic given `seed`; at least one point always survives.
pub fn augment_pointcloud(pc: &PointCloud, config: &AugmentConfig, seed: u64) -> (PointCloud, Similarity) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = if config.scale_max > config.scale_min {
        rng.random_range(config.scale_min..=config.scale_max)
    } else {
        config.scale_min
    };
    let rotation = if config.rotate { random_rotation(&mut rng) } else { IDENTITY_ROTATION };
    let sim = Similarity { scale: s, rotation };
    let mut points: Vec<Point3> = pc.points.iter().map(|p| sim.apply(*p)).collect();
    if config.jitter_sigma > 0.0 {
        let normal = Normal::new(0.0, config.jitter_sigma).expect("positive sigma");
        for p in points.iter_mut() {
            for v in p.iter_mut() {
                let j: f64 = normal.sample(&mut rng);
                *v += j.clamp(-config.jitter_clip, config.jitter_clip);
            }
        }
    }
    if config.keep_probability < 1.0 {
        let keep: Vec<bool> = points.iter().map(|_| rng.random::<f64>() < config.keep_probability).collect();
        if keep.iter().any(|k| *k) {
            points = points.into_iter().zip(keep).filter_map(|(p, k)| k.then_some(p)).collect();
        } else {
            let i = rng.random_range(0..points.len());
            points = vec![points[i]];
        }
    }
    (PointCloud { points }, sim)
}

/// Farthest-point downsampling to `n` when the cloud is larger; otherwise every
/// point is kept and the remainder is drawn with replacement.
pub fn downsample<R: Rng>(pc: &PointCloud, n: usize, rng: &mut R) -> Result<PointCloud> {
    if n == 0 {
        return Err(Error::Validation("downsample target must be positive".into()));
    }
    let m = pc.len();
    if m > n {
        let idx = fps_select(&pc.points, n, 0)?;
        return Ok(pc.subset(&idx));
    }
    let mut points = pc.points.clone();
    while points.len() < n {
        points.push(pc.points[rng.random_range(0..m)]);
    }
    Ok(PointCloud { points })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn brute_force_fps(points: &[Point3], k: usize, start: usize) -> Vec<usize> {
        let mut sel = vec![start];
        while sel.len() < k {
            let mut best = None;
            let mut best_d = -1.0;
            for i in 0..points.len() {
                if sel.contains(&i) {
                    continue;
                }
                let d = sel.iter().map(|&j| dist2(points[i], points[j])).fold(f64::INFINITY, f64::min);
                if d > best_d {
                    best_d = d;
                    best = Some(i);
                }
            }
            sel.push(best.unwrap());
        }
        sel
    }

    #[test]
    fn identity_pose_gives_template() {
        let t = GripperTemplate::default();
        let cps = pose_to_control_points(&GraspPose::identity(), &t).unwrap();
        assert_eq!(cps.points, t.points);
    }

    #[test]
    fn translation_shifts_every_point() {
        let t = GripperTemplate::default();
        let pose = GraspPose::new(IDENTITY_ROTATION, [0.0, 0.0, 0.1]).unwrap();
        let cps = pose_to_control_points(&pose, &t).unwrap();
        for (a, b) in cps.points.iter().zip(&t.points) {
            assert!((a[2] - b[2] - 0.1).abs() < 1e-12 && a[0] == b[0] && a[1] == b[1]);
        }
    }

    #[test]
    fn quarter_turn_about_z() {
        let t = GripperTemplate::default();
        let pose = GraspPose::new(axis_angle([0.0, 0.0, 1.0], std::f64::consts::FRAC_PI_2), [0.0; 3]).unwrap();
        let cps = pose_to_control_points(&pose, &t).unwrap();
        for (a, p) in cps.points.iter().zip(&t.points) {
            let expect = [-p[1], p[0], p[2]];
            for k in 0..3 {
                assert!((a[k] - expect[k]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn non_orthonormal_rotation_rejected() {
        let mut r = IDENTITY_ROTATION;
        r[0][0] = 1.1;
        assert!(GraspPose::new(r, [0.0; 3]).is_err());
        let reflect = [[-1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
        assert!(GraspPose::new(reflect, [0.0; 3]).is_err());
    }

    #[test]
    fn fps_collinear_and_square() {
        let line = [[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [2.0, 0.0, 0.0], [10.0, 0.0, 0.0]];
        assert_eq!(fps_select(&line, 2, 0).unwrap(), vec![0, 3]);
        assert_eq!(fps_select(&line, 4, 0).unwrap(), vec![0, 3, 2, 1]);
        let square = [[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [1.0, 1.0, 0.0], [0.0, 1.0, 0.0]];
        assert_eq!(fps_select(&square, 3, 0).unwrap(), vec![0, 2, 1]);
        assert!(fps_select(&square, 5, 0).is_err());
        assert!(fps_select(&square, 1, 4).is_err());
    }

    #[test]
    fn augmentation_is_deterministic() {
        let pc = PointCloud::new((0..50).map(|i| [i as f64 * 0.01, (i % 7) as f64 * 0.02, 0.0]).collect()).unwrap();
        let cfg = AugmentConfig::default();
        assert_eq!(augment_pointcloud(&pc, &cfg, 9).0, augment_pointcloud(&pc, &cfg, 9).0);
    }

    #[test]
    fn forced_scale_doubles_distances() {
        let pc = PointCloud::new(vec![[0.0, 0.0, 0.0], [0.1, 0.0, 0.0], [0.0, 0.3, 0.2]]).unwrap();
        let cfg = AugmentConfig { scale_min: 2.0, scale_max: 2.0, ..AugmentConfig::disabled() };
        let (out, _) = augment_pointcloud(&pc, &cfg, 1);
        for i in 0..3 {
            for j in 0..3 {
                let a = dist2(pc.points()[i], pc.points()[j]).sqrt();
                let b = dist2(out.points()[i], out.points()[j]).sqrt();
                assert!((b - 2.0 * a).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn downsample_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let big = PointCloud::new((0..64).map(|i| [i as f64, (i * i % 13) as f64, 0.0]).collect()).unwrap();
        let d = downsample(&big, 16, &mut rng).unwrap();
        assert_eq!(d.len(), 16);
        assert!(d.points().iter().all(|p| big.points().contains(p)));
        assert_eq!(downsample(&big, 64, &mut rng).unwrap(), big);
        let small = big.subset(&(0..10).collect::<Vec<_>>());
        let up = downsample(&small, 16, &mut rng).unwrap();
        assert_eq!(up.len(), 16);
        assert!(up.points().iter().all(|p| small.points().contains(p)));
        assert!(downsample(&small, 0, &mut rng).is_err());
    }

    #[test]
    fn centering_zeroes_the_mean() {
        let pc = PointCloud::new(vec![[1.0, 2.0, 3.0], [3.0, 2.0, 1.0], [5.0, 5.0, 5.0]]).unwrap();
        let (c, off) = pc.centered();
        assert!(norm(c.centroid()) < 1e-12);
        assert!((off[0] - 3.0).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn fps_matches_brute_force(pts in prop::collection::vec((-1.0f64..1.0, -1.0f64..1.0, -1.0f64..1.0), 1..40), kfrac in 0.0f64..1.0) {
            let points: Vec<Point3> = pts.iter().map(|(x, y, z)| [*x, *y, *z]).collect();
            let k = 1 + ((points.len() - 1) as f64 * kfrac) as usize;
            prop_assert_eq!(fps_select(&points, k, 0).unwrap(), brute_force_fps(&points, k, 0));
        }

        #[test]
        fn rigid_augmentation_preserves_distances(seed in any::<u64>()) {
            let pc = PointCloud::new((0..12).map(|i| [(i as f64).sin(), (i as f64 * 0.3).cos(), i as f64 * 0.05]).collect()).unwrap();
            let cfg = AugmentConfig { rotate: true, ..AugmentConfig::disabled() };
            let (out, _) = augment_pointcloud(&pc, &cfg, seed);
            for i in 0..12 {
                for j in 0..12 {
                    let a = dist2(pc.points()[i], pc.points()[j]).sqrt();
                    let b = dist2(out.points()[i], out.points()[j]).sqrt();
                    prop_assert!((a - b).abs() < 1e-6);
                }
            }
        }
    }
}
