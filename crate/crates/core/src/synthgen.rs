//! Procedural two-part tools (cylindrical handle + head primitive) with an
//! analytic task-compatibility oracle.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::backends::{encode_gray_png, fnv1a, splitmix64, write_tag, FixtureCorpus};
use crate::dataset::{read_json, write_json, DatasetIndex, GraspAnnotation, ObjectInstanceRecord};
use crate::error::{Error, Result};
use crate::geometry::{
    add, axis_angle, cross, mat_mul3, normalize, pose_to_control_points, rotate, sub, transpose3, GraspPose,
    GripperTemplate, Point3, PointCloud, Rot3, IDENTITY_ROTATION,
};
use crate::knowledge::{CandidateRecord, PromptKind};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadShape {
    Box,
    Ellipsoid,
    Disk,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Region {
    Handle,
    Head,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PartShape {
    /// Axis along local x; half extents `[half_length, r, r]`.
    Cylinder,
    Box,
    Ellipsoid,
    /// Axis along local z; half extents `[r, r, half_thickness]`.
    Disk,
}

/// A solid primitive placed in the object frame.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Part {
    pub shape: PartShape,
    pub center: Point3,
    /// Columns are the local axes expressed in the object frame.
    pub rotation: Rot3,
    pub half_extents: [f64; 3],
}

impl Part {
    pub fn to_local(&self, p: Point3) -> Point3 {
        rotate(&transpose3(&self.rotation), sub(p, self.center))
    }

    pub fn to_object(&self, local: Point3) -> Point3 {
        add(rotate(&self.rotation, local), self.center)
    }

    /// Closed test against the local bounding box grown by `inflation` on every side.
    pub fn in_bounding_volume(&self, p: Point3, inflation: f64) -> bool {
        let l = self.to_local(p);
        (0..3).all(|i| l[i].abs() <= self.half_extents[i] + inflation)
    }

    /// Distance from `p` to the solid; 0 inside. Exact for cylinders, disks and
    /// boxes, a lower bound for ellipsoids.
    pub fn distance_lower_bound(&self, p: Point3) -> f64 {
        let l = self.to_local(p);
        let h = self.half_extents;
        match self.shape {
            PartShape::Box => {
                let d: f64 = (0..3).map(|i| (l[i].abs() - h[i]).max(0.0).powi(2)).sum();
                d.sqrt()
            }
            PartShape::Cylinder => {
                let axial = (l[0].abs() - h[0]).max(0.0);
                let radial = ((l[1] * l[1] + l[2] * l[2]).sqrt() - h[1]).max(0.0);
                axial.hypot(radial)
            }
            PartShape::Disk => {
                let axial = (l[2].abs() - h[2]).max(0.0);
                let radial = ((l[0] * l[0] + l[1] * l[1]).sqrt() - h[0]).max(0.0);
                axial.hypot(radial)
            }
            PartShape::Ellipsoid => {
                // The gauge function is (1/min axis)-Lipschitz.
                let gauge = (0..3).map(|i| (l[i] / h[i]).powi(2)).sum::<f64>().sqrt();
                let min_axis = h.iter().cloned().fold(f64::INFINITY, f64::min);
                ((gauge - 1.0) * min_axis).max(0.0)
            }
        }
    }

    pub fn surface_area(&self) -> f64 {
        let h = self.half_extents;
        match self.shape {
            PartShape::Cylinder => 2.0 * std::f64::consts::PI * h[1] * 2.0 * h[0],
            PartShape::Box => 8.0 * (h[0] * h[1] + h[0] * h[2] + h[1] * h[2]),
            PartShape::Disk => {
                2.0 * std::f64::consts::PI * h[0] * h[0] + 2.0 * std::f64::consts::PI * h[0] * 2.0 * h[2]
            }
            PartShape::Ellipsoid => {
                let p = 1.6075;
                let (a, b, c) = (h[0].powf(p), h[1].powf(p), h[2].powf(p));
                4.0 * std::f64::consts::PI * ((a * b + a * c + b * c) / 3.0).powf(1.0 / p)
            }
        }
    }

    pub fn sample_surface<R: Rng>(&self, rng: &mut R) -> Point3 {
        let h = self.half_extents;
        let tau = std::f64::consts::TAU;
        let local = match self.shape {
            PartShape::Cylinder => {
                let th = rng.random_range(0.0..tau);
                [rng.random_range(-h[0]..h[0]), h[1] * th.cos(), h[2] * th.sin()]
            }
            PartShape::Box => {
                let areas = [h[1] * h[2], h[0] * h[2], h[0] * h[1]];
                let mut u = rng.random_range(0.0..areas.iter().sum::<f64>());
                let mut axis = 2;
                for (i, a) in areas.iter().enumerate() {
                    if u < *a {
                        axis = i;
                        break;
                    }
                    u -= a;
                }
                let mut l =
                    [rng.random_range(-h[0]..h[0]), rng.random_range(-h[1]..h[1]), rng.random_range(-h[2]..h[2])];
                l[axis] = if rng.random_bool(0.5) { h[axis] } else { -h[axis] };
                l
            }
            PartShape::Ellipsoid => {
                let d: Point3 = [rng.sample(StandardNormal), rng.sample(StandardNormal), rng.sample(StandardNormal)];
                let d = normalize(d);
                [d[0] * h[0], d[1] * h[1], d[2] * h[2]]
            }
            PartShape::Disk => {
                let face = std::f64::consts::PI * h[0] * h[0];
                let rim = tau * h[0] * h[2];
                let th = rng.random_range(0.0..tau);
                if rng.random_range(0.0..2.0 * face + rim) < rim {
                    [h[0] * th.cos(), h[0] * th.sin(), rng.random_range(-h[2]..h[2])]
                } else {
                    let r = h[0] * rng.random_range(0.0f64..1.0).sqrt();
                    [r * th.cos(), r * th.sin(), if rng.random_bool(0.5) { h[2] } else { -h[2] }]
                }
            }
        };
        self.to_object(local)
    }
}

/// Analytic part decomposition of a generated tool.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToolGeometry {
    pub handle: Part,
    pub head: Part,
}

impl ToolGeometry {
    pub fn part(&self, region: Region) -> &Part {
        match region {
            Region::Handle => &self.handle,
            Region::Head => &self.head,
        }
    }

    pub fn translated(&self, offset: Point3) -> ToolGeometry {
        let mut g = self.clone();
        g.handle.center = add(g.handle.center, offset);
        g.head.center = add(g.head.center, offset);
        g
    }

    pub fn distance_lower_bound(&self, p: Point3) -> f64 {
        self.handle.distance_lower_bound(p).min(self.head.distance_lower_bound(p))
    }
}

// ---------------------------------------------------------------------------
// spec

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassSpec {
    pub id: String,
    pub handle_length: [f64; 2],
    #[serde(default = "default_handle_radius")]
    pub handle_radius: [f64; 2],
    pub head: HeadShape,
    /// Multiplier on the head's nominal size.
    #[serde(default = "default_head_scale")]
    pub head_scale: [f64; 2],
    pub vocabulary: Vec<String>,
    /// Tasks this class supports; `None` means all tasks.
    #[serde(default)]
    pub affords: Option<Vec<String>>,
}

fn default_handle_radius() -> [f64; 2] {
    [0.008, 0.014]
}

fn default_head_scale() -> [f64; 2] {
    [0.85, 1.15]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    pub id: String,
    pub region: Region,
    pub vocabulary: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub seed: u64,
    pub classes: Vec<ClassSpec>,
    pub tasks: Vec<TaskSpec>,
    #[serde(default = "d_instances")]
    pub instances_per_class: usize,
    #[serde(default = "d_grasps")]
    pub grasps_per_instance: usize,
    #[serde(default = "d_points")]
    pub points_per_instance: usize,
    /// Standard deviation of surface-point jitter, meters.
    #[serde(default = "d_noise")]
    pub noise: f64,
    #[serde(default = "d_inflation")]
    pub region_inflation: f64,
    #[serde(default = "d_clearance")]
    pub clearance: f64,
    #[serde(default = "d_images")]
    pub images_per_instance: usize,
    #[serde(default = "d_image_size")]
    pub image_size: usize,
    #[serde(default = "d_candidates")]
    pub retrieval_candidates: usize,
}

fn d_instances() -> usize {
    8
}
fn d_grasps() -> usize {
    25
}
fn d_points() -> usize {
    1024
}
fn d_noise() -> f64 {
    0.001
}
fn d_inflation() -> f64 {
    0.005
}
fn d_clearance() -> f64 {
    0.001
}
fn d_images() -> usize {
    2
}
fn d_image_size() -> usize {
    32
}
fn d_candidates() -> usize {
    6
}

fn class(id: &str, len: [f64; 2], head: HeadShape, vocab: &[&str], affords: Option<&[&str]>) -> ClassSpec {
    ClassSpec {
        id: id.into(),
        handle_length: len,
        handle_radius: default_handle_radius(),
        head,
        head_scale: default_head_scale(),
        vocabulary: vocab.iter().map(|s| s.to_string()).collect(),
        affords: affords.map(|a| a.iter().map(|s| s.to_string()).collect()),
    }
}

fn task(id: &str, region: Region, vocab: &[&str]) -> TaskSpec {
    TaskSpec { id: id.into(), region, vocabulary: vocab.iter().map(|s| s.to_string()).collect() }
}

const HANDLE_WORDS: [&str; 4] = ["grip", "shaft", "handle", "lever"];
const HEAD_WORDS: [&str; 4] = ["blade", "face", "head", "contact"];

impl Default for SynthSpec {
    /// Six classes, two tasks; two classes afford only one task.
    fn default() -> Self {
        use HeadShape::*;
        Self {
            seed: 7,
            classes: vec![
                class("spatula", [0.12, 0.16], Box, &["kitchen", "flat", "turner", "utensil"], None),
                class("ladle", [0.13, 0.17], Ellipsoid, &["kitchen", "scoop", "serving", "utensil"], None),
                class("pan", [0.11, 0.15], Disk, &["kitchen", "cooking", "round", "vessel"], None),
                class("hammer", [0.14, 0.18], Box, &["workshop", "striking", "metal", "tool"], None),
                class("mallet", [0.12, 0.16], Ellipsoid, &["workshop", "striking", "wooden", "tool"], Some(&["use"])),
                class("paddle", [0.15, 0.19], Disk, &["sport", "flat", "wooden", "round"], Some(&["handover"])),
            ],
            tasks: vec![task("use", Region::Handle, &HANDLE_WORDS), task("handover", Region::Head, &HEAD_WORDS)],
            instances_per_class: d_instances(),
            grasps_per_instance: d_grasps(),
            points_per_instance: d_points(),
            noise: d_noise(),
            region_inflation: d_inflation(),
            clearance: d_clearance(),
            images_per_instance: d_images(),
            image_size: d_image_size(),
            retrieval_candidates: d_candidates(),
        }
    }
}

impl SynthSpec {
    /// Eight classes and eight tasks whose vocabularies overlap by region and
    /// by class family, for held-out class and task experiments.
    pub fn overlapping() -> Self {
        use HeadShape::*;
        let handle = |id: &str, own: &[&str]| {
            let mut v: Vec<&str> = HANDLE_WORDS.to_vec();
            v.extend_from_slice(own);
            task(id, Region::Handle, &v)
        };
        let head = |id: &str, own: &[&str]| {
            let mut v: Vec<&str> = HEAD_WORDS.to_vec();
            v.extend_from_slice(own);
            task(id, Region::Head, &v)
        };
        Self {
            classes: vec![
                class("spatula", [0.12, 0.16], Box, &["kitchen", "flat", "turner", "utensil"], None),
                class("scraper", [0.11, 0.15], Box, &["kitchen", "flat", "scraping", "utensil"], None),
                class("ladle", [0.13, 0.17], Ellipsoid, &["kitchen", "scoop", "serving", "utensil"], None),
                class("spoon", [0.11, 0.15], Ellipsoid, &["kitchen", "scoop", "eating", "utensil"], None),
                class("pan", [0.11, 0.15], Disk, &["kitchen", "cooking", "round", "vessel"], None),
                class("skillet", [0.12, 0.16], Disk, &["kitchen", "frying", "round", "vessel"], None),
                class("hammer", [0.14, 0.18], Box, &["workshop", "striking", "metal", "tool"], None),
                class("mallet", [0.12, 0.16], Ellipsoid, &["workshop", "striking", "wooden", "tool"], None),
            ],
            tasks: vec![
                handle("use", &["operate"]),
                handle("stir", &["mix"]),
                handle("pound", &["strike"]),
                handle("scoop", &["dig"]),
                head("handover", &["pass"]),
                head("give", &["offer"]),
                head("store", &["hang"]),
                head("present", &["show"]),
            ],
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes.len() < 2 || self.tasks.len() < 2 {
            return Err(Error::Validation("synthetic spec needs at least two classes and two tasks".into()));
        }
        if self.instances_per_class == 0 || self.grasps_per_instance == 0 || self.points_per_instance < 16 {
            return Err(Error::Validation("instance, grasp and point counts must be positive (points ≥ 16)".into()));
        }
        if self.images_per_instance == 0 || self.image_size < 4 {
            return Err(Error::Validation("need at least one image of at least 4×4 pixels".into()));
        }
        let ids = |v: Vec<&String>, what: &str| -> Result<()> {
            let set: BTreeSet<_> = v.iter().collect();
            if set.len() != v.len() {
                return Err(Error::Validation(format!("duplicate {what} id")));
            }
            if let Some(bad) = v.iter().find(|s| s.is_empty() || s.contains(['/', '\\', ' '])) {
                return Err(Error::Validation(format!("{what} id {bad:?} must be a single path-safe word")));
            }
            Ok(())
        };
        ids(self.classes.iter().map(|c| &c.id).collect(), "class")?;
        ids(self.tasks.iter().map(|t| &t.id).collect(), "task")?;
        let task_ids: BTreeSet<&str> = self.tasks.iter().map(|t| t.id.as_str()).collect();
        for c in &self.classes {
            let ok = |r: [f64; 2]| r[0] > 0.0 && r[0] <= r[1] && r.iter().all(|v| v.is_finite());
            if !ok(c.handle_length) || !ok(c.handle_radius) || !ok(c.head_scale) {
                return Err(Error::Validation(format!("class {}: ranges must be positive and ordered", c.id)));
            }
            if c.handle_radius[1] >= 0.035 {
                return Err(Error::Validation(format!("class {}: handle radius too large for the gripper", c.id)));
            }
            if c.vocabulary.is_empty() {
                return Err(Error::Validation(format!("class {} has no vocabulary", c.id)));
            }
            if let Some(a) = &c.affords {
                if let Some(t) = a.iter().find(|t| !task_ids.contains(t.as_str())) {
                    return Err(Error::Validation(format!("class {} affords unknown task {t}", c.id)));
                }
            }
        }
        if self.tasks.iter().any(|t| t.vocabulary.is_empty()) {
            return Err(Error::Validation("every task needs vocabulary".into()));
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let spec: Self = read_json(path)?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn affords(&self, class: &ClassSpec, task: &str) -> bool {
        class.affords.as_ref().is_none_or(|a| a.iter().any(|t| t == task))
    }

    pub fn class(&self, id: &str) -> Option<&ClassSpec> {
        self.classes.iter().find(|c| c.id == id)
    }

    pub fn task(&self, id: &str) -> Option<&TaskSpec> {
        self.tasks.iter().find(|t| t.id == id)
    }
}

// ---------------------------------------------------------------------------
// oracle

/// Closed-volume label test for a grasp centroid.
pub fn oracle_label_point(centroid: Point3, geometry: &ToolGeometry, region: Region, inflation: f64) -> u8 {
    geometry.part(region).in_bounding_volume(centroid, inflation) as u8
}

pub fn oracle_label(pose: &GraspPose, geometry: &ToolGeometry, region: Region, inflation: f64) -> u8 {
    let template = GripperTemplate::default();
    oracle_label_point(pose.transform_point(template.centroid()), geometry, region, inflation)
}

/// Label of `task` for a grasp on an instance of `class`: zero for tasks the
/// class does not afford.
pub fn task_label(
    spec: &SynthSpec,
    class: &ClassSpec,
    task: &TaskSpec,
    pose: &GraspPose,
    geometry: &ToolGeometry,
) -> u8 {
    if !spec.affords(class, &task.id) {
        return 0;
    }
    oracle_label(pose, geometry, task.region, spec.region_inflation)
}

// ---------------------------------------------------------------------------
// generation

fn uniform<R: Rng>(rng: &mut R, r: [f64; 2]) -> f64 {
    if r[0] == r[1] {
        r[0]
    } else {
        rng.random_range(r[0]..r[1])
    }
}

fn build_geometry<R: Rng>(c: &ClassSpec, rng: &mut R) -> ToolGeometry {
    let length = uniform(rng, c.handle_length);
    let radius = uniform(rng, c.handle_radius);
    let s = uniform(rng, c.head_scale);
    let (shape, half, reach) = match c.head {
        HeadShape::Box => {
            let h = [0.04 * s, 0.028 * s, rng.random_range(0.005..0.012)];
            (PartShape::Box, h, h[0])
        }
        HeadShape::Ellipsoid => {
            let h = [0.038 * s, 0.03 * s, rng.random_range(0.016..0.026)];
            (PartShape::Ellipsoid, h, h[0])
        }
        HeadShape::Disk => {
            let r = 0.045 * s;
            (PartShape::Disk, [r, r, rng.random_range(0.005..0.011)], r)
        }
    };
    let handle = Part {
        shape: PartShape::Cylinder,
        center: [length / 2.0, 0.0, 0.0],
        rotation: IDENTITY_ROTATION,
        half_extents: [length / 2.0, radius, radius],
    };
    let head = Part { shape, center: [length + reach, 0.0, 0.0], rotation: IDENTITY_ROTATION, half_extents: half };
    // Random yaw, then center on the bounding-box midpoint of the tool axis.
    let yaw = axis_angle([0.0, 0.0, 1.0], rng.random_range(0.0..std::f64::consts::TAU));
    let mid = [(length + 2.0 * reach) / 2.0, 0.0, 0.0];
    let place = |p: Part| Part { center: rotate(&yaw, sub(p.center, mid)), rotation: mat_mul3(&yaw, &p.rotation), ..p };
    ToolGeometry { handle: place(handle), head: place(head) }
}

fn sample_points<R: Rng>(g: &ToolGeometry, n: usize, noise: f64, rng: &mut R) -> Vec<Point3> {
    let (ah, ad) = (g.handle.surface_area(), g.head.surface_area());
    let jitter = Normal::new(0.0, noise.max(0.0)).expect("finite noise");
    (0..n)
        .map(|_| {
            let part = if rng.random_range(0.0..ah + ad) < ah { &g.handle } else { &g.head };
            let p = part.sample_surface(rng);
            [p[0] + jitter.sample(rng), p[1] + jitter.sample(rng), p[2] + jitter.sample(rng)]
        })
        .collect()
}

/// Builds a pinch whose control-point centroid sits at `target`, closing along
/// `close` and approaching along `approach` (both unit, orthogonal).
fn pinch(target: Point3, close: Point3, approach: Point3) -> GraspPose {
    let y = cross(approach, close);
    let r: Rot3 = [[close[0], y[0], approach[0]], [close[1], y[1], approach[1]], [close[2], y[2], approach[2]]];
    let c = GripperTemplate::default().centroid();
    GraspPose { rotation: r, translation: sub(target, rotate(&r, c)) }
}

fn sample_grasp<R: Rng>(g: &ToolGeometry, rng: &mut R) -> GraspPose {
    let tau = std::f64::consts::TAU;
    if rng.random_bool(0.5) {
        // Around the handle: both closing and approach directions are normal to its axis.
        let p = &g.handle;
        let x = rng.random_range(-1.05..1.05) * p.half_extents[0];
        let th = rng.random_range(0.0..tau);
        let close_l = [0.0, th.cos(), th.sin()];
        let approach_l = [0.0, -th.sin(), th.cos()];
        let target = p.to_object([x, rng.random_range(-0.3..0.3) * p.half_extents[1], 0.0]);
        pinch(target, rotate(&p.rotation, close_l), rotate(&p.rotation, approach_l))
    } else {
        // Across the head's thin axis (local z), approaching in its plane.
        let p = &g.head;
        let h = p.half_extents;
        let th = rng.random_range(0.0..tau);
        let target = p.to_object([rng.random_range(-1.0..0.8) * h[0], rng.random_range(-0.6..0.6) * h[1], 0.0]);
        pinch(target, rotate(&p.rotation, [0.0, 0.0, 1.0]), rotate(&p.rotation, [th.cos(), th.sin(), 0.0]))
    }
}

/// Whether both fingertips clear the solid by at least `clearance`.
pub fn collision_plausible(pose: &GraspPose, geometry: &ToolGeometry, clearance: f64) -> bool {
    let cps = match pose_to_control_points(pose, &GripperTemplate::default()) {
        Ok(c) => c,
        Err(_) => return false,
    };
    GripperTemplate::FINGERTIPS.iter().all(|&i| geometry.distance_lower_bound(cps.points[i]) >= clearance)
}

pub fn class_signal(class: &str) -> u64 {
    splitmix64(fnv1a(class.as_bytes())) | 1
}

/// Orthographic top-down silhouette, tagged with the class signal.
fn render_image(points: &[Point3], view_angle: f64, size: usize, tag: u64) -> Result<Vec<u8>> {
    let r = axis_angle([0.0, 0.0, 1.0], view_angle);
    let proj: Vec<Point3> = points.iter().map(|p| rotate(&r, *p)).collect();
    let extent = proj.iter().map(|p| p[0].abs().max(p[1].abs())).fold(1e-6, f64::max);
    let mut px = vec![0u8; size * size];
    for p in &proj {
        let u = ((p[0] / extent + 1.0) * 0.5 * (size - 1) as f64).round() as usize;
        let v = ((p[1] / extent + 1.0) * 0.5 * (size - 1) as f64).round() as usize;
        let shade = (128.0 + 100.0 * (p[2] / extent).clamp(-1.0, 1.0)) as u8;
        px[v.min(size - 1) * size + u.min(size - 1)] = shade.max(1);
    }
    write_tag(&mut px, tag);
    encode_gray_png(size, size, &px)
}

fn instance_rng(spec: &SynthSpec, class: &str, k: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(splitmix64(spec.seed ^ fnv1a(class.as_bytes()) ^ splitmix64(k as u64)))
}

/// Generated instance plus its rendered images.
pub struct GeneratedInstance {
    pub record: ObjectInstanceRecord,
    pub images: Vec<Vec<u8>>,
}

pub fn generate_instance(spec: &SynthSpec, class_id: &str, k: usize) -> Result<GeneratedInstance> {
    let c = spec.class(class_id).ok_or_else(|| Error::Validation(format!("unknown class {class_id}")))?;
    let mut rng = instance_rng(spec, class_id, k);
    let geometry = build_geometry(c, &mut rng);
    let points = sample_points(&geometry, spec.points_per_instance, spec.noise, &mut rng);
    let mut grasps = Vec::with_capacity(spec.grasps_per_instance);
    let mut attempts = 0;
    while grasps.len() < spec.grasps_per_instance {
        attempts += 1;
        if attempts > 10_000 {
            return Err(Error::Validation(format!("could not place collision-free grasps on {class_id} #{k}")));
        }
        let pose = sample_grasp(&geometry, &mut rng);
        if !collision_plausible(&pose, &geometry, spec.clearance) {
            continue;
        }
        let labels: BTreeMap<String, u8> =
            spec.tasks.iter().map(|t| (t.id.clone(), task_label(spec, c, t, &pose, &geometry))).collect();
        grasps.push(GraspAnnotation { pose, labels });
    }
    let tag = class_signal(class_id);
    let images = (0..spec.images_per_instance)
        .map(|_| render_image(&points, rng.random_range(0.0..std::f64::consts::TAU), spec.image_size, tag))
        .collect::<Result<Vec<_>>>()?;
    let record = ObjectInstanceRecord {
        id: format!("{class_id}_{k}"),
        class_id: class_id.to_string(),
        pointcloud: PointCloud::new(points)?,
        grasps,
        image_ids: (0..spec.images_per_instance).map(|i| i.to_string()).collect(),
        geometry: Some(geometry),
    };
    Ok(GeneratedInstance { record, images })
}

pub fn generate_index(spec: &SynthSpec) -> Result<(DatasetIndex, Vec<Vec<Vec<u8>>>)> {
    spec.validate()?;
    let mut instances = Vec::new();
    let mut images = Vec::new();
    for c in &spec.classes {
        for k in 0..spec.instances_per_class {
            let g = generate_instance(spec, &c.id, k)?;
            instances.push(g.record);
            images.push(g.images);
        }
    }
    let index = DatasetIndex {
        classes: spec.classes.iter().map(|c| c.id.clone()).collect(),
        tasks: spec.tasks.iter().map(|t| t.id.clone()).collect(),
        instances,
    };
    index.validate()?;
    Ok((index, images))
}

/// Writes the dataset, images, retrieval candidates, fixture corpus and the
/// spec itself under `root`.
pub fn generate_dataset(spec: &SynthSpec, root: &Path) -> Result<DatasetIndex> {
    let (index, images) = generate_index(spec)?;
    index.save(root)?;
    for (inst, imgs) in index.instances.iter().zip(&images) {
        for (id, bytes) in inst.image_ids.iter().zip(imgs) {
            let path = DatasetIndex::image_path(root, &inst.id, id);
            if let Some(dir) = path.parent() {
                fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            }
            fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
        }
    }
    write_retrieval(spec, &index, root)?;
    write_json(&root.join("knowledge").join("corpus.json"), &fixture_corpus(spec))?;
    write_json(&root.join("synth_spec.json"), spec)?;
    Ok(index)
}

fn write_retrieval(spec: &SynthSpec, index: &DatasetIndex, root: &Path) -> Result<()> {
    for c in &spec.classes {
        let dir = root.join("retrieval").join(&c.id);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(spec.seed ^ 0x7265_7472) ^ fnv1a(c.id.as_bytes()));
        let members: Vec<&ObjectInstanceRecord> = index.instances_of_class(&c.id).collect();
        let mut records = Vec::new();
        let mut previous: Option<Vec<u8>> = None;
        for k in 0..spec.retrieval_candidates {
            // Every third candidate repeats the previous one byte for byte.
            let bytes = match (&previous, k % 3 == 2) {
                (Some(p), true) => p.clone(),
                _ => {
                    let src = members[rng.random_range(0..members.len())];
                    render_image(
                        src.pointcloud.points(),
                        rng.random_range(0.0..std::f64::consts::TAU),
                        spec.image_size,
                        class_signal(&c.id),
                    )?
                }
            };
            let file = format!("{k}.png");
            let path = dir.join(&file);
            fs::write(&path, &bytes).map_err(|e| Error::io(&path, e))?;
            records.push(CandidateRecord { file, confidence: (rng.random_range(300..1000) as f64) / 1000.0 });
            previous = Some(bytes);
        }
        write_json(&dir.join("candidates.json"), &records)?;
    }
    Ok(())
}

fn head_phrase(shape: HeadShape) -> &'static str {
    match shape {
        HeadShape::Box => "flat rectangular blade",
        HeadShape::Ellipsoid => "rounded oval bowl",
        HeadShape::Disk => "round flat disk",
    }
}

fn rot(v: &[String], i: usize) -> &str {
    &v[i % v.len()]
}

/// Canned descriptions whose shared tokens follow the spec's vocabulary overlap.
pub fn fixture_corpus(spec: &SynthSpec) -> FixtureCorpus {
    let mut corpus = FixtureCorpus::default();
    for c in &spec.classes {
        let v = &c.vocabulary;
        let id = &c.id;
        let afforded: Vec<&TaskSpec> = spec.tasks.iter().filter(|t| spec.affords(c, &t.id)).collect();
        corpus.insert(
            id,
            PromptKind::O2O,
            (0..4)
                .map(|i| match i {
                    0 => format!(
                        "Objects such as {} tools and {} implements have a similar shape to a {id}.",
                        rot(v, 0),
                        rot(v, 1)
                    ),
                    1 => format!("A {id} belongs to the same family as other {} {} items.", rot(v, 1), rot(v, 2)),
                    2 => format!(
                        "Household objects like {} and {} gear have similar geometries to a {id}.",
                        rot(v, 2),
                        rot(v, 3)
                    ),
                    _ => format!("The {id} is functionally similar to other {} {} objects.", rot(v, 3), rot(v, 0)),
                })
                .collect(),
        );
        let o2t: Vec<String> = if afforded.is_empty() {
            vec![format!("A {id} is a {} object.", rot(v, 0))]
        } else {
            let names: Vec<&str> = afforded.iter().map(|t| t.id.as_str()).collect();
            let mut out = vec![format!(
                "A {id} is a {} {} object commonly used to {}.",
                rot(v, 0),
                rot(v, 1),
                names.join(" and ")
            )];
            out.extend(
                afforded.iter().map(|t| format!("People use a {id} to {} with its {}.", t.id, rot(&t.vocabulary, 0))),
            );
            out
        };
        corpus.insert(id, PromptKind::O2T, o2t);
        corpus.insert(
            id,
            PromptKind::O2P,
            vec![
                format!("- long cylindrical handle\n- {} head\n- {} surface", head_phrase(c.head), rot(v, 0)),
                format!("- slender grip shaft\n- {}\n- {} finish", head_phrase(c.head), rot(v, 2)),
            ],
        );
    }
    for t in &spec.tasks {
        let v = &t.vocabulary;
        let id = &t.id;
        corpus.insert(
            id,
            PromptKind::T2T,
            vec![
                format!(
                    "Verbs such as {}, {} and {} achieve similar effects to '{id} an object'.",
                    rot(v, 0),
                    rot(v, 1),
                    rot(v, 2)
                ),
                format!("To {id} is much like to {} or {} something.", rot(v, 3), rot(v, 4)),
                format!("A person who wants to {id} will {} the {} firmly.", rot(v, 1), rot(v, 0)),
            ],
        );
        let users: Vec<&str> = spec.classes.iter().filter(|c| spec.affords(c, id)).map(|c| c.id.as_str()).collect();
        let listed = if users.is_empty() { "few household objects".to_string() } else { users.join(", ") };
        corpus.insert(
            id,
            PromptKind::T2O,
            vec![
                format!("Objects such as {listed} afford the function of {id}."),
                format!("Tools with a {} {} are used to {id}.", rot(v, 0), rot(v, 1)),
            ],
        );
        let parts = match t.region {
            Region::Handle => "- long cylindrical handle\n- grip region along the shaft",
            Region::Head => "- functional head\n- broad contact surface at the tip",
        };
        corpus.insert(
            id,
            PromptKind::T2P,
            vec![format!("{parts}\n- {} {} part", rot(v, 0), rot(v, 1)), format!("{parts}\n- {} zone", rot(v, 2))],
        );
    }
    corpus
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit_box() -> ToolGeometry {
        let p = |shape, c: Point3, h| Part { shape, center: c, rotation: IDENTITY_ROTATION, half_extents: h };
        ToolGeometry {
            handle: p(PartShape::Cylinder, [0.0, 0.0, 0.0], [0.05, 0.01, 0.01]),
            head: p(PartShape::Box, [0.1, 0.0, 0.0], [0.03, 0.02, 0.01]),
        }
    }

    #[test]
    fn oracle_regions_are_complementary_at_handle_midpoint() {
        let g = unit_box();
        assert_eq!(oracle_label_point([0.0, 0.0, 0.0], &g, Region::Handle, 0.005), 1);
        assert_eq!(oracle_label_point([0.0, 0.0, 0.0], &g, Region::Head, 0.005), 0);
        let pose = pinch([0.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, -1.0]);
        assert_eq!(oracle_label(&pose, &g, Region::Handle, 0.005), 1);
        assert_eq!(oracle_label(&pose, &g, Region::Head, 0.005), 0);
    }

    #[test]
    fn oracle_boundary_is_closed() {
        let g = unit_box();
        let edge = 0.05 + 0.005;
        assert_eq!(oracle_label_point([edge, 0.0, 0.0], &g, Region::Handle, 0.005), 1);
        assert_eq!(oracle_label_point([edge + 1e-9, 0.0, 0.0], &g, Region::Handle, 0.005), 0);
    }

    #[test]
    fn pinch_centroid_hits_target() {
        let pose = pinch([0.1, -0.2, 0.3], [0.0, 1.0, 0.0], [0.0, 0.0, -1.0]);
        pose.validate().unwrap();
        let c = pose.transform_point(GripperTemplate::default().centroid());
        assert!((0..3).all(|i| (c[i] - [0.1, -0.2, 0.3][i]).abs() < 1e-12));
    }

    #[test]
    fn distances_are_exact_for_simple_parts() {
        let g = unit_box();
        assert!((g.handle.distance_lower_bound([0.0, 0.03, 0.0]) - 0.02).abs() < 1e-12);
        assert!((g.head.distance_lower_bound([0.1, 0.0, 0.05]) - 0.04).abs() < 1e-12);
        assert_eq!(g.head.distance_lower_bound([0.1, 0.0, 0.0]), 0.0);
        let e = Part {
            shape: PartShape::Ellipsoid,
            center: [0.0; 3],
            rotation: IDENTITY_ROTATION,
            half_extents: [0.04, 0.02, 0.01],
        };
        // True distance from (0.06,0,0) is 0.02; the bound must not exceed it.
        let d = e.distance_lower_bound([0.06, 0.0, 0.0]);
        assert!(d > 0.0 && d <= 0.02 + 1e-12);
    }

    #[test]
    fn instances_have_default_grasp_count_and_clearance() {
        let spec = SynthSpec::default();
        let g = generate_instance(&spec, "spatula", 0).unwrap();
        assert_eq!(g.record.grasps.len(), 25);
        let geom = g.record.geometry.as_ref().unwrap();
        for a in &g.record.grasps {
            assert!(collision_plausible(&a.pose, geom, spec.clearance));
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let spec = SynthSpec::default();
        let a = generate_instance(&spec, "ladle", 3).unwrap();
        let b = generate_instance(&spec, "ladle", 3).unwrap();
        assert_eq!(a.record, b.record);
        assert_eq!(a.images, b.images);
    }

    #[test]
    fn unafforded_tasks_are_all_negative() {
        let spec = SynthSpec::default();
        let g = generate_instance(&spec, "mallet", 1).unwrap();
        assert!(g.record.grasps.iter().all(|a| a.labels["handover"] == 0));
        assert!(g.record.grasps.iter().any(|a| a.labels["use"] == 1));
    }

    #[test]
    fn spec_validation() {
        let mut spec = SynthSpec::default();
        spec.classes.truncate(1);
        assert!(spec.validate().is_err());
        let mut spec = SynthSpec::default();
        spec.classes[0].affords = Some(vec!["juggle".into()]);
        assert!(spec.validate().is_err());
        assert!(SynthSpec::overlapping().validate().is_ok());
    }

    #[test]
    fn spec_json_round_trip() {
        let spec = SynthSpec::overlapping();
        let text = serde_json::to_string(&spec).unwrap();
        assert_eq!(serde_json::from_str::<SynthSpec>(&text).unwrap(), spec);
    }
}
