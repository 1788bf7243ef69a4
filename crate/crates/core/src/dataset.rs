//! On-disk dataset model.
//!
//! ```text
//! root/index.json                      classes, tasks, instance manifest
//! root/instances/<id>/points.f32le     "TGPC" + u32 LE count + count × 3 f32 LE
//! root/instances/<id>/grasps.json      grasp poses, per-task binary labels
//! root/instances/<id>/images/<k>.png
//! root/splits/<setting>/fold<k>.json
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{GraspPose, Point3, PointCloud};
use crate::synthgen::ToolGeometry;

const POINTS_MAGIC: &[u8; 4] = b"TGPC";
const INDEX_FORMAT: &str = "togkit-dataset-v1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GraspAnnotation {
    pub pose: GraspPose,
    /// task-id → 0 / 1
    pub labels: BTreeMap<String, u8>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ObjectInstanceRecord {
    pub id: String,
    pub class_id: String,
    pub pointcloud: PointCloud,
    pub grasps: Vec<GraspAnnotation>,
    pub image_ids: Vec<String>,
    /// Analytic part decomposition, present for procedurally generated objects.
    pub geometry: Option<ToolGeometry>,
}

impl ObjectInstanceRecord {
    pub fn label(&self, grasp: usize, task: &str) -> Option<u8> {
        self.grasps.get(grasp).and_then(|g| g.labels.get(task).copied())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetIndex {
    pub classes: Vec<String>,
    pub tasks: Vec<String>,
    pub instances: Vec<ObjectInstanceRecord>,
}

impl DatasetIndex {
    pub fn validate(&self) -> Result<()> {
        if self.classes.is_empty() || self.tasks.is_empty() || self.instances.is_empty() {
            return Err(Error::Validation("dataset needs at least one class, task and instance".into()));
        }
        unique("class", self.classes.iter())?;
        unique("task", self.tasks.iter())?;
        unique("instance", self.instances.iter().map(|i| &i.id))?;
        let classes: BTreeSet<&String> = self.classes.iter().collect();
        let tasks: BTreeSet<&String> = self.tasks.iter().collect();
        for inst in &self.instances {
            if !classes.contains(&inst.class_id) {
                return Err(Error::Validation(format!("instance {} has unknown class {}", inst.id, inst.class_id)));
            }
            if inst.grasps.is_empty() {
                return Err(Error::Validation(format!("instance {} has no grasps", inst.id)));
            }
            for (gi, g) in inst.grasps.iter().enumerate() {
                g.pose.validate().map_err(|e| Error::Validation(format!("instance {} grasp {gi}: {e}", inst.id)))?;
                for (task, label) in &g.labels {
                    if !tasks.contains(task) {
                        return Err(Error::Validation(format!("instance {} grasp {gi}: unknown task {task}", inst.id)));
                    }
                    if *label > 1 {
                        return Err(Error::Validation(format!(
                            "instance {} grasp {gi}: label {label} is not binary",
                            inst.id
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn instance(&self, id: &str) -> Option<&ObjectInstanceRecord> {
        self.instances.iter().find(|i| i.id == id)
    }

    pub fn instances_of_class<'a>(&'a self, class: &'a str) -> impl Iterator<Item = &'a ObjectInstanceRecord> + 'a {
        self.instances.iter().filter(move |i| i.class_id == class)
    }

    pub fn image_path(root: &Path, instance: &str, image: &str) -> PathBuf {
        root.join("instances").join(instance).join("images").join(format!("{image}.png"))
    }

    pub fn save(&self, root: &Path) -> Result<()> {
        self.validate()?;
        let manifest = IndexFile {
            format: INDEX_FORMAT.to_string(),
            classes: self.classes.clone(),
            tasks: self.tasks.clone(),
            instances: self
                .instances
                .iter()
                .map(|i| ManifestEntry { id: i.id.clone(), class: i.class_id.clone(), images: i.image_ids.clone() })
                .collect(),
        };
        fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
        write_json(&root.join("index.json"), &manifest)?;
        for inst in &self.instances {
            let dir = root.join("instances").join(&inst.id);
            fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            write_points(&dir.join("points.f32le"), inst.pointcloud.points())?;
            let grasps = GraspFile { grasps: inst.grasps.clone(), geometry: inst.geometry.clone() };
            write_json(&dir.join("grasps.json"), &grasps)?;
        }
        Ok(())
    }

    /// Loads a dataset and re-centers every cloud on its centroid, moving the
    /// grasp poses with it.
    pub fn load(root: &Path) -> Result<Self> {
        let index_path = root.join("index.json");
        if !index_path.is_file() {
            return Err(Error::NoDataset(root.to_path_buf()));
        }
        let manifest: IndexFile = read_json(&index_path)?;
        if manifest.format != INDEX_FORMAT {
            return Err(Error::invalid(&index_path, format!("unsupported format {:?}", manifest.format)));
        }
        let mut instances = Vec::with_capacity(manifest.instances.len());
        for entry in manifest.instances {
            let dir = root.join("instances").join(&entry.id);
            let points_path = dir.join("points.f32le");
            let points = read_points(&points_path)?;
            let cloud = PointCloud::new(points).map_err(|e| Error::invalid(&points_path, e.to_string()))?;
            let (cloud, offset) = cloud.centered();
            let grasp_path = dir.join("grasps.json");
            let file: GraspFile = read_json(&grasp_path)?;
            let grasps = file
                .grasps
                .into_iter()
                .map(|mut g| {
                    g.pose.translation = crate::geometry::sub(g.pose.translation, offset);
                    g
                })
                .collect();
            let geometry = file.geometry.map(|g| g.translated(crate::geometry::scale(offset, -1.0)));
            instances.push(ObjectInstanceRecord {
                id: entry.id,
                class_id: entry.class,
                pointcloud: cloud,
                grasps,
                image_ids: entry.images,
                geometry,
            });
        }
        let index = DatasetIndex { classes: manifest.classes, tasks: manifest.tasks, instances };
        index.validate().map_err(|e| Error::invalid(&index_path, e.to_string()))?;
        Ok(index)
    }
}

fn unique<'a>(what: &str, ids: impl Iterator<Item = &'a String>) -> Result<()> {
    let mut seen = BTreeSet::new();
    for id in ids {
        if !seen.insert(id) {
            return Err(Error::Validation(format!("duplicate {what} id {id}")));
        }
    }
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct IndexFile {
    format: String,
    classes: Vec<String>,
    tasks: Vec<String>,
    instances: Vec<ManifestEntry>,
}

#[derive(Serialize, Deserialize)]
struct ManifestEntry {
    id: String,
    class: String,
    #[serde(default)]
    images: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct GraspFile {
    grasps: Vec<GraspAnnotation>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    geometry: Option<ToolGeometry>,
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::parse(path, e))?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

pub(crate) fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::parse(path, e))
}

pub fn write_points(path: &Path, points: &[Point3]) -> Result<()> {
    let mut buf = Vec::with_capacity(8 + points.len() * 12);
    buf.extend_from_slice(POINTS_MAGIC);
    buf.extend_from_slice(&(points.len() as u32).to_le_bytes());
    for p in points {
        for v in p {
            buf.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn read_points(path: &Path) -> Result<Vec<Point3>> {
    let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
    if buf.len() < 8 || &buf[..4] != POINTS_MAGIC {
        return Err(Error::invalid(path, "missing point-file header"));
    }
    let count = u32::from_le_bytes([buf[4], buf[5], buf[6], buf[7]]) as usize;
    if buf.len() != 8 + count * 12 {
        return Err(Error::invalid(path, format!("header declares {count} points but file has {} bytes", buf.len())));
    }
    let floats: Vec<f64> =
        buf[8..].chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64).collect();
    Ok(floats.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitSetting {
    Instance,
    Class,
    Task,
}

impl SplitSetting {
    pub const ALL: [SplitSetting; 3] = [SplitSetting::Instance, SplitSetting::Class, SplitSetting::Task];

    pub fn as_str(self) -> &'static str {
        match self {
            SplitSetting::Instance => "instance",
            SplitSetting::Class => "class",
            SplitSetting::Task => "task",
        }
    }
}

impl fmt::Display for SplitSetting {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SplitSetting {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "instance" => Ok(SplitSetting::Instance),
            "class" => Ok(SplitSetting::Class),
            "task" => Ok(SplitSetting::Task),
            other => Err(Error::Config(format!("unknown split setting {other:?} (expected instance, class or task)"))),
        }
    }
}

/// One held-out fold. Ids are instance-ids, class-ids or task-ids depending on `setting`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub setting: SplitSetting,
    pub fold: usize,
    pub folds: usize,
    pub train_ids: Vec<String>,
    pub test_ids: Vec<String>,
}

impl SplitSpec {
    pub fn path(root: &Path, setting: SplitSetting, fold: usize) -> PathBuf {
        root.join("splits").join(setting.as_str()).join(format!("fold{fold}.json"))
    }

    pub fn validate(&self) -> Result<()> {
        if self.fold >= self.folds {
            return Err(Error::Validation(format!("fold {} out of range for {} folds", self.fold, self.folds)));
        }
        let train: BTreeSet<&String> = self.train_ids.iter().collect();
        if let Some(id) = self.test_ids.iter().find(|id| train.contains(id)) {
            return Err(Error::Validation(format!("id {id} is in both train and test")));
        }
        Ok(())
    }

    pub fn save(&self, root: &Path) -> Result<PathBuf> {
        self.validate()?;
        let path = Self::path(root, self.setting, self.fold);
        write_json(&path, self)?;
        Ok(path)
    }

    pub fn load(root: &Path, setting: SplitSetting, fold: usize) -> Result<Self> {
        let path = Self::path(root, setting, fold);
        let spec: SplitSpec = read_json(&path)?;
        spec.validate().map_err(|e| Error::invalid(&path, e.to_string()))?;
        Ok(spec)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::IDENTITY_ROTATION;

    fn tiny() -> DatasetIndex {
        let pose = GraspPose::new(IDENTITY_ROTATION, [0.01, 0.0, 0.0]).unwrap();
        let labels: BTreeMap<String, u8> = [("pour".to_string(), 1u8), ("stir".to_string(), 0u8)].into();
        DatasetIndex {
            classes: vec!["mug".into()],
            tasks: vec!["pour".into(), "stir".into()],
            instances: vec![ObjectInstanceRecord {
                id: "mug_0".into(),
                class_id: "mug".into(),
                pointcloud: PointCloud::new(vec![
                    [0.1, 0.0, 0.0],
                    [-0.1, 0.0, 0.0],
                    [0.0, 0.2, -0.2],
                    [0.0, -0.2, 0.2],
                ])
                .unwrap(),
                grasps: vec![GraspAnnotation { pose, labels }],
                image_ids: vec!["0".into()],
                geometry: None,
            }],
        }
    }

    #[test]
    fn empty_directory_reports_missing_index() {
        let dir = tempfile::tempdir().unwrap();
        let err = DatasetIndex::load(dir.path()).unwrap_err();
        assert!(err.to_string().contains("no dataset index found"), "{err}");
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let ds = tiny();
        ds.save(dir.path()).unwrap();
        let loaded = DatasetIndex::load(dir.path()).unwrap();
        assert_eq!(loaded.classes, ds.classes);
        assert_eq!(loaded.tasks, ds.tasks);
        assert_eq!(loaded.instances[0].grasps[0].labels, ds.instances[0].grasps[0].labels);
        for (a, b) in loaded.instances[0].pointcloud.points().iter().zip(ds.instances[0].pointcloud.points()) {
            for k in 0..3 {
                assert_eq!(a[k] as f32, b[k] as f32);
            }
        }
    }

    #[test]
    fn truncated_point_file_names_path() {
        let dir = tempfile::tempdir().unwrap();
        tiny().save(dir.path()).unwrap();
        let p = dir.path().join("instances/mug_0/points.f32le");
        let mut bytes = fs::read(&p).unwrap();
        bytes.truncate(bytes.len() - 3);
        fs::write(&p, bytes).unwrap();
        let err = DatasetIndex::load(dir.path()).unwrap_err().to_string();
        assert!(err.contains("points.f32le"), "{err}");
    }

    #[test]
    fn malformed_grasps_names_path() {
        let dir = tempfile::tempdir().unwrap();
        tiny().save(dir.path()).unwrap();
        fs::write(dir.path().join("instances/mug_0/grasps.json"), "{not json").unwrap();
        let err = DatasetIndex::load(dir.path()).unwrap_err().to_string();
        assert!(err.contains("grasps.json"), "{err}");
    }

    #[test]
    fn non_binary_label_rejected() {
        let mut ds = tiny();
        ds.instances[0].grasps[0].labels.insert("pour".into(), 2);
        assert!(ds.validate().is_err());
    }

    #[test]
    fn split_overlap_rejected() {
        let s = SplitSpec {
            setting: SplitSetting::Class,
            fold: 0,
            folds: 4,
            train_ids: vec!["a".into(), "b".into()],
            test_ids: vec!["b".into()],
        };
        assert!(s.validate().is_err());
    }
}
