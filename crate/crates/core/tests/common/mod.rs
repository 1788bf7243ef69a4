#![allow(dead_code)]

use tempfile::TempDir;
use togkit::config::ModelConfig;
use togkit::dataset::DatasetIndex;
use togkit::knowledge::KnowledgeConfig;
use togkit::pipeline::{generate_knowledge, BackendConfig, Backends, FeaturePipeline};
use togkit::synthgen::{generate_dataset, SynthSpec};

/// A generated dataset with knowledge assets and an open feature pipeline.
/// The directory lives as long as the bench.
pub struct Bench {
    pub dir: TempDir,
    pub pipeline: FeaturePipeline,
}

pub fn bench(spec: &SynthSpec, model: ModelConfig) -> togkit::Result<Bench> {
    let dir = tempfile::tempdir().expect("temp dir");
    let root = dir.path();
    generate_dataset(spec, root)?;
    let index = DatasetIndex::load(root)?;
    let backends = Backends::resolve(&BackendConfig::default(), &model, Some(root))?;
    generate_knowledge(root, &index, &KnowledgeConfig::default(), &backends)?;
    let pipeline = FeaturePipeline::open(root, &BackendConfig::default(), model)?;
    Ok(Bench { dir, pipeline })
}

/// Default spec shrunk to `instances` per class and `grasps` per instance.
pub fn small_spec(instances: usize, grasps: usize) -> SynthSpec {
    SynthSpec { instances_per_class: instances, grasps_per_instance: grasps, ..SynthSpec::default() }
}
