//! Turns dataset records plus generated knowledge into evaluator inputs.
//!
//! ```text
//! root/knowledge/objects/<class>.json   description bank, per class
//! root/knowledge/tasks/<task>.json      description bank, per task
//! root/knowledge/templates.json         instruction templates
//! root/knowledge/images.json            curated image ids per instance
//! root/knowledge/config.json            knowledge settings used to build the above
//! root/knowledge/corpus.json            optional fixture corpus (synthetic datasets)
//! root/knowledge/cache/                 backend response cache
//! ```

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};

use log::info;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backends::{
    hosted_unavailable, splitmix64, BackendChoice, FixtureCorpus, FixtureLanguageModel, FixtureMultimodalEmbedder,
    FixtureSemanticEmbedder, GenerativeLanguageBackend, ImageData, ImageFeatureMap, MultimodalEmbedder,
    SemanticTextEmbedder,
};
use crate::config::ModelConfig;
use crate::dataset::{read_json, write_json, DatasetIndex};
use crate::error::{Error, Result};
use crate::evaluator::{EvalMode, FeatureBundle};
use crate::geometry::{augment_pointcloud, downsample, pose_to_control_points, AugmentConfig, PointCloud};
use crate::knowledge::{
    assemble_paragraph, augment_templates, build_bank, curate_images, image_id_path, Aspect, DescriptionBank,
    InstructionTemplateSet, KnowledgeCache, KnowledgeConfig, LocalImageSource, PromptKind, Target,
};

/// Backend selection as written in configuration files.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackendConfig {
    pub language: String,
    pub semantic: String,
    pub multimodal: String,
    /// Salt for the fixture embedders.
    pub seed: u64,
}

impl Default for BackendConfig {
    fn default() -> Self {
        Self { language: "fixture".into(), semantic: "fixture".into(), multimodal: "fixture".into(), seed: 0 }
    }
}

pub struct Backends {
    pub language: Box<dyn GenerativeLanguageBackend>,
    pub semantic: Box<dyn SemanticTextEmbedder>,
    pub multimodal: Box<dyn MultimodalEmbedder>,
}

impl Backends {
    /// Resolves every backend. Fixture language models read the dataset's
    /// `knowledge/corpus.json` when present, on top of the built-in corpus.
    pub fn resolve(cfg: &BackendConfig, model: &ModelConfig, root: Option<&Path>) -> Result<Self> {
        let language: Box<dyn GenerativeLanguageBackend> = match cfg.language.parse()? {
            BackendChoice::Fixture => {
                let mut corpus = FixtureCorpus::builtin();
                if let Some(path) = root.map(|r| r.join("knowledge").join("corpus.json")).filter(|p| p.is_file()) {
                    corpus.merge(read_json(&path)?);
                }
                Box::new(FixtureLanguageModel::new(corpus))
            }
            BackendChoice::Hosted(name) => return Err(hosted_unavailable(&name)),
        };
        let semantic: Box<dyn SemanticTextEmbedder> = match cfg.semantic.parse()? {
            BackendChoice::Fixture => Box::new(FixtureSemanticEmbedder::new(model.sem_raw_dim, cfg.seed)),
            BackendChoice::Hosted(name) => return Err(hosted_unavailable(&name)),
        };
        let multimodal: Box<dyn MultimodalEmbedder> = match cfg.multimodal.parse()? {
            BackendChoice::Fixture => {
                Box::new(FixtureMultimodalEmbedder::new(model.geo_raw_dim, model.image_grid, cfg.seed))
            }
            BackendChoice::Hosted(name) => return Err(hosted_unavailable(&name)),
        };
        let b = Self { language, semantic, multimodal };
        b.check_dims(model)?;
        Ok(b)
    }

    pub fn check_dims(&self, model: &ModelConfig) -> Result<()> {
        if self.semantic.dim() != model.sem_raw_dim {
            return Err(Error::Config(format!(
                "semantic embedder {} produces {} dims, model expects {}",
                self.semantic.id(),
                self.semantic.dim(),
                model.sem_raw_dim
            )));
        }
        if self.multimodal.text_dim() != model.geo_raw_dim {
            return Err(Error::Config(format!(
                "multimodal embedder {} produces {} dims, model expects {}",
                self.multimodal.id(),
                self.multimodal.text_dim(),
                model.geo_raw_dim
            )));
        }
        Ok(())
    }

    pub fn ids(&self) -> BTreeMap<&'static str, String> {
        BTreeMap::from([
            ("language", self.language.id().to_string()),
            ("semantic", self.semantic.id().to_string()),
            ("multimodal", self.multimodal.id().to_string()),
        ])
    }
}

/// Everything generated once per dataset by the knowledge stage.
#[derive(Clone, Debug, PartialEq)]
pub struct KnowledgeAssets {
    pub config: KnowledgeConfig,
    pub bank: DescriptionBank,
    pub templates: InstructionTemplateSet,
    /// instance-id → curated image ids
    pub images: BTreeMap<String, Vec<String>>,
}

impl KnowledgeAssets {
    pub fn dir(root: &Path) -> PathBuf {
        root.join("knowledge")
    }

    pub fn save(&self, root: &Path) -> Result<()> {
        let dir = Self::dir(root);
        self.bank.save(&dir)?;
        self.templates.save(&dir.join("templates.json"))?;
        write_json(&dir.join("images.json"), &self.images)?;
        write_json(&dir.join("config.json"), &self.config)
    }

    pub fn load(root: &Path, index: &DatasetIndex) -> Result<Self> {
        let dir = Self::dir(root);
        let config_path = dir.join("config.json");
        if !config_path.is_file() {
            return Err(Error::invalid(&dir, "no knowledge found; run gen-knowledge first"));
        }
        Ok(Self {
            config: read_json(&config_path)?,
            bank: DescriptionBank::load(&dir, &index.classes, &index.tasks)?,
            templates: InstructionTemplateSet::load(&dir.join("templates.json"))?,
            images: read_json(&dir.join("images.json"))?,
        })
    }
}

/// Runs the whole knowledge stage for a dataset: description bank, template
/// augmentation and image curation. Responses are cached under
/// `root/knowledge/cache`.
pub fn generate_knowledge(
    root: &Path,
    index: &DatasetIndex,
    config: &KnowledgeConfig,
    backends: &Backends,
) -> Result<KnowledgeAssets> {
    let mut cache = KnowledgeCache::dir(KnowledgeAssets::dir(root).join("cache"));
    let bank = build_bank(&index.classes, &index.tasks, config, backends.language.as_ref(), &mut cache)?;
    let seeds = InstructionTemplateSet::new(config.seed_templates.clone())?;
    let outcome = augment_templates(
        &seeds,
        backends.language.as_ref(),
        &mut cache,
        config.prompt_set(PromptKind::TemplateAugment)?,
        config.template_rewrites,
    )?;
    info!("{} instruction templates ({} rewrites rejected)", outcome.templates.len(), outcome.rejected);
    let source = LocalImageSource::new(root);
    let mut images = BTreeMap::new();
    for inst in &index.instances {
        let ids = curate_images(
            inst,
            &source,
            backends.multimodal.as_ref(),
            config.images_per_instance,
            config.similarity_threshold,
        )?;
        images.insert(inst.id.clone(), ids);
    }
    let assets = KnowledgeAssets { config: config.clone(), bank, templates: outcome.templates, images };
    assets.save(root)?;
    Ok(assets)
}

/// One (grasp, task) pair together with the seeds that fix its instruction,
/// paragraphs, image and augmentation.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainSample {
    /// Position in `DatasetIndex::instances`.
    pub instance: usize,
    pub instance_id: String,
    pub grasp: usize,
    pub task: String,
    /// Class named in the instruction; differs from the instance's class for
    /// mismatch negatives.
    pub named_class: String,
    pub label: u8,
    pub seed: u64,
}

impl TrainSample {
    pub fn id(&self) -> String {
        format!("{}#{}/{}@{}", self.instance_id, self.grasp, self.task, self.named_class)
    }
}

/// Per-sample feature construction with image-embedding caching.
pub struct FeaturePipeline {
    pub root: PathBuf,
    pub index: DatasetIndex,
    pub assets: KnowledgeAssets,
    pub backends: Backends,
    pub model: ModelConfig,
    images: HashMap<String, ImageFeatureMap>,
    eval_clouds: HashMap<usize, PointCloud>,
}

fn sub_seed(seed: u64, k: u64) -> u64 {
    splitmix64(seed ^ splitmix64(k))
}

impl FeaturePipeline {
    pub fn new(
        root: &Path,
        index: DatasetIndex,
        assets: KnowledgeAssets,
        backends: Backends,
        model: ModelConfig,
    ) -> Result<Self> {
        backends.check_dims(&model)?;
        Ok(Self {
            root: root.to_path_buf(),
            index,
            assets,
            backends,
            model,
            images: HashMap::new(),
            eval_clouds: HashMap::new(),
        })
    }

    /// Loads the dataset and its knowledge from `root`.
    pub fn open(root: &Path, backend_cfg: &BackendConfig, model: ModelConfig) -> Result<Self> {
        let index = DatasetIndex::load(root)?;
        let assets = KnowledgeAssets::load(root, &index)?;
        let backends = Backends::resolve(backend_cfg, &model, Some(root))?;
        Self::new(root, index, assets, backends, model)
    }

    /// Generates descriptions for a class or task missing from the bank, as at
    /// inference time for previously unseen targets.
    pub fn ensure_knowledge(&mut self, target: Target<'_>) -> Result<()> {
        if self.assets.bank.has_target(target) {
            return Ok(());
        }
        info!("generating knowledge for unseen target {}", target.id());
        let mut cache = KnowledgeCache::dir(KnowledgeAssets::dir(&self.root).join("cache"));
        let (classes, tasks) = match target {
            Target::Class(c) => (vec![c.to_string()], vec![]),
            Target::Task(t) => (vec![], vec![t.to_string()]),
        };
        let extra = build_bank(&classes, &tasks, &self.assets.config, self.backends.language.as_ref(), &mut cache)?;
        self.assets.bank.classes.extend(extra.classes);
        self.assets.bank.tasks.extend(extra.tasks);
        Ok(())
    }

    fn image_features(&mut self, id: &str) -> Result<ImageFeatureMap> {
        if let Some(m) = self.images.get(id) {
            return Ok(m.clone());
        }
        let image = ImageData::read(id, &image_id_path(&self.root, id))?;
        let map = self.backends.multimodal.embed_geo_image(&image)?;
        if (map.height, map.width) != self.model.image_grid {
            return Err(Error::Shape(format!(
                "image map is {}x{}, model expects {:?}",
                map.height, map.width, self.model.image_grid
            )));
        }
        self.images.insert(id.to_string(), map.clone());
        Ok(map)
    }

    fn eval_cloud(&mut self, instance: usize) -> Result<PointCloud> {
        if let Some(c) = self.eval_clouds.get(&instance) {
            return Ok(c.clone());
        }
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let c = downsample(&self.index.instances[instance].pointcloud, self.model.points, &mut rng)?;
        self.eval_clouds.insert(instance, c.clone());
        Ok(c)
    }

    /// Builds the evaluator input for `sample`. With `augment` the cloud and
    /// pose are jittered and an image is drawn at random; without it the
    /// cloud is FPS-downsampled and the first curated image is used. Inputs a
    /// mode never reads are left out.
    pub fn prepare(
        &mut self,
        sample: &TrainSample,
        augment: Option<&AugmentConfig>,
        mode: EvalMode,
    ) -> Result<FeatureBundle> {
        let rec = self
            .index
            .instances
            .get(sample.instance)
            .ok_or_else(|| Error::Validation(format!("sample {} points past the dataset", sample.id())))?;
        let pose = rec
            .grasps
            .get(sample.grasp)
            .ok_or_else(|| Error::Validation(format!("sample {} names a missing grasp", sample.id())))?
            .pose
            .clone();
        let s = sample.seed;
        let (cloud, pose) = match augment {
            Some(cfg) => {
                let (pc, sim) = augment_pointcloud(&rec.pointcloud, cfg, sub_seed(s, 1));
                let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(s, 2));
                (downsample(&pc, self.model.points, &mut rng)?, sim.apply_pose(&pose))
            }
            None => (self.eval_cloud(sample.instance)?, pose),
        };
        let control_points = pose_to_control_points(&pose, &self.model.gripper)?;
        let image_ids = self.assets.images.get(&sample.instance_id).cloned().unwrap_or_default();

        let class = sample.named_class.as_str();
        let task = sample.task.as_str();
        let (cfg, bank, sem) = (&self.model, &self.assets.bank, self.backends.semantic.as_ref());
        let text = self.assets.templates.instantiate(class, task, sub_seed(s, 3));
        let instruction = sem.embed_semantic(&text, cfg.instruction_tokens)?;

        let semantic = |target, seed| -> Result<_> {
            let p = assemble_paragraph(bank, target, Aspect::Semantic, seed)?;
            sem.embed_semantic(&p, cfg.description_tokens)
        };
        let geometric = |target, seed| -> Result<_> {
            let p = assemble_paragraph(bank, target, Aspect::Geometric, seed)?;
            self.backends.multimodal.embed_geo_text(&p)
        };
        let (obj, tsk) = (mode.object_knowledge(), mode.task_knowledge());
        let sk = mode.semantic_knowledge();
        let gk = mode.geometric_knowledge();
        let class_semantic = (sk && obj).then(|| semantic(Target::Class(class), sub_seed(s, 4))).transpose()?;
        let task_semantic = (sk && tsk).then(|| semantic(Target::Task(task), sub_seed(s, 5))).transpose()?;
        let class_geometric = (gk && obj).then(|| geometric(Target::Class(class), sub_seed(s, 6))).transpose()?;
        let task_geometric = (gk && tsk).then(|| geometric(Target::Task(task), sub_seed(s, 7))).transpose()?;

        let image = if gk {
            if image_ids.is_empty() {
                return Err(Error::Validation(format!("no curated images for instance {}", sample.instance_id)));
            }
            let pick = if augment.is_some() { (sub_seed(s, 8) % image_ids.len() as u64) as usize } else { 0 };
            Some(self.image_features(&image_ids[pick])?)
        } else {
            None
        };
        Ok(FeatureBundle {
            cloud,
            control_points,
            instruction,
            class_semantic,
            task_semantic,
            image,
            class_geometric,
            task_geometric,
        })
    }
}
