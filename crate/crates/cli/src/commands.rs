use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use log::{info, warn};

use togkit::dataset::{DatasetIndex, SplitSetting, SplitSpec};
use togkit::evaluator::{score, EvalMode};
use togkit::geometry::pose_to_control_points;
use togkit::knowledge::Target;
use togkit::metrics::{evaluate, evaluate_model, rank_and_decide, EvalReport, OracleScorer, ScoredGrasp};
use togkit::model::Model;
use togkit::pipeline::{generate_knowledge, Backends, FeaturePipeline, TrainSample};
use togkit::synthgen::{generate_dataset, SynthSpec};
use togkit::training::{fit, leakage_violations, make_folds, split_samples, Partition};

use crate::config::{self, Flat, Resolved};
use crate::flags::{Cli, Command};
use crate::manifest::RunManifest;
use crate::{ply, usage};

pub fn run(cli: Cli) -> Result<()> {
    let mut layers: Vec<Flat> = Vec::new();
    if let Some(path) = &cli.global.config {
        layers.push(config::read_file(path).map_err(usage)?);
    }
    layers.push(cli.command.overrides());
    let mut sets = Flat::new();
    for s in &cli.global.set {
        let (k, v) = config::parse_assignment(s).map_err(usage)?;
        sets.insert(k, v);
    }
    layers.push(sets);
    let cfg = Resolved::new(&layers).map_err(usage)?;
    let manifest = RunManifest::new(cli.command.name(), cfg.flat());
    match cli.command {
        Command::GenSynth(_) => gen_synth(&cfg, manifest),
        Command::GenKnowledge(_) => gen_knowledge(&cfg, manifest),
        Command::MakeSplits(_) => make_splits(&cfg, manifest),
        Command::Train(_) => train(&cfg, manifest),
        Command::Eval(_) => eval(&cfg, manifest),
        Command::Rank(_) => rank(&cfg, manifest),
    }
}

/// Reads a config value, treating a bad value as a usage error.
fn get<T: serde::de::DeserializeOwned>(cfg: &Resolved, key: &str) -> Result<T> {
    cfg.get(key).map_err(usage)
}

fn require<T: serde::de::DeserializeOwned>(cfg: &Resolved, key: &str, flag: &str) -> Result<T> {
    cfg.require(key, flag).map_err(usage)
}

fn gen_synth(cfg: &Resolved, mut manifest: RunManifest) -> Result<()> {
    let out: PathBuf = require(cfg, "out", "--out")?;
    let spec = match get::<Option<PathBuf>>(cfg, "spec")? {
        Some(path) => SynthSpec::load(&path)?,
        None => match get::<String>(cfg, "preset")?.as_str() {
            "default" => SynthSpec::default(),
            "overlapping" => SynthSpec::overlapping(),
            other => return Err(usage(format!("unknown preset {other:?} (expected default or overlapping)"))),
        },
    };
    spec.validate()?;
    manifest.seeds.insert("synth".into(), spec.seed);
    manifest.write(&out.join("run_manifest.json"))?;
    let index = generate_dataset(&spec, &out)?;
    info!(
        "wrote {} instances of {} classes with {} tasks to {}",
        index.instances.len(),
        index.classes.len(),
        index.tasks.len(),
        out.display()
    );
    Ok(())
}

fn gen_knowledge(cfg: &Resolved, mut manifest: RunManifest) -> Result<()> {
    let data: PathBuf = require(cfg, "data", "--data")?;
    let model = cfg.model().map_err(usage)?;
    let bcfg = cfg.backend().map_err(usage)?;
    let kc = cfg.knowledge().map_err(usage)?;
    let index = DatasetIndex::load(&data)?;
    let backends = Backends::resolve(&bcfg, &model, Some(&data))?;
    manifest.seeds.insert("backend".into(), bcfg.seed);
    manifest.backends = backend_ids(&backends);
    manifest.write(&data.join("knowledge").join("run_manifest.json"))?;
    let assets = generate_knowledge(&data, &index, &kc, &backends)?;
    info!(
        "knowledge for {} classes and {} tasks; {} instruction templates",
        assets.bank.classes.len(),
        assets.bank.tasks.len(),
        assets.templates.len()
    );
    Ok(())
}

fn backend_ids(b: &Backends) -> std::collections::BTreeMap<String, String> {
    b.ids().into_iter().map(|(k, v)| (k.to_string(), v)).collect()
}

fn make_splits(cfg: &Resolved, mut manifest: RunManifest) -> Result<()> {
    let data: PathBuf = require(cfg, "data", "--data")?;
    let setting: SplitSetting = get(cfg, "setting")?;
    let folds: usize = get(cfg, "folds")?;
    let seed: u64 = get(cfg, "split_seed")?;
    let index = DatasetIndex::load(&data)?;
    manifest.seeds.insert("split".into(), seed);
    manifest.write(&data.join("splits").join(setting.as_str()).join("run_manifest.json"))?;
    for split in make_folds(&index, setting, folds, seed)? {
        let train = split_samples(&index, &split, Partition::Train)?;
        let leaks = leakage_violations(&index, &split, &train);
        if !leaks.is_empty() {
            return Err(togkit::Error::Validation(format!(
                "fold {} leaks {} samples, e.g. {}",
                split.fold,
                leaks.len(),
                leaks[0]
            ))
            .into());
        }
        let path = split.save(&data)?;
        info!(
            "{}: {} test ids, {} training samples, leakage scan clean",
            path.display(),
            split.test_ids.len(),
            train.len()
        );
    }
    Ok(())
}

fn load_split(cfg: &Resolved, data: &Path) -> Result<SplitSpec> {
    let setting: SplitSetting = get(cfg, "setting")?;
    let fold: usize = get(cfg, "fold")?;
    SplitSpec::load(data, setting, fold)
        .with_context(|| format!("no {setting} fold {fold} under {}; run make-splits first", data.display()))
}

fn train(cfg: &Resolved, mut manifest: RunManifest) -> Result<()> {
    let data: PathBuf = require(cfg, "data", "--data")?;
    let out: PathBuf = require(cfg, "out", "--out")?;
    let model = cfg.model().map_err(usage)?;
    let tc = cfg.train().map_err(usage)?;
    let bcfg = cfg.backend().map_err(usage)?;
    let split = load_split(cfg, &data)?;
    let mut pipeline = FeaturePipeline::open(&data, &bcfg, model)?;
    manifest.seeds.insert("train".into(), tc.seed);
    manifest.seeds.insert("backend".into(), bcfg.seed);
    manifest.backends = backend_ids(&pipeline.backends);
    manifest.write(&out.join("run_manifest.json"))?;
    let outcome = fit(&mut pipeline, &split, &tc, Some(&out))?;
    if let Some(last) = outcome.log.last() {
        info!("final loss {:.6}; checkpoint at {}", last.loss, out.join("checkpoint").display());
    }
    Ok(())
}

/// Accepts either a checkpoint directory or the run directory holding one.
fn checkpoint_dir(path: &Path) -> PathBuf {
    let nested = path.join("checkpoint");
    if nested.join("manifest.json").exists() {
        nested
    } else {
        path.to_path_buf()
    }
}

/// The configured mode, else the one the checkpoint was trained with.
fn resolve_mode(cfg: &Resolved, extra: &serde_json::Value) -> Result<EvalMode> {
    if let Some(mode) = get::<Option<EvalMode>>(cfg, "mode")? {
        return Ok(mode);
    }
    Ok(extra.pointer("/train/mode").and_then(|m| serde_json::from_value(m.clone()).ok()).unwrap_or_default())
}

fn load_model(cfg: &Resolved) -> Result<(Model, EvalMode)> {
    let path: PathBuf = require(cfg, "checkpoint", "--checkpoint")?;
    let (model, extra) = Model::load(&checkpoint_dir(&path))?;
    let mode = resolve_mode(cfg, &extra)?;
    Ok((model, mode))
}

fn eval(cfg: &Resolved, mut manifest: RunManifest) -> Result<()> {
    let data: PathBuf = require(cfg, "data", "--data")?;
    let out: PathBuf = require(cfg, "out", "--out")?;
    let split = load_split(cfg, &data)?;
    let stem = out.file_stem().map_or("report".into(), |s| s.to_string_lossy().into_owned());
    let manifest_path = out.with_file_name(format!("{stem}.manifest.json"));
    let report: EvalReport = if get::<bool>(cfg, "oracle")? {
        manifest.write(&manifest_path)?;
        let index = DatasetIndex::load(&data)?;
        let mut report = evaluate(&mut OracleScorer, &index, &split)?;
        report.metadata.insert("scorer".into(), "oracle".into());
        report
    } else {
        let (model, mode) = load_model(cfg)?;
        let bcfg = cfg.backend().map_err(usage)?;
        let mut pipeline = FeaturePipeline::open(&data, &bcfg, model.config.clone())?;
        manifest.seeds.insert("backend".into(), bcfg.seed);
        manifest.backends = backend_ids(&pipeline.backends);
        manifest.write(&manifest_path)?;
        evaluate_model(&model, &mut pipeline, &split, mode)?
    };
    let text = serde_json::to_string_pretty(&report)?;
    std::fs::write(&out, text + "\n").with_context(|| format!("writing {}", out.display()))?;
    info!(
        "instance mAP {:.4}, class mAP {:.4}, task mAP {:.4} over {} candidates; report at {}",
        report.instance_map,
        report.class_map,
        report.task_map,
        report.candidates,
        out.display()
    );
    Ok(())
}

fn rank(cfg: &Resolved, mut manifest: RunManifest) -> Result<()> {
    let data: PathBuf = require(cfg, "data", "--data")?;
    let instance: String = require(cfg, "instance", "--instance")?;
    let task: String = require(cfg, "task", "--task")?;
    let top_k: usize = get(cfg, "top_k")?;
    let threshold: f64 = get(cfg, "threshold")?;
    let ply_path: Option<PathBuf> = get(cfg, "ply")?;

    let (model, mode) = load_model(cfg)?;
    let bcfg = cfg.backend().map_err(usage)?;
    let mut pipeline = FeaturePipeline::open(&data, &bcfg, model.config.clone())?;
    let idx = pipeline
        .index
        .instances
        .iter()
        .position(|i| i.id == instance)
        .ok_or_else(|| togkit::Error::Validation(format!("no instance {instance:?} in {}", data.display())))?;
    let rec = pipeline.index.instances[idx].clone();
    let class: String = get::<Option<String>>(cfg, "class")?.unwrap_or_else(|| rec.class_id.clone());

    manifest.seeds.insert("backend".into(), bcfg.seed);
    manifest.backends = backend_ids(&pipeline.backends);
    match &ply_path {
        Some(p) => {
            let stem = p.file_stem().map_or("rank".into(), |s| s.to_string_lossy().into_owned());
            manifest.write(&p.with_file_name(format!("{stem}.manifest.json")))?;
        }
        None => info!("no --ply given; rank writes no files, so no run manifest"),
    }

    pipeline.ensure_knowledge(Target::Class(&class))?;
    pipeline.ensure_knowledge(Target::Task(&task))?;

    let mut scored = Vec::with_capacity(rec.grasps.len());
    for g in 0..rec.grasps.len() {
        // A grasp is a positive only for the instance's own class.
        let label = if class == rec.class_id { rec.label(g, &task) } else { Some(0) };
        let sample = TrainSample {
            instance: idx,
            instance_id: rec.id.clone(),
            grasp: g,
            task: task.clone(),
            named_class: class.clone(),
            label: label.unwrap_or(0),
            seed: 0,
        };
        let bundle = pipeline.prepare(&sample, None, mode)?;
        scored.push(ScoredGrasp {
            instance_id: rec.id.clone(),
            class_id: rec.class_id.clone(),
            grasp: g,
            task: task.clone(),
            score: score(&model, &bundle, mode)?.score,
            label,
        });
    }
    let decision = rank_and_decide(&scored, top_k, threshold)?;

    println!("instruction: grasp the {class} to {task} (instance {instance}, mode {mode})");
    println!("{:>4}  {:>5}  {:>8}  {:>5}", "rank", "grasp", "score", "label");
    for (r, s) in decision.ranked.iter().enumerate() {
        let label = s.label.map_or("-".to_string(), |l| l.to_string());
        println!("{:>4}  {:>5}  {:>8.4}  {:>5}", r + 1, s.grasp, s.score, label);
    }
    println!(
        "decision: {} (max score {:.4}, threshold {threshold})",
        if decision.reject { "REJECT" } else { "ACCEPT" },
        decision.max_score
    );
    if decision.reject {
        warn!("no candidate reaches the threshold; the instruction is rejected");
    }

    if let Some(path) = ply_path {
        let grippers = decision
            .ranked
            .iter()
            .map(|s| Ok((pose_to_control_points(&rec.grasps[s.grasp].pose, &model.config.gripper)?, s.score)))
            .collect::<togkit::Result<Vec<_>>>()?;
        ply::write(&path, rec.pointcloud.points(), &grippers)?;
        info!("point cloud with {} scored grippers at {}", grippers.len(), path.display());
    }
    Ok(())
}
