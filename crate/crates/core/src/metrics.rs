//! Average precision, the instance / class / task mAP protocol, and ranking
//! with rejection.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::dataset::{DatasetIndex, SplitSpec};
use crate::error::{Error, Result};
use crate::evaluator::{score, EvalMode};
use crate::model::Model;
use crate::pipeline::{FeaturePipeline, TrainSample};
use crate::training::{split_samples, Partition};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoredGrasp {
    pub instance_id: String,
    pub class_id: String,
    pub grasp: usize,
    pub task: String,
    pub score: f64,
    pub label: Option<u8>,
}

/// Ranks by descending score, keeping input order among ties, and averages
/// the precision at each positive's rank. `None` when there are no positives.
pub fn average_precision(scores: &[f64], labels: &[u8]) -> Result<Option<f64>> {
    if scores.len() != labels.len() {
        return Err(Error::Shape(format!("{} scores for {} labels", scores.len(), labels.len())));
    }
    if let Some(s) = scores.iter().find(|s| !s.is_finite()) {
        return Err(Error::Numerical(format!("non-finite score {s}")));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (rank, &i) in order.iter().enumerate() {
        if labels[i] != 0 {
            hits += 1;
            sum += hits as f64 / (rank + 1) as f64;
        }
    }
    Ok((hits > 0).then(|| sum / hits as f64))
}

/// Headline metrics and the per-entity tables behind them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub instance_map: f64,
    pub class_map: f64,
    pub task_map: f64,
    pub instance_ap: BTreeMap<String, f64>,
    pub class_ap: BTreeMap<String, f64>,
    pub task_ap: BTreeMap<String, f64>,
    /// `instance/task` → AP over that pair's candidates.
    pub pair_ap: BTreeMap<String, f64>,
    /// Entities left out of a mean because they have no positive label.
    pub excluded: Vec<String>,
    pub candidates: usize,
    pub metadata: BTreeMap<String, String>,
}

fn mean(values: impl IntoIterator<Item = f64>) -> Option<f64> {
    let (s, n) = values.into_iter().fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| s / n as f64)
}

/// Aggregates labelled scores into an [`EvalReport`]: instance AP is the mean
/// over tasks of the per-(instance, task) AP, class AP the mean of its
/// instances' APs, and task AP is computed over all pooled candidates.
pub fn aggregate(scored: &[ScoredGrasp]) -> Result<EvalReport> {
    let mut pairs: BTreeMap<(String, String), (Vec<f64>, Vec<u8>)> = BTreeMap::new();
    let mut tasks: BTreeMap<String, (Vec<f64>, Vec<u8>)> = BTreeMap::new();
    let mut class_of: BTreeMap<String, String> = BTreeMap::new();
    for s in scored {
        let label = s.label.ok_or_else(|| {
            Error::Validation(format!("candidate {}#{} for {} has no label", s.instance_id, s.grasp, s.task))
        })?;
        let p = pairs.entry((s.instance_id.clone(), s.task.clone())).or_default();
        p.0.push(s.score);
        p.1.push(label);
        let t = tasks.entry(s.task.clone()).or_default();
        t.0.push(s.score);
        t.1.push(label);
        class_of.insert(s.instance_id.clone(), s.class_id.clone());
    }
    if scored.is_empty() {
        return Err(Error::Validation("nothing to evaluate".into()));
    }

    let mut excluded = Vec::new();
    let mut pair_ap = BTreeMap::new();
    let mut per_instance: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for ((inst, task), (s, l)) in &pairs {
        match average_precision(s, l)? {
            Some(ap) => {
                pair_ap.insert(format!("{inst}/{task}"), ap);
                per_instance.entry(inst.clone()).or_default().push(ap);
            }
            None => excluded.push(format!("pair {inst}/{task}")),
        }
    }
    let mut instance_ap = BTreeMap::new();
    for inst in class_of.keys() {
        match per_instance.get(inst).and_then(|v| mean(v.iter().copied())) {
            Some(ap) => {
                instance_ap.insert(inst.clone(), ap);
            }
            None => excluded.push(format!("instance {inst}")),
        }
    }
    let mut per_class: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for (inst, ap) in &instance_ap {
        per_class.entry(class_of[inst].clone()).or_default().push(*ap);
    }
    let mut class_ap = BTreeMap::new();
    for class in class_of.values() {
        if class_ap.contains_key(class) {
            continue;
        }
        match per_class.get(class).and_then(|v| mean(v.iter().copied())) {
            Some(ap) => {
                class_ap.insert(class.clone(), ap);
            }
            None => {
                let note = format!("class {class}");
                if !excluded.contains(&note) {
                    excluded.push(note);
                }
            }
        }
    }
    let mut task_ap = BTreeMap::new();
    for (task, (s, l)) in &tasks {
        match average_precision(s, l)? {
            Some(ap) => {
                task_ap.insert(task.clone(), ap);
            }
            None => excluded.push(format!("task {task}")),
        }
    }
    let none = |what: &str| Error::Validation(format!("no {what} has a positive label"));
    let metadata = BTreeMap::from([
        ("ap".to_string(), "mean precision at positive ranks; ties keep input order".to_string()),
        ("instance".to_string(), "mean over tasks of per-(instance, task) AP".to_string()),
        ("class".to_string(), "mean of member instance APs".to_string()),
        ("task".to_string(), "AP over all pooled (instance, grasp) candidates of the task".to_string()),
        ("excluded".to_string(), "entities without positives are left out of every mean".to_string()),
    ]);
    Ok(EvalReport {
        instance_map: mean(instance_ap.values().copied()).ok_or_else(|| none("instance"))?,
        class_map: mean(class_ap.values().copied()).ok_or_else(|| none("class"))?,
        task_map: mean(task_ap.values().copied()).ok_or_else(|| none("task"))?,
        instance_ap,
        class_ap,
        task_ap,
        pair_ap,
        excluded,
        candidates: scored.len(),
        metadata,
    })
}

/// Anything that assigns a task-compatibility score to a sample.
pub trait Scorer {
    fn score(&mut self, sample: &TrainSample) -> Result<f64>;
}

/// Scores with a trained evaluator.
pub struct ModelScorer<'a> {
    pub model: &'a Model,
    pub pipeline: &'a mut FeaturePipeline,
    pub mode: EvalMode,
}

impl Scorer for ModelScorer<'_> {
    fn score(&mut self, sample: &TrainSample) -> Result<f64> {
        let bundle = self.pipeline.prepare(sample, None, self.mode)?;
        Ok(score(self.model, &bundle, self.mode)?.score)
    }
}

/// Returns the ground-truth label.
pub struct OracleScorer;

impl Scorer for OracleScorer {
    fn score(&mut self, sample: &TrainSample) -> Result<f64> {
        Ok(sample.label as f64)
    }
}

pub struct ConstantScorer(pub f64);

impl Scorer for ConstantScorer {
    fn score(&mut self, _: &TrainSample) -> Result<f64> {
        Ok(self.0)
    }
}

pub fn score_samples(
    scorer: &mut dyn Scorer,
    index: &DatasetIndex,
    samples: &[TrainSample],
) -> Result<Vec<ScoredGrasp>> {
    samples
        .iter()
        .map(|s| {
            let score = scorer.score(s)?;
            if !score.is_finite() {
                return Err(Error::Numerical(format!("score for {} is {score}", s.id())));
            }
            Ok(ScoredGrasp {
                instance_id: s.instance_id.clone(),
                class_id: index.instances[s.instance].class_id.clone(),
                grasp: s.grasp,
                task: s.task.clone(),
                score,
                label: Some(s.label),
            })
        })
        .collect()
}

/// Scores every test candidate of `split` and aggregates the report.
pub fn evaluate(scorer: &mut dyn Scorer, index: &DatasetIndex, split: &SplitSpec) -> Result<EvalReport> {
    let samples = split_samples(index, split, Partition::Test)?;
    if samples.is_empty() {
        return Err(Error::Validation(format!("{} fold {} has no test candidates", split.setting, split.fold)));
    }
    let mut report = aggregate(&score_samples(scorer, index, &samples)?)?;
    report.metadata.insert("setting".into(), split.setting.to_string());
    report.metadata.insert("fold".into(), format!("{}/{}", split.fold, split.folds));
    Ok(report)
}

/// Evaluates a trained model, generating knowledge for unseen test targets first.
pub fn evaluate_model(
    model: &Model,
    pipeline: &mut FeaturePipeline,
    split: &SplitSpec,
    mode: EvalMode,
) -> Result<EvalReport> {
    use crate::dataset::SplitSetting;
    use crate::knowledge::Target;
    for id in &split.test_ids {
        match split.setting {
            SplitSetting::Class => pipeline.ensure_knowledge(Target::Class(id))?,
            SplitSetting::Task => pipeline.ensure_knowledge(Target::Task(id))?,
            SplitSetting::Instance => {}
        }
    }
    let index = pipeline.index.clone();
    let mut scorer = ModelScorer { model, pipeline, mode };
    let mut report = evaluate(&mut scorer, &index, split)?;
    report.metadata.insert("mode".into(), mode.to_string());
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Decision {
    pub ranked: Vec<ScoredGrasp>,
    pub max_score: f64,
    pub reject: bool,
}

/// Sorts candidates by descending score, keeps the `top_k` best and rejects
/// the whole set when even the best scores below `threshold`.
pub fn rank_and_decide(scored: &[ScoredGrasp], top_k: usize, threshold: f64) -> Result<Decision> {
    if scored.is_empty() {
        return Err(Error::Validation("no candidates to rank".into()));
    }
    let mut ranked = scored.to_vec();
    ranked.sort_by(|a, b| b.score.total_cmp(&a.score));
    let max_score = ranked[0].score;
    ranked.truncate(top_k.max(1));
    Ok(Decision { ranked, max_score, reject: max_score < threshold })
}
