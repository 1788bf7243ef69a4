//! Loss, fold generation and the training loop.

use std::collections::BTreeSet;
use std::fs;
use std::io::Write;
use std::path::Path;

use log::{debug, info};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::backends::splitmix64;
use crate::dataset::{DatasetIndex, SplitSetting, SplitSpec};
use crate::error::{Error, Result};
use crate::evaluator::{tge_forward, EvalMode, FeatureBundle};
use crate::geometry::AugmentConfig;
use crate::metrics::{evaluate_model, EvalReport};
use crate::model::Model;
use crate::nn::{Adam, AdamConfig, Grads, Graph, Mat};
use crate::pipeline::{FeaturePipeline, TrainSample};

pub const PROB_CLAMP: f64 = 1e-7;

/// Mean binary cross-entropy with scores clamped to `[1e-7, 1 - 1e-7]`.
pub fn bce_loss(scores: &[f64], labels: &[f64]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Shape(format!("{} scores for {} labels", scores.len(), labels.len())));
    }
    if scores.is_empty() {
        return Err(Error::Validation("loss over an empty batch".into()));
    }
    let m = scores.len() as f64;
    let total: f64 = scores
        .iter()
        .zip(labels)
        .map(|(&s, &y)| {
            let s = s.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
            -(y * s.ln() + (1.0 - y) * (1.0 - s).ln())
        })
        .sum();
    Ok(total / m)
}

/// `∂loss/∂S` for one of `m` batch members; zero where the clamp is active.
pub fn bce_grad(s: f64, y: f64, m: usize) -> f64 {
    if !(PROB_CLAMP..=1.0 - PROB_CLAMP).contains(&s) {
        return 0.0;
    }
    -(y / s - (1.0 - y) / (1.0 - s)) / m as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    /// Learning-rate multiplier applied once per finished epoch.
    pub lr_decay: f64,
    pub seed: u64,
    pub mode: EvalMode,
    /// `None` trains on clean clouds.
    pub augment: Option<AugmentConfig>,
    /// Caps the number of optimizer steps per epoch; `None` makes one pass.
    pub steps_per_epoch: Option<usize>,
    /// Permutes training labels once before training (a no-signal control).
    pub shuffle_labels: bool,
    /// Probability of replacing the instruction's class with another training
    /// class, turning the sample into a negative.
    pub mismatch_rate: f64,
    /// Oversamples the minority label to an even split each epoch.
    pub class_balance: bool,
    pub validate_each_epoch: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 32,
            learning_rate: 1e-4,
            weight_decay: 1e-4,
            lr_decay: 0.95,
            seed: 0,
            mode: EvalMode::Full,
            augment: Some(AugmentConfig::default()),
            steps_per_epoch: None,
            shuffle_labels: false,
            mismatch_rate: 0.0,
            class_balance: false,
            validate_each_epoch: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("epochs and batch_size must be positive");
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) || !(self.weight_decay >= 0.0) {
            return bad("learning_rate and weight_decay must be non-negative");
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return bad("lr_decay must lie in (0, 1]");
        }
        if !(0.0..1.0).contains(&self.mismatch_rate) {
            return bad("mismatch_rate must lie in [0, 1)");
        }
        if self.steps_per_epoch == Some(0) {
            return bad("steps_per_epoch must be positive");
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Partition {
    Train,
    Test,
}

fn check_ids(index: &DatasetIndex, split: &SplitSpec) -> Result<()> {
    let known: BTreeSet<&str> = match split.setting {
        SplitSetting::Instance => index.instances.iter().map(|i| i.id.as_str()).collect(),
        SplitSetting::Class => index.classes.iter().map(String::as_str).collect(),
        SplitSetting::Task => index.tasks.iter().map(String::as_str).collect(),
    };
    for id in split.train_ids.iter().chain(&split.test_ids) {
        if !known.contains(id.as_str()) {
            return Err(Error::Validation(format!("{} split names unknown id {id}", split.setting)));
        }
    }
    Ok(())
}

/// Every labelled (instance, grasp, task) candidate on one side of a split, in
/// dataset order.
pub fn split_samples(index: &DatasetIndex, split: &SplitSpec, part: Partition) -> Result<Vec<TrainSample>> {
    split.validate()?;
    check_ids(index, split)?;
    let ids: BTreeSet<&str> = match part {
        Partition::Train => split.train_ids.iter().map(String::as_str).collect(),
        Partition::Test => split.test_ids.iter().map(String::as_str).collect(),
    };
    let mut out = Vec::new();
    for (i, inst) in index.instances.iter().enumerate() {
        let keep_instance = match split.setting {
            SplitSetting::Instance => ids.contains(inst.id.as_str()),
            SplitSetting::Class => ids.contains(inst.class_id.as_str()),
            SplitSetting::Task => true,
        };
        if !keep_instance {
            continue;
        }
        for (g, grasp) in inst.grasps.iter().enumerate() {
            for task in &index.tasks {
                if split.setting == SplitSetting::Task && !ids.contains(task.as_str()) {
                    continue;
                }
                if let Some(&label) = grasp.labels.get(task) {
                    out.push(TrainSample {
                        instance: i,
                        instance_id: inst.id.clone(),
                        grasp: g,
                        task: task.clone(),
                        named_class: inst.class_id.clone(),
                        label,
                        seed: 0,
                    });
                }
            }
        }
    }
    Ok(out)
}

/// Seeded shuffle of the setting's ids followed by a contiguous K-way split.
pub fn make_folds(index: &DatasetIndex, setting: SplitSetting, k: usize, seed: u64) -> Result<Vec<SplitSpec>> {
    let mut ids: Vec<String> = match setting {
        SplitSetting::Instance => index.instances.iter().map(|i| i.id.clone()).collect(),
        SplitSetting::Class => index.classes.clone(),
        SplitSetting::Task => index.tasks.clone(),
    };
    if k < 2 || ids.len() < k {
        return Err(Error::Validation(format!("cannot make {k} {setting} folds from {} ids", ids.len())));
    }
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n = ids.len();
    Ok((0..k)
        .map(|f| {
            let (lo, hi) = (f * n / k, (f + 1) * n / k);
            let mut test_ids = ids[lo..hi].to_vec();
            let mut train_ids: Vec<String> = ids[..lo].iter().chain(&ids[hi..]).cloned().collect();
            test_ids.sort();
            train_ids.sort();
            SplitSpec { setting, fold: f, folds: k, train_ids, test_ids }
        })
        .collect())
}

/// Lists every training sample that leaks held-out information for the
/// split's setting. Class-setting scans also cover the class named in the
/// instruction, since mismatch negatives borrow other classes' names.
pub fn leakage_violations(index: &DatasetIndex, split: &SplitSpec, train: &[TrainSample]) -> Vec<String> {
    let test: BTreeSet<&str> = split.test_ids.iter().map(String::as_str).collect();
    train
        .iter()
        .filter(|s| match split.setting {
            SplitSetting::Instance => test.contains(s.instance_id.as_str()),
            SplitSetting::Class => {
                test.contains(index.instances[s.instance].class_id.as_str()) || test.contains(s.named_class.as_str())
            }
            SplitSetting::Task => test.contains(s.task.as_str()),
        })
        .map(TrainSample::id)
        .collect()
}

/// Forward and backward over a batch. Returns the loss, the scores and the
/// summed parameter gradients.
pub fn batch_loss_and_grads(
    model: &Model,
    bundles: &[FeatureBundle],
    labels: &[f64],
    mode: EvalMode,
) -> Result<(f64, Vec<f64>, Grads)> {
    let mut grads = model.params.zero_grads();
    let mut scores = Vec::with_capacity(bundles.len());
    let m = bundles.len();
    for (b, &y) in bundles.iter().zip(labels) {
        let mut g = Graph::new(&model.params);
        let out = tge_forward(&mut g, model, b, mode)?;
        let s = g.value(out.score).get(0, 0);
        scores.push(s);
        if s.is_finite() {
            g.backward(out.score, Mat::filled(1, 1, bce_grad(s, y, m)), &mut grads, 1.0);
        }
    }
    let loss = bce_loss(&scores, labels)?;
    Ok((loss, scores, grads))
}

/// Loss only, for finite-difference checks.
pub fn batch_loss(model: &Model, bundles: &[FeatureBundle], labels: &[f64], mode: EvalMode) -> Result<f64> {
    let mut scores = Vec::with_capacity(bundles.len());
    for b in bundles {
        let mut g = Graph::new(&model.params);
        let out = tge_forward(&mut g, model, b, mode)?;
        scores.push(g.value(out.score).get(0, 0));
    }
    bce_loss(&scores, labels)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: f64,
    pub val_map: Option<f64>,
    pub lr: f64,
}

pub struct TrainOutcome {
    pub model: Model,
    pub log: Vec<EpochLog>,
}

/// Held-out data scored after each epoch when `validate_each_epoch` is set.
pub struct Validation<'a> {
    pub split: &'a SplitSpec,
}

/// The metric that matters for a setting.
pub fn primary_map(report: &EvalReport, setting: SplitSetting) -> f64 {
    match setting {
        SplitSetting::Instance => report.instance_map,
        SplitSetting::Class => report.class_map,
        SplitSetting::Task => report.task_map,
    }
}

fn sub_seed(seed: u64, a: u64, b: u64) -> u64 {
    splitmix64(splitmix64(seed ^ splitmix64(a)) ^ b)
}

fn epoch_order(samples: &[TrainSample], cfg: &TrainConfig, epoch: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(cfg.seed, 0x006f_7264_6572, epoch as u64));
    let mut order: Vec<usize> = (0..samples.len()).collect();
    if cfg.class_balance {
        let (pos, neg): (Vec<usize>, Vec<usize>) = order.iter().partition(|&&i| samples[i].label != 0);
        if !pos.is_empty() && !neg.is_empty() {
            let (big, small) = if pos.len() >= neg.len() { (pos, neg) } else { (neg, pos) };
            order = big.clone();
            order.extend((0..big.len()).map(|_| small[rng.random_range(0..small.len())]));
        }
    }
    order.shuffle(&mut rng);
    order
}

/// Trains a fresh model on `samples`. Writes `metrics.jsonl` and the
/// checkpoint under `out` when given.
pub fn train_on_samples(
    pipeline: &mut FeaturePipeline,
    samples: &[TrainSample],
    cfg: &TrainConfig,
    validation: Option<Validation<'_>>,
    out: Option<&Path>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::Validation("no training samples".into()));
    }
    let mut model = Model::new(pipeline.model.clone(), cfg.seed)?;
    let mut opt = Adam::new(
        &model.params,
        AdamConfig { learning_rate: cfg.learning_rate, weight_decay: cfg.weight_decay, ..AdamConfig::default() },
    );
    let mut samples = samples.to_vec();
    if cfg.shuffle_labels {
        let mut labels: Vec<u8> = samples.iter().map(|s| s.label).collect();
        labels.shuffle(&mut ChaCha8Rng::seed_from_u64(sub_seed(cfg.seed, 0x7368_7566, 0)));
        samples.iter_mut().zip(labels).for_each(|(s, l)| s.label = l);
    }
    let classes: Vec<String> = samples
        .iter()
        .map(|s| pipeline.index.instances[s.instance].class_id.clone())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();

    let mut log_file = match out {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let path = dir.join("metrics.jsonl");
            Some((fs::File::create(&path).map_err(|e| Error::io(&path, e))?, path))
        }
        None => None,
    };

    let mut log = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let order = epoch_order(&samples, cfg, epoch);
        let passes = order.len().div_ceil(cfg.batch_size);
        let steps = cfg.steps_per_epoch.unwrap_or(passes);
        let lr = opt.current_lr();
        let (mut loss_sum, mut count) = (0.0, 0usize);
        for step in 0..steps {
            let mut batch = Vec::with_capacity(cfg.batch_size);
            for j in 0..cfg.batch_size {
                let pos = step * cfg.batch_size + j;
                if cfg.steps_per_epoch.is_none() && pos >= order.len() {
                    break;
                }
                let mut s = samples[order[pos % order.len()]].clone();
                let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(cfg.seed, epoch as u64 + 1, pos as u64));
                s.seed = rng.random();
                if classes.len() > 1 && cfg.mismatch_rate > 0.0 && rng.random::<f64>() < cfg.mismatch_rate {
                    let others: Vec<&String> = classes.iter().filter(|c| **c != s.named_class).collect();
                    s.named_class = others[rng.random_range(0..others.len())].clone();
                    s.label = 0;
                }
                batch.push(s);
            }
            let bundles = batch
                .iter()
                .map(|s| pipeline.prepare(s, cfg.augment.as_ref(), cfg.mode))
                .collect::<Result<Vec<_>>>()?;
            let labels: Vec<f64> = batch.iter().map(|s| s.label as f64).collect();
            let (loss, scores, grads) = batch_loss_and_grads(&model, &bundles, &labels, cfg.mode)?;
            if !loss.is_finite() || !grads.is_finite() {
                let bad: Vec<String> =
                    batch.iter().zip(&scores).filter(|(_, s)| !s.is_finite()).map(|(b, _)| b.id()).collect();
                let ids = if bad.is_empty() { batch.iter().map(TrainSample::id).collect() } else { bad };
                return Err(Error::Numerical(format!(
                    "epoch {epoch} step {step}: loss {loss}; samples {}",
                    ids.join(", ")
                )));
            }
            opt.step(&mut model.params, &grads);
            loss_sum += loss * batch.len() as f64;
            count += batch.len();
        }
        let loss = loss_sum / count as f64;
        opt.set_lr_multiplier(cfg.lr_decay.powi(epoch as i32 + 1));
        let val_map = match (&validation, cfg.validate_each_epoch) {
            (Some(v), true) => {
                Some(primary_map(&evaluate_model(&model, pipeline, v.split, cfg.mode)?, v.split.setting))
            }
            _ => None,
        };
        debug!("epoch {epoch}: loss {loss:.6} lr {lr:.3e}");
        let entry = EpochLog { epoch, loss, val_map, lr };
        if let Some((f, path)) = log_file.as_mut() {
            let line = serde_json::to_string(&entry).map_err(|e| Error::parse(path, e))?;
            writeln!(f, "{line}").map_err(|e| Error::io(path, e))?;
        }
        log.push(entry);
    }
    info!("trained {} epochs; final loss {:.6}", cfg.epochs, log.last().map_or(f64::NAN, |e| e.loss));
    if let Some(dir) = out {
        let extra = json!({
            "train": cfg,
            "lr_schedule": format!("lr × {}^epoch", cfg.lr_decay),
            "samples": samples.len(),
        });
        model.save(&dir.join("checkpoint"), extra)?;
    }
    Ok(TrainOutcome { model, log })
}

/// Trains on the training side of `split`, checking it for leakage first.
pub fn fit(
    pipeline: &mut FeaturePipeline,
    split: &SplitSpec,
    cfg: &TrainConfig,
    out: Option<&Path>,
) -> Result<TrainOutcome> {
    let samples = split_samples(&pipeline.index, split, Partition::Train)?;
    let leaks = leakage_violations(&pipeline.index, split, &samples);
    if !leaks.is_empty() {
        return Err(Error::Validation(format!("{} training samples leak test data, e.g. {}", leaks.len(), leaks[0])));
    }
    info!("{} fold {}: {} training samples", split.setting, split.fold, samples.len());
    train_on_samples(pipeline, &samples, cfg, Some(Validation { split }), out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthgen::{generate_index, SynthSpec};

    #[test]
    fn bce_spot_values() {
        assert!((bce_loss(&[0.5], &[1.0]).unwrap() - 2f64.ln()).abs() < 1e-12);
        assert!(bce_loss(&[1.0], &[1.0]).unwrap() <= 1e-6);
        assert!(bce_loss(&[0.0], &[0.0]).unwrap() <= 1e-6);
        let want = -0.5 * (0.9f64.ln() + 0.8f64.ln());
        assert!((bce_loss(&[0.9, 0.2], &[1.0, 0.0]).unwrap() - want).abs() < 1e-12);
        assert!(bce_loss(&[0.5], &[1.0, 0.0]).is_err());
        assert!(bce_loss(&[], &[]).is_err());
    }

    #[test]
    fn bce_gradient_matches_difference_quotient() {
        for (s, y) in [(0.3, 1.0), (0.8, 0.0), (0.55, 1.0)] {
            let h = 1e-6;
            let fd =
                (bce_loss(&[s + h, 0.5], &[y, 1.0]).unwrap() - bce_loss(&[s - h, 0.5], &[y, 1.0]).unwrap()) / (2.0 * h);
            assert!((bce_grad(s, y, 2) - fd).abs() < 1e-6);
        }
        assert_eq!(bce_grad(1.0, 1.0, 1), 0.0);
    }

    fn index() -> DatasetIndex {
        let mut spec = SynthSpec::overlapping();
        spec.instances_per_class = 2;
        spec.grasps_per_instance = 3;
        spec.points_per_instance = 64;
        generate_index(&spec).unwrap().0
    }

    #[test]
    fn folds_partition_and_do_not_leak() {
        let idx = index();
        for setting in SplitSetting::ALL {
            let folds = make_folds(&idx, setting, 4, 7).unwrap();
            assert_eq!(folds.len(), 4);
            let mut seen = BTreeSet::new();
            for f in &folds {
                for id in &f.test_ids {
                    assert!(seen.insert(id.clone()), "{id} tested twice");
                }
                let train = split_samples(&idx, f, Partition::Train).unwrap();
                assert!(leakage_violations(&idx, f, &train).is_empty());
                let test = split_samples(&idx, f, Partition::Test).unwrap();
                assert!(!test.is_empty());
                if setting == SplitSetting::Task {
                    let a: BTreeSet<&str> = train.iter().map(|s| s.instance_id.as_str()).collect();
                    let b: BTreeSet<&str> = test.iter().map(|s| s.instance_id.as_str()).collect();
                    assert_eq!(a, b);
                }
            }
            assert_eq!(make_folds(&idx, setting, 4, 7).unwrap(), folds);
        }
    }

    #[test]
    fn eight_instances_make_four_pairs() {
        let mut idx = index();
        idx.instances.truncate(8);
        let folds = make_folds(&idx, SplitSetting::Instance, 4, 1).unwrap();
        assert!(folds.iter().all(|f| f.test_ids.len() == 2 && f.train_ids.len() == 6));
        idx.instances.truncate(3);
        assert!(make_folds(&idx, SplitSetting::Instance, 4, 1).is_err());
    }

    #[test]
    fn leakage_scan_catches_planted_sample() {
        let idx = index();
        let f = &make_folds(&idx, SplitSetting::Class, 4, 3).unwrap()[0];
        let mut train = split_samples(&idx, f, Partition::Train).unwrap();
        assert!(leakage_violations(&idx, f, &train).is_empty());
        train[0].named_class = f.test_ids[0].clone();
        assert_eq!(leakage_violations(&idx, f, &train).len(), 1);
    }

    #[test]
    fn config_validation() {
        TrainConfig::default().validate().unwrap();
        assert!(TrainConfig { lr_decay: 0.0, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { batch_size: 0, ..TrainConfig::default() }.validate().is_err());
        let parsed: TrainConfig = serde_json::from_str(r#"{"epochs": 3, "mode": "semantic-only"}"#).unwrap();
        assert_eq!(parsed.epochs, 3);
        assert_eq!(parsed.mode, EvalMode::SemanticOnly);
    }
}
