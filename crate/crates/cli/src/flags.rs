//! Command-line flags. Every flag sets exactly one config key, named in its
//! help text; unset flags leave the config file's value alone.

use std::path::PathBuf;

use clap::{ArgAction, Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::Value;

use crate::config::Flat;

#[derive(Parser, Debug)]
#[command(name = "togkit", version, about = "Task-oriented grasp evaluation toolkit")]
pub struct Cli {
    #[command(flatten)]
    pub global: Global,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug)]
pub struct Global {
    /// JSON config file with dotted keys; a run manifest replays its run
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Set any config key, e.g. --set train.augment.jitter_sigma=0 (repeatable)
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// More log output on stderr (-v debug, -vv trace)
    #[arg(short, long, global = true, action = ArgAction::Count)]
    pub verbose: u8,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a procedural synthetic dataset
    GenSynth(GenSynth),
    /// Generate descriptions, instruction templates and curated images
    GenKnowledge(GenKnowledge),
    /// Write k-fold split files for one held-out setting
    MakeSplits(MakeSplits),
    /// Train the evaluator on one fold
    Train(Train),
    /// Score a fold's test candidates and write an mAP report
    Eval(Eval),
    /// Rank one instance's grasp candidates for an instruction
    Rank(Rank),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::GenSynth(_) => "gen-synth",
            Command::GenKnowledge(_) => "gen-knowledge",
            Command::MakeSplits(_) => "make-splits",
            Command::Train(_) => "train",
            Command::Eval(_) => "eval",
            Command::Rank(_) => "rank",
        }
    }

    pub fn overrides(&self) -> Flat {
        let mut f = Flat::new();
        match self {
            Command::GenSynth(c) => {
                put(&mut f, "spec", &c.spec);
                put(&mut f, "preset", &c.preset);
                put(&mut f, "out", &c.out);
            }
            Command::GenKnowledge(c) => {
                put(&mut f, "data", &c.data);
                put(&mut f, "knowledge.samples_per_prompt", &c.samples_per_prompt);
                put(&mut f, "knowledge.template_rewrites", &c.template_rewrites);
                put(&mut f, "knowledge.images_per_instance", &c.images_per_instance);
                c.backend.add(&mut f);
            }
            Command::MakeSplits(c) => {
                put(&mut f, "data", &c.data);
                put(&mut f, "setting", &c.setting);
                put(&mut f, "folds", &c.folds);
                put(&mut f, "split_seed", &c.split_seed);
            }
            Command::Train(c) => {
                put(&mut f, "data", &c.data);
                put(&mut f, "setting", &c.setting);
                put(&mut f, "fold", &c.fold);
                put(&mut f, "out", &c.out);
                put(&mut f, "model.profile", &c.profile);
                put(&mut f, "train.epochs", &c.epochs);
                put(&mut f, "train.batch_size", &c.batch_size);
                put(&mut f, "train.learning_rate", &c.learning_rate);
                put(&mut f, "train.weight_decay", &c.weight_decay);
                put(&mut f, "train.lr_decay", &c.lr_decay);
                put(&mut f, "train.seed", &c.seed);
                put(&mut f, "train.mode", &c.mode);
                put(&mut f, "train.steps_per_epoch", &c.steps_per_epoch);
                put(&mut f, "train.mismatch_rate", &c.mismatch_rate);
                put_flag(&mut f, "train.shuffle_labels", c.shuffle_labels);
                put_flag(&mut f, "train.class_balance", c.class_balance);
                put_flag(&mut f, "train.validate_each_epoch", c.validate_each_epoch);
                if c.no_augment {
                    f.insert("train.augment".into(), Value::Null);
                }
                c.backend.add(&mut f);
            }
            Command::Eval(c) => {
                put(&mut f, "data", &c.data);
                put(&mut f, "checkpoint", &c.checkpoint);
                put(&mut f, "setting", &c.setting);
                put(&mut f, "fold", &c.fold);
                put(&mut f, "out", &c.out);
                put(&mut f, "mode", &c.mode);
                put_flag(&mut f, "oracle", c.oracle);
                c.backend.add(&mut f);
            }
            Command::Rank(c) => {
                put(&mut f, "data", &c.data);
                put(&mut f, "checkpoint", &c.checkpoint);
                put(&mut f, "instance", &c.instance);
                put(&mut f, "class", &c.class);
                put(&mut f, "task", &c.task);
                put(&mut f, "top_k", &c.top_k);
                put(&mut f, "threshold", &c.threshold);
                put(&mut f, "mode", &c.mode);
                put(&mut f, "ply", &c.ply);
                c.backend.add(&mut f);
            }
        }
        f
    }
}

fn put<T: Serialize>(f: &mut Flat, key: &str, v: &Option<T>) {
    if let Some(v) = v {
        f.insert(key.into(), serde_json::to_value(v).expect("flag values serialize"));
    }
}

fn put_flag(f: &mut Flat, key: &str, set: bool) {
    if set {
        f.insert(key.into(), Value::Bool(true));
    }
}

#[derive(Args, Debug)]
pub struct BackendFlags {
    /// Language model: `fixture` or `hosted:<name>` [key: backend.language]
    #[arg(long)]
    pub language: Option<String>,
    /// Semantic text embedder: `fixture` or `hosted:<name>` [key: backend.semantic]
    #[arg(long)]
    pub semantic: Option<String>,
    /// Multimodal embedder: `fixture` or `hosted:<name>` [key: backend.multimodal]
    #[arg(long)]
    pub multimodal: Option<String>,
    /// Salt for the fixture embedders [key: backend.seed]
    #[arg(long)]
    pub backend_seed: Option<u64>,
}

impl BackendFlags {
    fn add(&self, f: &mut Flat) {
        put(f, "backend.language", &self.language);
        put(f, "backend.semantic", &self.semantic);
        put(f, "backend.multimodal", &self.multimodal);
        put(f, "backend.seed", &self.backend_seed);
    }
}

#[derive(Args, Debug)]
pub struct GenSynth {
    /// Synthetic spec JSON; overrides the preset [key: spec]
    #[arg(long, value_name = "PATH")]
    pub spec: Option<PathBuf>,
    /// Built-in spec: `default` or `overlapping` [key: preset]
    #[arg(long)]
    pub preset: Option<String>,
    /// Output dataset directory [key: out]
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct GenKnowledge {
    /// Dataset root [key: data]
    #[arg(long, value_name = "DIR")]
    pub data: Option<PathBuf>,
    /// Responses sampled per prompt [key: knowledge.samples_per_prompt]
    #[arg(long)]
    pub samples_per_prompt: Option<usize>,
    /// Paraphrases requested per seed template [key: knowledge.template_rewrites]
    #[arg(long)]
    pub template_rewrites: Option<usize>,
    /// Curated images kept per instance [key: knowledge.images_per_instance]
    #[arg(long)]
    pub images_per_instance: Option<usize>,
    #[command(flatten)]
    pub backend: BackendFlags,
}

#[derive(Args, Debug)]
pub struct MakeSplits {
    /// Dataset root [key: data]
    #[arg(long, value_name = "DIR")]
    pub data: Option<PathBuf>,
    /// Held-out setting: instance, class or task [key: setting]
    #[arg(long)]
    pub setting: Option<String>,
    /// Number of folds [key: folds]
    #[arg(long)]
    pub folds: Option<usize>,
    /// Shuffle seed for fold assignment [key: split_seed]
    #[arg(long)]
    pub split_seed: Option<u64>,
}

#[derive(Args, Debug)]
pub struct Train {
    /// Dataset root [key: data]
    #[arg(long, value_name = "DIR")]
    pub data: Option<PathBuf>,
    /// Held-out setting: instance, class or task [key: setting]
    #[arg(long)]
    pub setting: Option<String>,
    /// Fold index [key: fold]
    #[arg(long)]
    pub fold: Option<usize>,
    /// Run directory for the checkpoint, metrics.jsonl and manifest [key: out]
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Model profile: desk, paper or minimal [key: model.profile]
    #[arg(long)]
    pub profile: Option<String>,
    /// Training epochs [key: train.epochs]
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Batch size [key: train.batch_size]
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Adam learning rate [key: train.learning_rate]
    #[arg(long = "lr")]
    pub learning_rate: Option<f64>,
    /// Decoupled weight decay [key: train.weight_decay]
    #[arg(long)]
    pub weight_decay: Option<f64>,
    /// Per-epoch learning-rate multiplier [key: train.lr_decay]
    #[arg(long)]
    pub lr_decay: Option<f64>,
    /// Initialization and sampling seed [key: train.seed]
    #[arg(long)]
    pub seed: Option<u64>,
    /// Evaluator mode, e.g. full, vanilla, semantic-only [key: train.mode]
    #[arg(long)]
    pub mode: Option<String>,
    /// Cap on optimizer steps per epoch [key: train.steps_per_epoch]
    #[arg(long)]
    pub steps_per_epoch: Option<usize>,
    /// Probability of a wrong-class negative per sample [key: train.mismatch_rate]
    #[arg(long)]
    pub mismatch_rate: Option<f64>,
    /// Permute training labels (a no-signal control) [key: train.shuffle_labels]
    #[arg(long)]
    pub shuffle_labels: bool,
    /// Oversample the minority label [key: train.class_balance]
    #[arg(long)]
    pub class_balance: bool,
    /// Evaluate the test fold after every epoch [key: train.validate_each_epoch]
    #[arg(long)]
    pub validate_each_epoch: bool,
    /// Train on clean clouds [key: train.augment = null]
    #[arg(long)]
    pub no_augment: bool,
    #[command(flatten)]
    pub backend: BackendFlags,
}

#[derive(Args, Debug)]
pub struct Eval {
    /// Dataset root [key: data]
    #[arg(long, value_name = "DIR")]
    pub data: Option<PathBuf>,
    /// Checkpoint directory written by `train` [key: checkpoint]
    #[arg(long, value_name = "DIR")]
    pub checkpoint: Option<PathBuf>,
    /// Held-out setting: instance, class or task [key: setting]
    #[arg(long)]
    pub setting: Option<String>,
    /// Fold index [key: fold]
    #[arg(long)]
    pub fold: Option<usize>,
    /// Report path [key: out]
    #[arg(long, value_name = "PATH")]
    pub out: Option<PathBuf>,
    /// Evaluator mode; defaults to the checkpoint's training mode [key: mode]
    #[arg(long)]
    pub mode: Option<String>,
    /// Score with ground-truth labels instead of a model [key: oracle]
    #[arg(long)]
    pub oracle: bool,
    #[command(flatten)]
    pub backend: BackendFlags,
}

#[derive(Args, Debug)]
pub struct Rank {
    /// Dataset root [key: data]
    #[arg(long, value_name = "DIR")]
    pub data: Option<PathBuf>,
    /// Checkpoint directory written by `train` [key: checkpoint]
    #[arg(long, value_name = "DIR")]
    pub checkpoint: Option<PathBuf>,
    /// Instance whose candidates are ranked [key: instance]
    #[arg(long)]
    pub instance: Option<String>,
    /// Object class named in the instruction; defaults to the instance's [key: class]
    #[arg(long)]
    pub class: Option<String>,
    /// Task named in the instruction [key: task]
    #[arg(long)]
    pub task: Option<String>,
    /// Rows printed [key: top_k]
    #[arg(long)]
    pub top_k: Option<usize>,
    /// Reject when the best score is below this [key: threshold]
    #[arg(long)]
    pub threshold: Option<f64>,
    /// Evaluator mode; defaults to the checkpoint's training mode [key: mode]
    #[arg(long)]
    pub mode: Option<String>,
    /// Also write an ASCII PLY with score-colored grippers [key: ply]
    #[arg(long, value_name = "PATH")]
    pub ply: Option<PathBuf>,
    #[command(flatten)]
    pub backend: BackendFlags,
}
