//! Knowledge generation: prompt sets, description banks, paragraph assembly,
//! instruction templates and image-set curation.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use log::warn;
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backends::{cosine, GenerationRequest, GenerativeLanguageBackend, ImageData, MultimodalEmbedder};
use crate::dataset::{read_json, write_json, DatasetIndex, ObjectInstanceRecord};
use crate::error::{Error, Result};

pub const GENERATION_ATTEMPTS: usize = 3;
pub const MAX_PARAGRAPH_SENTENCES: usize = 6;
pub const DEFAULT_SIMILARITY_THRESHOLD: f64 = 0.95;
pub const DEFAULT_IMAGE_COUNT: usize = 24;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum PromptKind {
    O2O,
    O2T,
    T2T,
    T2O,
    O2P,
    T2P,
    #[serde(rename = "template-augment")]
    TemplateAugment,
}

impl PromptKind {
    pub const ALL: [PromptKind; 7] = [
        PromptKind::O2O,
        PromptKind::O2T,
        PromptKind::T2T,
        PromptKind::T2O,
        PromptKind::O2P,
        PromptKind::T2P,
        PromptKind::TemplateAugment,
    ];

    pub fn slot(self) -> &'static str {
        match self {
            PromptKind::O2O | PromptKind::O2T | PromptKind::O2P => "{class}",
            PromptKind::T2T | PromptKind::T2O | PromptKind::T2P => "{task}",
            PromptKind::TemplateAugment => "{template}",
        }
    }

    pub fn is_geometric(self) -> bool {
        matches!(self, PromptKind::O2P | PromptKind::T2P)
    }

    pub fn is_object(self) -> bool {
        matches!(self, PromptKind::O2O | PromptKind::O2T | PromptKind::O2P)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            PromptKind::O2O => "O2O",
            PromptKind::O2T => "O2T",
            PromptKind::T2T => "T2T",
            PromptKind::T2O => "T2O",
            PromptKind::O2P => "O2P",
            PromptKind::T2P => "T2P",
            PromptKind::TemplateAugment => "template-augment",
        }
    }
}

impl fmt::Display for PromptKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aspect {
    Semantic,
    Geometric,
}

/// What a description is about.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Target<'a> {
    Class(&'a str),
    Task(&'a str),
}

impl Target<'_> {
    pub fn id(&self) -> &str {
        match self {
            Target::Class(s) | Target::Task(s) => s,
        }
    }

    /// Prompt kinds that make up a paragraph, in concatenation order.
    pub fn kinds(&self, aspect: Aspect) -> &'static [PromptKind] {
        match (self, aspect) {
            (Target::Class(_), Aspect::Semantic) => &[PromptKind::O2O, PromptKind::O2T],
            (Target::Class(_), Aspect::Geometric) => &[PromptKind::O2P],
            (Target::Task(_), Aspect::Semantic) => &[PromptKind::T2T, PromptKind::T2O],
            (Target::Task(_), Aspect::Geometric) => &[PromptKind::T2P],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptSet {
    pub kind: PromptKind,
    pub prompts: Vec<String>,
}

impl PromptSet {
    pub fn new(kind: PromptKind, prompts: Vec<String>) -> Result<Self> {
        if prompts.is_empty() {
            return Err(Error::Validation(format!("prompt set {kind} is empty")));
        }
        if let Some(p) = prompts.iter().find(|p| !p.contains(kind.slot())) {
            return Err(Error::Validation(format!("{kind} prompt {p:?} lacks the {} slot", kind.slot())));
        }
        Ok(Self { kind, prompts })
    }

    pub fn len(&self) -> usize {
        self.prompts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.prompts.is_empty()
    }

    pub fn fill(&self, index: usize, value: &str) -> String {
        self.prompts[index].replace(self.kind.slot(), value)
    }

    pub fn default_for(kind: PromptKind) -> Self {
        let prompts: &[&str] = match kind {
            PromptKind::O2O => &[
                "Describe what household objects have a similar shape to a {class}.",
                "Describe what household objects have a similar function to a {class}.",
                "Describe what household objects belong to the same meta-category as a {class}.",
                "Describe what household objects have similar geometries to a {class}.",
            ],
            PromptKind::O2T => &[
                "Describe what a {class} is and what it is commonly used for.",
                "Describe which tasks a {class} can be used to accomplish.",
            ],
            PromptKind::T2T => &[
                "Describe what verbs achieve similar effects to '{task} an object'.",
                "Describe what actions are similar to '{task}'.",
                "Describe what motions a person performs to {task}.",
            ],
            PromptKind::T2O => &[
                "Describe what household objects afford the function of '{task}'.",
                "Describe what tools a person would use to {task}.",
            ],
            PromptKind::O2P => &[
                "List the parts and primitive shapes of a {class} as short bullets.",
                "List the geometric components of a {class} as short bullets.",
            ],
            PromptKind::T2P => &[
                "List the object parts or primitive shapes involved when you {task}, as short bullets.",
                "List which parts of a tool are grasped or used to {task}, as short bullets.",
            ],
            PromptKind::TemplateAugment => {
                &["Rewrite the following sentence in a different grammatical format: {template}"]
            }
        };
        Self { kind, prompts: prompts.iter().map(|s| s.to_string()).collect() }
    }
}

/// One generated description.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DescriptionEntry {
    pub prompt_index: usize,
    pub sample_index: usize,
    pub text: String,
}

pub type KindMap = BTreeMap<PromptKind, Vec<DescriptionEntry>>;

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct DescriptionBank {
    pub classes: BTreeMap<String, KindMap>,
    pub tasks: BTreeMap<String, KindMap>,
}

impl DescriptionBank {
    pub fn insert(&mut self, target: Target<'_>, kind: PromptKind, mut entries: Vec<DescriptionEntry>) -> Result<()> {
        if let Some(e) = entries.iter().find(|e| e.text.trim().is_empty()) {
            return Err(Error::Validation(format!(
                "empty {kind} description for {} (prompt {}, sample {})",
                target.id(),
                e.prompt_index,
                e.sample_index
            )));
        }
        if kind.is_geometric() {
            if let Some(e) = entries.iter().find(|e| parse_bullets(&e.text).is_empty()) {
                return Err(Error::Validation(format!(
                    "{kind} description for {} is not a bullet list: {:?}",
                    target.id(),
                    e.text
                )));
            }
        }
        entries.sort_by_key(|e| (e.prompt_index, e.sample_index));
        let map = match target {
            Target::Class(c) => self.classes.entry(c.to_string()).or_default(),
            Target::Task(t) => self.tasks.entry(t.to_string()).or_default(),
        };
        map.insert(kind, entries);
        Ok(())
    }

    pub fn entries(&self, target: Target<'_>, kind: PromptKind) -> &[DescriptionEntry] {
        let map = match target {
            Target::Class(c) => self.classes.get(c),
            Target::Task(t) => self.tasks.get(t),
        };
        map.and_then(|m| m.get(&kind)).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn has_target(&self, target: Target<'_>) -> bool {
        match target {
            Target::Class(c) => self.classes.contains_key(c),
            Target::Task(t) => self.tasks.contains_key(t),
        }
    }

    pub fn save(&self, knowledge_dir: &Path) -> Result<()> {
        for (c, m) in &self.classes {
            write_json(&knowledge_dir.join("objects").join(format!("{c}.json")), m)?;
        }
        for (t, m) in &self.tasks {
            write_json(&knowledge_dir.join("tasks").join(format!("{t}.json")), m)?;
        }
        Ok(())
    }

    /// Loads the banks for the given classes and tasks; missing files are an error.
    pub fn load(knowledge_dir: &Path, classes: &[String], tasks: &[String]) -> Result<Self> {
        let mut bank = Self::default();
        for c in classes {
            bank.classes.insert(c.clone(), read_json(&knowledge_dir.join("objects").join(format!("{c}.json")))?);
        }
        for t in tasks {
            bank.tasks.insert(t.clone(), read_json(&knowledge_dir.join("tasks").join(format!("{t}.json")))?);
        }
        Ok(bank)
    }
}

/// Splits bullet-list text into items. Leading `-`, `*`, `•` and `1.`-style
/// markers are stripped; blank lines are dropped.
pub fn parse_bullets(text: &str) -> Vec<String> {
    text.lines()
        .map(|line| {
            let mut s = line.trim();
            loop {
                let before = s;
                s = s.trim_start_matches(['-', '*', '•']).trim_start();
                let digits = s.len() - s.trim_start_matches(|c: char| c.is_ascii_digit()).len();
                if digits > 0 && s[digits..].starts_with(['.', ')']) {
                    s = s[digits + 1..].trim_start();
                }
                if s == before {
                    break;
                }
            }
            s.trim_end_matches(['.', ';']).trim().to_string()
        })
        .filter(|s| !s.is_empty())
        .collect()
}

fn to_bullets(items: &[String]) -> String {
    items.iter().map(|i| format!("- {i}")).collect::<Vec<_>>().join("\n")
}

/// Splits prose into sentences; newlines also end a sentence.
pub fn split_sentences(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    let chars: Vec<char> = text.chars().collect();
    for (i, &ch) in chars.iter().enumerate() {
        if ch == '\n' {
            push_trimmed(&mut out, &mut cur);
            continue;
        }
        cur.push(ch);
        if matches!(ch, '.' | '!' | '?') && chars.get(i + 1).is_none_or(|c| c.is_whitespace()) {
            push_trimmed(&mut out, &mut cur);
        }
    }
    push_trimmed(&mut out, &mut cur);
    out
}

fn push_trimmed(out: &mut Vec<String>, cur: &mut String) {
    let t = cur.trim();
    if !t.is_empty() {
        out.push(t.to_string());
    }
    cur.clear();
}

// ---------------------------------------------------------------------------
// cache

/// Content-addressed, write-once store of backend responses.
#[derive(Debug)]
pub enum KnowledgeCache {
    Memory(HashMap<String, String>),
    Dir(PathBuf),
}

impl KnowledgeCache {
    pub fn memory() -> Self {
        KnowledgeCache::Memory(HashMap::new())
    }

    pub fn dir(path: impl Into<PathBuf>) -> Self {
        KnowledgeCache::Dir(path.into())
    }

    pub fn key(backend_id: &str, prompt: &str, sample_index: usize) -> String {
        let prompt_hash = Sha256::digest(prompt.as_bytes());
        let mut h = Sha256::new();
        h.update(backend_id.as_bytes());
        h.update([0u8]);
        h.update(prompt_hash);
        h.update((sample_index as u64).to_le_bytes());
        hex::encode(h.finalize())
    }

    pub fn get(&self, key: &str) -> Result<Option<String>> {
        match self {
            KnowledgeCache::Memory(m) => Ok(m.get(key).cloned()),
            KnowledgeCache::Dir(dir) => {
                let path = dir.join(key);
                match fs::read_to_string(&path) {
                    Ok(s) => Ok(Some(s)),
                    Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
                    Err(e) => Err(Error::io(&path, e)),
                }
            }
        }
    }

    /// Stores `text` unless the key already exists; existing entries are never replaced.
    pub fn put(&mut self, key: &str, text: &str) -> Result<()> {
        match self {
            KnowledgeCache::Memory(m) => {
                m.entry(key.to_string()).or_insert_with(|| text.to_string());
                Ok(())
            }
            KnowledgeCache::Dir(dir) => {
                let path = dir.join(key);
                if path.exists() {
                    return Ok(());
                }
                fs::create_dir_all(&*dir).map_err(|e| Error::io(dir, e))?;
                let tmp = dir.join(format!(".{key}.tmp"));
                fs::write(&tmp, text).map_err(|e| Error::io(&tmp, e))?;
                fs::rename(&tmp, &path).map_err(|e| Error::io(&path, e))
            }
        }
    }
}

fn query_cached(
    backend: &dyn GenerativeLanguageBackend,
    cache: &mut KnowledgeCache,
    request: &GenerationRequest,
    accept: impl Fn(&str) -> bool,
) -> Result<String> {
    let key = KnowledgeCache::key(backend.id(), &request.prompt, request.sample_index);
    if let Some(text) = cache.get(&key)? {
        if accept(&text) {
            return Ok(text);
        }
    }
    let mut last = String::from("no attempt made");
    for attempt in 1..=GENERATION_ATTEMPTS {
        match backend.generate(request) {
            Ok(text) if accept(&text) => {
                cache.put(&key, &text)?;
                return Ok(text);
            }
            Ok(text) => last = format!("unusable response {text:?}"),
            Err(e) => last = e.to_string(),
        }
        warn!("generation attempt {attempt}/{GENERATION_ATTEMPTS} failed: {last}");
    }
    Err(Error::Backend(format!("prompt {:?} failed after {GENERATION_ATTEMPTS} attempts: {last}", request.prompt)))
}

/// Queries `n_a` samples for every prompt of `prompts` about `target`.
/// Geometric kinds are normalized to `- item` bullet lines.
pub fn generate_descriptions(
    target: &str,
    prompts: &PromptSet,
    backend: &dyn GenerativeLanguageBackend,
    cache: &mut KnowledgeCache,
    n_a: usize,
) -> Result<Vec<DescriptionEntry>> {
    if n_a == 0 {
        return Err(Error::Validation("N_a must be at least 1".into()));
    }
    let kind = prompts.kind;
    let mut out = Vec::with_capacity(prompts.len() * n_a);
    for p in 0..prompts.len() {
        for s in 0..n_a {
            let request = GenerationRequest {
                prompt: prompts.fill(p, target),
                target: target.to_string(),
                kind,
                prompt_index: p,
                sample_index: s,
            };
            let geometric = kind.is_geometric();
            let raw = query_cached(backend, cache, &request, |t| {
                if geometric {
                    !parse_bullets(t).is_empty()
                } else {
                    !t.trim().is_empty()
                }
            })?;
            let text = if geometric { to_bullets(&parse_bullets(&raw)) } else { raw.trim().to_string() };
            out.push(DescriptionEntry { prompt_index: p, sample_index: s, text });
        }
    }
    Ok(out)
}

/// Number of descriptions to sample per prompt, keyed by kind.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KnowledgeConfig {
    pub samples_per_prompt: usize,
    pub prompt_sets: Vec<PromptSet>,
    pub seed_templates: Vec<String>,
    pub template_rewrites: usize,
    pub images_per_instance: usize,
    pub similarity_threshold: f64,
}

impl Default for KnowledgeConfig {
    fn default() -> Self {
        Self {
            samples_per_prompt: 10,
            prompt_sets: PromptKind::ALL.iter().map(|k| PromptSet::default_for(*k)).collect(),
            seed_templates: DEFAULT_TEMPLATES.iter().map(|s| s.to_string()).collect(),
            template_rewrites: 2,
            images_per_instance: DEFAULT_IMAGE_COUNT,
            similarity_threshold: DEFAULT_SIMILARITY_THRESHOLD,
        }
    }
}

impl KnowledgeConfig {
    pub fn prompt_set(&self, kind: PromptKind) -> Result<&PromptSet> {
        self.prompt_sets
            .iter()
            .find(|p| p.kind == kind)
            .ok_or_else(|| Error::Config(format!("no prompt set for {kind}")))
    }
}

/// Generates every description kind for the given classes and tasks.
pub fn build_bank(
    classes: &[String],
    tasks: &[String],
    config: &KnowledgeConfig,
    backend: &dyn GenerativeLanguageBackend,
    cache: &mut KnowledgeCache,
) -> Result<DescriptionBank> {
    let mut bank = DescriptionBank::default();
    for c in classes {
        for kind in [PromptKind::O2O, PromptKind::O2T, PromptKind::O2P] {
            let entries =
                generate_descriptions(c, config.prompt_set(kind)?, backend, cache, config.samples_per_prompt)?;
            bank.insert(Target::Class(c), kind, entries)?;
        }
    }
    for t in tasks {
        for kind in [PromptKind::T2T, PromptKind::T2O, PromptKind::T2P] {
            let entries =
                generate_descriptions(t, config.prompt_set(kind)?, backend, cache, config.samples_per_prompt)?;
            bank.insert(Target::Task(t), kind, entries)?;
        }
    }
    Ok(bank)
}

/// Joins one seeded random description per prompt kind, truncated to at most
/// six sentences.
pub fn assemble_paragraph(bank: &DescriptionBank, target: Target<'_>, aspect: Aspect, seed: u64) -> Result<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut parts = Vec::new();
    for &kind in target.kinds(aspect) {
        let entries = bank.entries(target, kind);
        let chosen = entries
            .choose(&mut rng)
            .ok_or_else(|| Error::Validation(format!("no {kind} descriptions for {}", target.id())))?;
        parts.push(chosen.text.as_str());
    }
    let sep = if aspect == Aspect::Geometric { "\n" } else { " " };
    let paragraph = parts.join(sep);
    let sentences = split_sentences(&paragraph);
    if sentences.len() <= MAX_PARAGRAPH_SENTENCES {
        return Ok(paragraph);
    }
    Ok(sentences[..MAX_PARAGRAPH_SENTENCES].join(sep))
}

// ---------------------------------------------------------------------------
// instruction templates

pub const OBJ_SLOT: &str = "[obj]";
pub const TASK_SLOT: &str = "[task]";

pub const DEFAULT_TEMPLATES: [&str; 5] = [
    "Use the [obj] to [task]",
    "Grasp the [obj] to [task]",
    "Pick up the [obj] so that you can [task]",
    "Hold the [obj] in a way that lets you [task]",
    "Give me a grasp on the [obj] suitable to [task]",
];

pub fn valid_template(t: &str) -> bool {
    t.matches(OBJ_SLOT).count() == 1 && t.matches(TASK_SLOT).count() == 1
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct InstructionTemplateSet {
    templates: Vec<String>,
}

impl TryFrom<Vec<String>> for InstructionTemplateSet {
    type Error = Error;

    fn try_from(v: Vec<String>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<InstructionTemplateSet> for Vec<String> {
    fn from(s: InstructionTemplateSet) -> Self {
        s.templates
    }
}

impl InstructionTemplateSet {
    pub fn new(templates: Vec<String>) -> Result<Self> {
        if templates.is_empty() {
            return Err(Error::Validation("instruction template set is empty".into()));
        }
        if let Some(t) = templates.iter().find(|t| !valid_template(t)) {
            return Err(Error::Validation(format!("template {t:?} must contain [obj] and [task] exactly once")));
        }
        Ok(Self { templates })
    }

    pub fn templates(&self) -> &[String] {
        &self.templates
    }

    pub fn len(&self) -> usize {
        self.templates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.templates.is_empty()
    }

    pub fn instantiate(&self, class: &str, task: &str, seed: u64) -> String {
        let i = ChaCha8Rng::seed_from_u64(seed).random_range(0..self.templates.len());
        self.templates[i].replace(OBJ_SLOT, class).replace(TASK_SLOT, task)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        read_json(path)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AugmentOutcome {
    pub templates: InstructionTemplateSet,
    pub rejected: usize,
}

/// Asks the backend for `rewrites` paraphrases of each seed template and keeps
/// the ones that still carry both slots.
pub fn augment_templates(
    seeds: &InstructionTemplateSet,
    backend: &dyn GenerativeLanguageBackend,
    cache: &mut KnowledgeCache,
    prompts: &PromptSet,
    rewrites: usize,
) -> Result<AugmentOutcome> {
    let mut all = seeds.templates.clone();
    let mut rejected = 0;
    for (ti, template) in seeds.templates.iter().enumerate() {
        for p in 0..prompts.len() {
            for s in 0..rewrites {
                let request = GenerationRequest {
                    prompt: prompts.fill(p, template),
                    target: template.clone(),
                    kind: PromptKind::TemplateAugment,
                    prompt_index: ti * prompts.len() + p,
                    sample_index: s,
                };
                let text = query_cached(backend, cache, &request, |t| !t.trim().is_empty())?;
                let text = text.trim().trim_end_matches('.').to_string();
                if !valid_template(&text) {
                    rejected += 1;
                } else if !all.contains(&text) {
                    all.push(text);
                }
            }
        }
    }
    if rejected > 0 {
        warn!("dropped {rejected} template rewrites missing a slot");
    }
    Ok(AugmentOutcome { templates: InstructionTemplateSet::new(all)?, rejected })
}

// ---------------------------------------------------------------------------
// image curation

#[derive(Clone, Debug, PartialEq)]
pub struct ImageCandidate {
    pub image: ImageData,
    pub confidence: f64,
}

pub trait ImageSource {
    fn originals(&self, instance: &ObjectInstanceRecord) -> Result<Vec<ImageData>>;
    fn candidates(&self, instance: &ObjectInstanceRecord) -> Result<Vec<ImageCandidate>>;
}

/// Reads originals from the dataset tree and retrieval candidates from
/// `root/retrieval/<class>/candidates.json`.
pub struct LocalImageSource {
    root: PathBuf,
}

#[derive(Serialize, Deserialize)]
pub struct CandidateRecord {
    pub file: String,
    pub confidence: f64,
}

impl LocalImageSource {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }
}

/// Image ids are paths relative to the dataset root, without extension.
pub fn original_image_id(instance: &str, image: &str) -> String {
    format!("instances/{instance}/images/{image}")
}

pub fn image_id_path(root: &Path, id: &str) -> PathBuf {
    root.join(format!("{id}.png"))
}

impl ImageSource for LocalImageSource {
    fn originals(&self, instance: &ObjectInstanceRecord) -> Result<Vec<ImageData>> {
        instance
            .image_ids
            .iter()
            .map(|img| {
                ImageData::read(
                    original_image_id(&instance.id, img),
                    &DatasetIndex::image_path(&self.root, &instance.id, img),
                )
            })
            .collect()
    }

    fn candidates(&self, instance: &ObjectInstanceRecord) -> Result<Vec<ImageCandidate>> {
        let dir = self.root.join("retrieval").join(&instance.class_id);
        let listing = dir.join("candidates.json");
        if !listing.is_file() {
            return Ok(Vec::new());
        }
        let records: Vec<CandidateRecord> = read_json(&listing)?;
        records
            .into_iter()
            .map(|r| {
                let stem = r.file.trim_end_matches(".png");
                let id = format!("retrieval/{}/{stem}", instance.class_id);
                Ok(ImageCandidate { image: ImageData::read(id, &dir.join(&r.file))?, confidence: r.confidence })
            })
            .collect()
    }
}

fn flat_embedding(embedder: &dyn MultimodalEmbedder, image: &ImageData) -> Result<Vec<f64>> {
    Ok(embedder.embed_geo_image(image)?.cells.into_vec())
}

/// Selects exactly `n_i` image ids: every original first, then candidates by
/// descending confidence. A candidate is dropped when its flattened feature
/// map has cosine above `threshold` with an original or with any candidate of
/// higher confidence, so lowering the threshold can only shrink the selection.
/// Short selections are padded by cycling through the originals.
pub fn curate_images(
    instance: &ObjectInstanceRecord,
    source: &dyn ImageSource,
    embedder: &dyn MultimodalEmbedder,
    n_i: usize,
    threshold: f64,
) -> Result<Vec<String>> {
    let originals = source.originals(instance)?;
    if originals.is_empty() {
        return Err(Error::Validation(format!("instance {} has no original images", instance.id)));
    }
    let mut candidates = source.candidates(instance)?;
    if candidates.is_empty() {
        warn!("no retrieval candidates for {}; resampling originals", instance.id);
    }
    candidates.sort_by(|a, b| b.confidence.total_cmp(&a.confidence));

    let mut reference: Vec<Vec<f64>> = originals.iter().map(|o| flat_embedding(embedder, o)).collect::<Result<_>>()?;
    let mut selected: Vec<String> = originals.iter().map(|o| o.id.clone()).collect();
    selected.truncate(n_i);
    for cand in &candidates {
        let emb = flat_embedding(embedder, &cand.image)?;
        let duplicate = reference.iter().any(|r| cosine(r, &emb) > threshold);
        if !duplicate && selected.len() < n_i {
            selected.push(cand.image.id.clone());
        }
        reference.push(emb);
    }
    let mut k = 0;
    while selected.len() < n_i {
        selected.push(originals[k % originals.len()].id.clone());
        k += 1;
    }
    Ok(selected)
}
