//! Foundation-model roles (generative language, semantic text embedding,
//! multimodal image/text embedding) and their deterministic offline fixtures.
//!
//! Fixtures are pure functions of their input and seed. Every float they emit
//! is built from 53-bit integer hashes, so outputs are identical across runs
//! and platforms.

use std::collections::BTreeMap;
use std::path::Path;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::knowledge::PromptKind;
use crate::nn::Mat;

pub const CREDENTIALS_ENV: &str = "TOGKIT_LLM_KEY";

/// Token-level text embedding, zero-padded to a fixed length.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenSequenceEmbedding {
    /// `T × d`; rows past the real tokens are zero.
    pub vectors: Mat,
    /// `true` marks a real token.
    pub mask: Vec<bool>,
}

impl TokenSequenceEmbedding {
    pub fn len(&self) -> usize {
        self.mask.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mask.is_empty()
    }

    pub fn real_tokens(&self) -> usize {
        self.mask.iter().filter(|m| **m).count()
    }

    /// Mean of the unmasked rows.
    pub fn mean_vector(&self) -> Vec<f64> {
        let n = self.real_tokens().max(1) as f64;
        let mut out = vec![0.0; self.vectors.cols()];
        for (r, keep) in self.mask.iter().enumerate() {
            if *keep {
                out.iter_mut().zip(self.vectors.row(r)).for_each(|(o, v)| *o += v / n);
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TextVectorEmbedding {
    pub vector: Vec<f64>,
}

/// `h × w` grid of feature vectors, stored row-major as an `(h·w) × d` matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageFeatureMap {
    pub height: usize,
    pub width: usize,
    pub cells: Mat,
}

impl ImageFeatureMap {
    pub fn cell(&self, r: usize, c: usize) -> &[f64] {
        self.cells.row(r * self.width + c)
    }

    pub fn mean_vector(&self) -> Vec<f64> {
        let n = self.cells.rows() as f64;
        self.cells.sum_rows().data().iter().map(|v| v / n).collect()
    }
}

/// An image handed to a multimodal backend: an id for diagnostics plus encoded bytes.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageData {
    pub id: String,
    pub bytes: Vec<u8>,
}

impl ImageData {
    pub fn read(id: impl Into<String>, path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Ok(Self { id: id.into(), bytes })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GenerationRequest {
    pub prompt: String,
    /// The class or task the prompt is about (a template for template augmentation).
    pub target: String,
    pub kind: PromptKind,
    pub prompt_index: usize,
    pub sample_index: usize,
}

pub trait GenerativeLanguageBackend {
    fn id(&self) -> &str;
    fn generate(&self, request: &GenerationRequest) -> Result<String>;
}

pub trait SemanticTextEmbedder {
    fn id(&self) -> &str;
    fn dim(&self) -> usize;
    /// Embeds `text` into at most `max_tokens` rows, zero-padded to exactly `max_tokens`.
    fn embed_semantic(&self, text: &str, max_tokens: usize) -> Result<TokenSequenceEmbedding>;
}

pub trait MultimodalEmbedder {
    fn id(&self) -> &str;
    fn text_dim(&self) -> usize;
    fn embed_geo_text(&self, text: &str) -> Result<TextVectorEmbedding>;
    fn embed_geo_image(&self, image: &ImageData) -> Result<ImageFeatureMap>;
}

/// The value of a `backend.*` config key.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum BackendChoice {
    Fixture,
    Hosted(String),
}

impl std::str::FromStr for BackendChoice {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fixture" => Ok(BackendChoice::Fixture),
            _ => match s.strip_prefix("hosted:") {
                Some(name) if !name.is_empty() => Ok(BackendChoice::Hosted(name.to_string())),
                _ => Err(Error::Config(format!("unknown backend {s:?} (expected `fixture` or `hosted:<name>`)"))),
            },
        }
    }
}

/// Resolves a hosted backend. This build ships no network adapters; the
/// credential is still checked first so misconfiguration is reported precisely.
pub fn hosted_unavailable(name: &str) -> Error {
    match std::env::var(CREDENTIALS_ENV) {
        Ok(_) => Error::Backend(format!("hosted backend {name:?} is not available in this build")),
        Err(_) => Error::Backend(format!("hosted backend {name:?} requires credentials in {CREDENTIALS_ENV}")),
    }
}

// ---------------------------------------------------------------------------
// hashing

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0100_0000_01b3;

pub fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(FNV_OFFSET, |h, b| (h ^ *b as u64).wrapping_mul(FNV_PRIME))
}

#[inline]
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Uniform value in `[-1, 1)` from the top 53 bits of a hash.
#[inline]
fn unit_from_hash(h: u64) -> f64 {
    ((h >> 11) as f64) * (1.0 / (1u64 << 52) as f64) - 1.0
}

/// Deterministic pseudo-random vector with entries in `[-s, s)`, `s = √(3/dim)`,
/// so its expected L2 norm is 1.
pub fn hashed_vector(key: u64, dim: usize) -> Vec<f64> {
    let s = (3.0 / dim as f64).sqrt();
    (0..dim as u64).map(|i| s * unit_from_hash(splitmix64(key ^ splitmix64(i.wrapping_add(1))))).collect()
}

pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !(c.is_alphanumeric() || c == '-' || c == '_' || c == '\''))
        .filter(|t| !t.is_empty())
        .map(|t| t.to_lowercase())
        .collect()
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let d: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        d / (na * nb)
    }
}

fn normalized(mut v: Vec<f64>) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
    v
}

// ---------------------------------------------------------------------------
// semantic fixture

/// Each token maps to a hashed vector; a text is its token vectors in order.
#[derive(Clone, Debug)]
pub struct FixtureSemanticEmbedder {
    dim: usize,
    seed: u64,
}

impl FixtureSemanticEmbedder {
    pub fn new(dim: usize, seed: u64) -> Self {
        Self { dim, seed }
    }

    pub fn token_vector(&self, token: &str) -> Vec<f64> {
        hashed_vector(splitmix64(self.seed) ^ fnv1a(token.as_bytes()), self.dim)
    }
}

impl SemanticTextEmbedder for FixtureSemanticEmbedder {
    fn id(&self) -> &str {
        "fixture-semantic"
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn embed_semantic(&self, text: &str, max_tokens: usize) -> Result<TokenSequenceEmbedding> {
        let mut tokens = tokenize(text);
        if tokens.is_empty() {
            return Err(Error::Validation("text is empty after tokenization".into()));
        }
        if tokens.len() > max_tokens {
            warn!("text of {} tokens truncated to {max_tokens}", tokens.len());
            tokens.truncate(max_tokens);
        }
        let mut vectors = Mat::zeros(max_tokens, self.dim);
        for (r, t) in tokens.iter().enumerate() {
            vectors.row_mut(r).copy_from_slice(&self.token_vector(t));
        }
        let mask = (0..max_tokens).map(|r| r < tokens.len()).collect();
        Ok(TokenSequenceEmbedding { vectors, mask })
    }
}

// ---------------------------------------------------------------------------
// multimodal fixture

/// Fixture images are 8-bit grayscale PNGs whose first eight pixels carry a
/// little-endian `u64` class-signal tag.
pub const IMAGE_TAG_BYTES: usize = 8;

#[derive(Clone, Debug)]
pub struct FixtureMultimodalEmbedder {
    dim: usize,
    grid: (usize, usize),
    seed: u64,
}

impl FixtureMultimodalEmbedder {
    pub fn new(dim: usize, grid: (usize, usize), seed: u64) -> Self {
        Self { dim, grid, seed }
    }

    pub fn grid(&self) -> (usize, usize) {
        self.grid
    }

    fn signal_vector(&self, tag: u64) -> Vec<f64> {
        if tag == 0 {
            return vec![0.0; self.dim];
        }
        hashed_vector(splitmix64(self.seed ^ 0x5157_4e41_4c00_0000) ^ splitmix64(tag), self.dim)
    }
}

impl MultimodalEmbedder for FixtureMultimodalEmbedder {
    fn id(&self) -> &str {
        "fixture-multimodal"
    }

    fn text_dim(&self) -> usize {
        self.dim
    }

    /// L2-normalized bag of hashed token vectors.
    fn embed_geo_text(&self, text: &str) -> Result<TextVectorEmbedding> {
        let tokens = tokenize(text);
        if tokens.is_empty() {
            return Err(Error::Validation("text is empty after tokenization".into()));
        }
        let mut acc = vec![0.0; self.dim];
        let key = splitmix64(self.seed ^ 0x7465_7874);
        for t in &tokens {
            acc.iter_mut().zip(hashed_vector(key ^ fnv1a(t.as_bytes()), self.dim)).for_each(|(a, v)| *a += v);
        }
        Ok(TextVectorEmbedding { vector: normalized(acc) })
    }

    fn embed_geo_image(&self, image: &ImageData) -> Result<ImageFeatureMap> {
        let pixels =
            decode_gray_png(&image.bytes).map_err(|e| Error::Backend(format!("unreadable image {}: {e}", image.id)))?;
        let tag = read_tag(&pixels.data);
        let content = fnv1a(&pixels.data);
        let signal = self.signal_vector(tag);
        let (h, w) = self.grid;
        let mut cells = Mat::zeros(h * w, self.dim);
        for r in 0..h {
            for c in 0..w {
                let noise =
                    hashed_vector(splitmix64(content ^ self.seed) ^ splitmix64(((r << 16) | c) as u64 + 1), self.dim);
                let row = cells.row_mut(r * w + c);
                for k in 0..self.dim {
                    row[k] = signal[k] + 0.5 * noise[k];
                }
            }
        }
        Ok(ImageFeatureMap { height: h, width: w, cells })
    }
}

pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

pub fn decode_gray_png(bytes: &[u8]) -> std::result::Result<GrayImage, String> {
    let decoder = png::Decoder::new(std::io::Cursor::new(bytes));
    let mut reader = decoder.read_info().map_err(|e| e.to_string())?;
    let mut buf = vec![0; reader.output_buffer_size().ok_or("image too large")?];
    let info = reader.next_frame(&mut buf).map_err(|e| e.to_string())?;
    if info.color_type != png::ColorType::Grayscale || info.bit_depth != png::BitDepth::Eight {
        return Err(format!("expected 8-bit grayscale, found {:?} {:?}", info.color_type, info.bit_depth));
    }
    buf.truncate(info.buffer_size());
    Ok(GrayImage { width: info.width as usize, height: info.height as usize, data: buf })
}

pub fn encode_gray_png(width: usize, height: usize, data: &[u8]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, width as u32, height as u32);
        enc.set_color(png::ColorType::Grayscale);
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc.write_header().map_err(|e| Error::Backend(e.to_string()))?;
        writer.write_image_data(data).map_err(|e| Error::Backend(e.to_string()))?;
    }
    Ok(out)
}

/// Writes `tag` into the first pixels of a grayscale buffer.
pub fn write_tag(pixels: &mut [u8], tag: u64) {
    pixels[..IMAGE_TAG_BYTES].copy_from_slice(&tag.to_le_bytes());
}

pub fn read_tag(pixels: &[u8]) -> u64 {
    if pixels.len() < IMAGE_TAG_BYTES {
        return 0;
    }
    let mut b = [0u8; 8];
    b.copy_from_slice(&pixels[..IMAGE_TAG_BYTES]);
    u64::from_le_bytes(b)
}

// ---------------------------------------------------------------------------
// generative fixture

/// Corpus of canned responses keyed by (target, prompt kind).
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FixtureCorpus {
    pub entries: BTreeMap<String, BTreeMap<PromptKind, Vec<String>>>,
}

impl FixtureCorpus {
    pub fn insert(&mut self, target: &str, kind: PromptKind, texts: Vec<String>) {
        self.entries.entry(target.to_lowercase()).or_default().insert(kind, texts);
    }

    pub fn get(&self, target: &str, kind: PromptKind) -> Option<&[String]> {
        self.entries.get(&target.to_lowercase()).and_then(|m| m.get(&kind)).map(Vec::as_slice)
    }

    pub fn merge(&mut self, other: FixtureCorpus) {
        for (target, kinds) in other.entries {
            self.entries.entry(target).or_default().extend(kinds);
        }
    }

    /// Hand-written entries for everyday objects and tasks.
    pub fn builtin() -> Self {
        let mut c = Self::default();
        c.insert(
            "mug",
            PromptKind::O2O,
            vec![
                "Objects such as teacups, jars, glasses, and cylindrical vases have similar geometries to a mug."
                    .into(),
                "Cups, tumblers and beakers serve a similar drinking function to a mug.".into(),
            ],
        );
        c.insert(
            "mug",
            PromptKind::O2T,
            vec!["A mug is a typically cylindrical household object with a handle, used primarily for drinking hot beverages, such as coffee, tea, or hot chocolate.".into()],
        );
        c.insert(
            "mug",
            PromptKind::O2P,
            vec!["- cylindrical body\n- handle\n- circular base\n- outer glaze or design".into()],
        );
        c.insert(
            "sweep",
            PromptKind::T2T,
            vec![
                "Verbs such as clear, clean, brush, wipe, or dust achieve similar effects to 'sweep an object'.".into()
            ],
        );
        c.insert(
            "sweep",
            PromptKind::T2O,
            vec!["Brooms, dustpans, vacuum cleaners, and sweepers are household objects that afford the function of sweeping.".into()],
        );
        c.insert("sweep", PromptKind::T2P, vec!["- long cylindrical handle\n- fan-shaped bundle of bristles".into()]);
        c
    }
}

/// Canned-response language model. Unknown targets get filler text derived
/// from a salted hash of the request.
#[derive(Clone, Debug)]
pub struct FixtureLanguageModel {
    corpus: FixtureCorpus,
}

const FILLER_WORDS: [&str; 16] = [
    "sturdy", "compact", "curved", "hollow", "slender", "rigid", "smooth", "textured", "wide", "narrow", "rounded",
    "angular", "light", "heavy", "flat", "tapered",
];

const REWRITE_PATTERNS: [&str; 8] = [
    "[task] with the [obj]",
    "grab the [obj] so you can [task]",
    "ensure you have a [task]-friendly grip on the [obj]",
    "I want to [task], hand me the [obj]",
    "pick up the [obj]",
    "the [obj] is needed to [task]",
    "hold the [obj] and [task]",
    "grasp the [obj] in order to [task]",
];

impl FixtureLanguageModel {
    pub fn new(corpus: FixtureCorpus) -> Self {
        Self { corpus }
    }

    pub fn with_builtin() -> Self {
        Self::new(FixtureCorpus::builtin())
    }

    pub fn corpus(&self) -> &FixtureCorpus {
        &self.corpus
    }

    fn filler(&self, req: &GenerationRequest) -> String {
        let h = splitmix64(fnv1a(req.target.as_bytes()) ^ splitmix64(req.kind as u64 + 1));
        let pick = |k: u64| FILLER_WORDS[(splitmix64(h ^ k) % FILLER_WORDS.len() as u64) as usize];
        let salt = req.prompt_index as u64 * 31 + req.sample_index as u64;
        let (a, b) = (pick(salt * 2 + 1), pick(salt * 2 + 2));
        if req.kind.is_geometric() {
            format!("- {a} body\n- {b} grip region")
        } else {
            format!("The {} is a household item with {a} and {b} features.", req.target)
        }
    }
}

impl GenerativeLanguageBackend for FixtureLanguageModel {
    fn id(&self) -> &str {
        "fixture-llm"
    }

    fn generate(&self, req: &GenerationRequest) -> Result<String> {
        if req.kind == PromptKind::TemplateAugment {
            let i = (req.prompt_index + req.sample_index) % REWRITE_PATTERNS.len();
            return Ok(REWRITE_PATTERNS[i].to_string());
        }
        match self.corpus.get(&req.target, req.kind) {
            Some(texts) if !texts.is_empty() => {
                let i = (req.prompt_index * 7 + req.sample_index) % texts.len();
                Ok(texts[i].clone())
            }
            _ => Ok(self.filler(req)),
        }
    }
}
