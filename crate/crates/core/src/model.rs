//! Parameter layout of the encoders and evaluator, initialization and
//! checkpoint I/O.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::nn::init::orthogonal;
use crate::nn::{Graph, Mat, ParamId, ParamStore, Var};

#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let w = g.param(self.weight);
        let y = g.matmul(x, w);
        match self.bias {
            Some(b) => {
                let b = g.param(b);
                g.add_row(y, b)
            }
            None => y,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let (gain, bias) = (g.param(self.gain), g.param(self.bias));
        g.layer_norm(x, gain, bias)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Attention {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
    pub heads: usize,
}

/// Semantic knowledge layer: cross-attention, norm, feed-forward, norm.
#[derive(Clone, Copy, Debug)]
pub struct SemanticLayer {
    pub attn: Attention,
    pub ln1: LayerNorm,
    pub ffn1: Linear,
    pub ffn2: Linear,
    pub ln2: LayerNorm,
    /// Replaces `attn` in concatenation fusion.
    pub concat: Linear,
}

/// Geometric knowledge layer: cross-attention, norm, self-attention, norm.
#[derive(Clone, Copy, Debug)]
pub struct GeometricLayer {
    pub cross: Attention,
    pub ln1: LayerNorm,
    pub self_attn: Attention,
    pub ln2: LayerNorm,
    pub concat: Linear,
}

#[derive(Clone, Debug)]
pub struct EncoderParams {
    /// `[stage][scale][layer]`
    pub sa: Vec<Vec<Vec<Linear>>>,
    pub point_mlp: Linear,
    pub sem_proj: Linear,
    pub geo_img_proj: Linear,
    pub geo_text_proj: Linear,
}

#[derive(Clone, Debug)]
pub struct EvaluatorParams {
    pub positions: Option<ParamId>,
    pub sem_c: SemanticLayer,
    pub sem_t: SemanticLayer,
    pub sem_pool: Linear,
    pub geo_c: GeometricLayer,
    pub geo_t: GeometricLayer,
    pub geo_sa: Vec<Linear>,
    pub head1: Linear,
    pub head2: Linear,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub encoder: EncoderParams,
    pub evaluator: EvaluatorParams,
}

struct Builder<'a> {
    store: &'a mut ParamStore,
    rng: ChaCha8Rng,
    gain: f64,
}

impl Builder<'_> {
    fn weight(&mut self, name: &str, rows: usize, cols: usize) -> ParamId {
        let w = orthogonal(&mut self.rng, rows, cols, self.gain);
        self.store.insert(name, w)
    }

    fn zeros(&mut self, name: &str, rows: usize, cols: usize) -> ParamId {
        self.store.insert(name, Mat::zeros(rows, cols))
    }

    fn linear(&mut self, name: &str, rows: usize, cols: usize, bias: bool) -> Linear {
        let weight = self.weight(&format!("{name}.weight"), rows, cols);
        let bias = bias.then(|| self.zeros(&format!("{name}.bias"), 1, cols));
        Linear { weight, bias }
    }

    fn zero_linear(&mut self, name: &str, rows: usize, cols: usize, bias: bool) -> Linear {
        let weight = self.zeros(&format!("{name}.weight"), rows, cols);
        let bias = bias.then(|| self.zeros(&format!("{name}.bias"), 1, cols));
        Linear { weight, bias }
    }

    fn layer_norm(&mut self, name: &str, dim: usize) -> LayerNorm {
        let gain = self.store.insert(format!("{name}.gain"), Mat::filled(1, dim, 1.0));
        let bias = self.zeros(&format!("{name}.bias"), 1, dim);
        LayerNorm { gain, bias }
    }

    fn attention(&mut self, name: &str, query_dim: usize, key_dim: usize, heads: usize) -> Attention {
        Attention {
            wq: self.weight(&format!("{name}.wq"), query_dim, query_dim),
            wk: self.weight(&format!("{name}.wk"), key_dim, query_dim),
            wv: self.weight(&format!("{name}.wv"), key_dim, query_dim),
            wo: self.zeros(&format!("{name}.wo"), query_dim, query_dim),
            heads,
        }
    }

    fn semantic_layer(&mut self, name: &str, c: &ModelConfig) -> SemanticLayer {
        let d = c.sem_width;
        let inner = d * c.ffn_multiplier;
        SemanticLayer {
            attn: self.attention(&format!("{name}.attn"), d, d, c.sem_heads),
            ln1: self.layer_norm(&format!("{name}.ln1"), d),
            ffn1: self.linear(&format!("{name}.ffn1"), d, inner, true),
            ffn2: self.linear(&format!("{name}.ffn2"), inner, d, true),
            ln2: self.layer_norm(&format!("{name}.ln2"), d),
            concat: self.zero_linear(&format!("{name}.concat"), 2 * d, d, false),
        }
    }

    fn geometric_layer(&mut self, name: &str, c: &ModelConfig) -> GeometricLayer {
        let d = c.geo_width;
        let k = 2 * c.geo_knowledge_dim;
        GeometricLayer {
            cross: self.attention(&format!("{name}.cross"), d, k, c.geo_heads),
            ln1: self.layer_norm(&format!("{name}.ln1"), d),
            self_attn: self.attention(&format!("{name}.self"), d, d, c.geo_heads),
            ln2: self.layer_norm(&format!("{name}.ln2"), d),
            concat: self.zero_linear(&format!("{name}.concat"), d + k, d, false),
        }
    }
}

impl Model {
    /// Builds and initializes every tensor. Linear layers are orthogonal with
    /// gain `config.init_gain`; attention output projections, fusion
    /// projections and the last head layer start at zero.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let mut b = Builder { store: &mut params, rng: ChaCha8Rng::seed_from_u64(seed), gain: config.init_gain };
        let c = &config;

        let mut sa = Vec::new();
        let mut in_dim = 1;
        for (s, stage) in c.sa_stages.iter().enumerate() {
            let mut scales = Vec::new();
            for (k, mlp) in stage.mlps.iter().enumerate() {
                let mut layers = Vec::new();
                let mut prev = in_dim + 3;
                for (l, &width) in mlp.iter().enumerate() {
                    layers.push(b.linear(&format!("enc.sa{s}.scale{k}.mlp{l}"), prev, width, true));
                    prev = width;
                }
                scales.push(layers);
            }
            sa.push(scales);
            in_dim = stage.out_dim();
        }
        let encoder = EncoderParams {
            sa,
            point_mlp: b.linear("enc.point_mlp", c.point_feature_dim(), c.geo_width, false),
            sem_proj: b.linear("enc.sem_proj", c.sem_raw_dim, c.sem_width, false),
            geo_img_proj: b.linear("enc.geo_img_proj", c.geo_raw_dim, c.geo_knowledge_dim, false),
            geo_text_proj: b.linear("enc.geo_text_proj", c.geo_raw_dim, c.geo_knowledge_dim, false),
        };

        let positions = c.learned_positions.then(|| b.zeros("eval.positions", c.instruction_tokens, c.sem_width));
        let sem_c = b.semantic_layer("eval.sem_c", c);
        let sem_t = b.semantic_layer("eval.sem_t", c);
        let sem_pool = b.linear("eval.sem_pool", c.sem_width, c.sem_pooled_dim, false);
        let geo_c = b.geometric_layer("eval.geo_c", c);
        let geo_t = b.geometric_layer("eval.geo_t", c);
        let mut geo_sa = Vec::new();
        let mut prev = c.geo_width + 3;
        for (l, &width) in c.global_sa_mlp.iter().enumerate() {
            geo_sa.push(b.linear(&format!("eval.geo_sa.mlp{l}"), prev, width, true));
            prev = width;
        }
        let head_in = c.geo_embedding_dim() + c.sem_pooled_dim;
        let head1 = b.linear("eval.head.fc1", head_in, c.head_hidden, true);
        let head2 = b.zero_linear("eval.head.fc2", c.head_hidden, 1, true);
        let evaluator = EvaluatorParams { positions, sem_c, sem_t, sem_pool, geo_c, geo_t, geo_sa, head1, head2 };
        Ok(Self { config, params, encoder, evaluator })
    }

    /// Overwrites every tensor with dense random values (including the
    /// zero-initialized ones). Used by gradient checks, where exact zeros would
    /// hide whole subgraphs.
    pub fn randomize(&mut self, seed: u64, scale: f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ids: Vec<ParamId> = self.params.ids().collect();
        for id in ids {
            let is_gain = self.params.name(id).ends_with(".gain");
            for v in self.params.get_mut(id).data_mut() {
                let r: f64 = rng.random_range(-1.0..1.0);
                *v = if is_gain { 1.0 + 0.2 * r } else { scale * r };
            }
        }
    }

    pub fn save(&self, dir: &Path, extra: serde_json::Value) -> Result<()> {
        let meta = json!({ "model": self.config, "extra": extra });
        self.params.save(dir, meta)
    }

    /// Loads a checkpoint written by [`Model::save`], returning the extra metadata.
    pub fn load(dir: &Path) -> Result<(Self, serde_json::Value)> {
        let (store, meta) = ParamStore::load(dir)?;
        let manifest = dir.join("manifest.json");
        let config: ModelConfig = serde_json::from_value(meta.get("model").cloned().unwrap_or_default())
            .map_err(|e| Error::invalid(&manifest, format!("bad model config: {e}")))?;
        let mut model = Model::new(config, 0)?;
        model.params.copy_from(&store)?;
        Ok((model, meta.get("extra").cloned().unwrap_or_default()))
    }
}
