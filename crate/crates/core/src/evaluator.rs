//! The task-oriented grasp evaluator: a semantic branch that fuses description
//! knowledge into instruction tokens, a geometric branch that fuses
//! image-conditioned knowledge into point features, and a scoring head.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::backends::{ImageFeatureMap, TextVectorEmbedding, TokenSequenceEmbedding};
use crate::encoders::{encode_object_grasp, project_image, project_sequence, project_text_vector};
use crate::error::{Error, Result};
use crate::geometry::{ControlPointSet, Point3, PointCloud};
use crate::model::{Attention, GeometricLayer, Model, SemanticLayer};
use crate::nn::{Graph, Mat, Var};

/// Which parts of the evaluator are active.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EvalMode {
    #[default]
    Full,
    /// Semantic knowledge only; the geometric branch pools raw point features.
    SemanticOnly,
    /// Geometric knowledge only; the semantic branch pools the bare instruction.
    GeometricOnly,
    /// No knowledge in either branch.
    Vanilla,
    /// Attention fusion replaced by concatenation plus a linear layer.
    ConcatFusion,
    /// Both branches, class knowledge layers only.
    ObjectKnowledgeOnly,
    /// Both branches, task knowledge layers only.
    TaskKnowledgeOnly,
}

impl EvalMode {
    pub const ALL: [EvalMode; 7] = [
        EvalMode::Full,
        EvalMode::SemanticOnly,
        EvalMode::GeometricOnly,
        EvalMode::Vanilla,
        EvalMode::ConcatFusion,
        EvalMode::ObjectKnowledgeOnly,
        EvalMode::TaskKnowledgeOnly,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            EvalMode::Full => "full",
            EvalMode::SemanticOnly => "semantic-only",
            EvalMode::GeometricOnly => "geometric-only",
            EvalMode::Vanilla => "vanilla",
            EvalMode::ConcatFusion => "concat-fusion",
            EvalMode::ObjectKnowledgeOnly => "object-knowledge-only",
            EvalMode::TaskKnowledgeOnly => "task-knowledge-only",
        }
    }

    pub fn semantic_knowledge(self) -> bool {
        !matches!(self, EvalMode::GeometricOnly | EvalMode::Vanilla)
    }

    pub fn geometric_knowledge(self) -> bool {
        !matches!(self, EvalMode::SemanticOnly | EvalMode::Vanilla)
    }

    pub fn object_knowledge(self) -> bool {
        self != EvalMode::TaskKnowledgeOnly
    }

    pub fn task_knowledge(self) -> bool {
        self != EvalMode::ObjectKnowledgeOnly
    }

    pub fn concat(self) -> bool {
        self == EvalMode::ConcatFusion
    }
}

impl fmt::Display for EvalMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for EvalMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        EvalMode::ALL.into_iter().find(|m| m.as_str() == s).ok_or_else(|| Error::Config(format!("unknown mode {s:?}")))
    }
}

/// Everything one forward pass consumes: the downsampled cloud, the grasp's
/// control points and the raw backend embeddings. Projection into the
/// evaluator's widths happens inside the forward pass so it can be trained.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureBundle {
    pub cloud: PointCloud,
    pub control_points: ControlPointSet,
    pub instruction: TokenSequenceEmbedding,
    pub class_semantic: Option<TokenSequenceEmbedding>,
    pub task_semantic: Option<TokenSequenceEmbedding>,
    pub image: Option<ImageFeatureMap>,
    pub class_geometric: Option<TextVectorEmbedding>,
    pub task_geometric: Option<TextVectorEmbedding>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScoreResult {
    pub score: f64,
    pub logit: f64,
    pub geo_embedding: Vec<f64>,
    pub sem_embedding: Vec<f64>,
}

pub struct AttentionOutput {
    pub output: Var,
    /// One `queries × keys` weight matrix per head.
    pub weights: Vec<Var>,
}

/// Multi-head scaled dot-product attention. Masked keys get exactly zero weight.
pub fn attention(
    g: &mut Graph,
    p: &Attention,
    query: Var,
    keys: Var,
    key_mask: Option<&[bool]>,
) -> Result<AttentionOutput> {
    let n_keys = g.value(keys).rows();
    if let Some(m) = key_mask {
        if m.len() != n_keys {
            return Err(Error::Shape(format!("mask has {} entries for {n_keys} keys", m.len())));
        }
        if !m.iter().any(|b| *b) {
            return Err(Error::Validation("every key is masked; nothing to attend to".into()));
        }
    }
    let (wq, wk, wv, wo) = (g.param(p.wq), g.param(p.wk), g.param(p.wv), g.param(p.wo));
    let d = g.value(wq).cols();
    if p.heads == 0 || !d.is_multiple_of(p.heads) {
        return Err(Error::Shape(format!("width {d} is not divisible by {} heads", p.heads)));
    }
    let dk = d / p.heads;
    let q = g.matmul(query, wq);
    let k = g.matmul(keys, wk);
    let v = g.matmul(keys, wv);
    let scale = 1.0 / (dk as f64).sqrt();
    let mut heads = Vec::with_capacity(p.heads);
    let mut weights = Vec::with_capacity(p.heads);
    for h in 0..p.heads {
        let (qh, kh, vh) = if p.heads == 1 {
            (q, k, v)
        } else {
            (g.slice_cols(q, h * dk, dk), g.slice_cols(k, h * dk, dk), g.slice_cols(v, h * dk, dk))
        };
        let logits = g.matmul_nt(qh, kh);
        let logits = g.scale(logits, scale);
        let a = g.masked_softmax(logits, key_mask);
        weights.push(a);
        heads.push(g.matmul(a, vh));
    }
    let cat = if heads.len() == 1 { heads[0] } else { g.concat_cols(&heads) };
    Ok(AttentionOutput { output: g.matmul(cat, wo), weights })
}

/// Concatenation fusion: every query row is joined with the mean of the
/// (unmasked) memory rows and mapped back to the query width.
fn concat_fusion(g: &mut Graph, weight: crate::model::Linear, x: Var, memory: Var, mask: Option<&[bool]>) -> Var {
    let rows = g.value(x).rows();
    let pooled = g.masked_mean_rows(memory, mask);
    let tiled = g.broadcast_rows(pooled, rows);
    let cat = g.concat_cols(&[x, tiled]);
    weight.forward(g, cat)
}

/// `LN(x + Fuse(x, mem))` then `LN(· + FFN(·))`.
pub fn semantic_layer(
    g: &mut Graph,
    layer: &SemanticLayer,
    x: Var,
    memory: Var,
    mask: &[bool],
    concat: bool,
) -> Result<(Var, Vec<Var>)> {
    let (fused, weights) = if concat {
        (concat_fusion(g, layer.concat, x, memory, Some(mask)), Vec::new())
    } else {
        let a = attention(g, &layer.attn, x, memory, Some(mask))?;
        (a.output, a.weights)
    };
    let r = g.add(x, fused);
    let x1 = layer.ln1.forward(g, r);
    let h = layer.ffn1.forward(g, x1);
    let h = g.relu(h);
    let f = layer.ffn2.forward(g, h);
    let r = g.add(x1, f);
    Ok((layer.ln2.forward(g, r), weights))
}

/// `LN(x + Fuse(x, mem))` then `LN(· + SelfAttn(·))`.
pub fn geometric_layer(
    g: &mut Graph,
    layer: &GeometricLayer,
    x: Var,
    memory: Var,
    concat: bool,
) -> Result<(Var, Vec<Var>)> {
    let (fused, mut weights) = if concat {
        (concat_fusion(g, layer.concat, x, memory, None), Vec::new())
    } else {
        let a = attention(g, &layer.cross, x, memory, None)?;
        (a.output, a.weights)
    };
    let r = g.add(x, fused);
    let x1 = layer.ln1.forward(g, r);
    let s = attention(g, &layer.self_attn, x1, x1, None)?;
    weights.extend(s.weights);
    let r = g.add(x1, s.output);
    Ok((layer.ln2.forward(g, r), weights))
}

/// Final set-abstraction layer over all remaining points: per-point MLP on
/// `[xyz, features]` followed by a global max-pool.
pub fn global_set_abstraction(g: &mut Graph, model: &Model, positions: &[Point3], features: Var) -> Var {
    let xyz: Vec<f64> = positions.iter().flat_map(|p| p.iter().copied()).collect();
    let xyz = g.constant(Mat::from_vec(positions.len(), 3, xyz));
    let mut h = g.concat_cols(&[xyz, features]);
    for l in &model.evaluator.geo_sa {
        let y = l.forward(g, h);
        h = g.relu(y);
    }
    g.max_pool_groups(h, positions.len())
}

/// Scoring head: `[geo, sem] → fc1 → ReLU → fc2`, returning the logit.
pub fn head_logit(g: &mut Graph, model: &Model, geo: Var, sem: Var) -> Var {
    let cat = g.concat_cols(&[geo, sem]);
    let h = model.evaluator.head1.forward(g, cat);
    let h = g.relu(h);
    model.evaluator.head2.forward(g, h)
}

pub struct ForwardOutput {
    pub score: Var,
    pub logit: Var,
    pub geo: Var,
    pub sem: Var,
    /// Retained attention weights, labelled by layer.
    pub attention: Vec<(&'static str, Vec<Var>)>,
}

fn required<'a, T>(v: &'a Option<T>, what: &str, mode: EvalMode) -> Result<&'a T> {
    v.as_ref().ok_or_else(|| Error::Validation(format!("{mode} mode needs {what} in the feature bundle")))
}

/// Semantic branch on projected instruction tokens (real tokens only).
pub fn semantic_branch(
    g: &mut Graph,
    model: &Model,
    bundle: &FeatureBundle,
    mode: EvalMode,
    attn: &mut Vec<(&'static str, Vec<Var>)>,
) -> Result<Var> {
    let ev = &model.evaluator;
    let mut x = project_sequence(g, model, &bundle.instruction, true)?;
    if let Some(pos) = ev.positions {
        let n = g.value(x).rows();
        let pos = g.param(pos);
        let idx: Vec<usize> = (0..n).collect();
        let pos = g.gather_rows(pos, &idx);
        x = g.add(x, pos);
    }
    if mode.semantic_knowledge() {
        if mode.object_knowledge() {
            let c = required(&bundle.class_semantic, "class semantic descriptions", mode)?;
            let mem = project_sequence(g, model, c, false)?;
            let (y, w) = semantic_layer(g, &ev.sem_c, x, mem, &c.mask, mode.concat())?;
            attn.push(("sem_c", w));
            x = y;
        }
        if mode.task_knowledge() {
            let t = required(&bundle.task_semantic, "task semantic descriptions", mode)?;
            let mem = project_sequence(g, model, t, false)?;
            let (y, w) = semantic_layer(g, &ev.sem_t, x, mem, &t.mask, mode.concat())?;
            attn.push(("sem_t", w));
            x = y;
        }
    }
    let pooled = g.masked_mean_rows(x, None);
    Ok(ev.sem_pool.forward(g, pooled))
}

/// Description vector tiled over every image cell and appended channel-wise.
pub fn condition_image(g: &mut Graph, image: Var, description: Var) -> Var {
    let rows = g.value(image).rows();
    let tiled = g.broadcast_rows(description, rows);
    g.concat_cols(&[image, tiled])
}

pub fn geometric_branch(
    g: &mut Graph,
    model: &Model,
    bundle: &FeatureBundle,
    mode: EvalMode,
    attn: &mut Vec<(&'static str, Vec<Var>)>,
) -> Result<Var> {
    let ev = &model.evaluator;
    let points = encode_object_grasp(g, model, &bundle.cloud, &bundle.control_points)?;
    let mut x = points.projected.features;
    if mode.geometric_knowledge() {
        let image = required(&bundle.image, "an image feature map", mode)?;
        let img = project_image(g, model, image)?;
        if mode.object_knowledge() {
            let c = required(&bundle.class_geometric, "a class geometric description", mode)?;
            let c = project_text_vector(g, model, c)?;
            let mem = condition_image(g, img, c);
            let (y, w) = geometric_layer(g, &ev.geo_c, x, mem, mode.concat())?;
            attn.push(("geo_c", w));
            x = y;
        }
        if mode.task_knowledge() {
            let t = required(&bundle.task_geometric, "a task geometric description", mode)?;
            let t = project_text_vector(g, model, t)?;
            let mem = condition_image(g, img, t);
            let (y, w) = geometric_layer(g, &ev.geo_t, x, mem, mode.concat())?;
            attn.push(("geo_t", w));
            x = y;
        }
    }
    Ok(global_set_abstraction(g, model, &points.projected.positions, x))
}

/// Builds the full forward graph for one grasp.
pub fn tge_forward(g: &mut Graph, model: &Model, bundle: &FeatureBundle, mode: EvalMode) -> Result<ForwardOutput> {
    let mut attention = Vec::new();
    let geo = geometric_branch(g, model, bundle, mode, &mut attention)?;
    let sem = semantic_branch(g, model, bundle, mode, &mut attention)?;
    let logit = head_logit(g, model, geo, sem);
    let score = g.sigmoid(logit);
    Ok(ForwardOutput { score, logit, geo, sem, attention })
}

/// Scores one grasp.
pub fn score(model: &Model, bundle: &FeatureBundle, mode: EvalMode) -> Result<ScoreResult> {
    let mut g = Graph::new(&model.params);
    let out = tge_forward(&mut g, model, bundle, mode)?;
    let s = g.value(out.score).get(0, 0);
    if !s.is_finite() {
        return Err(Error::Numerical("non-finite score".into()));
    }
    Ok(ScoreResult {
        score: s,
        logit: g.value(out.logit).get(0, 0),
        geo_embedding: g.value(out.geo).data().to_vec(),
        sem_embedding: g.value(out.sem).data().to_vec(),
    })
}
