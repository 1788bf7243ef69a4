//! Joint object and grasp point encoding, and the linear projections of
//! backend embeddings into the evaluator's streams.

use crate::backends::{ImageFeatureMap, TextVectorEmbedding, TokenSequenceEmbedding};
use crate::config::{ModelConfig, SaStage};
use crate::error::{Error, Result};
use crate::geometry::{fps_select, sub, ControlPointSet, Point3, PointCloud};
use crate::model::{Linear, Model};
use crate::nn::{Graph, Mat, Var};

/// Per-point features at the `N⁻` surviving positions.
#[derive(Clone, Debug)]
pub struct PointFeatureSet {
    pub positions: Vec<Point3>,
    pub features: Var,
}

#[derive(Clone, Debug)]
pub struct EncodedPoints {
    /// `N⁻ × point_feature_dim`, straight out of the last set-abstraction stage.
    pub raw: PointFeatureSet,
    /// `N⁻ × geo_width`, after the point MLP.
    pub projected: PointFeatureSet,
}

/// Indices of the first `nsample` points within `radius` of `center`, in index
/// order, padded by repeating the first hit.
pub fn ball_query(points: &[Point3], center: Point3, radius: f64, nsample: usize) -> Vec<usize> {
    let r2 = radius * radius;
    let mut out = Vec::with_capacity(nsample);
    for (i, p) in points.iter().enumerate() {
        let d = sub(*p, center);
        if d[0] * d[0] + d[1] * d[1] + d[2] * d[2] <= r2 {
            out.push(i);
            if out.len() == nsample {
                break;
            }
        }
    }
    if let Some(&first) = out.first() {
        out.resize(nsample, first);
    }
    out
}

fn mlp_relu(g: &mut Graph, layers: &[Linear], mut x: Var) -> Var {
    for l in layers {
        let y = l.forward(g, x);
        x = g.relu(y);
    }
    x
}

/// One multi-scale set-abstraction stage. Grouped coordinates are taken
/// relative to the centroid and divided by the grouping radius.
pub fn set_abstraction(
    g: &mut Graph,
    stage: &SaStage,
    scales: &[Vec<Linear>],
    xyz: &[Point3],
    features: Var,
) -> Result<(Vec<Point3>, Var)> {
    let centers_idx = fps_select(xyz, stage.centroids, 0)?;
    let centers: Vec<Point3> = centers_idx.iter().map(|&i| xyz[i]).collect();
    let mut pooled = Vec::with_capacity(scales.len());
    for (k, layers) in scales.iter().enumerate() {
        let (radius, ns) = (stage.radii[k], stage.samples[k]);
        let mut index = Vec::with_capacity(centers.len() * ns);
        let mut rel = Vec::with_capacity(centers.len() * ns * 3);
        for c in &centers {
            let group = ball_query(xyz, *c, radius, ns);
            debug_assert_eq!(group.len(), ns, "a centroid always finds itself");
            for &j in &group {
                let d = sub(xyz[j], *c);
                rel.extend_from_slice(&[d[0] / radius, d[1] / radius, d[2] / radius]);
            }
            index.extend_from_slice(&group);
        }
        let rel = g.constant(Mat::from_vec(index.len(), 3, rel));
        let grouped = g.gather_rows(features, &index);
        let input = g.concat_cols(&[rel, grouped]);
        let h = mlp_relu(g, layers, input);
        pooled.push(g.max_pool_groups(h, ns));
    }
    let out = if pooled.len() == 1 { pooled[0] } else { g.concat_cols(&pooled) };
    Ok((centers, out))
}

/// Concatenates object and grasp points, appends the 0/1 grasp indicator and
/// runs the set-abstraction stages followed by the point MLP (bias-free, ReLU).
pub fn encode_object_grasp(
    g: &mut Graph,
    model: &Model,
    pc: &PointCloud,
    cps: &ControlPointSet,
) -> Result<EncodedPoints> {
    let cfg = &model.config;
    let n = pc.len() + cps.points.len();
    if n < cfg.reduced_points() {
        return Err(Error::Config(format!("{n} input points cannot be reduced to {} positions", cfg.reduced_points())));
    }
    let mut xyz: Vec<Point3> = pc.points().to_vec();
    xyz.extend_from_slice(&cps.points);
    let indicator = g.constant(grasp_indicator(pc.len(), cps.points.len()));
    let mut positions = xyz;
    let mut features = indicator;
    for (stage, scales) in cfg.sa_stages.iter().zip(&model.encoder.sa) {
        let (p, f) = set_abstraction(g, stage, scales, &positions, features)?;
        positions = p;
        features = f;
    }
    let raw = PointFeatureSet { positions: positions.clone(), features };
    let mlp = model.encoder.point_mlp.forward(g, features);
    let projected = PointFeatureSet { positions, features: g.relu(mlp) };
    Ok(EncodedPoints { raw, projected })
}

/// `(object + grasp) × 1` column: 0 for object points, 1 for the grasp rows.
pub fn grasp_indicator(object_points: usize, grasp_points: usize) -> Mat {
    let mut m = Mat::zeros(object_points + grasp_points, 1);
    for r in object_points..object_points + grasp_points {
        m.set(r, 0, 1.0);
    }
    m
}

fn check_width(what: &str, got: usize, want: usize) -> Result<()> {
    if got != want {
        return Err(Error::Shape(format!("{what} has width {got}, expected {want}")));
    }
    Ok(())
}

/// Semantic sequence projected into the stream width. With `real_only` the
/// padded rows are dropped instead of carried as zeros.
pub fn project_sequence(g: &mut Graph, model: &Model, seq: &TokenSequenceEmbedding, real_only: bool) -> Result<Var> {
    check_width("semantic embedding", seq.vectors.cols(), model.config.sem_raw_dim)?;
    if seq.mask.len() != seq.vectors.rows() {
        return Err(Error::Shape("semantic mask length differs from token count".into()));
    }
    let x = if real_only {
        let rows: Vec<usize> = (0..seq.mask.len()).filter(|r| seq.mask[*r]).collect();
        if rows.is_empty() {
            return Err(Error::Validation("token sequence has no real tokens".into()));
        }
        let mut m = Mat::zeros(rows.len(), seq.vectors.cols());
        for (o, r) in rows.iter().enumerate() {
            m.row_mut(o).copy_from_slice(seq.vectors.row(*r));
        }
        g.constant(m)
    } else {
        g.constant(seq.vectors.clone())
    };
    Ok(model.encoder.sem_proj.forward(g, x))
}

/// Row-major flatten of an image feature map: cell `(r, c)` becomes row `r·w + c`.
pub fn flatten_image(map: &ImageFeatureMap) -> Mat {
    map.cells.clone()
}

pub fn project_image(g: &mut Graph, model: &Model, map: &ImageFeatureMap) -> Result<Var> {
    check_width("image feature map", map.cells.cols(), model.config.geo_raw_dim)?;
    if map.height * map.width != map.cells.rows() || map.height == 0 || map.width == 0 {
        return Err(Error::Shape(format!("image map of {}×{} has {} cells", map.height, map.width, map.cells.rows())));
    }
    let x = g.constant(flatten_image(map));
    Ok(model.encoder.geo_img_proj.forward(g, x))
}

pub fn project_text_vector(g: &mut Graph, model: &Model, v: &TextVectorEmbedding) -> Result<Var> {
    check_width("geometric text embedding", v.vector.len(), model.config.geo_raw_dim)?;
    let x = g.constant(Mat::row_vector(&v.vector));
    Ok(model.encoder.geo_text_proj.forward(g, x))
}

/// Reference shapes of the encoder outputs for a configuration.
pub fn output_shapes(cfg: &ModelConfig) -> [(usize, usize); 2] {
    [(cfg.reduced_points(), cfg.point_feature_dim()), (cfg.reduced_points(), cfg.geo_width)]
}
