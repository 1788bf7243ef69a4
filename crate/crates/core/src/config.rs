//! Model dimensions and named profiles.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::GripperTemplate;

/// One set-abstraction stage with multi-scale grouping: every scale groups
/// `samples[k]` neighbours within `radii[k]` and runs its own point MLP.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SaStage {
    pub centroids: usize,
    pub radii: Vec<f64>,
    pub samples: Vec<usize>,
    pub mlps: Vec<Vec<usize>>,
}

impl SaStage {
    pub fn out_dim(&self) -> usize {
        self.mlps.iter().map(|m| *m.last().unwrap_or(&0)).sum()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Object points per cloud after downsampling (N).
    pub points: usize,
    pub sa_stages: Vec<SaStage>,
    /// Width of the per-point geometric stream after the point MLP.
    pub geo_width: usize,
    /// Raw semantic token embedding width.
    pub sem_raw_dim: usize,
    /// Semantic stream width.
    pub sem_width: usize,
    pub sem_heads: usize,
    /// Raw multimodal embedding width (image cells and geometric text).
    pub geo_raw_dim: usize,
    /// Projected width of image cells and geometric description vectors.
    pub geo_knowledge_dim: usize,
    pub geo_heads: usize,
    pub image_grid: (usize, usize),
    /// Width of the pooled semantic embedding.
    pub sem_pooled_dim: usize,
    /// Channel schedule of the final global set-abstraction layer.
    pub global_sa_mlp: Vec<usize>,
    pub head_hidden: usize,
    pub ffn_multiplier: usize,
    pub instruction_tokens: usize,
    pub description_tokens: usize,
    /// Gain of the orthogonal initialization.
    pub init_gain: f64,
    /// Adds learned position embeddings to instruction tokens.
    pub learned_positions: bool,
    pub gripper: GripperTemplate,
}

fn stage(centroids: usize, radii: [f64; 2], samples: [usize; 2], mlps: [&[usize]; 2]) -> SaStage {
    SaStage {
        centroids,
        radii: radii.to_vec(),
        samples: samples.to_vec(),
        mlps: mlps.iter().map(|m| m.to_vec()).collect(),
    }
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::paper()
    }
}

impl ModelConfig {
    /// Full-size model: 4096 points, three MSG stages ending at 64 centroids
    /// and 1024 channels, 768/1024-d backend embeddings.
    pub fn paper() -> Self {
        Self {
            points: 4096,
            sa_stages: vec![
                stage(512, [0.02, 0.05], [16, 32], [&[32, 32, 64], &[64, 64, 128]]),
                stage(128, [0.05, 0.1], [16, 32], [&[64, 64, 128], &[128, 128, 256]]),
                stage(64, [0.1, 0.2], [16, 32], [&[128, 196, 512], &[128, 196, 512]]),
            ],
            geo_width: 256,
            sem_raw_dim: 768,
            sem_width: 512,
            sem_heads: 8,
            geo_raw_dim: 1024,
            geo_knowledge_dim: 128,
            geo_heads: 4,
            image_grid: (7, 7),
            sem_pooled_dim: 128,
            global_sa_mlp: vec![256, 300],
            head_hidden: 128,
            ffn_multiplier: 4,
            instruction_tokens: 16,
            description_tokens: 64,
            init_gain: 0.1,
            learned_positions: false,
            gripper: GripperTemplate::default(),
        }
    }

    /// Small model that trains on one CPU core in minutes.
    pub fn desk() -> Self {
        Self {
            points: 128,
            sa_stages: vec![
                stage(32, [0.03, 0.06], [8, 8], [&[16, 16], &[16, 16]]),
                stage(16, [0.06, 0.12], [8, 8], [&[32, 32], &[32, 32]]),
                stage(8, [0.12, 0.24], [8, 8], [&[32, 32], &[32, 64]]),
            ],
            geo_width: 32,
            sem_raw_dim: 32,
            sem_width: 32,
            sem_heads: 2,
            geo_raw_dim: 32,
            geo_knowledge_dim: 16,
            geo_heads: 2,
            image_grid: (4, 4),
            sem_pooled_dim: 16,
            global_sa_mlp: vec![32],
            head_hidden: 16,
            ffn_multiplier: 2,
            instruction_tokens: 12,
            description_tokens: 40,
            init_gain: 1.0,
            learned_positions: false,
            gripper: GripperTemplate::default(),
        }
    }

    /// Smallest configuration that still exercises every layer; used for
    /// finite-difference gradient checks.
    pub fn minimal() -> Self {
        Self {
            points: 26,
            sa_stages: vec![
                stage(16, [0.05, 0.1], [4, 4], [&[4, 4], &[4]]),
                stage(8, [0.1, 0.2], [4, 4], [&[6], &[4, 6]]),
            ],
            geo_width: 8,
            sem_raw_dim: 6,
            sem_width: 8,
            sem_heads: 1,
            geo_raw_dim: 6,
            geo_knowledge_dim: 4,
            geo_heads: 1,
            image_grid: (2, 2),
            sem_pooled_dim: 4,
            global_sa_mlp: vec![6, 5],
            head_hidden: 4,
            ffn_multiplier: 2,
            instruction_tokens: 4,
            description_tokens: 5,
            init_gain: 1.0,
            learned_positions: true,
            gripper: GripperTemplate::default(),
        }
    }

    pub fn profile(name: &str) -> Result<Self> {
        match name {
            "paper" => Ok(Self::paper()),
            "desk" => Ok(Self::desk()),
            "minimal" => Ok(Self::minimal()),
            _ => Err(Error::Config(format!("unknown model profile {name:?} (paper, desk, minimal)"))),
        }
    }

    /// N⁻, the number of points surviving the encoder.
    pub fn reduced_points(&self) -> usize {
        self.sa_stages.last().map_or(0, |s| s.centroids)
    }

    pub fn point_feature_dim(&self) -> usize {
        self.sa_stages.last().map_or(0, SaStage::out_dim)
    }

    pub fn geo_embedding_dim(&self) -> usize {
        *self.global_sa_mlp.last().unwrap_or(&0)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.sa_stages.is_empty() {
            return bad("at least one set-abstraction stage is required".into());
        }
        let mut available = self.points + 6;
        for (i, s) in self.sa_stages.iter().enumerate() {
            if s.centroids == 0 || s.centroids > available {
                return bad(format!("stage {i} asks for {} centroids from {available} points", s.centroids));
            }
            if s.radii.is_empty() || s.radii.len() != s.samples.len() || s.radii.len() != s.mlps.len() {
                return bad(format!("stage {i}: radii, samples and mlps must have equal, non-zero length"));
            }
            if s.radii.iter().any(|r| !(*r > 0.0))
                || s.samples.contains(&0)
                || s.mlps.iter().any(|m| m.is_empty() || m.contains(&0))
            {
                return bad(format!("stage {i}: radii, sample counts and widths must be positive"));
            }
            available = s.centroids;
        }
        if self.reduced_points() >= self.points {
            return bad("the encoder must reduce the point count".into());
        }
        for (what, width, heads) in
            [("semantic", self.sem_width, self.sem_heads), ("geometric", self.geo_width, self.geo_heads)]
        {
            if heads == 0 || width % heads != 0 {
                return bad(format!("{what} width {width} is not divisible by {heads} heads"));
            }
        }
        let dims = [
            self.geo_width,
            self.sem_raw_dim,
            self.sem_width,
            self.geo_raw_dim,
            self.geo_knowledge_dim,
            self.sem_pooled_dim,
            self.head_hidden,
            self.ffn_multiplier,
            self.instruction_tokens,
            self.description_tokens,
            self.image_grid.0,
            self.image_grid.1,
        ];
        if dims.contains(&0) || self.global_sa_mlp.is_empty() || self.global_sa_mlp.contains(&0) {
            return bad("all widths, token limits and grid sizes must be positive".into());
        }
        if !(self.init_gain > 0.0 && self.init_gain.is_finite()) {
            return bad("init_gain must be positive".into());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn paper_profile_dimensions() {
        let c = ModelConfig::paper();
        c.validate().unwrap();
        assert_eq!(c.reduced_points(), 64);
        assert_eq!(c.point_feature_dim(), 1024);
        assert_eq!(c.geo_embedding_dim(), 300);
        assert_eq!(c.sem_width / c.sem_heads, 64);
        assert_eq!(c.geo_width / c.geo_heads, 64);
        assert_eq!(c.geo_embedding_dim() + c.sem_pooled_dim, 428);
    }

    #[test]
    fn small_profiles_are_valid() {
        ModelConfig::desk().validate().unwrap();
        ModelConfig::minimal().validate().unwrap();
        assert_eq!(ModelConfig::minimal().reduced_points(), 8);
    }

    #[test]
    fn too_few_points_is_a_config_error() {
        let mut c = ModelConfig::minimal();
        c.points = 4;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        let mut c = ModelConfig::desk();
        c.sem_heads = 3;
        assert!(c.validate().is_err());
    }
}
