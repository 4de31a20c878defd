use serde::{Deserialize, Serialize};

use super::ModelError;

/// Architecture hyperparameters. Defaults are the full-size model on
/// 32 x 128 log-Mel segments: 4 time segments, window width 4, embedding 96,
/// stage depths 2/2/4/2 with 3/6/12/24 heads.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Number of time segments each input is split into (N).
    pub segments: usize,
    /// Window width in time (t).
    pub window: usize,
    /// Embedding dimension of the first stage (e).
    pub embed_dim: usize,
    pub depths: Vec<usize>,
    pub heads: Vec<usize>,
    pub mlp_ratio: usize,
    /// Number of emotion classes (k).
    pub num_classes: usize,
    pub in_channels: usize,
    /// Mel bands (f).
    pub n_mels: usize,
    /// Frames per input segment (d).
    pub frames: usize,
    pub layer_norm_eps: f64,
    /// Learned relative position bias inside each window. Off by default.
    pub relative_position_bias: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            segments: 4,
            window: 4,
            embed_dim: 96,
            depths: vec![2, 2, 4, 2],
            heads: vec![3, 6, 12, 24],
            mlp_ratio: 4,
            num_classes: 4,
            in_channels: 1,
            n_mels: 32,
            frames: 128,
            layer_norm_eps: 1e-5,
            relative_position_bias: false,
        }
    }
}

/// Spatial extent and width of the token grid entering one stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StageShape {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    /// Effective window width, `min(window, width)`.
    pub window: usize,
    pub heads: usize,
}

impl StageShape {
    pub fn tokens(&self) -> usize {
        self.height * self.width
    }

    pub fn num_windows(&self) -> usize {
        self.width / self.window
    }
}

impl ModelConfig {
    pub fn num_stages(&self) -> usize {
        self.depths.len()
    }

    pub fn segment_frames(&self) -> usize {
        self.frames / self.segments.max(1)
    }

    /// Width of the pooled feature, `embed_dim * 2^(stages - 1)`.
    pub fn feature_dim(&self) -> usize {
        self.embed_dim << (self.num_stages().saturating_sub(1))
    }

    pub fn stage(&self, s: usize) -> StageShape {
        let width = self.segment_frames() >> s;
        StageShape {
            height: self.n_mels >> s,
            width,
            channels: self.embed_dim << s,
            window: self.window.min(width),
            heads: self.heads[s],
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::Config(m));
        if self.depths.is_empty() {
            return bad("at least one stage is required".into());
        }
        if self.depths.len() != self.heads.len() {
            return bad(format!(
                "{} stage depths but {} head counts",
                self.depths.len(),
                self.heads.len()
            ));
        }
        for (field, v) in [
            ("segments", self.segments),
            ("window", self.window),
            ("embed_dim", self.embed_dim),
            ("mlp_ratio", self.mlp_ratio),
            ("num_classes", self.num_classes),
            ("in_channels", self.in_channels),
            ("n_mels", self.n_mels),
            ("frames", self.frames),
        ] {
            if v == 0 {
                return bad(format!("{field} must be positive"));
            }
        }
        if let Some(d) = self.depths.iter().find(|&&d| d == 0 || d % 2 != 0) {
            return bad(format!("stage depth {d} must be a positive even number"));
        }
        if self.frames % self.segments != 0 {
            return bad(format!("frames {} not divisible by segments {}", self.frames, self.segments));
        }
        let seg = self.segment_frames();
        if seg % self.window != 0 {
            return bad(format!("segment width {seg} not divisible by window {}", self.window));
        }
        let merges = self.num_stages() - 1;
        let scale = 1usize << merges;
        if self.n_mels % scale != 0 || seg % scale != 0 {
            return bad(format!(
                "n_mels {} and segment width {seg} must be divisible by 2^{merges}",
                self.n_mels
            ));
        }
        for s in 0..self.num_stages() {
            let st = self.stage(s);
            if st.heads == 0 || st.channels % st.heads != 0 {
                return bad(format!("stage {s}: {} channels not divisible by {} heads", st.channels, st.heads));
            }
            if st.width % st.window != 0 {
                return bad(format!("stage {s}: width {} not divisible by window {}", st.width, st.window));
            }
        }
        if !(self.layer_norm_eps > 0.0) {
            return bad("layer_norm_eps must be positive".into());
        }
        Ok(())
    }
}
