//! Training loops: base-model pretraining on the attribute grid, baseline
//! personalization (embedding row + adapter on reconstruction alone),
//! prompt-aligned personalization (reconstruction + guidance in the same
//! step), two-subject joint personalization, and the ablation ladder.
//!
//! Every routine is a pure function of (inputs, config, seed): randomness
//! comes only from seeded generators with documented draw order, evaluation
//! uses generators derived from — never shared with — the training stream,
//! and reruns produce byte-identical checkpoints.

pub mod ablate;
pub mod eval;
pub mod multi;
pub mod optim;
pub mod personalize;
pub mod pretrain;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::denoiser::embed::{is_placeholder, PromptError};
use crate::diffcore::tape::GradError;
use crate::diffcore::tensor::Tensor;
use crate::evalkit::world::{subject_images, SubjectKind};
use crate::guidance::{GuidanceConfig, GuidanceError, GuidanceMode};

pub use ablate::{ablation_run, AblationOutcome};
pub use eval::{EvalSpec, DEFAULT_EVAL_CFG_SCALE};
pub use multi::multi_subject_personalize;
pub use optim::{Adam, ADAM_BETA1, ADAM_BETA2, ADAM_EPS};
pub use personalize::{
    decompose_target, palp_step, personalize_baseline, personalize_palp, PalpTarget,
    PersonalizeOutcome, TrainState,
};
pub use pretrain::{checkpoint_hash, default_pretrain_config, pretrain, pretrain_cached};

/// Checkpoint steps at which personalization runs log metrics.
pub const DEFAULT_EARLY_STOP_GRID: [usize; 6] = [50, 100, 200, 300, 400, 500];

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Adam step size.
    pub lr: f64,
    pub steps: usize,
    pub batch: usize,
    pub seed: u64,
    pub guidance: GuidanceConfig,
    /// Weight of the guidance gradient added to the reconstruction gradient.
    pub lambda_palp: f64,
    /// Steps at which to log metrics (and the probe); `None` logs only at
    /// the final step.
    pub early_stop_grid: Option<Vec<usize>>,
}

impl Default for TrainConfig {
    /// Personalization defaults: 500 steps over the reference set with the
    /// standard guidance configuration.
    fn default() -> Self {
        TrainConfig {
            lr: 2e-3,
            steps: 500,
            batch: 8,
            seed: 7,
            guidance: GuidanceConfig::default(),
            lambda_palp: 1.0,
            early_stop_grid: Some(DEFAULT_EARLY_STOP_GRID.to_vec()),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if !(self.lr > 0.0) {
            return Err(TrainError::BadConfig(format!("lr must be positive, got {}", self.lr)));
        }
        if self.steps == 0 {
            return Err(TrainError::BadConfig("steps must be at least 1".into()));
        }
        if self.batch == 0 {
            return Err(TrainError::BadConfig("batch must be at least 1".into()));
        }
        if !self.lambda_palp.is_finite() || self.lambda_palp < 0.0 {
            return Err(TrainError::BadConfig(format!(
                "lambda_palp must be finite and non-negative, got {}",
                self.lambda_palp
            )));
        }
        self.guidance.validate().map_err(TrainError::Guidance)?;
        Ok(())
    }

    /// The steps at which metrics are logged, always including the last.
    pub fn log_steps(&self) -> Vec<usize> {
        let mut grid: Vec<usize> = match &self.early_stop_grid {
            Some(g) => g.iter().copied().filter(|&s| s >= 1 && s <= self.steps).collect(),
            None => Vec::new(),
        };
        if grid.last() != Some(&self.steps) {
            grid.push(self.steps);
        }
        grid
    }
}

/// A personalization subject: up to eight reference photos plus the prompt
/// template and class stand-in token.
#[derive(Clone, Debug)]
pub struct SubjectSet {
    pub images: Vec<Tensor>,
    /// The reconstruction prompt, e.g. `"photo [V]"`.
    pub personalization_prompt: String,
    /// The placeholder token inside the prompt, e.g. `"[V]"`.
    pub placeholder: String,
    /// Vocabulary class token the placeholder stands in for.
    pub class_token: String,
}

pub const MAX_SUBJECT_IMAGES: usize = 8;

impl SubjectSet {
    /// Standard subject built from one of the toy world's held-out shapes.
    pub fn from_kind(kind: SubjectKind, n: usize, placeholder: &str, seed: u64) -> SubjectSet {
        SubjectSet {
            images: subject_images(kind, n, seed),
            personalization_prompt: format!("photo {placeholder}"),
            placeholder: placeholder.to_owned(),
            class_token: kind.class().token().to_owned(),
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        if self.images.is_empty() || self.images.len() > MAX_SUBJECT_IMAGES {
            return Err(TrainError::BadSubject(format!(
                "need 1..={} reference images, got {}",
                MAX_SUBJECT_IMAGES,
                self.images.len()
            )));
        }
        let shape = self.images[0].shape();
        if self.images.iter().any(|i| i.shape() != shape) {
            return Err(TrainError::BadSubject("reference images differ in shape".into()));
        }
        if !is_placeholder(&self.placeholder) {
            return Err(TrainError::BadSubject(format!(
                "placeholder `{}` must be bracketed like [V]",
                self.placeholder
            )));
        }
        if !self
            .personalization_prompt
            .split_whitespace()
            .any(|t| t == self.placeholder)
        {
            return Err(TrainError::BadSubject(format!(
                "prompt `{}` does not mention placeholder `{}`",
                self.personalization_prompt, self.placeholder
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Guidance(#[from] GuidanceError),
    #[error(transparent)]
    Grad(#[from] GradError),
    #[error("training diverged at step {step}: loss = {loss}")]
    Diverged { step: usize, loss: f64 },
    #[error("bad training config: {0}")]
    BadConfig(String),
    #[error("bad subject set: {0}")]
    BadSubject(String),
    #[error("dataset does not cover the attribute grid: missing {0}")]
    IncompleteGrid(String),
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
}

/// Guidance mode names as they appear in metrics CSV rows.
pub fn mode_label(mode: GuidanceMode) -> &'static str {
    match mode {
        GuidanceMode::None => "baseline",
        GuidanceMode::Sds => "sds",
        GuidanceMode::Palp => "palp",
        GuidanceMode::Nfsd => "nfsd",
    }
}

/// Copy `img` into `like`'s shape (images arrive as H×W grids, the loss
/// tape works on flat vectors). Element count must match.
pub(crate) fn reshape_like(img: &Tensor, like: &Tensor) -> Tensor {
    if img.shape() == like.shape() {
        img.clone()
    } else {
        Tensor::new(like.shape().to_vec(), img.data().to_vec())
    }
}
