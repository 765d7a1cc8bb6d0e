//! The ablation ladder: baseline vs +SDS vs +PALP, crossed with the
//! noise-sharing and gradient-rescale switches, across seeds. Each cell is
//! an independent personalization run; cells execute on their own threads
//! and append rows in a fixed order, so the output CSV is deterministic.

use serde::{Deserialize, Serialize};

use crate::denoiser::checkpoint::Checkpoint;
use crate::evalkit::report::MetricsRow;
use crate::guidance::GuidanceMode;
use crate::trainer::eval::{EvalSpec, DEFAULT_EVAL_CFG_SCALE};
use crate::trainer::personalize::personalize_with;
use crate::trainer::{mode_label, SubjectSet, TrainConfig, TrainError};

fn default_modes() -> Vec<GuidanceMode> {
    vec![GuidanceMode::None, GuidanceMode::Sds, GuidanceMode::Palp]
}

fn default_flags() -> Vec<bool> {
    vec![true, false]
}

fn default_seeds() -> Vec<u64> {
    vec![1, 2, 3]
}

fn default_lambdas() -> Vec<f64> {
    vec![1.0]
}

fn default_eval_samples() -> usize {
    crate::trainer::eval::DEFAULT_EVAL_SAMPLES
}

/// The swept dimensions plus the per-run config template. Baseline cells
/// ignore the guidance switches, so each seed runs the baseline exactly
/// once no matter how many switch combinations the grid lists.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AblationGrid {
    #[serde(default = "default_modes")]
    pub modes: Vec<GuidanceMode>,
    #[serde(default = "default_flags")]
    pub share_noise: Vec<bool>,
    #[serde(default = "default_flags")]
    pub rescale: Vec<bool>,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    /// Guidance weights to sweep (single-entry by default).
    #[serde(default = "default_lambdas")]
    pub lambdas: Vec<f64>,
    /// Template for every cell; mode, switches, λ and seed are overwritten.
    #[serde(default)]
    pub config: TrainConfig,
    #[serde(default = "default_eval_samples")]
    pub eval_samples: usize,
}

impl Default for AblationGrid {
    fn default() -> Self {
        AblationGrid {
            modes: default_modes(),
            share_noise: default_flags(),
            rescale: default_flags(),
            seeds: default_seeds(),
            lambdas: default_lambdas(),
            config: TrainConfig::default(),
            eval_samples: default_eval_samples(),
        }
    }
}

struct Cell {
    run_id: String,
    config: TrainConfig,
    guided: bool,
}

impl AblationGrid {
    fn cells(&self) -> Result<Vec<Cell>, TrainError> {
        if self.modes.is_empty() || self.seeds.is_empty() {
            return Err(TrainError::BadConfig("ablation grid needs modes and seeds".into()));
        }
        if self.lambdas.is_empty() || self.share_noise.is_empty() || self.rescale.is_empty() {
            return Err(TrainError::BadConfig(
                "ablation grid axes must be non-empty".into(),
            ));
        }
        let mut cells = Vec::new();
        for &seed in &self.seeds {
            for &mode in &self.modes {
                if mode == GuidanceMode::None {
                    let mut config = self.config.clone();
                    config.seed = seed;
                    config.guidance.mode = GuidanceMode::None;
                    config.lambda_palp = 0.0;
                    cells.push(Cell {
                        run_id: format!("ablate-baseline-seed{seed}"),
                        config,
                        guided: false,
                    });
                    continue;
                }
                for &sn in &self.share_noise {
                    for &rs in &self.rescale {
                        for &lambda in &self.lambdas {
                            let mut config = self.config.clone();
                            config.seed = seed;
                            config.guidance.mode = mode;
                            config.guidance.share_noise = sn;
                            config.guidance.rescale = rs;
                            config.lambda_palp = lambda;
                            cells.push(Cell {
                                run_id: format!(
                                    "ablate-{}-sn{}-rs{}-lam{}-seed{}",
                                    mode_label(mode),
                                    sn as u8,
                                    rs as u8,
                                    lambda,
                                    seed
                                ),
                                config,
                                guided: true,
                            });
                        }
                    }
                }
            }
        }
        Ok(cells)
    }
}

pub struct AblationOutcome {
    /// Metric rows from every cell, grouped by cell in grid order.
    pub rows: Vec<MetricsRow>,
}

/// Run every grid cell against the same base model, subject and target.
/// Baseline cells are evaluated against the target prompt too, so their
/// text-alignment column is directly comparable with the guided cells.
pub fn ablation_run(
    base: &Checkpoint,
    subject: &SubjectSet,
    target_prompt: &str,
    grid: &AblationGrid,
) -> Result<AblationOutcome, TrainError> {
    let cells = grid.cells()?;
    let results: Vec<Result<Vec<MetricsRow>, TrainError>> = std::thread::scope(|scope| {
        let handles: Vec<_> = cells
            .iter()
            .map(|cell| {
                scope.spawn(move || {
                    let eval = EvalSpec {
                        prompt: target_prompt.to_owned(),
                        n_samples: grid.eval_samples,
                        cfg_scale: DEFAULT_EVAL_CFG_SCALE,
                        // Same eval noise for every cell of a seed, so
                        // columns differ only through the trained weights.
                        seed: cell.config.seed ^ 0xE7A3,
                    };
                    let target = cell.guided.then_some(target_prompt);
                    personalize_with(base, subject, target, &cell.config, &eval, &cell.run_id)
                        .map(|out| out.metrics)
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("ablation cell panicked")).collect()
    });

    let mut rows = Vec::new();
    for r in results {
        rows.extend(r?);
    }
    Ok(AblationOutcome { rows })
}
