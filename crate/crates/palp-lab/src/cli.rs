//! Command-line entry point: subcommand parsing, config resolution, run
//! orchestration and artifact persistence.
//!
//! Every run writes one directory under the output root (default `runs/`,
//! overridable by `--out`, the config key `out`, or the `PALP_LAB_OUT`
//! environment variable, in that precedence order):
//!
//! ```text
//! runs/<run_id>/
//!   manifest.json     what produced this run (see cli::manifest)
//!   checkpoint.bin    model weights, when the command trains one
//!   metrics.csv       metric rows in the evalkit CSV schema
//!   grids/*.pgm       sample grids / probe strips (binary P5)
//! ```
//!
//! `run_id` is deterministic — `<command>[-<mode>]-seed<seed>-<hash8>` where
//! `hash8` prefixes the SHA-256 of the resolved inputs — so a rerun with the
//! same inputs lands in the same directory with byte-identical artifacts
//! (timestamps inside the manifest aside).
//!
//! Exit codes: 0 success; 1 anything wrong with the invocation (flags,
//! config file, prompts, missing or unreadable checkpoints); 2 failures at
//! run time (training divergence, filesystem write errors).

pub mod config;
pub mod manifest;

use std::fmt::Display;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::denoiser::checkpoint::Checkpoint;
use crate::evalkit::probe::{parse_t_grid, x0hat_probe};
use crate::evalkit::report::{
    encode_grid_pgm, merge_metrics, parse_metrics_csv, summarize_samples, summary_json,
    summary_table, write_metrics_csv, MetricsRow, RunSummary,
};
use crate::evalkit::world::{
    gen_dataset, AttributeSpec, CellLabel, SubjectKind, BACKGROUNDS, CLASSES, STYLES,
};
use crate::guidance::{GuidanceConfig, GuidanceMode};
use crate::trainer::eval::{sample_images, EvalSpec, DEFAULT_EVAL_CFG_SCALE, DEFAULT_EVAL_SAMPLES};
use crate::trainer::multi::{COMPOSITION_ALPHA, COMPOSITION_BETA};
use crate::trainer::pretrain::{
    default_pretrain_config, pretrain, DEFAULT_DATASET_SEED, DEFAULT_N_PER_CELL,
};
use crate::trainer::ablate::AblationGrid;
use crate::trainer::multi::multi_subject_personalize_with;
use crate::trainer::personalize::personalize_with;
use crate::trainer::{ablation_run, SubjectSet, TrainConfig, TrainError};
use config::{mode_name, parse_mode, pick, pick_required, FileConfig};
use manifest::{hash_file, hash_json, now_unix, RunManifest, MANIFEST_FORMAT};

pub const DEFAULT_OUT_ROOT: &str = "runs";
pub const OUT_ENV_VAR: &str = "PALP_LAB_OUT";
pub const DEFAULT_PLACEHOLDER: &str = "[V]";
pub const DEFAULT_SUBJECT: &str = "textured_diamond";
pub const DEFAULT_SUBJECT_SEED: u64 = 1001;
pub const DEFAULT_PROBE_SEED: u64 = 5;
pub const DEFAULT_PROBE_T_GRID: &str = "0,10,25,50,100,150,200,249";
pub const REPORT_SAMPLES_PER_CELL: usize = 8;

/// Errors carry their exit code: 1 for bad invocations, 2 for failures
/// while a valid run is executing.
#[derive(Debug)]
pub enum CliError {
    Config(String),
    Runtime(String),
}

impl CliError {
    pub fn code(&self) -> i32 {
        match self {
            CliError::Config(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Config(m) | CliError::Runtime(m) => m,
        }
    }
}

fn cfg_err(e: impl Display) -> CliError {
    CliError::Config(e.to_string())
}

fn rt_err(e: impl Display) -> CliError {
    CliError::Runtime(e.to_string())
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> CliError {
        match e {
            TrainError::Diverged { .. } | TrainError::Io(_) => rt_err(e),
            other => cfg_err(other),
        }
    }
}

#[derive(Parser, Debug)]
#[command(
    name = "palp-lab",
    about = "Toy diffusion personalization lab",
    disable_help_subcommand = true
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train the base model on the attribute-grid dataset.
    Pretrain(PretrainArgs),
    /// Personalize a base checkpoint on one subject.
    Personalize(PersonalizeArgs),
    /// Jointly personalize two subjects toward one composed prompt.
    Multi(MultiArgs),
    /// Run an ablation grid from a JSON grid file.
    Ablate(AblateArgs),
    /// Render the single-step denoised-estimate strip across noise levels.
    Probe(ProbeArgs),
    /// Merge run metrics and render summary tables and sample grids.
    Report(ReportArgs),
}

#[derive(Args, Debug, Default)]
struct CommonArgs {
    /// Flat key/value config file (flags override it).
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Output root; runs land in <out>/<run_id>/.
    #[arg(long, value_name = "DIR")]
    out: Option<String>,
}

#[derive(Args, Debug, Default)]
struct PretrainArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Dataset images per attribute cell.
    #[arg(long)]
    data_per_cell: Option<usize>,
    /// Dataset generation seed.
    #[arg(long)]
    data_seed: Option<u64>,
    /// Also render an 8-samples-per-cell grid (slower).
    #[arg(long)]
    sample_grid: bool,
}

#[derive(Args, Debug, Default)]
struct PersonalizeArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Base checkpoint to start from.
    #[arg(long, value_name = "FILE")]
    base: Option<String>,
    /// baseline, sds or palp.
    #[arg(long)]
    mode: Option<String>,
    /// Subject kind: textured_diamond or striped_ellipse.
    #[arg(long)]
    subject: Option<String>,
    /// Number of subject reference images (1..=8).
    #[arg(long)]
    n_refs: Option<usize>,
    #[arg(long)]
    subject_seed: Option<u64>,
    /// Placeholder token, default "[V]".
    #[arg(long)]
    placeholder: Option<String>,
    /// Target prompt for sds/palp, e.g. "sketch [V] plain".
    #[arg(long)]
    target_prompt: Option<String>,
    /// Clean-branch guidance scale α.
    #[arg(long)]
    alpha: Option<f64>,
    /// Personalized-branch guidance scale β.
    #[arg(long)]
    beta: Option<f64>,
    /// Reuse the reconstruction noise in the guidance branch.
    #[arg(long, value_name = "BOOL")]
    share_noise: Option<bool>,
    /// Cancel the noise-level factor in applied guidance gradients.
    #[arg(long, value_name = "BOOL")]
    rescale: Option<bool>,
    /// Guidance weight λ; 0 disables guidance entirely.
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Samples drawn per evaluation point.
    #[arg(long)]
    eval_samples: Option<usize>,
    /// Classifier-free guidance scale used for evaluation sampling.
    #[arg(long)]
    cfg_scale: Option<f64>,
}

#[derive(Args, Debug, Default)]
struct MultiArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[arg(long, value_name = "FILE")]
    base: Option<String>,
    /// Subject kind; pass twice (defaults: textured_diamond, striped_ellipse).
    #[arg(long)]
    subject: Vec<String>,
    /// Joint target prompt mentioning both placeholders.
    #[arg(long)]
    target_prompt: Option<String>,
    #[arg(long)]
    mode: Option<String>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long, value_name = "BOOL")]
    share_noise: Option<bool>,
    #[arg(long, value_name = "BOOL")]
    rescale: Option<bool>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    n_refs: Option<usize>,
    #[arg(long)]
    subject_seed: Option<u64>,
    #[arg(long)]
    eval_samples: Option<usize>,
    #[arg(long)]
    cfg_scale: Option<f64>,
}

#[derive(Args, Debug, Default)]
struct AblateArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[arg(long, value_name = "FILE")]
    base: Option<String>,
    /// JSON ablation grid file.
    #[arg(long, value_name = "FILE")]
    grid: PathBuf,
    #[arg(long)]
    subject: Option<String>,
    #[arg(long)]
    n_refs: Option<usize>,
    #[arg(long)]
    subject_seed: Option<u64>,
    #[arg(long)]
    placeholder: Option<String>,
    #[arg(long)]
    target_prompt: Option<String>,
}

#[derive(Args, Debug, Default)]
struct ProbeArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Checkpoint to probe (base or personalized).
    #[arg(long, value_name = "FILE")]
    ckpt: String,
    /// Prompt to condition the probe on.
    #[arg(long)]
    prompt: String,
    /// Comma-separated timesteps, strictly increasing.
    #[arg(long)]
    t_grid: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug, Default)]
struct ReportArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Directory holding run directories (default: the output root).
    #[arg(long, value_name = "DIR")]
    runs: Option<String>,
    /// Also sample a per-cell grid from this checkpoint.
    #[arg(long, value_name = "FILE")]
    ckpt: Option<String>,
}

/// Resolved inputs that feed the config hash. One struct for all commands;
/// fields a command does not use stay `None` so hashes never collide
/// across commands with coincidentally equal settings.
#[derive(Serialize)]
struct HashedInputs<'a> {
    command: &'a str,
    lr: Option<f64>,
    steps: Option<usize>,
    batch: Option<usize>,
    seed: u64,
    lambda: Option<f64>,
    mode: Option<&'a str>,
    alpha: Option<f64>,
    beta: Option<f64>,
    share_noise: Option<bool>,
    rescale: Option<bool>,
    subjects: Vec<String>,
    n_refs: Option<usize>,
    subject_seed: Option<u64>,
    placeholders: Vec<String>,
    target_prompt: Option<&'a str>,
    eval_prompt: Option<&'a str>,
    eval_samples: Option<usize>,
    cfg_scale: Option<f64>,
    data_per_cell: Option<usize>,
    data_seed: Option<u64>,
    t_grid: Option<Vec<usize>>,
    /// SHA-256 of input files (base checkpoint, grid file), in argument order.
    input_digests: Vec<String>,
}

impl<'a> HashedInputs<'a> {
    fn new(command: &'a str, seed: u64) -> HashedInputs<'a> {
        HashedInputs {
            command,
            lr: None,
            steps: None,
            batch: None,
            seed,
            lambda: None,
            mode: None,
            alpha: None,
            beta: None,
            share_noise: None,
            rescale: None,
            subjects: Vec::new(),
            n_refs: None,
            subject_seed: None,
            placeholders: Vec::new(),
            target_prompt: None,
            eval_prompt: None,
            eval_samples: None,
            cfg_scale: None,
            data_per_cell: None,
            data_seed: None,
            t_grid: None,
            input_digests: Vec::new(),
        }
    }

    fn with_train(mut self, t: &TrainConfig) -> HashedInputs<'a> {
        self.lr = Some(t.lr);
        self.steps = Some(t.steps);
        self.batch = Some(t.batch);
        self.lambda = Some(t.lambda_palp);
        self.mode = Some(mode_name(t.guidance.mode));
        self.alpha = Some(t.guidance.alpha);
        self.beta = Some(t.guidance.beta);
        self.share_noise = Some(t.guidance.share_noise);
        self.rescale = Some(t.guidance.rescale);
        self
    }
}

/// Parse argv and execute; returns the process exit code.
pub fn run(argv: &[String]) -> i32 {
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            // Help/version requests are successes; everything else is a
            // config error with usage text.
            let _ = e.print();
            return if e.exit_code() == 0 { 0 } else { 1 };
        }
    };
    let result = match cli.command {
        Command::Pretrain(args) => cmd_pretrain(args, argv),
        Command::Personalize(args) => cmd_personalize(args, argv),
        Command::Multi(args) => cmd_multi(args, argv),
        Command::Ablate(args) => cmd_ablate(args, argv),
        Command::Probe(args) => cmd_probe(args, argv),
        Command::Report(args) => cmd_report(args, argv),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("palp-lab: {}", e.message());
            e.code()
        }
    }
}

fn load_file_config(common: &CommonArgs) -> Result<FileConfig, CliError> {
    match &common.config {
        None => Ok(FileConfig::default()),
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| cfg_err(format!("cannot read config {}: {e}", path.display())))?;
            FileConfig::parse(&text).map_err(cfg_err)
        }
    }
}

fn out_root(common: &CommonArgs, file: &FileConfig) -> String {
    pick_required(common.out.clone(), file.out.clone())
        .or_else(|| std::env::var(OUT_ENV_VAR).ok())
        .unwrap_or_else(|| DEFAULT_OUT_ROOT.to_owned())
}

fn load_checkpoint(path: &str) -> Result<Checkpoint, CliError> {
    Checkpoint::load_from(Path::new(path))
        .map_err(|e| cfg_err(format!("cannot load checkpoint {path}: {e}")))
}

fn resolve_base(flag: &Option<String>, file: &FileConfig) -> Result<String, CliError> {
    pick_required(flag.clone(), file.base.clone())
        .ok_or_else(|| cfg_err("missing base checkpoint: pass --base or set `base` in the config"))
}

fn resolve_subject_kind(name: &str) -> Result<SubjectKind, CliError> {
    SubjectKind::from_name(name).ok_or_else(|| {
        cfg_err(format!("unknown subject `{name}` (try textured_diamond or striped_ellipse)"))
    })
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(rt_err)?;
    }
    std::fs::write(path, bytes).map_err(|e| rt_err(format!("write {}: {e}", path.display())))
}

/// Run directory bookkeeping shared by every subcommand.
struct RunDir {
    dir: PathBuf,
    manifest: RunManifest,
}

impl RunDir {
    fn create(
        root: &str,
        run_id: &str,
        command: &str,
        argv: &[String],
        config_hash: &str,
        seed: u64,
    ) -> Result<RunDir, CliError> {
        let dir = Path::new(root).join(run_id);
        std::fs::create_dir_all(&dir).map_err(rt_err)?;
        Ok(RunDir {
            manifest: RunManifest {
                format: MANIFEST_FORMAT,
                command: command.to_owned(),
                argv: argv.to_vec(),
                config_hash: config_hash.to_owned(),
                seed,
                output_dir: dir.display().to_string(),
                checkpoint_inputs: Vec::new(),
                checkpoint_outputs: Vec::new(),
                artifacts: Vec::new(),
                created_unix: now_unix(),
                finished_unix: 0,
            },
            dir,
        })
    }

    fn write_checkpoint(&mut self, ckpt: &Checkpoint) -> Result<(), CliError> {
        let path = self.dir.join("checkpoint.bin");
        write_bytes(&path, &ckpt.encode())?;
        self.manifest.checkpoint_outputs.push("checkpoint.bin".to_owned());
        Ok(())
    }

    fn write_artifact(&mut self, rel: &str, bytes: &[u8]) -> Result<(), CliError> {
        write_bytes(&self.dir.join(rel), bytes)?;
        self.manifest.artifacts.push(rel.to_owned());
        Ok(())
    }

    fn finish(mut self) -> Result<PathBuf, CliError> {
        self.manifest.finished_unix = now_unix();
        self.manifest.artifacts.push("manifest.json".to_owned());
        write_bytes(&self.dir.join("manifest.json"), self.manifest.to_json().as_bytes())?;
        Ok(self.dir)
    }
}

/// Sample one grid row per attribute cell (8 samples each) and encode the
/// whole thing as one PGM.
fn render_cell_grid(ckpt: &Checkpoint, seed: u64) -> Result<(Vec<u8>, Vec<RunSummary>), CliError> {
    let schedule = ckpt.schedule.build();
    let mut images = Vec::new();
    let mut summaries = Vec::new();
    let mut cell_idx = 0u64;
    for &style in &STYLES {
        for &class in &CLASSES {
            for &background in &BACKGROUNDS {
                let label = CellLabel { style, class, background };
                let prompt = label.prompt_text();
                let spec = EvalSpec {
                    prompt: prompt.clone(),
                    n_samples: REPORT_SAMPLES_PER_CELL,
                    cfg_scale: DEFAULT_EVAL_CFG_SCALE,
                    seed: seed ^ cell_idx,
                };
                let cell =
                    sample_images(&ckpt.params, ckpt.lora.as_ref(), &ckpt.table, &schedule, &spec)?;
                let tokens: Vec<String> =
                    prompt.split_whitespace().map(str::to_owned).collect();
                summaries.push(summarize_samples(&prompt, "cells", &cell, &tokens, None));
                images.extend(cell);
                cell_idx += 1;
            }
        }
    }
    let pgm = encode_grid_pgm(&images, REPORT_SAMPLES_PER_CELL).map_err(rt_err)?;
    Ok((pgm, summaries))
}

fn cmd_pretrain(args: PretrainArgs, argv: &[String]) -> Result<(), CliError> {
    let file = load_file_config(&args.common)?;
    let root = out_root(&args.common, &file);
    let defaults = default_pretrain_config();
    let config = TrainConfig {
        lr: pick(args.lr, file.lr, defaults.lr),
        steps: pick(args.steps, file.steps, defaults.steps),
        batch: pick(args.batch, file.batch, defaults.batch),
        seed: pick(args.seed, file.seed, defaults.seed),
        guidance: defaults.guidance,
        lambda_palp: 0.0,
        early_stop_grid: None,
    };
    let data_per_cell = pick(args.data_per_cell, file.data_per_cell, DEFAULT_N_PER_CELL);
    let data_seed = pick(args.data_seed, file.data_seed, DEFAULT_DATASET_SEED);

    let mut inputs = HashedInputs::new("pretrain", config.seed).with_train(&config);
    inputs.data_per_cell = Some(data_per_cell);
    inputs.data_seed = Some(data_seed);
    let hash = hash_json(&inputs);
    let run_id = format!("pretrain-seed{}-{}", config.seed, &hash[..8]);

    eprintln!("pretrain: {} steps, lr {}, dataset {data_per_cell}/cell", config.steps, config.lr);
    let dataset = gen_dataset(&AttributeSpec::default(), data_per_cell, data_seed);
    let outcome = pretrain(&config, &dataset)?;
    eprintln!(
        "pretrain: validation loss {:.4} -> {:.4}",
        outcome.initial_val_loss, outcome.final_val_loss
    );

    let mut run = RunDir::create(&root, &run_id, "pretrain", argv, &hash, config.seed)?;
    run.write_checkpoint(&outcome.checkpoint)?;
    run.write_artifact("metrics.csv", write_metrics_csv(&outcome.metrics).as_bytes())?;
    if args.sample_grid {
        let (pgm, _) = render_cell_grid(&outcome.checkpoint, config.seed)?;
        run.write_artifact("grids/cells.pgm", &pgm)?;
    }
    let dir = run.finish()?;
    println!("{}", dir.display());
    Ok(())
}

/// Everything `personalize` needs after precedence resolution.
#[derive(Debug)]
struct PersonalizeResolved {
    config: TrainConfig,
    subject: String,
    n_refs: usize,
    subject_seed: u64,
    placeholder: String,
    /// Target prompt as given (kept for evaluation even when λ=0).
    target_prompt: Option<String>,
    base: String,
    out: String,
    eval_samples: usize,
    cfg_scale: f64,
}

fn resolve_personalize(args: &PersonalizeArgs, file: &FileConfig) -> Result<PersonalizeResolved, CliError> {
    let defaults = TrainConfig::default();
    let gdef = GuidanceConfig::default();
    let mode_text = pick(args.mode.clone(), file.mode.map(|m| mode_name(m).to_owned()), {
        mode_name(gdef.mode).to_owned()
    });
    let mode = parse_mode(&mode_text)
        .ok_or_else(|| cfg_err(format!("unknown mode `{mode_text}` (baseline, sds or palp)")))?;
    let lambda = pick(args.lambda, file.lambda, defaults.lambda_palp);
    // λ=0 means the guidance branch never runs; fold that into the mode so
    // the run is exactly the baseline trainer (and is labeled as such).
    let effective_mode = if lambda == 0.0 { GuidanceMode::None } else { mode };
    let config = TrainConfig {
        lr: pick(args.lr, file.lr, defaults.lr),
        steps: pick(args.steps, file.steps, defaults.steps),
        batch: pick(args.batch, file.batch, defaults.batch),
        seed: pick(args.seed, file.seed, defaults.seed),
        guidance: GuidanceConfig {
            mode: effective_mode,
            alpha: pick(args.alpha, file.alpha, gdef.alpha),
            beta: pick(args.beta, file.beta, gdef.beta),
            w_t: gdef.w_t,
            share_noise: pick(args.share_noise, file.share_noise, gdef.share_noise),
            rescale: pick(args.rescale, file.rescale, gdef.rescale),
        },
        lambda_palp: lambda,
        early_stop_grid: defaults.early_stop_grid.clone(),
    };
    if config.guidance.mode != GuidanceMode::None && args.target_prompt.is_none()
        && file.target_prompt.is_none()
    {
        return Err(cfg_err(format!(
            "mode {} needs --target-prompt",
            mode_name(config.guidance.mode)
        )));
    }
    Ok(PersonalizeResolved {
        config,
        subject: pick(args.subject.clone(), file.subject.clone(), DEFAULT_SUBJECT.to_owned()),
        n_refs: pick(args.n_refs, file.n_refs, 3),
        subject_seed: pick(args.subject_seed, file.subject_seed, DEFAULT_SUBJECT_SEED),
        placeholder: pick(
            args.placeholder.clone(),
            file.placeholder.clone(),
            DEFAULT_PLACEHOLDER.to_owned(),
        ),
        target_prompt: pick_required(args.target_prompt.clone(), file.target_prompt.clone()),
        base: resolve_base(&args.base, file)?,
        out: String::new(), // filled by the caller, which owns CommonArgs
        eval_samples: pick(args.eval_samples, file.eval_samples, DEFAULT_EVAL_SAMPLES),
        cfg_scale: pick(args.cfg_scale, file.cfg_scale, DEFAULT_EVAL_CFG_SCALE),
    })
}

fn cmd_personalize(args: PersonalizeArgs, argv: &[String]) -> Result<(), CliError> {
    let file = load_file_config(&args.common)?;
    let mut r = resolve_personalize(&args, &file)?;
    r.out = out_root(&args.common, &file);
    let kind = resolve_subject_kind(&r.subject)?;
    let subject = SubjectSet::from_kind(kind, r.n_refs, &r.placeholder, r.subject_seed);
    let base = load_checkpoint(&r.base)?;

    // Guidance trains toward the target; the baseline ignores it but can
    // still be *evaluated* against it so curves are comparable.
    let trainer_target =
        (r.config.guidance.mode != GuidanceMode::None).then(|| r.target_prompt.clone().unwrap());
    let eval_prompt =
        r.target_prompt.clone().unwrap_or_else(|| subject.personalization_prompt.clone());
    let eval = EvalSpec {
        prompt: eval_prompt.clone(),
        n_samples: r.eval_samples,
        cfg_scale: r.cfg_scale,
        seed: r.config.seed ^ 0xE7A1,
    };

    let mut inputs = HashedInputs::new("personalize", r.config.seed).with_train(&r.config);
    inputs.subjects = vec![r.subject.clone()];
    inputs.n_refs = Some(r.n_refs);
    inputs.subject_seed = Some(r.subject_seed);
    inputs.placeholders = vec![r.placeholder.clone()];
    inputs.target_prompt = r.target_prompt.as_deref();
    inputs.eval_prompt = Some(&eval_prompt);
    inputs.eval_samples = Some(r.eval_samples);
    inputs.cfg_scale = Some(r.cfg_scale);
    inputs.input_digests = vec![hash_file(Path::new(&r.base)).map_err(cfg_err)?];
    let hash = hash_json(&inputs);
    let run_id = format!(
        "personalize-{}-seed{}-{}",
        mode_name(r.config.guidance.mode),
        r.config.seed,
        &hash[..8]
    );

    eprintln!(
        "personalize: mode {}, {} steps, subject {}",
        mode_name(r.config.guidance.mode),
        r.config.steps,
        r.subject
    );
    let outcome =
        personalize_with(&base, &subject, trainer_target.as_deref(), &r.config, &eval, &run_id)?;
    eprintln!(
        "personalize: final text-align {:.3}, subject-sim {:.3}",
        outcome.final_text_align, outcome.final_subject_sim
    );

    let mut run = RunDir::create(&r.out, &run_id, "personalize", argv, &hash, r.config.seed)?;
    run.manifest.checkpoint_inputs.push(r.base.clone());
    run.write_checkpoint(&outcome.checkpoint)?;
    run.write_artifact("metrics.csv", write_metrics_csv(&outcome.metrics).as_bytes())?;
    let schedule = outcome.checkpoint.schedule.build();
    let samples = sample_images(
        &outcome.checkpoint.params,
        outcome.checkpoint.lora.as_ref(),
        &outcome.checkpoint.table,
        &schedule,
        &eval,
    )?;
    let pgm = encode_grid_pgm(&samples, samples.len().clamp(1, 8)).map_err(rt_err)?;
    run.write_artifact("grids/samples.pgm", &pgm)?;
    let dir = run.finish()?;
    println!("{}", dir.display());
    Ok(())
}

fn cmd_multi(args: MultiArgs, argv: &[String]) -> Result<(), CliError> {
    let file = load_file_config(&args.common)?;
    let root = out_root(&args.common, &file);
    let defaults = TrainConfig::default();
    let gdef = GuidanceConfig::default();
    let mode_text = pick(args.mode.clone(), file.mode.map(|m| mode_name(m).to_owned()), {
        mode_name(gdef.mode).to_owned()
    });
    let mode = parse_mode(&mode_text)
        .ok_or_else(|| cfg_err(format!("unknown mode `{mode_text}` (baseline, sds or palp)")))?;
    let lambda = pick(args.lambda, file.lambda, defaults.lambda_palp);
    let effective_mode = if lambda == 0.0 { GuidanceMode::None } else { mode };
    let config = TrainConfig {
        lr: pick(args.lr, file.lr, defaults.lr),
        steps: pick(args.steps, file.steps, defaults.steps),
        batch: pick(args.batch, file.batch, defaults.batch),
        seed: pick(args.seed, file.seed, defaults.seed),
        guidance: GuidanceConfig {
            mode: effective_mode,
            // Composed prompts read best with a gentler clean branch.
            alpha: pick(args.alpha, file.alpha, COMPOSITION_ALPHA),
            beta: pick(args.beta, file.beta, COMPOSITION_BETA),
            w_t: gdef.w_t,
            share_noise: pick(args.share_noise, file.share_noise, gdef.share_noise),
            rescale: pick(args.rescale, file.rescale, gdef.rescale),
        },
        lambda_palp: lambda,
        early_stop_grid: defaults.early_stop_grid.clone(),
    };

    let subject_names: Vec<String> = if !args.subject.is_empty() {
        args.subject.clone()
    } else if let Some(joined) = &file.subject {
        joined.split(',').map(|s| s.trim().to_owned()).collect()
    } else {
        vec!["textured_diamond".to_owned(), "striped_ellipse".to_owned()]
    };
    if subject_names.len() != 2 {
        return Err(cfg_err(format!(
            "multi needs exactly 2 subjects, got {}",
            subject_names.len()
        )));
    }
    let n_refs = pick(args.n_refs, file.n_refs, 3);
    let subject_seed = pick(args.subject_seed, file.subject_seed, DEFAULT_SUBJECT_SEED);
    let placeholders = ["[V1]", "[V2]"];
    let subjects: Vec<SubjectSet> = subject_names
        .iter()
        .zip(placeholders)
        .enumerate()
        .map(|(i, (name, ph))| {
            Ok(SubjectSet::from_kind(
                resolve_subject_kind(name)?,
                n_refs,
                ph,
                subject_seed.wrapping_add(i as u64),
            ))
        })
        .collect::<Result<_, CliError>>()?;

    let target = pick_required(args.target_prompt.clone(), file.target_prompt.clone())
        .ok_or_else(|| cfg_err("multi needs --target-prompt mentioning [V1] and [V2]"))?;
    let base_path = resolve_base(&args.base, &file)?;
    let base = load_checkpoint(&base_path)?;
    let eval_samples = pick(args.eval_samples, file.eval_samples, DEFAULT_EVAL_SAMPLES);
    let cfg_scale = pick(args.cfg_scale, file.cfg_scale, DEFAULT_EVAL_CFG_SCALE);
    let eval = EvalSpec {
        prompt: target.clone(),
        n_samples: eval_samples,
        cfg_scale,
        seed: config.seed ^ 0xE7A2,
    };

    let mut inputs = HashedInputs::new("multi", config.seed).with_train(&config);
    inputs.subjects = subject_names.clone();
    inputs.n_refs = Some(n_refs);
    inputs.subject_seed = Some(subject_seed);
    inputs.placeholders = placeholders.iter().map(|s| s.to_string()).collect();
    inputs.target_prompt = Some(&target);
    inputs.eval_prompt = Some(&target);
    inputs.eval_samples = Some(eval_samples);
    inputs.cfg_scale = Some(cfg_scale);
    inputs.input_digests = vec![hash_file(Path::new(&base_path)).map_err(cfg_err)?];
    let hash = hash_json(&inputs);
    let run_id = format!(
        "multi-{}-seed{}-{}",
        mode_name(config.guidance.mode),
        config.seed,
        &hash[..8]
    );

    eprintln!("multi: subjects {} + {}, {} steps", subject_names[0], subject_names[1], config.steps);
    let outcome = multi_subject_personalize_with(&base, &subjects, &target, &config, &eval, &run_id)?;
    eprintln!(
        "multi: final text-align {:.3}, subject-sims {:?}",
        outcome.final_text_align,
        outcome
            .final_subject_sims
            .iter()
            .map(|s| (s * 1000.0).round() / 1000.0)
            .collect::<Vec<_>>()
    );

    let mut run = RunDir::create(&root, &run_id, "multi", argv, &hash, config.seed)?;
    run.manifest.checkpoint_inputs.push(base_path.clone());
    run.write_checkpoint(&outcome.checkpoint)?;
    run.write_artifact("metrics.csv", write_metrics_csv(&outcome.metrics).as_bytes())?;
    let schedule = outcome.checkpoint.schedule.build();
    let samples = sample_images(
        &outcome.checkpoint.params,
        outcome.checkpoint.lora.as_ref(),
        &outcome.checkpoint.table,
        &schedule,
        &eval,
    )?;
    let pgm = encode_grid_pgm(&samples, samples.len().clamp(1, 8)).map_err(rt_err)?;
    run.write_artifact("grids/samples.pgm", &pgm)?;
    let dir = run.finish()?;
    println!("{}", dir.display());
    Ok(())
}

fn cmd_ablate(args: AblateArgs, argv: &[String]) -> Result<(), CliError> {
    let file = load_file_config(&args.common)?;
    let root = out_root(&args.common, &file);
    let grid_text = std::fs::read_to_string(&args.grid)
        .map_err(|e| cfg_err(format!("cannot read grid {}: {e}", args.grid.display())))?;
    let grid: AblationGrid = serde_json::from_str(&grid_text)
        .map_err(|e| cfg_err(format!("grid {}: {e}", args.grid.display())))?;
    let subject_name = pick(args.subject.clone(), file.subject.clone(), DEFAULT_SUBJECT.to_owned());
    let kind = resolve_subject_kind(&subject_name)?;
    let n_refs = pick(args.n_refs, file.n_refs, 3);
    let subject_seed = pick(args.subject_seed, file.subject_seed, DEFAULT_SUBJECT_SEED);
    let placeholder = pick(
        args.placeholder.clone(),
        file.placeholder.clone(),
        DEFAULT_PLACEHOLDER.to_owned(),
    );
    let subject = SubjectSet::from_kind(kind, n_refs, &placeholder, subject_seed);
    let target = pick_required(args.target_prompt.clone(), file.target_prompt.clone())
        .ok_or_else(|| cfg_err("ablate needs --target-prompt"))?;
    let base_path = resolve_base(&args.base, &file)?;
    let base = load_checkpoint(&base_path)?;

    let mut inputs = HashedInputs::new("ablate", grid.config.seed).with_train(&grid.config);
    inputs.subjects = vec![subject_name.clone()];
    inputs.n_refs = Some(n_refs);
    inputs.subject_seed = Some(subject_seed);
    inputs.placeholders = vec![placeholder.clone()];
    inputs.target_prompt = Some(&target);
    inputs.input_digests = vec![
        hash_file(Path::new(&base_path)).map_err(cfg_err)?,
        hash_json(&grid_text),
    ];
    let hash = hash_json(&inputs);
    let run_id = format!("ablate-seed{}-{}", grid.config.seed, &hash[..8]);

    eprintln!(
        "ablate: {} modes x {} noise x {} rescale x {} seeds x {} lambdas",
        grid.modes.len(),
        grid.share_noise.len(),
        grid.rescale.len(),
        grid.seeds.len(),
        grid.lambdas.len()
    );
    let outcome = ablation_run(&base, &subject, &target, &grid)?;
    eprintln!("ablate: {} metric rows", outcome.rows.len());

    let mut run = RunDir::create(&root, &run_id, "ablate", argv, &hash, grid.config.seed)?;
    run.manifest.checkpoint_inputs.push(base_path.clone());
    run.write_artifact("metrics.csv", write_metrics_csv(&outcome.rows).as_bytes())?;
    let dir = run.finish()?;
    println!("{}", dir.display());
    Ok(())
}

fn cmd_probe(args: ProbeArgs, argv: &[String]) -> Result<(), CliError> {
    let file = load_file_config(&args.common)?;
    let root = out_root(&args.common, &file);
    let seed = pick(args.seed, file.seed, DEFAULT_PROBE_SEED);
    let grid_text = args.t_grid.clone().unwrap_or_else(|| DEFAULT_PROBE_T_GRID.to_owned());
    let t_grid = parse_t_grid(&grid_text).map_err(cfg_err)?;
    let ckpt = load_checkpoint(&args.ckpt)?;

    let mut inputs = HashedInputs::new("probe", seed);
    inputs.eval_prompt = Some(&args.prompt);
    inputs.t_grid = Some(t_grid.clone());
    inputs.input_digests = vec![hash_file(Path::new(&args.ckpt)).map_err(cfg_err)?];
    let hash = hash_json(&inputs);
    let run_id = format!("probe-seed{seed}-{}", &hash[..8]);

    let rows = x0hat_probe(&ckpt, &args.prompt, &t_grid, seed).map_err(cfg_err)?;
    let cols = rows.len();
    let mut strip = Vec::with_capacity(2 * cols);
    strip.extend(rows.iter().map(|r| r.x_t.clone()));
    strip.extend(rows.iter().map(|r| r.x0_hat.clone()));
    let pgm = encode_grid_pgm(&strip, cols).map_err(rt_err)?;

    let mut run = RunDir::create(&root, &run_id, "probe", argv, &hash, seed)?;
    run.manifest.checkpoint_inputs.push(args.ckpt.clone());
    run.write_artifact("grids/probe.pgm", &pgm)?;
    let dir = run.finish()?;
    println!("{}", dir.display());
    Ok(())
}

fn cmd_report(args: ReportArgs, argv: &[String]) -> Result<(), CliError> {
    let file = load_file_config(&args.common)?;
    let root = out_root(&args.common, &file);
    let runs_root = args.runs.clone().unwrap_or_else(|| root.clone());

    let mut sets = Vec::new();
    let mut scanned = Vec::new();
    let entries = std::fs::read_dir(&runs_root)
        .map_err(|e| cfg_err(format!("cannot read runs dir {runs_root}: {e}")))?;
    for entry in entries {
        let entry = entry.map_err(rt_err)?;
        let csv_path = entry.path().join("metrics.csv");
        if csv_path.is_file() {
            let text = std::fs::read_to_string(&csv_path).map_err(rt_err)?;
            sets.push(parse_metrics_csv(&text).map_err(|e| {
                cfg_err(format!("{}: {e}", csv_path.display()))
            })?);
            scanned.push(entry.file_name().to_string_lossy().into_owned());
        }
    }
    scanned.sort();
    let merged = merge_metrics(sets);

    // Last-step row per run becomes one summary line.
    let mut last: Vec<&MetricsRow> = Vec::new();
    for row in &merged {
        match last.iter_mut().find(|r| r.run_id == row.run_id) {
            Some(slot) if slot.step < row.step => *slot = row,
            Some(_) => {}
            None => last.push(row),
        }
    }
    let mut summaries: Vec<RunSummary> = last
        .iter()
        .map(|r| RunSummary {
            run_id: r.run_id.clone(),
            mode: r.mode.clone(),
            style: None,
            class: None,
            target: r.text_align,
            image_align: (!r.subject_sim.is_nan()).then_some(r.subject_sim),
            samples: 0,
        })
        .collect();

    let mut inputs = HashedInputs::new("report", 0);
    inputs.subjects = scanned.clone();
    if let Some(ckpt) = &args.ckpt {
        inputs.input_digests = vec![hash_file(Path::new(ckpt)).map_err(cfg_err)?];
    }
    let hash = hash_json(&inputs);
    let run_id = format!("report-{}", &hash[..8]);

    let mut run = RunDir::create(&root, &run_id, "report", argv, &hash, 0)?;
    run.write_artifact("metrics.csv", write_metrics_csv(&merged).as_bytes())?;
    if let Some(ckpt_path) = &args.ckpt {
        let ckpt = load_checkpoint(ckpt_path)?;
        run.manifest.checkpoint_inputs.push(ckpt_path.clone());
        let (pgm, cell_rows) = render_cell_grid(&ckpt, 0)?;
        run.write_artifact("grids/cells.pgm", &pgm)?;
        summaries.extend(cell_rows);
    }
    run.write_artifact("summary.json", summary_json(&summaries).as_bytes())?;
    run.write_artifact("summary.txt", summary_table(&summaries).as_bytes())?;
    eprintln!("report: merged {} rows from {} runs", merged.len(), scanned.len());
    let dir = run.finish()?;
    println!("{}", dir.display());
    Ok(())
}
