//! `maskprior` command-line interface.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;

use maskprior::eval::{load_gt_transient, report};
use maskprior::geometry::{sample_view_cluster, scene_points};
use maskprior::pipeline::{self, RUN_MANIFEST};
use maskprior::scene_io::load_prior_masks;
use maskprior::synth::{generate_to_dir, generate_warmup_frames, SynthSpec, WarmupSpec};
use maskprior::warmup::{simulate, WarmupSequence};
use maskprior::{load_scene, PipelineConfig, VlmMode};

#[derive(Parser)]
#[command(name = "maskprior", version, about = "Static mask priors from cross-view attention")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Compute static mask priors for a scene directory.
    Run(RunArgs),
    /// Generate a synthetic scene (or warm-up sequence) from a JSON spec.
    Synth(SynthArgs),
    /// Score saved priors against a scene's ground-truth transient masks.
    Eval(EvalArgs),
    /// Replay a warm-up sequence through the mask model.
    WarmupSim(WarmupArgs),
    /// Pick a co-visible subset of views.
    SampleViews(SampleArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum VlmFlag {
    Off,
    Endpoint,
}

#[derive(Args)]
struct RunArgs {
    scene_dir: PathBuf,
    out_dir: PathBuf,
    /// JSON config file; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    recall_threshold: Option<f64>,
    #[arg(long)]
    cd_threshold: Option<f64>,
    #[arg(long)]
    score_frac: Option<f64>,
    #[arg(long)]
    min_region_pixels: Option<usize>,
    #[arg(long)]
    warmup_iters: Option<u64>,
    #[arg(long)]
    occupancy_frac: Option<f64>,
    #[arg(long)]
    max_query_tokens: Option<usize>,
    #[arg(long)]
    max_cd_points: Option<usize>,
    #[arg(long)]
    point_stride: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads (0 = all cores).
    #[arg(long)]
    jobs: Option<usize>,
    #[arg(long, value_enum)]
    vlm: Option<VlmFlag>,
    #[arg(long)]
    vlm_url: Option<String>,
    #[arg(long)]
    vlm_model: Option<String>,
    #[arg(long)]
    vlm_timeout_secs: Option<f64>,
    #[arg(long)]
    vlm_max_attempts: Option<u32>,
    #[arg(long)]
    vlm_concurrency: Option<usize>,
    #[arg(long)]
    palette_seed: Option<u64>,
    /// Print the effective config and exit.
    #[arg(long)]
    print_config: bool,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Interpret the spec as a warm-up sequence spec.
    #[arg(long)]
    warmup: bool,
    /// Overrides the spec's seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct EvalArgs {
    /// Scene directory holding `gt/`.
    scene_dir: PathBuf,
    /// Run output directory holding `priors/`.
    run_dir: PathBuf,
    /// Where to write the report; defaults to `run_dir`.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = 0.5)]
    score_frac: f64,
    #[arg(long, default_value_t = 0.2)]
    cd_threshold: f64,
}

#[derive(Args)]
struct WarmupArgs {
    /// Directory written by `synth --warmup`.
    frames: PathBuf,
    out: PathBuf,
    #[arg(long, default_value_t = 1000)]
    iterations: u64,
    #[arg(long, default_value_t = 500)]
    warmup_iters: u64,
    #[arg(long)]
    reg_weight: Option<f64>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    blur_radius: Option<usize>,
    #[arg(long)]
    ssim_lambda: Option<f64>,
    /// Save the trainer mask every this many iterations (0 disables).
    #[arg(long, default_value_t = 100)]
    mask_every: u64,
}

#[derive(Args)]
struct SampleArgs {
    scene_dir: PathBuf,
    #[arg(long, short)]
    k: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 4)]
    stride: usize,
}

/// Exit codes by failing stage.
mod exit {
    pub const VALIDATION: u8 = 2;
    pub const ATTENTION: u8 = 3;
    pub const VLM: u8 = 4;
    pub const IO: u8 = 5;
}

fn exit_code(err: &anyhow::Error) -> u8 {
    use maskprior::Error as E;
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<E>() {
            return match e {
                E::AttentionUnavailable { .. } => exit::ATTENTION,
                E::Vlm { .. } | E::VlmTimeout(_) | E::VerdictParse => exit::VLM,
                E::Io { .. } | E::Image { .. } | E::Load { .. } => exit::IO,
                _ => exit::VALIDATION,
            };
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return exit::IO;
        }
        if cause.downcast_ref::<serde_json::Error>().is_some() {
            return exit::VALIDATION;
        }
    }
    exit::VALIDATION
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let res = match cli.command {
        Command::Run(a) => cmd_run(a),
        Command::Synth(a) => cmd_synth(a),
        Command::Eval(a) => cmd_eval(a),
        Command::WarmupSim(a) => cmd_warmup(a),
        Command::SampleViews(a) => cmd_sample(a),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn effective_config(a: &RunArgs) -> Result<PipelineConfig> {
    let mut c: PipelineConfig = match &a.config {
        Some(p) => read_json(p)?,
        None => PipelineConfig::default(),
    };
    macro_rules! set {
        ($($flag:ident => $($field:ident).+),* $(,)?) => {
            $(if let Some(v) = a.$flag.clone() { c.$($field).+ = v; })*
        };
    }
    set!(
        recall_threshold => recall_threshold,
        cd_threshold => cd_threshold,
        score_frac => score_frac,
        min_region_pixels => min_region_pixels,
        warmup_iters => warmup_iters,
        occupancy_frac => occupancy_frac,
        max_query_tokens => max_query_tokens,
        max_cd_points => max_cd_points,
        point_stride => point_stride,
        seed => seed,
        jobs => jobs,
        vlm_model => vlm.model,
        vlm_timeout_secs => vlm.timeout_secs,
        vlm_max_attempts => vlm.max_attempts,
        vlm_concurrency => vlm.concurrency,
        palette_seed => vlm.palette_seed,
    );
    if let Some(u) = &a.vlm_url {
        c.vlm.url = Some(u.clone());
    }
    if let Some(m) = a.vlm {
        c.vlm.mode = match m {
            VlmFlag::Off => VlmMode::Off,
            VlmFlag::Endpoint => VlmMode::Endpoint,
        };
    }
    c.validate()?;
    Ok(c)
}

fn cmd_run(a: RunArgs) -> Result<()> {
    let cfg = effective_config(&a)?;
    if a.print_config {
        println!("{}", serde_json::to_string_pretty(&cfg)?);
        return Ok(());
    }
    let summary = pipeline::run(&a.scene_dir, &a.out_dir, &cfg, None)?;
    let m = &summary.manifest;
    println!(
        "{}: {} views, {} usable pairs, {} skipped, {} vlm verdicts, {}/{} points kept",
        m.scene,
        m.num_views,
        m.usable_pairs,
        m.skipped_pairs.len(),
        m.vlm_verdicts,
        m.points_kept,
        m.points_total
    );
    if let Some(r) = &summary.report {
        print!("{}", r.to_table());
    }
    info!("wrote {}", a.out_dir.join(RUN_MANIFEST).display());
    Ok(())
}

fn cmd_synth(a: SynthArgs) -> Result<()> {
    if a.warmup {
        let mut spec: WarmupSpec = match &a.spec {
            Some(p) => read_json(p)?,
            None => WarmupSpec::default(),
        };
        if let Some(s) = a.seed {
            spec.seed = s;
        }
        let seq = generate_warmup_frames(&spec)?;
        seq.save(&a.out)?;
        println!("wrote {} warm-up frames to {}", seq.frames.len(), a.out.display());
        return Ok(());
    }
    let mut spec: SynthSpec = match &a.spec {
        Some(p) => read_json(p)?,
        None => SynthSpec::default(),
    };
    if let Some(s) = a.seed {
        spec.seed = s;
    }
    let scene = generate_to_dir(&spec, &a.out)?;
    let transients = scene.truth.entities.iter().filter(|e| !e.is_static).count();
    println!(
        "wrote {}-view scene with {} entities ({} transient) to {}",
        spec.num_views,
        scene.truth.entities.len(),
        transients,
        a.out.display()
    );
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let priors = load_prior_masks(&a.run_dir)?;
    let n = priors.len();
    let gt = load_gt_transient(&a.scene_dir, n)?;
    let name = a
        .scene_dir
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let r = report(&name, &priors, gt.as_deref(), None, a.score_frac * n as f64, a.cd_threshold)?;
    r.write(a.out.as_deref().unwrap_or(&a.run_dir))?;
    print!("{}", r.to_table());
    Ok(())
}

fn cmd_warmup(a: WarmupArgs) -> Result<()> {
    let seq = WarmupSequence::load(&a.frames)?;
    let mut cfg = maskprior::WarmupConfig::default();
    if let Some(v) = a.reg_weight {
        cfg.reg_weight = v;
    }
    if let Some(v) = a.learning_rate {
        cfg.learning_rate = v;
    }
    if let Some(v) = a.blur_radius {
        cfg.blur_radius = v;
    }
    if let Some(v) = a.ssim_lambda {
        cfg.ssim_lambda = v;
    }
    let run = simulate(&seq, &cfg, a.warmup_iters, a.iterations)?;
    let masks_dir = a.out.join("masks");
    std::fs::create_dir_all(&masks_dir).with_context(|| format!("creating {}", masks_dir.display()))?;
    std::fs::write(a.out.join("losses.csv"), run.to_csv()).context("writing losses.csv")?;
    for (it, mask) in &run.masks {
        let keep = *it == 1 || *it == a.iterations || (a.mask_every > 0 && it % a.mask_every == 0);
        if keep {
            mask.save_png(&masks_dir.join(format!("iter_{it:06}.png")))?;
        }
    }
    if let Some(last) = run.rows.last() {
        println!(
            "iteration {}: distractor M_hat {:.4}, background M_hat {:.4}, mask loss {:.6}",
            last.iteration, last.distractor_m_hat, last.background_m_hat, last.mask_loss
        );
    }
    Ok(())
}

fn cmd_sample(a: SampleArgs) -> Result<()> {
    let scene = load_scene(&a.scene_dir)?;
    let points = scene_points::<f64>(&scene, a.stride)?;
    let cluster = sample_view_cluster(&scene, a.k, a.seed, &points)?;
    println!("{}", serde_json::to_string(&cluster)?);
    Ok(())
}
