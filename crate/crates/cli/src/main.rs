//! `motive`: train, sample, compose, evaluate, and inspect motion models.

mod svg;

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use motive_core::composer::{compose_pipeline, CompositionSpec};
use motive_core::denoiser::AgdConfig;
use motive_core::diffusion::{SamplerConfig, Substrate};
use motive_core::evalsuite::{energy_grid, EnergyGrid, PlaneSpec};
use motive_core::io::{
    augment_denoiser, evaluate_model, load_denoiser, load_motion, load_vae, per_sample_seed,
    sample_motion, save_denoiser, save_motion, snapshot_context, train_denoiser_pipeline,
    train_vae_pipeline, write_json, AugmentConfig, EvalConfig, RunConfig,
};
use motive_core::numerics::Tensor2;
use motive_core::toymotion::{make_dataset, read_dataset, ConceptDescription, GeneratorConfig};
use motive_core::vae::MotionVae;
use motive_core::{Error, Result};

#[derive(Parser)]
#[command(
    name = "motive",
    version,
    about = "Energy-guided compositional motion generation on a synthetic stick-figure domain"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic labeled motion dataset.
    MakeDataset(MakeDatasetArgs),
    /// Train the motion autoencoder.
    TrainVae(TrainVaeArgs),
    /// Train a denoiser on the latent or sequence substrate.
    TrainDiffusion(TrainDiffusionArgs),
    /// Sample motions for a single description.
    Sample(SampleArgs),
    /// Sample motions for a composition of descriptions.
    Compose(ComposeArgs),
    /// Run the seeded evaluation protocol against a reference dataset.
    Eval(EvalArgs),
    /// Export an energy grid over a latent plane as CSV and SVG.
    Viz(VizArgs),
    /// Compose new samples, fine-tune on them, and report the recall change.
    Augment(AugmentArgs),
}

#[derive(Args)]
struct MakeDatasetArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 200)]
    count: usize,
    #[arg(long, default_value_t = 0.05)]
    noise: f64,
    #[arg(long, default_value_t = 40)]
    min_len: usize,
    #[arg(long, default_value_t = 112)]
    max_len: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct TrainVaeArgs {
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Run configuration TOML; defaults to the desk profile.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master seed; rederives all subsystem seeds.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    steps: Option<usize>,
    /// Training log path; defaults to the checkpoint path plus ".log.json".
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Args)]
struct TrainDiffusionArgs {
    #[arg(long)]
    dataset: PathBuf,
    /// Autoencoder checkpoint; required on the latent substrate.
    #[arg(long)]
    vae: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    steps: Option<usize>,
    /// Override the substrate: "latent" or "sequence".
    #[arg(long)]
    substrate: Option<String>,
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Args)]
struct SampleArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    vae: Option<PathBuf>,
    /// Concept description, e.g. "direction:+x,left-limb:wave".
    #[arg(long)]
    desc: String,
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long, default_value_t = 1)]
    count: usize,
    #[arg(long, default_value_t = 96)]
    length: usize,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    guidance: Option<f64>,
    #[arg(long)]
    steps: Option<usize>,
    /// Also write an SVG with the x-y path and per-channel traces.
    #[arg(long)]
    svg: bool,
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct ComposeArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    vae: Option<PathBuf>,
    /// Composition spec TOML.
    #[arg(long)]
    spec: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long, default_value_t = 1)]
    count: usize,
    #[arg(long, default_value_t = 96)]
    length: usize,
    /// Overrides the spec's sampler seed, rederived per composition.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    svg: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    vae: Option<PathBuf>,
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 20)]
    per_concept: usize,
    #[arg(long, default_value_t = 100)]
    pairs: usize,
    #[arg(long, default_value_t = 8)]
    subset: usize,
    #[arg(long, default_value_t = 96)]
    length: usize,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    guidance: Option<f64>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct VizArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Description conditioning the scored noise; empty for unconditional.
    #[arg(long, default_value = "")]
    desc: String,
    /// Diffusion time of the probe; defaults to the schedule midpoint.
    #[arg(long)]
    t: Option<usize>,
    #[arg(long, default_value_t = 32)]
    resolution: usize,
    /// Grid coordinate "row,col" varied along the first axis.
    #[arg(long, default_value = "0,0")]
    coord_a: String,
    #[arg(long, default_value = "0,1")]
    coord_b: String,
    #[arg(long, default_value_t = -3.0)]
    lo: f64,
    #[arg(long, default_value_t = 3.0)]
    hi: f64,
    /// Gaussian smoothing sigma for the rendered SVG only.
    #[arg(long)]
    smooth: Option<f64>,
    #[arg(long, default_value_t = 8)]
    levels: usize,
    /// Writes <prefix>.csv and <prefix>.svg.
    #[arg(long)]
    out_prefix: PathBuf,
}

#[derive(Args)]
struct AugmentArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    vae: Option<PathBuf>,
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    report: PathBuf,
    #[arg(long, default_value_t = 500)]
    count: usize,
    #[arg(long, default_value_t = 300)]
    finetune_steps: usize,
    #[arg(long, default_value_t = 0.1)]
    lr_scale: f64,
    #[arg(long, default_value_t = 20)]
    eval_per_concept: usize,
    #[arg(long, default_value_t = 96)]
    length: usize,
    #[arg(long, default_value_t = 1000)]
    resamples: usize,
    #[arg(long, default_value_t = 0.95)]
    confidence: f64,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    config: Option<PathBuf>,
}

fn exit_code(e: &Error) -> i32 {
    match e {
        Error::InvalidInput(_) | Error::Shape(_) | Error::Config(_) => 2,
        Error::Io(_) | Error::Format(_) => 3,
        Error::TrainingFailure { .. } | Error::State(_) => 4,
        Error::SamplingFailure { .. } => 5,
        Error::DegenerateWeights(_) => 6,
    }
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error: {e}");
        std::process::exit(exit_code(&e));
    }
}

/// Loads the run config (desk profile when absent) and reapplies the master
/// seed to every subsystem.
fn load_run(config: &Option<PathBuf>, seed: Option<u64>) -> Result<RunConfig> {
    let mut run = match config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::desk(0),
    };
    if let Some(seed) = seed {
        apply_seed(&mut run, seed);
    }
    run.validate()?;
    Ok(run)
}

// Echoed configs serialize to TOML, whose integers are i64; derived seeds
// stay below that ceiling so every echo is writable.
const SEED_MASK: u64 = i64::MAX as u64;

fn apply_seed(run: &mut RunConfig, seed: u64) {
    run.seed = seed & SEED_MASK;
    run.vae_train.seed = per_sample_seed(seed, "vae-train", 0) & SEED_MASK;
    run.diffusion_train.seed = per_sample_seed(seed, "diffusion-train", 0) & SEED_MASK;
    run.sampler.seed = per_sample_seed(seed, "sampler", 0) & SEED_MASK;
}

fn echo(command: &str, seed: u64, config_toml: &str) {
    println!("command: {command}");
    println!("seed: {seed}");
    println!("config:");
    for line in config_toml.lines() {
        println!("  {line}");
    }
}

fn echo_value<T: serde::Serialize>(command: &str, seed: u64, value: &T) -> Result<()> {
    let text = toml::to_string_pretty(value)
        .map_err(|e| Error::Config(format!("serialize config: {e}")))?;
    echo(command, seed, &text);
    Ok(())
}

#[derive(serde::Serialize)]
struct TrainLogDoc<'a> {
    command: &'a str,
    seed: u64,
    final_loss: f64,
    losses: &'a [(usize, f64)],
    config: &'a str,
}

fn write_train_log(
    path: &Path,
    command: &str,
    run: &RunConfig,
    log: &motive_core::vae::TrainLog,
) -> Result<()> {
    let doc = TrainLogDoc {
        command,
        seed: run.seed,
        final_loss: log.final_loss,
        losses: &log.losses,
        config: &run.to_toml()?,
    };
    write_json(path, &doc)
}

fn default_log_path(ckpt: &Path) -> PathBuf {
    let mut name = ckpt.as_os_str().to_os_string();
    name.push(".log.json");
    PathBuf::from(name)
}

fn load_vae_if_given(path: &Option<PathBuf>) -> Result<Option<MotionVae>> {
    Ok(match path {
        Some(p) => Some(load_vae(p)?.0),
        None => None,
    })
}

fn parse_coord(text: &str) -> Result<(usize, usize)> {
    let parts: Vec<&str> = text.split(',').collect();
    if parts.len() != 2 {
        return Err(Error::invalid(format!("coordinate '{text}' is not 'row,col'")));
    }
    let r = parts[0].trim().parse().map_err(|_| Error::invalid("coordinate row not a number"))?;
    let c = parts[1].trim().parse().map_err(|_| Error::invalid("coordinate col not a number"))?;
    Ok((r, c))
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::MakeDataset(a) => cmd_make_dataset(a),
        Cmd::TrainVae(a) => cmd_train_vae(a),
        Cmd::TrainDiffusion(a) => cmd_train_diffusion(a),
        Cmd::Sample(a) => cmd_sample(a),
        Cmd::Compose(a) => cmd_compose(a),
        Cmd::Eval(a) => cmd_eval(a),
        Cmd::Viz(a) => cmd_viz(a),
        Cmd::Augment(a) => cmd_augment(a),
    }
}

fn cmd_make_dataset(a: MakeDatasetArgs) -> Result<()> {
    let cfg = GeneratorConfig {
        count: a.count,
        min_len: a.min_len,
        max_len: a.max_len,
        noise_level: a.noise,
        seed: a.seed,
        ..Default::default()
    };
    echo(
        "make-dataset",
        a.seed,
        &format!(
            "count = {}\nmin_len = {}\nmax_len = {}\nnoise_level = {}",
            cfg.count, cfg.min_len, cfg.max_len, cfg.noise_level
        ),
    );
    let ds = make_dataset(&cfg, &a.out)?;
    let back = read_dataset(&a.out)?;
    if back.records.len() != ds.records.len() {
        return Err(Error::Format("written dataset failed to read back".into()));
    }
    println!("wrote {} ({} records)", a.out.display(), ds.records.len());
    Ok(())
}

fn cmd_train_vae(a: TrainVaeArgs) -> Result<()> {
    let mut run = load_run(&a.config, a.seed)?;
    if let Some(steps) = a.steps {
        run.vae_train.steps = steps;
    }
    echo("train-vae", run.seed, &run.to_toml()?);
    let ds = read_dataset(&a.dataset)?;
    let (_, log) = train_vae_pipeline(&ds, &run, Some(&a.out))?;
    load_vae(&a.out)?;
    let log_path = a.log.unwrap_or_else(|| default_log_path(&a.out));
    write_train_log(&log_path, "train-vae", &run, &log)?;
    println!("final loss: {:.6}", log.final_loss);
    println!("wrote {}", a.out.display());
    println!("wrote {}", log_path.display());
    Ok(())
}

fn cmd_train_diffusion(a: TrainDiffusionArgs) -> Result<()> {
    let mut run = load_run(&a.config, a.seed)?;
    if let Some(steps) = a.steps {
        run.diffusion_train.steps = steps;
    }
    if let Some(sub) = &a.substrate {
        run.sampler.substrate = match sub.as_str() {
            "latent" => Substrate::Latent,
            "sequence" => Substrate::Sequence,
            other => return Err(Error::Config(format!("unknown substrate '{other}'"))),
        };
        run.validate()?;
    }
    echo("train-diffusion", run.seed, &run.to_toml()?);
    let ds = read_dataset(&a.dataset)?;
    let vae = load_vae_if_given(&a.vae)?;
    let (_, _, log) = train_denoiser_pipeline(&ds, vae.as_ref(), &run, Some(&a.out))?;
    load_denoiser(&a.out)?;
    let log_path = a.log.unwrap_or_else(|| default_log_path(&a.out));
    write_train_log(&log_path, "train-diffusion", &run, &log)?;
    println!("final loss: {:.6}", log.final_loss);
    println!("wrote {}", a.out.display());
    println!("wrote {}", log_path.display());
    Ok(())
}

/// Sampler resolved from the run config, the checkpoint substrate, and the
/// command-line overrides.
fn resolve_sampler(
    run: &RunConfig,
    substrate: Substrate,
    guidance: Option<f64>,
    steps: Option<usize>,
) -> SamplerConfig {
    SamplerConfig {
        substrate,
        guidance_weight: guidance.unwrap_or(run.sampler.guidance_weight),
        steps: steps.unwrap_or(run.sampler.steps),
        ..run.sampler
    }
}

fn cmd_sample(a: SampleArgs) -> Result<()> {
    let run = load_run(&a.config, a.seed)?;
    let (den, snapshot, _) = load_denoiser(&a.checkpoint)?;
    let vae = load_vae_if_given(&a.vae)?;
    let desc = ConceptDescription::parse(&a.desc)?;
    let sampler = resolve_sampler(&run, snapshot.substrate, a.guidance, a.steps);
    echo_value("sample", run.seed, &sampler)?;
    std::fs::create_dir_all(&a.out_dir)?;
    for i in 0..a.count {
        let cfg = SamplerConfig {
            seed: per_sample_seed(sampler.seed, "cli-sample", i as u64),
            ..sampler
        };
        let motion =
            sample_motion(&den, &snapshot, vae.as_ref(), &desc, &cfg, run.agd, a.length)?;
        let path = a.out_dir.join(format!("motion_{i:03}.json"));
        save_motion(&path, &motion, &desc)?;
        load_motion(&path)?;
        println!("wrote {}", path.display());
        if a.svg {
            let svg_path = a.out_dir.join(format!("motion_{i:03}.svg"));
            std::fs::write(&svg_path, svg::motion_svg(&motion))?;
            println!("wrote {}", svg_path.display());
        }
    }
    Ok(())
}

fn cmd_compose(a: ComposeArgs) -> Result<()> {
    let text = std::fs::read_to_string(&a.spec)?;
    let spec = CompositionSpec::from_toml(&text)?;
    let (den, snapshot, _) = load_denoiser(&a.checkpoint)?;
    let vae = load_vae_if_given(&a.vae)?;
    let ctx = snapshot_context(&snapshot, vae.as_ref())?;
    let schedule = snapshot.schedule.build()?;
    let base_seed = a.seed.unwrap_or(spec.sampler.seed);
    echo_value("compose", base_seed, &spec)?;
    std::fs::create_dir_all(&a.out_dir)?;
    for i in 0..a.count {
        let mut spec_i = spec.clone();
        spec_i.sampler.seed = per_sample_seed(base_seed, "cli-compose", i as u64);
        let (motion, diag) = compose_pipeline(&den, &schedule, &spec_i, &ctx, a.length)?;
        let joint = spec_i.joint_desc.clone().unwrap_or_else(ConceptDescription::empty);
        let path = a.out_dir.join(format!("compose_{i:03}.json"));
        save_motion(&path, &motion, &joint)?;
        load_motion(&path)?;
        let diag_path = a.out_dir.join(format!("diagnostics_{i:03}.json"));
        write_json(&diag_path, &diag)?;
        println!("wrote {}", path.display());
        println!("wrote {}", diag_path.display());
        if a.svg {
            let svg_path = a.out_dir.join(format!("compose_{i:03}.svg"));
            std::fs::write(&svg_path, svg::motion_svg(&motion))?;
            println!("wrote {}", svg_path.display());
        }
    }
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let run = load_run(&a.config, a.seed)?;
    let (den, snapshot, _) = load_denoiser(&a.checkpoint)?;
    let vae = load_vae_if_given(&a.vae)?;
    let ds = read_dataset(&a.dataset)?;
    let sampler = resolve_sampler(&run, snapshot.substrate, a.guidance, a.steps);
    let cfg = EvalConfig {
        samples_per_concept: a.per_concept,
        diversity_pairs: a.pairs,
        multimodality_subset: a.subset,
        length: a.length,
        seed: run.seed,
    };
    echo_value("eval", run.seed, &cfg)?;
    let report = evaluate_model(&den, &snapshot, vae.as_ref(), &ds, &sampler, run.agd, &cfg)?;
    write_json(&a.out, &report)?;
    println!("samples: {}", report.samples);
    println!("recall: {:.4}", report.recall.recall);
    println!("frechet: {:.4}", report.frechet);
    println!("diversity: {:.4}", report.diversity);
    println!("multimodality: {:.4}", report.multimodality);
    println!("mean transition: {:.4}", report.mean_transition);
    println!("mean jerk: {:.4}", report.mean_jerk);
    println!("wrote {}", a.out.display());
    Ok(())
}

fn cmd_viz(a: VizArgs) -> Result<()> {
    let (den, snapshot, _) = load_denoiser(&a.checkpoint)?;
    let desc = ConceptDescription::parse(&a.desc)?;
    let t = a.t.unwrap_or(snapshot.schedule.t_max / 2);
    let plane = PlaneSpec {
        coord_a: parse_coord(&a.coord_a)?,
        coord_b: parse_coord(&a.coord_b)?,
        a_range: (a.lo, a.hi),
        b_range: (a.lo, a.hi),
    };
    echo_value("viz", t as u64, &plane)?;
    let anchor = Tensor2::zeros(den.config.max_tokens, den.config.input_dim);
    let emb = den.embed_description(&desc);
    let grid = energy_grid(
        |x, t| den.predict_eps(x, t, &emb, AgdConfig::OFF),
        &anchor,
        t as f64,
        &plane,
        (a.resolution, a.resolution),
    )?;
    let csv_path = a.out_prefix.with_extension("csv");
    let svg_path = a.out_prefix.with_extension("svg");
    std::fs::write(&csv_path, grid.to_csv())?;
    let back = EnergyGrid::from_csv(&std::fs::read_to_string(&csv_path)?)?;
    if back != grid {
        return Err(Error::Format("written grid failed to read back".into()));
    }
    std::fs::write(&svg_path, grid.to_svg(a.smooth, a.levels))?;
    println!("wrote {}", csv_path.display());
    println!("wrote {}", svg_path.display());
    Ok(())
}

fn cmd_augment(a: AugmentArgs) -> Result<()> {
    let run = load_run(&a.config, a.seed)?;
    let (mut den, snapshot, ckpt) = load_denoiser(&a.checkpoint)?;
    let vae = load_vae_if_given(&a.vae)?;
    let ds = read_dataset(&a.dataset)?;
    let cfg = AugmentConfig {
        count: a.count,
        length: a.length,
        finetune_steps: a.finetune_steps,
        lr_scale: a.lr_scale,
        eval_per_concept: a.eval_per_concept,
        bootstrap_resamples: a.resamples,
        confidence: a.confidence,
        seed: run.seed,
    };
    echo_value("augment", run.seed, &cfg)?;
    let report = augment_denoiser(&mut den, &snapshot, vae.as_ref(), &ds, &run, &cfg)?;
    let step = ckpt.step + if report.finetuned { a.finetune_steps as u64 } else { 0 };
    save_denoiser(&a.out, &den, &snapshot, step, ckpt.rng)?;
    load_denoiser(&a.out)?;
    write_json(&a.report, &report)?;
    println!("composed: {} of {} (skipped {})", report.composed, report.requested, report.skipped);
    println!(
        "recall before: {:.4} [{:.4}, {:.4}]",
        report.recall_before, report.ci_before.0, report.ci_before.1
    );
    println!(
        "recall after: {:.4} [{:.4}, {:.4}]",
        report.recall_after, report.ci_after.0, report.ci_after.1
    );
    println!("delta: {:+.4}", report.delta);
    println!("wrote {}", a.out.display());
    println!("wrote {}", a.report.display());
    Ok(())
}
