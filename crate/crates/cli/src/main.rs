use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use deig_core::checkpoint::Checkpoint;
use deig_core::condition::GenerationCondition;
use deig_core::config::RunConfig;
use deig_core::dfm::{assign_visual_membership, build_instance_mask};
use deig_core::diffusion::{DeigModel, MaskMode};
use deig_core::dump::{attention_csv, mask_pgm, mask_summary, trace_attention};
use deig_core::error::{DeigError, Result, EXIT_OK, EXIT_USAGE};
use deig_core::experiment::{evaluate_dirs, run_ablation, run_pipeline, train_model, training_scenes, Ablation, LOSS_FILE};
use deig_core::gradcheck::{op_suite, stack_check};
use deig_core::synth::scene::SceneSpec;
use deig_core::synth::{generate_bench, write_bench_dir};
use deig_core::tensor::corrupt_gradient;

/// Instance-masked multi-instance generation at desk scale.
///
/// Exit codes: 0 success, 1 usage error, 2 contract violation, 3 numerical
/// failure. DEIG_SEED overrides the config seed.
#[derive(Parser)]
#[command(name = "deig", version)]
struct Cli {
    /// Worker threads for sampling; results do not depend on it.
    #[arg(long, global = true, default_value_t = 1)]
    jobs: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate benchmark scenes with ground-truth renderings.
    GenBench {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        /// Number of scenes [default: experiment.eval_scenes].
        #[arg(long)]
        count: Option<usize>,
    },
    /// Train both phases on seeded training scenes.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Checkpoint path; the loss curve and effective config go next to it.
        #[arg(long)]
        out: PathBuf,
    },
    /// Sample one scene from a checkpoint into a binary PPM.
    Sample {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        scene: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score images against a benchmark directory.
    Eval {
        #[arg(long)]
        bench: PathBuf,
        /// Directory of images named like the bench renderings [default: the bench itself].
        #[arg(long)]
        images: Option<PathBuf>,
        /// Report JSON path.
        #[arg(long)]
        out: PathBuf,
        /// Optional per-instance CSV path.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Train and evaluate ablation arms (reusing checkpoints found under --out).
    Ablate {
        #[arg(long, value_enum)]
        what: What,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write a scene's instance mask as PGM plus a JSON summary.
    DumpMask {
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write every attention map of one denoising step as CSV.
    DumpAttn {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        scene: PathBuf,
        /// Diffusion timestep.
        #[arg(long, default_value_t = 0)]
        t: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the finite-difference gradient suite.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Scale the named op's gradient (negative control).
        #[arg(long, hide = true)]
        corrupt: Option<String>,
    },
    /// gen-bench, train, sample and eval in one go.
    Pipeline {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum What {
    Mask,
    SDim,
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p),
        None => {
            let mut cfg = RunConfig::default();
            cfg.apply_env()?;
            Ok(cfg)
        }
    }
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| DeigError::io(dir, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| DeigError::io(path, e))
}

fn load_model(path: &Path) -> Result<DeigModel> {
    Ok(DeigModel::from_checkpoint(&Checkpoint::load(path)?, None)?)
}

fn run(cli: Cli) -> Result<()> {
    let jobs = cli.jobs.max(1);
    match cli.command {
        Command::GenBench { config, out, count } => {
            let cfg = load_config(config.as_deref())?;
            let scenes = generate_bench(cfg.seed, count.unwrap_or(cfg.experiment.eval_scenes), &cfg.bench)?;
            write_bench_dir(&out, cfg.seed, &scenes, cfg.bench.resolution)?;
            cfg.echo(&out)?;
            println!("{}", serde_json::json!({ "scenes": scenes.len(), "out": out }));
        }
        Command::Train { config, out } => {
            let cfg = load_config(config.as_deref())?;
            let dir = out.parent().map(Path::to_path_buf).unwrap_or_default();
            cfg.echo(&dir)?;
            let trained = train_model(&cfg, &training_scenes(&cfg)?)?;
            write(&out, trained.model.to_checkpoint().to_bytes())?;
            let losses = dir.join(LOSS_FILE);
            trained.curve.save_csv(&losses).map_err(|e| DeigError::io(&losses, e))?;
            let last = trained.curve.records.last().map(|r| r.loss);
            println!("{}", serde_json::json!({ "checkpoint": out, "loss_csv": losses, "last_loss": last }));
        }
        Command::Sample { ckpt, scene, seed, out } => {
            let model = load_model(&ckpt)?;
            let scene = SceneSpec::load(&scene).map_err(|e| DeigError::Usage(e.to_string()))?;
            let image = model.sample(&GenerationCondition::from_scene(&scene), seed)?;
            write(&out, image.to_ppm())?;
        }
        Command::Eval { bench, images, out, csv } => {
            let report = evaluate_dirs(&bench, images.as_deref().unwrap_or(&bench))?;
            write(&out, report.to_json())?;
            if let Some(p) = csv {
                write(&p, report.to_csv())?;
            }
            println!(
                "{}",
                serde_json::json!({
                    "maa_human": report.maa_human,
                    "maa_obj": report.maa_obj,
                    "miou": report.miou,
                    "leakage": report.leakage,
                    "unevaluable": report.unevaluable,
                })
            );
        }
        Command::Ablate { what, config, out } => {
            let cfg = load_config(config.as_deref())?;
            let what = match what {
                What::Mask => Ablation::Mask,
                What::SDim => Ablation::SDim,
            };
            cfg.echo(&out)?;
            let report = run_ablation(&cfg, what, Some(&out), jobs)?;
            write(&out.join("ablation.json"), report.to_json())?;
            write(&out.join("ablation.csv"), report.to_csv())?;
            print!("{}", report.to_csv());
        }
        Command::DumpMask { scene, config, out } => {
            let cfg = load_config(config.as_deref())?;
            let scene = SceneSpec::load(&scene).map_err(|e| DeigError::Usage(e.to_string()))?;
            let d = &cfg.diffusion;
            let boxes = scene.boxes();
            let mut mask = build_instance_mask(&assign_visual_membership(&boxes, d.grid_h, d.grid_w), boxes.len(), cfg.ide.s);
            if d.mask == MaskMode::None {
                mask = mask.unmasked();
            }
            write(&out.join("mask.pgm"), mask_pgm(&mask))?;
            let summary = serde_json::to_string_pretty(&mask_summary(&mask)).expect("summary serializes");
            write(&out.join("mask.json"), summary)?;
        }
        Command::DumpAttn { ckpt, scene, t, seed, out } => {
            let model = load_model(&ckpt)?;
            let scene = SceneSpec::load(&scene).map_err(|e| DeigError::Usage(e.to_string()))?;
            let trace = trace_attention(&model, &scene, t, seed)?;
            write(&out, attention_csv(&trace))?;
        }
        Command::Gradcheck { seed, corrupt } => {
            let _guard = corrupt.map(|op| corrupt_gradient(Box::leak(op.into_boxed_str())));
            let mut rows = op_suite(seed).map_err(|e| DeigError::Numerical(e.to_string()))?;
            rows.push(stack_check(seed).map_err(|e| DeigError::Numerical(e.to_string()))?);
            println!("{:<22} {:>12} {:>8} {:>8}  result", "op", "max_rel_err", "tol", "elements");
            let mut failed = Vec::new();
            for r in &rows {
                let verdict = if r.passed() { "PASS" } else { "FAIL" };
                println!(
                    "{:<22} {:>12.3e} {:>8.0e} {:>8}  {verdict}",
                    r.check.name, r.check.max_rel_err, r.tol, r.check.elements
                );
                if !r.passed() {
                    failed.push(r.check.name.clone());
                }
            }
            if !failed.is_empty() {
                return Err(DeigError::Numerical(format!("gradient check failed for: {}", failed.join(", "))));
            }
        }
        Command::Pipeline { config, out } => {
            let cfg = load_config(config.as_deref())?;
            let result = run_pipeline(&cfg, &out, jobs)?;
            println!(
                "{}",
                serde_json::json!({
                    "out": out,
                    "maa": result.report.overall_maa(),
                    "miou": result.report.miou,
                    "leakage": result.report.leakage,
                })
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return ExitCode::from(code as u8);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
