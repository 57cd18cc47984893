//! Command-line driver for the localization pipeline.
//!
//! Every verb operates on one run directory (`--out-dir`): `gen-scene`
//! writes the procedural scene recipe, `render-gt` renders the reference
//! views, `train-nerf` and `train-diffusion` fit the radiance field and pose
//! prior, and `localize` / `evaluate` / `ablate` / `sweep` produce result
//! files. Exit codes: 0 success, 1 usage or runtime error, 2 missing
//! artifact (an earlier stage has not run), 3 non-finite training loss.
//!
//! With `--threads 1` every output file is byte-identical across repeated
//! runs with the same seed; measured timing columns are serialized as zero
//! in that mode since wall-clock times are never reproducible.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use poseloc::config::AppConfig;
use poseloc::datasets::atomic_write;
use poseloc::eval::{
    self, EvalError, Method, SweepAxis, ThresholdSpec, ABLATE_CSV, ABLATE_METHODS,
    DIFFUSION_CHECKPOINT, EVALUATE_METHODS, EVAL_CSV, NERF_CHECKPOINT, SCENE_SPEC, SWEEP_CSV,
};
use poseloc::posediff::DiffusionError;
use poseloc::radiance::RadianceError;

#[derive(Parser)]
#[command(
    name = "poseloc",
    version,
    about = "Camera localization in a learned radiance field via pose diffusion \
             and photometric refinement, on procedural scenes"
)]
struct Cli {
    /// TOML configuration file; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Seed override for the invoked stage (scene content, training run, or
    /// evaluation seed list, depending on the verb).
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Worker thread count. 1 pins the run to a single thread and makes
    /// every output file byte-reproducible.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,

    /// Run directory that stages read from and write into.
    #[arg(long, global = true, default_value = "run")]
    out_dir: PathBuf,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the procedural scene recipe (scene.json) into the run directory.
    GenScene,
    /// Render the reference views and posed dataset described by scene.json.
    RenderGt,
    /// Train the radiance field on the training split; writes nerf.ckpt.
    TrainNerf,
    /// Train the pose prior on the training split; writes diffusion.ckpt.
    TrainDiffusion,
    /// Localize one test view and write its query record.
    Localize {
        /// Position of the query within the test split.
        #[arg(long, default_value_t = 0)]
        query: usize,
        /// full | diffusion_only | monte_carlo | integrated | plain
        #[arg(long, default_value = "full")]
        method: String,
    },
    /// Compare methods over the whole test split; writes eval.csv.
    Evaluate,
    /// Compare the integrated and plain pipeline variants; writes ablate.csv.
    Ablate,
    /// Vary one pipeline parameter; writes sweep.csv.
    Sweep {
        /// particles | train_images | diffusion_steps
        #[arg(long)]
        axis: String,
        /// Comma-separated values, e.g. 10,50,100.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<usize>,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(err) => {
            // --help and --version print to stdout and exit cleanly; real
            // usage problems leave through the usage exit code.
            let is_usage_error = err.use_stderr();
            let _ = err.print();
            return if is_usage_error { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    if cli.threads == 0 {
        eprintln!("error: --threads must be at least 1");
        return ExitCode::from(1);
    }
    if let Err(err) = rayon::ThreadPoolBuilder::new()
        .num_threads(cli.threads)
        .build_global()
    {
        eprintln!("error: cannot configure the thread pool: {err}");
        return ExitCode::from(1);
    }
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            let mut source = std::error::Error::source(&err);
            while let Some(s) = source {
                eprintln!("  caused by: {s}");
                source = s.source();
            }
            ExitCode::from(exit_code(&err))
        }
    }
}

fn exit_code(err: &EvalError) -> u8 {
    match err {
        EvalError::MissingArtifact(_) => 2,
        EvalError::Radiance(RadianceError::NonFiniteLoss { .. })
        | EvalError::Diffusion(DiffusionError::NonFiniteLoss { .. }) => 3,
        _ => 1,
    }
}

fn run(cli: &Cli) -> Result<(), EvalError> {
    let cfg = AppConfig::load(cli.config.as_deref())?;
    let dir = cli.out_dir.as_path();
    match &cli.command {
        Command::GenScene => {
            let mut scene = cfg.scene.clone();
            if let Some(seed) = cli.seed {
                scene.seed = seed;
            }
            eval::write_scene_spec(dir, &scene)?;
            println!(
                "scene recipe {} ({}x{}, {} train / {} test views) written to {}",
                eval::scene_label(&scene),
                scene.width,
                scene.height,
                scene.train_views,
                scene.test_views,
                dir.join(SCENE_SPEC).display()
            );
        }
        Command::RenderGt => {
            let spec = eval::read_scene_spec(dir)?;
            let views = eval::render_reference_views(dir)?;
            println!(
                "{views} reference views of {} rendered into {} at {}x{}",
                eval::scene_label(&spec),
                dir.display(),
                spec.width,
                spec.height
            );
        }
        Command::TrainNerf => {
            let mut ncfg = cfg.nerf.clone();
            if let Some(seed) = cli.seed {
                ncfg.seed = seed;
            }
            let summary = eval::train_nerf_stage(dir, &ncfg)?;
            println!(
                "radiance field trained for {} iterations (final loss {:.6}); checkpoint at {}",
                summary.iters,
                summary.final_loss,
                dir.join(NERF_CHECKPOINT).display()
            );
        }
        Command::TrainDiffusion => {
            let mut dcfg = cfg.diffusion.clone();
            if let Some(seed) = cli.seed {
                dcfg.seed = seed;
            }
            let summary = eval::train_diffusion_stage(dir, &dcfg)?;
            println!(
                "pose prior trained for {} iterations (final loss {:.6}); checkpoint at {}",
                summary.iters,
                summary.final_loss,
                dir.join(DIFFUSION_CHECKPOINT).display()
            );
        }
        Command::Localize { query, method } => {
            let method = Method::parse(method)?;
            let spec = eval::read_scene_spec(dir)?;
            let arts = eval::load_run_artifacts(dir)?;
            let seed = cli
                .seed
                .unwrap_or_else(|| cfg.eval.seeds.first().copied().unwrap_or(0));
            let outcome = eval::localize_single(&arts, &cfg.pipeline, method, seed, *query)?;
            let thresholds = ThresholdSpec::new(cfg.eval.thresholds.clone())?;
            let gt = arts.field_norm.apply_pose(&arts.dataset.frames[outcome.frame].pose);
            let zeroed = cli.threads == 1;
            let path = eval::write_query_record_file(
                dir,
                &eval::scene_label(&spec),
                "test",
                method,
                seed,
                &thresholds,
                &outcome,
                &gt,
                &cfg.hash_hex(),
                zeroed,
            )?;
            let flags: Vec<String> = thresholds
                .successes(outcome.terr, outcome.rerr)
                .iter()
                .map(|&s| if s { "pass".into() } else { "fail".into() })
                .collect();
            println!(
                "frame {:04} ({}): translation error {:.6}, rotation error {:.4} deg, \
                 thresholds [{}]; record at {}",
                outcome.frame,
                method.label(),
                outcome.terr,
                outcome.rerr,
                flags.join(", "),
                path.display()
            );
        }
        Command::Evaluate => {
            let report = run_report(cli, &cfg, &EVALUATE_METHODS, EVAL_CSV)?;
            print!("{report}");
        }
        Command::Ablate => {
            let report = run_report(cli, &cfg, &ABLATE_METHODS, ABLATE_CSV)?;
            print!("{report}");
        }
        Command::Sweep { axis, values } => {
            let axis = SweepAxis::parse(axis)?;
            let arts = eval::load_run_artifacts(dir)?;
            let mut cfg = cfg.clone();
            if let Some(seed) = cli.seed {
                cfg.eval.seeds = vec![seed];
            }
            let report = eval::run_sweep(&arts, &cfg, axis, values, cli.threads)?;
            let csv = report.to_csv();
            atomic_write(&dir.join(SWEEP_CSV), csv.as_bytes())?;
            println!("wrote {}", dir.join(SWEEP_CSV).display());
            print!("{csv}");
        }
    }
    Ok(())
}

/// Shared body of `evaluate` and `ablate`: runs the method set over the test
/// split, writes the CSV, and returns the table text for stdout.
fn run_report(
    cli: &Cli,
    cfg: &AppConfig,
    methods: &[Method],
    csv_name: &str,
) -> Result<String, EvalError> {
    let dir = cli.out_dir.as_path();
    let spec = eval::read_scene_spec(dir)?;
    let arts = eval::load_run_artifacts(dir)?;
    let mut cfg = cfg.clone();
    if let Some(seed) = cli.seed {
        cfg.eval.seeds = vec![seed];
    }
    let report = eval::run_evaluation(
        &arts,
        &cfg,
        methods,
        &eval::scene_label(&spec),
        Some(dir),
        csv_name,
        cli.threads,
    )?;
    Ok(format!("wrote {}\n{}", dir.join(csv_name).display(), report.to_csv()))
}
