use advsim::config::{parse_scene_config, SceneConfig};
use advsim::pipeline::{retrain_against_attack, run_pipeline, Stage};
use clap::{Parser, Subcommand};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;

/// Surrogate-scene driving simulator and adversarial-scenario optimizer.
#[derive(Parser)]
#[command(name = "advsim", version, about)]
struct Cli {
    /// Scene config file (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Comma-separated stage list (build,capture,fit,train,attack,transfer,evaluate,export).
    #[arg(long, global = true)]
    stage: Option<String>,
    /// Override the attack seed list with this single seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Bound worker-thread parallelism.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Override the config's output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Subcommand)]
enum Command {
    /// Rasterize the procedural deployment scene and reference path.
    Build,
    /// Capture posed training images in the deployment scene.
    Capture,
    /// Fit the surrogate radiance field to captured images.
    Fit,
    /// Train the behavior-cloning steering policy.
    Train,
    /// Run gradient and random attacks in the surrogate for each seed.
    Attack,
    /// Replay attacked objects in the deployment scene.
    Transfer,
    /// Assemble the metric table from persisted artifacts.
    Evaluate,
    /// Export first-person frames and an overhead schematic.
    Export,
    /// Fine-tune the policy against the stored gradient attack.
    Retrain,
    /// Run the requested stages (default: all) and write a manifest.
    Run,
}

fn load_config(cli: &Cli) -> Result<(SceneConfig, PathBuf), String> {
    let path = cli.config.as_deref().unwrap_or(Path::new("scene.toml"));
    let text = std::fs::read_to_string(path)
        .map_err(|e| format!("cannot read config {}: {e}", path.display()))?;
    let base = path.parent().unwrap_or(Path::new(".")).to_path_buf();
    let mut cfg = parse_scene_config(&text, &base).map_err(|e| e.to_string())?;
    if let Some(out) = &cli.out {
        cfg.output_dir = out.clone();
    }
    if let Some(seed) = cli.seed {
        cfg.attack.seeds = vec![seed];
    }
    Ok((cfg, base))
}

fn stages_for(cli: &Cli) -> Result<Vec<Stage>, String> {
    let single = |s: Stage| Ok(vec![s]);
    match &cli.command {
        Some(Command::Build) => single(Stage::Build),
        Some(Command::Capture) => single(Stage::Capture),
        Some(Command::Fit) => single(Stage::Fit),
        Some(Command::Train) => single(Stage::Train),
        Some(Command::Attack) => single(Stage::Attack),
        Some(Command::Transfer) => single(Stage::Transfer),
        Some(Command::Evaluate) => single(Stage::Evaluate),
        Some(Command::Export) => single(Stage::Export),
        Some(Command::Retrain) | None | Some(Command::Run) => match &cli.stage {
            Some(list) => list
                .split(',')
                .filter(|s| !s.trim().is_empty())
                .map(|s| Stage::from_str(s.trim()).map_err(|e| e.to_string()))
                .collect(),
            None => Ok(Stage::ALL.to_vec()),
        },
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(jobs) = cli.jobs {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(jobs.max(1)).build_global() {
            eprintln!("advsim: cannot set thread count: {e}");
            return ExitCode::from(2);
        }
    }
    let (cfg, base) = match load_config(&cli) {
        Ok(v) => v,
        Err(e) => {
            eprintln!("advsim: {e}");
            return ExitCode::from(2);
        }
    };
    let out = cfg.output_dir.clone();

    if matches!(cli.command, Some(Command::Retrain)) {
        return match retrain_against_attack(&cfg, &out) {
            Ok(report) => {
                println!(
                    "attacked CTE before {:.4}, after {:.4} ({:+.1}%)",
                    report.attacked_cte_before,
                    report.attacked_cte_after,
                    -100.0 * report.relative_reduction
                );
                ExitCode::SUCCESS
            }
            Err(e) => {
                eprintln!("advsim: {e}");
                ExitCode::FAILURE
            }
        };
    }

    let stages = match stages_for(&cli) {
        Ok(s) => s,
        Err(e) => {
            eprintln!("advsim: {e}");
            return ExitCode::from(2);
        }
    };
    match run_pipeline(&cfg, &stages, &out, &base) {
        Ok(manifest) => {
            println!("wrote manifest {}", out.join("manifest.json").display());
            if let Some(m) = &manifest.metrics {
                print!("{}", render_summary(m));
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("advsim: {e}");
            ExitCode::FAILURE
        }
    }
}

fn render_summary(m: &advsim::pipeline::EvalMatrix) -> String {
    format!(
        "deployment unperturbed {:.3} | surrogate rand {:.3} grad {:.3} | deployment rand {:.3} grad {:.3}\n",
        m.deployment_unperturbed,
        m.surrogate_random.mean,
        m.surrogate_gradient.mean,
        m.deployment_random.mean,
        m.deployment_gradient.mean
    )
}
