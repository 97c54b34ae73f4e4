use std::fs;
use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};

use daod_cli::config::ExperimentConfig;
use daod_cli::report::{ablate, compare, AblationAxis, Report};
use daod_cli::runs::{evaluate_params, frechet_pair, Workspace};
use daod_cli::{generate, load_pair};
use daod_core::detector::init_params;
use daod_core::trainer::{burn_in, MethodPreset};
use daod_core::ParamSet;

#[derive(Parser)]
#[command(name = "daod", version, about = "Domain-adaptive object detection experiments")]
struct Cli {
    /// Experiment config (TOML); desk defaults fill everything unset.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Dotted override, e.g. `train.target_fraction=0.25`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    sets: Vec<String>,
    /// Replaces the configured seed list.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render the synthetic benchmark as COCO JSON and PNG files.
    GenerateData {
        #[arg(long)]
        force: bool,
    },
    /// Run only the burn-in phase of a preset.
    Burnin {
        #[arg(long)]
        preset: Option<MethodPreset>,
    },
    /// Burn-in plus self-training for one preset and seed.
    Train {
        #[arg(long)]
        preset: Option<MethodPreset>,
        /// Continue from the last checkpoint in the run directory.
        #[arg(long)]
        resume: bool,
        /// Stop with a checkpoint after this many iterations.
        #[arg(long, hide = true)]
        stop_after: Option<usize>,
    },
    /// Evaluate a parameter file on the target test split.
    Eval {
        #[arg(long)]
        params: PathBuf,
        #[arg(long)]
        preset: Option<MethodPreset>,
    },
    /// Every configured preset over every seed, with a report.
    Compare,
    /// Sweep one axis around the base preset.
    Ablate {
        #[arg(long, value_enum)]
        axis: AblationAxis,
        #[arg(long, value_delimiter = ',')]
        values: Vec<String>,
    },
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let mut exp = ExperimentConfig::load(cli.config.as_deref(), &cli.sets)?;
    if let Some(seed) = cli.seed {
        exp.seeds = vec![seed];
    }
    let root = exp.output_root();
    let seed = exp.seeds[0];

    if let Command::GenerateData { force } = cli.command {
        let (dir, manifest) = generate(&exp, force)?;
        println!("wrote {} ({})", dir.display(), manifest.content_hash);
        return Ok(());
    }

    let (pair, manifest) = load_pair(&exp)?;
    let ws = Workspace::new(&exp, &pair, &manifest);
    match cli.command {
        Command::GenerateData { .. } => unreachable!("handled above"),
        Command::Burnin { preset } => {
            let preset = preset.unwrap_or(exp.preset);
            let config = exp.resolve(preset, seed)?;
            let dir = root.join("burnin").join(preset.name()).join(format!("seed{seed}"));
            fs::create_dir_all(&dir)?;
            let r = burn_in(&pair.source_train, &config, init_params(&config.detector, config.seed)?)?;
            r.params.save(&dir.join("params.params"))?;
            r.ema_params.save(&dir.join("ema.params"))?;
            fs::write(dir.join("summary.json"), serde_json::to_string_pretty(&r.summary())?)?;
            println!("burn-in stopped at iteration {} -> {}", r.stop_iteration, dir.display());
        }
        Command::Train {
            preset,
            resume,
            stop_after,
        } => {
            let preset = preset.unwrap_or(exp.preset);
            let config = exp.resolve(preset, seed)?;
            let dir = root.join("runs").join(preset.name()).join(format!("seed{seed}"));
            match ws.train_into(&dir, preset.name(), preset, &config, resume, stop_after)? {
                Some(s) => println!("{} seed {}: AP50 {:.4} -> {}", s.label, s.seed, s.final_ap50, dir.display()),
                None => println!("interrupted; resume with --resume ({})", dir.display()),
            }
        }
        Command::Eval { params, preset } => {
            let config = exp.resolve(preset.unwrap_or(exp.preset), seed)?;
            let p = ParamSet::load(&params).with_context(|| format!("loading {}", params.display()))?;
            let result = evaluate_params(&p, &config.detector, &pair)?;
            let (fi, fn_) = frechet_pair(&p, &config.detector, &pair)?;
            let out = params.with_extension("eval.json");
            let json = serde_json::json!({ "eval": result, "frechet_image": fi, "frechet_instance": fn_ });
            fs::write(&out, serde_json::to_string_pretty(&json)?)?;
            println!("AP50 {:.4}  d_F image {fi:.4}  instance {fn_:.4} -> {}", result.ap50, out.display());
        }
        Command::Compare => {
            let report = compare(&ws)?;
            write_report(&root, "compare", "Method comparison", &report)?;
        }
        Command::Ablate { axis, values } => {
            let values = if values.is_empty() {
                axis.default_values().iter().map(|v| v.to_string()).collect()
            } else {
                values
            };
            let report = ablate(&ws, axis, &values)?;
            let name = format!("ablate_{}", axis.name());
            write_report(&root, &name, &format!("Ablation: {}", axis.name()), &report)?;
        }
    }
    Ok(())
}

fn write_report(root: &std::path::Path, name: &str, title: &str, report: &Report) -> Result<()> {
    fs::create_dir_all(root)?;
    fs::write(root.join(format!("{name}.csv")), report.to_csv()?)?;
    let md = report.to_markdown(title);
    fs::write(root.join(format!("{name}.md")), &md)?;
    print!("{md}");
    Ok(())
}
