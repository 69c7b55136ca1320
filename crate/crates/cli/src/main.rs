use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use maskforge_core::graph::mask_graph;
use maskforge_core::metrics::{evaluate_dirs, render_markdown, BatchReport, EMeasureMode};
use maskforge_core::pipeline::{
    distribution_report, export_conditions, load_features, merge_backend_status, stub_generate,
    EditSpec, Provenance, CONFIG_SCHEMA_VERSION,
};
use maskforge_core::{
    canny, invert, load_mask, rigid_edit, run, save_mask, topology, train, validate_manifest,
    CannyParams, DeformationField, Error, GraphParams, MetricConfig, PipelineConfig,
    RigidTransform, Template, TrainConfig,
};

const EXIT_USAGE: u8 = 1;
const EXIT_RUNTIME: u8 = 2;

#[derive(Parser)]
#[command(
    name = "maskforge",
    about = "Topology-preserving mask editing and synthetic dataset tooling"
)]
#[command(disable_version_flag = true)]
struct Cli {
    /// Print version and config schema version.
    #[arg(long, short = 'V')]
    version: bool,
    /// Report errors as one-line JSON on stderr.
    #[arg(long, global = true)]
    json_errors: bool,
    /// Overrides the seed of seeded commands.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Args)]
struct InOut {
    input: PathBuf,
    #[arg(long, short)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Swap foreground and background.
    Invert(InOut),
    /// Warp a mask by a similarity or perspective transform about its centroid.
    EditRigid {
        #[command(flatten)]
        io: InOut,
        /// Degrees; positive turns clockwise on screen.
        #[arg(long, default_value_t = 0.0, allow_hyphen_values = true)]
        rotate: f64,
        #[arg(long, default_value_t = 1.0)]
        scale: f64,
        #[arg(long, default_value_t = 0.0, allow_hyphen_values = true)]
        dx: f64,
        #[arg(long, default_value_t = 0.0, allow_hyphen_values = true)]
        dy: f64,
        #[arg(long, default_value_t = 0.0, allow_hyphen_values = true)]
        tilt_x: f64,
        #[arg(long, default_value_t = 0.0, allow_hyphen_values = true)]
        tilt_y: f64,
    },
    /// Adversarially train a topology-preserving deformation for one mask.
    EditNonrigid {
        #[command(flatten)]
        io: InOut,
        #[arg(long, default_value = "")]
        prompt: String,
        #[arg(long)]
        steps: Option<usize>,
        /// Training config JSON; fields not given take their defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Writes the per-step loss trace as CSV.
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Canny edge map of a mask.
    Canny {
        #[command(flatten)]
        io: InOut,
        #[arg(long, default_value_t = 1.0)]
        sigma: f64,
        #[arg(long, default_value_t = 0.1)]
        low: f64,
        #[arg(long, default_value_t = 0.3)]
        high: f64,
    },
    /// Structural graph of a mask as JSON.
    Graph {
        input: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Component, hole and Euler counts as JSON.
    Topology { input: PathBuf },
    /// Run dataset synthesis from a config file.
    Pipeline {
        config: PathBuf,
        #[arg(long, short)]
        out: PathBuf,
    },
    /// Validate a pipeline output directory.
    Validate { dir: PathBuf },
    /// Fold an external backend's status file into the manifest.
    Merge { dir: PathBuf },
    /// Segmentation metrics for predictions against ground truths, paired by file stem.
    Evaluate {
        #[arg(long)]
        pred_dir: PathBuf,
        #[arg(long)]
        gt_dir: PathBuf,
        #[arg(long, short)]
        out: Option<PathBuf>,
        /// Maximum E-measure over thresholds instead of the adaptive one.
        #[arg(long)]
        max_e: bool,
    },
    /// Render a metrics JSON as Markdown, or compare two feature sets.
    Report {
        #[arg(long, conflicts_with_all = ["features_a", "features_b"])]
        markdown: Option<PathBuf>,
        #[arg(long, requires = "features_b")]
        features_a: Option<PathBuf>,
        #[arg(long, requires = "features_a")]
        features_b: Option<PathBuf>,
    },
    /// Write the bundled sample masks, prompts and a pipeline config.
    Samples { dir: PathBuf },
    /// Render an image for a mask with the procedural stub backend.
    StubGenerate {
        #[command(flatten)]
        io: InOut,
        #[arg(long, default_value = "")]
        prompt: String,
    },
}

#[derive(Serialize)]
struct JsonError<'a> {
    kind: &'a str,
    message: String,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let json_errors = std::env::args().any(|a| a == "--json-errors");
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let text = e.to_string();
            let text = text
                .trim_end()
                .strip_prefix("error: ")
                .unwrap_or(text.trim_end());
            return fail(json_errors, "usage", text, EXIT_USAGE);
        }
    };
    if cli.version {
        println!(
            "maskforge {} (config schema {CONFIG_SCHEMA_VERSION})",
            env!("CARGO_PKG_VERSION")
        );
        return ExitCode::SUCCESS;
    }
    let Some(command) = cli.command else {
        return fail(
            cli.json_errors,
            "usage",
            "a subcommand is required; see --help",
            EXIT_USAGE,
        );
    };
    match execute(command, cli.seed) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            // Core errors already carry their source in the message.
            let (kind, message) = match e.downcast_ref::<Error>() {
                Some(core) => (core.kind(), core.to_string()),
                None => ("runtime", format!("{e:#}")),
            };
            fail(cli.json_errors, kind, &message, EXIT_RUNTIME)
        }
    }
}

fn fail(json: bool, kind: &str, message: &str, code: u8) -> ExitCode {
    if json {
        let line = JsonError {
            kind,
            message: message.to_string(),
        };
        eprintln!(
            "{}",
            serde_json::to_string(&line).expect("error serializes")
        );
    } else {
        eprintln!("error: {message}");
    }
    ExitCode::from(code)
}

/// Writes to stdout; a closed pipe ends output quietly.
fn emit(text: &str) -> Result<()> {
    match std::io::stdout().lock().write_all(text.as_bytes()) {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(e.into()),
        _ => Ok(()),
    }
}

fn print_json<T: Serialize>(value: &T) -> Result<()> {
    emit(&(serde_json::to_string_pretty(value)? + "\n"))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text =
        std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn execute(command: Command, seed: Option<u64>) -> Result<()> {
    match command {
        Command::Invert(io) => save_mask(&invert(&load_mask(&io.input)?), &io.out)?,
        Command::EditRigid {
            io,
            rotate,
            scale,
            dx,
            dy,
            tilt_x,
            tilt_y,
        } => {
            let t = RigidTransform {
                rotation: rotate.to_radians(),
                scale,
                translation: [dx, dy],
                tilt: [tilt_x, tilt_y],
            };
            save_mask(&rigid_edit(&load_mask(&io.input)?, &t)?, &io.out)?;
        }
        Command::EditNonrigid {
            io,
            prompt,
            steps,
            config,
            trace,
        } => {
            let mut cfg: TrainConfig = match config {
                Some(p) => read_json(&p)?,
                None => TrainConfig::default(),
            };
            cfg.variants_per_source = 1;
            if let Some(s) = steps {
                cfg.gen_steps = s;
            }
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let mask = load_mask(&io.input)?;
            let outcome = train(&[mask], &[prompt], &cfg)?;
            save_mask(&outcome.masks[0], &io.out)?;
            if let Some(p) = trace {
                std::fs::write(&p, maskforge_core::adversarial::trace_csv(&outcome.trace))
                    .with_context(|| format!("writing {}", p.display()))?;
            }
            let g = &outcome.generators[0];
            print_json(&serde_json::json!({
                "template": g.template,
                "steps": g.step,
                "max_displacement": g.field.max_displacement(),
            }))?;
        }
        Command::Canny {
            io,
            sigma,
            low,
            high,
        } => {
            let p = CannyParams { sigma, low, high };
            canny(&load_mask(&io.input)?, &p)?.save(&io.out)?;
        }
        Command::Graph { input, out } => {
            let dump = mask_graph(&load_mask(&input)?, &GraphParams::default())?.to_dump();
            match out {
                Some(p) => std::fs::write(&p, serde_json::to_vec_pretty(&dump)?)
                    .with_context(|| format!("writing {}", p.display()))?,
                None => print_json(&dump)?,
            }
        }
        Command::Topology { input } => print_json(&topology(&load_mask(&input)?))?,
        Command::Pipeline { config, out } => {
            let mut cfg = PipelineConfig::load(&config)?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let m = run(&cfg, &out)?;
            println!(
                "{} entries, {} skipped, written to {}",
                m.entries.len(),
                m.skipped.len(),
                out.display()
            );
        }
        Command::Validate { dir } => {
            let m = validate_manifest(&dir)?;
            println!("{} entries valid", m.entries.len());
        }
        Command::Merge { dir } => {
            let m = merge_backend_status(&dir)?;
            let count = |s| m.entries.iter().filter(|e| e.status == s).count();
            use maskforge_core::pipeline::EntryStatus::*;
            println!(
                "ok {}, pending {}, error {}",
                count(Ok),
                count(Pending),
                count(Error)
            );
        }
        Command::Evaluate {
            pred_dir,
            gt_dir,
            out,
            max_e,
        } => {
            let cfg = MetricConfig {
                e_measure_mode: if max_e {
                    EMeasureMode::MaxOverThresholds
                } else {
                    EMeasureMode::Adaptive
                },
                ..MetricConfig::default()
            };
            let report = evaluate_dirs(&pred_dir, &gt_dir, &cfg)?;
            match out {
                Some(p) => std::fs::write(&p, serde_json::to_vec_pretty(&report)?)
                    .with_context(|| format!("writing {}", p.display()))?,
                None => print_json(&report)?,
            }
        }
        Command::Report {
            markdown,
            features_a,
            features_b,
        } => match (markdown, features_a, features_b) {
            (Some(p), _, _) => emit(&render_markdown(&read_json::<BatchReport>(&p)?))?,
            (None, Some(a), Some(b)) => {
                let cos = distribution_report(&load_features(&a)?, &load_features(&b)?)?;
                print_json(&serde_json::json!({ "centroid_cosine": cos }))?;
            }
            _ => bail!("report needs --markdown or both --features-a and --features-b"),
        },
        Command::Samples { dir } => {
            maskforge_core::samples::write_samples(&dir)?;
            let mut cfg = PipelineConfig {
                sources_dir: "sources".into(),
                prompts_dir: Some("prompts".into()),
                seed: seed.unwrap_or(0),
                ..PipelineConfig::default()
            };
            cfg.train.gen_steps = 40;
            let path = dir.join("config.json");
            std::fs::write(&path, serde_json::to_string_pretty(&cfg)? + "\n")
                .with_context(|| format!("writing {}", path.display()))?;
        }
        Command::StubGenerate { io, prompt } => {
            let mask = load_mask(&io.input)?;
            let provenance = Provenance {
                source: io.input.display().to_string(),
                edit: EditSpec::NonRigid {
                    template: Template::from_prompt(&prompt),
                    noise_seed: 0,
                    steps: 0,
                    field: DeformationField::for_mask(&mask),
                },
            };
            let bundle =
                export_conditions("cli", &mask, &prompt, provenance, &CannyParams::default())?;
            stub_generate(&bundle, seed.unwrap_or(0))
                .save(&io.out)
                .with_context(|| format!("writing {}", io.out.display()))?;
        }
    }
    Ok(())
}
