//! Command-line front end: dataset generation, training, evaluation,
//! ablation runs, depth-map rendering, and gradient verification.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use foresight::config::{Precision, RunConfig};
use foresight::env::{generate_episode, load_dataset};
use foresight::error::Result;
use foresight::gradcheck;
use foresight::model::{extract_window, Toggles};
use foresight::render::write_pgm16;
use foresight::scalar::Scalar;
use foresight::train::{evaluate, load_checkpoint, run_training, save_checkpoint, TrainState};

#[derive(Parser)]
#[command(name = "foresight", version, about = "Predictive-geometry manipulation policy")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Scope {
    Renderer,
    Trunk,
    Full,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Pathway {
    #[value(name = "history-track")]
    HistoryTrack,
    #[value(name = "future-track")]
    FutureTrack,
    #[value(name = "depth")]
    Depth,
    #[value(name = "refinement")]
    Refinement,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic demonstration episodes into a dataset directory.
    GenData {
        #[arg(long)]
        episodes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Config file; the built-in desk-scale defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Train on a dataset directory and write a checkpoint + log.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Report metrics of a checkpoint on a dataset.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Render a predicted future depth map to a 16-bit PGM (millimeters).
    RenderDepth {
        #[arg(long)]
        checkpoint: PathBuf,
        /// One episode directory.
        #[arg(long)]
        episode: PathBuf,
        /// Window start step inside the episode.
        #[arg(long)]
        step: usize,
        #[arg(long)]
        out: PathBuf,
        /// Future offset (0 = now).
        #[arg(long, default_value_t = 0)]
        tau: usize,
        #[arg(long, default_value_t = 0)]
        camera: usize,
    },
    /// Verify analytic gradients against central finite differences.
    Gradcheck {
        #[arg(long, value_enum)]
        scope: Scope,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train with chosen pathways disabled and log the reduced structure.
    Ablate {
        #[arg(long, value_enum, value_delimiter = ',', required = true)]
        disable: Vec<Pathway>,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData {
            episodes,
            seed,
            out,
            config,
        } => {
            let cfg = load_config(config.as_deref())?;
            let env = cfg.env_spec()?;
            std::fs::create_dir_all(&out)?;
            for i in 0..episodes {
                let task = i % env.n_tasks;
                let ep = generate_episode(&env, task, seed.wrapping_add(i as u64))?;
                let dir = out.join(format!("ep_{i:04}"));
                ep.save(&dir)?;
                println!(
                    "episode={} task={} steps={} dir={}",
                    i,
                    task,
                    ep.steps,
                    dir.display()
                );
            }
            Ok(())
        }
        Command::Train { config, data, out } => {
            let cfg = RunConfig::parse(&std::fs::read_to_string(config)?)?;
            train_command(cfg, &data, &out, Toggles::default(), &[])
        }
        Command::Ablate {
            disable,
            config,
            data,
            out,
        } => {
            let cfg = RunConfig::parse(&std::fs::read_to_string(config)?)?;
            let mut toggles = Toggles::default();
            for p in &disable {
                match p {
                    Pathway::HistoryTrack => toggles.history_track = false,
                    Pathway::FutureTrack => toggles.future_track = false,
                    Pathway::Depth => toggles.depth = false,
                    Pathway::Refinement => toggles.refinement = false,
                }
            }
            let labels: Vec<&str> = disable
                .iter()
                .map(|p| match p {
                    Pathway::HistoryTrack => "history-track",
                    Pathway::FutureTrack => "future-track",
                    Pathway::Depth => "depth",
                    Pathway::Refinement => "refinement",
                })
                .collect();
            train_command(cfg, &data, &out, toggles, &labels)
        }
        Command::Eval { checkpoint, data } => {
            match foresight::train::checkpoint_precision(&checkpoint)? {
                Precision::F32 => eval_command::<f32>(&checkpoint, &data),
                Precision::F64 => eval_command::<f64>(&checkpoint, &data),
            }
        }
        Command::RenderDepth {
            checkpoint,
            episode,
            step,
            out,
            tau,
            camera,
        } => match foresight::train::checkpoint_precision(&checkpoint)? {
            Precision::F32 => {
                render_depth_command::<f32>(&checkpoint, &episode, step, tau, camera, &out)
            }
            Precision::F64 => {
                render_depth_command::<f64>(&checkpoint, &episode, step, tau, camera, &out)
            }
        },
        Command::Gradcheck { scope, seed } => {
            let report = match scope {
                Scope::Renderer => gradcheck::gradcheck_renderer(seed),
                Scope::Trunk => gradcheck::gradcheck_trunk(seed),
                Scope::Full => gradcheck::gradcheck_full(100, seed)?,
            };
            println!("{}", report.log_line());
            if report.passed {
                Ok(())
            } else {
                Err(foresight::Error::InvalidArgument {
                    op: "gradcheck",
                    msg: format!("max relative error {:.3e}", report.max_rel_err),
                })
            }
        }
    }
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::parse(&std::fs::read_to_string(p)?),
        None => Ok(RunConfig::toy()),
    }
}

fn train_command(
    cfg: RunConfig,
    data: &Path,
    out: &Path,
    toggles: Toggles,
    disabled: &[&str],
) -> Result<()> {
    match cfg.precision {
        Precision::F32 => train_typed::<f32>(cfg, data, out, toggles, disabled),
        Precision::F64 => train_typed::<f64>(cfg, data, out, toggles, disabled),
    }
}

fn train_typed<S: Scalar>(
    cfg: RunConfig,
    data: &Path,
    out: &Path,
    toggles: Toggles,
    disabled: &[&str],
) -> Result<()> {
    let env = cfg.env_spec()?;
    let episodes = load_dataset(data, Some(&env.arm))?;
    std::fs::create_dir_all(out)?;
    let log_path = out.join("train.log");
    let log_file = std::fs::File::create(&log_path)?;

    let (effective, forced) = toggles.effective();
    let mut header = format!(
        "run precision={} iterations={} batch={} episodes={} disabled={}",
        cfg.precision,
        cfg.iterations,
        cfg.batch_size,
        episodes.len(),
        if disabled.is_empty() {
            "none".to_string()
        } else {
            disabled.join(",")
        }
    );
    if forced {
        header.push_str(" refinement_forced_off=1");
    }
    let mut tee = Tee {
        a: std::io::stdout(),
        b: log_file,
    };
    writeln!(tee, "{header}")?;

    let mut state = TrainState::<S>::new(cfg.clone(), effective)?;
    run_training(&mut state, &episodes, cfg.iterations, Some(&mut tee))?;

    let report = evaluate(&state.model, state.toggles, &episodes, cfg.seed)?;
    writeln!(tee, "{}", report.log_line())?;

    save_checkpoint(&state, out)?;
    writeln!(tee, "checkpoint={}", out.display())?;
    Ok(())
}

fn eval_command<S: Scalar>(checkpoint: &Path, data: &Path) -> Result<()> {
    let state = load_checkpoint::<S>(checkpoint)?;
    let env = state.model.cfg.env_spec()?;
    let episodes = load_dataset(data, Some(&env.arm))?;
    let report = evaluate(&state.model, state.toggles, &episodes, state.model.cfg.seed)?;
    println!("{}", report.log_line());
    Ok(())
}

fn render_depth_command<S: Scalar>(
    checkpoint: &Path,
    episode: &Path,
    step: usize,
    tau: usize,
    camera: usize,
    out: &Path,
) -> Result<()> {
    let state = load_checkpoint::<S>(checkpoint)?;
    let cfg = &state.model.cfg;
    let env = cfg.env_spec()?;
    let ep = foresight::env::EpisodeRecord::load(episode, Some(&env.arm))?;
    if step < 1 || step + cfg.horizon >= ep.steps {
        return Err(foresight::Error::InvalidArgument {
            op: "render-depth",
            msg: format!(
                "step {} outside the valid window range 1..={}",
                step,
                ep.steps - 1 - cfg.horizon
            ),
        });
    }
    let window = extract_window(&ep, step, cfg);
    let depth = state
        .model
        .render_predicted_depth(&window.obs, state.toggles, tau, camera)?;
    let mut f = std::fs::File::create(out)?;
    write_pgm16(&mut f, &depth)?;
    println!(
        "wrote {} ({}x{} pixels, tau={}, camera={})",
        out.display(),
        depth.width,
        depth.height,
        tau,
        camera
    );
    Ok(())
}

/// Write to stdout and the log file at once.
struct Tee<A: Write, B: Write> {
    a: A,
    b: B,
}

impl<A: Write, B: Write> Write for Tee<A, B> {
    fn write(&mut self, buf: &[u8]) -> std::io::Result<usize> {
        self.a.write_all(buf)?;
        self.b.write_all(buf)?;
        Ok(buf.len())
    }

    fn flush(&mut self) -> std::io::Result<()> {
        self.a.flush()?;
        self.b.flush()
    }
}
