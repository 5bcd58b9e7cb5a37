use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use dmlflow::dsl::{parse, validate, Severity};
use dmlflow::experiment::{default_plan, run_experiment, ExperimentConfig, Mode, Overrides};
use dmlflow::graph::{compile_structure, to_dot};
use dmlflow::schemes::Scheme;

#[derive(Parser)]
#[command(name = "dmlflow", version, about = "Compose and run distributed learning dataflows")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment described by a TOML config.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        scheme: Option<Scheme>,
        #[arg(long)]
        workers: Option<u32>,
        #[arg(long)]
        rounds: Option<u32>,
        #[arg(long)]
        mode: Option<Mode>,
        #[arg(long)]
        group: Option<String>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Parse and check a DSL program.
    Validate { file: PathBuf },
    /// Compile a DSL program and export its graph.
    Graph {
        file: PathBuf,
        /// Write Graphviz output here instead of stdout.
        #[arg(long)]
        dot: Option<PathBuf>,
        /// Also write a deployment manifest with one dgroup per home.
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long, default_value_t = 9000)]
        base_port: u16,
    },
}

fn read(path: &Path) -> Result<String, String> {
    fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))
}

fn write(path: &Path, text: &str) -> Result<(), String> {
    fs::write(path, text).map_err(|e| format!("{}: {e}", path.display()))
}

fn run(cli: Cli) -> Result<(), String> {
    match cli.command {
        Command::Run {
            config,
            scheme,
            workers,
            rounds,
            mode,
            group,
            seed,
            out,
        } => {
            let mut cfg = ExperimentConfig::load(&config).map_err(|e| e.to_string())?;
            cfg.apply(&Overrides {
                scheme,
                workers,
                rounds,
                mode,
                group,
                seed,
                out,
            });
            let outcome = run_experiment(&cfg).map_err(|e| e.to_string())?;
            for r in &outcome.runs {
                let rep = &r.report;
                let mut line = format!(
                    "{} seed={} messages={} inter_bytes={} wall={:.2}s",
                    rep.scheme, rep.seed, rep.messages, rep.inter_bytes, rep.timing.wall_s
                );
                if let Some(a) = rep.final_accuracy {
                    line += &format!(" accuracy={a:.4}");
                }
                if let Some(d) = rep.detections {
                    line += &format!(" alerts={}", d.alerts);
                }
                println!("{line}");
            }
            println!("artifacts in {}", cfg.experiment.out.display());
            Ok(())
        }
        Command::Validate { file } => {
            let name = file.display().to_string();
            let p = parse(&read(&file)?).map_err(|e| format!("{name}:{e}"))?;
            let diags = validate(&p);
            for d in &diags {
                eprintln!("{name}: {d}");
            }
            if diags.iter().any(|d| d.severity == Severity::Error) {
                return Err(format!("{name}: invalid program"));
            }
            let g = compile_structure(&p).map_err(|e| format!("{name}: {e}"))?;
            println!("{name}: ok ({} nodes, {} channels)", g.nodes.len(), g.channels.len());
            Ok(())
        }
        Command::Graph {
            file,
            dot,
            manifest,
            base_port,
        } => {
            let name = file.display().to_string();
            let p = parse(&read(&file)?).map_err(|e| format!("{name}:{e}"))?;
            let g = compile_structure(&p).map_err(|e| format!("{name}: {e}"))?;
            match dot {
                Some(path) => write(&path, &to_dot(&g))?,
                None if manifest.is_none() => print!("{}", to_dot(&g)),
                None => {}
            }
            if let Some(path) = manifest {
                let plan = default_plan(&g, base_port).map_err(|e| e.to_string())?;
                write(&path, &plan.to_manifest())?;
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
