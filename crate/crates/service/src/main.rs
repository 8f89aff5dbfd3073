use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use epss_core::knowledge::{KnowledgeRepo, SegmentationRules};
use epss_core::scenario::ScenarioScript;
use epss_core::trace::{verify_trace, Clock};
use epss_core::{run_scenario, Epss, FixtureBundle};

#[derive(Parser)]
#[command(
    name = "epss",
    version,
    about = "Maintenance performance support service"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the HTTP service.
    Serve {
        #[arg(long, default_value_t = 8080)]
        port: u16,
        /// Fixture directory; the built-in fixtures when omitted.
        #[arg(long)]
        fixtures: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = ClockArg::Wall)]
        clock: ClockArg,
    },
    /// Scripted scenarios.
    Scenario {
        #[command(subcommand)]
        command: ScenarioCommand,
    },
    /// Trace files.
    Trace {
        #[command(subcommand)]
        command: TraceCommand,
    },
    /// Learning-unit documents.
    Units {
        #[command(subcommand)]
        command: UnitsCommand,
    },
    /// Knowledge base.
    Kb {
        #[command(subcommand)]
        command: KbCommand,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum ClockArg {
    Logical,
    Wall,
}

#[derive(Subcommand)]
enum ScenarioCommand {
    /// Run a script (a script name from the fixtures, or a path).
    Run {
        script: String,
        #[arg(long)]
        fixtures: Option<PathBuf>,
        /// Write the JSON report here.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Write the trace file here.
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// List the scripts in the fixtures.
    List {
        #[arg(long)]
        fixtures: Option<PathBuf>,
    },
}

#[derive(Subcommand)]
enum TraceCommand {
    /// Check the hash chain of a trace file.
    Verify { file: PathBuf },
}

#[derive(Subcommand)]
enum UnitsCommand {
    /// Print (or write) the XML document of a unit.
    Export {
        id: String,
        #[arg(long)]
        fixtures: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Validate and index a unit document; prints the unit as JSON.
    Import {
        file: PathBuf,
        #[arg(long)]
        fixtures: Option<PathBuf>,
    },
}

#[derive(Subcommand)]
enum KbCommand {
    /// Build the open knowledge base from the appendix manifest.
    Seed {
        #[arg(long)]
        fixtures: Option<PathBuf>,
        #[arg(long, default_value = "appendix")]
        manifest: String,
        /// Directory to write one XML document per unit into.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn bundle(dir: Option<&Path>) -> Result<FixtureBundle> {
    match dir {
        Some(dir) => Ok(FixtureBundle::load_dir(dir)?),
        None => Ok(FixtureBundle::builtin()),
    }
}

fn system(dir: Option<&Path>, clock: Clock) -> Result<Epss> {
    Ok(Epss::from_bundle(&bundle(dir)?, clock)?)
}

fn write(path: &Path, contents: &[u8]) -> Result<()> {
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn scenario_run(
    script: &str,
    fixtures: Option<&Path>,
    out: Option<&Path>,
    trace: Option<&Path>,
) -> Result<()> {
    let bundle = bundle(fixtures)?;
    let script = match bundle.script(script) {
        Some(s) => s.clone(),
        None if Path::new(script).is_file() => ScenarioScript::from_toml(
            &fs::read_to_string(script).with_context(|| format!("reading {script}"))?,
        )?,
        None => bail!("no script named `{script}` and no such file"),
    };
    let run = run_scenario(&bundle, &script)?;
    let report = &run.report;
    for line in &report.log {
        println!("{line}");
    }
    for s in &report.sessions {
        println!(
            "session {} ({}): {:?}, {}/{} steps, {:?}, {} deviation(s)",
            s.session_id,
            s.procedure,
            s.state,
            s.steps_done,
            s.conformance.steps_total,
            s.conformance.verdict,
            s.conformance.deviations.len()
        );
    }
    println!(
        "{} events, chain {}, {} unit deliveries",
        report.events,
        if report.chain_verified {
            "verified"
        } else {
            "BROKEN"
        },
        report.delivered.len()
    );
    if let Some(path) = out {
        write(path, serde_json::to_string_pretty(report)?.as_bytes())?;
    }
    if let Some(path) = trace {
        write(path, &run.trace)?;
    }
    Ok(())
}

fn kb_seed(fixtures: Option<&Path>, manifest: &str, out: Option<&Path>) -> Result<()> {
    let bundle = bundle(fixtures)?;
    let manifest = bundle
        .manifest(manifest)
        .ok_or_else(|| anyhow!("no manifest `{manifest}` in the fixtures"))?;
    let repo = KnowledgeRepo::new();
    let ids = repo.load_manifest(manifest, &SegmentationRules::default())?;
    if let Some(dir) = out {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    for id in &ids {
        let unit = repo.unit(id)?;
        println!("{id}\t{:?}\t{}", unit.metadata.protection, unit.title);
        if let Some(dir) = out {
            write(
                &dir.join(format!("{}.xml", id.replace(':', "_"))),
                repo.export_xml(id)?.as_bytes(),
            )?;
        }
    }
    println!("{} unit(s) indexed", ids.len());
    Ok(())
}

async fn serve(port: u16, fixtures: Option<&Path>, clock: Clock) -> Result<()> {
    let epss = Arc::new(system(fixtures, clock)?);
    let listener = tokio::net::TcpListener::bind(("0.0.0.0", port))
        .await
        .with_context(|| format!("binding port {port}"))?;
    eprintln!("listening on {}", listener.local_addr()?);
    axum::serve(listener, epss_service::router(epss))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Serve {
            port,
            fixtures,
            clock,
        } => {
            let clock = match clock {
                ClockArg::Logical => Clock::Logical,
                ClockArg::Wall => Clock::Wall,
            };
            tokio::runtime::Runtime::new()?.block_on(serve(port, fixtures.as_deref(), clock))
        }
        Command::Scenario { command } => match command {
            ScenarioCommand::Run {
                script,
                fixtures,
                out,
                trace,
            } => scenario_run(
                &script,
                fixtures.as_deref(),
                out.as_deref(),
                trace.as_deref(),
            ),
            ScenarioCommand::List { fixtures } => {
                for s in &bundle(fixtures.as_deref())?.scripts {
                    println!("{}\t{}", s.name, s.description);
                }
                Ok(())
            }
        },
        Command::Trace {
            command: TraceCommand::Verify { file },
        } => {
            let bytes = fs::read(&file).with_context(|| format!("reading {}", file.display()))?;
            let n = verify_trace(&bytes)
                .map_err(|b| anyhow!("chain broken at line {}: {}", b.line, b.reason))?;
            println!("ok: {n} events, chain intact");
            Ok(())
        }
        Command::Units { command } => match command {
            UnitsCommand::Export { id, fixtures, out } => {
                let xml = system(fixtures.as_deref(), Clock::Logical)?.export_unit(&id)?;
                match out {
                    Some(path) => write(&path, xml.as_bytes()),
                    None => {
                        print!("{xml}");
                        Ok(())
                    }
                }
            }
            UnitsCommand::Import { file, fixtures } => {
                let doc = fs::read_to_string(&file)
                    .with_context(|| format!("reading {}", file.display()))?;
                let imported = system(fixtures.as_deref(), Clock::Logical)?.import_unit(&doc)?;
                println!("{}", serde_json::to_string_pretty(&imported.unit)?);
                Ok(())
            }
        },
        Command::Kb {
            command:
                KbCommand::Seed {
                    fixtures,
                    manifest,
                    out,
                },
        } => kb_seed(fixtures.as_deref(), &manifest, out.as_deref()),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
