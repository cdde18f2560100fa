use std::net::TcpListener;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use steerlab::protocol::{self, ServeMode};
use steerlab::{load_config, validate, ExperimentConfig, Pipeline, PipelineError};
use steerlab_core::concepts::load_direction;
use steerlab_core::LayerId;

#[derive(Parser)]
#[command(name = "steerlab", version, about = "Activation steering experiments on small PDE surrogates")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate (or load from cache) every trajectory the experiment needs.
    Generate(RunArgs),
    /// Train the surrogate.
    Train(RunArgs),
    /// Capture activations of both concept groups and their statistics.
    Extract(RunArgs),
    /// Compute the concept direction.
    Delta(RunArgs),
    /// Roll out the surrogate for every α and init.
    Steer(RunArgs),
    /// Compare the steered rollouts.
    Report(RunArgs),
    /// Run every stage in order.
    All(RunArgs),
    /// Check a config without running anything.
    Validate(RunArgs),
    /// Serve the SACT activation protocol.
    ServeProtocol(ServeArgs),
}

#[derive(Args)]
struct RunArgs {
    /// Preset name or TOML file.
    #[arg(long)]
    config: String,
    /// Steering / extraction layer, `blocks.N` or `N`.
    #[arg(long)]
    layer: Option<LayerId>,
    /// Comma-separated α grid.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    alpha: Option<Vec<f64>>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    cache: Option<PathBuf>,
    /// Master seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Write PNG frames with the report.
    #[arg(long)]
    render: bool,
    #[arg(long, short)]
    quiet: bool,
}

#[derive(Args)]
struct ServeArgs {
    #[arg(long, default_value = "127.0.0.1:7878")]
    listen: String,
    /// Steer with this experiment's concept direction (run `delta` first);
    /// without it the server echoes activations back.
    #[arg(long)]
    config: Option<String>,
    #[arg(long, allow_hyphen_values = true, default_value_t = 0.0)]
    alpha: f64,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Exit after this many sessions.
    #[arg(long)]
    max_sessions: Option<usize>,
}

impl RunArgs {
    fn config(&self) -> Result<ExperimentConfig, PipelineError> {
        let mut c = load_config(&self.config)?;
        if let Some(l) = self.layer {
            c.concept.layer = Some(l);
        }
        if let Some(a) = &self.alpha {
            c.steering.alphas = a.clone();
        }
        if let Some(o) = &self.out {
            c.outputs.dir = Some(o.clone());
        }
        if let Some(o) = &self.cache {
            c.outputs.cache = Some(o.clone());
        }
        if let Some(s) = self.seed {
            c.seed = s;
        }
        c.outputs.render |= self.render;
        Ok(c)
    }
}

fn run_stage(stage: &str, args: &RunArgs) -> Result<(), PipelineError> {
    let mut p = Pipeline::new(args.config()?)?;
    p.quiet = args.quiet;
    let m = p.run(stage)?;
    if stage == "report" || stage == "all" {
        let text = std::fs::read_to_string(p.roots.out.join("report").join("report.txt"))?;
        print!("{text}");
    } else {
        println!("{}", serde_json::to_string_pretty(&m.summary).expect("json"));
    }
    Ok(())
}

fn serve(args: &ServeArgs) -> Result<(), PipelineError> {
    let mode = match &args.config {
        None => ServeMode::Echo,
        Some(spec) => {
            let mut c = load_config(spec)?;
            if let Some(o) = &args.out {
                c.outputs.dir = Some(o.clone());
            }
            let p = Pipeline::new(c)?;
            let m = p.roots.load("delta", "concept direction")?;
            p.roots.verify(&m)?;
            let direction = load_direction(&p.roots.resolve(&m.outputs["direction"].path))?;
            let s = &p.config.steering;
            ServeMode::Steer {
                direction,
                alpha: args.alpha,
                mode: s.mode,
                align: s.align,
                renorm: s.renorm,
            }
        }
    };
    let listener = TcpListener::bind(&args.listen)?;
    eprintln!("listening on {}", listener.local_addr()?);
    protocol::serve(&listener, &mode, args.max_sessions)?;
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Generate(a) => run_stage("generate", a),
        Command::Train(a) => run_stage("train", a),
        Command::Extract(a) => run_stage("extract", a),
        Command::Delta(a) => run_stage("delta", a),
        Command::Steer(a) => run_stage("steer", a),
        Command::Report(a) => run_stage("report", a),
        Command::All(a) => run_stage("all", a),
        Command::Validate(a) => a.config().map(|c| validate::validate(&c)).and_then(|d| {
            if d.is_empty() {
                println!("ok");
                Ok(())
            } else {
                Err(PipelineError::Config(d))
            }
        }),
        Command::ServeProtocol(a) => serve(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
