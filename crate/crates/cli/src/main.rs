use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use fedalt::diagnostics::{gradient_check_suite, theory_mode_run, TheoryModeConfig, ZooModel};
use fedalt::experiment::{compare_strategies, parse_config, parse_metrics, run_experiment, Overrides};
use fedalt::federation::ModelSpec;
use fedalt::synth::HeterogeneityLevel;
use fedalt::Strategy;

#[derive(Parser)]
#[command(name = "fedalt", version, about = "Federated LoRA simulator")]
struct Cli {
    #[command(subcommand)]
    command: Option<Command>,
    #[command(flatten)]
    run: RunArgs,
}

#[derive(Subcommand)]
enum Command {
    /// Run the configured strategies over all seeds (the default).
    Run(RunArgs),
    /// Paired per-seed comparison of two metrics files.
    Compare {
        a: PathBuf,
        b: PathBuf,
        #[arg(long, default_value_t = 0.05)]
        level: f64,
        /// Non-inferiority margin for the fallback rule.
        #[arg(long, default_value_t = 0.01)]
        margin: f64,
    },
    /// Backprop against finite differences over the model zoo.
    Gradcheck {
        #[arg(long, default_value_t = 20)]
        seeds: u64,
    },
    /// Convex surrogate convergence check.
    Theory {
        #[arg(long, value_delimiter = ',', default_value = "0")]
        seeds: Vec<u64>,
        #[arg(long)]
        clients: Option<usize>,
        #[arg(long)]
        rounds: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Het {
    High,
    Mild,
    Low,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModelKind {
    Mlp,
    Attn,
}

#[derive(Args, Clone, Default)]
struct RunArgs {
    /// TOML experiment config.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Comma-separated strategy tags, e.g. `fedalt,fedit,local`.
    #[arg(long, value_delimiter = ',')]
    strategy: Option<Vec<Strategy>>,
    #[arg(long)]
    clients: Option<usize>,
    #[arg(long)]
    rounds: Option<usize>,
    #[arg(long)]
    local_epochs: Option<usize>,
    #[arg(long)]
    rank: Option<usize>,
    #[arg(long)]
    lora_alpha: Option<f64>,
    #[arg(long, value_enum)]
    het: Option<Het>,
    /// Comma-separated seeds.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    theory_mode: bool,
    #[arg(long, value_enum)]
    model: Option<ModelKind>,
    #[arg(long)]
    jobs: Option<usize>,
}

impl RunArgs {
    fn overrides(&self) -> Overrides {
        Overrides {
            strategies: self.strategy.clone(),
            clients: self.clients,
            rounds: self.rounds,
            local_epochs: self.local_epochs,
            rank: self.rank,
            lora_alpha: self.lora_alpha,
            het: self.het.map(|h| match h {
                Het::High => HeterogeneityLevel::High,
                Het::Mild => HeterogeneityLevel::Mild,
                Het::Low => HeterogeneityLevel::Low,
            }),
            seeds: self.seeds.clone(),
            out: self.out.clone(),
            theory_mode: self.theory_mode,
            model: self.model.map(|m| match m {
                ModelKind::Mlp => ModelSpec::default(),
                ModelKind::Attn => ModelSpec::Attn,
            }),
            jobs: self.jobs,
        }
    }
}

fn run(args: &RunArgs) -> Result<bool> {
    let config = parse_config(args.config.as_deref(), &args.overrides())?;
    let outcome = run_experiment(&config)?;
    for path in &outcome.metrics_files {
        println!("wrote {}", path.display());
    }
    if let Some(summary) = &outcome.summary {
        print!("{}", summary.to_table());
    }
    for (seed, report) in &outcome.theory {
        println!("theory seed {seed}: {}", report.verdict);
    }
    Ok(outcome.passed())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        None => run(&cli.run),
        Some(Command::Run(args)) => run(args),
        Some(Command::Compare { a, b, level, margin }) => compare(a, b, *level, *margin),
        Some(Command::Gradcheck { seeds }) => gradcheck(*seeds),
        Some(Command::Theory {
            seeds,
            clients,
            rounds,
            lr,
        }) => theory(seeds, *clients, *rounds, *lr),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn compare(a: &PathBuf, b: &PathBuf, level: f64, margin: f64) -> Result<bool> {
    let read = |p: &PathBuf| -> Result<_> {
        let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
        Ok(parse_metrics(&text)?)
    };
    let c = compare_strategies(&read(a)?, &read(b)?)?;
    print!("{}", c.report());
    if c.seeds.is_empty() {
        bail!("no seed appears in both files");
    }
    println!("{} >= {}: {}", c.a, c.b, if c.at_least(level, margin) { "yes" } else { "no" });
    Ok(c.missing.is_empty())
}

fn gradcheck(seeds: u64) -> Result<bool> {
    let seeds: Vec<u64> = (0..seeds).collect();
    let report = gradient_check_suite(&ZooModel::ALL, &seeds)?;
    println!("models checked: {}", report.models_checked);
    println!("max relative error: {:e}", report.max_rel_error);
    if let Some(w) = report.worst() {
        println!("worst: {} seed {} {}", w.model, w.seed, w.param);
    }
    println!("{}", if report.passed() { "PASS" } else { "FAIL" });
    Ok(report.passed())
}

fn theory(seeds: &[u64], clients: Option<usize>, rounds: Option<usize>, lr: Option<f64>) -> Result<bool> {
    let mut ok = true;
    for &seed in seeds {
        let mut config = TheoryModeConfig {
            seed,
            learning_rate: lr,
            ..Default::default()
        };
        if let Some(k) = clients {
            config.clients = k;
        }
        if let Some(t) = rounds {
            config.rounds = t;
        }
        let report = theory_mode_run(&config)?;
        println!("seed {seed}");
        print!("{}", report.summary());
        ok &= report.verdict.passed();
    }
    Ok(ok)
}
