//! Command-line entry point for the experiment harness.

use anyhow::{anyhow, bail, Context};
use clap::{Parser, Subcommand};
use d2sdk_core::model::Variant;
use d2sdk_harness::plan::ExperimentPlan;
use d2sdk_harness::report::ExperimentReport;
use d2sdk_harness::runner;
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(
    name = "d2sdk",
    version,
    about = "Train and evaluate the cross-domain mixture model on synthetic domain-shift benchmarks"
)]
struct Cli {
    /// JSON experiment plan; omitted fields keep their defaults, unknown fields are errors.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    /// Single training seed (one round).
    #[arg(long, global = true, conflicts_with = "seeds")]
    seed: Option<u64>,

    /// Comma-separated training seeds, one round each.
    #[arg(long, global = true, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,

    /// Output directory (reports, or exported data for gen-data).
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,

    /// Comma-separated variant names to run (e.g. Full,ERM).
    #[arg(long, global = true, value_delimiter = ',')]
    variant: Option<Vec<String>>,

    /// Override the number of training epochs.
    #[arg(long, global = true)]
    epochs: Option<usize>,

    /// Use the reference protocol: ten seeds, the full 80-epoch schedule.
    #[arg(long, global = true)]
    paper_faithful: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Leave-one-domain-out comparison of all planned variants
    Lodo,
    /// Component ablation: ConvExp, TEExp, TD, Full on shared splits
    Ablate,
    /// Loss-weight λ sensitivity sweep of the full model
    SweepLambda,
    /// Encoder depth / head count / feed-forward width sweep
    SweepTransformer,
    /// Checkpoint-selection policy comparison with gap statistics
    SelectReport,
    /// Mixed-domain target evaluation
    Mixed,
    /// Export the benchmark domains (and mixed target) as text files
    GenData,
    /// Check analytic gradients against finite differences
    GradCheck,
}

fn build_plan(cli: &Cli) -> anyhow::Result<ExperimentPlan> {
    let mut plan = match &cli.config {
        Some(path) => ExperimentPlan::from_json_file(path)
            .with_context(|| format!("loading plan from {}", path.display()))?,
        None => ExperimentPlan::default(),
    };
    if cli.paper_faithful {
        plan.seeds = (0..10).collect();
        plan.optim.epochs = 80;
    }
    if let Some(seeds) = &cli.seeds {
        plan.seeds = seeds.clone();
    }
    if let Some(seed) = cli.seed {
        plan.seeds = vec![seed];
    }
    if let Some(epochs) = cli.epochs {
        plan.optim.epochs = epochs;
    }
    if let Some(variants) = &cli.variant {
        plan.variants = variants.clone();
    }
    Ok(plan)
}

fn emit(report: &ExperimentReport, dir: &Path, stem: &str) -> anyhow::Result<()> {
    report.emit(dir, stem)?;
    print!("{}", report.to_text());
    println!(
        "wrote {} and {}",
        dir.join(format!("{stem}.txt")).display(),
        dir.join(format!("{stem}.json")).display()
    );
    Ok(())
}

fn grad_check(cli: &Cli) -> anyhow::Result<()> {
    let variants: Vec<Variant> = match &cli.variant {
        Some(names) => names
            .iter()
            .map(|n| Variant::parse(n).ok_or_else(|| anyhow!("unknown variant {n:?}")))
            .collect::<anyhow::Result<_>>()?,
        None => Variant::ALL.to_vec(),
    };
    let outcomes = runner::grad_check_micro(&variants)?;
    let mut failed = Vec::new();
    for o in &outcomes {
        println!(
            "grad-check {}: params {} checked {} kinks_skipped {} max_rel_err {:.3e} {}",
            o.variant.name(),
            o.n_params,
            o.report.checked,
            o.report.skipped_kinks,
            o.report.max_rel_err,
            if o.report.passed { "PASS" } else { "FAIL" }
        );
        if !o.report.passed {
            failed.push(o.variant.name());
        }
    }
    if !failed.is_empty() {
        bail!("gradient check failed for {}", failed.join(", "));
    }
    Ok(())
}

fn run(cli: &Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::GradCheck => return grad_check(cli),
        Command::GenData => {
            let plan = build_plan(cli)?;
            let dir = cli.out.clone().unwrap_or_else(|| PathBuf::from("data"));
            let paths = runner::generate_data(&plan, &dir)?;
            for p in &paths {
                println!("wrote {}", p.display());
            }
            return Ok(());
        }
        _ => {}
    }
    let plan = build_plan(cli)?;
    let dir = cli.out.clone().unwrap_or_else(|| PathBuf::from("reports"));
    match cli.command {
        Command::Lodo => emit(&runner::run_lodo(&plan)?, &dir, "lodo"),
        Command::Ablate => emit(&runner::run_ablation(&plan)?, &dir, "ablate"),
        Command::SweepLambda => emit(&runner::run_lambda_sweep(&plan)?, &dir, "sweep-lambda"),
        Command::SweepTransformer => {
            emit(&runner::run_transformer_sweep(&plan)?, &dir, "sweep-transformer")
        }
        Command::SelectReport => emit(&runner::run_selection_report(&plan)?, &dir, "select-report"),
        Command::Mixed => emit(&runner::run_mixed(&plan)?, &dir, "mixed"),
        Command::GenData | Command::GradCheck => unreachable!("handled above"),
    }
}

fn main() {
    let cli = Cli::parse();
    if let Err(err) = run(&cli) {
        let line = serde_json::json!({ "error": format!("{err:#}") });
        eprintln!("{line}");
        std::process::exit(1);
    }
}
