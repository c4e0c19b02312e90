//! Command-line front end: dataset generation, the full grid, the
//! template sweep, a local mock server, and record re-aggregation.

use std::path::PathBuf;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};

use icl_demod::channel::{make_constellation, write_task_records};
use icl_demod::experiment::{
    build_backend, estimate_calls, load_config, report, resolve_templates, run_grid,
    template_sweep, validate, ExperimentConfig,
};
use icl_demod::llm::mock::MockBackend;
use icl_demod::llm::server::serve_mock;
use icl_demod::prompting::{load_templates, template_registry, templates_to_toml};
use icl_demod::rng::SeedRecord;

#[derive(Parser)]
#[command(name = "icl-demod", version, about = "Few-shot demodulation study harness")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the full shots x seeds x methods grid and persist results.
    Run(RunArgs),
    /// Write task datasets (demonstrations plus test points) as JSONL.
    Generate(GenerateArgs),
    /// Compare the in-context methods across every prompt template.
    SweepTemplates(SweepArgs),
    /// Serve the offline scorer over the completions wire protocol.
    ServeMock(ServeArgs),
    /// Recompute aggregates from a stored run and verify them bit-exactly.
    Report(ReportArgs),
    /// Print the built-in prompt template registry as TOML.
    Templates,
}

/// Config-file overrides shared by the commands that run cells.
#[derive(Args)]
struct Overrides {
    /// TOML config file; flags below override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// "mock", "http", a base URL, or "replay:<path>".
    #[arg(long)]
    backend: Option<String>,
    /// Comma-separated shot counts, e.g. "4,8,32".
    #[arg(long)]
    shots: Option<String>,
    /// Number of seeds; replaces the config seed list with seed..seed+N.
    #[arg(long)]
    seeds: Option<u64>,
    /// First seed (default 0); with --seeds N runs seeds seed..seed+N,
    /// alone runs exactly this one seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Test points per cell.
    #[arg(long)]
    n_test: Option<usize>,
    /// Comma-separated methods, e.g. "vanilla,conc,linc,dnn4,guessing".
    #[arg(long)]
    methods: Option<String>,
    /// Comma-separated template ids for the in-context methods.
    #[arg(long)]
    templates: Option<String>,
    /// Extra templates (TOML) appended to the built-in registry.
    #[arg(long)]
    templates_file: Option<PathBuf>,
    /// Output directory; defaults to the config's output_dir.
    #[arg(long)]
    output: Option<PathBuf>,
    /// Worker threads; 0 means one per core.
    #[arg(long)]
    workers: Option<usize>,
    /// Abort any cell that would push past this many backend calls.
    #[arg(long)]
    max_calls: Option<u64>,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    overrides: Overrides,
    /// Print the planned cells and backend calls, then exit.
    #[arg(long)]
    dry_run: bool,
}

#[derive(Args)]
struct GenerateArgs {
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    overrides: Overrides,
    /// Shot count the sweep runs at.
    #[arg(long, default_value_t = 8)]
    sweep_shots: usize,
}

#[derive(Args)]
struct ServeArgs {
    /// Listen address.
    #[arg(long, default_value = "127.0.0.1:18080")]
    addr: String,
    /// Extra templates (TOML) the scorer should understand.
    #[arg(long)]
    templates_file: Option<PathBuf>,
}

#[derive(Args)]
struct ReportArgs {
    /// Directory of a finished run.
    #[arg(default_value = "runs/grid")]
    dir: PathBuf,
}

fn parse_list<T: std::str::FromStr>(text: &str, what: &str) -> anyhow::Result<Vec<T>>
where
    T::Err: std::fmt::Display,
{
    text.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<T>().map_err(|e| anyhow::anyhow!("bad {what} '{s}': {e}")))
        .collect()
}

fn resolve_config(overrides: &Overrides) -> anyhow::Result<(ExperimentConfig, PathBuf)> {
    let mut config = match &overrides.config {
        Some(path) => load_config(path).with_context(|| format!("loading {}", path.display()))?,
        None => ExperimentConfig::default(),
    };
    if let Some(backend) = &overrides.backend {
        config.backend = backend.clone();
    }
    if let Some(shots) = &overrides.shots {
        config.shots = parse_list(shots, "shot count")?;
    }
    match (overrides.seed, overrides.seeds) {
        (base, Some(n)) => {
            let base = base.unwrap_or(0);
            config.seeds = (base..base + n).collect();
        }
        (Some(base), None) => config.seeds = vec![base],
        (None, None) => {}
    }
    if let Some(n_test) = overrides.n_test {
        config.n_test = n_test;
    }
    if let Some(methods) = &overrides.methods {
        config.methods = parse_list(methods, "method")?;
    }
    if let Some(templates) = &overrides.templates {
        config.template_ids = parse_list(templates, "template id")?;
    }
    if let Some(path) = &overrides.templates_file {
        config.templates_file = Some(path.clone());
    }
    if let Some(workers) = overrides.workers {
        config.workers = workers;
    }
    if let Some(cap) = overrides.max_calls {
        config.max_backend_calls = Some(cap);
    }
    let output = overrides.output.clone().unwrap_or_else(|| config.output_dir.clone());
    Ok((config, output))
}

fn cmd_run(args: &RunArgs) -> anyhow::Result<()> {
    let (config, output) = resolve_config(&args.overrides)?;
    let templates = resolve_templates(&config)?;
    validate(&config, &templates)?;
    let estimate = estimate_calls(&config);
    if args.dry_run {
        println!(
            "dry run: {} in-context cells, {} offline cells, {} backend calls",
            estimate.llm_cells, estimate.offline_cells, estimate.backend_calls
        );
        return Ok(());
    }
    if config.backend != "mock" {
        // fail fast on missing credentials before any cell runs
        build_backend(&config, &templates)?;
    }
    let summary = run_grid(&config, &output)?;
    println!(
        "grid done: {} records, {} failures, {} backend calls, {:.1}s",
        summary.records.len(),
        summary.failures.len(),
        summary.total_backend_calls,
        summary.wall_secs
    );
    println!("results in {}", output.display());
    if !summary.failures.is_empty() {
        for f in &summary.failures {
            eprintln!("failed cell {}: {}", f.cell, f.error);
        }
        bail!("{} cells failed", summary.failures.len());
    }
    Ok(())
}

fn cmd_generate(args: &GenerateArgs) -> anyhow::Result<()> {
    let (config, output) = resolve_config(&args.overrides)?;
    let constellation = make_constellation(&config.ring_spec)?;
    std::fs::create_dir_all(&output)?;
    let mut written = 0usize;
    for &shots in &config.shots {
        for &seed in &config.seeds {
            let seed_rec = SeedRecord::new(seed, format!("task/shots={shots}"));
            let task = icl_demod::channel::generate_task(
                &seed_rec,
                shots,
                config.n_test,
                &constellation,
                &config.channel,
            )?;
            let task_id = format!("s{shots}-r{seed}");
            let path = output.join(format!("task-{task_id}.jsonl"));
            let mut file = std::io::BufWriter::new(std::fs::File::create(&path)?);
            write_task_records(&mut file, &task, &task_id)?;
            std::io::Write::flush(&mut file)?;
            written += 1;
        }
    }
    println!("wrote {written} task files to {}", output.display());
    Ok(())
}

fn cmd_sweep(args: &SweepArgs) -> anyhow::Result<()> {
    let (config, output) = resolve_config(&args.overrides)?;
    let summary = template_sweep(&config, args.sweep_shots, &output)?;
    println!(
        "sweep done: {} records over {} templates, {} backend calls",
        summary.records.len(),
        summary.rows.len() / 3,
        summary.total_backend_calls
    );
    for b in &summary.boxes {
        println!(
            "{}: min {:.4} q1 {:.4} median {:.4} q3 {:.4} max {:.4} variance {:.6}",
            b.method.as_str(),
            b.min,
            b.q1,
            b.median,
            b.q3,
            b.max,
            b.variance
        );
    }
    println!("results in {}", output.display());
    Ok(())
}

fn cmd_serve(args: &ServeArgs) -> anyhow::Result<()> {
    let mut templates = template_registry();
    if let Some(path) = &args.templates_file {
        templates.extend(load_templates(path)?);
    }
    let server = serve_mock(&args.addr, MockBackend::with_templates(templates))?;
    println!("mock scorer listening on {}", server.base_url());
    std::io::Write::flush(&mut std::io::stdout())?;
    loop {
        std::thread::sleep(std::time::Duration::from_secs(3600));
    }
}

fn cmd_report(args: &ReportArgs) -> anyhow::Result<()> {
    let summary = report(&args.dir)?;
    println!(
        "report verified {} cells over {} samples; tables rewritten in {}",
        summary.cells,
        summary.samples,
        args.dir.display()
    );
    Ok(())
}

fn cmd_templates() -> anyhow::Result<()> {
    print!("{}", templates_to_toml(&template_registry())?);
    Ok(())
}

fn main() -> anyhow::Result<()> {
    let cli = Cli::parse();
    match &cli.command {
        Command::Run(args) => cmd_run(args),
        Command::Generate(args) => cmd_generate(args),
        Command::SweepTemplates(args) => cmd_sweep(args),
        Command::ServeMock(args) => cmd_serve(args),
        Command::Report(args) => cmd_report(args),
        Command::Templates => cmd_templates(),
    }
}
