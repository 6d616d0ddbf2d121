//! Command-line driver: solve bundle adjustment problems, benchmark the
//! block compression format, inspect point partitions, generate synthetic
//! datasets and run socket workers.

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use dba_core::bsmc::{memory_bytes_bsmc, memory_bytes_csr, memory_ratio, uniform_occupancy, CsrMatrix};
use dba_core::dist::{
    build_group_messages, partition_points, run_distributed, serve_one_connection, solve_serial,
    solve_threads,
};
use dba_core::io::{
    export_ply, load_bal, rcs_sparsity, save_bal, synthesize, write_report, PlyFormat,
    SyntheticSpec,
};
use dba_core::lm::{rms_pixels, LmConfig, LmTrace};
use dba_core::pcg::PcgConfig;
use dba_core::problem::BaProblem;
use std::io::Write;
use std::net::TcpListener;
use std::path::PathBuf;

#[derive(Parser)]
#[command(name = "dba", about = "Distributed bundle adjustment", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the solver on a BAL file or a synthetic dataset.
    Solve(SolveArgs),
    /// Print the memory-cost table of the block and CSR formats.
    BenchBsmc(BenchArgs),
    /// Dry-run point partition statistics.
    Partition(PartitionArgs),
    /// Serve one solver connection as a socket worker.
    Worker(WorkerArgs),
    /// Generate a synthetic dataset and write it as a BAL file.
    Synth(SynthArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Serial,
    Threads,
    Sockets,
}

#[derive(Args)]
struct InputArgs {
    /// BAL problem file.
    #[arg(long, conflicts_with = "synthetic_spec")]
    input: Option<PathBuf>,
    /// Synthetic dataset description, e.g.
    /// "images=100,features=300,sigma=1.0,forward=0.8,side=0.6,seed=1".
    #[arg(long)]
    synthetic_spec: Option<String>,
}

impl InputArgs {
    fn load(&self) -> Result<BaProblem> {
        match (&self.input, &self.synthetic_spec) {
            (Some(path), None) => {
                let (problem, pruned) = load_bal(path)
                    .with_context(|| format!("loading {}", path.display()))?;
                if pruned.pruned_cameras + pruned.pruned_points > 0 {
                    eprintln!(
                        "pruned {} cameras and {} points without observations",
                        pruned.pruned_cameras, pruned.pruned_points
                    );
                }
                Ok(problem)
            }
            (None, Some(spec)) => Ok(synthesize(&parse_spec(spec)?)?.problem),
            _ => bail!("exactly one of --input or --synthetic-spec is required"),
        }
    }
}

#[derive(Args)]
struct SolveArgs {
    #[command(flatten)]
    input: InputArgs,
    #[arg(long, value_enum, default_value = "serial")]
    mode: Mode,
    /// Worker count for threads/sockets modes.
    #[arg(long, default_value_t = 4)]
    workers: usize,
    /// Tie-point group count (defaults to the worker count).
    #[arg(long)]
    groups: Option<usize>,
    /// Threads each worker uses for its own assembly.
    #[arg(long, default_value_t = 1)]
    threads_per_worker: usize,
    /// Worker endpoints for sockets mode, repeatable.
    #[arg(long = "endpoint")]
    endpoints: Vec<String>,
    /// File with one host:port per line, alternative to --endpoint.
    #[arg(long)]
    endpoints_file: Option<PathBuf>,
    #[arg(long, default_value_t = 1e-4)]
    lambda_init: f64,
    #[arg(long, default_value_t = 1e-6)]
    pcg_tol: f64,
    /// Mat-vec parallelism inside the PCG.
    #[arg(long, default_value_t = 4)]
    pcg_groups: usize,
    #[arg(long, default_value_t = 50)]
    max_iters: usize,
    #[arg(long, default_value_t = 1e-6)]
    function_tolerance: f64,
    #[arg(long)]
    fix_first_camera: bool,
    /// Huber scale in pixels; omitted means plain least squares.
    #[arg(long)]
    huber: Option<f64>,
    /// Write the iteration trace and summary to this file.
    #[arg(long)]
    report: Option<PathBuf>,
    /// Export the solved points as a PLY cloud.
    #[arg(long)]
    export_ply: Option<PathBuf>,
    /// Write ASCII PLY instead of binary.
    #[arg(long)]
    ply_ascii: bool,
}

#[derive(Args)]
struct BenchArgs {
    /// Camera counts, comma separated.
    #[arg(long, default_value = "10000,50000,100000,200000", value_delimiter = ',')]
    n: Vec<u64>,
    #[arg(long, default_value_t = 11)]
    c: u64,
    /// Sparsities, comma separated.
    #[arg(long, default_value = "0.01,0.04,0.1,0.2", value_delimiter = ',')]
    alpha: Vec<f64>,
    /// Build and audit real structures up to this camera count.
    #[arg(long, default_value_t = 200)]
    audit_max_n: u64,
}

#[derive(Args)]
struct PartitionArgs {
    #[command(flatten)]
    input: InputArgs,
    #[arg(long, default_value_t = 4)]
    groups: usize,
}

#[derive(Args)]
struct WorkerArgs {
    /// Listen address, e.g. 127.0.0.1:7000 (port 0 picks one).
    #[arg(long)]
    listen: String,
    #[arg(long, default_value_t = 1)]
    threads: usize,
}

#[derive(Args)]
struct SynthArgs {
    /// Synthetic dataset description, see `solve --synthetic-spec`.
    #[arg(long)]
    spec: String,
    /// Output BAL path.
    #[arg(long)]
    output: PathBuf,
    /// Also export the ground-truth cloud.
    #[arg(long)]
    ply: Option<PathBuf>,
}

fn parse_spec(text: &str) -> Result<SyntheticSpec> {
    let mut spec = SyntheticSpec::default();
    for part in text.split(',').filter(|p| !p.trim().is_empty()) {
        let (key, value) = part
            .split_once('=')
            .with_context(|| format!("expected key=value, got {part:?}"))?;
        let key = key.trim();
        let value = value.trim();
        let parse_f = || -> Result<f64> {
            value
                .parse()
                .with_context(|| format!("bad number for {key}: {value:?}"))
        };
        match key {
            "images" => spec.n_images = value.parse()?,
            "features" => spec.features_per_image = value.parse()?,
            "sigma" => spec.noise_sigma_px = parse_f()?,
            "cols" => spec.grid_cols = Some(value.parse()?),
            "altitude" => spec.altitude = parse_f()?,
            "forward" => spec.forward_overlap = parse_f()?,
            "side" => spec.side_overlap = parse_f()?,
            "focal" => spec.focal_px = parse_f()?,
            "half_extent" => spec.image_half_extent_px = parse_f()?,
            "seed" => spec.seed = value.parse()?,
            other => bail!("unknown synthetic spec key {other:?}"),
        }
    }
    Ok(spec)
}

fn print_trace(trace: &LmTrace, problem: &BaProblem) -> Result<()> {
    let mut stdout = std::io::stdout().lock();
    write_report(&mut stdout, trace, problem, &[])?;
    Ok(())
}

fn run_solve(args: SolveArgs) -> Result<()> {
    let mut problem = args.input.load()?;
    problem.huber_scale = args.huber;
    let config = LmConfig {
        lambda_init: args.lambda_init,
        max_iterations: args.max_iters,
        function_tolerance: args.function_tolerance,
        fix_first_camera: args.fix_first_camera,
        pcg: PcgConfig {
            rel_tolerance: args.pcg_tol,
            max_iterations: None,
            n_groups: args.pcg_groups.max(1),
        },
        ..Default::default()
    };
    eprintln!(
        "solving: {} cameras, {} points, {} observations, sparsity {:.4}",
        problem.n_cameras(),
        problem.n_points(),
        problem.n_observations(),
        rcs_sparsity(&problem)
    );

    let groups = args.groups.unwrap_or(args.workers).max(1);
    let trace = match args.mode {
        Mode::Serial => solve_serial(&mut problem, &config)?,
        Mode::Threads => solve_threads(
            &mut problem,
            &config,
            args.workers.max(1),
            groups,
            args.threads_per_worker.max(1),
        )?,
        Mode::Sockets => {
            let mut endpoints = args.endpoints.clone();
            if let Some(path) = &args.endpoints_file {
                let text = std::fs::read_to_string(path)
                    .with_context(|| format!("reading {}", path.display()))?;
                endpoints.extend(
                    text.lines()
                        .map(str::trim)
                        .filter(|l| !l.is_empty() && !l.starts_with('#'))
                        .map(str::to_owned),
                );
            }
            if endpoints.is_empty() {
                bail!("sockets mode needs --endpoint or --endpoints-file");
            }
            run_distributed(&mut problem, &config, &endpoints, groups.max(endpoints.len()))?
        }
    };

    print_trace(&trace, &problem)?;
    if let Some(path) = &args.report {
        let mut file = std::fs::File::create(path)
            .with_context(|| format!("creating {}", path.display()))?;
        write_report(&mut file, &trace, &problem, &[])?;
        eprintln!("report written to {}", path.display());
    }
    if let Some(path) = &args.export_ply {
        let format = if args.ply_ascii {
            PlyFormat::Ascii
        } else {
            PlyFormat::BinaryLittleEndian
        };
        let n = export_ply(&problem, path, format)?;
        eprintln!("wrote {n} points to {}", path.display());
    }
    Ok(())
}

fn run_bench(args: BenchArgs) -> Result<()> {
    println!("{:>8} {:>3} {:>6} {:>16} {:>16} {:>8}", "n", "c", "alpha", "csr_bytes", "block_bytes", "ratio");
    for &n in &args.n {
        for &alpha in &args.alpha {
            match (
                memory_bytes_csr(n, args.c, alpha),
                memory_bytes_bsmc(n, args.c, alpha),
                memory_ratio(n, args.c, alpha),
            ) {
                (Ok(yc), Ok(yb), Ok(ratio)) => {
                    println!(
                        "{n:>8} {:>3} {alpha:>6.3} {yc:>16.0} {yb:>16.0} {ratio:>8.3}",
                        args.c
                    );
                }
                (Err(e), _, _) | (_, Err(e), _) | (_, _, Err(e)) => {
                    println!("{n:>8} {:>3} {alpha:>6.3} invalid: {e}", args.c);
                }
            }
        }
    }

    println!("\naudit of constructed structures (uniform occupancy):");
    println!("{:>6} {:>3} {:>6} {:>14} {:>14} {:>14} {:>14}", "n", "c", "alpha", "block_audited", "block_formula", "csr_audited", "csr_formula");
    for &n in args.n.iter().filter(|&&n| n <= args.audit_max_n) {
        for &alpha in &args.alpha {
            let m = match uniform_occupancy(n as usize, args.c as usize, alpha, 1) {
                Ok(m) => m,
                Err(e) => {
                    println!("{n:>6} {:>3} {alpha:>6.3} invalid: {e}", args.c);
                    continue;
                }
            };
            let csr = CsrMatrix::from_block_structure(&m)?;
            println!(
                "{n:>6} {:>3} {alpha:>6.3} {:>14} {:>14.0} {:>14} {:>14.0}",
                args.c,
                m.audited_bytes_compat(),
                memory_bytes_bsmc(n, args.c, alpha)?,
                csr.audited_bytes(),
                memory_bytes_csr(n, args.c, alpha)?,
            );
        }
    }
    Ok(())
}

fn run_partition(args: PartitionArgs) -> Result<()> {
    let problem = args.input.load()?;
    let partition = partition_points(problem.n_points(), args.groups);
    let messages = build_group_messages(&problem, &partition);
    println!(
        "{} points into {} groups (sparsity {:.4}):",
        problem.n_points(),
        partition.n_groups,
        rcs_sparsity(&problem)
    );
    println!(
        "{:>6} {:>10} {:>12} {:>10} {:>14}",
        "group", "points", "observations", "cameras", "tie_bytes"
    );
    for msg in &messages {
        let bytes = dba_core::dist::messages::encode_frame(
            &dba_core::dist::Message::TiePointGroup(msg.clone()),
        )
        .len();
        println!(
            "{:>6} {:>10} {:>12} {:>10} {:>14}",
            msg.group_id,
            msg.points.len(),
            msg.observations.len(),
            msg.involved_cameras.len(),
            bytes
        );
    }
    Ok(())
}

fn run_worker(args: WorkerArgs) -> Result<()> {
    let listener = TcpListener::bind(&args.listen)
        .with_context(|| format!("binding {}", args.listen))?;
    println!("listening on {}", listener.local_addr()?);
    std::io::stdout().flush()?;
    serve_one_connection(listener, args.threads.max(1))?;
    Ok(())
}

fn run_synth(args: SynthArgs) -> Result<()> {
    let spec = parse_spec(&args.spec)?;
    let result = synthesize(&spec)?;
    save_bal(&result.problem, &args.output)?;
    eprintln!(
        "wrote {}: {} cameras, {} points, {} observations, rms at truth {:.3e} px",
        args.output.display(),
        result.problem.n_cameras(),
        result.problem.n_points(),
        result.problem.n_observations(),
        rms_pixels(&result.problem)
    );
    if let Some(path) = &args.ply {
        export_ply(&result.problem, path, PlyFormat::BinaryLittleEndian)?;
    }
    Ok(())
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Solve(args) => run_solve(args),
        Command::BenchBsmc(args) => run_bench(args),
        Command::Partition(args) => run_partition(args),
        Command::Worker(args) => run_worker(args),
        Command::Synth(args) => run_synth(args),
    }
}
