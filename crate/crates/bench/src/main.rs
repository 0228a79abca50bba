use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use flash_lcsm::tau::CalibrationShape;
use flash_lcsm_bench::sweep::write_records;
use flash_lcsm_bench::{run_calibration, run_sweep, BenchError, SweepSpec};

/// Benchmark exact relaxed LCSM inference against the quadratic baselines.
///
/// Shape flags accept comma-separated lists; the sweep runs their cross
/// product.
#[derive(Debug, Parser)]
#[command(name = "flash-bench", version)]
struct Cli {
    /// Plain-text `key = value` config; flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Horizons (powers of two).
    #[arg(long = "L")]
    l: Option<String>,
    /// Layer counts.
    #[arg(long = "M")]
    m: Option<String>,
    /// Embedding widths.
    #[arg(long = "D")]
    d: Option<String>,
    /// Batch sizes.
    #[arg(long = "B")]
    b: Option<String>,
    /// Modes: lazy, eager, relaxed-direct, relaxed-fft, relaxed-hybrid,
    /// generic, data-dependent.
    #[arg(long)]
    mode: Option<String>,
    /// τ choice for relaxed-hybrid and generic: hybrid, direct, fft_padded,
    /// fft_cyclic_cached.
    #[arg(long = "impl")]
    implementation: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Per-token records; `.jsonl` / `.json` selects JSON lines, else CSV.
    #[arg(long)]
    output: Option<PathBuf>,
    /// Dispatch table to load, or to write with --calibrate.
    #[arg(long)]
    dispatch_table: Option<PathBuf>,
    /// Time every τ implementation for sides 1 ..= max(L)/2, write the
    /// table to --dispatch-table and exit.
    #[arg(long)]
    calibrate: bool,
    #[arg(long)]
    layer_parallel: bool,
    /// Relaxed modes keep only half of the activations.
    #[arg(long)]
    half_memory: bool,
    /// Largest tile side run across layers concurrently.
    #[arg(long)]
    max_parallel_tile: Option<usize>,
    /// Layer-parallel tasks run on the calling thread in layer order.
    #[arg(long)]
    deterministic: bool,
    #[arg(long)]
    reps: Option<usize>,
    #[arg(long)]
    warmup: Option<usize>,
}

fn build_spec(cli: &Cli) -> Result<SweepSpec, BenchError> {
    let mut spec = SweepSpec::default();
    if let Some(path) = &cli.config {
        spec.load_config(path)?;
    }
    let pairs: [(&str, Option<String>); 9] = [
        ("L", cli.l.clone()),
        ("M", cli.m.clone()),
        ("D", cli.d.clone()),
        ("B", cli.b.clone()),
        ("modes", cli.mode.clone()),
        ("impl", cli.implementation.clone()),
        ("seed", cli.seed.map(|v| v.to_string())),
        ("reps", cli.reps.map(|v| v.to_string())),
        ("warmup", cli.warmup.map(|v| v.to_string())),
    ];
    for (k, v) in pairs {
        if let Some(v) = v {
            spec.set(k, &v)?;
        }
    }
    if let Some(t) = cli.max_parallel_tile {
        spec.set("max_parallel_tile", &t.to_string())?;
    }
    spec.layer_parallel |= cli.layer_parallel;
    spec.half_memory |= cli.half_memory;
    spec.deterministic |= cli.deterministic;
    if cli.output.is_some() {
        spec.output = cli.output.clone();
    }
    if cli.dispatch_table.is_some() {
        spec.dispatch_table = cli.dispatch_table.clone();
    }
    spec.validate()?;
    Ok(spec)
}

fn calibrate(spec: &SweepSpec) -> Result<(), BenchError> {
    let out = spec
        .dispatch_table
        .as_ref()
        .ok_or_else(|| BenchError::Usage("--calibrate needs --dispatch-table <path>".into()))?;
    let max_l = *spec.horizons.iter().max().expect("validated");
    let sides: Vec<usize> = (0..max_l.trailing_zeros()).map(|q| 1 << q).collect();
    let shape = CalibrationShape {
        lanes: spec.lanes[0],
        layers: spec.layers[0],
        channels: spec.channels[0],
    };
    let table = run_calibration(&sides, spec.reps, shape, out)?;
    print!("{}", table.to_text());
    eprintln!("wrote {} entries to {}", sides.len(), out.display());
    Ok(())
}

fn run(cli: &Cli) -> Result<(), BenchError> {
    let spec = build_spec(cli)?;
    if cli.calibrate {
        return calibrate(&spec);
    }
    let report = run_sweep(&spec)?;
    print!("{}", report.summary());
    if let Some(path) = &spec.output {
        write_records(&report.records, path)?;
        eprintln!(
            "wrote {} records to {}",
            report.records.len(),
            path.display()
        );
    }
    if !report.mismatches.is_empty() {
        return Err(BenchError::OracleMismatch(report.mismatches.join("\n")));
    }
    if !report.audit_failures.is_empty() {
        return Err(BenchError::AuditFailed(report.audit_failures.join("\n")));
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("flash-bench: {e}");
            match e {
                BenchError::Usage(_) => ExitCode::from(2),
                _ => ExitCode::FAILURE,
            }
        }
    }
}
