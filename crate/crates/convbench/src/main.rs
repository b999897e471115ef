//! `convbench`: time convolution back-ends over whole CNN models.

use std::io;
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Duration;

use clap::Parser;
use convgemm::sim::{emit_csv, parse_model, run_inference, write_csv, Algo, RunConfig, RunRecord};
use convgemm::{BlockingParams, ConvError};

#[derive(Parser, Debug)]
#[command(
    name = "convbench",
    version,
    about = "Simulate CNN inference with a chosen convolution back-end"
)]
struct Args {
    /// Model description file
    #[arg(long)]
    model: PathBuf,

    /// Batch size, or a sweep `first:last[:step]`
    #[arg(long, default_value = "1", value_parser = parse_batches)]
    batch: Batches,

    /// direct, im2col, convgemm, gemm-only or im2col-only
    #[arg(long, default_value = "convgemm")]
    algo: Algo,

    #[arg(long, env = "CONVBENCH_THREADS", default_value_t = 1, value_parser = clap::value_parser!(u32).range(1..))]
    threads: u32,

    /// Minimum accumulated wall time per layer measurement, in seconds
    #[arg(long, default_value_t = 1.0, value_parser = parse_seconds)]
    min_time: f64,

    /// CSV destination (stdout when absent)
    #[arg(long)]
    out: Option<PathBuf>,

    /// Verify every conv layer against the direct convolution
    #[arg(long)]
    check: bool,

    /// Seed for the synthetic weights and activations
    #[arg(long, default_value_t = 0x5eed)]
    seed: u64,

    #[arg(long)]
    mc: Option<usize>,
    #[arg(long)]
    nc: Option<usize>,
    #[arg(long)]
    kc: Option<usize>,
    #[arg(long)]
    mr: Option<usize>,
    #[arg(long)]
    nr: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
struct Batches(Vec<usize>);

fn parse_batches(s: &str) -> Result<Batches, String> {
    let parts = s
        .split(':')
        .map(|p| {
            p.trim()
                .parse::<usize>()
                .map_err(|_| format!("`{p}` is not a batch size"))
        })
        .collect::<Result<Vec<_>, _>>()?;
    let (first, last, step) = match parts[..] {
        [b] => (b, b, 1),
        [b0, b1] => (b0, b1, 1),
        [b0, b1, step] => (b0, b1, step),
        _ => return Err("expected `b`, `first:last` or `first:last:step`".into()),
    };
    if first == 0 || step == 0 {
        return Err("batch sizes and step must be positive".into());
    }
    if last < first {
        return Err(format!("sweep end {last} is below its start {first}"));
    }
    Ok(Batches((first..=last).step_by(step).collect()))
}

fn parse_seconds(s: &str) -> Result<f64, String> {
    let v: f64 = s.parse().map_err(|_| format!("`{s}` is not a number"))?;
    if !v.is_finite() || v < 0.0 {
        return Err("time must be a non-negative number of seconds".into());
    }
    Ok(v)
}

fn blocking(args: &Args) -> convgemm::Result<BlockingParams> {
    let d = BlockingParams::default();
    BlockingParams::new(
        args.mc.unwrap_or(d.mc),
        args.nc.unwrap_or(d.nc),
        args.kc.unwrap_or(d.kc),
        args.mr.unwrap_or(d.mr),
        args.nr.unwrap_or(d.nr),
    )
}

fn run(args: &Args, records: &mut Vec<RunRecord>) -> convgemm::Result<()> {
    let model = parse_model(&args.model)?;
    let cfg = RunConfig {
        algo: args.algo,
        bp: blocking(args)?,
        threads: args.threads as usize,
        min_time: Duration::from_secs_f64(args.min_time),
        check: args.check,
        seed: args.seed,
    };
    for &b in &args.batch.0 {
        let rec = run_inference(&model, b, &cfg)?;
        eprintln!(
            "{} b={} {}: {:.4} s, {:.2} GFLOPS",
            rec.model,
            b,
            rec.algo,
            rec.total_time(),
            rec.total_flops() / rec.total_time() / 1e9
        );
        records.push(rec);
    }
    Ok(())
}

fn main() -> ExitCode {
    // usage errors exit with 1; 2 is reserved for allocation failure
    let args = match Args::try_parse() {
        Ok(a) => a,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::FAILURE
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let mut records = Vec::new();
    let outcome = run(&args, &mut records);

    // whatever completed before a failure is still reported
    let written = match &args.out {
        Some(path) => emit_csv(&records, path),
        None => write_csv(&records, io::stdout().lock()).map_err(ConvError::from),
    };
    match outcome.and(written) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("convbench: {e}");
            match e {
                ConvError::AllocationFailure { .. } => ExitCode::from(2),
                _ => ExitCode::FAILURE,
            }
        }
    }
}
