//! Final-round metrics across a sweep grid, as CSV on stdout.
//!
//! cargo run --release --example sweep -- lambda 1,2

use clap::ValueEnum;
use iris_core::cli::{run_sweep, SweepKind};
use iris_core::config::RunConfig;

fn main() -> iris_core::Result<()> {
    let mut args = std::env::args().skip(1);
    let kind = args
        .next()
        .map(|s| SweepKind::from_str(&s, true).expect("gamma|lambda|k|operator|data|loss|paradigm"))
        .unwrap_or(SweepKind::Gamma);
    let seeds: Vec<u64> = args
        .next()
        .map(|s| s.split(',').map(|x| x.parse().expect("seed")).collect())
        .unwrap_or_else(|| vec![1]);
    print!("{}", run_sweep(&RunConfig::default(), kind, &seeds)?);
    Ok(())
}
