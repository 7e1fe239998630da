//! Full run in memory: pretraining, warm-up and the preference rounds.
//!
//! cargo run --release --example pipeline -- 2 3   # seed 2, three rounds

use iris_core::align::run_pipeline;
use iris_core::config::RunConfig;

fn main() -> iris_core::Result<()> {
    let mut args = std::env::args().skip(1);
    let mut cfg = RunConfig::default();
    if let Some(seed) = args.next().and_then(|s| s.parse().ok()) {
        cfg.train.seed = seed;
    }
    if let Some(rounds) = args.next().and_then(|s| s.parse().ok()) {
        cfg.train.rounds = rounds;
    }
    let run = run_pipeline(&cfg)?;
    println!(
        "pretrain nll {:.3} -> {:.3}, warm-up nll {:.3} -> {:.3}",
        run.pretrain_nll[0],
        run.pretrain_nll.last().unwrap(),
        run.sft_nll[0],
        run.sft_nll.last().unwrap()
    );
    println!("round  chair_i  hal_rate  cover  pairs  l_total");
    for m in &run.metrics {
        println!(
            "{:>5}  {:>7.3}  {:>8.3}  {:>5.3}  {:>5}  {:>7.4}",
            m.round, m.chair_i, m.hal_rate, m.cover, m.n_pairs, m.l_total
        );
    }
    for r in &run.rounds {
        println!("round {} sifting: {:?}", r.round, r.stats);
    }
    Ok(())
}
