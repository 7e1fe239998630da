//! One round of on-policy sifting: candidates, extrema pairs and the
//! screening, length-filter and anchoring repairs.

use iris_core::align::{make_biased_corpus, pretrain_stage, sift_round, training_slots, warmup_stage, RoundState};
use iris_core::config::RunConfig;
use iris_core::sift::{Outcome, SiftStats};
use iris_core::world::generate_world;

fn main() -> iris_core::Result<()> {
    let cfg = RunConfig::default();
    let world = generate_world(cfg.train.seed, &cfg.world)?;
    let corpus = make_biased_corpus(&world, &cfg)?;
    let (base, _) = pretrain_stage(&world, &corpus, &cfg)?;
    let (warm, _) = warmup_stage(&world, &base, &cfg)?;

    let state = RoundState::new(1, &warm, base.clone_frozen())?;
    let slots = training_slots(&world, cfg.train.data_fraction, cfg.train.seed);
    let sifted = sift_round(&state, &base, &world, &slots, &cfg)?;

    let mut stats = SiftStats::default();
    for s in &sifted {
        stats.record(&s.outcome);
    }
    println!("{} slots: {stats:?}", sifted.len());

    for s in sifted.iter().take(3) {
        println!("image {} prompt {}", s.slot.image_id, s.slot.prompt_id);
        for c in &s.candidates {
            println!("  S={:>7.3}  {:?}", c.score.s, c.caption.tokens);
        }
        match &s.outcome {
            Outcome::Kept(p) => println!("  kept {:?}: {:?} > {:?}", p.flags, p.chosen.tokens, p.rejected.tokens),
            Outcome::Screened(reason) => println!("  screened: {reason:?}"),
        }
    }
    Ok(())
}
