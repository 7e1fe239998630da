//! Score sampled captions with the image-conditioned and image-free implicit
//! rewards and show how the rectified score reorders them.

use iris_core::align::{make_biased_corpus, pretrain_stage, warmup_stage};
use iris_core::config::RunConfig;
use iris_core::eval::grounding_quality;
use iris_core::policy::Context;
use iris_core::reward::score_candidate;
use iris_core::world::generate_world;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> iris_core::Result<()> {
    let cfg = RunConfig::default();
    let world = generate_world(cfg.train.seed, &cfg.world)?;
    let corpus = make_biased_corpus(&world, &cfg)?;
    let (base, _) = pretrain_stage(&world, &corpus, &cfg)?;
    let (warm, _) = warmup_stage(&world, &base, &cfg)?;

    let image = &world.images[0];
    let ctx = Context::new(image.phi.clone(), 0);
    println!("image objects {:?}", image.objects);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    println!("{:>8} {:>8} | {:>8} {:>8} {:>8} | caption", "s*", "r_img", "S(0)", "S(0.7)", "S(5)");
    for _ in 0..8 {
        let y = warm.sample(&ctx, cfg.sift.temperature, world.config.max_len, &mut rng)?;
        let s = |gamma| score_candidate(&warm, &base, &base, &ctx, &y, gamma).map(|r| r.s);
        let r = score_candidate(&warm, &base, &base, &ctx, &y, 0.7)?;
        println!(
            "{:>8.3} {:>8.3} | {:>8.3} {:>8.3} {:>8.3} | {:?}",
            grounding_quality(&world.vocab, image, &y),
            r.r_image,
            s(0.0)?,
            r.s,
            s(5.0)?,
            y
        );
    }
    Ok(())
}
