//! The four rejected-image operators applied to one image.

use iris_core::perturb::{perturb, DiffusionSchedule, PerturbConfig, PerturbOp};
use iris_core::world::{generate_world, WorldConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn fmt(phi: &[f64]) -> String {
    phi.iter().map(|x| format!("{x:>6.2}")).collect::<Vec<_>>().join("")
}

fn main() -> iris_core::Result<()> {
    let world = generate_world(1, &WorldConfig::default())?;
    let cfg = PerturbConfig::default();
    let sched = DiffusionSchedule::linear(&cfg.schedule)?;
    println!("alpha_bar({}) = {:.6}", cfg.schedule.t, sched.alpha_bar(cfg.schedule.t));

    let image = &world.images[5];
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    println!("{:>9} {}", "source", fmt(&image.phi));
    for op in PerturbOp::ALL {
        let out = perturb(op, image, world.train_images(), &cfg, Some(&sched), &mut rng)?;
        println!("{:>9} {}", op.name(), fmt(&out));
    }
    Ok(())
}
