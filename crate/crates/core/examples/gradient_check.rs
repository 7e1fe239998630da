//! Compare analytic gradients of the sequence log-probability and of the
//! composite loss with central finite differences.

use iris_core::objective::{loss_total, loss_total_value, LossConfig, TrainingPair};
use iris_core::policy::{Context, PolicyParams};
use iris_core::world::Vocab;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn fd(theta: &PolicyParams, h: f64, f: impl Fn(&PolicyParams) -> f64) -> Vec<f64> {
    (0..theta.n_params())
        .map(|k| {
            let mut up = theta.clone();
            let mut down = theta.clone();
            *up.values_mut().nth(k).unwrap() += h;
            *down.values_mut().nth(k).unwrap() -= h;
            (f(&up) - f(&down)) / (2.0 * h)
        })
        .collect()
}

fn worst(analytic: &PolicyParams, numeric: &[f64]) -> f64 {
    analytic
        .values()
        .zip(numeric)
        .map(|(&a, &n)| (a - n).abs() / a.abs().max(n.abs()).max(1e-4))
        .fold(0.0, f64::max)
}

fn main() -> iris_core::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let vocab = Vocab::new(5, 2);
    let theta = PolicyParams::random(vocab, 2, 1.0, &mut rng);
    let reference = PolicyParams::random(vocab, 2, 1.0, &mut rng);
    let ctx = Context::new(vec![0.8, 0.0, 0.4, 0.0, 1.0], 0);
    let y = theta.sample(&ctx, 1.0, 8, &mut rng)?;
    println!("y = {y:?}, log p = {:.6}", theta.sequence_logprob(&ctx, &y, false)?);

    let g = theta.logprob_grad(&ctx, &y)?;
    let n = fd(&theta, 1e-5, |q| q.sequence_logprob(&ctx, &y, false).unwrap());
    println!("log-prob gradient: max rel err {:.2e} over {} coordinates", worst(&g, &n), n.len());

    let mut rejected = theta.sample(&ctx, 1.0, 8, &mut rng)?;
    while rejected == y {
        rejected = theta.sample(&ctx, 1.0, 8, &mut rng)?;
    }
    let pair = TrainingPair {
        ctx: ctx.clone(),
        ctx_tilde: Context::new(vec![0.3, 0.5, 0.1, 0.0, 0.6], 0),
        chosen: y,
        rejected,
    };
    let cfg = LossConfig::default();
    let batch = [pair];
    let (b, g) = loss_total(&theta, &reference, &batch, &cfg)?;
    let n = fd(&theta, 1e-5, |q| loss_total_value(q, &reference, &batch, &cfg).unwrap().l_total);
    println!(
        "loss: ctp {:.4} cvp {:.4} anchor {:.4} total {:.4}",
        b.l_ctp, b.l_cvp, b.l_anchor, b.l_total
    );
    println!("loss gradient: max rel err {:.2e}", worst(&g, &n));
    Ok(())
}
