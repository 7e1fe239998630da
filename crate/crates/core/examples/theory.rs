//! Executable checks of the gradient form, the local margin improvement and
//! the best-of-K quality gap.

use iris_core::eval::theory::{estimate_gap, uniform_range_expectation, verify_all};

fn main() -> iris_core::Result<()> {
    for report in verify_all(0)? {
        println!("{}", report.summary());
        for d in &report.details {
            println!("    {d}");
        }
    }
    println!("K   exact (K-1)/(K+1)   noisy-score gap");
    for k in [2, 3, 5, 10, 20] {
        let noisy = estimate_gap(k, 20_000, 0.5, 1)?;
        println!("{k:<3} {:>19.4}   {:>8.4}", uniform_range_expectation(k), noisy.mean);
    }
    Ok(())
}
