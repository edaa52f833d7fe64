//! The twisted norm and its comparison with the plain norm γ²|x|² + |v|².
//!
//! cargo run --example twisted_norm

use kla::geometry::untwisted_norm;
use kla::rng::{standard_normal_vec, stream, Purpose};
use kla::{PhaseState, TwistedNorm};

fn main() -> kla::Result<()> {
    for (gamma, h) in [(10.0, 0.05), (10.0, 0.1), (2.0, 0.5)] {
        let tn = TwistedNorm::new(gamma, h)?;
        println!(
            "gamma = {gamma}, h = {h}: alpha = {:.5} (alpha/gamma^2 = {:.5}), beta = {}",
            tn.alpha,
            tn.alpha / (gamma * gamma),
            tn.beta
        );
        let mut rng = stream(3, Purpose::States, 0);
        let (mut lo, mut hi) = (f64::INFINITY, 0.0f64);
        for _ in 0..10_000 {
            let z = PhaseState::new(
                standard_normal_vec(&mut rng, 4),
                standard_normal_vec(&mut rng, 4),
            )?;
            let ratio = (tn.norm(&z) / untwisted_norm(gamma, &z)).powi(2);
            lo = lo.min(ratio);
            hi = hi.max(ratio);
        }
        println!(
            "    squared-norm ratio over 10^4 states in [{lo:.4}, {hi:.4}], allowed [1/16, 17/16]"
        );
    }
    Ok(())
}
