//! Closed-form diagonal-Gaussian KL against a Monte-Carlo estimate.
//!
//! ```text
//! cargo run --release --example kl_oracle -- [pairs] [samples]
//! ```

use klnorm::norm::kl_diag_gauss;
use klnorm::verify::kl_oracle_suite;

fn main() -> klnorm::error::Result<()> {
    let args: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let pairs = args.first().copied().unwrap_or(20);
    let samples = args.get(1).copied().unwrap_or(200_000);

    println!("KL(N(3,1) || N(0,1)) = {}", kl_diag_gauss(&[3.0], &[1.0], &[0.0], &[1.0])?);
    println!("KL(N(0,1) || N(0,4)) = {:.4}", kl_diag_gauss(&[0.0], &[1.0], &[0.0], &[4.0])?);
    println!("KL(N(0,4) || N(0,1)) = {:.4}", kl_diag_gauss(&[0.0], &[4.0], &[0.0], &[1.0])?);

    for r in kl_oracle_suite(pairs, &[1, 4, 16], samples, 0)? {
        println!(
            "K={:<2} closed {:>9.5}  monte carlo {:>9.5} ± {:.5}  z {:.2}",
            r.k, r.closed_form, r.monte_carlo.mean, r.monte_carlo.std_err, r.z_score()
        );
    }
    Ok(())
}
