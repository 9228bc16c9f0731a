//! Validation and training loss across a grid of KL weights on a small,
//! easily over-fitted synthetic task.
//!
//! ```text
//! cargo run --release --example beta_sweep -- [n_train] [d_in] [separation] [epochs]
//! ```

use klnorm::data::{make_synthetic, SyntheticKind, SyntheticSpec};
use klnorm::experiment::{sweep_beta, TrainConfig};

fn main() -> klnorm::error::Result<()> {
    let args: Vec<f64> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let arg = |i: usize, d: f64| args.get(i).copied().unwrap_or(d);
    let n_train = arg(0, 200.0) as usize;
    let d_in = arg(1, 32.0) as usize;

    let mut spec = SyntheticSpec::new(SyntheticKind::GaussMix, 1000, d_in, 2, 7);
    spec.separation = arg(2, 1.5);
    let ds = make_synthetic(&spec)?;

    let cfg = TrainConfig {
        bottleneck: 32,
        epochs: arg(3, 50.0) as usize,
        subsample: Some(n_train),
        ..TrainConfig::default()
    };
    let grid = [0.0, 1e-3, 1e-2, 1e-1, 1.0, 100.0];
    let sweep = sweep_beta(&cfg, &ds, &grid)?;
    print!("{}", sweep.to_csv());
    let best = sweep.best();
    println!("best beta0 = {} (val {:.4}, gap {:.4})", best.beta0, best.val_loss, best.gap());
    Ok(())
}
