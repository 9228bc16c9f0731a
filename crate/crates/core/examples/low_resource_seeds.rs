//! Low-resource comparison: several normalization layers trained on seeded
//! stratified subsamples, reported as mean (std) over five seeds.
//!
//! ```text
//! cargo run --release --example low_resource_seeds -- [n_train]
//! ```

use klnorm::data::{make_synthetic, SyntheticKind, SyntheticSpec};
use klnorm::experiment::{aggregate_seeds, run_seeds, TrainConfig};
use klnorm::norm::NormKind;

fn main() -> klnorm::error::Result<()> {
    let n: usize = std::env::args().nth(1).and_then(|a| a.parse().ok()).unwrap_or(200);
    let mut spec = SyntheticSpec::new(SyntheticKind::GaussMix, 2000, 24, 3, 3);
    spec.separation = 2.5;
    let ds = make_synthetic(&spec)?;

    println!("{n} training examples, 5 seeds");
    for norm in [NormKind::None, NormKind::Batch, NormKind::Layer, NormKind::KlNorm] {
        let cfg = TrainConfig {
            norm,
            bottleneck: 16,
            epochs: 20,
            subsample: Some(n),
            ..TrainConfig::default()
        };
        let results: Vec<_> = run_seeds(&cfg, &ds)?.into_iter().map(|r| r.result).collect();
        let agg = aggregate_seeds(&results)?;
        let get = |name: &str| agg.metrics.iter().find(|m| m.metric == name).map(|m| m.formatted.clone()).unwrap_or_default();
        println!("{:>8}: accuracy {}  macro-F1 {}  test CE {}", norm.to_string(), get("test_accuracy"), get("test_macro_f1"), get("test_ce"));
    }
    Ok(())
}
