//! Frozen-encoder probe on a dataset with a planted spurious feature.
//!
//! A model is trained on data where the last column equals the label. The
//! encoder and normalization are then frozen and a fresh linear classifier is
//! trained to predict the label from the spurious column alone (the other
//! columns are shuffled across rows). Lower probe accuracy means less of the
//! shortcut survived in the representation.
//!
//! ```text
//! cargo run --release --example bias_probe -- [beta0] [bias_strength]
//! ```

use klnorm::data::{make_synthetic, Split, SyntheticKind, SyntheticSpec};
use klnorm::experiment::{bias_probe, mean_std, run_seeds, ProbeConfig, TrainConfig};
use klnorm::model::Model;

fn main() -> klnorm::error::Result<()> {
    let args: Vec<f64> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let beta0 = args.first().copied().unwrap_or(0.1);
    let mut spec = SyntheticSpec::new(SyntheticKind::Biased, 1000, 8, 2, 11);
    spec.bias_strength = args.get(1).copied().unwrap_or(1.0);
    spec.separation = 2.0;
    let ds = make_synthetic(&spec)?;

    let base = TrainConfig {
        bottleneck: 16,
        epochs: 20,
        ..TrainConfig::default()
    };
    for (name, b) in [("beta0=0", 0.0), ("klnorm", beta0)] {
        let cfg = TrainConfig { beta0: b, ..base.clone() };
        let runs = run_seeds(&cfg, &ds)?;
        let acc: Vec<f64> = runs
            .iter()
            .map(|r| {
                let p = ProbeConfig { seed: r.result.seed, ..ProbeConfig::default() };
                bias_probe(&r.model, &ds, p, Split::Dev).map(|p| p.eval_accuracy)
            })
            .collect::<Result<_, _>>()?;
        let test: Vec<f64> = runs.iter().filter_map(|r| r.result.test.map(|m| m.accuracy)).collect();
        let (m, s) = mean_std(&acc);
        let (tm, ts) = mean_std(&test);
        println!("{name:>8}: probe accuracy {m:.3} ({s:.3})  shifted-test accuracy {tm:.3} ({ts:.3})  {acc:?}");
    }

    let random = Model::build(&base.model_spec(ds.d_in(), ds.n_classes), 0)?;
    let anchor = bias_probe(&random, &ds, ProbeConfig::default(), Split::Test)?;
    println!("random encoder, decorrelated test split: {:.3}", anchor.eval_accuracy);
    Ok(())
}
