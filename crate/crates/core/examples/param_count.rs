//! Exact parameter accounting for the bottleneck classifier.

use klnorm::model::{count_parameters, Model, ModelSpec};
use klnorm::norm::NormKind;

fn main() -> klnorm::error::Result<()> {
    for k in [4, 8, 64] {
        let m = Model::build(&ModelSpec::new(16, k, NormKind::KlNorm, 2), 0)?;
        let c = count_parameters(&m);
        println!("K={k:<3} KL-Norm parameters {:>6}  (2K^2 + 2K = {})", c.norm_overhead, 2 * k * k + 2 * k);
    }

    let spec = ModelSpec::new(768, 512, NormKind::KlNorm, 2);
    let c = count_parameters(&Model::build(&spec, 0)?);
    println!("\nwidths {:?}", spec.widths());
    println!("total {}, KL-Norm heads {}", c.total, c.norm_overhead);
    println!("overhead relative to MLP + classifier: {:.2}%", c.overhead_pct);
    println!("overhead including a 109,482,240-parameter frozen encoder: {:.3}%", c.overhead_pct_with_backbone(109_482_240));
    Ok(())
}
