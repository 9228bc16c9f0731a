//! A KL-Norm layer on its own: train-mode output, KL term, moving statistics
//! and inference, next to a batch-norm layer on the same input.

use klnorm::norm::{BatchNorm, KlNorm};
use klnorm::rng::{SeedRng, Stream};
use klnorm::tensor::Tensor;

fn main() -> klnorm::error::Result<()> {
    let mut rng = SeedRng::new(1, Stream::Data);
    let x = Tensor::new(vec![6, 4], (0..24).map(|_| 2.0 + 3.0 * rng.normal()).collect())?;

    let mut layer = KlNorm::new(4, 0.1, 1e-5, &mut SeedRng::new(1, Stream::Init))?;
    let (z, kl) = layer.forward_train(&x)?;
    let (mu, sigma) = layer.rescaling(&x)?;
    println!("train output row 0     {:?}", z.row(0));
    println!("predicted mean row 0   {:?}", mu.row(0));
    println!("predicted scale row 0  {:?}", sigma.row(0));
    println!("KL to N(0, I): batch mean {:.5}, per example {:?}", kl.value, kl.per_example.data());
    println!("moving mean after one step {:?}", layer.stats.mean.data());

    // with both heads at zero the layer is batch norm with unit scale and zero shift
    let mut pinned = KlNorm::pinned(4, 0.1, 1e-5)?;
    let (zp, kp) = pinned.forward_train(&x)?;
    let (zb, _) = BatchNorm::new(4, 0.1, 1e-5)?.forward_train(&x)?;
    println!("pinned == batch norm bitwise: {}, KL {}", zp.bit_eq(&zb), kp.value);

    let single = layer.forward_infer(&x.select_rows(&[2]))?;
    let full = layer.forward_infer(&x)?;
    println!("inference row 2 alone vs in batch: max diff {:e}", single.max_abs_diff(&full.select_rows(&[2])));
    Ok(())
}
