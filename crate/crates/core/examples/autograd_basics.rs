//! Record a few operations on a tape and read back gradients.

use klnorm::autograd::{reduce_stats, Tape};
use klnorm::tensor::Tensor;

fn main() -> klnorm::error::Result<()> {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::from_rows(&[[1.0, 2.0], [3.0, 5.0], [0.5, -1.0]])?);
    let w = tape.leaf(Tensor::from_rows(&[[0.3], [-0.2]])?);

    // loss = mean(relu(x·w)²) + sum(var(x))
    let y = tape.matmul(x, w)?;
    let y = tape.relu(y)?;
    let y2 = tape.square(y)?;
    let fit = tape.mean(y2)?;
    let (_, var) = reduce_stats(&mut tape, x)?;
    let spread = tape.sum(var)?;
    let loss = tape.add(fit, spread)?;
    tape.backward(loss)?;

    println!("loss   = {}", tape.value(loss).data()[0]);
    println!("dL/dw  = {:?}", tape.grad(w).map(Tensor::data));
    println!("dL/dx  = {:?}", tape.grad(x).map(Tensor::data));

    // operations validate their inputs instead of producing NaN
    let neg = tape.constant(Tensor::vector(vec![-1.0]));
    println!("log(-1) -> {}", tape.log(neg).unwrap_err());
    Ok(())
}
