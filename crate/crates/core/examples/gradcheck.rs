//! Central finite-difference check of a small attention-like expression.

use pcssl::autograd::{finite_difference_check, Graph, Tensor};

fn main() -> pcssl::Result<()> {
    let x = Tensor::new(vec![4, 3], (0..12).map(|i| ((i * 7 % 5) as f64 - 2.0) * 0.3).collect())?;
    let err = finite_difference_check(
        |g: &mut Graph<f64>, v| {
            let t = g.transpose(v)?;
            let s = g.matmul(v, t)?;
            let a = g.softmax(s)?;
            let y = g.matmul(a, v)?;
            let y = g.gelu(y);
            let p = g.max_pool(y, 0)?;
            Ok(g.sum(p))
        },
        &x,
        1e-4,
    )?;
    println!("max relative error {err:.2e}");
    Ok(())
}
