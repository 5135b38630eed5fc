//! Reverse-mode gradients against central differences.

use dapconv::tensor::{Tape, Tensor};

fn loss(w: &[f64]) -> dapconv::Result<(f64, Vec<f64>)> {
    let tape = Tape::new();
    let x = Tensor::from_rows(&[
        vec![0.3, -1.2, 0.7],
        vec![1.1, 0.4, -0.5],
        vec![-0.8, 0.9, 0.2],
        vec![0.6, -0.1, 1.4],
    ])?;
    let w = tape.param(Tensor::from_vec(vec![3, 2], w.to_vec())?);
    let h = tape.leaky_relu(&tape.matmul(&x, &w)?, 0.2)?;
    let pooled = tape.gather_max(&h, &[0, 1, 1, 2, 2, 3, 3, 0], 2)?;
    let l = tape.cross_entropy(&pooled, &[0, 1, 1, 0])?;
    let grads = tape.backward(&l)?;
    Ok((l.item(), grads.get(&w).unwrap().to_vec()))
}

fn main() -> dapconv::Result<()> {
    let w = vec![0.5, -0.3, 0.8, 0.1, -0.6, 0.4];
    let (_, analytic) = loss(&w)?;
    let h = 1e-5;
    for i in 0..w.len() {
        let (mut up, mut down) = (w.clone(), w.clone());
        up[i] += h;
        down[i] -= h;
        let numeric = (loss(&up)?.0 - loss(&down)?.0) / (2.0 * h);
        let rel = (analytic[i] - numeric).abs() / analytic[i].abs().max(numeric.abs()).max(1e-12);
        println!(
            "w[{i}]  analytic {:+.8}  numeric {numeric:+.8}  rel {rel:.1e}",
            analytic[i]
        );
    }
    Ok(())
}
