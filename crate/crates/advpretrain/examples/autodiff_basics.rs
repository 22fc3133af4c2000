//! The reverse-mode tape from first principles: build a tiny computation,
//! run `backward`, and compare every gradient against the closed form.
//!
//! ```text
//! cargo run --example autodiff_basics
//! ```

use advpretrain::autodiff::{Tape, Tensor};
use advpretrain::Result;

fn main() -> Result<()> {
    // f(w, x) = sum(relu(w · x)) for a 2x3 weight and a 3-vector.
    // `with_grad` marks a tensor as gradient-tracked when bound as a leaf.
    let w = Tensor::new(vec![2, 3], vec![0.5, -1.0, 2.0, 1.5, 0.25, -0.75])?.with_grad();
    let x = Tensor::new(vec![3, 1], vec![1.0, 2.0, 3.0])?.with_grad();

    let mut tape = Tape::new();
    let wv = tape.leaf(&w);
    let xv = tape.leaf(&x);
    let prod = tape.matmul(wv, xv)?;
    let act = tape.relu(prod);
    let loss = tape.sum(act);
    tape.backward(loss)?;

    println!("w·x        = {:?}", tape.value(prod));
    println!("relu(w·x)  = {:?}", tape.value(act));
    println!("loss       = {}", tape.scalar(loss)?);

    // Row 0: 0.5 - 2 + 6 = 4.5 > 0 (active); row 1: 1.5 + 0.5 - 2.25 < 0.
    // d loss / d w = [[x^T], [0]] for the active/inactive rows.
    let dw = tape.grad(wv).expect("w is a differentiable leaf");
    let dx = tape.grad(xv).expect("x is a differentiable leaf");
    println!("d loss/d w = {dw:?}");
    println!("d loss/d x = {dx:?}");
    assert_eq!(dw, &[1.0, 2.0, 3.0, 0.0, 0.0, 0.0]);
    // d loss / d x = w^T applied to the active-row mask = row 0 of w.
    assert_eq!(dx, &[0.5, -1.0, 2.0]);

    // The same tape drives convolutions; gradients flow to x, w, and b.
    let img = Tensor::new(vec![1, 4, 4], (0..16).map(|i| i as f64 / 15.0).collect())?.with_grad();
    let kern = Tensor::new(vec![1, 1, 3, 3], vec![0.1; 9])?.with_grad();
    let bias = Tensor::new(vec![1], vec![0.0])?.with_grad();
    let mut tape = Tape::new();
    let (iv, kv, bv) = (tape.leaf(&img), tape.leaf(&kern), tape.leaf(&bias));
    let conv = tape.conv2d(iv, kv, bv, 1)?;
    let pooled = tape.avg_pool2(conv)?;
    let total = tape.sum(pooled);
    tape.backward(total)?;
    println!("conv out shape = {:?}", tape.shape(conv));
    println!("pooled shape   = {:?}", tape.shape(pooled));
    let db = tape.grad(bv).expect("bias gradient");
    // Every one of the 16 conv outputs feeds the mean-pool with weight 1/4.
    assert!((db[0] - 4.0).abs() < 1e-12);
    println!("d total/d b    = {db:?} (16 positions x 1/4 pool weight)");
    println!("all gradients match the closed form");
    Ok(())
}
