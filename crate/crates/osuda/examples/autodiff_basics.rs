//! The tape in five minutes: build a graph, read values, pull gradients,
//! and cross-check one of them against finite differences.
//!
//!     cargo run --example autodiff_basics

use osuda::gradcheck::{central_diff, FD_STEP};
use osuda::tensor::{Tape, Tensor};

fn main() {
    // y = sum(relu(w * x + b)) over a 4-vector
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::vector(vec![1.0, -2.0, 3.0, 0.5]));
    let w = tape.param(Tensor::vector(vec![0.5, 0.25, -1.0, 2.0]));
    let b = tape.param(Tensor::vector(vec![0.1, 0.1, 0.1, 0.1]));

    let wx = tape.mul(w, x).unwrap();
    let z = tape.add(wx, b).unwrap();
    let a = tape.relu(z);
    let y = tape.sum_all(a);

    println!("forward: y = {}", tape.data(y)[0]);

    tape.backward(y).unwrap();
    println!("dy/dw = {:?}", tape.grad(w).unwrap());
    println!("dy/db = {:?}", tape.grad(b).unwrap());
    // the relu gate: entries whose pre-activation is negative get 0

    // same gradient, numerically: dy/dw via central differences
    let mut w_data = vec![0.5, 0.25, -1.0, 2.0];
    let mut f = |wv: &[f64]| {
        let mut t = Tape::new();
        let x = t.constant(Tensor::vector(vec![1.0, -2.0, 3.0, 0.5]));
        let w = t.param(Tensor::vector(wv.to_vec()));
        let b = t.param(Tensor::vector(vec![0.1; 4]));
        let wx = t.mul(w, x).unwrap();
        let z = t.add(wx, b).unwrap();
        let a = t.relu(z);
        let y = t.sum_all(a);
        t.data(y)[0]
    };
    let fd = central_diff(&mut f, &mut w_data, FD_STEP);
    println!("dy/dw (finite differences) = {fd:?}");

    // a second backward on the same tape is refused
    println!("second backward: {:?}", tape.backward(y).unwrap_err());

    // the same machinery scales to convolutions — the segmentor is built
    // from exactly these pieces plus conv2d and softmax_channels
    let mut tape = Tape::new();
    let img = tape.constant(Tensor::new(vec![1, 4, 4], (0..16).map(f64::from).collect()).unwrap());
    let k = tape.param(Tensor::new(vec![2, 1, 3, 3], vec![0.1; 18]).unwrap());
    let bias = tape.param(Tensor::new(vec![2], vec![0.0, 1.0]).unwrap());
    let out = tape.conv2d(img, k, bias, 1, 1).unwrap();
    println!("conv output shape {:?}", tape.shape(out));
    let loss = tape.mean_all(out).unwrap();
    tape.backward(loss).unwrap();
    println!(
        "d mean / d bias = {:?} (each output position contributes 1/numel)",
        tape.grad(bias).unwrap()
    );
}
