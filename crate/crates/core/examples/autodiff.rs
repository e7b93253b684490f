//! Records a small convolution graph on a tape, runs the backward pass and
//! compares one weight gradient with a central difference.
//!
//! cargo run --release --example autodiff

use nailtrace::tensor::{ConvSpec, Tape, Tensor};

fn loss(x: &Tensor<f64>, w: &Tensor<f64>, spec: ConvSpec) -> (f64, Vec<f64>) {
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone(), false);
    let wv = tape.leaf(w.clone(), true);
    let y = tape.conv2d(xv, wv, None, spec).unwrap();
    let y = tape.relu6(y);
    let n = tape.value(y).numel();
    let l = tape.weighted_sum(y, (0..n).map(|i| (i % 7) as f64 * 0.1).collect()).unwrap();
    let grads = tape.backward(l).unwrap();
    (tape.value(l).item(), grads.get(wv).unwrap().to_vec())
}

fn main() {
    let spec = ConvSpec::new(2, 3, 3).dilation(2);
    let x = Tensor::new(vec![1, 2, 8, 8], (0..128).map(|i| (i as f64 * 0.731).sin() * 2.0).collect()).unwrap();
    let w = Tensor::new(spec.weight_shape().to_vec(), (0..54).map(|i| (i as f64 * 1.37).cos() * 0.4).collect()).unwrap();

    let (value, grad) = loss(&x, &w, spec);
    println!("loss {value:.6}");
    let h = 1e-5;
    for i in [0, 17, 53] {
        let mut plus = w.clone();
        plus.data_mut()[i] += h;
        let mut minus = w.clone();
        minus.data_mut()[i] -= h;
        let numeric = (loss(&x, &plus, spec).0 - loss(&x, &minus, spec).0) / (2.0 * h);
        println!("dL/dw[{i:>2}] analytic {:+.6} numeric {numeric:+.6}", grad[i]);
    }
}
