//! Reverse-mode gradients on a tiny expression, checked by central differences.

use ctas::tensor::{Graph, Tensor};

fn f(x: &[f64]) -> (f64, Vec<f64>) {
    let mut g = Graph::new();
    let v = g.param("x", &Tensor::new(&[1, 3], x.to_vec()).unwrap());
    let sq = g.square(v);
    let sp = g.softplus(v);
    let prod = g.mul(sq, sp).unwrap();
    let lse = g.log_softmax(prod).unwrap();
    let out = g.sum(lse);
    g.backward(out).unwrap();
    (g.item(out), g.grad(v).unwrap().to_vec())
}

fn main() {
    let x = [0.3, -1.2, 0.8];
    let (value, grad) = f(&x);
    println!("f(x) = {value:.6}");
    let h = 1e-6;
    for i in 0..x.len() {
        let (mut up, mut dn) = (x, x);
        up[i] += h;
        dn[i] -= h;
        let fd = (f(&up).0 - f(&dn).0) / (2.0 * h);
        println!("d/dx{i}: tape {:+.8}  finite difference {:+.8}", grad[i], fd);
    }
}
