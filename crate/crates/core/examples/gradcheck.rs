//! Builds a small graph by hand and compares reverse-mode gradients with
//! central differences.

use gainfield_kit::autodiff::{Graph, Tensor4};

fn loss(x: &Tensor4<f64>, w: &Tensor4<f64>) -> (f64, Tensor4<f64>) {
    let mut g = Graph::new();
    let xv = g.leaf(x.clone(), true);
    let wv = g.leaf(w.clone(), false);
    let y = g.conv2d(xv, wv, None, 2, 1).unwrap();
    let y = g.leaky_relu(y, 0.1).unwrap();
    let y = g.exp(y).unwrap();
    let l = g.mean(y).unwrap();
    let value = g.value(l).unwrap().data()[0];
    g.backward(l).unwrap();
    (value, g.grad(xv).unwrap().unwrap().clone())
}

fn main() {
    let x = Tensor4::from_fn([1, 2, 6, 6], |[_, c, y, x]| ((c * 36 + y * 6 + x) as f64 * 0.37).sin());
    let w = Tensor4::from_fn([3, 2, 3, 3], |[o, c, y, x]| ((o * 18 + c * 9 + y * 3 + x) as f64 * 0.61).cos() * 0.3);
    let (_, grad) = loss(&x, &w);
    let h = 1e-4;
    let mut worst: f64 = 0.0;
    for i in 0..x.numel() {
        let (mut p, mut m) = (x.clone(), x.clone());
        p.data_mut()[i] += h;
        m.data_mut()[i] -= h;
        let numeric = (loss(&p, &w).0 - loss(&m, &w).0) / (2.0 * h);
        let analytic = grad.data()[i];
        worst = worst.max((numeric - analytic).abs() / numeric.abs().max(analytic.abs()).max(1e-8));
    }
    println!("{} inputs checked, worst relative error {worst:.2e}", x.numel());
}
