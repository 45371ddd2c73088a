mod common;

use common::{check_all_ops, gradcheck, random_tensor, FD_TOL};
use gainfield_kit::autodiff::{Graph, Tensor4, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn every_op_matches_central_differences() {
    for seed in 0..10 {
        for (op, err) in check_all_ops(seed) {
            assert!(err < FD_TOL, "{op} seed {seed}: relative error {err:e}");
        }
    }
}

fn residual_block(g: &mut Graph<f64>, v: &[Var]) -> (Var, Var) {
    let a = g.conv2d(v[0], v[1], Some(v[2]), 2, 1).unwrap();
    let inner = g.leaky_relu(a, 0.1).unwrap();
    let b = g.conv2d(inner, v[3], None, 1, 1).unwrap();
    let skip = g.conv2d(v[0], v[4], None, 2, 0).unwrap();
    (a, g.add(b, skip).unwrap())
}

fn min_abs(t: &Tensor4<f64>) -> f64 {
    t.data().iter().fold(f64::INFINITY, |m, x| m.min(x.abs()))
}

#[test]
fn residual_block_composite_matches_central_differences() {
    // First seed whose leaky-ReLU inputs all sit clear of the kink.
    let inputs = (0..)
        .map(|seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            vec![
                random_tensor(&mut rng, [2, 2, 8, 8], 0.0, 1.0),
                random_tensor(&mut rng, [3, 2, 3, 3], -0.5, 0.5),
                random_tensor(&mut rng, [1, 3, 1, 1], -0.1, 0.1),
                random_tensor(&mut rng, [3, 3, 3, 3], -0.5, 0.5),
                random_tensor(&mut rng, [3, 2, 1, 1], -0.5, 0.5),
            ]
        })
        .find(|ins| {
            let mut g = Graph::new();
            let v: Vec<Var> = ins.iter().map(|t| g.leaf(t.clone(), false)).collect();
            let (a, s) = residual_block(&mut g, &v);
            min_abs(g.value(a).unwrap()) > 1e-3 && min_abs(g.value(s).unwrap()) > 1e-3
        })
        .unwrap();
    let err = gradcheck(&inputs, 9, |g, v| {
        let (_, s) = residual_block(g, v);
        let s = g.leaky_relu(s, 0.1).unwrap();
        let p = g.avg_pool(s, 2).unwrap();
        let e = g.exp(p).unwrap();
        let m = g.mean(e).unwrap();
        let l = g.exp(m).unwrap();
        g.div(l, m).unwrap()
    });
    assert!(err < FD_TOL, "relative error {err:e}");
}

#[test]
fn wrong_gradient_is_detected() {
    // The checker itself must flag a broken derivative: sum(x * x) built as
    // mul(x, stop_gradient(x)) has half the true gradient.
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = random_tensor(&mut rng, [1, 1, 3, 3], 0.5, 1.0);
    let err = gradcheck(&[x], 2, |g: &mut Graph<f64>, v| {
        let frozen = g.value(v[0]).unwrap().clone();
        let c = g.leaf(frozen, false);
        g.mul(v[0], c).unwrap()
    });
    assert!(err > 0.1, "{err}");
}
