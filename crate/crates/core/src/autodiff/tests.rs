use super::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_tensor<T: Real>(rng: &mut ChaCha8Rng, shape: [usize; 4]) -> Tensor4<T> {
    Tensor4::from_fn(shape, |_| T::from_f64(rng.gen_range(-1.0..1.0)))
}

/// Direct six-loop cross-correlation, independent of the im2col path.
fn naive_conv(
    x: &Tensor4<f64>,
    w: &Tensor4<f64>,
    b: &[f64],
    stride: usize,
    pad: usize,
) -> Tensor4<f64> {
    let [n, c, h, wd] = x.shape();
    let [oc, _, kh, kw] = w.shape();
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (wd + 2 * pad - kw) / stride + 1;
    Tensor4::from_fn([n, oc, oh, ow], |[bn, o, oy, ox]| {
        let mut acc = b[o];
        for ic in 0..c {
            for ky in 0..kh {
                for kx in 0..kw {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    let ix = (ox * stride + kx) as isize - pad as isize;
                    if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                        acc += x.at([bn, ic, iy as usize, ix as usize]) * w.at([o, ic, ky, kx]);
                    }
                }
            }
        }
        acc
    })
}

#[test]
fn conv_of_ones_sums_the_window() {
    let mut g = Graph::<f32>::new();
    let x = g.leaf(Tensor4::full([1, 1, 3, 3], 1.0), false);
    let w = g.leaf(Tensor4::full([1, 1, 3, 3], 1.0), false);
    let y = g.conv2d(x, w, None, 1, 0).unwrap();
    let out = g.value(y).unwrap();
    assert_eq!(out.shape(), [1, 1, 1, 1]);
    assert_eq!(out.data()[0], 9.0);
}

#[test]
fn identity_kernel_reproduces_input() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let input = random_tensor::<f32>(&mut rng, [2, 1, 5, 7]);
    let mut kernel = Tensor4::zeros([1, 1, 3, 3]);
    kernel.data_mut()[4] = 1.0;
    let mut g = Graph::new();
    let x = g.leaf(input.clone(), false);
    let w = g.leaf(kernel, false);
    let y = g.conv2d(x, w, None, 1, 1).unwrap();
    assert_eq!(g.value(y).unwrap(), &input);
}

#[test]
fn strided_conv_matches_loop_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let x = random_tensor::<f64>(&mut rng, [2, 3, 8, 8]);
    let w = random_tensor::<f64>(&mut rng, [4, 3, 3, 3]);
    let b: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let expected = naive_conv(&x, &w, &b, 2, 1);

    let mut g = Graph::<f32>::new();
    let xv = g.leaf(x.cast(), false);
    let wv = g.leaf(w.cast(), false);
    let bv = g.leaf(Tensor4::new([1, 4, 1, 1], b.iter().map(|&v| v as f32).collect()).unwrap(), false);
    let y = g.conv2d(xv, wv, Some(bv), 2, 1).unwrap();
    let out = g.value(y).unwrap();
    assert_eq!(out.shape(), [2, 4, 4, 4]);
    for (a, e) in out.data().iter().zip(expected.data()) {
        assert!((*a as f64 - e).abs() < 1e-6, "{a} vs {e}");
    }
}

#[test]
fn conv_matches_oracle_on_random_shapes() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..20 {
        let n = rng.gen_range(1..=4);
        let c = rng.gen_range(1..=8);
        let oc = rng.gen_range(1..=8);
        let h = rng.gen_range(3..=16);
        let w = rng.gen_range(3..=16);
        let k = *[1usize, 3].get(rng.gen_range(0..2)).unwrap();
        let stride = rng.gen_range(1..=2);
        let pad = rng.gen_range(0..=1);
        let x = random_tensor::<f64>(&mut rng, [n, c, h, w]);
        let wt = random_tensor::<f64>(&mut rng, [oc, c, k, k]);
        let b = vec![0.0; oc];
        let expected = naive_conv(&x, &wt, &b, stride, pad);
        let mut g = Graph::<f32>::new();
        let xv = g.leaf(x.cast(), false);
        let wv = g.leaf(wt.cast(), false);
        let y = g.conv2d(xv, wv, None, stride, pad).unwrap();
        let out = g.value(y).unwrap();
        assert_eq!(out.shape(), expected.shape());
        for (a, e) in out.data().iter().zip(expected.data()) {
            assert!((*a as f64 - e).abs() < 1e-5 * (1.0 + e.abs()));
        }
    }
}

#[test]
fn conv_rejects_channel_mismatch() {
    let mut g = Graph::<f32>::new();
    let x = g.leaf(Tensor4::zeros([1, 2, 4, 4]), false);
    let w = g.leaf(Tensor4::zeros([1, 3, 3, 3]), false);
    let err = g.conv2d(x, w, None, 1, 1).unwrap_err();
    assert!(err.to_string().contains("input channels"), "{err}");
}

#[test]
fn sum_gradient_is_ones() {
    let mut g = Graph::<f64>::new();
    let x = g.leaf(Tensor4::from_fn([2, 3, 4, 5], |[a, b, c, d]| (a + b * c + d) as f64), true);
    let s = g.sum(x).unwrap();
    g.backward(s).unwrap();
    assert!(g.grad(x).unwrap().unwrap().data().iter().all(|&v| v == 1.0));
}

#[test]
fn square_gradient_is_twice_x() {
    let mut g = Graph::<f64>::new();
    let x = g.leaf(Tensor4::new([1, 1, 1, 2], vec![2.0, -3.0]).unwrap(), true);
    let sq = g.mul(x, x).unwrap();
    let s = g.sum(sq).unwrap();
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap().unwrap().data(), &[4.0, -6.0]);
}

#[test]
fn backward_rejects_foreign_and_non_scalar_vars() {
    let mut a = Graph::<f64>::new();
    let mut b = Graph::<f64>::new();
    let x = a.leaf(Tensor4::scalar(1.0), true);
    assert!(matches!(b.backward(x), Err(crate::Error::NotInGraph)));
    let y = a.leaf(Tensor4::zeros([1, 1, 2, 2]), true);
    assert!(matches!(a.backward(y), Err(crate::Error::NotScalar(4))));
}

#[test]
fn unreached_leaves_get_zero_grads() {
    let mut g = Graph::<f64>::new();
    let x = g.leaf(Tensor4::scalar(1.0), true);
    let unused = g.leaf(Tensor4::zeros([1, 1, 2, 2]), true);
    let s = g.sum(x).unwrap();
    g.backward(s).unwrap();
    assert_eq!(g.grad(unused).unwrap().unwrap().data(), &[0.0; 4]);
}

#[test]
fn guarded_division_and_clamped_exp_stay_finite() {
    let mut g = Graph::<f32>::new();
    let a = g.leaf(Tensor4::new([1, 1, 1, 3], vec![1.0, 0.0, 100.0]).unwrap(), true);
    let z = g.leaf(Tensor4::zeros([1, 1, 1, 3]), true);
    let q = g.div(a, z).unwrap();
    let e = g.exp(a).unwrap();
    assert!(g.value(q).unwrap().is_finite());
    assert_eq!(g.value(e).unwrap().data()[2], 20f32.exp());
    let s1 = g.sum(q).unwrap();
    let s2 = g.sum(e).unwrap();
    let s = g.add(s1, s2).unwrap();
    g.backward(s).unwrap();
    assert!(g.grad(a).unwrap().unwrap().is_finite());
    assert!(g.grad(z).unwrap().unwrap().is_finite());
}

#[test]
fn ops_do_not_mutate_inputs() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x0 = random_tensor::<f64>(&mut rng, [2, 2, 4, 4]);
    let w0 = random_tensor::<f64>(&mut rng, [3, 2, 3, 3]);
    let mut g = Graph::new();
    let x = g.leaf(x0.clone(), true);
    let w = g.leaf(w0.clone(), true);
    let y = g.conv2d(x, w, None, 2, 1).unwrap();
    let y = g.leaky_relu(y, 0.1).unwrap();
    let y = g.exp(y).unwrap();
    let s = g.mean(y).unwrap();
    g.backward(s).unwrap();
    assert_eq!(g.value(x).unwrap(), &x0);
    assert_eq!(g.value(w).unwrap(), &w0);
}

#[test]
fn backward_is_bit_deterministic() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut g = Graph::<f32>::new();
        let x = g.leaf(random_tensor(&mut rng, [4, 3, 16, 16]), false);
        let w1 = g.leaf(random_tensor(&mut rng, [8, 3, 3, 3]), true);
        let w2 = g.leaf(random_tensor(&mut rng, [4, 8, 3, 3]), true);
        let h = g.conv2d(x, w1, None, 2, 1).unwrap();
        let h = g.leaky_relu(h, 0.1).unwrap();
        let h = g.conv2d(h, w2, None, 1, 1).unwrap();
        let s = g.mean(h).unwrap();
        g.backward(s).unwrap();
        (
            g.grad(w1).unwrap().unwrap().clone(),
            g.grad(w2).unwrap().unwrap().clone(),
        )
    };
    let (a1, a2) = run();
    let (b1, b2) = run();
    let bits = |t: &Tensor4<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&a1), bits(&b1));
    assert_eq!(bits(&a2), bits(&b2));
}

#[test]
fn avg_pool_averages_blocks() {
    let mut g = Graph::<f64>::new();
    let x = g.leaf(
        Tensor4::new([1, 1, 2, 4], vec![1.0, 3.0, 5.0, 7.0, 1.0, 3.0, 5.0, 7.0]).unwrap(),
        true,
    );
    let p = g.avg_pool(x, 2).unwrap();
    assert_eq!(g.value(p).unwrap().data(), &[2.0, 6.0]);
    let s = g.sum(p).unwrap();
    g.backward(s).unwrap();
    assert!(g.grad(x).unwrap().unwrap().data().iter().all(|&v| v == 0.25));
}

#[test]
fn large_planes_match_oracle_and_ignore_thread_count() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let x = random_tensor::<f64>(&mut rng, [2, 3, 70, 70]);
    let w = random_tensor::<f64>(&mut rng, [5, 3, 3, 3]);
    let b: Vec<f64> = (0..5).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let expected = naive_conv(&x, &w, &b, 1, 1);
    let run = |threads: usize| {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        pool.install(|| {
            let mut g = Graph::<f32>::new();
            let xv = g.leaf(x.cast(), false);
            let wv = g.leaf(w.cast(), false);
            let bv = g.leaf(Tensor4::new([1, 5, 1, 1], b.iter().map(|&v| v as f32).collect()).unwrap(), false);
            let y = g.conv2d(xv, wv, Some(bv), 1, 1).unwrap();
            g.value(y).unwrap().clone()
        })
    };
    let one = run(1);
    for (a, e) in one.data().iter().zip(expected.data()) {
        assert!((*a as f64 - e).abs() < 1e-5 * (1.0 + e.abs()));
    }
    assert_eq!(one, run(3));
}
