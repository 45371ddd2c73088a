#![allow(dead_code)]

use gainfield_kit::autodiff::{Graph, Tensor4, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::path::Path;
use std::process::{Command, Output};

pub const FD_STEP: f64 = 1e-4;
pub const FD_TOL: f64 = 1e-4;
/// Gradient norms below this are compared absolutely.
pub const GRAD_FLOOR: f64 = 1e-6;

pub fn random_tensor(rng: &mut impl Rng, shape: [usize; 4], lo: f64, hi: f64) -> Tensor4<f64> {
    Tensor4::from_fn(shape, |_| rng.gen_range(lo..hi))
}

/// Random values kept at least `margin` away from zero, for ops with a kink there.
pub fn away_from_zero(rng: &mut impl Rng, shape: [usize; 4], margin: f64) -> Tensor4<f64> {
    Tensor4::from_fn(shape, |_| {
        let m = rng.gen_range(margin..1.0);
        if rng.gen() {
            m
        } else {
            -m
        }
    })
}

fn scalar_loss(
    inputs: &[Tensor4<f64>],
    build: &dyn Fn(&mut Graph<f64>, &[Var]) -> Var,
    projection: &mut Option<Tensor4<f64>>,
    proj_seed: u64,
    with_grad: bool,
) -> (f64, Vec<Tensor4<f64>>) {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), with_grad)).collect();
    let y = build(&mut g, &vars);
    let shape = g.value(y).unwrap().shape();
    let r = projection
        .get_or_insert_with(|| random_tensor(&mut ChaCha8Rng::seed_from_u64(proj_seed), shape, -1.0, 1.0))
        .clone();
    let r = g.leaf(r, false);
    let prod = g.mul(y, r).unwrap();
    let loss = g.sum(prod).unwrap();
    let value = g.value(loss).unwrap().data()[0];
    if !with_grad {
        return (value, Vec::new());
    }
    g.backward(loss).unwrap();
    let grads = vars
        .iter()
        .map(|v| g.grad(*v).unwrap().expect("leaf gradient").clone())
        .collect();
    (value, grads)
}

/// Largest relative error `|a - n| / max(|a|, |n|, GRAD_FLOOR)` (L2 norms per input)
/// between backward gradients and central differences of `sum(build(x) * r)`
/// for a fixed random projection `r`.
pub fn gradcheck(inputs: &[Tensor4<f64>], seed: u64, build: impl Fn(&mut Graph<f64>, &[Var]) -> Var) -> f64 {
    let mut projection = None;
    let (_, analytic) = scalar_loss(inputs, &build, &mut projection, seed, true);
    let mut worst: f64 = 0.0;
    for (i, grad) in analytic.iter().enumerate() {
        let mut numeric = vec![0.0; inputs[i].numel()];
        for (j, slot) in numeric.iter_mut().enumerate() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += FD_STEP;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= FD_STEP;
            let (fp, _) = scalar_loss(&plus, &build, &mut projection, seed, false);
            let (fm, _) = scalar_loss(&minus, &build, &mut projection, seed, false);
            *slot = (fp - fm) / (2.0 * FD_STEP);
        }
        let norm = |v: &mut dyn Iterator<Item = f64>| v.map(|x| x * x).sum::<f64>().sqrt();
        let diff = norm(&mut grad.data().iter().zip(&numeric).map(|(a, n)| a - n));
        let scale = norm(&mut grad.data().iter().copied()).max(norm(&mut numeric.iter().copied()));
        worst = worst.max(diff / scale.max(GRAD_FLOOR));
    }
    worst
}

/// One random configuration of every differentiable op; returns `(op, error)`.
pub fn check_all_ops(seed: u64) -> Vec<(&'static str, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.gen_range(1..=2);
    let c = rng.gen_range(1..=3);
    let k = rng.gen_range(1..=2);
    let h = k * rng.gen_range(2..=4);
    let w = k * rng.gen_range(2..=4);
    let shape = [n, c, h, w];
    let a = random_tensor(&mut rng, shape, -1.0, 1.0);
    let b = random_tensor(&mut rng, shape, -1.0, 1.0);
    let denom = away_from_zero(&mut rng, shape, 0.5);
    let kinked = away_from_zero(&mut rng, shape, 0.01);
    let factor = rng.gen_range(-2.0..2.0);
    let slope = rng.gen_range(0.01..0.5);

    let oc = rng.gen_range(1..=3);
    let ksz = rng.gen_range(1..=3);
    let stride = rng.gen_range(1..=2);
    let pad = rng.gen_range(0..=1);
    let weight = random_tensor(&mut rng, [oc, c, ksz, ksz], -1.0, 1.0);
    let bias = random_tensor(&mut rng, [1, oc, 1, 1], -1.0, 1.0);
    let conv_in = random_tensor(&mut rng, [n, c, h.max(ksz), w.max(ksz)], -1.0, 1.0);

    let s = seed.wrapping_mul(31);
    vec![
        ("add", gradcheck(&[a.clone(), b.clone()], s, |g, v| g.add(v[0], v[1]).unwrap())),
        ("sub", gradcheck(&[a.clone(), b.clone()], s, |g, v| g.sub(v[0], v[1]).unwrap())),
        ("mul", gradcheck(&[a.clone(), b.clone()], s, |g, v| g.mul(v[0], v[1]).unwrap())),
        ("div", gradcheck(&[a.clone(), denom], s, |g, v| g.div(v[0], v[1]).unwrap())),
        ("scale", gradcheck(&[a.clone()], s, |g, v| g.scale(v[0], factor).unwrap())),
        ("exp", gradcheck(&[a.clone()], s, |g, v| g.exp(v[0]).unwrap())),
        ("relu", gradcheck(&[kinked.clone()], s, |g, v| g.relu(v[0]).unwrap())),
        ("leaky_relu", gradcheck(&[kinked.clone()], s, |g, v| g.leaky_relu(v[0], slope).unwrap())),
        ("abs", gradcheck(&[kinked], s, |g, v| g.abs(v[0]).unwrap())),
        ("avg_pool", gradcheck(&[a.clone()], s, |g, v| g.avg_pool(v[0], k).unwrap())),
        ("sum", gradcheck(&[a.clone()], s, |g, v| g.sum(v[0]).unwrap())),
        ("mean", gradcheck(&[a], s, |g, v| g.mean(v[0]).unwrap())),
        (
            "conv2d",
            gradcheck(&[conv_in, weight, bias], s, |g, v| {
                g.conv2d(v[0], v[1], Some(v[2]), stride, pad).unwrap()
            }),
        ),
    ]
}

pub fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_gainfield-kit"))
}

/// Runs the binary in `dir` with logging silenced.
pub fn run_in(dir: &Path, args: &[&str]) -> Output {
    bin()
        .current_dir(dir)
        .env("GAINFIELD_KIT_LOG", "off")
        .args(args)
        .output()
        .expect("binary runs")
}

pub fn assert_success(out: &Output) {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout:\n{}\nstderr:\n{}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

/// Relative paths and contents of every file below `root`, sorted.
pub fn snapshot(root: &Path) -> Vec<(String, Vec<u8>)> {
    fn walk(root: &Path, dir: &Path, out: &mut Vec<(String, Vec<u8>)>) {
        for entry in std::fs::read_dir(dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                walk(root, &path, out);
            } else {
                let rel = path.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                out.push((rel, std::fs::read(&path).unwrap()));
            }
        }
    }
    let mut out = Vec::new();
    walk(root, root, &mut out);
    out.sort();
    out
}
