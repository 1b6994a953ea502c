//! Central finite-difference checks for every primitive on the tape.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use uid_autodiff::{Graph, Segment, Tensor, Var};

const STEP: f64 = 1e-5;

type Build = dyn Fn(&mut Graph, &[Var]) -> Var;

fn loss_at(build: &Build, inputs: &[Tensor]) -> f64 {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs
        .iter()
        .enumerate()
        .map(|(i, t)| g.param(&format!("in{i}"), t))
        .collect();
    let out = build(&mut g, &vars);
    g.value(out).data()[0]
}

/// Largest relative error over all coordinates of all inputs, with the
/// denominator floored so near-zero gradients are compared absolutely.
fn max_rel_error(build: &Build, inputs: &[Tensor]) -> f64 {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs
        .iter()
        .enumerate()
        .map(|(i, t)| g.param(&format!("in{i}"), t))
        .collect();
    let out = build(&mut g, &vars);
    let grads = g.backward(out).unwrap();
    let mut worst: f64 = 0.0;
    for (i, t) in inputs.iter().enumerate() {
        let analytic = grads.get(&format!("in{i}")).unwrap();
        for c in 0..t.len() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[c] += STEP;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[c] -= STEP;
            let numeric = (loss_at(build, &plus) - loss_at(build, &minus)) / (2.0 * STEP);
            let a = analytic.data()[c];
            let rel = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-3);
            worst = worst.max(rel);
        }
    }
    worst
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-scale..scale)).collect()).unwrap()
}

/// Contracts any matrix to a scalar through fixed random weights so every
/// output coordinate influences the loss differently.
fn project(g: &mut Graph, x: Var, seed: u64) -> Var {
    let t = g.value(x).clone();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = rand_tensor(&mut rng, &[t.rows(), t.cols()], 1.0);
    let w = g.constant(w);
    let p = g.mul(x, w).unwrap();
    g.sum(p)
}

fn run_trials(name: &str, trials: usize, make: impl Fn(&mut ChaCha8Rng) -> (Box<Build>, Vec<Tensor>)) {
    let mut rng = ChaCha8Rng::seed_from_u64(0xC0FFEE ^ name.len() as u64);
    for t in 0..trials {
        let (build, inputs) = make(&mut rng);
        let err = max_rel_error(build.as_ref(), &inputs);
        assert!(err < 1e-6, "{name} trial {t}: rel err {err:e}");
    }
}

#[test]
fn matmul_and_bias() {
    run_trials("matmul", 10, |rng| {
        let (m, k, n) = (rng.random_range(1..5), rng.random_range(1..5), rng.random_range(1..5));
        let inputs = vec![
            rand_tensor(rng, &[m, k], 1.0),
            rand_tensor(rng, &[k, n], 1.0),
            rand_tensor(rng, &[n], 1.0),
        ];
        let build: Box<Build> = Box::new(|g, v| {
            let y = g.matmul(v[0], v[1]).unwrap();
            let y = g.add_row_bias(y, v[2]).unwrap();
            project(g, y, 1)
        });
        (build, inputs)
    });
}

#[test]
fn elementwise_ops() {
    run_trials("elementwise", 10, |rng| {
        let (m, n) = (rng.random_range(1..4), rng.random_range(1..5));
        let inputs = vec![rand_tensor(rng, &[m, n], 2.0), rand_tensor(rng, &[m, n], 2.0)];
        let build: Box<Build> = Box::new(|g, v| {
            let a = g.mul(v[0], v[1]).unwrap();
            let b = g.gelu(a);
            let c = g.scale(b, -0.7);
            let d = g.add(c, v[0]).unwrap();
            project(g, d, 2)
        });
        (build, inputs)
    });
}

#[test]
fn relu_away_from_kink() {
    run_trials("relu", 10, |rng| {
        let n = rng.random_range(1..6);
        // Keep every coordinate at least 0.1 from the kink.
        let data = (0..n)
            .map(|_| {
                let v: f64 = rng.random_range(0.1..2.0);
                if rng.random_bool(0.5) {
                    v
                } else {
                    -v
                }
            })
            .collect();
        let inputs = vec![Tensor::new(vec![1, n], data).unwrap()];
        let build: Box<Build> = Box::new(|g, v| {
            let r = g.relu(v[0]);
            project(g, r, 3)
        });
        (build, inputs)
    });
}

#[test]
fn softmax_and_layer_norm() {
    run_trials("softmax_ln", 10, |rng| {
        let (m, n) = (rng.random_range(1..4), rng.random_range(2..6));
        let inputs = vec![
            rand_tensor(rng, &[m, n], 2.0),
            rand_tensor(rng, &[n], 1.5),
            rand_tensor(rng, &[n], 1.0),
        ];
        let build: Box<Build> = Box::new(|g, v| {
            let s = g.softmax_rows(v[0]);
            let l = g.layer_norm(v[0], v[1], v[2]).unwrap();
            let both = g.add(s, l).unwrap();
            project(g, both, 4)
        });
        (build, inputs)
    });
}

#[test]
fn gather_concat_mean() {
    run_trials("gather", 10, |rng| {
        let d = rng.random_range(1..4);
        let inputs = vec![rand_tensor(rng, &[4, d], 1.0), rand_tensor(rng, &[2, 2, d], 1.0)];
        let picks: Vec<(usize, usize)> = (0..5)
            .map(|_| {
                let src = rng.random_range(0..2);
                (src, rng.random_range(0..4))
            })
            .collect();
        let build: Box<Build> = Box::new(move |g, v| {
            let x = g.gather(&[v[0], v[1]], &picks).unwrap();
            let m = g.mean_rows(x).unwrap();
            let c = g.concat_rows(&[x, m]).unwrap();
            project(g, c, 5)
        });
        (build, inputs)
    });
}

#[test]
fn cross_entropy() {
    run_trials("ce", 10, |rng| {
        let (b, c) = (rng.random_range(1..5), rng.random_range(2..6));
        let targets: Vec<usize> = (0..b).map(|_| rng.random_range(0..c)).collect();
        let inputs = vec![rand_tensor(rng, &[b, c], 3.0)];
        let build: Box<Build> = Box::new(move |g, v| g.cross_entropy(v[0], &targets).unwrap());
        (build, inputs)
    });
}

#[test]
fn segment_attention() {
    run_trials("attention", 10, |rng| {
        let heads = rng.random_range(1..3);
        let d = heads * rng.random_range(1..3);
        let l1 = rng.random_range(1..4);
        let l2 = rng.random_range(1..4);
        let rows = l1 + l2;
        let inputs = vec![
            rand_tensor(rng, &[rows, d], 1.0),
            rand_tensor(rng, &[rows, d], 1.0),
            rand_tensor(rng, &[rows, d], 1.0),
        ];
        let segs = vec![Segment { start: 0, len: l1 }, Segment { start: l1, len: l2 }];
        let build: Box<Build> = Box::new(move |g, v| {
            let a = g.segment_attention(v[0], v[1], v[2], &segs, heads).unwrap();
            project(g, a, 6)
        });
        (build, inputs)
    });
}
