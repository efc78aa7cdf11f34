//! Central finite-difference oracle for tape gradients, in f64.

use featloss_core::{Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const STEP: f64 = 1e-3;
pub const REL_TOL: f64 = 1e-4;

/// Builds the graph under test from leaf handles.
pub type Graph<'a> = &'a dyn Fn(&mut Tape<f64>, &[Var]) -> Var;

/// Scalar objective: `0.5 · Σ (graph(inputs) − target)²`, so any output
/// shape reduces to one number with a non-trivial upstream gradient.
fn objective(inputs: &[Tensor<f64>], target: &Tensor<f64>, graph: Graph<'_>, track: bool) -> (Tape<f64>, Vec<Var>, Var) {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), track)).collect();
    let out = graph(&mut tape, &vars);
    let t = tape.constant(target.clone());
    let loss = tape.squared_error(out, t, 0.5).expect("target shaped like output");
    (tape, vars, loss)
}

/// Worst relative error between analytic and central-difference gradients
/// over every element of every input in `check`.
pub fn max_relative_error(inputs: &[Tensor<f64>], check: &[usize], graph: Graph<'_>, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let probe = {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
        let out = graph(&mut tape, &vars);
        tape.value(out).clone()
    };
    let target = Tensor::from_fn(probe.shape(), |_| rng.gen_range(-1.0..1.0));

    let (mut tape, vars, loss) = objective(inputs, &target, graph, true);
    tape.backward(loss).unwrap();

    let mut worst: f64 = 0.0;
    for &i in check {
        let analytic = tape.grad(vars[i]).cloned().unwrap_or_else(|| Tensor::zeros(inputs[i].shape()));
        for j in 0..inputs[i].len() {
            let eval = |delta: f64| {
                let mut moved = inputs.to_vec();
                moved[i].data_mut()[j] += delta;
                let (t, _, l) = objective(&moved, &target, graph, false);
                t.value(l).data()[0]
            };
            let numeric = (eval(STEP) - eval(-STEP)) / (2.0 * STEP);
            let a = analytic.data()[j];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1.0);
            worst = worst.max(err);
        }
    }
    worst
}

/// Uniform values in `[lo, hi)` whose magnitude stays at least `gap` away from
/// zero, so kinks (relu) sit outside the difference stencil.
pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64, gap: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| loop {
        let v: f64 = rng.gen_range(lo..hi);
        if v.abs() >= gap {
            break v;
        }
    })
}

/// Values whose pairwise gaps exceed `4·STEP`, so pooling argmaxes stay put
/// under perturbation.
pub fn distinct_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let mut vals: Vec<f64> = (0..n).map(|i| i as f64 * 0.05).collect();
    for i in (1..n).rev() {
        vals.swap(i, rng.gen_range(0..=i));
    }
    Tensor::new(shape, vals).unwrap()
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// One differentiable primitive under test.
pub struct Case {
    pub name: &'static str,
    pub run: fn(&mut ChaCha8Rng, u64) -> f64,
}

/// Every differentiable primitive with a randomized small-shape instance (at
/// most 64 elements per input).
pub fn cases() -> Vec<Case> {
    vec![
        Case {
            name: "conv2d",
            run: |r, s| {
                let stride = r.gen_range(1..=2);
                let pad = r.gen_range(0..=1);
                let x = random_tensor(r, &[2, 2, 4, 4], -1.0, 1.0, 0.0);
                let k = random_tensor(r, &[3, 2, 3, 3], -1.0, 1.0, 0.0);
                max_relative_error(&[x, k], &[0, 1], &move |t, v| t.conv2d(v[0], v[1], stride, pad).unwrap(), s)
            },
        },
        Case {
            name: "conv_transpose2d",
            run: |r, s| {
                let stride = r.gen_range(1..=3);
                let pad = r.gen_range(0..=1);
                let x = random_tensor(r, &[2, 2, 3, 3], -1.0, 1.0, 0.0);
                let k = random_tensor(r, &[2, 3, 3, 3], -1.0, 1.0, 0.0);
                max_relative_error(&[x, k], &[0, 1], &move |t, v| t.conv_transpose2d(v[0], v[1], stride, pad).unwrap(), s)
            },
        },
        Case {
            name: "channel_bias",
            run: |r, s| {
                let x = random_tensor(r, &[2, 3, 3, 3], -1.0, 1.0, 0.0);
                let b = random_tensor(r, &[3], -1.0, 1.0, 0.0);
                max_relative_error(&[x, b], &[0, 1], &|t, v| t.channel_bias(v[0], v[1]).unwrap(), s)
            },
        },
        Case {
            name: "max_pool2d",
            run: |r, s| {
                let (k, st) = if r.gen_bool(0.5) { (2, 2) } else { (2, 1) };
                let x = distinct_tensor(r, &[2, 2, 4, 4]);
                max_relative_error(&[x], &[0], &move |t, v| t.max_pool2d(v[0], k, st).unwrap(), s)
            },
        },
        Case {
            name: "dense",
            run: |r, s| {
                let x = random_tensor(r, &[3, 5], -1.0, 1.0, 0.0);
                let w = random_tensor(r, &[5, 4], -1.0, 1.0, 0.0);
                let b = random_tensor(r, &[4], -1.0, 1.0, 0.0);
                max_relative_error(&[x, w, b], &[0, 1, 2], &|t, v| t.dense(v[0], v[1], v[2]).unwrap(), s)
            },
        },
        Case {
            name: "relu",
            run: |r, s| {
                let x = random_tensor(r, &[4, 8], -2.0, 2.0, 0.01);
                max_relative_error(&[x], &[0], &|t, v| t.relu(v[0]), s)
            },
        },
        Case {
            name: "atan",
            run: |r, s| {
                let x = random_tensor(r, &[4, 8], -3.0, 3.0, 0.0);
                max_relative_error(&[x], &[0], &|t, v| t.atan(v[0]), s)
            },
        },
        Case {
            name: "sigmoid",
            run: |r, s| {
                let x = random_tensor(r, &[4, 8], -4.0, 4.0, 0.0);
                max_relative_error(&[x], &[0], &|t, v| t.sigmoid(v[0]), s)
            },
        },
        Case {
            name: "resize_bilinear",
            run: |r, s| {
                let (oh, ow) = (r.gen_range(2..=7), r.gen_range(2..=7));
                let x = random_tensor(r, &[1, 2, 4, 4], -1.0, 1.0, 0.0);
                max_relative_error(&[x], &[0], &move |t, v| t.resize_bilinear(v[0], oh, ow).unwrap(), s)
            },
        },
        Case {
            name: "repeat_channels",
            run: |r, s| {
                let x = random_tensor(r, &[2, 1, 3, 3], -1.0, 1.0, 0.0);
                max_relative_error(&[x], &[0], &|t, v| t.repeat_channels(v[0], 3).unwrap(), s)
            },
        },
        Case {
            name: "softmax_cross_entropy",
            run: |r, s| {
                let x = random_tensor(r, &[4, 10], -3.0, 3.0, 0.0);
                let labels: Vec<usize> = (0..4).map(|_| r.gen_range(0..10)).collect();
                max_relative_error(
                    &[x],
                    &[0],
                    &move |t, v| t.softmax_cross_entropy(v[0], &labels).unwrap(),
                    s,
                )
            },
        },
        Case {
            name: "squared_error",
            run: |r, s| {
                let a = random_tensor(r, &[2, 8], -1.0, 1.0, 0.0);
                let b = random_tensor(r, &[2, 8], -1.0, 1.0, 0.0);
                let scale = r.gen_range(0.1..2.0);
                max_relative_error(&[a, b], &[0, 1], &move |t, v| t.squared_error(v[0], v[1], scale).unwrap(), s)
            },
        },
        Case {
            name: "mse",
            run: |r, s| {
                let a = random_tensor(r, &[3, 5], -1.0, 1.0, 0.0);
                let b = random_tensor(r, &[3, 5], -1.0, 1.0, 0.0);
                max_relative_error(&[a, b], &[0, 1], &|t, v| t.mse(v[0], v[1]).unwrap(), s)
            },
        },
        Case {
            name: "add_scale_sum_flatten",
            run: |r, s| {
                let a = random_tensor(r, &[2, 2, 2, 2], -1.0, 1.0, 0.0);
                let b = random_tensor(r, &[2, 2, 2, 2], -1.0, 1.0, 0.0);
                let c = r.gen_range(-2.0..2.0);
                max_relative_error(
                    &[a, b],
                    &[0, 1],
                    &move |t, v| {
                        let s1 = t.add(v[0], v[0]).unwrap();
                        let s2 = t.add(s1, v[1]).unwrap();
                        let sc = t.scale(s2, c);
                        let f = t.flatten(sc).unwrap();
                        t.sum(f)
                    },
                    s,
                )
            },
        },
    ]
}

/// Runs every case `trials` times; returns `(name, worst error)` per case.
pub fn run_all(trials: u64) -> Vec<(&'static str, f64)> {
    cases()
        .into_iter()
        .map(|c| {
            let worst = (0..trials)
                .map(|trial| {
                    let mut r = rng(0x9E37 ^ (trial << 8) ^ c.name.len() as u64);
                    (c.run)(&mut r, trial)
                })
                .fold(0.0, f64::max);
            (c.name, worst)
        })
        .collect()
}
