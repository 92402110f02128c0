#![allow(dead_code)]

use std::path::{Path, PathBuf};

use capsnet::capsule::{route, Activation, RoutingCapsuleConfig};
use capsnet::gradcheck::{check_gradients, GradCheckReport, FD_STEP};
use capsnet::loss::{decode_masked, sum_squared_error, DenseLayer};
use capsnet::model::{CapsNet, ModelConfig};
use capsnet::tensor::{Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::uniform(shape.to_vec(), -1.0, 1.0, rng)
}

/// Uniform values bounded away from zero, for kinked functions.
pub fn off_zero(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    uniform(shape, rng).map(|x| if x.abs() < 0.05 { x.signum() * 0.05 + x } else { x })
}

fn workspace_data(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data").join(name)
}

pub fn mnist_dir() -> PathBuf {
    std::env::var_os("CAPSNET_MNIST_DIR").map_or_else(|| workspace_data("mnist"), PathBuf::from)
}

pub fn cifar_dir() -> PathBuf {
    std::env::var_os("CAPSNET_CIFAR_DIR").map_or_else(|| workspace_data("cifar10"), PathBuf::from)
}

pub fn naive_matmul(a: &Tensor<f64>, b: &Tensor<f64>) -> Tensor<f64> {
    let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            for p in 0..k {
                out[i * n + j] += a.data()[i * k + p] * b.data()[p * n + j];
            }
        }
    }
    Tensor::from_vec([m, n], out).unwrap()
}

/// Valid cross-correlation of `[B, C, H, W]` with `[F, C, K, K]`.
pub fn naive_conv2d(x: &Tensor<f64>, k: &Tensor<f64>, bias: Option<&Tensor<f64>>, stride: usize) -> Tensor<f64> {
    let &[bsz, c, h, w] = x.shape() else {
        panic!("4-D input")
    };
    let &[f, _, kh, kw] = k.shape() else {
        panic!("4-D kernels")
    };
    let oh = (h - kh) / stride + 1;
    let ow = (w - kw) / stride + 1;
    let mut out = vec![0.0; bsz * f * oh * ow];
    for b in 0..bsz {
        for o in 0..f {
            for y in 0..oh {
                for xx in 0..ow {
                    let mut acc = bias.map_or(0.0, |t| t.data()[o]);
                    for ch in 0..c {
                        for dy in 0..kh {
                            for dx in 0..kw {
                                let iv = x.data()[((b * c + ch) * h + y * stride + dy) * w + xx * stride + dx];
                                let kv = k.data()[((o * c + ch) * kh + dy) * kw + dx];
                                acc += iv * kv;
                            }
                        }
                    }
                    out[((b * f + o) * oh + y) * ow + xx] = acc;
                }
            }
        }
    }
    Tensor::from_vec([bsz, f, oh, ow], out).unwrap()
}

pub fn max_abs_diff(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

/// `Σ f(x) ⊙ r` for a fixed random `r`, so every output coordinate matters.
pub fn project<'t>(tape: &'t Tape<f64>, y: Var<'t, f64>, seed: u64) -> capsnet::tensor::Result<Var<'t, f64>> {
    let r = tape.constant(uniform(&y.shape(), &mut rng(seed ^ 0xA5A5)));
    y.mul(r)?.sum()
}

pub struct OracleResult {
    pub name: String,
    pub report: GradCheckReport,
}

fn check<F>(name: &str, inputs: Vec<Tensor<f64>>, seed: u64, f: F) -> OracleResult
where
    F: for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> capsnet::tensor::Result<Var<'t, f64>>,
{
    let report = check_gradients(&inputs, 10, FD_STEP, seed, f).unwrap_or_else(|e| panic!("{name}: {e}"));
    OracleResult {
        name: name.to_string(),
        report,
    }
}

/// Finite-difference checks of every differentiable operation, 10 points each.
pub fn operation_gradient_checks(seed: u64) -> Vec<OracleResult> {
    let mut g = rng(seed);
    let s = seed;
    let mut out = Vec::new();
    let a = uniform(&[3, 4], &mut g);
    let b = uniform(&[3, 4], &mut g);
    out.push(check("add", vec![a.clone(), b.clone()], s, |t, v| {
        project(t, v[0].add(v[1])?, 1)
    }));
    out.push(check("sub", vec![a.clone(), b.clone()], s, |t, v| {
        project(t, v[0].sub(v[1])?, 2)
    }));
    out.push(check("mul", vec![a.clone(), b.clone()], s, |t, v| {
        project(t, v[0].mul(v[1])?, 3)
    }));
    out.push(check("scale", vec![a.clone()], s, |t, v| {
        project(t, v[0].scale(-1.7)?, 4)
    }));
    out.push(check("relu", vec![off_zero(&[3, 4], &mut g)], s, |t, v| {
        project(t, v[0].relu()?, 5)
    }));
    out.push(check("sigmoid", vec![a.clone()], s, |t, v| {
        project(t, v[0].sigmoid()?, 6)
    }));
    out.push(check("exp", vec![a.clone()], s, |t, v| project(t, v[0].exp()?, 7)));
    out.push(check("sum", vec![a.clone()], s, |_, v| v[0].mul(v[0])?.sum()));
    out.push(check("mean", vec![a.clone()], s, |_, v| v[0].exp()?.mean()));
    out.push(check("l2_norm_last", vec![uniform(&[2, 3, 5], &mut g)], s, |t, v| {
        project(t, v[0].l2_norm_last()?, 8)
    }));
    out.push(check("softmax(axis 0)", vec![uniform(&[4, 3], &mut g)], s, |t, v| {
        project(t, v[0].softmax(0)?, 9)
    }));
    out.push(check(
        "softmax(axis 2)",
        vec![uniform(&[2, 3, 4], &mut g)],
        s,
        |t, v| project(t, v[0].softmax(2)?, 10),
    ));
    out.push(check("reshape", vec![a.clone()], s, |t, v| {
        project(t, v[0].reshape([2, 6])?.exp()?, 11)
    }));
    out.push(check("permute", vec![uniform(&[2, 3, 4], &mut g)], s, |t, v| {
        project(t, v[0].permute(&[2, 0, 1])?.sigmoid()?, 12)
    }));
    out.push(check("concat", vec![a.clone(), uniform(&[3, 2], &mut g)], s, |t, v| {
        project(t, capsnet::tensor::Var::concat(&[v[0], v[1]], 1)?.exp()?, 13)
    }));
    out.push(check(
        "matmul",
        vec![uniform(&[3, 5], &mut g), uniform(&[5, 4], &mut g)],
        s,
        |t, v| project(t, v[0].matmul(v[1])?, 14),
    ));
    out.push(check("add_bias", vec![a.clone(), uniform(&[4], &mut g)], s, |t, v| {
        project(t, v[0].add_bias(v[1])?.sigmoid()?, 15)
    }));
    out.push(check(
        "conv2d",
        vec![
            uniform(&[2, 2, 7, 7], &mut g),
            uniform(&[3, 2, 3, 3], &mut g),
            uniform(&[3], &mut g),
        ],
        s,
        |t, v| project(t, v[0].conv2d(v[1], Some(v[2]), 2)?, 16),
    ));
    for act in [Activation::Squash, Activation::Custom] {
        out.push(check(
            act.name(),
            vec![uniform(&[3, 4, 5], &mut g).map(|x| 2.0 * x)],
            s,
            move |t, v| project(t, act.apply(v[0]).map_err(to_tensor)?, 17),
        ));
    }
    out.push(check(
        "capsule_predictions",
        vec![uniform(&[2, 3, 4], &mut g), uniform(&[3, 2, 5, 4], &mut g)],
        s,
        |t, v| {
            project(
                t,
                capsnet::capsule::capsule_predictions(v[0], v[1]).map_err(to_tensor)?,
                18,
            )
        },
    ));
    out.extend(routing_gradient_check(seed));
    out.push(check(
        "primary_capsules",
        vec![
            uniform(&[2, 3, 9, 9], &mut g),
            uniform(&[8, 3, 3, 3], &mut g).map(|x| 0.3 * x),
            uniform(&[8], &mut g),
        ],
        s,
        |t, v| {
            let cfg = capsnet::capsule::PrimaryCapsuleConfig {
                num_capsule_types: 2,
                capsule_dim: 4,
                kernel: 3,
                stride: 2,
            };
            project(
                t,
                capsnet::capsule::primary_capsules(v[0], &cfg, v[1], Some(v[2])).map_err(to_tensor)?,
                19,
            )
        },
    ));
    // Lengths kept off the margins so no hinge kink lies within a step.
    let lengths = Tensor::<f64>::uniform([4, 5], 0.0, 1.0, &mut g).map(|x| {
        if (x - 0.9).abs() < 0.01 || (x - 0.1).abs() < 0.01 {
            x + 0.02
        } else {
            x
        }
    });
    out.push(check("margin_loss", vec![lengths], s, |_, v| {
        capsnet::loss::margin_loss(v[0], &[0, 3, 4, 1], 5, &Default::default()).map_err(to_tensor)
    }));
    out.push(check(
        "masked_reconstruction",
        vec![
            uniform(&[2, 3, 4], &mut g),
            uniform(&[12, 6], &mut g),
            uniform(&[6], &mut g),
            uniform(&[6, 5], &mut g),
            uniform(&[5], &mut g),
            Tensor::uniform([2, 5], 0.0, 1.0, &mut g),
        ],
        s,
        |_, v| {
            let layers = [
                DenseLayer {
                    weight: v[1],
                    bias: v[2],
                },
                DenseLayer {
                    weight: v[3],
                    bias: v[4],
                },
            ];
            let recon = decode_masked(v[0], &[2, 0], &layers).map_err(to_tensor)?;
            sum_squared_error(recon, v[5]).map_err(to_tensor)
        },
    ));
    out
}

fn to_tensor<E: std::fmt::Display>(e: E) -> capsnet::tensor::TensorError {
    capsnet::tensor::TensorError::Contract(e.to_string())
}

/// Routing composition on a 4-capsule toy instance with the couplings the
/// routing iterations produced held fixed.
pub fn routing_gradient_check(seed: u64) -> Vec<OracleResult> {
    let mut g = rng(seed ^ 0x55);
    let u = uniform(&[2, 4, 3], &mut g);
    let w = uniform(&[4, 3, 5, 3], &mut g).map(|x| 0.5 * x);
    let cfg = RoutingCapsuleConfig {
        num_out_capsules: 3,
        out_dim: 5,
        routing_iterations: 3,
    };
    [Activation::Squash, Activation::Custom]
        .into_iter()
        .map(|act| {
            let (_, state) = route(&u, &cfg, &w, act).unwrap();
            let frozen = state.couplings;
            check(
                &format!("routing ({})", act.name()),
                vec![u.clone(), w.clone()],
                seed,
                move |t, v| {
                    let (out, _) =
                        capsnet::capsule::routed_capsules(v[0], &cfg, v[1], act, Some(&frozen)).map_err(to_tensor)?;
                    project(t, out, 20)
                },
            )
        })
        .collect()
}

/// Checks the total loss of a whole model against central differences,
/// 10 points in every parameter tensor, couplings held at their routed values.
pub fn full_graph_gradient_check(config: ModelConfig, batch: usize, seed: u64) -> Vec<OracleResult> {
    let model = CapsNet::<f64>::build(config.clone()).unwrap();
    let mut g = rng(seed);
    let input = config.input;
    let images = Tensor::uniform([batch, input.channels, input.height, input.width], 0.0, 1.0, &mut g);
    let labels: Vec<usize> = (0..batch).map(|_| g.random_range(0..config.num_classes)).collect();
    let frozen: Vec<Tensor<f64>> = {
        let tape = Tape::new();
        let vars = model.bind(&tape, false);
        let fwd = model.forward(&vars, tape.constant(images.clone()), None).unwrap();
        fwd.routing.into_iter().map(|s| s.couplings).collect()
    };
    let params: Vec<Tensor<f64>> = model.params().iter().map(|(_, t)| t.clone()).collect();
    model
        .params()
        .iter()
        .enumerate()
        .map(|(k, (name, _))| {
            let report = check_gradients(
                std::slice::from_ref(&params[k]),
                10,
                FD_STEP,
                seed + k as u64,
                |tape, v| {
                    let vars: Vec<_> = params
                        .iter()
                        .enumerate()
                        .map(|(i, p)| if i == k { v[0] } else { tape.constant(p.clone()) })
                        .collect();
                    let x = tape.constant(images.clone());
                    let fwd = model.forward(&vars, x, Some(&frozen)).map_err(to_tensor)?;
                    Ok(model.losses(&vars, &fwd, x, &labels).map_err(to_tensor)?.total)
                },
            )
            .unwrap();
            OracleResult {
                name: format!("full graph: {name}"),
                report,
            }
        })
        .collect()
}

pub struct RoutingStats {
    pub instances: usize,
    pub max_row_error: f64,
    pub first_iteration_exact: bool,
    pub max_norm: f64,
    pub min_norm: f64,
}

/// Random routing problems over both activations. Inputs are capsule
/// activities (squashed vectors) and weights use scales from the init
/// value up to 0.5.
pub fn routing_invariants(instances: usize, seed: u64) -> RoutingStats {
    let mut g = rng(seed);
    let mut stats = RoutingStats {
        instances,
        max_row_error: 0.0,
        first_iteration_exact: true,
        max_norm: 0.0,
        min_norm: f64::INFINITY,
    };
    for i in 0..instances {
        let (bsz, nin, nout) = (g.random_range(1..=3), g.random_range(1..=12), g.random_range(1..=12));
        let (din, dout) = (g.random_range(1..=8), g.random_range(1..=16));
        let cfg = RoutingCapsuleConfig {
            num_out_capsules: nout,
            out_dim: dout,
            routing_iterations: g.random_range(1..=5),
        };
        let scale = [0.05, 0.2, 0.5][g.random_range(0..3)];
        let act = if i % 2 == 0 {
            Activation::Squash
        } else {
            Activation::Custom
        };
        let u = Activation::Squash.apply_tensor(&uniform(&[bsz, nin, din], &mut g).map(|x| 3.0 * x));
        let w = Tensor::randn([nin, nout, dout, din], scale, &mut g);
        let (v, state) = route(&u, &cfg, &w, act).unwrap();
        for c in &state.coupling_history {
            for row in c.data().chunks(nout) {
                let sum: f64 = row.iter().sum();
                stats.max_row_error = stats.max_row_error.max((sum - 1.0).abs());
            }
        }
        let uniform_value = 1.0 / nout as f64;
        if state.coupling_history[0].data().iter().any(|&c| c != uniform_value) {
            stats.first_iteration_exact = false;
        }
        for vec in v.data().chunks(dout) {
            let n = vec.iter().map(|x| x * x).sum::<f64>().sqrt();
            stats.max_norm = stats.max_norm.max(n);
            stats.min_norm = stats.min_norm.min(n);
        }
    }
    stats
}

/// Largest `|matmul − oracle|` and `|conv2d − oracle|` over random small cases.
pub fn oracle_equivalence(cases: usize, seed: u64) -> (f64, f64) {
    let mut g = rng(seed);
    let (mut mm, mut cv) = (0.0f64, 0.0f64);
    for _ in 0..cases {
        let (m, k, n) = (g.random_range(1..=16), g.random_range(1..=16), g.random_range(1..=16));
        let a = uniform(&[m, k], &mut g);
        let b = uniform(&[k, n], &mut g);
        let tape = Tape::new();
        let got = tape
            .constant(a.clone())
            .matmul(tape.constant(b.clone()))
            .unwrap()
            .value();
        mm = mm.max(max_abs_diff(&got, &naive_matmul(&a, &b)));

        let kk = g.random_range(1..=5);
        let (h, w) = (g.random_range(kk..=16), g.random_range(kk..=16));
        let (bsz, c, f, stride) = (
            g.random_range(1..=3),
            g.random_range(1..=4),
            g.random_range(1..=6),
            g.random_range(1..=3),
        );
        let x = uniform(&[bsz, c, h, w], &mut g);
        let kern = uniform(&[f, c, kk, kk], &mut g);
        let bias = uniform(&[f], &mut g);
        let tape = Tape::new();
        let got = tape
            .constant(x.clone())
            .conv2d(tape.constant(kern.clone()), Some(tape.constant(bias.clone())), stride)
            .unwrap()
            .value();
        cv = cv.max(max_abs_diff(&got, &naive_conv2d(&x, &kern, Some(&bias), stride)));
    }
    (mm, cv)
}

/// Largest magnitude of the reconstruction-loss gradient reaching any
/// non-target capsule entry.
pub fn masking_violation(instances: usize, seed: u64) -> f64 {
    let mut g = rng(seed);
    let mut worst = 0.0f64;
    for _ in 0..instances {
        let (bsz, m, d, hidden, out) = (
            g.random_range(1..=4),
            g.random_range(2..=11),
            g.random_range(1..=16),
            g.random_range(1..=32),
            g.random_range(1..=64),
        );
        let targets: Vec<usize> = (0..bsz).map(|_| g.random_range(0..m)).collect();
        let tape = Tape::new();
        let caps = tape.leaf(uniform(&[bsz, m, d], &mut g));
        let layers = [
            DenseLayer {
                weight: tape.leaf(uniform(&[m * d, hidden], &mut g)),
                bias: tape.leaf(uniform(&[hidden], &mut g)),
            },
            DenseLayer {
                weight: tape.leaf(uniform(&[hidden, out], &mut g)),
                bias: tape.leaf(uniform(&[out], &mut g)),
            },
        ];
        let target = tape.constant(Tensor::uniform([bsz, out], 0.0, 1.0, &mut g));
        let recon = decode_masked(caps, &targets, &layers).unwrap();
        let loss = sum_squared_error(recon, target).unwrap();
        let grad = tape.backward(loss).unwrap().wrt(caps);
        for (b, &t) in targets.iter().enumerate() {
            for j in (0..m).filter(|&j| j != t) {
                let at = (b * m + j) * d;
                for &x in &grad.data()[at..at + d] {
                    worst = worst.max(x.abs());
                }
            }
        }
    }
    worst
}

/// Writes MNIST-format IDX files with `n` train and `n` val images whose
/// brightness pattern depends on the label.
pub fn write_synthetic_mnist(dir: &Path, n: usize, seed: u64) {
    let mut g = rng(seed);
    for (prefix, count) in [("train", n), ("t10k", n)] {
        let mut images = vec![0, 0, 8, 3];
        for d in [count as u32, 28, 28] {
            images.extend_from_slice(&d.to_be_bytes());
        }
        let mut labels = vec![0, 0, 8, 1];
        labels.extend_from_slice(&(count as u32).to_be_bytes());
        for i in 0..count {
            let label = (i % 10) as u8;
            labels.push(label);
            for y in 0..28 {
                for x in 0..28 {
                    let on = (y / 3) == label as usize || (x / 3) == label as usize;
                    let noise: u8 = g.random_range(0..40);
                    images.push(if on { 215 + noise } else { noise });
                }
            }
        }
        std::fs::write(dir.join(format!("{prefix}-images-idx3-ubyte")), images).unwrap();
        std::fs::write(dir.join(format!("{prefix}-labels-idx1-ubyte")), labels).unwrap();
    }
}
