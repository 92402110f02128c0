mod common;

use capsnet::tensor::{Tape, Tensor};
use common::{max_abs_diff, naive_conv2d, naive_matmul, oracle_equivalence, rng, uniform};

#[test]
fn conv_2x8x8_four_kernels_stride_2() {
    let mut g = rng(42);
    let x = uniform(&[1, 2, 8, 8], &mut g);
    let k = uniform(&[4, 2, 3, 3], &mut g);
    let tape = Tape::new();
    let got = tape
        .constant(x.clone())
        .conv2d(tape.constant(k.clone()), None, 2)
        .unwrap()
        .value();
    assert_eq!(got.shape(), &[1, 4, 3, 3]);
    assert!(max_abs_diff(&got, &naive_conv2d(&x, &k, None, 2)) < 1e-6);
}

#[test]
fn unbatched_conv_matches_batched() {
    let mut g = rng(7);
    let x = uniform(&[3, 10, 9], &mut g);
    let k = uniform(&[5, 3, 4, 4], &mut g);
    let tape = Tape::new();
    let got = tape
        .constant(x.clone())
        .conv2d(tape.constant(k.clone()), None, 1)
        .unwrap()
        .value();
    let want = naive_conv2d(&x.reshape([1, 3, 10, 9]).unwrap(), &k, None, 1);
    assert_eq!(got.shape(), &[5, 7, 6]);
    assert!(max_abs_diff(&got.reshape([1, 5, 7, 6]).unwrap(), &want) < 1e-6);
}

#[test]
fn random_small_cases_match_naive_loops() {
    let (mm, conv) = oracle_equivalence(200, 3);
    assert!(mm < 1e-6, "matmul deviates by {mm}");
    assert!(conv < 1e-6, "conv2d deviates by {conv}");
}

#[test]
fn single_precision_tracks_oracle() {
    let mut g = rng(9);
    let a = uniform(&[16, 13], &mut g);
    let b = uniform(&[13, 11], &mut g);
    let tape = Tape::<f32>::new();
    let got = tape.constant(a.cast()).matmul(tape.constant(b.cast())).unwrap().value();
    let got: Tensor<f64> = got.cast();
    assert!(max_abs_diff(&got, &naive_matmul(&a, &b)) < 1e-5);
}
