use super::ops::NormScope;
use super::*;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use crate::testutil::assert_close;

fn rand_tensor(rng: &mut impl Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Tensor::param(shape, data).unwrap()
}

#[test]
fn matmul_identity() {
    let eye = Tensor::from_vec(&[3, 3], vec![1., 0., 0., 0., 1., 0., 0., 0., 1.]).unwrap();
    let a = Tensor::from_vec(&[3, 2], vec![1., 2., 3., 4., 5., 6.]).unwrap();
    let out = eye.matmul(&a).unwrap();
    assert_eq!(out.to_vec(), a.to_vec());
}

#[test]
fn fixed_points() {
    let z = Tensor::from_vec(&[1], vec![0.0]).unwrap();
    assert_eq!(z.sigmoid().unwrap().item().unwrap(), 0.5);
    assert_eq!(z.tanh_t().unwrap().item().unwrap(), 0.0);
}

#[test]
fn slice_range() {
    let t = Tensor::from_vec(&[5], vec![1., 2., 3., 4., 5.]).unwrap();
    assert_eq!(t.slice(1, 4).unwrap().to_vec(), vec![2., 3., 4.]);
}

#[test]
fn backward_square() {
    let x = Tensor::param(&[1], vec![3.0]).unwrap();
    let loss = x.mul(&x).unwrap();
    loss.backward().unwrap();
    assert_eq!(x.grad().unwrap(), vec![6.0]);
}

#[test]
fn backward_matches_finite_differences() {
    // loss = sum(sigmoid(W x)) for random 4x4 W, checked against central
    // differences with h = 1e-5.
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let w = rand_tensor(&mut rng, &[4, 4]);
    let x: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let xv = Tensor::from_vec(&[4], x).unwrap();

    let loss = w.matmul(&xv).unwrap().sigmoid().unwrap().sum().unwrap();
    loss.backward().unwrap();
    let auto = w.grad().unwrap();

    let fd = finite_difference_gradient(
        |wt| wt.matmul(&xv)?.sigmoid()?.sum(),
        &w,
        1e-5,
    )
    .unwrap();
    assert_close(&auto, &fd, 1e-6, "sigmoid(Wx) gradient");
}

#[test]
fn gradient_accumulates_across_branches() {
    let c = Tensor::param(&[3], vec![1.0, 2.0, 3.0]).unwrap();
    // c used in two branches; grads must sum.
    let loss = c.mean().unwrap().add(&c.sum().unwrap()).unwrap();
    loss.backward().unwrap();
    let expect = 1.0 / 3.0 + 1.0;
    assert_close(&c.grad().unwrap(), &[expect; 3], 1e-12, "branch accumulation");
}

#[test]
fn finite_difference_oracle_basics() {
    let x = Tensor::from_vec(&[1], vec![3.0]).unwrap();
    let g = finite_difference_gradient(|t| t.square()?.sum(), &x, 1e-5).unwrap();
    assert!((g[0] - 6.0).abs() < 1e-9, "got {}", g[0]);

    let x = Tensor::from_vec(&[2], vec![0.0, 1.0]).unwrap();
    let g = finite_difference_gradient(|t| t.tanh_t()?.sum(), &x, 1e-5).unwrap();
    let t1: f64 = 1.0f64.tanh();
    assert_close(&g, &[1.0, 1.0 - t1 * t1], 1e-8, "tanh fd");

    let g = finite_difference_gradient(|_| Tensor::scalar(2.5).add_scalar(0.0), &x, 1e-5).unwrap();
    assert_close(&g, &[0.0, 0.0], 1e-12, "constant fd");
}

#[test]
fn primitive_gradients_match_finite_differences() {
    // 50 seeds, random shapes up to 8x8, rel-err < 1e-4 per the module
    // contract (typically far better in 64-bit).
    let cases: Vec<(&str, fn(&Tensor) -> Result<Tensor>)> = vec![
        ("sigmoid", |t| t.sigmoid()?.sum()),
        ("tanh", |t| t.tanh_t()?.sum()),
        ("square", |t| t.square()?.sum()),
        ("mean", |t| t.mean()),
        ("scale", |t| t.scale(1.7)?.sum()),
        ("transpose", |t| t.transpose2d()?.tanh_t()?.sum()),
        ("reshape", |t| {
            let n = t.numel();
            t.reshape(&[n])?.sigmoid()?.sum()
        }),
        ("norm_global", |t| t.normalize(NormScope::Global, 1e-8)?.square()?.sum()),
        ("norm_rows", |t| t.normalize(NormScope::Rows, 1e-8)?.square()?.sum()),
        ("slice_cols", |t| {
            let n = t.shape()[1];
            t.slice_cols(0, n.div_ceil(2))?.tanh_t()?.sum()
        }),
    ];
    for seed in 0..50u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shape = [rng.gen_range(2..=8), rng.gen_range(2..=8)];
        for (name, f) in &cases {
            let x = rand_tensor(&mut rng, &shape);
            let loss = f(&x).unwrap();
            loss.backward().unwrap();
            let auto = x.grad().unwrap();
            // h = 1e-6: the normalization primitives can be ill-conditioned
            // on near-constant rows, where FD truncation error at h = 1e-5
            // already exceeds the 1e-4 gate.
            let fd = finite_difference_gradient(f, &x, 1e-6).unwrap();
            assert_close(&auto, &fd, 1e-4, &format!("{name} seed {seed}"));
        }
    }
}

#[test]
fn matmul_both_sides_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let a = rand_tensor(&mut rng, &[3, 4]);
    let b = rand_tensor(&mut rng, &[4, 5]);
    let loss = a.matmul(&b).unwrap().square().unwrap().sum().unwrap();
    loss.backward().unwrap();
    let fd_a =
        finite_difference_gradient(|t| t.matmul(&b)?.square()?.sum(), &a, 1e-5).unwrap();
    let fd_b =
        finite_difference_gradient(|t| a.matmul(t)?.square()?.sum(), &b, 1e-5).unwrap();
    assert_close(&a.grad().unwrap(), &fd_a, 1e-6, "matmul dA");
    assert_close(&b.grad().unwrap(), &fd_b, 1e-6, "matmul dB");
}

#[test]
fn broadcast_ops_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let a = rand_tensor(&mut rng, &[4, 3]);
    let b = rand_tensor(&mut rng, &[3]);
    let loss = a.mul(&b).unwrap().add(&b).unwrap().tanh_t().unwrap().sum().unwrap();
    loss.backward().unwrap();
    let fd_b = finite_difference_gradient(
        |t| a.mul(t)?.add(t)?.tanh_t()?.sum(),
        &b,
        1e-5,
    )
    .unwrap();
    assert_close(&b.grad().unwrap(), &fd_b, 1e-6, "broadcast db");
}

#[test]
fn frames_and_overlap_add_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let x = rand_tensor(&mut rng, &[12]);
    let f = |t: &Tensor| t.frames(4, 2)?.overlap_add(2, 12)?.square()?.sum();
    let loss = f(&x).unwrap();
    loss.backward().unwrap();
    let fd = finite_difference_gradient(f, &x, 1e-5).unwrap();
    assert_close(&x.grad().unwrap(), &fd, 1e-6, "frames/overlap_add");
}

#[test]
fn reshape_transpose_round_trips() {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let x = rand_tensor(&mut rng, &[5, 7]);
    let rt = x.transpose2d().unwrap().transpose2d().unwrap();
    assert_eq!(rt.to_vec(), x.to_vec());
    let rs = x.reshape(&[35]).unwrap().reshape(&[5, 7]).unwrap();
    assert_eq!(rs.to_vec(), x.to_vec());
}

#[test]
fn shape_mismatch_names_primitive() {
    let a = Tensor::zeros(&[2, 3]);
    let b = Tensor::zeros(&[2, 3]);
    let err = a.matmul(&b).unwrap_err();
    assert!(err.to_string().contains("matmul"), "{err}");
    let err = a.add(&Tensor::zeros(&[4])).unwrap_err();
    assert!(err.to_string().contains("add"), "{err}");
}

#[test]
fn non_finite_is_a_fault() {
    let x = Tensor::from_vec(&[1], vec![-1.0]).unwrap();
    let err = x.sqrt_t().unwrap_err();
    assert!(matches!(err, NumericsError::NumericFault { op: "sqrt" }));
    let err = Tensor::scalar(0.0).ln().unwrap_err();
    assert!(matches!(err, NumericsError::NumericFault { op: "ln" }));
}

#[test]
fn backward_guards() {
    let x = Tensor::param(&[3], vec![1.0, 2.0, 3.0]).unwrap();
    let y = x.square().unwrap();
    assert!(matches!(
        y.backward(),
        Err(NumericsError::NonScalarLoss { numel: 3 })
    ));
    let loss = y.sum().unwrap();
    loss.backward().unwrap();
    assert!(matches!(loss.backward(), Err(NumericsError::BackwardTwice)));
}

#[test]
fn tape_is_deterministic() {
    let run = || {
        let x = Tensor::param(&[4], vec![0.1, -0.2, 0.3, -0.4]).unwrap();
        let loss = x.tanh_t().unwrap().square().unwrap().sum().unwrap();
        loss.backward().unwrap();
        (loss.item().unwrap(), x.grad().unwrap())
    };
    let (l1, g1) = run();
    let (l2, g2) = run();
    assert_eq!(l1.to_bits(), l2.to_bits());
    assert_eq!(g1, g2);
}

#[test]
fn blob_round_trip() {
    let t = Tensor::from_vec(&[2, 3], vec![1.5, -2.0, 3.25, 0.0, -0.5, 9.0]).unwrap();
    let mut buf = Vec::new();
    write_blob(&t, &mut buf);
    assert_eq!(buf.len(), blob_len(t.shape()));
    let (back, end) = read_blob(&buf, 0).unwrap();
    assert_eq!(end, buf.len());
    assert_eq!(back.shape(), t.shape());
    assert_eq!(back.to_vec(), t.to_vec());

    let err = read_blob(&buf[..6], 0).unwrap_err();
    assert!(matches!(err, NumericsError::BadBlob(_)));
}

#[test]
fn mul_counter_counts_matmul_only() {
    reset_mul_counter();
    let a = Tensor::zeros(&[3, 4]);
    let b = Tensor::zeros(&[4, 5]);
    a.matmul(&b).unwrap();
    assert_eq!(mul_counter(), 60);
    a.mul(&Tensor::zeros(&[3, 4])).unwrap();
    a.sigmoid().unwrap();
    assert_eq!(mul_counter(), 60);
}
