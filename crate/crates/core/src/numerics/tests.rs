use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::gradcheck::{check_gradients, GradCheckOptions};
use super::*;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn naive_matmul(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, k) = a.dims2().unwrap();
    let (_, n) = b.dims2().unwrap();
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut s = 0.0;
            for p in 0..k {
                s += a.at(i, p) * b.at(p, j);
            }
            out[i * n + j] = s;
        }
    }
    Tensor::new(vec![m, n], out).unwrap()
}

#[test]
fn matmul_identity_and_hand_examples() {
    let eye = Tensor::from_rows(&[&[1.0, 0.0], &[0.0, 1.0]]);
    let b = Tensor::from_rows(&[&[3.0, 4.0], &[5.0, 6.0]]);
    assert_eq!(matmul(&eye, &b).unwrap().data(), b.data());

    let row = Tensor::from_rows(&[&[1.0, 2.0]]);
    let col = Tensor::from_rows(&[&[3.0], &[4.0]]);
    let out = matmul(&row, &col).unwrap();
    assert_eq!(out.shape(), &[1, 1]);
    assert_eq!(out.data(), &[11.0]);
}

#[test]
fn matmul_matches_triple_loop() {
    let mut r = rng(7);
    let a = Tensor::randn(&[4, 5], 1.0, &mut r);
    let b = Tensor::randn(&[5, 3], 1.0, &mut r);
    let got = matmul(&a, &b).unwrap();
    assert!(got.max_abs_diff(&naive_matmul(&a, &b)) < 1e-12);
}

#[test]
fn matmul_shape_error_names_both_shapes() {
    let a = Tensor::zeros(&[2, 3]);
    let b = Tensor::zeros(&[4, 2]);
    let err = matmul(&a, &b).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("[2, 3]") && msg.contains("[4, 2]"), "{msg}");
}

#[test]
fn matmul_is_associative_on_vectors() {
    let mut r = rng(3);
    let a = Tensor::randn(&[6, 6], 1.0, &mut r);
    let b = Tensor::randn(&[6, 6], 1.0, &mut r);
    let v = Tensor::randn(&[6, 1], 1.0, &mut r);
    let left = matmul(&matmul(&a, &b).unwrap(), &v).unwrap();
    let right = matmul(&a, &matmul(&b, &v).unwrap()).unwrap();
    assert!(left.max_abs_diff(&right) < 1e-10);
}

#[test]
fn elementwise_examples() {
    let z = Tensor::scalar(0.0);
    assert_eq!(unary(UnaryOp::Sigmoid, &z).unwrap().data(), &[0.5]);
    assert_eq!(unary(UnaryOp::Silu, &z).unwrap().data(), &[0.0]);
    let s = unary(UnaryOp::Sigmoid, &Tensor::scalar(-40.0))
        .unwrap()
        .data()[0];
    assert!(s > 0.0 && s < 1e-12);
    let clamped = unary(
        UnaryOp::Clamp {
            lo: DECAY_FLOOR,
            hi: DECAY_CEIL,
        },
        &Tensor::scalar(s),
    )
    .unwrap();
    assert_eq!(clamped.data(), &[DECAY_FLOOR]);
}

#[test]
fn log_rejects_non_positive() {
    let err = unary(UnaryOp::Log, &Tensor::new(vec![2], vec![1.0, 0.0]).unwrap()).unwrap_err();
    assert!(matches!(err, NumericsError::Domain { op: "log", .. }));
}

#[test]
fn non_finite_results_are_errors() {
    let err = unary(UnaryOp::Exp, &Tensor::scalar(1000.0)).unwrap_err();
    assert!(matches!(err, NumericsError::NonFinite { .. }));
}

#[test]
fn scalar_broadcast_both_sides() {
    let x = Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap();
    let one = Tensor::scalar(1.0);
    assert_eq!(
        binary(BinaryOp::Sub, &one, &x).unwrap().data(),
        &[0.0, -1.0, -2.0]
    );
    assert_eq!(
        binary(BinaryOp::Mul, &x, &Tensor::scalar(2.0))
            .unwrap()
            .data(),
        &[2.0, 4.0, 6.0]
    );
    assert!(binary(BinaryOp::Add, &x, &Tensor::zeros(&[2])).is_err());
}

#[test]
fn softmax_examples() {
    let u = softmax_rows(&Tensor::from_rows(&[&[0.0, 0.0, 0.0]]), false).unwrap();
    for p in u.data() {
        assert!((p - 1.0 / 3.0).abs() < 1e-15);
    }
    let big = softmax_rows(&Tensor::from_rows(&[&[1000.0, 0.0]]), false).unwrap();
    assert!((big.data()[0] - 1.0).abs() < 1e-15 && big.data()[1] < 1e-300);

    let c = softmax_rows(&Tensor::zeros(&[3, 3]), true).unwrap();
    let want = [
        1.0,
        0.0,
        0.0,
        0.5,
        0.5,
        0.0,
        1.0 / 3.0,
        1.0 / 3.0,
        1.0 / 3.0,
    ];
    for (g, w) in c.data().iter().zip(want) {
        assert!((g - w).abs() < 1e-15);
    }
}

#[test]
fn rms_norm_examples() {
    let g4 = Tensor::ones(&[4]);
    let out = rms_norm(&Tensor::ones(&[1, 4]), &g4, 0.0).unwrap();
    assert_eq!(out.data(), &[1.0; 4]);
    let out = rms_norm(&Tensor::filled(&[1, 2], 2.0), &Tensor::ones(&[2]), 0.0).unwrap();
    assert_eq!(out.data(), &[1.0, 1.0]);

    let mut r = rng(11);
    let x = Tensor::randn(&[1, 7], 1.0, &mut r);
    let gain = Tensor::randn(&[7], 1.0, &mut r);
    let eps = 1e-5;
    let ms: f64 = x.data().iter().map(|v| v * v).sum::<f64>() / 7.0;
    let direct: Vec<f64> = x
        .data()
        .iter()
        .zip(gain.data())
        .map(|(v, g)| v * g / (ms + eps).sqrt())
        .collect();
    let got = rms_norm(&x, &gain, eps).unwrap();
    for (a, b) in got.data().iter().zip(&direct) {
        assert!((a - b).abs() < 1e-14);
    }
}

#[test]
fn backward_requires_tracked_scalar() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::scalar(2.0));
    let y = tape.scale(x, 3.0).unwrap();
    assert!(matches!(tape.backward(y), Err(NumericsError::Usage(_))));

    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::ones(&[2]).with_requires_grad(true));
    assert!(matches!(tape.backward(x), Err(NumericsError::Usage(_))));
}

#[test]
fn backward_populates_leaf_grads_once() {
    let mut tape = Tape::new();
    let x = tape.leaf(
        Tensor::new(vec![2], vec![1.0, 2.0])
            .unwrap()
            .with_requires_grad(true),
    );
    let c = tape.constant(Tensor::new(vec![2], vec![3.0, 4.0]).unwrap());
    let y = tape.mul(x, c).unwrap();
    let y2 = tape.mul(y, x).unwrap();
    let s = tape.sum(y2).unwrap();
    tape.backward(s).unwrap();
    // d/dx sum(c x²) = 2 c x
    assert_eq!(tape.grad(x).unwrap(), &[6.0, 16.0]);
    assert!(tape.grad(c).is_none());
    assert!(tape.backward(s).is_err());
}

/// Weighted-sum probe so every output coordinate contributes to the loss.
fn probe(tape: &mut Tape, out: Var, seed: u64) -> Result<Var, NumericsError> {
    let w = Tensor::randn(tape.shape(out), 1.0, &mut rng(seed));
    let wv = tape.constant(w);
    let m = tape.mul(out, wv)?;
    tape.sum(m)
}

fn assert_fd(inputs: &[Tensor], f: impl Fn(&mut Tape, &[Var]) -> Result<Var, NumericsError>) {
    let report = check_gradients(inputs, f, &GradCheckOptions::default()).unwrap();
    assert!(report.passes(1e-4), "{report:?}");
}

#[test]
fn fd_matmul_and_transpose() {
    let mut r = rng(21);
    let a = Tensor::randn(&[5, 8], 1.0, &mut r);
    let b = Tensor::randn(&[8, 3], 1.0, &mut r);
    assert_fd(&[a.clone(), b], |t, v| {
        let m = t.matmul(v[0], v[1])?;
        probe(t, m, 1)
    });
    assert_fd(&[a], |t, v| {
        let m = t.transpose(v[0])?;
        probe(t, m, 2)
    });
}

#[test]
fn fd_unary_ops() {
    let mut r = rng(22);
    let x = Tensor::randn(&[6, 4], 1.0, &mut r);
    let pos = Tensor::uniform(&[6, 4], 0.5, 2.0, &mut r);
    let ops = [
        UnaryOp::Neg,
        UnaryOp::Exp,
        UnaryOp::Sigmoid,
        UnaryOp::Silu,
        UnaryOp::EluPlusOne,
        UnaryOp::Scale(-1.7),
        UnaryOp::Clamp { lo: -0.5, hi: 0.5 },
    ];
    for (i, op) in ops.into_iter().enumerate() {
        assert_fd(std::slice::from_ref(&x), |t, v| {
            let y = t.unary(op, v[0])?;
            probe(t, y, 100 + i as u64)
        });
    }
    assert_fd(&[pos], |t, v| {
        let y = t.log(v[0])?;
        probe(t, y, 9)
    });
}

#[test]
fn fd_binary_ops_with_broadcast() {
    let mut r = rng(23);
    let a = Tensor::randn(&[4, 4], 1.0, &mut r);
    let b = Tensor::randn(&[4, 4], 1.0, &mut r);
    let s = Tensor::randn(&[1], 1.0, &mut r);
    for (i, op) in [BinaryOp::Add, BinaryOp::Sub, BinaryOp::Mul]
        .into_iter()
        .enumerate()
    {
        assert_fd(&[a.clone(), b.clone()], |t, v| {
            let y = t.binary(op, v[0], v[1])?;
            probe(t, y, 200 + i as u64)
        });
        assert_fd(&[s.clone(), b.clone()], |t, v| {
            let y = t.binary(op, v[0], v[1])?;
            probe(t, y, 300 + i as u64)
        });
    }
}

#[test]
fn fd_softmax_rms_gather_ce() {
    let mut r = rng(24);
    let x = Tensor::randn(&[5, 6], 1.0, &mut r);
    for causal in [false, true] {
        assert_fd(std::slice::from_ref(&x), |t, v| {
            let y = t.softmax_rows(v[0], causal)?;
            probe(t, y, 4)
        });
    }
    let gain = Tensor::randn(&[6], 1.0, &mut r);
    assert_fd(&[x.clone(), gain], |t, v| {
        let y = t.rms_norm(v[0], v[1], 1e-6)?;
        probe(t, y, 5)
    });
    assert_fd(std::slice::from_ref(&x), |t, v| {
        let y = t.gather(v[0], &[4, 0, 4, 2])?;
        probe(t, y, 6)
    });
    assert_fd(&[x], |t, v| t.cross_entropy(v[0], &[0, 5, 2, 2, 1]));
}

#[test]
fn cross_entropy_of_zero_logits_is_log_vocab() {
    let mut tape = Tape::new();
    let l = tape.constant(Tensor::zeros(&[3, 17]));
    let loss = tape.cross_entropy(l, &[0, 5, 16]).unwrap();
    assert!((tape.value(loss).data()[0] - 17f64.ln()).abs() < 1e-14);
}

#[test]
fn outputs_are_deterministic() {
    let run = || {
        let mut r = rng(99);
        let a = Tensor::randn(&[8, 8], 1.0, &mut r);
        let b = Tensor::randn(&[8, 8], 1.0, &mut r);
        let m = matmul(&a, &b).unwrap();
        softmax_rows(&m, true).unwrap()
    };
    assert_eq!(run().data(), run().data());
}

proptest! {
    #[test]
    fn softmax_rows_are_distributions(
        rows in 1usize..6,
        cols in 1usize..9,
        seed in any::<u64>(),
        scale in 0.1f64..50.0,
        causal in any::<bool>(),
    ) {
        let x = Tensor::randn(&[rows, cols], scale, &mut rng(seed));
        let p = softmax_rows(&x, causal).unwrap();
        for i in 0..rows {
            let row = p.row(i);
            let s: f64 = row.iter().sum();
            prop_assert!((s - 1.0).abs() <= 1e-12);
            prop_assert!(row.iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn composite_mlp_gradients_match_fd(seed in 0u64..1000) {
        let mut r = rng(seed);
        let x = Tensor::randn(&[3, 4], 1.0, &mut r);
        let w1 = Tensor::randn(&[4, 5], 0.5, &mut r);
        let w2 = Tensor::randn(&[5, 4], 0.5, &mut r);
        let g = Tensor::uniform(&[4], 0.5, 1.5, &mut r);
        let report = check_gradients(&[x, w1, w2, g], |t, v| {
            let h = t.matmul(v[0], v[1])?;
            let h = t.silu(h)?;
            let o = t.matmul(h, v[2])?;
            let o = t.rms_norm(o, v[3], 1e-6)?;
            t.cross_entropy(o, &[1, 3, 0])
        }, &GradCheckOptions::default()).unwrap();
        prop_assert!(report.passes(1e-4), "{:?}", report);
    }
}
