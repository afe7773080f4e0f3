use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::tape_ops::{causal_softmax_attention, decay_scan, rope};
use super::*;
use crate::numerics::gradcheck::{check_gradients, check_gradients_against, GradCheckOptions};
use crate::numerics::{NumericsError, Tape, Var, DECAY_CEIL, DECAY_FLOOR};
use crate::spatial_decay::{spatial_override, BoundaryMode};

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random_inputs(n: usize, dk: usize, dv: usize, seed: u64) -> AttentionInputs {
    let mut r = rng(seed);
    AttentionInputs::new(
        Tensor::randn(&[n, dk], 1.0, &mut r),
        Tensor::randn(&[n, dk], 1.0, &mut r),
        Tensor::randn(&[n, dv], 1.0, &mut r),
    )
    .unwrap()
}

fn random_decay(n: usize, d: usize, seed: u64) -> Tensor {
    let mut r = rng(seed ^ 0x5eed);
    Tensor::uniform(&[n, d], 0.05, 0.999, &mut r)
}

fn one_minus(t: &Tensor) -> Tensor {
    Tensor::new(
        t.shape().to_vec(),
        t.data().iter().map(|x| 1.0 - x).collect(),
    )
    .unwrap()
}

/// Boundary-modified decays computed without the library helpers.
fn spatial_by_hand(decay: &Tensor, w: usize) -> Tensor {
    let (n, d) = decay.dims2().unwrap();
    let mut out = decay.data().to_vec();
    for t in 1..=n {
        if t % w == 0 {
            out[(t - 1) * d..t * d].fill(1.0);
        }
    }
    Tensor::new(vec![n, d], out).unwrap()
}

#[test]
fn softmax_examples() {
    let one = random_inputs(1, 3, 2, 1);
    let out = softmax_attention(&one, true).unwrap();
    assert_eq!(out.data(), one.v.data());

    let mut r = rng(2);
    let key = Tensor::randn(&[1, 4], 1.0, &mut r);
    let k = Tensor::from_rows(&[key.data(); 5]);
    let inputs = AttentionInputs::new(
        Tensor::randn(&[5, 4], 1.0, &mut r),
        k,
        Tensor::randn(&[5, 3], 1.0, &mut r),
    )
    .unwrap();
    let out = softmax_attention(&inputs, true).unwrap();
    for t in 0..5 {
        for c in 0..3 {
            let mean = (0..=t).map(|j| inputs.v.at(j, c)).sum::<f64>() / (t + 1) as f64;
            assert!((out.at(t, c) - mean).abs() < 1e-12);
        }
    }
}

#[test]
fn softmax_matches_row_recomputation() {
    let inputs = random_inputs(8, 4, 4, 3);
    for causal in [false, true] {
        let out = softmax_attention(&inputs, causal).unwrap();
        for t in 0..8 {
            let valid = if causal { t + 1 } else { 8 };
            let scores: Vec<f64> = (0..valid)
                .map(|j| {
                    (0..4)
                        .map(|i| inputs.q.at(t, i) * inputs.k.at(j, i))
                        .sum::<f64>()
                        / 2.0
                })
                .collect();
            let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
            let z: f64 = e.iter().sum();
            for c in 0..4 {
                let want: f64 = (0..valid).map(|j| e[j] / z * inputs.v.at(j, c)).sum();
                assert!((out.at(t, c) - want).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn linear_single_step_rms() {
    let inputs = random_inputs(1, 3, 4, 4);
    let out = linear_attention_parallel(
        &inputs,
        FeatureMap::Identity,
        LinearNorm::Rms { eps: 1e-6 },
        true,
    )
    .unwrap();
    let qk: f64 = (0..3).map(|i| inputs.q.at(0, i) * inputs.k.at(0, i)).sum();
    let raw: Vec<f64> = inputs.v.row(0).iter().map(|x| qk * x).collect();
    let rms = (raw.iter().map(|x| x * x).sum::<f64>() / 4.0 + 1e-6).sqrt();
    for (c, r) in raw.iter().enumerate() {
        assert!((out.at(0, c) - r / rms).abs() < 1e-12);
    }
}

#[test]
fn linear_associativity_noncausal() {
    let inputs = random_inputs(12, 5, 3, 5);
    let fast = linear_attention_parallel(&inputs, FeatureMap::EluPlusOne, LinearNorm::None, false)
        .unwrap();
    let phi = |t: &Tensor| {
        Tensor::new(
            t.shape().to_vec(),
            t.data()
                .iter()
                .map(|x| crate::numerics::kernels::elu_plus_one(*x))
                .collect(),
        )
        .unwrap()
    };
    let (fq, fk) = (phi(&inputs.q), phi(&inputs.k));
    let scores = crate::numerics::matmul(&fq, &crate::numerics::transpose(&fk).unwrap()).unwrap();
    let slow = crate::numerics::matmul(&scores, &inputs.v).unwrap();
    assert!(fast.max_abs_diff(&slow) < 1e-10);
}

#[test]
fn linear_delta_normalization() {
    let inputs = random_inputs(6, 3, 2, 6);
    let out = linear_attention_parallel(&inputs, FeatureMap::EluPlusOne, LinearNorm::Delta, false)
        .unwrap();
    let raw = linear_attention_parallel(&inputs, FeatureMap::EluPlusOne, LinearNorm::None, false)
        .unwrap();
    let phi = crate::numerics::kernels::elu_plus_one;
    for t in 0..6 {
        let z: f64 = (0..6)
            .map(|j| {
                (0..3)
                    .map(|i| phi(inputs.q.at(t, i)) * phi(inputs.k.at(j, i)))
                    .sum::<f64>()
            })
            .sum();
        for c in 0..2 {
            assert!((out.at(t, c) - raw.at(t, c) / z).abs() < 1e-12);
        }
    }

    let zero = AttentionInputs::new(
        Tensor::zeros(&[3, 2]),
        Tensor::ones(&[3, 2]),
        Tensor::ones(&[3, 2]),
    )
    .unwrap();
    let err = linear_attention_parallel(&zero, FeatureMap::Identity, LinearNorm::Delta, false)
        .unwrap_err();
    assert!(matches!(
        err,
        AttentionError::SingularNormalizer { row: 0, .. }
    ));
    assert!(
        linear_attention_parallel(&zero, FeatureMap::Identity, LinearNorm::Delta, true).is_err()
    );
}

#[test]
fn linear_recurrent_examples() {
    let one = random_inputs(1, 3, 2, 7);
    let out = linear_attention_recurrent(&one).unwrap();
    let qk: f64 = (0..3).map(|i| one.q.at(0, i) * one.k.at(0, i)).sum();
    for c in 0..2 {
        assert!((out.at(0, c) - qk * one.v.at(0, c)).abs() < 1e-14);
    }

    let mut r = rng(8);
    let n = 7;
    let mut k = Tensor::zeros(&[n, 4]);
    for t in 0..n {
        k.data_mut()[t * 4 + 2] = 1.0;
    }
    let v = Tensor::randn(&[n, 3], 1.0, &mut r);
    let mut state = RecurrentState::new(4, 3);
    for t in 0..n {
        state.step(&[0.0; 4], k.row(t), v.row(t), None);
    }
    for i in 0..4 {
        for c in 0..3 {
            let want = if i == 2 {
                (0..n).map(|t| v.at(t, c)).sum()
            } else {
                0.0
            };
            assert!((state.s.at(i, c) - want).abs() < 1e-12);
        }
    }
    assert_eq!(state.t, n);
}

#[test]
fn linear_recurrent_matches_causal_parallel() {
    for (n, seed) in [(16, 9), (32, 10)] {
        let inputs = random_inputs(n, 4, 5, seed);
        let rec = linear_attention_recurrent(&inputs).unwrap();
        let par = linear_attention_parallel(&inputs, FeatureMap::Identity, LinearNorm::None, true)
            .unwrap();
        assert!(rec.max_abs_diff(&par) < 1e-10);
    }
}

#[test]
fn decay_degenerates_to_linear_bit_identically() {
    let inputs = random_inputs(20, 4, 3, 11);
    let out = decay_attention_recurrent(&inputs, &Tensor::ones(&[20, 4])).unwrap();
    assert_eq!(out, linear_attention_recurrent(&inputs).unwrap());
    let oracle = materialized_decay_oracle(&inputs, &Tensor::ones(&[20, 4])).unwrap();
    assert!(oracle.max_abs_diff(&out) < 1e-10);
}

#[test]
fn decay_floor_erases_history() {
    let inputs = random_inputs(10, 3, 3, 12);
    let out = decay_attention_recurrent(&inputs, &Tensor::filled(&[10, 3], DECAY_FLOOR)).unwrap();
    for t in 0..10 {
        let qk: f64 = (0..3).map(|i| inputs.q.at(t, i) * inputs.k.at(t, i)).sum();
        for c in 0..3 {
            assert!((out.at(t, c) - qk * inputs.v.at(t, c)).abs() < 1e-4);
        }
    }
}

#[test]
fn decay_rejects_out_of_range() {
    let inputs = random_inputs(3, 2, 2, 13);
    let mut bad = Tensor::filled(&[3, 2], 0.5);
    bad.data_mut()[3] = 0.0;
    assert_eq!(
        decay_attention_recurrent(&inputs, &bad).unwrap_err(),
        AttentionError::DecayOutOfRange {
            position: 2,
            channel: 1,
            value: 0.0
        }
    );
    bad.data_mut()[3] = 1.5;
    assert!(decay_attention_recurrent(&inputs, &bad).is_err());
}

#[test]
fn oracle_two_step_expansion() {
    let inputs = random_inputs(2, 3, 2, 14);
    let lam = random_decay(2, 3, 14);
    let out = materialized_decay_oracle(&inputs, &lam).unwrap();
    for c in 0..2 {
        let mut want = 0.0;
        for i in 0..3 {
            want += inputs.q.at(1, i) * lam.at(1, i) * inputs.k.at(0, i) * inputs.v.at(0, c);
            want += inputs.q.at(1, i) * inputs.k.at(1, i) * inputs.v.at(1, c);
        }
        assert!((out.at(1, c) - want).abs() < 1e-14);
    }
    let big = random_inputs(ORACLE_MAX_LEN + 1, 1, 1, 15);
    assert!(matches!(
        materialized_decay_oracle(&big, &Tensor::ones(&[ORACLE_MAX_LEN + 1, 1])),
        Err(AttentionError::OracleTooLong { .. })
    ));
}

#[test]
fn decay_matches_oracle() {
    for seed in 0..20 {
        let inputs = random_inputs(32, 4, 3, seed);
        let lam = random_decay(32, 4, seed);
        let rec = decay_attention_recurrent(&inputs, &lam).unwrap();
        let oracle = materialized_decay_oracle(&inputs, &lam).unwrap();
        assert!(rec.max_abs_diff(&oracle) < 1e-10, "seed {seed}");
    }
}

#[test]
fn hgrn2_examples() {
    let n = 60;
    let v_row = [1.5, -2.0, 0.25];
    let v = Tensor::from_rows(&vec![&v_row[..]; n]);
    let lam = Tensor::filled(&[n, 2], 0.5);
    let q = Tensor::from_rows(&vec![&[1.0, 0.0][..]; n]);
    let out = hgrn2_recurrent(&q, &v, &lam).unwrap();
    for (c, &want) in v_row.iter().enumerate() {
        let err_first = (out.at(0, c) - want).abs();
        let err_last = (out.at(n - 1, c) - want).abs();
        assert!((err_first - 0.5 * want.abs()).abs() < 1e-14);
        assert!(err_last < 1e-15 + 0.5f64.powi(n as i32) * 2.0);
    }

    let inputs = random_inputs(16, 4, 3, 16);
    let lam = random_decay(16, 4, 16);
    let shared = hgrn2_recurrent(&inputs.q, &inputs.v, &lam).unwrap();
    let explicit =
        AttentionInputs::new(inputs.q.clone(), one_minus(&lam), inputs.v.clone()).unwrap();
    assert_eq!(shared, decay_attention_recurrent(&explicit, &lam).unwrap());
    assert!(shared.max_abs_diff(&materialized_decay_oracle(&explicit, &lam).unwrap()) < 1e-10);
}

#[test]
fn lasad_wide_rows_equal_hgrn2() {
    let inputs = random_inputs(24, 4, 4, 17);
    let lam = random_decay(24, 4, 17);
    let hg = hgrn2_recurrent(&inputs.q, &inputs.v, &lam).unwrap();
    assert_eq!(lasad_recurrent(&inputs.q, &inputs.v, &lam, 25).unwrap(), hg);
    assert_eq!(
        lasad_recurrent(&inputs.q, &inputs.v, &lam, 1000).unwrap(),
        hg
    );
}

#[test]
fn lasad_boundary_at_sixteen() {
    // Two steps suffice to read λ^spatial off the output: with a one-hot
    // query and zero value at the probed step, o_t = λ^spatial_t · s_{t−1}.
    let n = 17;
    let d = 2;
    let mut r = rng(18);
    let lam = random_decay(n, d, 18);
    let mut v = Tensor::randn(&[n, 1], 1.0, &mut r);
    v.data_mut()[15] = 0.0;
    v.data_mut()[16] = 0.0;
    let q = Tensor::from_rows(&vec![&[1.0, 0.0][..]; n]);
    let out = lasad_recurrent(&q, &v, &lam, 16).unwrap();
    assert_eq!(out.at(15, 0), out.at(14, 0));
    assert!((out.at(16, 0) - lam.at(16, 0) * out.at(15, 0)).abs() < 1e-15);
}

#[test]
fn lasad_matches_oracle_with_spatial_decay() {
    for seed in 0..10 {
        let inputs = random_inputs(64, 4, 4, 100 + seed);
        let lam = random_decay(64, 4, seed);
        let out = lasad_recurrent(&inputs.q, &inputs.v, &lam, 8).unwrap();
        let oracle_in =
            AttentionInputs::new(inputs.q.clone(), one_minus(&lam), inputs.v.clone()).unwrap();
        let oracle = materialized_decay_oracle(&oracle_in, &spatial_by_hand(&lam, 8)).unwrap();
        assert!(out.max_abs_diff(&oracle) < 1e-10, "seed {seed}");
    }
}

#[test]
fn lasad_single_boundary_at_end() {
    let n = 12;
    let inputs = random_inputs(n, 3, 3, 19);
    let lam = random_decay(n, 3, 19);
    let la = lasad_recurrent(&inputs.q, &inputs.v, &lam, n).unwrap();
    let hg = hgrn2_recurrent(&inputs.q, &inputs.v, &lam).unwrap();
    assert_eq!(&la.data()[..(n - 1) * 3], &hg.data()[..(n - 1) * 3]);
    assert_ne!(la.row(n - 1), hg.row(n - 1));
}

#[test]
fn lasad_zero_width_rejected() {
    let inputs = random_inputs(4, 2, 2, 20);
    let lam = random_decay(4, 2, 20);
    assert!(matches!(
        lasad_recurrent(&inputs.q, &inputs.v, &lam, 0),
        Err(AttentionError::Config(_))
    ));
}

#[test]
fn suppress_mode_is_opt_in() {
    let inputs = random_inputs(8, 2, 2, 21);
    let lam = random_decay(8, 2, 21);
    let opts = LasadOptions {
        mode: BoundaryMode::Suppress,
        ..LasadOptions::new(4)
    };
    let sup = lasad_recurrent_with(&inputs.q, &inputs.v, &lam, &opts).unwrap();
    assert_eq!(LasadOptions::new(4).mode, BoundaryMode::Retain);
    let mut floor = lam.clone();
    for t in [3, 7] {
        floor.data_mut()[t * 2..t * 2 + 2].fill(DECAY_FLOOR);
    }
    let oracle_in =
        AttentionInputs::new(inputs.q.clone(), one_minus(&lam), inputs.v.clone()).unwrap();
    assert!(sup.max_abs_diff(&materialized_decay_oracle(&oracle_in, &floor).unwrap()) < 1e-10);
}

#[test]
fn chunked_forms_agree() {
    let n = 64;
    let inputs = random_inputs(n, 4, 4, 22);
    let lam = random_decay(n, 4, 22);
    let rec = lasad_recurrent(&inputs.q, &inputs.v, &lam, 8).unwrap();
    for chunk in [1, 2, 4, 16, 32, 64, 100] {
        let ch = lasad_chunked(&inputs.q, &inputs.v, &lam, 8, chunk).unwrap();
        assert!(ch.max_abs_diff(&rec) < 1e-10, "chunk {chunk}");
    }
    assert!(lasad_chunked(&inputs.q, &inputs.v, &lam, 8, 0).is_err());
    let generic = decay_chunked(&inputs, &lam, 5).unwrap();
    assert!(generic.max_abs_diff(&decay_attention_recurrent(&inputs, &lam).unwrap()) < 1e-10);
}

#[test]
fn perturbing_future_leaves_past_bit_identical() {
    let n = 16;
    let t = 6;
    let base = random_inputs(n, 3, 3, 23);
    let lam = random_decay(n, 3, 23);
    let mut pert = base.clone();
    let mut lam2 = lam.clone();
    let mut r = rng(24);
    for j in t + 1..n {
        for i in 0..3 {
            pert.q.data_mut()[j * 3 + i] += r.gen_range(-1.0..1.0);
            pert.k.data_mut()[j * 3 + i] += r.gen_range(-1.0..1.0);
            pert.v.data_mut()[j * 3 + i] += r.gen_range(-1.0..1.0);
            lam2.data_mut()[j * 3 + i] = r.gen_range(0.1..0.9);
        }
    }
    let prefix = |o: Tensor| o.data()[..(t + 1) * 3].to_vec();
    let runs: Vec<(Tensor, Tensor)> = vec![
        (
            linear_attention_recurrent(&base).unwrap(),
            linear_attention_recurrent(&pert).unwrap(),
        ),
        (
            linear_attention_parallel(
                &base,
                FeatureMap::EluPlusOne,
                LinearNorm::Rms { eps: 1e-6 },
                true,
            )
            .unwrap(),
            linear_attention_parallel(
                &pert,
                FeatureMap::EluPlusOne,
                LinearNorm::Rms { eps: 1e-6 },
                true,
            )
            .unwrap(),
        ),
        (
            softmax_attention(&base, true).unwrap(),
            softmax_attention(&pert, true).unwrap(),
        ),
        (
            decay_attention_recurrent(&base, &lam).unwrap(),
            decay_attention_recurrent(&pert, &lam2).unwrap(),
        ),
        (
            hgrn2_recurrent(&base.q, &base.v, &lam).unwrap(),
            hgrn2_recurrent(&pert.q, &pert.v, &lam2).unwrap(),
        ),
        (
            lasad_recurrent(&base.q, &base.v, &lam, 4).unwrap(),
            lasad_recurrent(&pert.q, &pert.v, &lam2, 4).unwrap(),
        ),
        (
            lasad_chunked(&base.q, &base.v, &lam, 4, 5).unwrap(),
            lasad_chunked(&pert.q, &pert.v, &lam2, 4, 5).unwrap(),
        ),
    ];
    for (i, (a, b)) in runs.into_iter().enumerate() {
        assert_eq!(prefix(a), prefix(b), "mechanism {i}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn state_norm_is_bounded(seed in 0u64..10_000, n in 1usize..40, w in 1usize..10) {
        let inputs = random_inputs(n, 3, 2, seed);
        let lam = spatial_by_hand(&random_decay(n, 3, seed), w);
        let k = one_minus(&random_decay(n, 3, seed));
        let mut state = RecurrentState::new(3, 2);
        let mut bound = 0.0;
        for t in 0..n {
            state.step(inputs.q.row(t), k.row(t), inputs.v.row(t), Some(lam.row(t)));
            let norm = |x: &[f64]| x.iter().map(|y| y * y).sum::<f64>().sqrt();
            bound += norm(k.row(t)) * norm(inputs.v.row(t));
            prop_assert!(state.frobenius_norm() <= bound * (1.0 + 1e-12));
        }
    }

    #[test]
    fn oracle_equivalence_random_shapes(seed in 0u64..10_000, n in 1usize..48, dk in 1usize..6, dv in 1usize..6, w in 1usize..12) {
        let inputs = random_inputs(n, dk, dv, seed);
        let lam = random_decay(n, dk, seed);
        let out = lasad_recurrent(&inputs.q, &inputs.v, &lam, w).unwrap();
        let oracle_in = AttentionInputs::new(inputs.q.clone(), one_minus(&lam), inputs.v.clone()).unwrap();
        let oracle = materialized_decay_oracle(&oracle_in, &spatial_by_hand(&lam, w)).unwrap();
        prop_assert!(out.max_abs_diff(&oracle) < 1e-10);
    }
}

/// Weighted sum of outputs, so every output coordinate carries gradient.
fn weighted_loss(tape: &mut Tape, out: Var, w: &Tensor) -> Result<Var, NumericsError> {
    let w = tape.constant(w.clone());
    let prod = tape.mul(out, w)?;
    tape.sum(prod)
}

fn weighted_sum(out: &Tensor, w: &Tensor) -> f64 {
    out.data().iter().zip(w.data()).map(|(a, b)| a * b).sum()
}

#[test]
fn lasad_gradient_through_shared_key() {
    let (n, d, width) = (8, 4, 3);
    let mut r = rng(25);
    let q = Tensor::randn(&[n, d], 1.0, &mut r);
    let v = Tensor::randn(&[n, d], 1.0, &mut r);
    let logits = Tensor::randn(&[n, d], 1.0, &mut r);
    let w = Tensor::randn(&[n * d], 1.0, &mut r)
        .reshape(&[n, d])
        .unwrap();

    let build = |tape: &mut Tape, x: &[Var]| -> Result<Var, NumericsError> {
        let gate = tape.sigmoid(x[2])?;
        let lam = tape.clamp(gate, DECAY_FLOOR, DECAY_CEIL)?;
        let one = tape.constant(Tensor::scalar(1.0));
        let k = tape.sub(one, lam)?;
        let spatial = spatial_override(tape, lam, n, width, 1, BoundaryMode::Retain)?;
        let out = decay_scan(tape, x[0], k, x[1], Some(spatial), 1, n)?;
        weighted_loss(tape, out, &w)
    };
    let reference = |x: &[Tensor]| -> Result<f64, NumericsError> {
        let lam = Tensor::new(
            vec![n, d],
            x[2].data().iter().map(|l| decay_gate(*l)).collect(),
        )?;
        let out = lasad_recurrent(&x[0], &x[1], &lam, width)
            .map_err(|e| NumericsError::Usage(e.to_string()))?;
        Ok(weighted_sum(&out, &w))
    };
    let inputs = [q, v, logits];
    let same = check_gradients(&inputs, build, &GradCheckOptions::default()).unwrap();
    assert!(same.passes(1e-4), "{same:?}");
    let cross =
        check_gradients_against(&inputs, build, reference, &GradCheckOptions::default()).unwrap();
    assert!(cross.passes(1e-4), "{cross:?}");
}

#[test]
fn decay_scan_multi_head_matches_per_head() {
    let (b, n, heads, dk, dv) = (2, 5, 3, 2, 3);
    let mut r = rng(26);
    let q = Tensor::randn(&[b * n, heads * dk], 1.0, &mut r);
    let k = Tensor::randn(&[b * n, heads * dk], 1.0, &mut r);
    let v = Tensor::randn(&[b * n, heads * dv], 1.0, &mut r);
    let lam = Tensor::uniform(&[b * n, heads * dk], 0.1, 0.99, &mut r);
    let mut tape = Tape::new();
    let vars: Vec<Var> = [&q, &k, &v, &lam]
        .iter()
        .map(|t| tape.constant((*t).clone()))
        .collect();
    let out = decay_scan(
        &mut tape,
        vars[0],
        vars[1],
        vars[2],
        Some(vars[3]),
        heads,
        n,
    )
    .unwrap();
    let sm = causal_softmax_attention(&mut tape, vars[0], vars[1], vars[2], heads, n).unwrap();
    let cols = |t: &Tensor, s: usize, h: usize, w: usize| {
        let rows: Vec<Vec<f64>> = (0..n)
            .map(|i| t.row(s * n + i)[h * w..(h + 1) * w].to_vec())
            .collect();
        Tensor::from_rows(&rows.iter().map(Vec::as_slice).collect::<Vec<_>>())
    };
    for s in 0..b {
        for h in 0..heads {
            let inputs =
                AttentionInputs::new(cols(&q, s, h, dk), cols(&k, s, h, dk), cols(&v, s, h, dv))
                    .unwrap();
            let want = decay_attention_recurrent(&inputs, &cols(&lam, s, h, dk)).unwrap();
            assert_eq!(cols(tape.value(out), s, h, dv), want);
            let want = softmax_attention(&inputs, true).unwrap();
            assert!(cols(tape.value(sm), s, h, dv).max_abs_diff(&want) < 1e-14);
        }
    }
}

#[test]
fn tape_attention_gradients() {
    let (b, n, heads, d) = (2, 4, 2, 2);
    let mut r = rng(27);
    let shape = [b * n, heads * d];
    let inputs: Vec<Tensor> = (0..4).map(|_| Tensor::randn(&shape, 1.0, &mut r)).collect();
    let w = Tensor::randn(&shape, 1.0, &mut r);

    let opts = GradCheckOptions::default();
    let scan = check_gradients(
        &inputs,
        |tape, x| {
            let lam = tape.sigmoid(x[3])?;
            let out = decay_scan(tape, x[0], x[1], x[2], Some(lam), heads, n)?;
            weighted_loss(tape, out, &w)
        },
        &opts,
    )
    .unwrap();
    assert!(scan.passes(1e-4), "{scan:?}");

    let plain = check_gradients(
        &inputs[..3],
        |tape, x| {
            let out = decay_scan(tape, x[0], x[1], x[2], None, heads, n)?;
            weighted_loss(tape, out, &w)
        },
        &opts,
    )
    .unwrap();
    assert!(plain.passes(1e-4), "{plain:?}");

    let soft = check_gradients(
        &inputs[..3],
        |tape, x| {
            let q = rope(tape, x[0], heads, n)?;
            let k = rope(tape, x[1], heads, n)?;
            let out = causal_softmax_attention(tape, q, k, x[2], heads, n)?;
            weighted_loss(tape, out, &w)
        },
        &opts,
    )
    .unwrap();
    assert!(soft.passes(1e-4), "{soft:?}");
}

#[test]
fn rope_preserves_norm_and_inverts() {
    let mut r = rng(28);
    let x = Tensor::randn(&[1, 8], 1.0, &mut r);
    let mut y = x.data().to_vec();
    rope_in_place(&mut y, 5, 4, false);
    let norm = |v: &[f64]| v.iter().map(|a| a * a).sum::<f64>();
    assert!((norm(&y) - norm(x.data())).abs() < 1e-12);
    rope_in_place(&mut y, 5, 4, true);
    for (a, b) in y.iter().zip(x.data()) {
        assert!((a - b).abs() < 1e-14);
    }
    let mut z = x.data().to_vec();
    rope_in_place(&mut z, 0, 4, false);
    assert_eq!(z, x.data());
}

#[test]
fn tape_ops_reject_bad_shapes() {
    let mut tape = Tape::new();
    let a = tape.constant(Tensor::zeros(&[6, 4]));
    let bad = tape.constant(Tensor::zeros(&[6, 2]));
    assert!(decay_scan(&mut tape, a, a, a, None, 2, 4).is_err());
    assert!(decay_scan(&mut tape, a, bad, a, None, 2, 3).is_err());
    assert!(decay_scan(&mut tape, a, a, a, None, 3, 3).is_err());
}
