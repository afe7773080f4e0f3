use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::attention::DecayVariant;
use crate::data::{SyntheticSpec, Task, TokenGrid};
use crate::numerics::gradcheck::{check_gradients, GradCheckOptions};
use crate::numerics::{NumericsError, Tape, Var};

fn tiny(attention: AttentionKind) -> ModelConfig {
    ModelConfig {
        layers: 2,
        hidden: 16,
        heads: 2,
        vocab: 17,
        grid_width: 4,
        grid_height: 4,
        classes: 3,
        attention,
        mlp_hidden: 24,
        ..ModelConfig::nano()
    }
}

fn all_kinds() -> Vec<AttentionKind> {
    vec![
        AttentionKind::lasad(),
        AttentionKind::Decay(DecayVariant::Hgrn2Shared),
        AttentionKind::Decay(DecayVariant::DataDependent),
        AttentionKind::Decay(DecayVariant::Constant(0.9)),
        AttentionKind::Decay(DecayVariant::None),
        AttentionKind::Softmax,
        AttentionKind::Hybrid,
    ]
}

fn random_tokens(n: usize, vocab: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.gen_range(0..vocab)).collect()
}

/// Weights large enough that every layer visibly shapes the output.
fn spread(model: &mut Model, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for t in model.params_mut().tensors_mut() {
        if t.shape().len() == 2 {
            for x in t.data_mut() {
                *x = rng.gen_range(-0.5..0.5);
            }
        }
    }
}

#[test]
fn forward_shape_matches_config() {
    let model = Model::new(tiny(AttentionKind::lasad()), 1).unwrap();
    let tokens = random_tokens(15, 17, 1);
    let logits = model.forward(&[Some(0)], &[&tokens]).unwrap();
    assert_eq!(logits.shape(), &[16, 17]);
    let two = model
        .forward(&[Some(0), None], &[&tokens[..3], &tokens[3..6]])
        .unwrap();
    assert_eq!(two.shape(), &[8, 17]);
}

#[test]
fn forward_rejects_bad_inputs() {
    let model = Model::new(tiny(AttentionKind::lasad()), 1).unwrap();
    assert!(model.forward(&[Some(0)], &[&[17]]).is_err());
    assert!(model.forward(&[Some(3)], &[&[1]]).is_err());
    assert!(model.forward(&[Some(0)], &[&[0; 16]]).is_err());
    assert!(model
        .forward(&[Some(0), Some(1)], &[&[1], &[1, 2]])
        .is_err());
    assert!(model.forward(&[Some(0)], &[]).is_err());
}

#[test]
fn parameter_count_matches_enumeration() {
    for kind in all_kinds() {
        let cfg = tiny(kind);
        assert_eq!(
            Model::new(cfg.clone(), 0).unwrap().parameter_count(),
            cfg.parameter_count(),
            "{kind}"
        );
    }
    for cfg in [ModelConfig::nano(), ModelConfig::micro()] {
        assert_eq!(
            Model::new(cfg.clone(), 0).unwrap().parameter_count(),
            cfg.parameter_count()
        );
    }
}

#[test]
fn base_preset_is_about_111m() {
    let cfg = ModelConfig::base();
    assert_eq!(cfg.mlp_hidden, 2048);
    let count = cfg.parameter_count() as f64;
    assert!((count / 111e6 - 1.0).abs() < 0.05, "{count}");
}

#[test]
fn hybrid_has_one_middle_softmax_layer() {
    for layers in 1..7 {
        let cfg = ModelConfig {
            layers,
            ..tiny(AttentionKind::Hybrid)
        };
        let soft: Vec<usize> = (0..layers)
            .filter(|&l| cfg.mixer(l) == Mixer::Softmax)
            .collect();
        assert_eq!(soft, vec![layers / 2]);
    }
}

#[test]
fn config_pairs_round_trip() {
    for kind in all_kinds() {
        let cfg = ModelConfig {
            cfg_dropout: 0.25,
            ..tiny(kind)
        };
        let pairs = cfg.to_pairs();
        let back = ModelConfig::micro()
            .apply_pairs(pairs.iter().map(|(k, v)| (k.as_str(), v.as_str())))
            .unwrap();
        assert_eq!(back, cfg);
    }
    assert!(ModelConfig::nano().apply_pairs([("bogus", "1")]).is_err());
    assert!(ModelConfig::nano().apply_pairs([("heads", "3")]).is_err());
    assert!(ModelConfig::nano()
        .apply_pairs([("attention", "constant:1.5")])
        .is_err());
    let wide = ModelConfig::nano().apply_pairs([("hidden", "96")]).unwrap();
    assert_eq!(wide.mlp_hidden, default_mlp_hidden(96));
}

#[test]
fn causality_for_every_variant() {
    for kind in all_kinds() {
        let mut model = Model::new(tiny(kind), 2).unwrap();
        spread(&mut model, 3);
        let base = random_tokens(15, 17, 4);
        let before = model.forward(&[Some(1)], &[&base]).unwrap();
        for j in [0, 5, 9, 14] {
            let mut pert = base.clone();
            pert[j] = (pert[j] + 1) % 17;
            let after = model.forward(&[Some(1)], &[&pert]).unwrap();
            let split = (j + 1) * 17;
            assert_eq!(
                &before.data()[..split],
                &after.data()[..split],
                "{kind} j={j}"
            );
            assert_ne!(
                &before.data()[split..],
                &after.data()[split..],
                "{kind} j={j}"
            );
        }
    }
}

#[test]
fn label_conditioning_is_live() {
    let model = Model::new(tiny(AttentionKind::lasad()), 5).unwrap();
    let tokens = random_tokens(15, 17, 5);
    let c = model.forward(&[Some(2)], &[&tokens]).unwrap();
    let u = model.forward(&[None], &[&tokens]).unwrap();
    for t in 0..16 {
        assert_ne!(c.row(t), u.row(t));
    }
}

#[test]
fn untrained_loss_is_near_uniform() {
    let mut model = Model::new(tiny(AttentionKind::lasad()), 6).unwrap();
    let grids: Vec<TokenGrid> = (0..8)
        .map(|i| TokenGrid::new(4, 4, random_tokens(16, 17, 60 + i), 1).unwrap())
        .collect();
    let labels = vec![Some(1); grids.len()];
    let loss = model.loss(&grids, &labels).unwrap();
    assert!((loss - 17f64.ln()).abs() < 0.02 * 17f64.ln(), "{loss}");

    let names = model.params().names().to_vec();
    let head = names.iter().position(|n| n == "head").unwrap();
    model.params_mut().tensors_mut()[head].data_mut().fill(0.0);
    let zero = model.loss(&grids, &labels).unwrap();
    assert!((zero - 17f64.ln()).abs() < 1e-12, "{zero}");
}

#[test]
fn memorizes_a_single_grid() {
    let model = Model::new(tiny(AttentionKind::lasad()), 7).unwrap();
    let grid = TokenGrid::new(4, 4, random_tokens(16, 17, 7), 0).unwrap();
    let opt = AdamWConfig {
        lr: 3e-3,
        ..AdamWConfig::default()
    };
    let mut trainer = Trainer::new(model, opt, 0, 1).unwrap();
    let trace = trainer
        .run(std::slice::from_ref(&grid), 200, |_| {})
        .unwrap();
    assert_eq!(trace.records.len(), 200);
    let loss = trainer.model.loss(&[grid], &[Some(0)]).unwrap();
    assert!(loss < 0.1 * 17f64.ln(), "{loss}");
}

#[test]
fn cfg_dropout_switch_changes_loss() {
    let spec = SyntheticSpec {
        task: Task::RowCopy,
        height: 4,
        width: 4,
        vocab: 17,
        classes: 3,
        count: 8,
        seed: 1,
    };
    let data = spec.generate().unwrap();
    let mut losses = Vec::new();
    for p in [0.0, 1.0] {
        let cfg = ModelConfig {
            cfg_dropout: p,
            ..tiny(AttentionKind::lasad())
        };
        let trainer =
            Trainer::new(Model::new(cfg, 8).unwrap(), AdamWConfig::default(), 9, 4).unwrap();
        let (grids, labels) = trainer.next_batch(&data);
        if p == 0.0 {
            assert!(labels.iter().all(Option::is_some));
        } else {
            assert!(labels.iter().all(Option::is_none));
        }
        losses.push(trainer.model.loss(&grids, &labels).unwrap());
    }
    assert_ne!(losses[0], losses[1]);
}

#[test]
fn zero_steps_keep_initialization() {
    let model = Model::new(tiny(AttentionKind::lasad()), 10).unwrap();
    let init = model.params().clone();
    let mut trainer = Trainer::new(model, AdamWConfig::default(), 0, 2).unwrap();
    let trace = trainer.run(&[], 0, |_| {}).unwrap();
    assert!(trace.records.is_empty());
    assert_eq!(trainer.checkpoint().params, init);
    assert_eq!(
        Model::new(tiny(AttentionKind::lasad()), 10)
            .unwrap()
            .params(),
        &init
    );
}

#[test]
fn adamw_matches_hand_update() {
    let mut p = vec![
        crate::numerics::Tensor::from_rows(&[&[1.0, -2.0]]),
        crate::numerics::Tensor::filled(&[2], 0.5),
    ];
    let cfg = AdamWConfig {
        lr: 0.1,
        weight_decay: 0.5,
        ..AdamWConfig::default()
    };
    let mut opt = AdamW::new(cfg, &p);
    let g = vec![vec![0.2, -0.4], vec![1.0, 0.0]];
    opt.step(&mut p, &g, 0.1);
    // First step: m̂ = g, v̂ = g², so the update is lr·g/(|g| + eps).
    let want = |x: f64, g: f64, wd: f64| x - 0.1 * wd * x - 0.1 * g / (g.abs() + 1e-8);
    assert!((p[0].data()[0] - want(1.0, 0.2, 0.5)).abs() < 1e-12);
    assert!((p[0].data()[1] - want(-2.0, -0.4, 0.5)).abs() < 1e-12);
    assert!((p[1].data()[0] - want(0.5, 1.0, 0.0)).abs() < 1e-12);
    assert_eq!(p[1].data()[1], 0.5);
}

#[test]
fn gate_biases_ramp_within_each_head() {
    let model = Model::new(ModelConfig::nano(), 0).unwrap();
    let hd = model.config().head_dim();
    let names = model.params().names().to_vec();
    let mut seen = 0;
    for (name, t) in names.iter().zip(model.params().tensors()) {
        if !name.ends_with("attn.bl") {
            continue;
        }
        seen += 1;
        for head in t.data().chunks(hd) {
            assert_eq!(head[0], -2.0);
            assert!((head[hd - 1] - 2.0).abs() < 1e-12);
            assert!(head.windows(2).all(|w| w[1] > w[0]));
        }
    }
    assert_eq!(seen, 2);
}

#[test]
fn learning_rate_schedule() {
    let c = AdamWConfig {
        lr: 2.0,
        warmup_steps: 4,
        decay_steps: 10,
        ..AdamWConfig::default()
    };
    assert_eq!(c.lr_at(0), 0.5);
    assert_eq!(c.lr_at(3), 2.0);
    assert!((c.lr_at(4) - 2.0).abs() < 1e-15);
    assert!((c.lr_at(9) - 1.0).abs() < 1e-12);
    assert!(c.lr_at(14).abs() < 1e-15 && c.lr_at(100).abs() < 1e-15);
    let flat = AdamWConfig {
        warmup_steps: 0,
        decay_steps: 0,
        ..c
    };
    assert_eq!(flat.lr_at(1000), 2.0);
}

#[test]
fn decode_matches_full_forward() {
    for kind in all_kinds() {
        let mut model = Model::new(tiny(kind), 11).unwrap();
        spread(&mut model, 12);
        let tokens = random_tokens(16, 17, 13);
        let full = model.forward(&[Some(2)], &[&tokens[..15]]).unwrap();
        let mut dec = Decoder::new(&model);
        let mut rows = vec![dec.start(Some(2)).unwrap()];
        for &t in &tokens[..15] {
            rows.push(dec.push(t).unwrap());
        }
        assert!(dec.push(tokens[15]).is_err());
        for (t, row) in rows.iter().enumerate() {
            for (a, b) in row.iter().zip(full.row(t)) {
                assert!((a - b).abs() < 1e-9, "{kind} row {t}: {a} vs {b}");
            }
        }
    }
}

#[test]
fn recurrent_decoder_memory_is_constant() {
    let model = Model::new(tiny(AttentionKind::lasad()), 14).unwrap();
    let mut dec = Decoder::new(&model);
    dec.start(Some(0)).unwrap();
    let first = dec.state_floats();
    for t in 0..15 {
        dec.push(t % 17).unwrap();
    }
    assert_eq!(dec.state_floats(), first);
    assert_eq!(first, 2 * 2 * 8 * 8);
}

#[test]
fn guidance_rule() {
    let c = [1.0, -2.0, 0.5];
    let u = [0.25, 1.0, 0.5];
    assert_eq!(guide_logits(&c, &u, 1.0), c.to_vec());
    assert_eq!(guide_logits(&c, &u, 0.0), u.to_vec());
    let g = guide_logits(&c, &u, 3.0);
    assert_eq!(g, vec![0.25 + 3.0 * 0.75, 1.0 - 9.0, 0.5]);
}

#[test]
fn sampling_modes() {
    let mut model = Model::new(tiny(AttentionKind::lasad()), 15).unwrap();
    spread(&mut model, 16);
    let greedy = SampleOptions {
        top_k: 1,
        ..SampleOptions::default()
    };
    let a = sample(&model, Some(1), &greedy).unwrap();
    let b = sample(&model, Some(1), &SampleOptions { seed: 99, ..greedy }).unwrap();
    assert_eq!(a, b);
    let cold = SampleOptions {
        temperature: 0.0,
        ..SampleOptions::default()
    };
    assert_eq!(sample(&model, Some(1), &cold).unwrap(), a);

    let opts = SampleOptions {
        cfg_scale: 0.0,
        seed: 5,
        ..SampleOptions::default()
    };
    let guided_off = sample(&model, Some(2), &opts).unwrap();
    let uncond = sample(&model, None, &opts).unwrap();
    assert_eq!(guided_off.tokens, uncond.tokens);
    assert_eq!(guided_off.label, 2);

    let s4 = SampleOptions {
        cfg_scale: 4.0,
        seed: 5,
        ..SampleOptions::default()
    };
    let g = sample(&model, Some(2), &s4).unwrap();
    assert!(g.validate(17, 3).is_ok());
    assert_eq!(g, sample(&model, Some(2), &s4).unwrap());

    assert!(sample(&model, Some(3), &opts).is_err());
    assert!(sample(
        &model,
        Some(0),
        &SampleOptions {
            cfg_scale: -1.0,
            ..opts
        }
    )
    .is_err());
}

#[test]
fn top_k_restricts_support() {
    let logits = [0.0, 3.0, 2.9, -1.0, 2.95];
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for _ in 0..200 {
        let t = sample_logits(&logits, 1.0, 2, &mut rng);
        assert!(t == 1 || t == 4);
    }
    assert_eq!(sample_logits(&logits, 1.0, 1, &mut rng), 1);
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    for kind in [
        AttentionKind::lasad(),
        AttentionKind::Hybrid,
        AttentionKind::Decay(DecayVariant::Constant(0.75)),
    ] {
        let model = Model::new(tiny(kind), 17).unwrap();
        let data = SyntheticSpec {
            task: Task::RowShift,
            height: 4,
            width: 4,
            vocab: 17,
            classes: 3,
            count: 16,
            seed: 2,
        }
        .generate()
        .unwrap();
        let mut trainer = Trainer::new(model, AdamWConfig::default(), 3, 4).unwrap();
        trainer.run(&data, 3, |_| {}).unwrap();
        let labels: Vec<Option<usize>> = data.iter().map(|g| Some(g.label)).collect();
        let before = trainer.model.loss(&data, &labels).unwrap();

        let ckpt = trainer.checkpoint();
        let mut bytes = Vec::new();
        ckpt.write_to(&mut bytes).unwrap();
        assert_eq!(&bytes[..4], b"LASD");
        let back = Checkpoint::read_from(&bytes[..]).unwrap();
        assert_eq!(back, ckpt);
        let after = back.model().unwrap().loss(&data, &labels).unwrap();
        assert_eq!(before.to_bits(), after.to_bits());
    }
}

#[test]
fn corrupt_checkpoints_are_rejected() {
    let model = Model::new(tiny(AttentionKind::lasad()), 18).unwrap();
    let ckpt = Checkpoint::from_model(&model, 0, 1, None);
    let mut bytes = Vec::new();
    ckpt.write_to(&mut bytes).unwrap();

    let err = Checkpoint::read_from(&bytes[..bytes.len() - 3])
        .unwrap_err()
        .to_string();
    assert!(err.contains("head") && err.contains("truncated"), "{err}");

    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(Checkpoint::read_from(&bad[..]).is_err());

    let mut params: Vec<(String, crate::numerics::Tensor)> = model
        .params()
        .iter()
        .map(|(n, t)| (n.to_string(), t.clone()))
        .collect();
    params.retain(|(n, _)| n != "layers.1.attn.wl");
    let err = Model::from_params(
        model.config().clone(),
        ParamStore::from_pairs(params).unwrap(),
    )
    .unwrap_err()
    .to_string();
    assert!(err.contains("parameter tensors"), "{err}");

    let mut params: Vec<(String, crate::numerics::Tensor)> = model
        .params()
        .iter()
        .map(|(n, t)| (n.to_string(), t.clone()))
        .collect();
    params[3].1 = crate::numerics::Tensor::zeros(&[2, 2]);
    let name = params[3].0.clone();
    let err = Model::from_params(
        model.config().clone(),
        ParamStore::from_pairs(params).unwrap(),
    )
    .unwrap_err()
    .to_string();
    assert!(err.contains(&name), "{err}");
}

#[test]
fn resume_continues_exactly() {
    let data = SyntheticSpec {
        task: Task::ColumnStripe,
        height: 4,
        width: 4,
        vocab: 17,
        classes: 3,
        count: 32,
        seed: 4,
    }
    .generate()
    .unwrap();
    let fresh = || {
        Trainer::new(
            Model::new(tiny(AttentionKind::lasad()), 19).unwrap(),
            AdamWConfig {
                lr: 1e-3,
                ..AdamWConfig::default()
            },
            5,
            3,
        )
        .unwrap()
    };
    let mut straight = fresh();
    let full = straight.run(&data, 6, |_| {}).unwrap();

    let mut first = fresh();
    let head = first.run(&data, 3, |_| {}).unwrap();
    let mut bytes = Vec::new();
    first.checkpoint().write_to(&mut bytes).unwrap();
    let mut resumed = Trainer::resume(&Checkpoint::read_from(&bytes[..]).unwrap(), 3).unwrap();
    let tail = resumed.run(&data, 3, |_| {}).unwrap();

    let losses = |t: &LossTrace| {
        t.records
            .iter()
            .map(|r| (r.step, r.loss.to_bits()))
            .collect::<Vec<_>>()
    };
    let mut joined = losses(&head);
    joined.extend(losses(&tail));
    assert_eq!(joined, losses(&full));
    assert_eq!(resumed.model.params(), straight.model.params());
}

#[test]
fn loss_trace_csv_round_trip() {
    let trace = LossTrace {
        records: vec![
            StepRecord {
                step: 1,
                loss: 2.5,
                lr: 1e-4,
                seconds: 0.125,
            },
            StepRecord {
                step: 2,
                loss: 0.1 + 0.2,
                lr: 1e-4,
                seconds: 0.5,
            },
        ],
    };
    let csv = trace.to_csv();
    assert!(csv.starts_with("step,loss,lr,seconds\n"));
    assert_eq!(LossTrace::parse_csv(&csv).unwrap(), trace);
    assert!(LossTrace::parse_csv("a,b\n").is_err());
    assert!(LossTrace::parse_csv("step,loss,lr,seconds\n1,2\n").is_err());
}

#[test]
fn non_finite_weights_abort_training() {
    let mut model = Model::new(tiny(AttentionKind::lasad()), 20).unwrap();
    model.params_mut().tensors_mut()[0].data_mut()[0] = f64::NAN;
    let grid = TokenGrid::new(4, 4, vec![0; 16], 0).unwrap();
    let mut trainer = Trainer::new(model, AdamWConfig::default(), 0, 1).unwrap();
    assert!(matches!(
        trainer.train_step(&[grid]),
        Err(ModelError::Diverged { .. })
    ));
}

#[test]
fn nano_model_gradients_match_finite_differences() {
    let cfg = ModelConfig {
        grid_width: 4,
        grid_height: 2,
        ..ModelConfig::nano()
    };
    let mut model = Model::new(cfg, 21).unwrap();
    spread(&mut model, 22);
    let grid = TokenGrid::new(2, 4, random_tokens(8, 16, 23), 1).unwrap();
    let inputs: Vec<crate::numerics::Tensor> = model.params().tensors().to_vec();
    let build = |tape: &mut Tape, vars: &[Var]| -> Result<Var, NumericsError> {
        model
            .loss_on_tape(tape, vars, std::slice::from_ref(&grid), &[Some(1)])
            .map_err(|e| NumericsError::Usage(e.to_string()))
    };
    let opts = GradCheckOptions {
        max_coords_per_input: Some(6),
        seed: 1,
    };
    let report = check_gradients(&inputs, build, &opts).unwrap();
    assert!(report.passes(1e-4), "{report:?}");
}
