use super::*;
use crate::testutil::{fd_check, random};
use proptest::prelude::*;

fn tiny(channels: usize, window_len: usize, classes: usize) -> ModelConfig {
    ModelConfig {
        filters: vec![2, 3, 2],
        fc: vec![8, 4],
        ..ModelConfig::new(channels, window_len, classes)
    }
}

fn batch(b: usize, cfg: &ModelConfig, seed: u64) -> Array {
    random(
        &[b, cfg.channels, cfg.window_len],
        &mut ChaCha8Rng::seed_from_u64(seed),
    )
}

fn eval_logits(model: &Model, params: &Parameters, x: &Array) -> Array {
    let mut tape = Tape::new();
    let vars = params.register(&mut tape).unwrap();
    let x = tape.constant(x.clone()).unwrap();
    let out = model.forward(&mut tape, params, &vars, x, Mode::Eval, 0).unwrap();
    tape.value(out.logits).clone()
}

#[test]
fn init_is_deterministic() {
    let model = Model::new(ModelConfig::new(6, 40, 4)).unwrap();
    assert_eq!(model.init(9).unwrap(), model.init(9).unwrap());
    assert_ne!(model.init(9).unwrap(), model.init(10).unwrap());
}

#[test]
fn batchnorm_scale_starts_at_one() {
    let params = Model::new(ModelConfig::new(6, 40, 4)).unwrap().init(1).unwrap();
    for i in 0..3 {
        let g = params.get(&format!("bn{i}.gamma")).unwrap();
        assert!(g.data().iter().all(|&v| v == 1.0));
        assert!(params.get(&format!("bn{i}.beta")).unwrap().data().iter().all(|&v| v == 0.0));
    }
}

#[test]
fn head_weight_shape_for_five_classes() {
    let params = Model::new(ModelConfig::new(6, 40, 5)).unwrap().init(1).unwrap();
    assert_eq!(params.get("head.weight").unwrap().shape(), &[4, 5]);
}

#[test]
fn weights_respect_fan_in_bound() {
    let params = Model::new(ModelConfig::new(6, 40, 4)).unwrap().init(3).unwrap();
    let w = params.get("conv1.weight").unwrap();
    let bound = (6.0f64 / (32.0 * 5.0)).sqrt();
    assert!(w.data().iter().all(|v| v.abs() <= bound));
}

#[test]
fn short_window_shapes_with_same_padding() {
    let cfg = ModelConfig::new(6, 25, 4);
    // 25 -> 12 -> 6 -> 3 positions, 64 filters
    assert_eq!(cfg.flatten_len().unwrap(), 3 * 64);
    let model = Model::new(cfg.clone()).unwrap();
    let params = model.init(0).unwrap();
    let p = model.predict(&params, &batch(5, &cfg, 1)).unwrap();
    assert_eq!(p.probs.shape(), &[5, 4]);
    assert_eq!(p.embedding.shape(), &[5, 4]);
}

#[test]
fn valid_padding_reports_minimum_window() {
    let cfg = ModelConfig {
        padding: Padding::Valid,
        ..ModelConfig::new(6, 25, 4)
    };
    // W -> (W-4)/2 three times must stay >= 1: W >= 36
    assert_eq!(cfg.min_window_len(), Some(36));
    let err = Model::new(cfg.clone()).unwrap_err().to_string();
    assert!(err.contains("36"), "{err}");
    let ok = ModelConfig {
        window_len: 36,
        ..cfg
    };
    assert_eq!(ok.flatten_len().unwrap(), 64);
}

#[test]
fn flatten_embedding_option() {
    let cfg = ModelConfig {
        embedding: EmbeddingLayer::Flatten,
        ..ModelConfig::new(3, 16, 2)
    };
    let model = Model::new(cfg.clone()).unwrap();
    let p = model.predict(&model.init(0).unwrap(), &batch(2, &cfg, 0)).unwrap();
    assert_eq!(p.embedding.shape(), &[2, cfg.flatten_len().unwrap()]);
}

#[test]
fn train_mode_rejects_single_sample() {
    let cfg = tiny(3, 12, 3);
    let model = Model::new(cfg.clone()).unwrap();
    let params = model.init(0).unwrap();
    let mut tape = Tape::new();
    let vars = params.register(&mut tape).unwrap();
    let x = tape.constant(batch(1, &cfg, 0)).unwrap();
    let err = model.forward(&mut tape, &params, &vars, x, Mode::Train, 0);
    assert!(matches!(err, Err(Error::Contract(_))));
}

#[test]
fn eval_is_deterministic_and_rows_sum_to_one() {
    let cfg = ModelConfig::new(6, 30, 4);
    let model = Model::new(cfg.clone()).unwrap();
    let params = model.init(4).unwrap();
    let x = batch(7, &cfg, 5);
    let a = model.predict(&params, &x).unwrap();
    assert_eq!(a, model.predict(&params, &x).unwrap());
    for r in 0..7 {
        assert!((a.probs.row(r).iter().sum::<f64>() - 1.0).abs() <= 1e-9);
    }
}

#[test]
fn running_stats_follow_momentum() {
    let cfg = tiny(3, 12, 3);
    let model = Model::new(cfg.clone()).unwrap();
    let mut params = model.init(0).unwrap();
    let mut tape = Tape::new();
    let vars = params.register(&mut tape).unwrap();
    let x = tape.constant(batch(4, &cfg, 2)).unwrap();
    let out = model.forward(&mut tape, &params, &vars, x, Mode::Train, 0).unwrap();
    let s = out.bn_stats[0].clone();
    params.update_running_stats(&out.bn_stats, 0.1);
    let m = params.get("bn0.running_mean").unwrap();
    let v = params.get("bn0.running_var").unwrap();
    let n = s.count as f64;
    for c in 0..2 {
        assert!((m.data()[c] - 0.1 * s.mean[c]).abs() < 1e-15);
        assert!((v.data()[c] - (0.9 + 0.1 * s.var[c] * n / (n - 1.0))).abs() < 1e-15);
    }
}

#[test]
fn cross_entropy_gradient_through_network() {
    let cfg = tiny(3, 12, 3);
    let model = Model::new(cfg.clone()).unwrap();
    let params = model.init(11).unwrap();
    let x = batch(4, &cfg, 12);
    let labels = [0usize, 2, 1, 2];
    let mut onehot = Array::zeros(&[4, 3]);
    for (i, &y) in labels.iter().enumerate() {
        onehot.data_mut()[i * 3 + y] = 1.0;
    }
    let build = |tape: &mut Tape, vs: &[Var]| -> Result<Var> {
        let vars = ParamVars::from_trainable(&params, vs)?;
        let xv = tape.constant(x.clone())?;
        let out = model.forward(tape, &params, &vars, xv, Mode::Train, 77)?;
        let lp = tape.log(out.probs)?;
        let picked = tape.mul_const(lp, onehot.clone())?;
        let s = tape.sum(picked)?;
        tape.scale(s, -0.25)
    };
    let inputs: Vec<Array> = params.trainable().map(|p| p.value.clone()).collect();
    let err = fd_check(&build, &inputs);
    assert!(err <= 1e-4, "relative error {err}");
}

#[test]
fn dropout_average_matches_eval_activations() {
    let cfg = ModelConfig {
        fc: vec![4],
        ..tiny(3, 12, 3)
    };
    let model = Model::new(cfg.clone()).unwrap();
    let mut params = model.init(5).unwrap();
    let x = batch(6, &cfg, 6);
    // Pin the running statistics to this batch so train and eval batchnorm agree.
    let mut tape = Tape::new();
    let vars = params.register(&mut tape).unwrap();
    let xv = tape.constant(x.clone()).unwrap();
    let out = model.forward(&mut tape, &params, &vars, xv, Mode::Train, 0).unwrap();
    for (i, s) in out.bn_stats.iter().enumerate() {
        let m = params.index(&format!("bn{i}.running_mean"));
        params.entries[m].value = Array::from_vec(s.mean.clone());
        let v = params.index(&format!("bn{i}.running_var"));
        params.entries[v].value = Array::from_vec(s.var.clone());
    }
    let expected = eval_logits(&model, &params, &x);

    let n = 2000;
    let mut sum = vec![0.0; expected.len()];
    let mut sq = vec![0.0; expected.len()];
    for seed in 0..n {
        let mut tape = Tape::new();
        let vars = params.register(&mut tape).unwrap();
        let xv = tape.constant(x.clone()).unwrap();
        let out = model
            .forward(&mut tape, &params, &vars, xv, Mode::Train, seed)
            .unwrap();
        for (i, &v) in tape.value(out.logits).data().iter().enumerate() {
            sum[i] += v;
            sq[i] += v * v;
        }
    }
    for i in 0..expected.len() {
        let mean = sum[i] / n as f64;
        let sd = (sq[i] / n as f64 - mean * mean).max(0.0).sqrt();
        let se = sd / (n as f64).sqrt();
        assert!(
            (mean - expected.data()[i]).abs() <= 3.0 * se + 1e-12,
            "entry {i}: {mean} vs {}",
            expected.data()[i]
        );
    }
}

#[test]
fn dropout_mask_scaling() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let m = dropout_mask(&[100, 100], 0.3, &mut rng);
    let kept = m.data().iter().filter(|&&v| v > 0.0).count() as f64 / 1e4;
    assert!((kept - 0.7).abs() < 0.02);
    assert!(m.data().iter().all(|&v| v == 0.0 || (v - 1.0 / 0.7).abs() < 1e-15));
    assert!((m.mean() - 1.0).abs() < 0.03);
}

#[test]
fn argmax_ties_go_low() {
    assert_eq!(argmax(&[0.2, 0.4, 0.4]), 1);
    assert_eq!(argmax(&[0.5, 0.5]), 0);
}

fn sample_checkpoint() -> Checkpoint {
    let cfg = tiny(3, 12, 3);
    let params = Model::new(cfg.clone()).unwrap().init(21).unwrap();
    let mut extra = serde_json::Map::new();
    extra.insert("epoch".into(), 4.into());
    Checkpoint {
        config: cfg,
        seed: 21,
        extra,
        params: Some(params),
    }
}

#[test]
fn checkpoint_round_trip() {
    let ckpt = sample_checkpoint();
    let bytes = encode_checkpoint(&ckpt).unwrap();
    assert_eq!(&bytes[..4], b"HDAC");
    assert_eq!(decode_checkpoint(&bytes).unwrap(), ckpt);
}

#[test]
fn checkpoint_rejects_damage() {
    let bytes = encode_checkpoint(&sample_checkpoint()).unwrap();
    let mut flipped = bytes.clone();
    flipped[40] ^= 1;
    assert!(matches!(decode_checkpoint(&flipped), Err(Error::Format { .. })));
    assert!(matches!(
        decode_checkpoint(&bytes[..bytes.len() - 1]),
        Err(Error::Format { .. })
    ));
    let mut future = bytes.clone();
    future[4] = 9;
    match decode_checkpoint(&future) {
        Err(Error::Format { version, .. }) => assert_eq!(version, 9),
        other => panic!("{other:?}"),
    }
    assert!(decode_checkpoint(b"nope").is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn eval_outputs_follow_batch_permutation(seed in any::<u64>(), rot in 1usize..5) {
        let cfg = tiny(3, 12, 3);
        let model = Model::new(cfg.clone()).unwrap();
        let params = model.init(seed).unwrap();
        let x = batch(5, &cfg, seed ^ 1);
        let perm: Vec<usize> = (0..5).map(|i| (i + rot) % 5).collect();
        let a = model.predict(&params, &x).unwrap();
        let per = 3 * 12;
        let mut shuffled = Vec::new();
        for &p in &perm {
            shuffled.extend_from_slice(&x.data()[p * per..(p + 1) * per]);
        }
        let xp = Array::new(vec![5, 3, 12], shuffled).unwrap();
        let b = model.predict(&params, &xp).unwrap();
        for (i, &p) in perm.iter().enumerate() {
            prop_assert_eq!(b.probs.row(i), a.probs.row(p));
            prop_assert_eq!(b.embedding.row(i), a.embedding.row(p));
        }
    }

    #[test]
    fn decode_never_panics(bytes in proptest::collection::vec(any::<u8>(), 0..256)) {
        let _ = decode_checkpoint(&bytes);
    }
}
