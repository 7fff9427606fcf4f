use proptest::prelude::*;

use qnn_core::autograd::Tape;
use qnn_core::checkpoint;
use qnn_core::config::{FrontEndKind, LrRule, ModelConfig, StackKind};
use qnn_core::data::{generate_synthetic, SynthSpec, Utterance, UtteranceBatch};
use qnn_core::params::ParamStore;
use qnn_core::qlstm::AcousticModel;
use qnn_core::scalar::Precision;
use qnn_core::tensor::Tensor;
use qnn_core::train::{evaluate, frame_loss, train, Adam, LrSchedule, RunFiles};
use qnn_core::QnnError;

fn small(dim: usize, classes: usize) -> ModelConfig {
    ModelConfig {
        input_dim: dim,
        classes,
        r2h_size: 16,
        hidden: 8,
        depth: 1,
        epochs: 2,
        batch_size: 4,
        lr: 0.01,
        dropout: 0.0,
        precision: Precision::F64,
        seed: 5,
        ..ModelConfig::default()
    }
}

fn data(seed: u64) -> qnn_core::data::SynthData {
    generate_synthetic(&SynthSpec {
        dim: 8,
        train_utterances: 24,
        valid_utterances: 8,
        test_utterances: 8,
        seed,
        ..SynthSpec::default()
    })
    .unwrap()
}

fn ce(logits: Vec<f64>, rows: usize, targets: &[usize], valid: &[bool]) -> f64 {
    let tape = Tape::no_grad();
    let c = logits.len() / rows;
    let v = tape.constant(Tensor::new(vec![rows, c], logits).unwrap());
    v.cross_entropy(targets, valid).unwrap().value().data()[0]
}

#[test]
fn cross_entropy_examples() {
    let uniform = ce(vec![0.0; 12], 3, &[0, 1, 3], &[true; 3]);
    assert!((uniform - 4f64.ln()).abs() < 1e-12);

    let mut onehot = vec![0.0; 8];
    onehot[2] = 50.0;
    onehot[7] = 50.0;
    assert!(ce(onehot, 2, &[2, 3], &[true; 2]) < 1e-8);

    // a padded copy of a frame with a garbage label must not count
    let a = ce(vec![0.3, -1.0, 2.0], 1, &[1], &[true]);
    let b = ce(vec![0.3, -1.0, 2.0, 0.3, -1.0, 2.0], 2, &[1, 99], &[true, false]);
    assert_eq!(a, b);
}

#[test]
fn adam_descends_a_quadratic_bowl() {
    let mut store = ParamStore::new();
    let w0 = [0.6, -0.48, 0.64, 0.0];
    let w = store.add("w", Tensor::new(vec![4], w0.to_vec()).unwrap());
    let mut adam = Adam::new(&store, 0.05);
    for _ in 0..200 {
        let tape = Tape::new();
        let v = tape.param(&store, w);
        let loss = v.mul(v).unwrap().sum();
        tape.backward(loss, &mut store).unwrap();
        adam.step(&mut store).unwrap();
        store.zero_grad();
    }
    let norm = store.value(w).data().iter().map(|x| x * x).sum::<f64>().sqrt();
    assert!(norm < 1e-3, "{norm}");
}

#[test]
fn constant_logits_give_chance_error() {
    let d = generate_synthetic(&SynthSpec {
        dim: 8,
        train_utterances: 1,
        valid_utterances: 1,
        test_utterances: 400,
        seed: 2,
        ..SynthSpec::default()
    })
    .unwrap();
    let mut model = AcousticModel::<f64>::new(&small(8, 4)).unwrap();
    for name in ["output.w", "output.b"] {
        let id = model.store.find(name).unwrap();
        let shape = model.store.value(id).shape().to_vec();
        model.store.set_value(id, Tensor::zeros(shape)).unwrap();
    }
    let r = evaluate(&model, &d.test, 16).unwrap();
    assert!((r.loss - 4f64.ln()).abs() < 1e-12);
    assert!((r.frame_error_rate - 75.0).abs() <= 2.0, "{}", r.frame_error_rate);
}

#[test]
fn one_hot_features_with_scaled_identity_are_perfect() {
    let cfg = ModelConfig {
        front_end: FrontEndKind::Identity,
        stack: StackKind::Lstm,
        depth: 0,
        ..small(4, 4)
    };
    let mut model = AcousticModel::<f64>::new(&cfg).unwrap();
    let mut eye = vec![0.0; 16];
    for k in 0..4 {
        eye[k * 4 + k] = 10.0;
    }
    let w = model.store.find("output.w").unwrap();
    model.store.set_value(w, Tensor::new(vec![4, 4], eye).unwrap()).unwrap();
    let b = model.store.find("output.b").unwrap();
    model.store.set_value(b, Tensor::zeros(vec![4])).unwrap();
    let utts: Vec<Utterance> = (0..6)
        .map(|u| {
            let labels: Vec<u32> = (0..5 + u).map(|t| ((t * 3 + u) % 4) as u32).collect();
            let mut f = vec![0.0; labels.len() * 4];
            for (t, &l) in labels.iter().enumerate() {
                f[t * 4 + l as usize] = 1.0;
            }
            Utterance::new(format!("u{u}"), f, 4, labels).unwrap()
        })
        .collect();
    let r = evaluate(&model, &utts, 4).unwrap();
    assert_eq!(r.errors, 0);
    assert_eq!(r.frame_error_rate, 0.0);
}

#[test]
fn evaluation_is_batch_size_invariant() {
    let d = data(3);
    let model = AcousticModel::<f64>::new(&small(8, 4)).unwrap();
    let one = evaluate(&model, &d.test, 1).unwrap();
    for bs in [3, 8, 64] {
        let r = evaluate(&model, &d.test, bs).unwrap();
        assert!((r.loss - one.loss).abs() < 1e-12, "bs {bs}");
        assert_eq!((r.errors, r.frames), (one.errors, one.frames));
    }
}

#[test]
fn frame_loss_rejects_out_of_range_labels() {
    let u = Utterance::new("bad", vec![0.0; 8], 8, vec![7]).unwrap();
    let batch = UtteranceBatch::from_utterances(&[&u]).unwrap();
    let model = AcousticModel::<f64>::new(&small(8, 4)).unwrap();
    let tape = Tape::new();
    let logits = model.forward(&tape, &batch, None).unwrap();
    assert!(matches!(frame_loss(logits, &batch), Err(QnnError::Data { .. })));
}

#[test]
fn zero_epochs_writes_only_the_initial_checkpoint() {
    let d = data(4);
    let dir = tempfile::tempdir().unwrap();
    let mut model = AcousticModel::<f64>::new(&ModelConfig { epochs: 0, ..small(8, 4) }).unwrap();
    let out = train(&mut model, &d.train, &d.valid, Some(dir.path())).unwrap();
    assert!(out.reports.is_empty());
    assert_eq!(out.best_epoch, None);
    let files = RunFiles { dir: dir.path().to_path_buf() };
    assert!(files.init().exists());
    assert!(!files.last().exists());
    assert!(!files.best().exists());
    assert_eq!(std::fs::read_to_string(files.metrics()).unwrap(), "");
}

#[test]
fn checkpoint_roundtrip_reproduces_evaluation() {
    let d = data(5);
    let dir = tempfile::tempdir().unwrap();
    let cfg = ModelConfig { precision: Precision::F32, ..small(8, 4) };
    let mut model = AcousticModel::<f32>::new(&cfg).unwrap();
    let out = train(&mut model, &d.train, &d.valid, Some(dir.path())).unwrap();
    let files = RunFiles { dir: dir.path().to_path_buf() };
    let loaded = checkpoint::load::<f32>(&files.last()).unwrap();
    let a = evaluate(&model, &d.test, 4).unwrap();
    let b = evaluate(&loaded, &d.test, 4).unwrap();
    assert_eq!(a.loss.to_bits(), b.loss.to_bits());
    let v = evaluate(&loaded, &d.valid, 4).unwrap();
    assert_eq!(v.loss.to_bits(), out.reports.last().unwrap().val_loss.to_bits());
    assert!(matches!(checkpoint::load::<f64>(&files.last()), Err(QnnError::Config(_))));

    let bytes = std::fs::read(files.last()).unwrap();
    let mut bad = bytes.clone();
    bad[1] ^= 0xff;
    assert!(matches!(checkpoint::decode(&bad), Err(QnnError::Format { .. })));
    let mut long = bytes.clone();
    long.push(0);
    assert!(checkpoint::decode(&long).is_err());
    assert!(checkpoint::decode(&bytes[..bytes.len() - 3]).is_err());
}

#[test]
fn seeded_training_is_reproducible() {
    let d = data(6);
    let run = || {
        let mut m = AcousticModel::<f64>::new(&ModelConfig { dropout: 0.2, ..small(8, 4) }).unwrap();
        let mut out = train(&mut m, &d.train, &d.valid, None).unwrap();
        for r in &mut out.reports {
            r.seconds = 0.0;
        }
        (out, checkpoint::encode(&m))
    };
    assert_eq!(run(), run());
}

#[test]
fn divergence_reports_non_finite_loss() {
    let d = data(7);
    let cfg = ModelConfig { lr: 1e38, epochs: 3, precision: Precision::F32, ..small(8, 4) };
    let mut model = AcousticModel::<f32>::new(&cfg).unwrap();
    match train(&mut model, &d.train, &d.valid, None) {
        Err(QnnError::NonFiniteLoss { epoch, .. }) => assert!((1..=3).contains(&epoch)),
        other => panic!("{other:?}"),
    }
}

proptest! {
    #[test]
    fn schedule_only_halves(
        losses in prop::collection::vec(0.0f64..3.0, 1..30),
        literal in any::<bool>(),
        threshold in 0.0f64..0.5,
    ) {
        let rule = if literal { LrRule::Literal } else { LrRule::Stall };
        let mut s = LrSchedule::new(rule, threshold);
        let lr0 = 0.002;
        let mut lr = lr0;
        let mut k = 0;
        for v in losses {
            let next = s.update(v, lr);
            prop_assert!(next <= lr);
            if next < lr {
                k += 1;
            }
            prop_assert_eq!(next, lr0 * 0.5f64.powi(k));
            lr = next;
        }
    }
}
