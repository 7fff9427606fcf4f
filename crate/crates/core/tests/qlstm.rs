use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use qnn_core::autograd::{Tape, Var};
use qnn_core::config::{FrontEndKind, MergeRule, ModelConfig, StackKind};
use qnn_core::params::ParamStore;
use qnn_core::qlstm::{AcousticModel, BiLayer, Cell, FrontEnd, LSTMCell, QLSTMCell};
use qnn_core::scalar::Precision;
use qnn_core::tensor::Tensor;

fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

fn random(rng: &mut ChaCha8Rng, shape: Vec<usize>, scale: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-scale..scale)).collect()).unwrap()
}

fn randomise(store: &mut ParamStore<f64>, rng: &mut ChaCha8Rng, scale: f64) {
    let ids: Vec<_> = store.iter().map(|(id, _)| id).collect();
    for id in ids {
        let shape = store.value(id).shape().to_vec();
        store.set_value(id, random(rng, shape, scale)).unwrap();
    }
}

fn quat_cell(in_q: usize, hidden_q: usize, seed: u64) -> (ParamStore<f64>, Cell) {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cell = QLSTMCell::new(&mut store, "c", in_q, hidden_q, &mut rng);
    (store, Cell::Quat(cell))
}

fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            for j in 0..n {
                out[i * n + j] += a[i * k + p] * b[p * n + j];
            }
        }
    }
    out
}

#[test]
fn step_follows_gate_equations_and_ranges() {
    let (mut store, cell) = quat_cell(2, 3, 1);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    randomise(&mut store, &mut rng, 1.0);
    let (b, m, n) = (4, cell.input_width(), cell.hidden_width());
    let x = random(&mut rng, vec![b, m], 2.0);
    let h0 = random(&mut rng, vec![b, n], 1.0);
    let c0 = random(&mut rng, vec![b, n], 3.0);
    let tape = Tape::no_grad();
    let (h, c) = cell
        .step(&tape, &store, tape.constant(x.clone()), tape.constant(h0.clone()), tape.constant(c0.clone()))
        .unwrap();

    let wx = cell.input_matrix(&tape, &store).unwrap().value();
    let rh = cell.recurrent_matrix(&tape, &store).unwrap().value();
    let bias = cell.bias(&tape, &store).unwrap().value();
    let px = matmul(x.data(), wx.data(), b, m, 4 * n);
    let ph = matmul(h0.data(), rh.data(), b, n, 4 * n);
    for r in 0..b {
        for k in 0..n {
            let pre = |g: usize| px[r * 4 * n + g * n + k] + ph[r * 4 * n + g * n + k] + bias.data()[g * n + k];
            let (f, i, g, o) = (sigmoid(pre(0)), sigmoid(pre(1)), pre(2).tanh(), sigmoid(pre(3)));
            for gate in [f, i, o] {
                assert!(gate > 0.0 && gate < 1.0);
            }
            let want_c = f * c0.data()[r * n + k] + i * g;
            let want_h = o * want_c.tanh();
            let (got_h, got_c) = (h.value().data()[r * n + k], c.value().data()[r * n + k]);
            assert!((got_c - want_c).abs() < 1e-12);
            assert!((got_h - want_h).abs() < 1e-12);
            assert!(got_h > -1.0 && got_h < 1.0);
        }
    }
}

#[test]
fn forced_gates_conserve_cell_state() {
    let (mut store, cell) = quat_cell(2, 2, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    randomise(&mut store, &mut rng, 1.0);
    let Cell::Quat(q) = &cell else { unreachable!() };
    store.set_value(q.b[0], Tensor::full(vec![8], 50.0)).unwrap();
    store.set_value(q.b[1], Tensor::full(vec![8], -50.0)).unwrap();
    let c0: Vec<f64> = (0..3 * 8).map(|_| rng.random_range(0.1..2.0) * if rng.random::<bool>() { 1.0 } else { -1.0 }).collect();
    let c0 = Tensor::new(vec![3, 8], c0).unwrap();
    let tape = Tape::no_grad();
    let (_, c) = cell
        .step(
            &tape,
            &store,
            tape.constant(random(&mut rng, vec![3, 8], 1.0)),
            tape.constant(random(&mut rng, vec![3, 8], 1.0)),
            tape.constant(c0.clone()),
        )
        .unwrap();
    assert_eq!(c.value().data(), c0.data());
}

#[test]
fn zero_weights_halve_cell_state() {
    let (mut store, cell) = quat_cell(1, 2, 5);
    let ids: Vec<_> = store.iter().map(|(id, _)| id).collect();
    for id in ids {
        let shape = store.value(id).shape().to_vec();
        store.set_value(id, Tensor::zeros(shape)).unwrap();
    }
    let v: Vec<f64> = (0..8).map(|i| i as f64 - 3.5).collect();
    let tape = Tape::no_grad();
    let (h, c) = cell
        .step(
            &tape,
            &store,
            tape.constant(Tensor::full(vec![1, 4], 0.9)),
            tape.constant(Tensor::full(vec![1, 8], -0.4)),
            tape.constant(Tensor::new(vec![1, 8], v.clone()).unwrap()),
        )
        .unwrap();
    for (k, &vk) in v.iter().enumerate() {
        assert!((c.value().data()[k] - 0.5 * vk).abs() < 1e-15);
        assert!((h.value().data()[k] - 0.5 * (0.5 * vk).tanh()).abs() < 1e-15);
    }
}

fn shared_pair(seed: u64) -> (ParamStore<f64>, BiLayer) {
    let (mut store, cell) = quat_cell(2, 2, seed);
    randomise(&mut store, &mut ChaCha8Rng::seed_from_u64(seed + 100), 0.8);
    let layer = BiLayer {
        forward: cell.clone(),
        backward: cell,
        merge: MergeRule::Sum,
    };
    (store, layer)
}

#[test]
fn palindromic_input_gives_palindromic_output() {
    let (store, layer) = shared_pair(6);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (t, b, d) = (7, 2, 8);
    let half = random(&mut rng, vec![4, b, d], 1.0);
    let mut data = vec![0.0; t * b * d];
    for s in 0..t {
        let src = s.min(t - 1 - s);
        data[s * b * d..(s + 1) * b * d].copy_from_slice(&half.data()[src * b * d..(src + 1) * b * d]);
    }
    let tape = Tape::no_grad();
    let y = layer
        .forward(&tape, &store, tape.constant(Tensor::new(vec![t, b, d], data).unwrap()), &[t, t])
        .unwrap()
        .value();
    let frame = |s: usize| &y.data()[s * b * d..(s + 1) * b * d];
    for s in 0..t {
        assert_eq!(frame(s), frame(t - 1 - s));
    }
}

#[test]
fn single_frame_is_sum_of_both_directions() {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let fwd = Cell::Quat(QLSTMCell::new(&mut store, "f", 2, 3, &mut rng));
    let bwd = Cell::Quat(QLSTMCell::new(&mut store, "b", 2, 3, &mut rng));
    randomise(&mut store, &mut rng, 1.0);
    let layer = BiLayer { forward: fwd.clone(), backward: bwd.clone(), merge: MergeRule::Sum };
    let x = random(&mut rng, vec![1, 2, 8], 1.0);
    let tape = Tape::no_grad();
    let y = layer.forward(&tape, &store, tape.constant(x.clone()), &[1, 1]).unwrap().value();
    let x2 = tape.constant(x.reshaped(vec![2, 8]).unwrap());
    let zero = tape.constant(Tensor::zeros(vec![2, 12]));
    let (hf, _) = fwd.step(&tape, &store, x2, zero, zero).unwrap();
    let (hb, _) = bwd.step(&tape, &store, x2, zero, zero).unwrap();
    let want = hf.add(hb).unwrap().value();
    for (a, b) in y.data().iter().zip(want.data()) {
        assert!((a - b).abs() < 1e-15);
    }
}

#[test]
fn zero_weight_layer_outputs_zero() {
    let (mut store, layer) = shared_pair(9);
    let ids: Vec<_> = store.iter().map(|(id, _)| id).collect();
    for id in ids {
        let shape = store.value(id).shape().to_vec();
        store.set_value(id, Tensor::zeros(shape)).unwrap();
    }
    let tape = Tape::no_grad();
    let x = random(&mut ChaCha8Rng::seed_from_u64(1), vec![5, 3, 8], 4.0);
    let y = layer.forward(&tape, &store, tape.constant(x), &[5, 2, 4]).unwrap().value();
    assert!(y.data().iter().all(|&v| v == 0.0));
}

fn toy(front: FrontEndKind, stack: StackKind) -> ModelConfig {
    ModelConfig {
        front_end: front,
        stack,
        input_dim: 8,
        r2h_size: 8,
        hidden: 8,
        depth: 2,
        classes: 3,
        precision: Precision::F64,
        seed: 31,
        ..ModelConfig::default()
    }
}

/// Logits and parameter gradients of the masked loss, for features padded
/// with `extra` garbage frames.
fn run_padded(model: &mut AcousticModel<f64>, base: &Tensor<f64>, lengths: &[usize], extra: usize) -> (Vec<f64>, Vec<Vec<f64>>) {
    let (t, b, d) = (base.shape()[0], base.shape()[1], base.shape()[2]);
    let mut rng = ChaCha8Rng::seed_from_u64(extra as u64);
    let mut data = base.data().to_vec();
    data.extend((0..extra * b * d).map(|_| rng.random_range(-5.0..5.0)));
    // garbage also past each sequence's own length
    for (bi, &len) in lengths.iter().enumerate() {
        for s in len..t {
            for k in 0..d {
                data[(s * b + bi) * d + k] = rng.random_range(-5.0..5.0);
            }
        }
    }
    let steps = t + extra;
    let tape = Tape::new();
    let x = tape.constant(Tensor::new(vec![steps, b, d], data).unwrap());
    let logits = model.forward_features(&tape, x, lengths, None).unwrap();
    let c = model.config.classes;
    let mut valid = vec![false; steps * b];
    let mut targets = vec![0usize; steps * b];
    for (bi, &len) in lengths.iter().enumerate() {
        for s in 0..len {
            valid[s * b + bi] = true;
            targets[s * b + bi] = (s + bi) % c;
        }
    }
    let loss = logits.cross_entropy(&targets, &valid).unwrap();
    model.store.zero_grad();
    tape.backward(loss, &mut model.store).unwrap();
    let lv = logits.value();
    let mut kept = Vec::new();
    for (bi, &len) in lengths.iter().enumerate() {
        for s in 0..len {
            kept.extend_from_slice(&lv.data()[(s * b + bi) * c..(s * b + bi + 1) * c]);
        }
    }
    let grads = model.store.iter().map(|(id, _)| model.store.grad(id).unwrap().to_vec()).collect();
    (kept, grads)
}

#[test]
fn padding_changes_nothing_on_valid_frames() {
    for (front, stack) in [(FrontEndKind::R2HNorm, StackKind::Qlstm), (FrontEndKind::Identity, StackKind::Lstm)] {
        let mut model = AcousticModel::<f64>::new(&toy(front, stack)).unwrap();
        let base = random(&mut ChaCha8Rng::seed_from_u64(2), vec![6, 3, 8], 1.0);
        let lengths = [6, 4, 2];
        let (l0, g0) = run_padded(&mut model, &base, &lengths, 0);
        let (l1, g1) = run_padded(&mut model, &base, &lengths, 5);
        for (a, b) in l0.iter().zip(&l1) {
            assert!((a - b).abs() < 1e-6);
        }
        for (ga, gb) in g0.iter().zip(&g1) {
            for (a, b) in ga.iter().zip(gb) {
                assert!((a - b).abs() < 1e-6);
            }
        }
    }
}

#[test]
fn seeded_models_give_identical_logits() {
    let cfg = ModelConfig { precision: Precision::F32, ..toy(FrontEndKind::R2HNorm, StackKind::Qlstm) };
    let logits = || {
        let model = AcousticModel::<f32>::new(&cfg).unwrap();
        let x = Tensor::<f32>::from_f64(vec![4, 2, 8], &(0..64).map(|i| (i as f64 * 0.37).sin()).collect::<Vec<_>>()).unwrap();
        let tape = Tape::no_grad();
        let y = model.forward_features(&tape, tape.constant(x), &[4, 3], None).unwrap().value();
        y.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
    };
    assert_eq!(logits(), logits());
}

#[test]
fn naive_front_feeds_ten_quaternions() {
    let cfg = ModelConfig { input_dim: 40, ..toy(FrontEndKind::NaiveQuat, StackKind::Qlstm) };
    let model = AcousticModel::<f64>::new(&cfg).unwrap();
    assert!(matches!(model.front, FrontEnd::NaiveQuat { width: 40, .. }));
    let Cell::Quat(cell) = &model.layers[0].forward else { panic!("quaternion stack expected") };
    assert_eq!(cell.in_q, 10);
}

#[test]
fn identity_lstm_is_the_real_baseline() {
    let model = AcousticModel::<f64>::new(&toy(FrontEndKind::Identity, StackKind::Lstm)).unwrap();
    assert!(matches!(model.front, FrontEnd::Identity));
    assert!(model.store.iter().all(|(_, p)| !p.name.starts_with("front")));
    for layer in &model.layers {
        assert!(matches!(layer.forward, Cell::Real(_)) && matches!(layer.backward, Cell::Real(_)));
    }
    let mut store = ParamStore::<f64>::new();
    let (m, n) = (6, 5);
    let cell = LSTMCell::new(&mut store, "l", m, n, &mut ChaCha8Rng::seed_from_u64(0));
    assert_eq!(store.num_scalars(), 4 * (n * m + n * n + n));
    assert_eq!(Cell::Real(cell).num_weights() + 4 * n, store.num_scalars());
}

#[test]
fn softmax_of_single_frame_sums_to_one() {
    let cfg = ModelConfig { classes: 1, ..toy(FrontEndKind::R2H, StackKind::Qlstm) };
    let model = AcousticModel::<f64>::new(&cfg).unwrap();
    let tape = Tape::no_grad();
    let y = model.forward_features(&tape, tape.constant(Tensor::full(vec![1, 1, 8], 0.3)), &[1], None).unwrap();
    // with one class, the loss on it is -log softmax = 0
    let ce: Var<'_, f64> = y.cross_entropy(&[0], &[true]).unwrap();
    assert!(ce.value().data()[0].abs() < 1e-12);
}
