//! Quaternion and real LSTM cells, bidirectional stacks and the full
//! frame classifier.
//!
//! Gate order everywhere is `f, i, c, o`. Gate pre-activations of all four
//! gates are produced by one fused matmul and sliced afterwards.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autograd::{Tape, Var};
use crate::config::{FrontEndKind, MergeRule, ModelConfig, StackKind};
use crate::data::{naive_quat_columns, UtteranceBatch};
use crate::error::{QnnError, Result};
use crate::layers::{apply_affine, glorot_uniform, quaternion_dropout, DropoutGranularity, QuatLinear, R2HEncoder, RealLinear};
use crate::params::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

const GATES: [&str; 4] = ["f", "i", "c", "o"];

/// LSTM cell whose input and recurrent maps are quaternion-valued.
#[derive(Debug, Clone)]
pub struct QLSTMCell {
    pub in_q: usize,
    pub hidden_q: usize,
    pub w: [QuatLinear; 4],
    pub r: [QuatLinear; 4],
    pub b: [ParamId; 4],
}

impl QLSTMCell {
    pub fn new<T: Scalar, R: rand::Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        in_q: usize,
        hidden_q: usize,
        rng: &mut R,
    ) -> Self {
        let w = GATES.map(|g| QuatLinear::new(store, &format!("{name}.w_{g}"), in_q, hidden_q, false, rng));
        let r = GATES.map(|g| QuatLinear::new(store, &format!("{name}.r_{g}"), hidden_q, hidden_q, false, rng));
        let b = GATES.map(|g| store.add(format!("{name}.b_{g}"), Tensor::zeros(vec![4 * hidden_q])));
        QLSTMCell { in_q, hidden_q, w, r, b }
    }
}

/// Standard real LSTM cell. Gate matrices are stored `out × in`.
#[derive(Debug, Clone)]
pub struct LSTMCell {
    pub input: usize,
    pub hidden: usize,
    pub w: [ParamId; 4],
    pub r: [ParamId; 4],
    pub b: [ParamId; 4],
}

impl LSTMCell {
    pub fn new<T: Scalar, R: rand::Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        input: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Self {
        let w = GATES.map(|g| store.add(format!("{name}.w_{g}"), glorot_uniform(input, hidden, rng)));
        let r = GATES.map(|g| store.add(format!("{name}.r_{g}"), glorot_uniform(hidden, hidden, rng)));
        let b = GATES.map(|g| store.add(format!("{name}.b_{g}"), Tensor::zeros(vec![hidden])));
        LSTMCell { input, hidden, w, r, b }
    }
}

#[derive(Debug, Clone)]
pub enum Cell {
    Quat(QLSTMCell),
    Real(LSTMCell),
}

impl Cell {
    pub fn input_width(&self) -> usize {
        match self {
            Cell::Quat(c) => 4 * c.in_q,
            Cell::Real(c) => c.input,
        }
    }

    pub fn hidden_width(&self) -> usize {
        match self {
            Cell::Quat(c) => 4 * c.hidden_q,
            Cell::Real(c) => c.hidden,
        }
    }

    pub fn num_weights(&self) -> usize {
        match self {
            Cell::Quat(c) => c.w.iter().chain(&c.r).map(|l| l.num_weights()).sum(),
            Cell::Real(c) => 4 * (c.input * c.hidden + c.hidden * c.hidden),
        }
    }

    pub fn num_biases(&self) -> usize {
        4 * self.hidden_width()
    }

    /// Fused `[input × 4·hidden]` map of all four gates.
    pub fn input_matrix<'t, T: Scalar>(&self, tape: &'t Tape<T>, store: &ParamStore<T>) -> Result<Var<'t, T>> {
        self.fused(tape, store, true)
    }

    /// Fused `[hidden × 4·hidden]` recurrent map.
    pub fn recurrent_matrix<'t, T: Scalar>(&self, tape: &'t Tape<T>, store: &ParamStore<T>) -> Result<Var<'t, T>> {
        self.fused(tape, store, false)
    }

    fn fused<'t, T: Scalar>(&self, tape: &'t Tape<T>, store: &ParamStore<T>, input: bool) -> Result<Var<'t, T>> {
        let parts: Vec<Var<'t, T>> = match self {
            Cell::Quat(c) => {
                let layers = if input { &c.w } else { &c.r };
                layers.iter().map(|l| l.composite(tape, store)).collect::<Result<_>>()?
            }
            Cell::Real(c) => {
                let ids = if input { &c.w } else { &c.r };
                ids.iter().map(|&id| tape.param(store, id).transpose()).collect::<Result<_>>()?
            }
        };
        Var::concat(&parts, 1)
    }

    pub fn bias<'t, T: Scalar>(&self, tape: &'t Tape<T>, store: &ParamStore<T>) -> Result<Var<'t, T>> {
        let ids = match self {
            Cell::Quat(c) => &c.b,
            Cell::Real(c) => &c.b,
        };
        let parts: Vec<Var<'t, T>> = ids.iter().map(|&id| tape.param(store, id)).collect();
        Var::concat(&parts, 0)
    }

    /// One time step on `x_t: [B × input]`, returning `(h_t, c_t)`.
    pub fn step<'t, T: Scalar>(
        &self,
        tape: &'t Tape<T>,
        store: &ParamStore<T>,
        x_t: Var<'t, T>,
        h_prev: Var<'t, T>,
        c_prev: Var<'t, T>,
    ) -> Result<(Var<'t, T>, Var<'t, T>)> {
        let n = self.hidden_width();
        for (v, w) in [(h_prev, n), (c_prev, n)] {
            if v.shape().len() != 2 || v.shape()[1] != w || v.shape()[0] != x_t.shape()[0] {
                return Err(QnnError::dim("lstm_step", &v.shape(), &[x_t.shape()[0], w]));
            }
        }
        let pre_x = apply_affine(x_t, self.input_matrix(tape, store)?, Some(self.bias(tape, store)?), self.input_width(), "lstm_step")?;
        let pre = pre_x.add(h_prev.matmul(self.recurrent_matrix(tape, store)?)?)?;
        gates(pre, c_prev, n)
    }
}

/// `f, i, o = σ(·)`, `g = tanh(·)`, `c = f⊙c_prev + i⊙g`, `h = o⊙tanh(c)`.
fn gates<'t, T: Scalar>(pre: Var<'t, T>, c_prev: Var<'t, T>, n: usize) -> Result<(Var<'t, T>, Var<'t, T>)> {
    let f = pre.slice(1, 0, n)?.sigmoid();
    let i = pre.slice(1, n, n)?.sigmoid();
    let g = pre.slice(1, 2 * n, n)?.tanh();
    let o = pre.slice(1, 3 * n, n)?.sigmoid();
    let c = f.mul(c_prev)?.add(i.mul(g)?)?;
    let h = o.mul(c.tanh())?;
    Ok((h, c))
}

/// Runs `cell` over a time-major `[T, B, input]` sequence from zero initial
/// state and returns all hidden states `[T, B, hidden]`.
pub fn run_direction<'t, T: Scalar>(
    cell: &Cell,
    tape: &'t Tape<T>,
    store: &ParamStore<T>,
    seq: Var<'t, T>,
) -> Result<Var<'t, T>> {
    let shape = seq.shape();
    if shape.len() != 3 || shape[2] != cell.input_width() {
        return Err(QnnError::dim("run_direction", &shape, &[0, 0, cell.input_width()]));
    }
    let (steps, b, n) = (shape[0], shape[1], cell.hidden_width());
    let proj = apply_affine(seq, cell.input_matrix(tape, store)?, Some(cell.bias(tape, store)?), cell.input_width(), "run_direction")?;
    let rec = cell.recurrent_matrix(tape, store)?;
    let mut h = tape.constant(Tensor::zeros(vec![b, n]));
    let mut c = tape.constant(Tensor::zeros(vec![b, n]));
    let mut outputs = Vec::with_capacity(steps);
    for t in 0..steps {
        let pre = proj.slice(0, t, 1)?.reshape(vec![b, 4 * n])?.add(h.matmul(rec)?)?;
        let (h_t, c_t) = gates(pre, c, n)?;
        outputs.push(h_t.reshape(vec![1, b, n])?);
        h = h_t;
        c = c_t;
    }
    Var::concat(&outputs, 0)
}

/// `[T, B, width]` 0/1 constant marking the first `lengths[b]` frames.
fn mask_var<'t, T: Scalar>(tape: &'t Tape<T>, steps: usize, lengths: &[usize], width: usize) -> Var<'t, T> {
    let b = lengths.len();
    let mut data = vec![T::zero(); steps * b * width];
    for t in 0..steps {
        for (bi, &len) in lengths.iter().enumerate() {
            if t < len {
                let at = (t * b + bi) * width;
                data[at..at + width].fill(T::one());
            }
        }
    }
    tape.constant(Tensor::new(vec![steps, b, width], data).expect("sized"))
}

/// Forward and backward directions merged per time step. The backward
/// direction runs over the reversed valid prefix of each sequence; padded
/// frames come out as zeros.
#[derive(Debug, Clone)]
pub struct BiLayer {
    pub forward: Cell,
    pub backward: Cell,
    pub merge: MergeRule,
}

impl BiLayer {
    pub fn out_width(&self) -> usize {
        match self.merge {
            MergeRule::Sum => self.forward.hidden_width(),
            MergeRule::Concat => 2 * self.forward.hidden_width(),
        }
    }

    pub fn is_quaternion(&self) -> bool {
        matches!(self.forward, Cell::Quat(_))
    }

    pub fn forward<'t, T: Scalar>(
        &self,
        tape: &'t Tape<T>,
        store: &ParamStore<T>,
        seq: Var<'t, T>,
        lengths: &[usize],
    ) -> Result<Var<'t, T>> {
        let shape = seq.shape();
        if shape.len() != 3 || shape[1] != lengths.len() {
            return Err(QnnError::dim("bidirectional_forward", &shape, &[0, lengths.len(), 0]));
        }
        let steps = shape[0];
        let fwd = run_direction(&self.forward, tape, store, seq)?;
        let rev = seq.reverse_time(Some(lengths))?;
        let bwd = run_direction(&self.backward, tape, store, rev)?.reverse_time(Some(lengths))?;
        let merged = match self.merge {
            MergeRule::Sum => fwd.add(bwd)?,
            MergeRule::Concat if self.is_quaternion() => {
                // keep quarter-block layout: r parts of both directions, then x, ...
                let q = self.forward.hidden_width() / 4;
                let mut parts = Vec::with_capacity(8);
                for comp in 0..4 {
                    parts.push(fwd.slice(2, comp * q, q)?);
                    parts.push(bwd.slice(2, comp * q, q)?);
                }
                Var::concat(&parts, 2)?
            }
            MergeRule::Concat => Var::concat(&[fwd, bwd], 2)?,
        };
        if lengths.iter().all(|&l| l == steps) {
            Ok(merged)
        } else {
            merged.mul(mask_var(tape, steps, lengths, self.out_width()))
        }
    }
}

#[derive(Debug, Clone)]
pub enum FrontEnd {
    R2H(R2HEncoder),
    /// Column `j` of the input goes to output column `columns[j]`; the
    /// remaining columns are zero padding.
    NaiveQuat { columns: Vec<usize>, width: usize },
    Identity,
}

/// Front-end, bidirectional recurrent stack and a real output layer.
#[derive(Debug, Clone)]
pub struct AcousticModel<T: Scalar> {
    pub config: ModelConfig,
    pub store: ParamStore<T>,
    pub front: FrontEnd,
    pub layers: Vec<BiLayer>,
    pub output: RealLinear,
}

impl<T: Scalar> AcousticModel<T> {
    /// Builds and initialises a model. The config precision must match `T`.
    pub fn new(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        if config.precision != T::PRECISION {
            return Err(QnnError::config(format!(
                "config precision {} does not match model type {}",
                config.precision.as_str(),
                T::PRECISION.as_str()
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(0);
        let mut store = ParamStore::new();
        let front = match config.front_end {
            FrontEndKind::R2HNorm | FrontEndKind::R2H => FrontEnd::R2H(R2HEncoder::new(
                &mut store,
                "front",
                config.input_dim,
                config.r2h_size,
                config.r2h_activation,
                config.front_end == FrontEndKind::R2HNorm,
                config.norm_eps,
                &mut rng,
            )?),
            FrontEndKind::NaiveQuat => FrontEnd::NaiveQuat {
                columns: naive_quat_columns(config.input_dim),
                width: config.front_width(),
            },
            FrontEndKind::Identity => FrontEnd::Identity,
        };
        let mut layers = Vec::with_capacity(config.depth);
        let mut width = config.front_width();
        for l in 0..config.depth {
            let mut make = |dir: &str, store: &mut ParamStore<T>| match config.stack {
                StackKind::Qlstm => Cell::Quat(QLSTMCell::new(store, &format!("layer{l}.{dir}"), width / 4, config.hidden / 4, &mut rng)),
                StackKind::Lstm => Cell::Real(LSTMCell::new(store, &format!("layer{l}.{dir}"), width, config.hidden, &mut rng)),
            };
            let forward = make("fwd", &mut store);
            let backward = make("bwd", &mut store);
            let layer = BiLayer {
                forward,
                backward,
                merge: config.merge,
            };
            width = layer.out_width();
            layers.push(layer);
        }
        let output = RealLinear::new(&mut store, "output", width, config.classes, true, &mut rng);
        Ok(AcousticModel {
            config: config.clone(),
            store,
            front,
            layers,
            output,
        })
    }

    pub fn num_params(&self) -> usize {
        self.store.num_scalars()
    }

    /// Logits `[T, B, C]` for a batch. Dropout is active iff `dropout` is
    /// given.
    pub fn forward<'t>(&self, tape: &'t Tape<T>, batch: &UtteranceBatch, dropout: Option<&mut ChaCha8Rng>) -> Result<Var<'t, T>> {
        let b = batch.batch_size();
        let feats = Tensor::new(
            vec![batch.t_max, b, batch.dim],
            batch.features.iter().map(|&v| T::lit(v as f64)).collect(),
        )?;
        self.forward_features(tape, tape.constant(feats), &batch.lengths, dropout)
    }

    pub fn forward_features<'t>(
        &self,
        tape: &'t Tape<T>,
        features: Var<'t, T>,
        lengths: &[usize],
        mut dropout: Option<&mut ChaCha8Rng>,
    ) -> Result<Var<'t, T>> {
        let shape = features.shape();
        if shape.len() != 3 || shape[2] != self.config.input_dim || shape[1] != lengths.len() {
            return Err(QnnError::dim("model_forward", &shape, &[0, lengths.len(), self.config.input_dim]));
        }
        let p = self.config.dropout;
        let mut x = match &self.front {
            FrontEnd::R2H(enc) => {
                let y = enc.forward(tape, &self.store, features)?;
                match dropout.as_deref_mut() {
                    Some(rng) => quaternion_dropout(y, p, true, self.config.dropout_granularity, rng)?,
                    None => y,
                }
            }
            FrontEnd::NaiveQuat { columns, width } => {
                let mut perm = vec![T::zero(); columns.len() * width];
                for (j, &col) in columns.iter().enumerate() {
                    perm[j * width + col] = T::one();
                }
                let perm = tape.constant(Tensor::new(vec![columns.len(), *width], perm)?);
                apply_affine(features, perm, None, columns.len(), "naive_quat")?
            }
            FrontEnd::Identity => features,
        };
        for layer in &self.layers {
            x = layer.forward(tape, &self.store, x, lengths)?;
            if let Some(rng) = dropout.as_deref_mut() {
                let granularity = if layer.is_quaternion() {
                    self.config.dropout_granularity
                } else {
                    DropoutGranularity::Component
                };
                x = quaternion_dropout(x, p, true, granularity, rng)?;
            }
        }
        self.output.forward(tape, &self.store, x)
    }
}

/// Symbolic trainable-parameter counts of a configuration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct ParamBreakdown {
    pub front_weights: usize,
    pub front_biases: usize,
    pub recurrent_weights: usize,
    pub recurrent_biases: usize,
    pub output_weights: usize,
    pub output_biases: usize,
}

impl ParamBreakdown {
    pub fn from_config(c: &ModelConfig) -> Self {
        let (front_weights, front_biases) = match c.front_end {
            FrontEndKind::R2HNorm | FrontEndKind::R2H => (c.input_dim * c.r2h_size, c.r2h_size),
            _ => (0, 0),
        };
        let n = c.hidden;
        let mut m = c.front_width();
        let (mut recurrent_weights, mut recurrent_biases) = (0, 0);
        for _ in 0..c.depth {
            let per_dir = match c.stack {
                StackKind::Qlstm => m * n + n * n,
                StackKind::Lstm => 4 * (m * n + n * n),
            };
            recurrent_weights += 2 * per_dir;
            recurrent_biases += 2 * 4 * n;
            m = c.layer_width();
        }
        ParamBreakdown {
            front_weights,
            front_biases,
            recurrent_weights,
            recurrent_biases,
            output_weights: m * c.classes,
            output_biases: c.classes,
        }
    }

    pub fn total(&self) -> usize {
        self.front_weights + self.front_biases + self.recurrent_weights + self.recurrent_biases + self.output_weights + self.output_biases
    }
}

/// Exact scalar count of a constructed model.
pub fn count_params<T: Scalar>(model: &AcousticModel<T>) -> usize {
    model.num_params()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy(stack: StackKind, front: FrontEndKind) -> ModelConfig {
        let mut c = ModelConfig::default();
        c.stack = stack;
        c.front_end = front;
        c.input_dim = 8;
        c.r2h_size = 8;
        c.hidden = 8;
        c.depth = 2;
        c.classes = 3;
        c.precision = crate::scalar::Precision::F64;
        c
    }

    #[test]
    fn zero_cell_gates() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cell = Cell::Quat(QLSTMCell::new(&mut store, "c", 1, 1, &mut rng));
        for i in 0..store.len() {
            let id = ParamId(i);
            let shape = store.value(id).shape().to_vec();
            store.set_value(id, Tensor::zeros(shape)).unwrap();
        }
        let tape = Tape::new();
        let x = tape.constant(Tensor::from_f64(vec![2, 4], &[1.0, -2.0, 0.5, 3.0, 0.1, 0.2, 0.3, 0.4]).unwrap());
        let h0 = tape.constant(Tensor::zeros(vec![2, 4]));
        let (h, c) = cell.step(&tape, &store, x, h0, h0).unwrap();
        assert!(h.value().data().iter().all(|&v| v == 0.0));
        assert!(c.value().data().iter().all(|&v| v == 0.0));

        let v = [0.4, -1.0, 2.0, 0.0, 1.0, 1.0, -3.0, 0.2];
        let c_prev = tape.constant(Tensor::from_f64(vec![2, 4], &v).unwrap());
        let (h, c) = cell.step(&tape, &store, x, h0, c_prev).unwrap();
        for (k, &vk) in v.iter().enumerate() {
            assert!((c.value().data()[k] - 0.5 * vk).abs() < 1e-15);
            assert!((h.value().data()[k] - 0.5 * (0.5 * vk).tanh()).abs() < 1e-15);
        }
    }

    #[test]
    fn breakdown_matches_constructed_models() {
        for stack in [StackKind::Qlstm, StackKind::Lstm] {
            for front in [FrontEndKind::R2HNorm, FrontEndKind::R2H, FrontEndKind::NaiveQuat, FrontEndKind::Identity] {
                for merge in [MergeRule::Sum, MergeRule::Concat] {
                    for depth in [0, 1, 2] {
                        let mut c = toy(stack, front);
                        c.merge = merge;
                        c.depth = depth;
                        let m = AcousticModel::<f64>::new(&c).unwrap();
                        assert_eq!(count_params(&m), ParamBreakdown::from_config(&c).total(), "{stack} {front} {merge} {depth}");
                    }
                }
            }
        }
    }

    #[test]
    fn lstm_cell_count() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cell = Cell::Real(LSTMCell::new(&mut store, "c", 5, 7, &mut rng));
        assert_eq!(store.num_scalars(), 4 * (7 * 5 + 7 * 7 + 7));
        assert_eq!(cell.num_weights() + cell.num_biases(), store.num_scalars());
    }

    #[test]
    fn precision_mismatch_rejected() {
        let c = toy(StackKind::Qlstm, FrontEndKind::R2HNorm);
        assert!(AcousticModel::<f32>::new(&c).is_err());
    }

    #[test]
    fn logits_shape_and_softmax() {
        let c = toy(StackKind::Qlstm, FrontEndKind::R2HNorm);
        let m = AcousticModel::<f64>::new(&c).unwrap();
        let tape = Tape::no_grad();
        let x = tape.constant(Tensor::full(vec![4, 2, 8], 0.3));
        let y = m.forward_features(&tape, x, &[4, 2], None).unwrap();
        assert_eq!(y.shape(), vec![4, 2, 3]);
        for row in y.value().data().chunks(3) {
            let z: f64 = row.iter().map(|v| v.exp()).sum();
            let s: f64 = row.iter().map(|v| v.exp() / z).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }
}
