//! Quaternion-valued dense layers, split activations, the real-to-quaternion
//! encoder and the initialisers they use.
//!
//! Every quaternion signal is stored in quarter-block layout: a real vector
//! of width `4H` holds all `r` parts first, then all `x`, `y` and `z` parts
//! (see [`QuatLayout`]). A quaternion dense layer `o = Σ_j W[o][j] ⊗ x[j] + b`
//! is lowered to one real matrix product with a `4·in × 4·out` block matrix
//! whose sign pattern is that of the left-multiplication matrix
//! [`crate::quat::to_matrix`].

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{QnnError, Result};
use crate::params::{ParamId, ParamStore};
use crate::quat::Quaternion;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Element-wise real activations. Applied to a quaternion signal they act on
/// each component independently ("split" activations).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Sigmoid,
    Tanh,
    HardTanh,
    Relu,
}

impl Activation {
    pub fn as_str(self) -> &'static str {
        match self {
            Activation::Sigmoid => "sigmoid",
            Activation::Tanh => "tanh",
            Activation::HardTanh => "hardtanh",
            Activation::Relu => "relu",
        }
    }

    pub fn apply_scalar(self, v: f64) -> f64 {
        use crate::autograd::kernels;
        match self {
            Activation::Sigmoid => kernels::sigmoid(v),
            Activation::Tanh => v.tanh(),
            Activation::HardTanh => kernels::hardtanh(v),
            Activation::Relu => kernels::relu(v),
        }
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Activation {
    type Err = QnnError;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "sigmoid" => Ok(Activation::Sigmoid),
            "tanh" => Ok(Activation::Tanh),
            "hardtanh" => Ok(Activation::HardTanh),
            "relu" => Ok(Activation::Relu),
            other => Err(QnnError::config(format!("unknown activation '{other}'"))),
        }
    }
}

pub fn split_activation<'t, T: Scalar>(kind: Activation, x: Var<'t, T>) -> Var<'t, T> {
    match kind {
        Activation::Sigmoid => x.sigmoid(),
        Activation::Tanh => x.tanh(),
        Activation::HardTanh => x.hardtanh(),
        Activation::Relu => x.relu(),
    }
}

/// Mapping between `H` quaternions and a real vector of width `4H`:
/// quaternion `h` is `(v[h], v[H+h], v[2H+h], v[3H+h])`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct QuatLayout {
    pub quaternions: usize,
}

impl QuatLayout {
    pub fn new(quaternions: usize) -> Self {
        QuatLayout { quaternions }
    }

    pub fn for_width(width: usize) -> Result<Self> {
        if width % 4 != 0 {
            return Err(QnnError::dim("quat_layout", &[width], &[4]));
        }
        Ok(QuatLayout::new(width / 4))
    }

    pub fn width(&self) -> usize {
        4 * self.quaternions
    }

    /// Real index of component `c` (0 = r, 1 = x, 2 = y, 3 = z) of quaternion `h`.
    pub fn index(&self, h: usize, c: usize) -> usize {
        c * self.quaternions + h
    }

    pub fn pack(&self, qs: &[Quaternion]) -> Result<Vec<f64>> {
        if qs.len() != self.quaternions {
            return Err(QnnError::dim("pack", &[qs.len()], &[self.quaternions]));
        }
        let mut v = vec![0.0; self.width()];
        for (h, q) in qs.iter().enumerate() {
            for (c, val) in q.to_array().into_iter().enumerate() {
                v[self.index(h, c)] = val;
            }
        }
        Ok(v)
    }

    pub fn unpack(&self, v: &[f64]) -> Result<Vec<Quaternion>> {
        if v.len() != self.width() {
            return Err(QnnError::dim("unpack", &[v.len()], &[self.width()]));
        }
        Ok((0..self.quaternions)
            .map(|h| {
                Quaternion::new(
                    v[self.index(h, 0)],
                    v[self.index(h, 1)],
                    v[self.index(h, 2)],
                    v[self.index(h, 3)],
                )
            })
            .collect())
    }
}

/// Scale of the Chi-4 initialiser, with fans counted in quaternions.
pub fn chi4_sigma(fan_in: usize, fan_out: usize) -> f64 {
    1.0 / (2.0 * (fan_in + fan_out) as f64).sqrt()
}

/// Draws `fan_in · fan_out` quaternion weights.
///
/// Each weight has magnitude `φ = σ·χ₄` (the norm of a 4-d standard normal
/// vector), a uniformly random unit pure-imaginary axis `u` and an angle
/// `θ ~ U(−π, π)`: `w = φ·(cos θ, u·sin θ)`. Since `u` is a unit vector,
/// `|w| = φ`.
pub fn chi4_init<R: Rng + ?Sized>(fan_in: usize, fan_out: usize, rng: &mut R) -> Vec<Quaternion> {
    let sigma = chi4_sigma(fan_in, fan_out);
    (0..fan_in * fan_out)
        .map(|_| {
            let chi2: f64 = (0..4).map(|_| rng.sample::<f64, _>(StandardNormal).powi(2)).sum();
            let phi = sigma * chi2.sqrt();
            let axis = loop {
                let v: [f64; 3] = [
                    rng.sample(StandardNormal),
                    rng.sample(StandardNormal),
                    rng.sample(StandardNormal),
                ];
                let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
                if n > 1e-12 {
                    break [v[0] / n, v[1] / n, v[2] / n];
                }
            };
            let theta = rng.random_range(-PI..PI);
            let s = theta.sin();
            Quaternion::new(
                phi * theta.cos(),
                phi * axis[0] * s,
                phi * axis[1] * s,
                phi * axis[2] * s,
            )
        })
        .collect()
}

/// Glorot-uniform real matrix of shape `out × in`.
pub fn glorot_uniform<T: Scalar, R: Rng + ?Sized>(fan_in: usize, fan_out: usize, rng: &mut R) -> Tensor<T> {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..fan_in * fan_out)
        .map(|_| T::lit(rng.random_range(-limit..limit)))
        .collect();
    Tensor::new(vec![fan_out, fan_in], data).expect("sized")
}

/// Dense layer with quaternion weights `W[out_q][in_q]`, stored as four real
/// `out_q × in_q` matrices, one per component.
#[derive(Debug, Clone)]
pub struct QuatLinear {
    pub in_q: usize,
    pub out_q: usize,
    pub weights: [ParamId; 4],
    pub bias: Option<ParamId>,
}

impl QuatLinear {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        in_q: usize,
        out_q: usize,
        with_bias: bool,
        rng: &mut R,
    ) -> Self {
        let draws = chi4_init(in_q, out_q, rng);
        let weights = ["r", "x", "y", "z"]
            .iter()
            .enumerate()
            .map(|(c, comp)| {
                // draws are indexed [o][j], row-major like the stored matrices
                let data = draws.iter().map(|q| T::lit(q.to_array()[c])).collect();
                let t = Tensor::new(vec![out_q, in_q], data).expect("sized");
                store.add(format!("{name}.w_{comp}"), t)
            })
            .collect::<Vec<_>>();
        let bias = with_bias.then(|| store.add(format!("{name}.b"), Tensor::zeros(vec![4 * out_q])));
        QuatLinear {
            in_q,
            out_q,
            weights: [weights[0], weights[1], weights[2], weights[3]],
            bias,
        }
    }

    pub fn num_weights(&self) -> usize {
        4 * self.in_q * self.out_q
    }

    pub fn num_params(&self) -> usize {
        self.num_weights() + if self.bias.is_some() { 4 * self.out_q } else { 0 }
    }

    pub fn weight<T: Scalar>(&self, store: &ParamStore<T>, o: usize, j: usize) -> Quaternion {
        let at = o * self.in_q + j;
        let c = |k: usize| store.value(self.weights[k]).data()[at].to_f64_lossless();
        Quaternion::new(c(0), c(1), c(2), c(3))
    }

    /// The `4·in_q × 4·out_q` real matrix `K` with `x · K = Σ_j W[·][j] ⊗ x[j]`
    /// for a row vector `x` in quarter-block layout.
    ///
    /// Block `(input component a, output component c)` is `±W_kᵀ` where
    /// `(k, ±)` is entry `[c][a]` of the left-multiplication matrix.
    pub fn composite<'t, T: Scalar>(&self, tape: &'t Tape<T>, store: &ParamStore<T>) -> Result<Var<'t, T>> {
        let wt: Vec<Var<'t, T>> = self
            .weights
            .iter()
            .map(|&id| tape.param(store, id).transpose())
            .collect::<Result<_>>()?;
        let (r, x, y, z) = (wt[0], wt[1], wt[2], wt[3]);
        let (nx, ny, nz) = (x.neg(), y.neg(), z.neg());
        // Left-multiplication matrix rows (output component) over columns
        // (input component): [r -x -y -z; x r -z y; y z r -x; z -y x r].
        // Row block a of K is column a of that matrix.
        let rows = [
            [r, x, y, z],
            [nx, r, z, ny],
            [ny, nz, r, x],
            [nz, y, nx, r],
        ];
        let row_blocks: Vec<Var<'t, T>> = rows
            .iter()
            .map(|blocks| Var::concat(blocks, 1))
            .collect::<Result<_>>()?;
        Var::concat(&row_blocks, 0)
    }

    pub fn bias_var<'t, T: Scalar>(&self, tape: &'t Tape<T>, store: &ParamStore<T>) -> Option<Var<'t, T>> {
        self.bias.map(|b| tape.param(store, b))
    }

    pub fn forward<'t, T: Scalar>(
        &self,
        tape: &'t Tape<T>,
        store: &ParamStore<T>,
        x: Var<'t, T>,
    ) -> Result<Var<'t, T>> {
        let k = self.composite(tape, store)?;
        apply_affine(x, k, self.bias_var(tape, store), 4 * self.in_q, "quat_linear")
    }
}

/// `x[..., n_in] · k[n_in × n_out] (+ b)`, keeping leading axes.
pub(crate) fn apply_affine<'t, T: Scalar>(
    x: Var<'t, T>,
    k: Var<'t, T>,
    bias: Option<Var<'t, T>>,
    n_in: usize,
    op: &'static str,
) -> Result<Var<'t, T>> {
    let shape = x.shape();
    match shape.last() {
        Some(&w) if w == n_in && (op != "quat_linear" || w % 4 == 0) => {}
        _ => return Err(QnnError::dim(op, &shape, &[n_in])),
    }
    let rows = shape.iter().rev().skip(1).product::<usize>();
    let n_out = k.shape()[1];
    let mut y = x.reshape(vec![rows, n_in])?.matmul(k)?;
    if let Some(b) = bias {
        y = y.add_bias(b)?;
    }
    let mut out_shape = shape;
    *out_shape.last_mut().expect("non-empty") = n_out;
    y.reshape(out_shape)
}

/// Real affine layer `y = x·Wᵀ + b` with `W` of shape `out × in`.
#[derive(Debug, Clone)]
pub struct RealLinear {
    pub in_dim: usize,
    pub out_dim: usize,
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl RealLinear {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        with_bias: bool,
        rng: &mut R,
    ) -> Self {
        let weight = store.add(format!("{name}.w"), glorot_uniform(in_dim, out_dim, rng));
        let bias = with_bias.then(|| store.add(format!("{name}.b"), Tensor::zeros(vec![out_dim])));
        RealLinear {
            in_dim,
            out_dim,
            weight,
            bias,
        }
    }

    pub fn num_weights(&self) -> usize {
        self.in_dim * self.out_dim
    }

    pub fn num_params(&self) -> usize {
        self.num_weights() + if self.bias.is_some() { self.out_dim } else { 0 }
    }

    pub fn forward<'t, T: Scalar>(
        &self,
        tape: &'t Tape<T>,
        store: &ParamStore<T>,
        x: Var<'t, T>,
    ) -> Result<Var<'t, T>> {
        let w = tape.param(store, self.weight);
        let b = self.bias.map(|b| tape.param(store, b));
        real_linear_forward(w, b, x)
    }
}

/// `x[..., M] · Wᵀ + b` with `W: [N × M]`, `b: [N]`.
pub fn real_linear_forward<'t, T: Scalar>(
    w: Var<'t, T>,
    b: Option<Var<'t, T>>,
    x: Var<'t, T>,
) -> Result<Var<'t, T>> {
    let ws = w.shape();
    if ws.len() != 2 {
        return Err(QnnError::dim("real_linear", &ws, &[0, 0]));
    }
    apply_affine(x, w.transpose()?, b, ws[1], "real_linear")
}

/// Real dense layer, split activation and (optionally) per-quaternion
/// normalisation, mapping `D` real features to `H = width/4` quaternions.
#[derive(Debug, Clone)]
pub struct R2HEncoder {
    pub dense: RealLinear,
    pub activation: Activation,
    pub normalized: bool,
    pub eps: f64,
}

impl R2HEncoder {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        in_dim: usize,
        width: usize,
        activation: Activation,
        normalized: bool,
        eps: f64,
        rng: &mut R,
    ) -> Result<Self> {
        if width == 0 || width % 4 != 0 {
            return Err(QnnError::config(format!(
                "encoder width {width} must be a positive multiple of 4"
            )));
        }
        Ok(R2HEncoder {
            dense: RealLinear::new(store, &format!("{name}.dense"), in_dim, width, true, rng),
            activation,
            normalized,
            eps,
        })
    }

    pub fn out_width(&self) -> usize {
        self.dense.out_dim
    }

    pub fn forward<'t, T: Scalar>(
        &self,
        tape: &'t Tape<T>,
        store: &ParamStore<T>,
        x: Var<'t, T>,
    ) -> Result<Var<'t, T>> {
        let pre = self.dense.forward(tape, store, x)?;
        let act = split_activation(self.activation, pre);
        if self.normalized {
            act.quat_normalize(T::lit(self.eps))
        } else {
            Ok(act)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DropoutGranularity {
    /// Whole quaternions are dropped together.
    Quaternion,
    /// Every real component is dropped independently.
    Component,
}

impl FromStr for DropoutGranularity {
    type Err = QnnError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "quaternion" => Ok(DropoutGranularity::Quaternion),
            "component" => Ok(DropoutGranularity::Component),
            other => Err(QnnError::config(format!("unknown dropout granularity '{other}'"))),
        }
    }
}

impl fmt::Display for DropoutGranularity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DropoutGranularity::Quaternion => "quaternion",
            DropoutGranularity::Component => "component",
        })
    }
}

/// Inverted dropout. With quaternion granularity the trailing axis is read
/// in quarter-block layout and all four components of a dropped quaternion
/// are zeroed together. Identity when `!training` or `p == 0`.
pub fn quaternion_dropout<'t, T: Scalar, R: Rng + ?Sized>(
    x: Var<'t, T>,
    p: f64,
    training: bool,
    granularity: DropoutGranularity,
    rng: &mut R,
) -> Result<Var<'t, T>> {
    if !(0.0..1.0).contains(&p) {
        return Err(QnnError::config(format!("dropout probability {p} outside [0, 1)")));
    }
    if !training || p == 0.0 {
        return Ok(x);
    }
    let shape = x.shape();
    let width = *shape.last().unwrap_or(&0);
    let keep = T::lit(1.0 / (1.0 - p));
    let n: usize = shape.iter().product();
    let mut mask = vec![T::zero(); n];
    match granularity {
        DropoutGranularity::Component => {
            for m in &mut mask {
                if rng.random::<f64>() >= p {
                    *m = keep;
                }
            }
        }
        DropoutGranularity::Quaternion => {
            let layout = QuatLayout::for_width(width)?;
            for row in mask.chunks_mut(width) {
                for h in 0..layout.quaternions {
                    if rng.random::<f64>() >= p {
                        for c in 0..4 {
                            row[layout.index(h, c)] = keep;
                        }
                    }
                }
            }
        }
    }
    let m = x.tape().constant(Tensor::new(shape, mask)?);
    x.mul(m)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quat::hamilton;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(7)
    }

    #[test]
    fn layout_roundtrip() {
        let layout = QuatLayout::new(3);
        let v: Vec<f64> = (0..12).map(f64::from).collect();
        let qs = layout.unpack(&v).unwrap();
        assert_eq!(qs[1], Quaternion::new(1.0, 4.0, 7.0, 10.0));
        assert_eq!(layout.pack(&qs).unwrap(), v);
        assert!(QuatLayout::for_width(10).is_err());
    }

    #[test]
    fn identity_weight_passes_input_through() {
        let mut store = ParamStore::<f64>::new();
        let layer = QuatLinear::new(&mut store, "q", 1, 1, true, &mut rng());
        for (c, &id) in layer.weights.iter().enumerate() {
            let v = if c == 0 { 1.0 } else { 0.0 };
            store.set_value(id, Tensor::from_f64(vec![1, 1], &[v]).unwrap()).unwrap();
        }
        let tape = Tape::new();
        let x = tape.constant(Tensor::from_f64(vec![1, 4], &[0.5, -1.0, 2.0, 3.0]).unwrap());
        let y = layer.forward(&tape, &store, x).unwrap();
        assert_eq!(y.value().data(), &[0.5, -1.0, 2.0, 3.0]);
    }

    #[test]
    fn single_quaternion_matches_hamilton_f32() {
        let mut store = ParamStore::<f32>::new();
        let layer = QuatLinear::new(&mut store, "q", 1, 1, false, &mut rng());
        let w = layer.weight(&store, 0, 0);
        let xq = Quaternion::new(0.3, -0.7, 1.1, 0.25);
        let tape = Tape::new();
        let x = tape.constant(Tensor::from_f64(vec![1, 4], &xq.to_array()).unwrap());
        let y = layer.forward(&tape, &store, x).unwrap().value().to_f64_vec();
        let expected = hamilton(w, xq);
        assert!(Quaternion::from_array([y[0], y[1], y[2], y[3]]).max_abs_diff(expected) < 1e-6);
    }

    #[test]
    fn rejects_non_quaternion_width() {
        let mut store = ParamStore::<f64>::new();
        let layer = QuatLinear::new(&mut store, "q", 2, 1, false, &mut rng());
        let tape = Tape::new();
        let x = tape.constant(Tensor::zeros(vec![2, 7]));
        assert!(matches!(layer.forward(&tape, &store, x), Err(QnnError::Dimension { .. })));
    }

    #[test]
    fn counts_are_a_quarter_of_real() {
        let mut qs = ParamStore::<f32>::new();
        let q = QuatLinear::new(&mut qs, "q", 256, 256, true, &mut rng());
        assert_eq!(q.num_weights(), 262_144);
        assert_eq!(q.num_params(), 262_144 + 1024);
        assert_eq!(qs.num_scalars(), q.num_params());
        let r = RealLinear {
            in_dim: 1024,
            out_dim: 1024,
            weight: ParamId(0),
            bias: None,
        };
        assert_eq!(r.num_weights(), 1_048_576);
        assert_eq!(r.num_weights(), 4 * q.num_weights());
    }

    #[test]
    fn split_relu_example() {
        let tape = Tape::<f64>::new();
        // quaternion (−1, 2, −3, 4) in a width-4 layout
        let x = tape.constant(Tensor::from_f64(vec![4], &[-1.0, 2.0, -3.0, 4.0]).unwrap());
        assert_eq!(split_activation(Activation::Relu, x).value().data(), &[0.0, 2.0, 0.0, 4.0]);
        let z = tape.constant(Tensor::zeros(vec![4]));
        assert_eq!(split_activation(Activation::Tanh, z).value().data(), &[0.0; 4]);
    }

    #[test]
    fn r2h_equal_components_normalize_to_half() {
        for a in [0.1, 1.0, 5.0] {
            let mut store = ParamStore::<f64>::new();
            let enc = R2HEncoder::new(&mut store, "r2h", 1, 4, Activation::Tanh, true, 1e-12, &mut rng()).unwrap();
            store
                .set_value(enc.dense.weight, Tensor::from_f64(vec![4, 1], &[0.0; 4]).unwrap())
                .unwrap();
            store
                .set_value(enc.dense.bias.unwrap(), Tensor::from_f64(vec![4], &[a; 4]).unwrap())
                .unwrap();
            let tape = Tape::new();
            let x = tape.constant(Tensor::from_f64(vec![1, 1], &[0.0]).unwrap());
            let y = enc.forward(&tape, &store, x).unwrap().value();
            for v in y.data() {
                assert!((v - 0.5).abs() < 1e-9, "a={a}: {v}");
            }
        }
    }

    #[test]
    fn r2h_zero_params_give_zero_output() {
        let mut store = ParamStore::<f64>::new();
        let enc = R2HEncoder::new(&mut store, "r2h", 3, 8, Activation::Tanh, true, 1e-12, &mut rng()).unwrap();
        store.set_value(enc.dense.weight, Tensor::zeros(vec![8, 3])).unwrap();
        let tape = Tape::new();
        let x = tape.constant(Tensor::from_f64(vec![2, 3], &[1.0, 2.0, 3.0, -1.0, 0.5, 0.0]).unwrap());
        let y = enc.forward(&tape, &store, x).unwrap().value();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn r2h_output_shape() {
        let mut store = ParamStore::<f32>::new();
        let enc = R2HEncoder::new(&mut store, "r2h", 40, 1024, Activation::Tanh, true, 1e-12, &mut rng()).unwrap();
        let tape = Tape::new();
        let x = tape.constant(Tensor::zeros(vec![5, 2, 40]));
        assert_eq!(enc.forward(&tape, &store, x).unwrap().shape(), vec![5, 2, 1024]);
        assert_eq!(QuatLayout::for_width(enc.out_width()).unwrap().quaternions, 256);
        let bad = tape.constant(Tensor::zeros(vec![5, 2, 39]));
        assert!(enc.forward(&tape, &store, bad).is_err());
    }

    #[test]
    fn chi4_is_deterministic_and_biases_zero() {
        let a = chi4_init(3, 5, &mut rng());
        let b = chi4_init(3, 5, &mut rng());
        assert_eq!(a, b);
        let mut store = ParamStore::<f64>::new();
        let layer = QuatLinear::new(&mut store, "q", 3, 5, true, &mut rng());
        assert!(store.value(layer.bias.unwrap()).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn dropout_identity_cases() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::full(vec![3, 8], 1.5));
        let mut r = rng();
        let same = quaternion_dropout(x, 0.0, true, DropoutGranularity::Quaternion, &mut r).unwrap();
        assert_eq!(same.id(), x.id());
        let eval = quaternion_dropout(x, 0.5, false, DropoutGranularity::Quaternion, &mut r).unwrap();
        assert_eq!(eval.value().data(), x.value().data());
        assert!(quaternion_dropout(x, 1.0, true, DropoutGranularity::Quaternion, &mut r).is_err());
        assert!(quaternion_dropout(x, -0.1, true, DropoutGranularity::Quaternion, &mut r).is_err());
    }
}
