//! End-to-end self verification: quaternion algebra against its matrix
//! form, structured layers against explicit Hamilton sums, and every
//! differentiable building block against central finite differences.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autograd::{Tape, Var};
use crate::config::{FrontEndKind, ModelConfig};
use crate::error::Result;
use crate::gradcheck::{check_params, GradCheckReport};
use crate::layers::{split_activation, Activation, QuatLayout, QuatLinear, R2HEncoder};
use crate::params::{ParamId, ParamStore};
use crate::qlstm::{AcousticModel, Cell, QLSTMCell};
use crate::quat::{hamilton, to_matrix, Quaternion, DEFAULT_NORM_EPS};
use crate::scalar::Precision;
use crate::tensor::Tensor;

/// Gradient checks pass below this relative error.
pub const GRAD_TOL: f64 = 1e-5;

pub type HamiltonFn = fn(Quaternion, Quaternion) -> Quaternion;

/// Deliberate defects used to confirm that the checks can fail.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fault {
    None,
    /// Flips the sign of the `x1·y2` term of the k component.
    HamiltonSign,
}

impl std::str::FromStr for Fault {
    type Err = crate::QnnError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Fault::None),
            "hamilton-sign" => Ok(Fault::HamiltonSign),
            other => Err(crate::QnnError::config(format!("unknown fault '{other}'"))),
        }
    }
}

fn hamilton_sign_fault(a: Quaternion, b: Quaternion) -> Quaternion {
    let mut q = hamilton(a, b);
    q.z -= 2.0 * a.x * b.y;
    q
}

impl Fault {
    pub fn hamilton(self) -> HamiltonFn {
        match self {
            Fault::None => hamilton,
            Fault::HamiltonSign => hamilton_sign_fault,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CaseFailure {
    pub case: String,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SuiteReport {
    pub suite: &'static str,
    pub passed: usize,
    pub failed: usize,
    pub first_failure: Option<CaseFailure>,
}

impl SuiteReport {
    fn new(suite: &'static str) -> Self {
        SuiteReport {
            suite,
            passed: 0,
            failed: 0,
            first_failure: None,
        }
    }

    fn record(&mut self, case: &str, ok: bool, detail: impl FnOnce() -> String) {
        if ok {
            self.passed += 1;
        } else {
            self.failed += 1;
            if self.first_failure.is_none() {
                self.first_failure = Some(CaseFailure {
                    case: case.to_string(),
                    detail: detail(),
                });
            }
        }
    }

    pub fn ok(&self) -> bool {
        self.failed == 0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SelfCheckReport {
    pub suites: Vec<SuiteReport>,
}

impl SelfCheckReport {
    pub fn ok(&self) -> bool {
        self.suites.iter().all(SuiteReport::ok)
    }

    pub fn first_failure(&self) -> Option<&CaseFailure> {
        self.suites.iter().find_map(|s| s.first_failure.as_ref())
    }
}

fn random_quat<R: Rng>(rng: &mut R, range: f64) -> Quaternion {
    Quaternion::new(
        rng.random_range(-range..range),
        rng.random_range(-range..range),
        rng.random_range(-range..range),
        rng.random_range(-range..range),
    )
}

/// Identity, basis table, matrix oracle, conjugate, norm and normalisation
/// checks, using `h` as the product under test.
pub fn algebra_suite(h: HamiltonFn, pairs: usize, seed: u64) -> SuiteReport {
    let mut s = SuiteReport::new("algebra");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    for _ in 0..100 {
        let q = random_quat(&mut rng, 10.0);
        let ok = h(Quaternion::ONE, q) == q && h(q, Quaternion::ONE) == q;
        s.record("identity", ok, || format!("q = {q:?}"));
    }

    let (one, i, j, k) = (Quaternion::ONE, Quaternion::I, Quaternion::J, Quaternion::K);
    let table = [
        ("i*i", i, i, -one),
        ("j*j", j, j, -one),
        ("k*k", k, k, -one),
        ("i*j", i, j, k),
        ("j*k", j, k, i),
        ("k*i", k, i, j),
        ("j*i", j, i, -k),
        ("k*j", k, j, -i),
        ("i*k", i, k, -j),
    ];
    for (name, a, b, want) in table {
        let got = h(a, b);
        s.record(&format!("basis table {name}"), got == want, || {
            format!("{a:?} * {b:?} gave {got:?}, expected {want:?}")
        });
    }

    for _ in 0..pairs {
        let (a, b) = (random_quat(&mut rng, 10.0), random_quat(&mut rng, 10.0));
        let got = h(a, b);
        let via_matrix = to_matrix(a).apply(b);
        let diff = got.max_abs_diff(via_matrix);
        s.record("matrix oracle", diff < 1e-12, || {
            format!("a = {a:?}, b = {b:?}: product {got:?}, matrix form {via_matrix:?}")
        });

        let norm_ab = h(a, b).norm();
        let rel = (norm_ab - a.norm() * b.norm()).abs() / (a.norm() * b.norm()).max(f64::MIN_POSITIVE);
        s.record("norm multiplicativity", rel < 1e-10, || format!("a = {a:?}, b = {b:?}: rel err {rel:e}"));

        let qq = h(a, a.conjugate());
        let n2 = a.norm() * a.norm();
        let err = qq.max_abs_diff(Quaternion::new(n2, 0.0, 0.0, 0.0)) / n2.max(1.0);
        s.record("conjugate product", err < 1e-12, || format!("q = {a:?}: q q* = {qq:?}"));
    }

    for _ in 0..100 {
        let (a, b, c) = (random_quat(&mut rng, 10.0), random_quat(&mut rng, 10.0), random_quat(&mut rng, 10.0));
        let diff = h(h(a, b), c).max_abs_diff(h(a, h(b, c)));
        s.record("associativity", diff < 1e-10, || format!("a = {a:?}, b = {b:?}, c = {c:?}: diff {diff:e}"));

        let n = a.normalize(DEFAULT_NORM_EPS).norm();
        let ok = a.norm() <= 1e-6 || (1.0 - 1e-9..=1.0).contains(&n);
        s.record("normalize", ok, || format!("q = {a:?}: |normalize(q)| = {n}"));
    }
    s
}

/// Structured-matmul layers against explicit per-quaternion sums, and the
/// unit-norm contract of the normalised encoder.
pub fn layer_suite(h: HamiltonFn, seed: u64) -> Result<SuiteReport> {
    let mut s = SuiteReport::new("layers");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    for (in_q, out_q) in [(1, 1), (2, 3), (4, 4), (8, 8)] {
        let mut store = ParamStore::<f64>::new();
        let layer = QuatLinear::new(&mut store, "q", in_q, out_q, true, &mut rng);
        let bias: Vec<f64> = (0..4 * out_q).map(|_| rng.random_range(-1.0..1.0)).collect();
        store.set_value(layer.bias.expect("bias"), Tensor::from_f64(vec![4 * out_q], &bias)?)?;
        let xs: Vec<Quaternion> = (0..in_q).map(|_| random_quat(&mut rng, 2.0)).collect();
        let x_flat = QuatLayout::new(in_q).pack(&xs)?;
        let tape = Tape::no_grad();
        let x = tape.constant(Tensor::new(vec![1, 4 * in_q], x_flat)?);
        let y = QuatLayout::new(out_q).unpack(layer.forward(&tape, &store, x)?.value().data())?;
        let b = QuatLayout::new(out_q).unpack(&bias)?;
        let mut worst = 0.0f64;
        for o in 0..out_q {
            let mut want = b[o];
            for (jj, &xj) in xs.iter().enumerate() {
                want = want + h(layer.weight(&store, o, jj), xj);
            }
            worst = worst.max(want.max_abs_diff(y[o]));
        }
        s.record(&format!("quat linear {in_q}x{out_q}"), worst < 1e-12, || {
            format!("max abs diff {worst:e} against explicit Hamilton sum")
        });
    }

    for act in [Activation::Tanh, Activation::HardTanh, Activation::Relu] {
        let mut store = ParamStore::<f64>::new();
        let enc = R2HEncoder::new(&mut store, "e", 40, 64, act, true, DEFAULT_NORM_EPS, &mut rng)?;
        let plain = R2HEncoder { normalized: false, ..enc.clone() };
        let data: Vec<f64> = (0..100 * 40).map(|_| rng.random_range(-3.0..3.0)).collect();
        let tape = Tape::no_grad();
        let x = tape.constant(Tensor::new(vec![100, 40], data)?);
        let pre = plain.forward(&tape, &store, x)?.value();
        let post = enc.forward(&tape, &store, x)?.value();
        let layout = QuatLayout::new(16);
        let mut bad = None;
        for (row_pre, row_post) in pre.data().chunks(64).zip(post.data().chunks(64)) {
            let qp = layout.unpack(row_pre)?;
            let qn = layout.unpack(row_post)?;
            for (a, b) in qp.iter().zip(&qn) {
                if a.norm() > 1e-6 && (b.norm() - 1.0).abs() >= 1e-6 {
                    bad.get_or_insert((*a, *b));
                }
            }
        }
        s.record(&format!("r2h unit norm ({act})"), bad.is_none(), || format!("{bad:?}"));
    }
    Ok(s)
}

fn random_tensor<R: Rng>(rng: &mut R, shape: Vec<usize>, lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect()).expect("sized")
}

/// Value away from `kinks` by at least `gap`.
fn away_from<R: Rng>(rng: &mut R, kinks: &[f64], gap: f64) -> f64 {
    loop {
        let v: f64 = rng.random_range(-2.0..2.0);
        if kinks.iter().all(|k| (v - k).abs() > gap) {
            return v;
        }
    }
}

/// Weighted sum `Σ y ⊙ c` with fixed random `c`, so that every output
/// element gets a distinct upstream gradient.
fn probe<'t>(y: Var<'t, f64>, seed: u64) -> Result<Var<'t, f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let c = random_tensor(&mut rng, y.shape(), -1.0, 1.0);
    Ok(y.mul(y.tape().constant(c))?.sum())
}

/// Named finite-difference checks, in f64 with central differences.
pub fn gradient_cases(seed: u64) -> Vec<(String, Result<GradCheckReport>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();

    {
        let mut store = ParamStore::new();
        let a = store.add("a", random_tensor(&mut rng, vec![5, 4], -1.0, 1.0));
        let b = store.add("b", random_tensor(&mut rng, vec![4, 3], -1.0, 1.0));
        let r = check_params(&mut store, None, |t, s| probe(t.param(s, a).matmul(t.param(s, b))?, 1));
        out.push(("matmul".to_string(), r));
    }

    for act in [Activation::Sigmoid, Activation::Tanh, Activation::HardTanh, Activation::Relu] {
        let kinks: &[f64] = match act {
            Activation::HardTanh => &[-1.0, 1.0],
            Activation::Relu => &[0.0],
            _ => &[],
        };
        let data: Vec<f64> = (0..24).map(|_| away_from(&mut rng, kinks, 1e-2)).collect();
        let mut store = ParamStore::new();
        let x = store.add("x", Tensor::new(vec![3, 8], data).expect("sized"));
        let r = check_params(&mut store, None, |t, s| probe(split_activation(act, t.param(s, x)), 2));
        out.push((format!("split {act}"), r));
    }

    {
        let mut store = ParamStore::new();
        let x = store.add("x", random_tensor(&mut rng, vec![4, 2, 8], -1.0, 1.0));
        let r = check_params(&mut store, None, |t, s| {
            let xv = t.param(s, x);
            let quarters: Vec<Var<'_, f64>> = (0..4).map(|c| xv.slice(2, 2 * c, 2)).collect::<Result<_>>()?;
            let swapped = Var::concat(&[quarters[2], quarters[0], quarters[3], quarters[1]], 2)?;
            let rev = xv.reverse_time(Some(&[4, 2]))?;
            probe(Var::concat(&[swapped, rev], 2)?, 3)
        });
        out.push(("slice/concat/reverse_time".to_string(), r));
    }

    {
        let mut store = ParamStore::new();
        let layer = QuatLinear::new(&mut store, "q", 3, 2, true, &mut rng);
        let b = layer.bias.expect("bias");
        store.set_value(b, random_tensor(&mut rng, vec![8], -0.5, 0.5)).expect("shape");
        let xin = random_tensor(&mut rng, vec![4, 12], -1.0, 1.0);
        let r = check_params(&mut store, None, |t, s| {
            let x = t.constant(xin.clone());
            probe(layer.forward(t, s, x)?, 4)
        });
        out.push(("quat linear".to_string(), r));
    }

    for normalized in [false, true] {
        for act in [Activation::Tanh, Activation::HardTanh, Activation::Relu] {
            let mut store = ParamStore::new();
            let enc = R2HEncoder::new(&mut store, "e", 6, 8, act, normalized, DEFAULT_NORM_EPS, &mut rng).expect("width");
            let b = enc.dense.bias.expect("bias");
            store.set_value(b, random_tensor(&mut rng, vec![8], 0.1, 0.5)).expect("shape");
            let kinks: &[f64] = match act {
                Activation::HardTanh => &[-1.0, 1.0],
                Activation::Relu => &[0.0],
                _ => &[],
            };
            // redraw inputs until no pre-activation sits on a kink
            let xin = loop {
                let xin = random_tensor(&mut rng, vec![5, 6], -1.0, 1.0);
                let t = Tape::no_grad();
                let pre = enc.dense.forward(&t, &store, t.constant(xin.clone())).expect("forward").value();
                if pre.data().iter().all(|&v| kinks.iter().all(|k| (v - k).abs() > 1e-2)) {
                    break xin;
                }
            };
            let r = check_params(&mut store, None, |t, s| {
                let x = t.constant(xin.clone());
                probe(enc.forward(t, s, x)?, 5)
            });
            let name = if normalized { "r2h-norm" } else { "r2h" };
            out.push((format!("{name} {act}"), r));
        }
    }

    {
        let mut store = ParamStore::new();
        let cell = Cell::Quat(QLSTMCell::new(&mut store, "cell", 2, 2, &mut rng));
        if let Cell::Quat(c) = &cell {
            for &b in &c.b {
                store.set_value(b, random_tensor(&mut rng, vec![8], -0.5, 0.5)).expect("shape");
            }
        }
        let xs = random_tensor(&mut rng, vec![4, 3, 8], -1.0, 1.0);
        let r = check_params(&mut store, None, |t, s| {
            let seq = t.constant(xs.clone());
            let mut h = t.constant(Tensor::zeros(vec![3, 8]));
            let mut c = h;
            for step in 0..4 {
                let x_t = seq.slice(0, step, 1)?.reshape(vec![3, 8])?;
                (h, c) = cell.step(t, s, x_t, h, c)?;
            }
            Ok(h.sum())
        });
        out.push(("qlstm 4-step rollout".to_string(), r));
    }

    {
        let r = toy_model_check(seed);
        out.push(("full toy model".to_string(), r));
    }
    out
}

/// Configuration of the smallest model exercising every component.
pub fn toy_config() -> ModelConfig {
    let mut c = ModelConfig::default();
    c.front_end = FrontEndKind::R2HNorm;
    c.input_dim = 8;
    c.r2h_size = 8;
    c.hidden = 8;
    c.depth = 2;
    c.classes = 3;
    c.dropout = 0.0;
    c.precision = Precision::F64;
    c
}

fn toy_model_check(seed: u64) -> Result<GradCheckReport> {
    let mut c = toy_config();
    c.seed = seed;
    let mut model = AcousticModel::<f64>::new(&c)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    // non-zero biases so their gradients are not trivially structured
    let ids: Vec<ParamId> = model.store.iter().filter(|(_, p)| p.value.shape().len() == 1).map(|(id, _)| id).collect();
    for id in ids {
        let n = model.store.value(id).len();
        model.store.set_value(id, random_tensor(&mut rng, vec![n], -0.3, 0.3))?;
    }
    let (steps, batch) = (5, 2);
    let lengths = [5usize, 3];
    let xs = random_tensor(&mut rng, vec![steps, batch, 8], -1.0, 1.0);
    let targets: Vec<usize> = (0..steps * batch).map(|_| rng.random_range(0..3)).collect();
    let valid: Vec<bool> = (0..steps * batch).map(|i| i / batch < lengths[i % batch]).collect();
    let mut store = std::mem::take(&mut model.store);
    let r = check_params(&mut store, None, |t, s| {
        let m = AcousticModel {
            store: s.clone(),
            ..model.clone()
        };
        let logits = m.forward_features(t, t.constant(xs.clone()), &lengths, None)?;
        logits.cross_entropy(&targets, &valid)
    });
    model.store = store;
    r
}

pub fn gradient_suite(seed: u64) -> SuiteReport {
    let mut s = SuiteReport::new("gradients");
    for (name, r) in gradient_cases(seed) {
        match r {
            Ok(rep) => s.record(&name, rep.passes(GRAD_TOL), || {
                format!(
                    "max rel err {:e} at {}[{}]: analytic {}, numeric {}",
                    rep.max_rel_err, rep.worst_param, rep.worst_index, rep.analytic, rep.numeric
                )
            }),
            Err(e) => s.record(&name, false, || e.to_string()),
        }
    }
    s
}

/// Runs every suite. Suites are ordered cheapest first.
pub fn run(fault: Fault, seed: u64) -> Result<SelfCheckReport> {
    let h = fault.hamilton();
    Ok(SelfCheckReport {
        suites: vec![algebra_suite(h, 10_000, seed), layer_suite(h, seed)?, gradient_suite(seed)],
    })
}
