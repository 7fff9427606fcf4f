//! Exact quaternion algebra in double precision.
//!
//! This is the semantic reference for every quaternion layer in the crate:
//! the layers lower the Hamilton product to structured real matrix products,
//! and the tests check them against the functions here.

use std::ops::{Add, Mul, Neg, Sub};

use serde::{Deserialize, Serialize};

/// Default additive guard used by [`normalize`].
pub const DEFAULT_NORM_EPS: f64 = 1e-12;

/// A quaternion `r + x·i + y·j + z·k`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Quaternion {
    pub r: f64,
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Quaternion {
    pub const ZERO: Quaternion = Quaternion::new(0.0, 0.0, 0.0, 0.0);
    pub const ONE: Quaternion = Quaternion::new(1.0, 0.0, 0.0, 0.0);
    pub const I: Quaternion = Quaternion::new(0.0, 1.0, 0.0, 0.0);
    pub const J: Quaternion = Quaternion::new(0.0, 0.0, 1.0, 0.0);
    pub const K: Quaternion = Quaternion::new(0.0, 0.0, 0.0, 1.0);

    pub const fn new(r: f64, x: f64, y: f64, z: f64) -> Self {
        Quaternion { r, x, y, z }
    }

    pub fn from_array(a: [f64; 4]) -> Self {
        Quaternion::new(a[0], a[1], a[2], a[3])
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.r, self.x, self.y, self.z]
    }

    pub fn is_finite(self) -> bool {
        self.to_array().iter().all(|c| c.is_finite())
    }

    pub fn conjugate(self) -> Self {
        conjugate(self)
    }

    pub fn norm(self) -> f64 {
        norm(self)
    }

    pub fn normalize(self, eps: f64) -> Self {
        normalize(self, eps)
    }

    pub fn to_matrix(self) -> QuatMatrix4 {
        to_matrix(self)
    }

    pub fn scale(self, s: f64) -> Self {
        Quaternion::new(self.r * s, self.x * s, self.y * s, self.z * s)
    }

    /// Largest absolute component difference.
    pub fn max_abs_diff(self, other: Quaternion) -> f64 {
        self.to_array()
            .iter()
            .zip(other.to_array())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

impl Add for Quaternion {
    type Output = Quaternion;
    fn add(self, o: Quaternion) -> Quaternion {
        Quaternion::new(self.r + o.r, self.x + o.x, self.y + o.y, self.z + o.z)
    }
}

impl Sub for Quaternion {
    type Output = Quaternion;
    fn sub(self, o: Quaternion) -> Quaternion {
        Quaternion::new(self.r - o.r, self.x - o.x, self.y - o.y, self.z - o.z)
    }
}

impl Neg for Quaternion {
    type Output = Quaternion;
    fn neg(self) -> Quaternion {
        Quaternion::new(-self.r, -self.x, -self.y, -self.z)
    }
}

/// `a * b` is the Hamilton product `a ⊗ b`.
impl Mul for Quaternion {
    type Output = Quaternion;
    fn mul(self, o: Quaternion) -> Quaternion {
        hamilton(self, o)
    }
}

/// Left-multiplication matrix of a quaternion, row-major.
///
/// For every `p`, `hamilton(q, p) == to_matrix(q).apply(p)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuatMatrix4 {
    pub m: [[f64; 4]; 4],
}

impl QuatMatrix4 {
    pub fn apply(&self, p: Quaternion) -> Quaternion {
        let v = p.to_array();
        let mut out = [0.0; 4];
        for (o, row) in out.iter_mut().zip(&self.m) {
            *o = row.iter().zip(&v).map(|(a, b)| a * b).sum();
        }
        Quaternion::from_array(out)
    }

    pub fn transpose(&self) -> QuatMatrix4 {
        let mut t = [[0.0; 4]; 4];
        for (i, row) in self.m.iter().enumerate() {
            for (j, v) in row.iter().enumerate() {
                t[j][i] = *v;
            }
        }
        QuatMatrix4 { m: t }
    }
}

/// Hamilton product `q1 ⊗ q2`, written out term by term.
pub fn hamilton(q1: Quaternion, q2: Quaternion) -> Quaternion {
    let Quaternion {
        r: r1,
        x: x1,
        y: y1,
        z: z1,
    } = q1;
    let Quaternion {
        r: r2,
        x: x2,
        y: y2,
        z: z2,
    } = q2;
    Quaternion {
        r: r1 * r2 - x1 * x2 - y1 * y2 - z1 * z2,
        x: r1 * x2 + x1 * r2 + y1 * z2 - z1 * y2,
        y: r1 * y2 - x1 * z2 + y1 * r2 + z1 * x2,
        z: r1 * z2 + x1 * y2 - y1 * x2 + z1 * r2,
    }
}

pub fn to_matrix(q: Quaternion) -> QuatMatrix4 {
    let Quaternion { r, x, y, z } = q;
    QuatMatrix4 {
        m: [
            [r, -x, -y, -z],
            [x, r, -z, y],
            [y, z, r, -x],
            [z, -y, x, r],
        ],
    }
}

pub fn conjugate(q: Quaternion) -> Quaternion {
    Quaternion::new(q.r, -q.x, -q.y, -q.z)
}

pub fn norm(q: Quaternion) -> f64 {
    (q.r * q.r + q.x * q.x + q.y * q.y + q.z * q.z).sqrt()
}

/// `q / (|q| + eps)`; maps the zero quaternion to zero instead of NaN.
pub fn normalize(q: Quaternion, eps: f64) -> Quaternion {
    q.scale(1.0 / (norm(q) + eps))
}
