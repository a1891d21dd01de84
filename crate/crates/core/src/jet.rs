//! Truncated Taylor polynomials in three variables up to total degree three.
//!
//! A [`Jet3`] stores the coefficients of `f(x0 + h)` as a polynomial in `h`.
//! Propagating jets through an expression gives exact derivatives of the
//! expression (up to rounding) in a single pass.

use std::ops::{Add, AddAssign, Div, Mul, Neg, Sub};

/// Number of monomials of degree <= 3 in three variables.
pub const NCOEF: usize = 20;

/// Exponents of each coefficient, grouped by degree.
pub const EXPONENTS: [[u8; 3]; NCOEF] = [
    [0, 0, 0],
    [1, 0, 0],
    [0, 1, 0],
    [0, 0, 1],
    [2, 0, 0],
    [1, 1, 0],
    [1, 0, 1],
    [0, 2, 0],
    [0, 1, 1],
    [0, 0, 2],
    [3, 0, 0],
    [2, 1, 0],
    [2, 0, 1],
    [1, 2, 0],
    [1, 1, 1],
    [1, 0, 2],
    [0, 3, 0],
    [0, 2, 1],
    [0, 1, 2],
    [0, 0, 3],
];

const fn degree(e: [u8; 3]) -> u8 {
    e[0] + e[1] + e[2]
}

/// Position of a monomial in [`EXPONENTS`].
pub const fn monomial_index(e: [u8; 3]) -> usize {
    let mut i = 0;
    while i < NCOEF {
        let m = EXPONENTS[i];
        if m[0] == e[0] && m[1] == e[1] && m[2] == e[2] {
            return i;
        }
        i += 1;
    }
    panic!("monomial degree exceeds three")
}

const NPROD: usize = 84;

const fn product_table() -> [[u8; 3]; NPROD] {
    let mut out = [[0u8; 3]; NPROD];
    let mut n = 0;
    let mut i = 0;
    while i < NCOEF {
        let mut j = 0;
        while j < NCOEF {
            let (a, b) = (EXPONENTS[i], EXPONENTS[j]);
            if degree(a) + degree(b) <= 3 {
                let k = monomial_index([a[0] + b[0], a[1] + b[1], a[2] + b[2]]);
                out[n] = [i as u8, j as u8, k as u8];
                n += 1;
            }
            j += 1;
        }
        i += 1;
    }
    assert!(n == NPROD);
    out
}

const PRODUCTS: [[u8; 3]; NPROD] = product_table();

/// `α!` for each monomial, turning coefficients into partial derivatives.
const FACTORIALS: [f64; NCOEF] = {
    let mut out = [1.0; NCOEF];
    let mut i = 0;
    while i < NCOEF {
        let e = EXPONENTS[i];
        let mut f = 1.0;
        let mut k = 0;
        while k < 3 {
            let mut m = 2;
            while m <= e[k] {
                f *= m as f64;
                m += 1;
            }
            k += 1;
        }
        out[i] = f;
        i += 1;
    }
    out
};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Jet3(pub [f64; NCOEF]);

impl Jet3 {
    pub fn constant(v: f64) -> Self {
        let mut c = [0.0; NCOEF];
        c[0] = v;
        Jet3(c)
    }

    /// The three coordinate functions seeded at `x0`.
    pub fn variables(x0: [f64; 3]) -> [Jet3; 3] {
        let mut out = [Jet3::constant(0.0); 3];
        for (i, v) in out.iter_mut().enumerate() {
            v.0[0] = x0[i];
            v.0[1 + i] = 1.0;
        }
        out
    }

    pub fn value(&self) -> f64 {
        self.0[0]
    }

    /// `∂^α f` for a multi-index of total degree <= 3.
    pub fn partial(&self, alpha: [u8; 3]) -> f64 {
        let i = monomial_index(alpha);
        self.0[i] * FACTORIALS[i]
    }

    pub fn gradient(&self) -> [f64; 3] {
        [self.0[1], self.0[2], self.0[3]]
    }

    pub fn hessian(&self) -> [[f64; 3]; 3] {
        let mut h = [[0.0; 3]; 3];
        for (i, row) in h.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                let mut a = [0u8; 3];
                a[i] += 1;
                a[j] += 1;
                *v = self.partial(a);
            }
        }
        h
    }

    pub fn third(&self) -> [[[f64; 3]; 3]; 3] {
        let mut t = [[[0.0; 3]; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                for k in 0..3 {
                    let mut a = [0u8; 3];
                    a[i] += 1;
                    a[j] += 1;
                    a[k] += 1;
                    t[i][j][k] = self.partial(a);
                }
            }
        }
        t
    }

    /// `g(self)` given `g(v), g'(v), g''(v)/2, g'''(v)/6` at `v = self.value()`.
    pub fn compose(&self, taylor: [f64; 4]) -> Self {
        let mut h = *self;
        h.0[0] = 0.0;
        let h2 = h * h;
        let h3 = h2 * h;
        let mut out = Jet3::constant(taylor[0]);
        for k in 1..NCOEF {
            out.0[k] = taylor[1] * h.0[k] + taylor[2] * h2.0[k] + taylor[3] * h3.0[k];
        }
        out
    }
}

impl Add for Jet3 {
    type Output = Jet3;
    fn add(mut self, rhs: Jet3) -> Jet3 {
        self += rhs;
        self
    }
}

impl AddAssign for Jet3 {
    fn add_assign(&mut self, rhs: Jet3) {
        for (a, b) in self.0.iter_mut().zip(rhs.0) {
            *a += b;
        }
    }
}

impl Sub for Jet3 {
    type Output = Jet3;
    fn sub(mut self, rhs: Jet3) -> Jet3 {
        for (a, b) in self.0.iter_mut().zip(rhs.0) {
            *a -= b;
        }
        self
    }
}

impl Neg for Jet3 {
    type Output = Jet3;
    fn neg(mut self) -> Jet3 {
        self.0.iter_mut().for_each(|a| *a = -*a);
        self
    }
}

impl Mul for Jet3 {
    type Output = Jet3;
    fn mul(self, rhs: Jet3) -> Jet3 {
        let mut out = [0.0; NCOEF];
        for &[i, j, k] in PRODUCTS.iter() {
            out[k as usize] += self.0[i as usize] * rhs.0[j as usize];
        }
        Jet3(out)
    }
}

impl Mul<f64> for Jet3 {
    type Output = Jet3;
    fn mul(mut self, rhs: f64) -> Jet3 {
        self.0.iter_mut().for_each(|a| *a *= rhs);
        self
    }
}

impl Add<f64> for Jet3 {
    type Output = Jet3;
    fn add(mut self, rhs: f64) -> Jet3 {
        self.0[0] += rhs;
        self
    }
}

impl Div for Jet3 {
    type Output = Jet3;
    fn div(self, rhs: Jet3) -> Jet3 {
        self * rhs.recip()
    }
}

/// Arithmetic shared by plain floats and jets, so integrands are written once.
pub trait Scalar:
    Copy + Add<Output = Self> + Sub<Output = Self> + Mul<Output = Self> + Neg<Output = Self> + Mul<f64, Output = Self>
{
    fn from_f64(v: f64) -> Self;
    fn value(&self) -> f64;
    fn recip(self) -> Self;
    fn sqrt(self) -> Self;
}

impl Scalar for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
    fn value(&self) -> f64 {
        *self
    }
    fn recip(self) -> Self {
        1.0 / self
    }
    fn sqrt(self) -> Self {
        f64::sqrt(self)
    }
}

impl Scalar for Jet3 {
    fn from_f64(v: f64) -> Self {
        Jet3::constant(v)
    }
    fn value(&self) -> f64 {
        self.0[0]
    }
    fn recip(self) -> Self {
        let r = 1.0 / self.0[0];
        self.compose([r, -r * r, r * r * r, -r * r * r * r])
    }
    fn sqrt(self) -> Self {
        let v = self.0[0];
        let s = v.sqrt();
        self.compose([s, 0.5 / s, -0.125 / (s * v), 0.0625 / (s * v * v)])
    }
}
