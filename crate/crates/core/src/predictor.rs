//! Far-field boundary conditions built from continuous multipole coefficients.
//!
//! `ĝ(x) = a10 : ∇G0 + a11 : ∇G1 + a20 : ∇²G0 + a30 : ∇³G0`, where each
//! coefficient's first index selects the Green's function column `k` and the
//! rest contract with derivative directions.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::greens::{KernelCache, KernelDerivatives, QuadratureSpec, SymbolData};
use crate::lattice::Vec3;
use crate::moments::CoeffsA;

/// A predictor value and whether the point fell inside the excluded core.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PredictorValue {
    pub value: Vec3,
    pub in_core: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictorField {
    coeffs: CoeffsA,
    core_radius: f64,
}

impl PredictorField {
    pub fn build(coeffs: CoeffsA, core_radius: f64) -> Self {
        PredictorField { coeffs, core_radius }
    }

    pub fn zero() -> Self {
        PredictorField { coeffs: CoeffsA::default(), core_radius: 0.0 }
    }

    pub fn coeffs(&self) -> &CoeffsA {
        &self.coeffs
    }

    pub fn core_radius(&self) -> f64 {
        self.core_radius
    }

    pub fn is_zero(&self) -> bool {
        self.coeffs.is_zero()
    }

    fn excluded(&self, x: &Vec3) -> Option<PredictorValue> {
        (self.is_zero() || x.norm() <= self.core_radius || x.norm() == 0.0)
            .then(|| PredictorValue { value: Vec3::zeros(), in_core: !self.is_zero() })
    }

    /// Evaluate by computing the kernel derivatives at `x` directly.
    pub fn eval(&self, data: &SymbolData, quad: QuadratureSpec, x: &Vec3) -> Result<PredictorValue> {
        if let Some(v) = self.excluded(x) {
            return Ok(v);
        }
        let d = KernelDerivatives::compute(data, x, quad)?;
        Ok(PredictorValue { value: contract(&self.coeffs, &d), in_core: false })
    }

    /// Bind to a kernel table; coefficients are pre-rotated once per symmetry op.
    pub fn bind<'a>(&self, cache: &'a KernelCache) -> BoundPredictor<'a> {
        let rotated = cache.group().ops().iter().map(|q| self.coeffs.rotated(q)).collect();
        BoundPredictor { field: *self, cache, rotated }
    }
}

/// `Σ_k` of each coefficient contracted against the matching derivative tensor.
pub fn contract(a: &CoeffsA, d: &KernelDerivatives) -> Vec3 {
    let mut u = Vec3::zeros();
    for i in 0..3 {
        let mut acc = 0.0;
        for k in 0..3 {
            let ik = 3 * i + k;
            for j in 0..3 {
                acc += a.a10[k][j] * d.d1[3 * ik + j] + a.a11[k][j] * d.g1_grad[3 * ik + j];
                for m in 0..3 {
                    acc += a.a20[k][j][m] * d.d2[9 * ik + 3 * j + m];
                    let t = &d.d3[27 * ik + 9 * j + 3 * m..27 * ik + 9 * j + 3 * m + 3];
                    acc += a.a30[k][j][m][0] * t[0] + a.a30[k][j][m][1] * t[1] + a.a30[k][j][m][2] * t[2];
                }
            }
        }
        u[i] = acc;
    }
    u
}

/// A predictor evaluated through a [`KernelCache`].
#[derive(Clone, Debug)]
pub struct BoundPredictor<'a> {
    field: PredictorField,
    cache: &'a KernelCache,
    rotated: Vec<CoeffsA>,
}

impl BoundPredictor<'_> {
    pub fn field(&self) -> &PredictorField {
        &self.field
    }

    /// With `x = Qᵀ x_rep`, `ĝ_a(x) = Qᵀ ĝ_{Q·a}(x_rep)`.
    pub fn eval(&self, x: &Vec3) -> Result<PredictorValue> {
        if let Some(v) = self.field.excluded(x) {
            return Ok(v);
        }
        let value = match self.cache.locate(x) {
            Some(r) => self.cache.op(r.op).transpose() * contract(&self.rotated[r.op], self.cache.entry(r.entry)),
            None => contract(&self.field.coeffs, &self.cache.derivatives(x)?),
        };
        Ok(PredictorValue { value, in_core: false })
    }

    pub fn value(&self, x: &Vec3) -> Result<Vec3> {
        Ok(self.eval(x)?.value)
    }
}
