//! One-dimensional multiquadric RBF interpolation with exact first and second
//! derivatives.
//!
//! A [`NodeSet`] owns the centers, the LU factorization of the Gram matrix
//! `R_ij = φ(|xᵢ − xⱼ|)` and the kernel matrices needed to evaluate an
//! interpolant and its derivatives back at the centers. Fitting values on the
//! same centers only costs a pair of triangular solves.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector, LU};

use crate::error::{Error, Result};

/// Condition estimates above this are recorded as a warning; the fit still proceeds.
pub const CONDITION_WARNING: f64 = 1e12;

/// `φ(r) = sqrt(1 + r²/ε²)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Multiquadric {
    shape: f64,
    inv_shape_sq: f64,
}

impl Multiquadric {
    pub fn new(shape: f64) -> Result<Self> {
        if !(shape > 0.0 && shape.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "shape parameter must be positive, got {shape}"
            )));
        }
        Ok(Self {
            shape,
            inv_shape_sq: 1.0 / (shape * shape),
        })
    }

    pub fn shape(&self) -> f64 {
        self.shape
    }

    #[inline]
    pub fn phi(&self, r: f64) -> f64 {
        (1.0 + r * r * self.inv_shape_sq).sqrt()
    }

    /// `d/dx φ(|x − c|)` at signed displacement `d = x − c`.
    #[inline]
    pub fn d1(&self, d: f64) -> f64 {
        d * self.inv_shape_sq / self.phi(d)
    }

    /// `d²/dx² φ(|x − c|)` at signed displacement `d = x − c`.
    #[inline]
    pub fn d2(&self, d: f64) -> f64 {
        let p = self.phi(d);
        self.inv_shape_sq / (p * p * p)
    }
}

/// A fitted interpolant `I(x) = Σ ξᵢ φ(|x − xᵢ|)`.
#[derive(Debug, Clone)]
pub struct Interpolant {
    centers: Arc<[f64]>,
    weights: Vec<f64>,
    kernel: Multiquadric,
}

impl Interpolant {
    pub fn centers(&self) -> &[f64] {
        &self.centers
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn shape(&self) -> f64 {
        self.kernel.shape
    }

    pub fn eval(&self, x: f64) -> f64 {
        self.centers
            .iter()
            .zip(&self.weights)
            .map(|(c, w)| w * self.kernel.phi(x - c))
            .sum()
    }

    pub fn eval_d1(&self, x: f64) -> f64 {
        self.centers
            .iter()
            .zip(&self.weights)
            .map(|(c, w)| w * self.kernel.d1(x - c))
            .sum()
    }

    pub fn eval_d2(&self, x: f64) -> f64 {
        self.centers
            .iter()
            .zip(&self.weights)
            .map(|(c, w)| w * self.kernel.d2(x - c))
            .sum()
    }

    /// First and second derivative in one pass (one square root per center).
    pub fn eval_derivatives(&self, x: f64) -> (f64, f64) {
        let k = self.kernel.inv_shape_sq;
        let mut d1 = 0.0;
        let mut d2 = 0.0;
        for (c, w) in self.centers.iter().zip(&self.weights) {
            let d = x - c;
            let p = (1.0 + d * d * k).sqrt();
            let inv = 1.0 / p;
            d1 += w * d * k * inv;
            d2 += w * k * inv * inv * inv;
        }
        (d1, d2)
    }
}

/// Centers plus the factored Gram matrix, shared across every fit on them.
#[derive(Debug)]
pub struct NodeSet {
    centers: Arc<[f64]>,
    kernel: Multiquadric,
    gram: DMatrix<f64>,
    lu: LU<f64, nalgebra::Dyn, nalgebra::Dyn>,
    grad: DMatrix<f64>,
    hess: DMatrix<f64>,
    condition: f64,
}

impl NodeSet {
    pub fn new(centers: Vec<f64>, shape: f64) -> Result<Self> {
        let kernel = Multiquadric::new(shape)?;
        if centers.is_empty() {
            return Err(Error::InvalidInput("at least one center is required".into()));
        }
        if centers.iter().any(|c| !c.is_finite()) {
            return Err(Error::InvalidInput("centers must be finite".into()));
        }
        if centers.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::InvalidInput("centers must be strictly increasing".into()));
        }
        let n = centers.len();
        let gram = DMatrix::from_fn(n, n, |i, j| kernel.phi(centers[i] - centers[j]));
        let grad = DMatrix::from_fn(n, n, |i, j| kernel.d1(centers[i] - centers[j]));
        let hess = DMatrix::from_fn(n, n, |i, j| kernel.d2(centers[i] - centers[j]));
        let sv = gram.clone().singular_values();
        let smax = sv.max();
        let smin = sv.min();
        let condition = if smin > 0.0 { smax / smin } else { f64::INFINITY };
        if !(condition * f64::EPSILON < 1.0) {
            return Err(Error::IllConditioned { condition });
        }
        // Multiquadric Gram matrices are not SPD, so partial-pivot LU, not Cholesky.
        let lu = gram.clone().lu();
        Ok(Self {
            centers: centers.into(),
            kernel,
            gram,
            lu,
            grad,
            hess,
            condition,
        })
    }

    pub fn centers(&self) -> &[f64] {
        &self.centers
    }

    pub fn len(&self) -> usize {
        self.centers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.centers.is_empty()
    }

    pub fn kernel(&self) -> Multiquadric {
        self.kernel
    }

    /// 2-norm condition estimate of the Gram matrix.
    pub fn condition(&self) -> f64 {
        self.condition
    }

    pub fn condition_warning(&self) -> bool {
        self.condition > CONDITION_WARNING
    }

    pub fn gram(&self) -> &DMatrix<f64> {
        &self.gram
    }

    /// Solves `R ξ = y` and checks the residual.
    pub fn fit(&self, values: &[f64]) -> Result<Interpolant> {
        if values.len() != self.len() {
            return Err(Error::InvalidInput(format!(
                "{} values for {} centers",
                values.len(),
                self.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("sample values must be finite".into()));
        }
        let y = DVector::from_column_slice(values);
        let xi = self.lu.solve(&y).ok_or(Error::IllConditioned {
            condition: self.condition,
        })?;
        let resid = (&self.gram * &xi - &y).amax();
        if !(resid <= 1e-8 * (1.0 + y.amax())) {
            return Err(Error::IllConditioned {
                condition: self.condition,
            });
        }
        Ok(Interpolant {
            centers: Arc::clone(&self.centers),
            weights: xi.as_slice().to_vec(),
            kernel: self.kernel,
        })
    }

    /// Interpolant values at the centers.
    pub fn values_at_nodes(&self, interp: &Interpolant) -> Vec<f64> {
        self.apply(&self.gram, interp)
    }

    /// First and second derivatives of `interp` at the centers.
    pub fn derivatives_at_nodes(&self, interp: &Interpolant) -> (Vec<f64>, Vec<f64>) {
        (self.apply(&self.grad, interp), self.apply(&self.hess, interp))
    }

    fn apply(&self, kernel: &DMatrix<f64>, interp: &Interpolant) -> Vec<f64> {
        debug_assert_eq!(interp.weights.len(), self.len());
        let w = DVector::from_column_slice(&interp.weights);
        (kernel * w).as_slice().to_vec()
    }
}

/// One-shot fit; use [`NodeSet`] when fitting repeatedly on the same centers.
pub fn fit(centers: Vec<f64>, values: &[f64], shape: f64) -> Result<Interpolant> {
    NodeSet::new(centers, shape)?.fit(values)
}
