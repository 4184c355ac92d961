//! Financial model inputs: asset dynamics, the admissible control set and the
//! target wealth schedule, together with the closed-form boundary values of
//! the value function.
//!
//! The risk-free asset grows at rate `r`; the `m` risky assets follow
//! correlated geometric Brownian motion with drift `b` and covariance
//! `Σ = σσᵀ`. Admissible portfolios satisfy `π ≥ 0` and `1ᵀπ ≤ π̄`.

use std::borrow::Cow;

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct MarketParams {
    risk_free: f64,
    drift: DVector<f64>,
    covariance: DMatrix<f64>,
    leverage_cap: f64,
}

impl MarketParams {
    /// Builds the parameter set from a covariance matrix `Σ = σσᵀ`.
    pub fn new(
        risk_free: f64,
        drift: Vec<f64>,
        covariance: DMatrix<f64>,
        leverage_cap: f64,
    ) -> Result<Self> {
        let m = drift.len();
        if m == 0 {
            return Err(Error::InvalidInput("at least one risky asset is required".into()));
        }
        if covariance.nrows() != m || covariance.ncols() != m {
            return Err(Error::InvalidInput(format!(
                "covariance is {}x{} but there are {m} assets",
                covariance.nrows(),
                covariance.ncols()
            )));
        }
        if !risk_free.is_finite()
            || drift.iter().any(|b| !b.is_finite())
            || covariance.iter().any(|s| !s.is_finite())
        {
            return Err(Error::InvalidInput("market parameters must be finite".into()));
        }
        if !(leverage_cap >= 0.0 && leverage_cap.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "leverage cap must be a finite non-negative number, got {leverage_cap}"
            )));
        }
        for (i, b) in drift.iter().enumerate() {
            if b - risk_free <= 0.0 {
                return Err(Error::InvalidInput(format!(
                    "drift of asset {} ({b}) must exceed the risk-free rate ({risk_free})",
                    i + 1
                )));
            }
        }
        let scale = covariance.amax().max(f64::MIN_POSITIVE);
        for i in 0..m {
            for j in 0..i {
                if (covariance[(i, j)] - covariance[(j, i)]).abs() > 1e-12 * scale {
                    return Err(Error::InvalidInput(format!(
                        "covariance is not symmetric at ({}, {})",
                        i + 1,
                        j + 1
                    )));
                }
            }
        }
        let trace = covariance.trace();
        let eig = SymmetricEigen::new(covariance.clone());
        let min_eig = eig.eigenvalues.min();
        if min_eig < -1e-10 * trace.abs() {
            return Err(Error::InvalidInput(format!(
                "covariance is not positive semidefinite (smallest eigenvalue {min_eig:.3e})"
            )));
        }
        Ok(Self {
            risk_free,
            drift: DVector::from_vec(drift),
            covariance,
            leverage_cap,
        })
    }

    /// Builds `Σ = D·C·D` from per-asset volatilities and a correlation matrix.
    pub fn from_vols_corr(
        risk_free: f64,
        drift: Vec<f64>,
        vols: &[f64],
        corr: &DMatrix<f64>,
        leverage_cap: f64,
    ) -> Result<Self> {
        let m = vols.len();
        if corr.nrows() != m || corr.ncols() != m {
            return Err(Error::InvalidInput(format!(
                "correlation is {}x{} but {m} volatilities were given",
                corr.nrows(),
                corr.ncols()
            )));
        }
        if vols.iter().any(|v| *v < 0.0) {
            return Err(Error::InvalidInput("volatilities must be non-negative".into()));
        }
        let cov = DMatrix::from_fn(m, m, |i, j| vols[i] * corr[(i, j)] * vols[j]);
        Self::new(risk_free, drift, cov, leverage_cap)
    }

    pub fn with_leverage_cap(mut self, leverage_cap: f64) -> Result<Self> {
        if !(leverage_cap >= 0.0 && leverage_cap.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "leverage cap must be a finite non-negative number, got {leverage_cap}"
            )));
        }
        self.leverage_cap = leverage_cap;
        Ok(self)
    }

    pub fn num_assets(&self) -> usize {
        self.drift.len()
    }

    pub fn risk_free(&self) -> f64 {
        self.risk_free
    }

    pub fn drift(&self) -> &DVector<f64> {
        &self.drift
    }

    pub fn covariance(&self) -> &DMatrix<f64> {
        &self.covariance
    }

    pub fn leverage_cap(&self) -> f64 {
        self.leverage_cap
    }

    /// Leverage is allowed iff the cap exceeds one.
    pub fn allows_leverage(&self) -> bool {
        self.leverage_cap > 1.0
    }

    /// `b − r·1`; strictly positive by construction.
    pub fn excess_drift(&self) -> DVector<f64> {
        self.drift.map(|b| b - self.risk_free)
    }
}

/// Market coefficients as functions of time.
///
/// All shipped experiments use constant coefficients, for which
/// [`MarketParams`] is its own model. The leverage cap is not time dependent.
pub trait MarketModel: Sync {
    fn params_at(&self, t: f64) -> Cow<'_, MarketParams>;

    fn num_assets(&self) -> usize {
        self.params_at(0.0).num_assets()
    }

    fn leverage_cap(&self) -> f64 {
        self.params_at(0.0).leverage_cap()
    }
}

impl MarketModel for MarketParams {
    fn params_at(&self, _t: f64) -> Cow<'_, MarketParams> {
        Cow::Borrowed(self)
    }

    fn num_assets(&self) -> usize {
        MarketParams::num_assets(self)
    }

    fn leverage_cap(&self) -> f64 {
        self.leverage_cap
    }
}

/// Shape of the deterministic target wealth `f(t)`.
#[derive(Debug, Clone, PartialEq)]
pub enum TargetKind {
    /// `f(t) = (1 + (r̄ + ε^M)·t)·x₀`.
    Affine {
        initial_wealth: f64,
        required_return: f64,
        margin: f64,
    },
    /// `f(t) = κ·L(t)` with `L` the piecewise-linear interpolant of `knots`.
    Tabulated { knots: Vec<(f64, f64)>, scale: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct TargetSpec {
    kind: TargetKind,
    horizon: f64,
}

impl TargetSpec {
    pub fn affine(
        initial_wealth: f64,
        required_return: f64,
        margin: f64,
        horizon: f64,
    ) -> Result<Self> {
        if !(initial_wealth > 0.0 && initial_wealth.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "initial wealth must be positive, got {initial_wealth}"
            )));
        }
        if !(margin >= 0.0) || !required_return.is_finite() || !margin.is_finite() {
            return Err(Error::InvalidInput(format!(
                "margin must be non-negative and finite, got {margin}"
            )));
        }
        Self::checked(
            TargetKind::Affine {
                initial_wealth,
                required_return,
                margin,
            },
            horizon,
        )
    }

    /// `knots` are `(t, B(t) − C(t))` pairs; the target is `scale` times their
    /// linear interpolation.
    pub fn tabulated(knots: Vec<(f64, f64)>, scale: f64, horizon: f64) -> Result<Self> {
        if knots.len() < 2 {
            return Err(Error::InvalidInput("tabulated target needs at least two knots".into()));
        }
        if knots.windows(2).any(|w| !(w[1].0 > w[0].0)) {
            return Err(Error::InvalidInput("knot times must be strictly increasing".into()));
        }
        if knots.iter().any(|(t, v)| !t.is_finite() || !v.is_finite()) {
            return Err(Error::InvalidInput("knots must be finite".into()));
        }
        if !(scale > 0.0 && scale.is_finite()) {
            return Err(Error::InvalidInput(format!("scale must be positive, got {scale}")));
        }
        let (first, last) = (knots[0].0, knots[knots.len() - 1].0);
        if first > 0.0 || last < horizon {
            return Err(Error::InvalidInput(format!(
                "knots span [{first}, {last}] but must cover [0, {horizon}]"
            )));
        }
        Self::checked(TargetKind::Tabulated { knots, scale }, horizon)
    }

    fn checked(kind: TargetKind, horizon: f64) -> Result<Self> {
        if !(horizon > 0.0 && horizon.is_finite()) {
            return Err(Error::InvalidInput(format!("horizon must be positive, got {horizon}")));
        }
        let spec = Self { kind, horizon };
        // f is affine or piecewise linear, so positivity on [0, T] is decided
        // at the endpoints and interior knots.
        let lowest = spec
            .breakpoints(0.0)
            .into_iter()
            .map(|t| spec.eval_unchecked(t))
            .fold(f64::INFINITY, f64::min);
        if !(lowest > 0.0) {
            return Err(Error::InvalidInput(format!(
                "target wealth must stay positive on [0, T], minimum is {lowest}"
            )));
        }
        Ok(spec)
    }

    pub fn kind(&self) -> &TargetKind {
        &self.kind
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    /// Starting wealth of the investor: `x₀`, or the unscaled tabulated value
    /// `B(0) − C(0)`.
    pub fn initial_wealth(&self) -> f64 {
        match &self.kind {
            TargetKind::Affine { initial_wealth, .. } => *initial_wealth,
            TargetKind::Tabulated { knots, .. } => interp_linear(knots, 0.0),
        }
    }

    /// The same schedule without margin uplift: `ε^M = 0` or `κ = 1`.
    pub fn nominal(&self) -> TargetSpec {
        let kind = match &self.kind {
            TargetKind::Affine {
                initial_wealth,
                required_return,
                ..
            } => TargetKind::Affine {
                initial_wealth: *initial_wealth,
                required_return: *required_return,
                margin: 0.0,
            },
            TargetKind::Tabulated { knots, .. } => TargetKind::Tabulated {
                knots: knots.clone(),
                scale: 1.0,
            },
        };
        TargetSpec {
            kind,
            horizon: self.horizon,
        }
    }

    fn check_time(&self, t: f64) -> Result<f64> {
        let slack = 1e-12 * self.horizon.max(1.0);
        if !(t >= -slack && t <= self.horizon + slack) {
            return Err(Error::Domain {
                what: "t",
                value: t,
                lo: 0.0,
                hi: self.horizon,
            });
        }
        Ok(t.clamp(0.0, self.horizon))
    }

    /// Target wealth `f(t)`.
    pub fn target(&self, t: f64) -> Result<f64> {
        let t = self.check_time(t)?;
        Ok(self.eval_unchecked(t))
    }

    pub(crate) fn eval_unchecked(&self, t: f64) -> f64 {
        match &self.kind {
            TargetKind::Affine {
                initial_wealth,
                required_return,
                margin,
            } => (1.0 + (required_return + margin) * t) * initial_wealth,
            TargetKind::Tabulated { knots, scale } => scale * interp_linear(knots, t),
        }
    }

    /// Times in `[from, T]` where `f` may change slope, including both ends.
    fn breakpoints(&self, from: f64) -> Vec<f64> {
        let mut pts = vec![from];
        if let TargetKind::Tabulated { knots, .. } = &self.kind {
            pts.extend(
                knots
                    .iter()
                    .map(|k| k.0)
                    .filter(|&t| t > from && t < self.horizon),
            );
        }
        pts.push(self.horizon);
        pts
    }

    /// `x* = max_{t∈[0,T]} f(t)`, the right boundary of the value function.
    pub fn x_star(&self) -> f64 {
        self.breakpoints(0.0)
            .into_iter()
            .map(|t| self.eval_unchecked(t))
            .fold(f64::NEG_INFINITY, f64::max)
    }

    /// `V_t(0) = ½ f(T)₊² + (1/2T) ∫_t^T f(s)₊² ds`, integrated exactly.
    pub fn boundary_left_value(&self, t: f64) -> Result<f64> {
        let t = self.check_time(t)?;
        let f_end = self.eval_unchecked(self.horizon).max(0.0);
        let integral = match &self.kind {
            TargetKind::Affine {
                initial_wealth,
                required_return,
                margin,
            } => {
                let a = required_return + margin;
                let big_t = self.horizon;
                // ∫ (1 + a s)² ds expanded so that a = 0 needs no special case.
                let poly = (big_t - t)
                    + a * (big_t * big_t - t * t)
                    + a * a * (big_t.powi(3) - t.powi(3)) / 3.0;
                initial_wealth * initial_wealth * poly
            }
            TargetKind::Tabulated { .. } => {
                let pts = self.breakpoints(t);
                pts.windows(2)
                    .map(|w| {
                        let (fa, fb) = (self.eval_unchecked(w[0]), self.eval_unchecked(w[1]));
                        segment_square_integral(w[1] - w[0], fa, fb)
                    })
                    .sum()
            }
        };
        Ok(0.5 * f_end * f_end + integral / (2.0 * self.horizon))
    }
}

/// `∫₀ᴸ g(s)₊² ds` for `g` linear from `fa` to `fb` over a segment of length `len`.
fn segment_square_integral(len: f64, fa: f64, fb: f64) -> f64 {
    if fa >= 0.0 && fb >= 0.0 {
        len * (fa * fa + fa * fb + fb * fb) / 3.0
    } else if fa <= 0.0 && fb <= 0.0 {
        0.0
    } else {
        // Only the positive part contributes; it is a triangle-shaped piece
        // from the zero crossing to the positive end.
        let pos = fa.max(fb);
        let frac = pos / (fa - fb).abs();
        len * frac * pos * pos / 3.0
    }
}

fn interp_linear(knots: &[(f64, f64)], t: f64) -> f64 {
    let idx = knots.partition_point(|k| k.0 <= t);
    if idx == 0 {
        return knots[0].1;
    }
    if idx >= knots.len() {
        return knots[knots.len() - 1].1;
    }
    let (t0, v0) = knots[idx - 1];
    let (t1, v1) = knots[idx];
    v0 + (v1 - v0) * (t - t0) / (t1 - t0)
}
