//! The random kernel `Sigma(q; N) = sigma(q^# N) sigma(q^# N)^T` and its
//! log-moment-generating function
//!
//! ```text
//! kappa(eta; q) = log E[ exp(<eta, Sigma(q; N)>_F) ],   N ~ N(0, I_A)
//! ```
//!
//! evaluated by Monte Carlo, by polar Gauss-Kronrod quadrature (|A| <= 2),
//! by the closed form for one-dimensional ReLU, and by the ReLU power series.
//! All evaluators share one tilted-moment engine so the Legendre solver can
//! ask for values, gradients (`E_eta[Sigma]`) and Hessians from the same
//! samples or nodes.

mod engine;
pub mod series;

use serde::{Deserialize, Serialize};

use crate::activation::Activation;
use crate::error::{Error, Result};
use crate::linalg::{Matrix, PsdMatrix, SymMatrix};
use crate::scalar::Scalar;
use crate::{CovMatrix, DualMatrix};

pub(crate) use engine::{feature_weights, tilted_moments, Level};
#[allow(unused_imports)]
pub(crate) use engine::Tilted;
pub use series::{
    first_order_kappa, half_moment, kappa_relu_series, ln_half_moment, SeriesResult, SeriesTerm,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KappaMethod {
    Mc,
    Quadrature,
    ClosedRelu1d,
    Series,
}

impl std::str::FromStr for KappaMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mc" => Ok(Self::Mc),
            "quad" | "quadrature" => Ok(Self::Quadrature),
            "closed" | "closed_relu_1d" => Ok(Self::ClosedRelu1d),
            "series" => Ok(Self::Series),
            other => Err(Error::Precondition(format!("unknown kappa method `{other}`"))),
        }
    }
}

/// Sampling distribution for the Monte Carlo evaluator.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Proposal {
    /// Plain standard normal draws.
    Standard,
    /// Draw `N = tau Z` with `tau^2 = 1 / (1 - 2 m)`, `m` the largest asymptotic exponent of
    /// `<eta, Sigma>` per unit `|N|^2`, and reweight by the density ratio. Keeps the estimator's
    /// variance finite up to the boundary of the finiteness domain. The same `Z` stream is used
    /// for every `eta`, so random numbers stay common across calls.
    ScaledNormal,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct KappaOptions {
    /// `None` picks the closed form for one-dimensional ReLU, quadrature for |A| <= 2, else MC.
    pub method: Option<KappaMethod>,
    pub samples: usize,
    pub series_order: usize,
    pub series_tol: f64,
    pub seed: u64,
    pub workers: usize,
    pub proposal: Proposal,
    pub quad_rel_tol: f64,
    /// For positively homogeneous activations in two dimensions, integrate the radial
    /// direction in closed form and only the angle numerically.
    pub radial_closed_form: bool,
}

impl Default for KappaOptions {
    fn default() -> Self {
        Self {
            method: None,
            samples: 100_000,
            series_order: 12,
            series_tol: 1e-8,
            seed: 0,
            workers: 1,
            proposal: Proposal::ScaledNormal,
            quad_rel_tol: 1e-12,
            radial_closed_form: true,
        }
    }
}

impl KappaOptions {
    pub fn with_method(method: KappaMethod) -> Self {
        Self { method: Some(method), ..Self::default() }
    }

    pub fn mc(samples: usize, seed: u64) -> Self {
        Self { method: Some(KappaMethod::Mc), samples, seed, ..Self::default() }
    }

    /// The method actually used for a kernel of dimension `dim`.
    pub fn resolve(&self, dim: usize, act: &Activation) -> KappaMethod {
        self.method.unwrap_or(if dim == 1 && act.is_relu() {
            KappaMethod::ClosedRelu1d
        } else if dim <= 2 {
            KappaMethod::Quadrature
        } else {
            KappaMethod::Mc
        })
    }
}

/// Value of `kappa(eta; q)` with estimation metadata. Infinite values are `f64::INFINITY`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct KappaEstimate {
    pub value: f64,
    pub std_error: f64,
    pub method: KappaMethod,
    pub samples_or_order: usize,
    /// Set when the Monte Carlo estimate is dominated by its largest order statistics or
    /// when the series truncation bound exceeds the requested tolerance.
    pub unreliable: bool,
    pub truncation_bound: Option<f64>,
    pub diagnostic: Option<String>,
}

impl KappaEstimate {
    pub fn is_infinite(&self) -> bool {
        self.value == f64::INFINITY
    }

    pub fn is_finite(&self) -> bool {
        self.value.is_finite()
    }
}

/// `s s^T` with `s_a = sigma((q^# N)_a)`.
pub fn sigma_outer<T: Scalar>(q: &PsdMatrix<T>, n: &[T], act: &Activation) -> Result<PsdMatrix<T>> {
    let u = q.root().matrix().apply(n)?;
    let s = act.evaluate(&u);
    Ok(PsdMatrix::gram(&Matrix::column(&s)))
}

/// `log(1/2 + 1/2 (1 - 2 eta q)^(-1/2))` for `eta q < 1/2`, `None` (infinite) otherwise.
pub fn closed_relu_1d<T: Scalar>(eta: T, q: T) -> Option<T> {
    let x = T::lit(2.0) * eta * q;
    if x >= T::one() {
        return None;
    }
    let s = (T::one() - x).sqrt().recip();
    Some(((T::one() + s) * T::lit(0.5)).ln())
}

/// Radius of the Frobenius ball `{|eta|_F < (2 C |q^#|_F)^-2}` on which `kappa(.; q)` is finite.
pub fn finiteness_radius<T: Scalar>(q: &PsdMatrix<T>, act: &Activation) -> T {
    let root_norm = q.root().frobenius_norm();
    if root_norm.is_zero() {
        return T::infinity();
    }
    let denom = T::lit(2.0) * T::lit(act.growth_c()) * root_norm;
    (denom * denom).recip()
}

fn check_dims(eta: &DualMatrix, q: &CovMatrix) -> Result<()> {
    if eta.dim() != q.dim() {
        return Err(Error::DimensionMismatch {
            op: "kappa",
            left_rows: eta.dim(),
            left_cols: eta.dim(),
            right_rows: q.dim(),
            right_cols: q.dim(),
        });
    }
    Ok(())
}

/// Estimates `kappa(eta; q)` with the requested (or automatically chosen) method.
pub fn kappa_eval(
    eta: &DualMatrix,
    q: &CovMatrix,
    act: &Activation,
    opts: &KappaOptions,
) -> Result<KappaEstimate> {
    check_dims(eta, q)?;
    let method = opts.resolve(q.dim(), act);
    if method == KappaMethod::Series {
        let a = diagonal_variances(q)?;
        if !act.is_relu() {
            return Err(Error::Precondition("the power series is derived for ReLU only".into()));
        }
        let r = kappa_relu_series(eta, &a, opts.series_order, opts.series_tol)?;
        return Ok(KappaEstimate {
            value: r.value,
            std_error: 0.0,
            method,
            samples_or_order: r.order,
            unreliable: r.flagged,
            truncation_bound: Some(r.truncation_bound),
            diagnostic: r.flagged.then(|| {
                format!("truncation bound {:e} exceeds tolerance {:e}", r.truncation_bound, opts.series_tol)
            }),
        });
    }
    let t = tilted_moments(eta, q, act, opts, method, Level::Value)?;
    Ok(t.estimate())
}

/// `grad_eta kappa = E[Sigma e^<eta,Sigma>] / E[e^<eta,Sigma>]`, using the same random numbers
/// (or nodes) as [`kappa_eval`] with the same options.
pub fn kappa_gradient(
    eta: &DualMatrix,
    q: &CovMatrix,
    act: &Activation,
    opts: &KappaOptions,
) -> Result<DualMatrix> {
    check_dims(eta, q)?;
    let method = opts.resolve(q.dim(), act);
    if method == KappaMethod::Series {
        return Err(Error::Precondition("series evaluator provides values only".into()));
    }
    let t = tilted_moments(eta, q, act, opts, method, Level::Gradient)?;
    if !t.log_mgf.is_finite() {
        return Err(Error::Diverged(
            t.diagnostic.unwrap_or_else(|| "kappa is infinite at this eta".to_string()),
        ));
    }
    SymMatrix::from_upper(q.dim(), &t.mean)
}

/// `E[Sigma(q; N)]`: deterministic quadrature for |A| <= 2 (closed form for 1-D ReLU), MC otherwise.
pub fn mean_sigma(q: &CovMatrix, act: &Activation, opts: &KappaOptions) -> Result<CovMatrix> {
    let dim = q.dim();
    let method = match opts.method {
        Some(KappaMethod::Mc) => KappaMethod::Mc,
        _ if dim == 1 && act.is_relu() => KappaMethod::ClosedRelu1d,
        _ if dim <= 2 => KappaMethod::Quadrature,
        _ => KappaMethod::Mc,
    };
    let eta = SymMatrix::zeros(dim);
    let t = tilted_moments(&eta, q, act, opts, method, Level::Gradient)?;
    let m = SymMatrix::from_upper(dim, &t.mean)?;
    PsdMatrix::from_sym(m)
}

fn diagonal_variances(q: &CovMatrix) -> Result<Vec<f64>> {
    let n = q.dim();
    for i in 0..n {
        for j in 0..n {
            if i != j && q.get(i, j) != 0.0 {
                return Err(Error::Precondition("the power series requires a diagonal q".into()));
            }
        }
    }
    let a: Vec<f64> = (0..n).map(|i| q.get(i, i)).collect();
    if a.iter().any(|&x| x <= 0.0) {
        return Err(Error::Precondition("the power series requires a positive diagonal".into()));
    }
    Ok(a)
}
