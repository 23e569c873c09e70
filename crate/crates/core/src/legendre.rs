//! Legendre transform `kappa*(y; q) = sup_eta { <eta, y> - kappa(eta; q) }` and the conditional
//! one-layer rate `J`.
//!
//! The supremum is computed by a damped Newton ascent on the concave dual objective in the
//! coordinates `theta = upper(eta)`. Gradients and Hessians come from the tilted moments of the
//! kernel (`E_eta[Sigma]`, `Cov_eta[Sigma]`), so every step costs one kernel evaluation at the
//! current point plus value-only evaluations during the line search.

use serde::{Deserialize, Serialize};

use crate::activation::Activation;
use crate::error::{Error, Result};
use crate::kernel::{mean_sigma, tilted_moments, KappaMethod, KappaOptions, Level};
use crate::linalg::{Matrix, SymMatrix};
use crate::{CovMatrix, DualMatrix};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LegendreStatus {
    Converged,
    /// The supremum is approached as `|eta| -> inf` or the solver stalled; `value` is the best
    /// finite objective found.
    BoundaryLimit,
    /// The objective exceeded the ceiling: `y` lies outside the closed convex hull of the support.
    DivergedInfeasible,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LegendreResult {
    /// `f64::INFINITY` when infeasible.
    pub value: f64,
    pub maximizer_eta: Option<DualMatrix>,
    pub status: LegendreStatus,
    pub iterations: usize,
    /// `|y - grad kappa(maximizer)|_F` at the returned point.
    pub residual: f64,
}

impl LegendreResult {
    pub fn is_infinite(&self) -> bool {
        self.value == f64::INFINITY
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LegendreOptions {
    pub kappa: KappaOptions,
    pub max_iter: usize,
    /// Stop once `|y - grad kappa|_F <= residual_tol (1 + |y|_F)` ...
    pub residual_tol: f64,
    /// ... and the Newton decrement estimate of the remaining gain is at most this.
    pub decrement_tol: f64,
    pub ceiling: f64,
    /// Beyond this `|eta|_F` a terminal point is reported as a limit at infinity.
    pub boundary_norm: f64,
}

impl Default for LegendreOptions {
    fn default() -> Self {
        Self {
            kappa: KappaOptions::default(),
            max_iter: 500,
            residual_tol: 1e-7,
            decrement_tol: 1e-12,
            ceiling: 1e6,
            boundary_norm: 1e8,
        }
    }
}

impl LegendreOptions {
    pub fn with_kappa(kappa: KappaOptions) -> Self {
        Self { kappa, ..Self::default() }
    }
}

struct Objective<'a> {
    y_upper: Vec<f64>,
    weights: Vec<f64>,
    q: &'a CovMatrix,
    act: &'a Activation,
    opts: &'a KappaOptions,
    method: KappaMethod,
    dim: usize,
}

struct Point {
    theta: Vec<f64>,
    value: f64,
    /// `w (y - E_eta[Sigma])`, the gradient in `theta`.
    grad: Vec<f64>,
    hess: Matrix<f64>,
    residual: f64,
}

impl Objective<'_> {
    fn eta(&self, theta: &[f64]) -> DualMatrix {
        SymMatrix::from_upper(self.dim, theta).expect("theta has upper-triangular length")
    }

    fn linear(&self, theta: &[f64]) -> f64 {
        theta.iter().zip(&self.y_upper).zip(&self.weights).map(|((t, y), w)| t * y * w).sum()
    }

    /// Objective value, or `None` when kappa is infinite or flagged unreliable.
    fn value(&self, theta: &[f64]) -> Result<Option<f64>> {
        let t = tilted_moments(&self.eta(theta), self.q, self.act, self.opts, self.method, Level::Value)?;
        if !t.log_mgf.is_finite() || t.unreliable {
            return Ok(None);
        }
        Ok(Some(self.linear(theta) - t.log_mgf))
    }

    fn point(&self, theta: Vec<f64>) -> Result<Option<Point>> {
        let t = tilted_moments(&self.eta(&theta), self.q, self.act, self.opts, self.method, Level::Hessian)?;
        if !t.log_mgf.is_finite() {
            return Ok(None);
        }
        let diff: Vec<f64> = self.y_upper.iter().zip(&t.mean).map(|(y, m)| y - m).collect();
        let residual = diff.iter().zip(&self.weights).map(|(d, w)| w * d * d).sum::<f64>().sqrt();
        let grad = diff.iter().zip(&self.weights).map(|(d, w)| d * w).collect();
        Ok(Some(Point {
            value: self.linear(&theta) - t.log_mgf,
            theta,
            grad,
            hess: t.feature_covariance(),
            residual,
        }))
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Levenberg-regularised Newton direction `(H + mu I)^-1 g`, capped in length.
fn newton_step(hess: &Matrix<f64>, grad: &[f64], cap: f64) -> Vec<f64> {
    let eig = SymMatrix::symmetrize(hess).eigen();
    let top = eig.values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let mu = 1e-12 * top + f64::MIN_POSITIVE;
    let p = grad.len();
    let v = &eig.vectors;
    let mut step = vec![0.0; p];
    for k in 0..p {
        let proj: f64 = (0..p).map(|i| v[(i, k)] * grad[i]).sum();
        let coef = proj / (eig.values[k].max(0.0) + mu);
        for i in 0..p {
            step[i] += coef * v[(i, k)];
        }
    }
    let n = norm(&step);
    if !n.is_finite() {
        let g = norm(grad);
        return grad.iter().map(|x| x / g * cap).collect();
    }
    if n > cap {
        step.iter_mut().for_each(|x| *x *= cap / n);
    }
    step
}

/// `sup_eta <eta, y> - kappa(eta; q)`, starting from `eta = 0`.
pub fn kappa_star(y: &DualMatrix, q: &CovMatrix, act: &Activation, opts: &LegendreOptions) -> Result<LegendreResult> {
    kappa_star_from(y, q, act, opts, None)
}

/// As [`kappa_star`], starting the ascent at `eta0` (which must have finite `kappa`).
pub fn kappa_star_from(
    y: &DualMatrix,
    q: &CovMatrix,
    act: &Activation,
    opts: &LegendreOptions,
    eta0: Option<&DualMatrix>,
) -> Result<LegendreResult> {
    let dim = q.dim();
    if y.dim() != dim {
        return Err(Error::DimensionMismatch { op: "kappa_star", left_rows: y.dim(), left_cols: y.dim(), right_rows: dim, right_cols: dim });
    }
    let method = opts.kappa.resolve(dim, act);
    if method == KappaMethod::Series {
        return Err(Error::Precondition("the Legendre solver needs gradients; series gives values only".into()));
    }
    let obj = Objective {
        y_upper: y.upper(),
        weights: crate::kernel::feature_weights(dim),
        q,
        act,
        opts: &opts.kappa,
        method,
        dim,
    };
    let tol = opts.residual_tol * (1.0 + y.frobenius_norm());
    let start = eta0.map(|e| e.upper()).unwrap_or_else(|| vec![0.0; obj.y_upper.len()]);
    let mut cur = match obj.point(start)? {
        Some(p) => p,
        None => return Err(Error::Precondition("kappa is infinite at the starting point".into())),
    };
    let finish = |p: Point, status: LegendreStatus, iterations: usize| -> LegendreResult {
        let status = if status == LegendreStatus::Converged && norm(&p.theta) > opts.boundary_norm {
            LegendreStatus::BoundaryLimit
        } else {
            status
        };
        LegendreResult {
            value: p.value.max(0.0),
            maximizer_eta: Some(obj.eta(&p.theta)),
            status,
            iterations,
            residual: p.residual,
        }
    };

    for iter in 0..opts.max_iter {
        if cur.value > opts.ceiling {
            return Ok(LegendreResult {
                value: f64::INFINITY,
                maximizer_eta: None,
                status: LegendreStatus::DivergedInfeasible,
                iterations: iter,
                residual: cur.residual,
            });
        }
        let cap = 1f64.max(4.0 * norm(&cur.theta));
        let step = newton_step(&cur.hess, &cur.grad, cap);
        let slope: f64 = step.iter().zip(&cur.grad).map(|(s, g)| s * g).sum();
        if cur.residual <= tol && 0.5 * slope <= opts.decrement_tol {
            return Ok(finish(cur, LegendreStatus::Converged, iter));
        }
        let mut t = 1.0;
        let mut accepted = None;
        for _ in 0..60 {
            let trial: Vec<f64> = cur.theta.iter().zip(&step).map(|(x, s)| x + t * s).collect();
            if let Some(v) = obj.value(&trial)? {
                if v >= cur.value + 1e-4 * t * slope {
                    accepted = Some(trial);
                    break;
                }
            }
            t *= 0.5;
        }
        let next = match accepted {
            Some(theta) => obj.point(theta)?,
            None => None,
        };
        match next {
            Some(p) => cur = p,
            None => {
                let status = if cur.residual <= tol { LegendreStatus::Converged } else { LegendreStatus::BoundaryLimit };
                return Ok(finish(cur, status, iter));
            }
        }
    }
    if cur.value > opts.ceiling {
        return Ok(LegendreResult {
            value: f64::INFINITY,
            maximizer_eta: None,
            status: LegendreStatus::DivergedInfeasible,
            iterations: opts.max_iter,
            residual: cur.residual,
        });
    }
    Ok(finish(cur, LegendreStatus::BoundaryLimit, opts.max_iter))
}

/// Layer parameters entering the conditional rate.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct LayerParams {
    /// Width ratio `gamma_l` in `[1, inf]`.
    pub gamma: f64,
    pub c_b: f64,
    pub c_w: f64,
}

impl LayerParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma >= 1.0) {
            return Err(Error::InvalidConfig(format!("gamma must lie in [1, inf], got {}", self.gamma)));
        }
        if !(self.c_b >= 0.0) || !self.c_b.is_finite() {
            return Err(Error::InvalidConfig(format!("C_b must be finite and >= 0, got {}", self.c_b)));
        }
        if !(self.c_w > 0.0) || !self.c_w.is_finite() {
            return Err(Error::InvalidConfig(format!("C_W must be finite and > 0, got {}", self.c_w)));
        }
        Ok(())
    }
}

/// `C_b 1 + C_W E[Sigma(g)]`, the deterministic image of one layer.
pub fn layer_mean(g_prev: &CovMatrix, layer: &LayerParams, act: &Activation, opts: &KappaOptions) -> Result<CovMatrix> {
    let m = mean_sigma(g_prev, act, opts)?;
    let n = g_prev.dim();
    let shifted = Matrix::from_fn(n, n, |i, j| layer.c_b + layer.c_w * m.get(i, j));
    CovMatrix::from_sym(SymMatrix::symmetrize(&shifted))
}

/// `J(g_next | g_prev) = gamma kappa*((g_next - C_b 1) / C_W; g_prev)`, with `inf * 0 = 0`.
pub fn conditional_rate_j(
    g_next: &CovMatrix,
    g_prev: &CovMatrix,
    layer: &LayerParams,
    act: &Activation,
    opts: &LegendreOptions,
) -> Result<f64> {
    conditional_rate_detail(g_next, g_prev, layer, act, opts, None).map(|(v, _)| v)
}

/// As [`conditional_rate_j`], also returning the Legendre result for finite `gamma`. The ascent
/// starts at `eta0` when given and admissible, otherwise at zero.
pub fn conditional_rate_detail(
    g_next: &CovMatrix,
    g_prev: &CovMatrix,
    layer: &LayerParams,
    act: &Activation,
    opts: &LegendreOptions,
    eta0: Option<&DualMatrix>,
) -> Result<(f64, Option<LegendreResult>)> {
    layer.validate()?;
    let n = g_prev.dim();
    if g_next.dim() != n {
        return Err(Error::DimensionMismatch { op: "conditional_rate_j", left_rows: g_next.dim(), left_cols: g_next.dim(), right_rows: n, right_cols: n });
    }
    if layer.gamma == f64::INFINITY {
        let image = layer_mean(g_prev, layer, act, &opts.kappa)?;
        let gap = g_next.sym().sub(image.sym())?.frobenius_norm();
        let v = if gap <= 1e-6 * (1.0 + g_next.frobenius_norm()) { 0.0 } else { f64::INFINITY };
        return Ok((v, None));
    }
    let y = SymMatrix::symmetrize(&Matrix::from_fn(n, n, |i, j| (g_next.get(i, j) - layer.c_b) / layer.c_w));
    let r = match eta0 {
        Some(e) => match kappa_star_from(&y, g_prev, act, opts, Some(e)) {
            Ok(r) => r,
            Err(Error::Precondition(_)) => kappa_star(&y, g_prev, act, opts)?,
            Err(e) => return Err(e),
        },
        None => kappa_star(&y, g_prev, act, opts)?,
    };
    Ok((layer.gamma * r.value, Some(r)))
}
