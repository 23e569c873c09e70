//! Power series of `kappa` for ReLU with diagonal `q = diag(a)`.
//!
//! With `s_i = sqrt(a_i) max(N_i, 0)` the moment generating function expands as
//! `sum_k E[<eta, s s^T>^k] / k!`, and each expectation factorises over coordinates into
//! half-normal moments `M(c) = E[max(N, 0)^c]`.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::SymMatrix;
use crate::scalar::Scalar;
use crate::DualMatrix;

/// `M(k) = E[max(N,0)^k] = 2^(k/2) Gamma((k+1)/2) / (2 sqrt(pi))`.
pub fn half_moment<T: Scalar>(k: u32) -> T {
    let mut even = T::lit(0.5);
    let mut odd = T::lit(1.0 / (2.0 * std::f64::consts::PI).sqrt());
    if k == 0 {
        return even;
    }
    let mut j = 1;
    while j < k {
        // advance the pair to (M(j+1), M(j+2))
        even = even * T::lit(j as f64);
        odd = odd * T::lit((j + 1) as f64);
        j += 2;
    }
    if k.is_multiple_of(2) {
        even
    } else {
        odd
    }
}

/// `ln M(k)` for arbitrary order without overflow.
pub fn ln_half_moment(k: u32) -> f64 {
    let k = k as f64;
    0.5 * k * std::f64::consts::LN_2 + libm::lgamma(0.5 * (k + 1.0))
        - std::f64::consts::LN_2
        - 0.5 * std::f64::consts::PI.ln()
}

/// First-order term `E[<eta, Sigma>]` for ReLU with diagonal variances `a`.
pub fn first_order_kappa<T: Scalar>(eta: &SymMatrix<T>, a: &[T]) -> Result<T> {
    let n = eta.dim();
    if a.len() != n {
        return Err(Error::DimensionMismatch { op: "first_order_kappa", left_rows: n, left_cols: n, right_rows: a.len(), right_cols: 1 });
    }
    let m1 = half_moment::<T>(1);
    let m2 = half_moment::<T>(2);
    let mut total = T::zero();
    for i in 0..n {
        for j in 0..n {
            let term = if i == j { a[i] * m2 } else { (a[i] * a[j]).sqrt() * m1 * m1 };
            total = total + eta.get(i, j) * term;
        }
    }
    Ok(total)
}

/// One index pattern `(alpha_1 beta_1, .., alpha_k beta_k)` of the order-`k` term.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeriesTerm {
    pub order: usize,
    pub alpha: Vec<usize>,
    pub beta: Vec<usize>,
}

impl SeriesTerm {
    /// Occurrences of each coordinate among all `alpha` and `beta` indices.
    pub fn counts(&self, dim: usize) -> Vec<usize> {
        let mut c = vec![0; dim];
        for &i in self.alpha.iter().chain(&self.beta) {
            c[i] += 1;
        }
        c
    }

    /// All `dim^(2k)` patterns of order `k`, in lexicographic order.
    pub fn enumerate(dim: usize, order: usize) -> impl Iterator<Item = SeriesTerm> {
        let len = 2 * order;
        let total = if dim == 0 { 0 } else { dim.pow(len as u32) };
        (0..total).map(move |mut code| {
            let mut digits = vec![0; len];
            for slot in digits.iter_mut().rev() {
                *slot = code % dim;
                code /= dim;
            }
            SeriesTerm { order, alpha: digits[..order].to_vec(), beta: digits[order..].to_vec() }
        })
    }

    /// `prod_l eta_{alpha_l beta_l} * prod_i E[s_i^(c_i)]`, where `E[s_i^0] = 1`.
    pub fn contribution(&self, eta: &DualMatrix, a: &[f64]) -> f64 {
        let coef: f64 = self.alpha.iter().zip(&self.beta).map(|(&i, &j)| eta.get(i, j)).product();
        let moment: f64 = self
            .counts(a.len())
            .iter()
            .zip(a)
            .map(|(&c, &ai)| if c == 0 { 1.0 } else { ai.powf(0.5 * c as f64) * half_moment::<f64>(c as u32) })
            .product();
        coef * moment
    }

    /// The order-`k` coefficient `E[<eta, Sigma>^k] / k!` by brute-force enumeration.
    pub fn brute_force_order(eta: &DualMatrix, a: &[f64], order: usize) -> f64 {
        let sum: f64 = Self::enumerate(a.len(), order).map(|t| t.contribution(eta, a)).sum();
        sum / (1..=order).map(|k| k as f64).product::<f64>()
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SeriesResult {
    pub value: f64,
    /// Bound on `|kappa - value|`: the truncation error plus a floating-point rounding
    /// allowance for the partial sum. Infinite when no bound could be established.
    pub truncation_bound: f64,
    pub flagged: bool,
    pub order: usize,
    /// `t_0 .. t_{K+1}`; the last entry is used only for the error estimate.
    pub terms: Vec<f64>,
    /// Whether the value is the midpoint `S_K + t_{K+1}/2` of an alternating tail.
    pub alternating_midpoint: bool,
}

type Poly = BTreeMap<Vec<u16>, f64>;

fn multiply(p: &Poly, base: &Poly) -> Poly {
    let mut out = Poly::new();
    for (ea, ca) in p {
        for (eb, cb) in base {
            let e: Vec<u16> = ea.iter().zip(eb).map(|(x, y)| x + y).collect();
            *out.entry(e).or_insert(0.0) += ca * cb;
        }
    }
    out
}

/// Sums the series of `kappa(eta; diag(a))` through order `order`.
///
/// The returned bound is geometric: with `rho = |eta|_F max a`, the order-`k` term is at most
/// `(2 rho)^k Gamma(k + d/2) / (Gamma(d/2) k!)`. When that majorant does not converge but the last
/// computed terms alternate with decreasing size, the midpoint of the last two partial sums is
/// returned with half the last term as its error estimate.
pub fn kappa_relu_series(eta: &DualMatrix, a: &[f64], order: usize, tol: f64) -> Result<SeriesResult> {
    let d = eta.dim();
    if a.len() != d {
        return Err(Error::DimensionMismatch { op: "kappa_relu_series", left_rows: d, left_cols: d, right_rows: a.len(), right_cols: 1 });
    }
    if order == 0 {
        return Err(Error::Precondition("series order must be at least 1".into()));
    }
    if a.iter().any(|&x| !(x > 0.0)) {
        return Err(Error::Precondition("variances must be positive".into()));
    }
    let norm = eta.frobenius_norm();
    if norm == 0.0 {
        let mut terms = vec![0.0; order + 2];
        terms[0] = 1.0;
        return Ok(SeriesResult { value: 0.0, truncation_bound: 0.0, flagged: false, order, terms, alternating_midpoint: false });
    }

    let mut base = Poly::new();
    for i in 0..d {
        for j in i..d {
            let c = if i == j { eta.get(i, i) } else { 2.0 * eta.get(i, j) } / norm;
            if c != 0.0 {
                let mut e = vec![0u16; d];
                e[i] += 1;
                e[j] += 1;
                *base.entry(e).or_insert(0.0) += c;
            }
        }
    }
    let ln_s: Vec<f64> = a.iter().map(|x| 0.5 * x.ln()).collect();
    let mut poly = Poly::from([(vec![0u16; d], 1.0)]);
    let mut ln_scale = 0.0;
    let mut terms = vec![1.0];
    let mut overflow = false;
    for k in 1..=order + 1 {
        poly = multiply(&poly, &base);
        let mx = poly.values().fold(0.0f64, |m, c| m.max(c.abs()));
        if mx == 0.0 {
            terms.push(0.0);
            continue;
        }
        poly.values_mut().for_each(|c| *c /= mx);
        ln_scale += mx.ln();
        let ln_common = ln_scale + k as f64 * norm.ln() - libm::lgamma(k as f64 + 1.0);
        let mut t = 0.0;
        for (e, c) in &poly {
            let ln_m: f64 = e
                .iter()
                .zip(&ln_s)
                .filter(|(&ci, _)| ci > 0)
                .map(|(&ci, ls)| ci as f64 * ls + ln_half_moment(ci as u32))
                .sum();
            let x = ln_common + ln_m;
            if x > 700.0 {
                overflow = true;
            }
            t += c * x.min(700.0).exp();
        }
        terms.push(t);
    }
    let partial: f64 = terms[..=order].iter().sum();
    if overflow || !(partial > 0.0) {
        return Err(Error::Diverged(format!(
            "series partial sum through order {order} is {partial:e}; eta lies outside the convergence region"
        )));
    }

    // rounding in the summation, propagated through the logarithm
    let abs_sum: f64 = terms[..=order].iter().map(|t| t.abs()).sum();
    let rounding = 4.0 * (order + 2) as f64 * f64::EPSILON * abs_sum / partial;

    let rho = norm * a.iter().fold(0.0f64, |m, &x| m.max(x));
    let half_d = 0.5 * d as f64;
    let k1 = (order + 1) as f64;
    let ratio = 2.0 * rho * ((k1 + half_d) / (k1 + 1.0)).max(1.0);
    let mut bound = f64::INFINITY;
    if ratio < 1.0 {
        let ln_b = k1 * (2.0 * rho).ln() + libm::lgamma(k1 + half_d) - libm::lgamma(half_d) - libm::lgamma(k1 + 1.0);
        let tail = ln_b.exp() / (1.0 - ratio);
        if tail < partial {
            bound = -(-tail / partial).ln_1p() + rounding;
        }
    }
    if bound.is_finite() {
        let value = partial.ln();
        return Ok(SeriesResult { value, truncation_bound: bound, flagged: bound > tol, order, terms, alternating_midpoint: false });
    }

    let alternating = order >= 3
        && terms[order - 2..=order + 1].windows(2).all(|w| w[0] * w[1] < 0.0 && w[1].abs() < w[0].abs());
    if alternating {
        let half = 0.5 * terms[order + 1].abs();
        let mid = partial + 0.5 * terms[order + 1];
        if half < mid {
            let bound = -(-half / mid).ln_1p() + rounding;
            return Ok(SeriesResult { value: mid.ln(), truncation_bound: bound, flagged: bound > tol, order, terms, alternating_midpoint: true });
        }
    }
    Ok(SeriesResult { value: partial.ln(), truncation_bound: f64::INFINITY, flagged: true, order, terms, alternating_midpoint: false })
}
