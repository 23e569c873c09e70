//! Scalar activations together with their linear-growth metadata.
//!
//! Every activation carries its right slope `c_plus`, its left constant
//! `c_minus` in the convention `sigma(x) = -c_minus * x + o(x)` as
//! `x -> -inf` (so `c_minus` lies in `[-c_plus, 0]`), and a constant `C`
//! with `|sigma(x)| <= C (1 + |x|)`. The conventional left slope
//! `lim sigma(x)/x` is `-c_minus`; reports expose both.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

const CONVERGENCE_TOL: f64 = 1e-3;

type ScalarFn = Arc<dyn Fn(f64) -> f64 + Send + Sync>;

/// A user-supplied black-box activation.
#[derive(Clone)]
pub struct CustomActivation {
    pub name: String,
    pub f: ScalarFn,
    pub c_plus: f64,
    pub c_minus: f64,
    pub growth_c: f64,
}

impl fmt::Debug for CustomActivation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("CustomActivation")
            .field("name", &self.name)
            .field("c_plus", &self.c_plus)
            .field("c_minus", &self.c_minus)
            .field("growth_c", &self.growth_c)
            .finish()
    }
}

#[derive(Clone, Debug)]
pub enum Activation {
    Relu,
    /// `x` for `x >= 0`, `a x` otherwise, with `a` in `[0, 1)`.
    PRelu(f64),
    Sigmoid,
    /// `1{x >= 0}`
    Step,
    Gelu,
    Swish,
    Softplus,
    Custom(CustomActivation),
}

impl Activation {
    pub fn prelu(a: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&a) {
            return Err(Error::UnknownActivation(format!("prelu:{a} (slope must lie in [0, 1))")));
        }
        Ok(Self::PRelu(a))
    }

    /// Wraps an arbitrary evaluator. The constants are validated against the evaluator by
    /// [`asymptotic_constants`] and [`growth_bound`], not here.
    pub fn custom(
        name: impl Into<String>,
        f: impl Fn(f64) -> f64 + Send + Sync + 'static,
        c_plus: f64,
        c_minus: f64,
        growth_c: f64,
    ) -> Result<Self> {
        let name = name.into();
        if !(c_plus >= 0.0 && c_minus <= 0.0 && c_minus >= -c_plus && growth_c > 0.0) {
            return Err(Error::Certification(format!(
                "{name}: need c_plus >= 0, c_minus in [-c_plus, 0], C > 0"
            )));
        }
        Ok(Self::Custom(CustomActivation { name, f: Arc::new(f), c_plus, c_minus, growth_c }))
    }

    pub fn name(&self) -> String {
        match self {
            Self::Relu => "relu".into(),
            Self::PRelu(a) => format!("prelu:{a}"),
            Self::Sigmoid => "sigmoid".into(),
            Self::Step => "step".into(),
            Self::Gelu => "gelu".into(),
            Self::Swish => "swish".into(),
            Self::Softplus => "softplus".into(),
            Self::Custom(c) => c.name.clone(),
        }
    }

    pub fn is_relu(&self) -> bool {
        matches!(self, Self::Relu)
    }

    /// Whether `sigma(t x) = t sigma(x)` for all `t >= 0`.
    pub fn is_positively_homogeneous(&self) -> bool {
        matches!(self, Self::Relu | Self::PRelu(_))
    }

    /// Right asymptotic slope.
    pub fn c_plus(&self) -> f64 {
        match self {
            Self::Relu | Self::PRelu(_) | Self::Gelu | Self::Swish | Self::Softplus => 1.0,
            Self::Sigmoid | Self::Step => 0.0,
            Self::Custom(c) => c.c_plus,
        }
    }

    /// Left constant in the `sigma(x) = -c_minus x` convention.
    pub fn c_minus(&self) -> f64 {
        match self {
            Self::PRelu(a) => -a,
            Self::Custom(c) => c.c_minus,
            _ => 0.0,
        }
    }

    /// Conventional left slope `lim_{x -> -inf} sigma(x) / x`.
    pub fn left_slope(&self) -> f64 {
        -self.c_minus()
    }

    /// Stored growth constant `C` with `|sigma(x)| <= C (1 + |x|)`.
    pub fn growth_c(&self) -> f64 {
        match self {
            Self::Custom(c) => c.growth_c,
            _ => 1.0,
        }
    }

    /// Asymptotic slope on the side given by the sign of the argument.
    pub fn slope_toward(&self, positive: bool) -> f64 {
        if positive {
            self.c_plus()
        } else {
            self.left_slope()
        }
    }

    pub fn eval<T: Scalar>(&self, x: T) -> T {
        let zero = T::zero();
        let one = T::one();
        match self {
            Self::Relu => x.max(zero),
            Self::PRelu(a) => {
                if x >= zero {
                    x
                } else {
                    x * T::lit(*a)
                }
            }
            Self::Sigmoid => sigmoid(x),
            Self::Step => {
                if x >= zero {
                    one
                } else {
                    zero
                }
            }
            Self::Gelu => {
                let xf = x.to_f64().unwrap_or(f64::NAN);
                T::lit(0.5 * xf * libm::erfc(-xf / std::f64::consts::SQRT_2))
            }
            Self::Swish => x * sigmoid(x),
            Self::Softplus => x.max(zero) + (-x.abs()).exp().ln_1p(),
            Self::Custom(c) => T::lit((c.f)(x.to_f64().unwrap_or(f64::NAN))),
        }
    }

    /// Componentwise application.
    pub fn evaluate<T: Scalar>(&self, xs: &[T]) -> Vec<T> {
        xs.iter().map(|&x| self.eval(x)).collect()
    }
}

impl FromStr for Activation {
    type Err = Error;

    /// `relu | prelu:a | sigmoid | step | gelu | swish | softplus`
    fn from_str(s: &str) -> Result<Self> {
        let spec = s.trim().to_ascii_lowercase();
        match spec.as_str() {
            "relu" => Ok(Self::Relu),
            "sigmoid" => Ok(Self::Sigmoid),
            "step" => Ok(Self::Step),
            "gelu" => Ok(Self::Gelu),
            "swish" => Ok(Self::Swish),
            "softplus" => Ok(Self::Softplus),
            _ => match spec.strip_prefix("prelu:") {
                Some(a) => {
                    let a: f64 = a.parse().map_err(|_| Error::UnknownActivation(s.to_string()))?;
                    Self::prelu(a)
                }
                None => Err(Error::UnknownActivation(s.to_string())),
            },
        }
    }
}

fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Points in `[-1e6, 1e6]`: a fine linear grid on `[-10, 10]` and 50 log-spaced points per decade beyond.
pub fn certification_grid() -> Vec<f64> {
    let mut grid: Vec<f64> = (0..=20_000).map(|i| -10.0 + i as f64 * 1e-3).collect();
    for i in 1..=250 {
        let x = 10f64.powf(1.0 + i as f64 / 50.0);
        grid.push(x);
        grid.push(-x);
    }
    grid
}

#[derive(Clone, Debug, Serialize)]
pub struct SlopeEstimate {
    pub x: f64,
    pub ratio: f64,
}

/// Outcome of checking the stored asymptotic constants against the evaluator.
#[derive(Clone, Debug, Serialize)]
pub struct AsymptoticReport {
    pub name: String,
    /// Estimated right slope, from `sigma(10^k) / 10^k` at `k = 8`.
    pub c_plus_est: f64,
    /// Estimated conventional left slope `sigma(x)/x` at `x = -10^8`.
    pub left_slope_est: f64,
    /// The same estimate in the `c_minus` convention (`-left_slope_est`).
    pub c_minus_est: f64,
    pub right: Vec<SlopeEstimate>,
    pub left: Vec<SlopeEstimate>,
    pub pass: bool,
    pub message: String,
}

fn converges(estimates: &[SlopeEstimate], target: f64) -> bool {
    let errs: Vec<f64> = estimates.iter().map(|e| (e.ratio - target).abs()).collect();
    let tail_ok = errs.iter().rev().take(3).all(|&e| e <= CONVERGENCE_TOL);
    let shrinking = errs.last().copied().unwrap_or(f64::INFINITY) <= errs[0] + 1e-12;
    tail_ok && shrinking && errs.iter().all(|e| e.is_finite())
}

/// Estimates `sigma(x)/x` at `x = +-10^k`, `k = 3..8`, and checks convergence to the stored
/// right slope and to `-c_minus` on the left, within `1e-3`.
pub fn asymptotic_constants(act: &Activation) -> AsymptoticReport {
    let probe = |sign: f64| -> Vec<SlopeEstimate> {
        (3..=8)
            .map(|k| {
                let x = sign * 10f64.powi(k);
                SlopeEstimate { x, ratio: act.eval(x) / x }
            })
            .collect()
    };
    let right = probe(1.0);
    let left = probe(-1.0);
    let c_plus_est = right.last().map_or(f64::NAN, |e| e.ratio);
    let left_slope_est = left.last().map_or(f64::NAN, |e| e.ratio);
    let ordering_ok =
        act.c_plus() >= 0.0 && act.c_minus() <= 0.0 && act.c_minus() >= -act.c_plus();
    let right_ok = converges(&right, act.c_plus());
    let left_ok = converges(&left, act.left_slope());
    let mut problems = Vec::new();
    if !ordering_ok {
        problems.push(format!(
            "constants violate 0 <= c_plus, -c_plus <= c_minus <= 0 (c_plus={}, c_minus={})",
            act.c_plus(),
            act.c_minus()
        ));
    }
    if !right_ok {
        problems.push(format!("sigma(x)/x does not settle at c_plus={} (last {c_plus_est})", act.c_plus()));
    }
    if !left_ok {
        problems.push(format!(
            "sigma(x)/x does not settle at -c_minus={} as x -> -inf (last {left_slope_est})",
            act.left_slope()
        ));
    }
    let pass = problems.is_empty();
    let message = if pass {
        format!(
            "{}: c_plus={}, c_minus={} (left slope {})",
            act.name(),
            act.c_plus(),
            act.c_minus(),
            act.left_slope()
        )
    } else {
        format!("{} violates the linear-growth assumption: {}", act.name(), problems.join("; "))
    };
    AsymptoticReport {
        name: act.name(),
        c_plus_est,
        left_slope_est,
        c_minus_est: -left_slope_est,
        right,
        left,
        pass,
        message,
    }
}

/// Verifies `|sigma(x)| <= C + C|x|` on [`certification_grid`] for the stored `C` and returns it.
pub fn growth_bound(act: &Activation) -> Result<f64> {
    let c = act.growth_c();
    let mut nontrivial = false;
    for x in certification_grid() {
        let y = act.eval(x);
        if !y.is_finite() || y.abs() > c * (1.0 + x.abs()) * (1.0 + 1e-12) {
            return Err(Error::Certification(format!(
                "{}: |sigma({x})| = {} exceeds C (1 + |x|) with C = {c}",
                act.name(),
                y.abs()
            )));
        }
        nontrivial |= y != 0.0;
    }
    if !nontrivial {
        return Err(Error::Certification(format!("{} vanishes on the whole test grid", act.name())));
    }
    Ok(c)
}

/// Full certification: asymptotic constants and growth bound.
pub fn certify(act: &Activation) -> Result<(AsymptoticReport, f64)> {
    let report = asymptotic_constants(act);
    if !report.pass {
        return Err(Error::Certification(report.message));
    }
    let c = growth_bound(act)?;
    Ok((report, c))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn builtins() -> Vec<Activation> {
        vec![
            Activation::Relu,
            Activation::PRelu(0.0),
            Activation::PRelu(0.1),
            Activation::PRelu(0.9),
            Activation::Sigmoid,
            Activation::Step,
            Activation::Gelu,
            Activation::Swish,
            Activation::Softplus,
        ]
    }

    #[test]
    fn evaluate_examples() {
        assert_eq!(Activation::Relu.evaluate(&[-1.0, 0.0, 2.0]), vec![0.0, 0.0, 2.0]);
        assert!((Activation::PRelu(0.1).eval(-10.0) + 1.0f64).abs() < 1e-15);
        assert_eq!(Activation::Sigmoid.eval(0.0), 0.5);
        assert_eq!(Activation::Step.eval(0.0), 1.0);
        assert_eq!(Activation::Step.eval(-1e-300), 0.0);
        assert!((Activation::Gelu.eval(1.0) - 0.841_344_746_068_542_9f64).abs() < 1e-12);
        assert!(Activation::Softplus.eval(1e8f64).is_finite());
        assert!(Activation::Sigmoid.eval(-1e8f64) >= 0.0);
        assert!((Activation::Relu.eval(-2.0f32)).abs() < 1e-7);
    }

    #[test]
    fn parse_specs() {
        for s in ["relu", "sigmoid", "step", "gelu", "swish", "softplus", "prelu:0.25", " ReLU "] {
            assert!(s.parse::<Activation>().is_ok(), "{s}");
        }
        assert!(matches!("prelu:0.25".parse::<Activation>(), Ok(Activation::PRelu(a)) if a == 0.25));
        for s in ["tanh", "prelu:1.5", "prelu:-0.1", "prelu:x", ""] {
            assert!(s.parse::<Activation>().is_err(), "{s}");
        }
    }

    #[test]
    fn stated_constants() {
        let r = asymptotic_constants(&Activation::Relu);
        assert!(r.pass);
        assert_eq!((r.c_plus_est, r.left_slope_est), (1.0, 0.0));
        let s = asymptotic_constants(&Activation::Sigmoid);
        assert!(s.pass);
        assert!(s.c_plus_est.abs() < 1e-7 && s.left_slope_est.abs() < 1e-7);
        let p = asymptotic_constants(&Activation::PRelu(0.3));
        assert!(p.pass);
        assert!((p.c_plus_est - 1.0).abs() < 1e-12);
        assert!((p.left_slope_est - 0.3).abs() < 1e-12);
        assert!((p.c_minus_est + 0.3).abs() < 1e-12);
        assert_eq!(Activation::PRelu(0.3).c_minus(), -0.3);
    }

    #[test]
    fn all_builtins_certify() {
        for act in builtins() {
            let (report, c) = certify(&act).unwrap_or_else(|e| panic!("{}: {e}", act.name()));
            assert!(report.pass);
            assert_eq!(c, 1.0);
        }
    }

    #[test]
    fn growth_constants_match_grid_maximization() {
        // grid oracle: max |sigma(x)| / (1 + |x|)
        for act in [Activation::Relu, Activation::Step, Activation::Swish, Activation::Gelu] {
            let mut worst = 0.0f64;
            let mut x = -1e4;
            while x <= 1e4 {
                worst = worst.max(act.eval::<f64>(x).abs() / (1.0 + f64::abs(x)));
                x += 0.01;
            }
            assert!(worst <= growth_bound(&act).unwrap(), "{}", act.name());
        }
    }

    #[test]
    fn violations_are_reported() {
        let quad = Activation::custom("square", |x| x * x, 1.0, 0.0, 1.0).unwrap();
        assert!(!asymptotic_constants(&quad).pass);
        let err = growth_bound(&quad).unwrap_err().to_string();
        assert!(err.contains("sigma("), "{err}");

        let wrong_slope = Activation::custom("twice", |x| 2.0 * x.max(0.0), 1.0, 0.0, 2.0).unwrap();
        assert!(!asymptotic_constants(&wrong_slope).pass);

        let zero = Activation::custom("zero", |_| 0.0, 0.0, 0.0, 1.0).unwrap();
        assert!(growth_bound(&zero).is_err());

        assert!(Activation::custom("bad", |x| x, 1.0, 0.5, 1.0).is_err());
    }

    #[test]
    fn shifted_relu_from_the_steepness_footnote_certifies() {
        let act = Activation::custom("shifted-relu", |x| if x > 0.0 { x - 1.0 } else { 0.0 }, 1.0, 0.0, 1.0)
            .unwrap();
        assert!(certify(&act).is_ok());
    }

    proptest! {
        #[test]
        fn relu_is_positively_homogeneous(x in -1e3f64..1e3, t in 0.0f64..1e3) {
            let a = Activation::Relu;
            prop_assert!((a.eval(t * x) - t * a.eval(x)).abs() <= 1e-12 * (1.0 + (t * x).abs()));
        }

        #[test]
        fn prelu_is_positively_homogeneous(x in -1e3f64..1e3, t in 0.0f64..1e3, a in 0.0f64..0.99) {
            let act = Activation::PRelu(a);
            prop_assert!((act.eval(t * x) - t * act.eval(x)).abs() <= 1e-12 * (1.0 + (t * x).abs()));
        }
    }
}
