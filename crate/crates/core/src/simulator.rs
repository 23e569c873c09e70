//! Finite-width sampling of the network and of its covariance recursion, and tail-probability
//! experiments that compare empirical decay rates against the predicted rate.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::activation::Activation;
use crate::error::{Error, Result};
use crate::kernel::{kappa_eval, KappaOptions};
use crate::legendre::{kappa_star, LegendreOptions, LegendreStatus};
use crate::linalg::{Matrix, PsdMatrix};
use crate::rate::{initial_gram, rate_event, EventTerminal, NetworkConfig, RateOptions};
use crate::{CovMatrix, DualMatrix};

const BLOCKS: usize = 64;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WidthSchedule {
    /// Base width `v`, the width of the slowest layer.
    pub v: usize,
    /// `n_1 .. n_L` with `n_l = ceil(gamma_l v)`.
    pub widths: Vec<usize>,
    pub n0: usize,
    pub n_out: usize,
}

impl WidthSchedule {
    pub fn new(config: &NetworkConfig, v: usize) -> Result<Self> {
        config.validate()?;
        if v == 0 {
            return Err(Error::InvalidConfig("base width v must be positive".into()));
        }
        let widths = config
            .gammas
            .iter()
            .map(|&g| {
                if g.is_finite() {
                    Ok((g * v as f64).ceil() as usize)
                } else {
                    Err(Error::InvalidConfig("an infinite width ratio cannot be simulated".into()))
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { v, widths, n0: config.n0, n_out: config.n_out })
    }

    fn check(&self, config: &NetworkConfig) -> Result<()> {
        if self.widths.len() != config.depth || self.n0 != config.n0 || self.n_out != config.n_out {
            return Err(Error::InvalidConfig("width schedule does not match the configuration".into()));
        }
        if self.widths.contains(&0) {
            return Err(Error::InvalidConfig("layer widths must be positive".into()));
        }
        Ok(())
    }
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

/// Outputs `Z^(L+1)(x_a) / sqrt(v)` of one network draw, as an `|A| x n_out` matrix.
pub fn sample_network(config: &NetworkConfig, schedule: &WidthSchedule, seed: u64) -> Result<Matrix<f64>> {
    config.validate()?;
    schedule.check(config)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(network_draw(config, schedule, &mut rng))
}

fn network_draw(config: &NetworkConfig, schedule: &WidthSchedule, rng: &mut ChaCha8Rng) -> Matrix<f64> {
    let na = config.inputs.len();
    let (sb, act) = (config.c_b.sqrt(), &config.activation);
    // layer input per data point: x for the first layer, sigma(Z) afterwards
    let mut h: Vec<Vec<f64>> = config.inputs.clone();
    let mut widths = schedule.widths.clone();
    widths.push(schedule.n_out);
    let mut z = vec![Vec::new(); na];
    for (l, &n) in widths.iter().enumerate() {
        let fan_in = h[0].len();
        let sw = (config.c_w / fan_in as f64).sqrt();
        z = vec![vec![0.0; n]; na];
        for i in 0..n {
            let b = sb * normal(rng);
            for za in z.iter_mut() {
                za[i] = b;
            }
            for k in 0..fan_in {
                let w = sw * normal(rng);
                for (za, ha) in z.iter_mut().zip(&h) {
                    za[i] += w * ha[k];
                }
            }
        }
        if l + 1 < widths.len() {
            h = z.iter().map(|za| act.evaluate(za)).collect();
        }
    }
    let scale = (schedule.v as f64).sqrt().recip();
    Matrix::from_fn(na, schedule.n_out, |a, k| z[a][k] * scale)
}

/// `G^(0), .., G^(L)` of the finite-width covariance recursion.
pub fn sample_gram_chain_full(config: &NetworkConfig, schedule: &WidthSchedule, seed: u64) -> Result<Vec<CovMatrix>> {
    config.validate()?;
    schedule.check(config)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    gram_draw(config, schedule, &mut rng)
}

/// `G^(L)` of the finite-width covariance recursion.
pub fn sample_gram_chain(config: &NetworkConfig, schedule: &WidthSchedule, seed: u64) -> Result<CovMatrix> {
    Ok(sample_gram_chain_full(config, schedule, seed)?.pop().expect("chain is non-empty"))
}

fn gram_draw(config: &NetworkConfig, schedule: &WidthSchedule, rng: &mut ChaCha8Rng) -> Result<Vec<CovMatrix>> {
    let na = config.inputs.len();
    let mut chain = vec![initial_gram(config)?];
    for &n in &schedule.widths {
        let root = chain.last().unwrap().root();
        let r = root.matrix();
        let mut acc = Matrix::<f64>::zeros(na, na);
        let mut u = vec![0.0; na];
        let mut nv = vec![0.0; na];
        for _ in 0..n {
            nv.iter_mut().for_each(|x| *x = normal(rng));
            for (a, ua) in u.iter_mut().enumerate() {
                *ua = (0..na).map(|k| r[(a, k)] * nv[k]).sum();
            }
            let s = config.activation.evaluate(&u);
            for a in 0..na {
                for b in a..na {
                    acc[(a, b)] += s[a] * s[b];
                }
            }
        }
        let scale = config.c_w / n as f64;
        let g = Matrix::from_fn(na, na, |a, b| {
            let (i, j) = if a <= b { (a, b) } else { (b, a) };
            config.c_b + scale * acc[(i, j)]
        });
        chain.push(PsdMatrix::new(g)?);
    }
    Ok(chain)
}

/// Outputs drawn through the covariance recursion: `G^(L)#` times an `|A| x n_out` standard normal
/// matrix, divided by `sqrt(v)`.
pub fn sample_via_gram(config: &NetworkConfig, schedule: &WidthSchedule, seed: u64) -> Result<Matrix<f64>> {
    config.validate()?;
    schedule.check(config)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let g = gram_draw(config, schedule, &mut rng)?.pop().unwrap();
    let na = g.dim();
    let n = Matrix::from_fn(na, schedule.n_out, |_, _| normal(&mut rng));
    Ok(g.root().matrix().matmul(&n)?.scale((schedule.v as f64).sqrt().recip()))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    /// Event `{summary >= t}`.
    Above,
    /// Event `{summary <= t}`.
    Below,
}

impl Direction {
    fn hit(self, x: f64, t: f64) -> bool {
        match self {
            Self::Above => x >= t,
            Self::Below => x <= t,
        }
    }
}

/// Scalar statistic whose tail is measured.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Summary {
    /// `G^(L)_{aa}`.
    GramDiagonal { alpha: usize },
    /// `<c, Z / sqrt(v)>_F` with `c` of shape `|A| x n_out`.
    OutputFunctional { weights: Matrix<f64> },
}

/// Correction applied to `-log p(v)` before the linear fit.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Prefactor {
    /// Fit `-log p = a v + b`.
    None,
    /// Fit `-log p - log(v)/2 = a v + b`, removing the `v^(-1/2)` prefactor of an interior
    /// threshold in a smooth Cramér regime.
    BahadurRao,
}

impl Prefactor {
    fn correction(self, v: f64) -> f64 {
        match self {
            Self::None => 0.0,
            Self::BahadurRao => 0.5 * v.ln(),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TailOptions {
    pub v_list: Vec<usize>,
    pub samples_per_v: usize,
    pub seed: u64,
    pub workers: usize,
    pub prefactor: Prefactor,
    pub rate: RateOptions,
}

impl Default for TailOptions {
    fn default() -> Self {
        Self {
            v_list: vec![50, 100, 200],
            samples_per_v: 1_000_000,
            seed: 0,
            workers: 1,
            prefactor: Prefactor::None,
            rate: RateOptions::default(),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TailRow {
    pub v: usize,
    pub samples: usize,
    pub hits: usize,
    pub p_hat: f64,
    pub neg_log_p_over_v: f64,
    /// Standard error of `neg_log_p_over_v` (Wilson interval, delta method).
    pub std_error: f64,
    /// Zero-hit rows are excluded from the fit.
    pub excluded: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SlopeFit {
    pub slope: f64,
    pub intercept: f64,
    pub slope_std_error: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TailExperimentResult {
    pub rows: Vec<TailRow>,
    pub fit: SlopeFit,
    pub predicted_rate: f64,
    pub relative_gap: f64,
    pub prefactor: Prefactor,
}

/// Standard error of `p_hat` from the Wilson score interval at one standard deviation.
pub fn wilson_std_error(hits: usize, n: usize) -> f64 {
    let n = n as f64;
    let p = hits as f64 / n;
    (p * (1.0 - p) / n + 0.25 / (n * n)).sqrt() / (1.0 + 1.0 / n)
}

/// Row for probability `p` at width `v`, with `std_p` the standard error of `p`.
fn row(v: usize, samples: usize, hits: usize, p: f64, std_p: f64) -> TailRow {
    let excluded = !(p > 0.0);
    let vf = v as f64;
    TailRow {
        v,
        samples,
        hits,
        p_hat: p,
        neg_log_p_over_v: if excluded { f64::INFINITY } else { -p.ln() / vf },
        std_error: if excluded { f64::INFINITY } else { std_p / p / vf },
        excluded,
    }
}

/// Weighted least-squares fit of `-log p(v) - prefactor(v) = a v + b` over non-excluded rows.
pub fn fit_slope(rows: &[TailRow], prefactor: Prefactor) -> Result<SlopeFit> {
    let used: Vec<&TailRow> = rows.iter().filter(|r| !r.excluded).collect();
    if used.is_empty() {
        return Err(Error::Inconclusive("every width produced zero hits".into()));
    }
    if used.len() < 2 {
        return Err(Error::Inconclusive("fewer than two widths with hits; the slope is undetermined".into()));
    }
    let pts: Vec<(f64, f64, f64)> = used
        .iter()
        .map(|r| {
            let v = r.v as f64;
            let y = r.neg_log_p_over_v * v - prefactor.correction(v);
            let sd = r.std_error * v;
            let w = if sd > 0.0 && sd.is_finite() { 1.0 / (sd * sd) } else { 0.0 };
            (v, y, w)
        })
        .collect();
    // exact probabilities carry no sampling error: fall back to equal weights
    let weights: Vec<f64> = if pts.iter().all(|p| p.2 == 0.0) || pts.iter().any(|p| p.2 == 0.0) {
        vec![1.0; pts.len()]
    } else {
        pts.iter().map(|p| p.2).collect()
    };
    let sw: f64 = weights.iter().sum();
    let mx = pts.iter().zip(&weights).map(|(p, w)| w * p.0).sum::<f64>() / sw;
    let my = pts.iter().zip(&weights).map(|(p, w)| w * p.1).sum::<f64>() / sw;
    let sxx: f64 = pts.iter().zip(&weights).map(|(p, w)| w * (p.0 - mx).powi(2)).sum();
    if sxx == 0.0 {
        return Err(Error::Inconclusive("all usable rows share the same width".into()));
    }
    let sxy: f64 = pts.iter().zip(&weights).map(|(p, w)| w * (p.0 - mx) * (p.1 - my)).sum();
    let slope = sxy / sxx;
    let slope_std_error = if pts.iter().all(|p| p.2 > 0.0) { (1.0 / sxx).sqrt() } else { 0.0 };
    Ok(SlopeFit { slope, intercept: my - slope * mx, slope_std_error })
}

/// Rows built from exactly known probabilities `p(v)`.
pub fn exact_rows(v_list: &[usize], p: impl Fn(usize) -> f64) -> Vec<TailRow> {
    let mut rows: Vec<TailRow> = v_list.iter().map(|&v| row(v, 0, 0, p(v), 0.0)).collect();
    rows.sort_by_key(|r| r.v);
    rows
}

fn summary_value(summary: &Summary, config: &NetworkConfig, schedule: &WidthSchedule, rng: &mut ChaCha8Rng) -> Result<f64> {
    match summary {
        Summary::GramDiagonal { alpha } => {
            let chain = gram_draw(config, schedule, rng)?;
            Ok(chain.last().unwrap().get(*alpha, *alpha))
        }
        Summary::OutputFunctional { weights } => {
            let z = network_draw(config, schedule, rng);
            Ok(z.as_slice().iter().zip(weights.as_slice()).map(|(a, b)| a * b).sum())
        }
    }
}

/// Hit count of one block; one-layer diagonal events only need a single coordinate.
#[allow(clippy::too_many_arguments)]
fn block_hits(
    config: &NetworkConfig,
    schedule: &WidthSchedule,
    summary: &Summary,
    t: f64,
    direction: Direction,
    n: usize,
    rng: &mut ChaCha8Rng,
    q_aa: Option<f64>,
) -> Result<usize> {
    let mut hits = 0;
    if let (Some(qa), Summary::GramDiagonal { .. }) = (q_aa, summary) {
        let width = schedule.widths[0];
        let (sd, act) = (qa.sqrt(), &config.activation);
        let scale = config.c_w / width as f64;
        for _ in 0..n {
            let mut acc = 0.0;
            for _ in 0..width {
                let s = act.eval(sd * normal(rng));
                acc += s * s;
            }
            if direction.hit(config.c_b + scale * acc, t) {
                hits += 1;
            }
        }
        return Ok(hits);
    }
    for _ in 0..n {
        if direction.hit(summary_value(summary, config, schedule, rng)?, t) {
            hits += 1;
        }
    }
    Ok(hits)
}

/// Empirical tail probabilities per width, a fitted decay slope, and the predicted rate.
pub fn tail_experiment(
    config: &NetworkConfig,
    summary: &Summary,
    t: f64,
    direction: Direction,
    opts: &TailOptions,
) -> Result<TailExperimentResult> {
    config.validate()?;
    let na = config.inputs.len();
    match summary {
        Summary::GramDiagonal { alpha } if *alpha >= na => {
            return Err(Error::InvalidConfig(format!("alpha = {alpha} out of range for |A| = {na}")))
        }
        Summary::OutputFunctional { weights } if weights.shape() != (na, config.n_out) => {
            return Err(Error::InvalidConfig("functional weights must have shape |A| x n_out".into()))
        }
        _ => {}
    }
    if opts.samples_per_v == 0 || opts.v_list.is_empty() {
        return Err(Error::InvalidConfig("need at least one width and one sample".into()));
    }
    let g0 = initial_gram(config)?;
    let q_aa = match summary {
        Summary::GramDiagonal { alpha } if config.depth == 1 => Some(g0.get(*alpha, *alpha)),
        _ => None,
    };
    let mut v_list = opts.v_list.clone();
    v_list.sort_unstable();
    v_list.dedup();

    let pool = if opts.workers > 1 {
        Some(
            rayon::ThreadPoolBuilder::new()
                .num_threads(opts.workers)
                .build()
                .map_err(|e| Error::InvalidConfig(format!("thread pool: {e}")))?,
        )
    } else {
        None
    };
    let mut rows = Vec::with_capacity(v_list.len());
    for (vi, &v) in v_list.iter().enumerate() {
        let schedule = WidthSchedule::new(config, v)?;
        let n = opts.samples_per_v;
        let run = |b: usize| -> Result<usize> {
            let nb = n / BLOCKS + usize::from(b < n % BLOCKS);
            let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
            rng.set_stream(((vi as u64) << 32) | b as u64);
            block_hits(config, &schedule, summary, t, direction, nb, &mut rng, q_aa)
        };
        let counts: Vec<Result<usize>> = match &pool {
            Some(p) => p.install(|| (0..BLOCKS).into_par_iter().map(run).collect()),
            None => (0..BLOCKS).map(run).collect(),
        };
        let hits = counts.into_iter().sum::<Result<usize>>()?;
        let p = hits as f64 / n as f64;
        rows.push(row(v, n, hits, p, wilson_std_error(hits, n)));
    }
    let fit = fit_slope(&rows, opts.prefactor)?;
    let predicted_rate = predicted_rate(config, summary, t, direction, &opts.rate)?;
    Ok(TailExperimentResult {
        relative_gap: (fit.slope - predicted_rate) / predicted_rate,
        rows,
        fit,
        predicted_rate,
        prefactor: opts.prefactor,
    })
}

/// Rate of the event `{summary (direction) t}` implied by the chain and output rate functions.
pub fn predicted_rate(config: &NetworkConfig, summary: &Summary, t: f64, direction: Direction, opts: &RateOptions) -> Result<f64> {
    let g0 = initial_gram(config)?;
    match summary {
        Summary::GramDiagonal { alpha } if config.depth == 1 => {
            // contraction onto one diagonal entry of a single layer
            let y = DualMatrix::scalar((t - config.c_b) / config.c_w);
            let q = CovMatrix::scalar(g0.get(*alpha, *alpha))?;
            let gamma = config.gammas[0];
            let mean = crate::kernel::mean_sigma(&q, &config.activation, &opts.legendre.kappa)?.get(0, 0);
            let typical = config.c_b + config.c_w * mean;
            if direction.hit(typical, t) {
                return Ok(0.0);
            }
            let r = kappa_star(&y, &q, &config.activation, &opts.legendre)?;
            if r.status == LegendreStatus::DivergedInfeasible {
                return Ok(f64::INFINITY);
            }
            Ok(gamma * r.value)
        }
        Summary::GramDiagonal { alpha } => {
            let cert = rate_event(config, EventTerminal::Diagonal { alpha: *alpha, t, above: direction == Direction::Above }, opts)?;
            Ok(cert.value)
        }
        Summary::OutputFunctional { weights } => {
            let signed = match direction {
                Direction::Above => weights.clone(),
                Direction::Below => weights.scale(-1.0),
            };
            let level = match direction {
                Direction::Above => t,
                Direction::Below => -t,
            };
            if level <= 0.0 {
                return Ok(0.0);
            }
            let cert = rate_event(config, EventTerminal::Functional { weights: signed, t: level }, opts)?;
            Ok(cert.value)
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FigureRow {
    pub x: f64,
    /// `f64::INFINITY` outside the finiteness domain.
    pub value: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FigureData {
    pub kappa: Vec<FigureRow>,
    pub kappa_star: Vec<FigureRow>,
}

/// Grid `a, a + step, ..` up to `b` inclusive (within rounding).
pub fn grid(a: f64, b: f64, step: f64) -> Result<Vec<f64>> {
    if !(step > 0.0) || !(b >= a) || !a.is_finite() || !b.is_finite() {
        return Err(Error::InvalidConfig(format!("bad grid {a}:{b}:{step}")));
    }
    let n = ((b - a) / step + 1e-9).floor() as usize;
    Ok((0..=n).map(|k| a + k as f64 * step).collect())
}

/// `kappa(.; q)` on `eta_grid` and `kappa*(.; q)` on `y_grid` for a scalar variance `q`.
pub fn figure_data(
    act: &Activation,
    q: f64,
    eta_grid: &[f64],
    y_grid: &[f64],
    opts: &LegendreOptions,
) -> Result<FigureData> {
    let qm = CovMatrix::scalar(q)?;
    let kopts: KappaOptions = opts.kappa.clone();
    let kappa = eta_grid
        .iter()
        .map(|&x| Ok(FigureRow { x, value: kappa_eval(&DualMatrix::scalar(x), &qm, act, &kopts)?.value }))
        .collect::<Result<Vec<_>>>()?;
    let kappa_star = y_grid
        .iter()
        .map(|&y| {
            let r = kappa_star(&DualMatrix::scalar(y), &qm, act, opts)?;
            Ok(FigureRow { x: y, value: r.value })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(FigureData { kappa, kappa_star })
}
