//! Chain rate `I_G` and output rate `I_Z` of a deep Gaussian network.
//!
//! Intermediate covariances are parameterised by symmetric factors `g = B B^T`, and the chain
//! objective is minimised by multi-start Nelder-Mead. Layers with infinite width ratio are pinned
//! to their deterministic image, where their conditional rate vanishes.

pub mod nelder_mead;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::cell::RefCell;

use crate::activation::Activation;
use crate::error::{Error, Result};
use crate::legendre::{conditional_rate_detail, layer_mean, LayerParams, LegendreOptions};
use crate::linalg::{frobenius_inner, pseudo_inverse, range_contains, Matrix, PsdMatrix, SymMatrix};
use crate::{CovMatrix, DualMatrix};
pub use nelder_mead::{nelder_mead, NmOptions, NmResult};

/// Range tolerance used for `Im(g) ⊃ Im(z)`.
pub const RANGE_TOL: f64 = 1e-8;

#[derive(Clone, Debug)]
pub struct NetworkConfig {
    /// Number of hidden layers `L`.
    pub depth: usize,
    /// `gamma_1 .. gamma_L`, each in `[1, inf]`.
    pub gammas: Vec<f64>,
    pub c_b: f64,
    pub c_w: f64,
    pub n0: usize,
    pub inputs: Vec<Vec<f64>>,
    pub n_out: usize,
    pub activation: Activation,
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.depth == 0 {
            return bad("depth L must be at least 1".into());
        }
        if self.gammas.len() != self.depth {
            return bad(format!("expected {} width ratios, got {}", self.depth, self.gammas.len()));
        }
        if !self.gammas.contains(&1.0) {
            return bad("at least one width ratio must equal 1".into());
        }
        if self.inputs.is_empty() {
            return bad("at least one input is required".into());
        }
        if self.n0 == 0 || self.n_out == 0 {
            return bad("n0 and n_out must be positive".into());
        }
        if let Some(x) = self.inputs.iter().find(|x| x.len() != self.n0) {
            return bad(format!("input of length {} does not match n0 = {}", x.len(), self.n0));
        }
        if self.inputs.iter().flatten().any(|v| !v.is_finite()) {
            return bad("inputs must be finite".into());
        }
        for l in self.layers() {
            l.validate()?;
        }
        Ok(())
    }

    /// `|A|`.
    pub fn num_inputs(&self) -> usize {
        self.inputs.len()
    }

    pub fn layers(&self) -> Vec<LayerParams> {
        self.gammas.iter().map(|&gamma| LayerParams { gamma, c_b: self.c_b, c_w: self.c_w }).collect()
    }
}

/// `g^(0) = C_b + (C_W / n0) <x_a, x_b>`.
pub fn initial_gram(config: &NetworkConfig) -> Result<CovMatrix> {
    config.validate()?;
    let x = &config.inputs;
    let n = x.len();
    let scale = config.c_w / config.n0 as f64;
    let m = Matrix::from_fn(n, n, |a, b| {
        config.c_b + scale * x[a].iter().zip(&x[b]).map(|(u, v)| u * v).sum::<f64>()
    });
    CovMatrix::new(m)
}

/// `C_b 1 + C_W E[Sigma(g)]`.
pub fn kernel_forward(g: &CovMatrix, config: &NetworkConfig, opts: &LegendreOptions) -> Result<CovMatrix> {
    let layer = LayerParams { gamma: 1.0, c_b: config.c_b, c_w: config.c_w };
    layer_mean(g, &layer, &config.activation, &opts.kappa)
}

/// The mean chain `g^(0), .., g^(L)`.
pub fn kernel_chain(config: &NetworkConfig, opts: &LegendreOptions) -> Result<Vec<CovMatrix>> {
    let mut chain = vec![initial_gram(config)?];
    for _ in 0..config.depth {
        let next = kernel_forward(chain.last().unwrap(), config, opts)?;
        chain.push(next);
    }
    Ok(chain)
}

/// `(g^#)^+ z`, the minimum-norm solution of `g^# r = z`.
pub fn optimal_r(z: &Matrix<f64>, g: &CovMatrix) -> Result<Matrix<f64>> {
    let root = g.root();
    if !range_contains(root.matrix(), z, RANGE_TOL)? {
        return Err(Error::Infeasible("z is not in the range of g".into()));
    }
    pseudo_inverse(root.matrix()).matmul(z)
}

/// Minimiser of `|r|^2/2 + mu |g^# r - z|^2`: `(I + 2 mu g)^-1 2 mu g^# z`.
fn penalized_r(z: &Matrix<f64>, g: &CovMatrix, mu: f64) -> Result<Matrix<f64>> {
    let eig = g.sym().eigen();
    let n = g.dim();
    let v = &eig.vectors;
    let f: Vec<f64> = eig
        .values
        .iter()
        .map(|&l| {
            let l = l.max(0.0);
            2.0 * mu * l.sqrt() / (1.0 + 2.0 * mu * l)
        })
        .collect();
    let op = Matrix::from_fn(n, n, |i, j| (0..n).map(|k| v[(i, k)] * f[k] * v[(j, k)]).sum());
    op.matmul(z)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RateMode {
    Simplified,
    FullCrosscheck,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RateOptions {
    pub legendre: LegendreOptions,
    pub restarts: usize,
    pub seed: u64,
    pub workers: usize,
    pub nm: NmOptionsSerde,
    /// Penalty weights for the joint `(g, r)` minimisation.
    pub penalty_start: f64,
    pub penalty_end: f64,
    pub penalty_factor: f64,
}

/// Serializable mirror of [`NmOptions`].
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct NmOptionsSerde {
    pub max_evals: usize,
    pub f_tol: f64,
    pub x_tol: f64,
    pub initial_step: f64,
}

impl From<NmOptionsSerde> for NmOptions {
    fn from(o: NmOptionsSerde) -> Self {
        Self { max_evals: o.max_evals, f_tol: o.f_tol, x_tol: o.x_tol, initial_step: o.initial_step }
    }
}

impl Default for RateOptions {
    fn default() -> Self {
        let nm = NmOptions { max_evals: 1500, f_tol: 1e-12, x_tol: 1e-8, initial_step: 0.2 };
        Self {
            legendre: LegendreOptions::default(),
            restarts: 8,
            seed: 0,
            workers: 1,
            nm: NmOptionsSerde { max_evals: nm.max_evals, f_tol: nm.f_tol, x_tol: nm.x_tol, initial_step: nm.initial_step },
            penalty_start: 1e2,
            penalty_end: 1e8,
            penalty_factor: 10.0,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RateDiagnostics {
    pub restarts: usize,
    pub best_local: f64,
    pub worst_local: f64,
    pub evaluations: usize,
    pub layer_rates: Vec<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CrossCheck {
    pub simplified_value: f64,
    pub full_value: f64,
    pub gap: f64,
    pub constraint_residual: f64,
    pub final_penalty: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RateCertificate {
    /// `f64::INFINITY` when no feasible chain was found.
    pub value: f64,
    pub chain: Vec<CovMatrix>,
    pub r_min: Option<Matrix<f64>>,
    pub diagnostics: RateDiagnostics,
    pub crosscheck: Option<CrossCheck>,
}

impl RateCertificate {
    /// `sum_l J(g^(l) | g^(l-1)) + |r|^2 / 2` recomputed from the stored chain.
    pub fn recompute(&self, layers: &[LayerParams], act: &Activation, opts: &LegendreOptions) -> Result<f64> {
        let (total, _) = chain_rates(&self.chain, layers, act, opts)?;
        let r = self.r_min.as_ref().map_or(0.0, |r| 0.5 * r.frobenius_norm().powi(2));
        Ok(total + r)
    }
}

/// Sum of conditional rates along a chain, and the per-layer terms.
pub fn chain_rates(
    chain: &[CovMatrix],
    layers: &[LayerParams],
    act: &Activation,
    opts: &LegendreOptions,
) -> Result<(f64, Vec<f64>)> {
    if chain.len() != layers.len() + 1 {
        return Err(Error::Precondition(format!("chain of length {} for {} layers", chain.len(), layers.len())));
    }
    let mut per = Vec::with_capacity(layers.len());
    for (l, layer) in layers.iter().enumerate() {
        let (j, _) = conditional_rate_detail(&chain[l + 1], &chain[l], layer, act, opts, None)?;
        per.push(j);
    }
    Ok((per.iter().sum(), per))
}

/// What the final layer contributes beyond the chain rates.
#[derive(Clone, Copy)]
enum Terminal<'a> {
    /// `g^(L)` is fixed.
    Target(&'a CovMatrix),
    /// `g^(L)` is free; add `|(g^#)^+ z|^2 / 2` (infinite when `z` leaves the range).
    Output(&'a Matrix<f64>),
    /// `g^(L)` is free; add the penalised `(g, r)` objective with weight `mu`.
    Penalized(&'a Matrix<f64>, f64),
    /// `g^(L)` is free and must satisfy `g_aa >= t` (`above`) or `g_aa <= t`.
    Diagonal { alpha: usize, t: f64, above: bool },
    /// `g^(L)` is free; add `t^2 / (2 <c, g c>)`, the cheapest output with `<c, z> = t`.
    Functional(&'a Matrix<f64>, f64),
}

/// Final-layer events whose rate is an infimum over the last covariance.
#[derive(Clone, Debug)]
pub enum EventTerminal {
    /// `{g^(L)_aa >= t}` when `above`, otherwise `{g^(L)_aa <= t}`.
    Diagonal { alpha: usize, t: f64, above: bool },
    /// `{<c, z> >= t}` for the output `z`, with `t > 0`.
    Functional { weights: Matrix<f64>, t: f64 },
}

struct ChainProblem<'a> {
    g0: &'a CovMatrix,
    layers: &'a [LayerParams],
    act: &'a Activation,
    opts: &'a LegendreOptions,
    terminal: Terminal<'a>,
    /// 1-based indices of layers whose covariance is a free variable.
    free: Vec<usize>,
    dim: usize,
}

impl<'a> ChainProblem<'a> {
    fn new(
        g0: &'a CovMatrix,
        layers: &'a [LayerParams],
        act: &'a Activation,
        opts: &'a LegendreOptions,
        terminal: Terminal<'a>,
    ) -> Self {
        let depth = layers.len();
        let last_free = !matches!(terminal, Terminal::Target(_));
        let free = (1..=depth)
            .filter(|&l| layers[l - 1].gamma.is_finite() && (l < depth || last_free))
            .collect();
        Self { g0, layers, act, opts, terminal, free, dim: g0.dim() }
    }

    fn p(&self) -> usize {
        self.dim * (self.dim + 1) / 2
    }

    fn factor(&self, x: &[f64], k: usize) -> CovMatrix {
        let p = self.p();
        let b = SymMatrix::from_upper(self.dim, &x[k * p..(k + 1) * p]).expect("slice length");
        PsdMatrix::gram(b.matrix())
    }

    /// Encodes a chain through symmetric square roots of its free layers.
    fn encode(&self, chain: &[CovMatrix]) -> Vec<f64> {
        self.free.iter().flat_map(|&l| chain[l].root().sym().upper()).collect()
    }

    fn chain(&self, x: &[f64]) -> Result<Vec<CovMatrix>> {
        let depth = self.layers.len();
        let mut chain = vec![self.g0.clone()];
        for l in 1..=depth {
            let g = if let Some(k) = self.free.iter().position(|&f| f == l) {
                self.factor(x, k)
            } else if l == depth {
                match self.terminal {
                    Terminal::Target(t) => t.clone(),
                    _ => layer_mean(&chain[l - 1], &self.layers[l - 1], self.act, &self.opts.kappa)?,
                }
            } else {
                layer_mean(&chain[l - 1], &self.layers[l - 1], self.act, &self.opts.kappa)?
            };
            chain.push(g);
        }
        Ok(chain)
    }

    fn terminal_cost(&self, g_last: &CovMatrix) -> Result<(f64, Option<Matrix<f64>>)> {
        match self.terminal {
            Terminal::Target(_) => Ok((0.0, None)),
            Terminal::Output(z) => match optimal_r(z, g_last) {
                Ok(r) => Ok((0.5 * r.frobenius_norm().powi(2), Some(r))),
                Err(Error::Infeasible(_)) => Ok((f64::INFINITY, None)),
                Err(e) => Err(e),
            },
            Terminal::Penalized(z, mu) => {
                let r = penalized_r(z, g_last, mu)?;
                let resid = g_last.root().matrix().matmul(&r)?.sub(z)?.frobenius_norm();
                Ok((0.5 * r.frobenius_norm().powi(2) + mu * resid * resid, Some(r)))
            }
            Terminal::Diagonal { alpha, t, above } => {
                let g = g_last.get(alpha, alpha);
                Ok((if (above && g >= t) || (!above && g <= t) { 0.0 } else { f64::INFINITY }, None))
            }
            Terminal::Functional(c, t) => {
                let gc = g_last.matrix().matmul(c)?;
                let spread = frobenius_inner(c, &gc)?;
                Ok((if spread > 0.0 { t * t / (2.0 * spread) } else { f64::INFINITY }, None))
            }
        }
    }

    /// Objective with warm-started Legendre solves; `cache[l]` holds the last maximiser of layer `l`.
    fn objective(&self, x: &[f64], cache: &RefCell<Vec<Option<DualMatrix>>>) -> f64 {
        let chain = match self.chain(x) {
            Ok(c) => c,
            Err(_) => return f64::INFINITY,
        };
        let (tail, _) = match self.terminal_cost(chain.last().unwrap()) {
            Ok(t) => t,
            Err(_) => return f64::INFINITY,
        };
        if !tail.is_finite() {
            return f64::INFINITY;
        }
        let mut total = tail;
        for (l, layer) in self.layers.iter().enumerate() {
            let warm = cache.borrow()[l].clone();
            match conditional_rate_detail(&chain[l + 1], &chain[l], layer, self.act, self.opts, warm.as_ref()) {
                Ok((j, res)) => {
                    if let Some(eta) = res.and_then(|r| r.maximizer_eta) {
                        cache.borrow_mut()[l] = Some(eta);
                    }
                    total += j;
                    if !total.is_finite() {
                        return f64::INFINITY;
                    }
                }
                Err(_) => return f64::INFINITY,
            }
        }
        total
    }
}

struct LocalResult {
    x: Vec<f64>,
    f: f64,
    evals: usize,
}

fn minimize(problem: &ChainProblem, starts: &[Vec<f64>], opts: &RateOptions) -> Result<Vec<LocalResult>> {
    let run = |x0: &Vec<f64>| -> LocalResult {
        let cache = RefCell::new(vec![None; problem.layers.len()]);
        let nm: NmOptions = opts.nm.into();
        let first = nelder_mead(|x| problem.objective(x, &cache), x0, nm);
        // restart once from the best vertex to escape a collapsed simplex
        let second = nelder_mead(|x| problem.objective(x, &cache), &first.x, NmOptions { initial_step: 0.05, ..nm });
        let evals = first.evals + second.evals;
        if second.f <= first.f {
            LocalResult { x: second.x, f: second.f, evals }
        } else {
            LocalResult { x: first.x, f: first.f, evals }
        }
    };
    if opts.workers <= 1 {
        return Ok(starts.iter().map(run).collect());
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(opts.workers)
        .build()
        .map_err(|e| Error::InvalidConfig(format!("thread pool: {e}")))?;
    Ok(pool.install(|| starts.par_iter().map(run).collect()))
}

/// Starting chains: the mean chain, interpolations toward `target`, and random perturbations.
fn starting_points(problem: &ChainProblem, mean_chain: &[CovMatrix], target: Option<&CovMatrix>, opts: &RateOptions) -> Vec<Vec<f64>> {
    let depth = problem.layers.len();
    let mut starts = vec![problem.encode(mean_chain)];
    if let Some(t) = target {
        for lambda in [1.0, 0.5] {
            let chain: Vec<CovMatrix> = (0..=depth)
                .map(|l| {
                    let s = lambda * l as f64 / depth as f64;
                    let m = mean_chain[l].matrix().scale(1.0 - s).add(&t.matrix().scale(s)).expect("same shape");
                    CovMatrix::from_sym(SymMatrix::symmetrize(&m)).expect("convex combination of PSD matrices")
                })
                .collect();
            starts.push(problem.encode(&chain));
        }
    } else {
        // inflate the mean chain so that a nonzero output costs less
        for s in [1.5, 3.0] {
            let chain: Vec<CovMatrix> = mean_chain
                .iter()
                .map(|g| {
                    let m = g.matrix().scale(s).add(&Matrix::identity(g.dim()).scale(0.1 * (s - 1.0))).expect("square");
                    CovMatrix::from_sym(SymMatrix::symmetrize(&m)).expect("PSD")
                })
                .collect();
            starts.push(problem.encode(&chain));
        }
    }
    let base = starts.clone();
    let mut k = 0;
    while starts.len() < opts.restarts.max(1) {
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
        rng.set_stream(k as u64 + 1);
        let b = &base[k % base.len()];
        let x: Vec<f64> = b.iter().map(|&v| v + 0.3 * (1.0 + v.abs()) * rng.sample::<f64, _>(StandardNormal)).collect();
        starts.push(x);
        k += 1;
    }
    starts.truncate(opts.restarts.max(1));
    starts
}

fn certify(problem: &ChainProblem, locals: &[LocalResult]) -> Result<RateCertificate> {
    let (best_i, _) = locals
        .iter()
        .enumerate()
        .fold((0, f64::INFINITY), |(bi, bv), (i, r)| if r.f < bv { (i, r.f) } else { (bi, bv) });
    let finite: Vec<f64> = locals.iter().map(|r| r.f).filter(|v| v.is_finite()).collect();
    let evaluations = locals.iter().map(|r| r.evals).sum();
    let best = &locals[best_i];
    let chain = problem.chain(&best.x)?;
    let (tail, r_min) = problem.terminal_cost(chain.last().unwrap())?;
    let (total, per) = chain_rates(&chain, problem.layers, problem.act, problem.opts)?;
    let value = if finite.is_empty() { f64::INFINITY } else { total + tail };
    Ok(RateCertificate {
        value,
        chain,
        r_min,
        diagnostics: RateDiagnostics {
            restarts: locals.len(),
            best_local: finite.iter().copied().fold(f64::INFINITY, f64::min),
            worst_local: finite.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            evaluations,
            layer_rates: per,
        },
        crosscheck: None,
    })
}

/// `inf` over intermediate chains of `sum_l J(g^(l) | g^(l-1))` from `g0` to `g_target`, for
/// arbitrary per-layer parameters (no restriction on the width ratios).
pub fn rate_chain(
    g0: &CovMatrix,
    g_target: &CovMatrix,
    layers: &[LayerParams],
    act: &Activation,
    opts: &RateOptions,
) -> Result<RateCertificate> {
    if layers.is_empty() {
        return Err(Error::Precondition("at least one layer is required".into()));
    }
    if g_target.dim() != g0.dim() {
        return Err(Error::DimensionMismatch { op: "rate_I_G", left_rows: g_target.dim(), left_cols: g_target.dim(), right_rows: g0.dim(), right_cols: g0.dim() });
    }
    for l in layers {
        l.validate()?;
    }
    let problem = ChainProblem::new(g0, layers, act, &opts.legendre, Terminal::Target(g_target));
    let mean_chain = mean_chain_from(g0, layers, act, &opts.legendre)?;
    let starts = if problem.free.is_empty() { vec![Vec::new()] } else { starting_points(&problem, &mean_chain, Some(g_target), opts) };
    let locals = minimize(&problem, &starts, opts)?;
    certify(&problem, &locals)
}

fn mean_chain_from(g0: &CovMatrix, layers: &[LayerParams], act: &Activation, opts: &LegendreOptions) -> Result<Vec<CovMatrix>> {
    let mut chain = vec![g0.clone()];
    for layer in layers {
        let next = layer_mean(chain.last().unwrap(), layer, act, &opts.kappa)?;
        chain.push(next);
    }
    Ok(chain)
}

/// `I_{G,L,x}(g_target)`.
pub fn rate_i_g(g_target: &CovMatrix, config: &NetworkConfig, opts: &RateOptions) -> Result<RateCertificate> {
    let g0 = initial_gram(config)?;
    rate_chain(&g0, g_target, &config.layers(), &config.activation, opts)
}

/// Rate of a final-layer event: `inf` of the chain rate plus terminal cost over admissible chains.
pub fn rate_event(config: &NetworkConfig, event: EventTerminal, opts: &RateOptions) -> Result<RateCertificate> {
    let g0 = initial_gram(config)?;
    let na = g0.dim();
    let terminal = match &event {
        EventTerminal::Diagonal { alpha, t, above } => {
            if *alpha >= na {
                return Err(Error::InvalidConfig(format!("alpha = {alpha} out of range for |A| = {na}")));
            }
            Terminal::Diagonal { alpha: *alpha, t: *t, above: *above }
        }
        EventTerminal::Functional { weights, t } => {
            if weights.shape() != (na, config.n_out) {
                return Err(Error::InvalidConfig("functional weights must have shape |A| x n_out".into()));
            }
            if !(*t > 0.0) {
                return Err(Error::InvalidConfig("functional level must be positive".into()));
            }
            Terminal::Functional(weights, *t)
        }
    };
    let layers = config.layers();
    let act = &config.activation;
    let mean_chain = mean_chain_from(&g0, &layers, act, &opts.legendre)?;
    if let Terminal::Diagonal { alpha, t, above } = terminal {
        let g = mean_chain.last().unwrap().get(alpha, alpha);
        if (above && g >= t) || (!above && g <= t) {
            let problem = ChainProblem::new(&g0, &layers, act, &opts.legendre, terminal);
            let locals = [LocalResult { x: problem.encode(&mean_chain), f: 0.0, evals: 0 }];
            return certify(&problem, &locals);
        }
    }
    let problem = ChainProblem::new(&g0, &layers, act, &opts.legendre, terminal);
    if problem.free.is_empty() {
        return certify(&problem, &minimize(&problem, &[Vec::new()], opts)?);
    }
    let mut starts = starting_points(&problem, &mean_chain, None, opts);
    if let Terminal::Diagonal { alpha, t, above } = terminal {
        // admissible starts: scale the mean chain so that the last diagonal entry just passes t
        let g = mean_chain.last().unwrap().get(alpha, alpha);
        let depth = layers.len() as f64;
        for margin in [1.02, 1.2] {
            let goal = if above { t * margin } else { t / margin };
            if !(g > 0.0 && goal > 0.0) {
                continue;
            }
            let ratio = goal / g;
            let chain: Vec<CovMatrix> = mean_chain
                .iter()
                .enumerate()
                .map(|(l, m)| CovMatrix::from_sym(m.sym().scale(ratio.powf(l as f64 / depth))).expect("positive scaling"))
                .collect();
            starts.insert(0, problem.encode(&chain));
        }
        starts.truncate(opts.restarts.max(1).max(2));
    }
    let locals = minimize(&problem, &starts, opts)?;
    certify(&problem, &locals)
}

/// `I_{Z,L,x}(z)` for an `|A| x n_out` matrix `z`.
pub fn rate_i_z(z: &Matrix<f64>, config: &NetworkConfig, opts: &RateOptions, mode: RateMode) -> Result<RateCertificate> {
    let g0 = initial_gram(config)?;
    if z.rows() != g0.dim() {
        return Err(Error::DimensionMismatch { op: "rate_I_Z", left_rows: z.rows(), left_cols: z.cols(), right_rows: g0.dim(), right_cols: config.n_out });
    }
    if z.cols() != config.n_out {
        return Err(Error::InvalidConfig(format!("z has {} columns but n_out = {}", z.cols(), config.n_out)));
    }
    let layers = config.layers();
    let act = &config.activation;
    let mean_chain = mean_chain_from(&g0, &layers, act, &opts.legendre)?;

    let problem = ChainProblem::new(&g0, &layers, act, &opts.legendre, Terminal::Output(z));
    let starts = if problem.free.is_empty() { vec![Vec::new()] } else { starting_points(&problem, &mean_chain, None, opts) };
    let locals = minimize(&problem, &starts, opts)?;
    let mut cert = certify(&problem, &locals)?;
    if mode == RateMode::Simplified {
        return Ok(cert);
    }

    // joint (g, r) minimisation along an increasing penalty path, warm-started from the same
    // starting chains as above (not from the simplified optimum)
    let mut mu = opts.penalty_start;
    let mut xs: Vec<Vec<f64>> = starts;
    let mut last: Option<(f64, Vec<CovMatrix>, Matrix<f64>, f64)>;
    loop {
        let pen = ChainProblem::new(&g0, &layers, act, &opts.legendre, Terminal::Penalized(z, mu));
        let locals = minimize(&pen, &xs, opts)?;
        let (bi, _) = locals
            .iter()
            .enumerate()
            .fold((0, f64::INFINITY), |(bi, bv), (i, r)| if r.f < bv { (i, r.f) } else { (bi, bv) });
        let chain = pen.chain(&locals[bi].x)?;
        let g_last = chain.last().unwrap();
        let r = penalized_r(z, g_last, mu)?;
        let resid = g_last.root().matrix().matmul(&r)?.sub(z)?.frobenius_norm();
        last = Some((locals[bi].f, chain, r, resid));
        xs = locals.into_iter().map(|l| l.x).collect();
        if mu >= opts.penalty_end {
            break;
        }
        mu = (mu * opts.penalty_factor).min(opts.penalty_end);
    }
    let (full_value, _, _, resid) = last.expect("at least one penalty stage");
    let simplified = cert.value;
    cert.crosscheck = Some(CrossCheck {
        simplified_value: simplified,
        full_value,
        gap: (full_value - simplified).abs(),
        constraint_residual: resid,
        final_penalty: mu,
    });
    Ok(cert)
}
