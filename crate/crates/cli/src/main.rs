mod config;
mod io;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use ldpnn_core::activation::{asymptotic_constants, growth_bound};
use ldpnn_core::kernel::{kappa_eval, KappaMethod, KappaOptions};
use ldpnn_core::legendre::{kappa_star, LegendreOptions};
use ldpnn_core::linalg::{Matrix, SymMatrix};
use ldpnn_core::rate::{rate_i_g, rate_i_z, RateMode, RateOptions};
use ldpnn_core::simulator::{figure_data, tail_experiment, Direction, Prefactor, Summary, TailOptions};
use ldpnn_core::{Activation, CovMatrix, DualMatrix, Error};
use serde_json::{json, Value};
use std::path::PathBuf;
use std::process::ExitCode;

use config::{resolve_seed, ExperimentConfig};
use io::{document, emit_json, fmt_f64, number, parse_grid, read_matrix, write_csv};

#[derive(Parser)]
#[command(name = "ldpnn", version, about = "Large-deviation rate functions for wide Gaussian networks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Evaluate kappa(eta; q).
    Kappa(KappaArgs),
    /// Evaluate kappa*(y; q).
    Legendre(LegendreArgs),
    /// Rate function of an output matrix z, or of a final covariance g.
    Rate(RateArgs),
    /// Finite-width experiments.
    #[command(subcommand)]
    Simulate(SimulateCommand),
    /// Curves of kappa and kappa* for a scalar variance q.
    Figure(FigureArgs),
    /// Check the asymptotic slopes and growth bound of an activation.
    CertifyActivation(CertifyArgs),
}

#[derive(Args)]
struct Common {
    /// Seed; overrides LDPNN_SEED and the config file.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value_t = 1)]
    workers: usize,
    /// Write JSON here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct KappaArgs {
    /// Number, JSON nested array, or .json/.csv file.
    #[arg(long, allow_hyphen_values = true)]
    eta: String,
    #[arg(long)]
    q: String,
    #[arg(long, default_value = "relu")]
    activation: String,
    /// mc | quad | closed | series (default: chosen from the dimension).
    #[arg(long)]
    method: Option<String>,
    #[arg(long, default_value_t = 100_000)]
    samples: usize,
    #[arg(long, default_value_t = 12)]
    order: usize,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct LegendreArgs {
    #[arg(long, allow_hyphen_values = true)]
    y: String,
    #[arg(long)]
    q: String,
    #[arg(long, default_value = "relu")]
    activation: String,
    #[arg(long)]
    method: Option<String>,
    #[arg(long, default_value_t = 100_000)]
    samples: usize,
    #[command(flatten)]
    common: Common,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Simplified,
    Full,
}

#[derive(Args)]
struct RateArgs {
    #[arg(long)]
    config: PathBuf,
    /// Output matrix `|A| x n_out`.
    #[arg(long, allow_hyphen_values = true, conflicts_with = "g")]
    z: Option<String>,
    /// Final covariance `|A| x |A|`.
    #[arg(long, required_unless_present = "z")]
    g: Option<String>,
    #[arg(long, value_enum, default_value_t = ModeArg::Simplified)]
    mode: ModeArg,
    #[arg(long)]
    restarts: Option<usize>,
    #[command(flatten)]
    common: Common,
}

#[derive(Subcommand)]
enum SimulateCommand {
    /// Empirical tail probabilities and fitted decay slope.
    Tail(TailArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum DirectionArg {
    Above,
    Below,
}

#[derive(Clone, Copy, ValueEnum)]
enum PrefactorArg {
    None,
    BahadurRao,
}

#[derive(Args)]
struct TailArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long, allow_hyphen_values = true)]
    t: f64,
    /// Comma-separated base widths.
    #[arg(long, value_delimiter = ',', default_value = "50,100,200")]
    v: Vec<usize>,
    #[arg(long, default_value_t = 1_000_000)]
    samples: usize,
    #[arg(long, value_enum, default_value_t = DirectionArg::Above)]
    direction: DirectionArg,
    /// Diagonal entry of the last covariance used as the summary.
    #[arg(long, default_value_t = 0)]
    alpha: usize,
    /// Use `<c, Z/sqrt(v)>` with these `|A| x n_out` weights instead of a covariance entry.
    #[arg(long, allow_hyphen_values = true)]
    functional: Option<String>,
    #[arg(long, value_enum, default_value_t = PrefactorArg::None)]
    prefactor: PrefactorArg,
    /// Per-width rows as CSV.
    #[arg(long)]
    csv: Option<PathBuf>,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct FigureArgs {
    #[arg(long, default_value = "relu")]
    activation: String,
    #[arg(long, default_value_t = 1.0)]
    q: f64,
    #[arg(long, allow_hyphen_values = true, default_value = "-2:0.5:0.01")]
    eta_grid: String,
    #[arg(long, allow_hyphen_values = true, default_value = "0:3:0.01")]
    y_grid: String,
    /// Directory receiving kappa.csv and kappa_star.csv.
    #[arg(long, default_value = ".")]
    out_dir: PathBuf,
}

#[derive(Args)]
struct CertifyArgs {
    #[arg(long)]
    activation: String,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn kappa_options(method: Option<&str>, samples: usize, seed: u64, workers: usize) -> Result<KappaOptions> {
    let method = method.map(str::parse::<KappaMethod>).transpose()?;
    Ok(KappaOptions { method, samples, seed, workers, ..KappaOptions::default() })
}

fn dual(m: Matrix<f64>) -> Result<DualMatrix> {
    Ok(SymMatrix::new(m)?)
}

fn cov(m: Matrix<f64>) -> Result<CovMatrix> {
    Ok(CovMatrix::new(m)?)
}

fn run_kappa(a: KappaArgs) -> Result<()> {
    let act: Activation = a.activation.parse()?;
    let eta = dual(read_matrix(&a.eta)?)?;
    let q = cov(read_matrix(&a.q)?)?;
    let seed = resolve_seed(a.common.seed, None)?;
    let mut opts = kappa_options(a.method.as_deref(), a.samples, seed, a.common.workers)?;
    opts.series_order = a.order;
    let est = kappa_eval(&eta, &q, &act, &opts)?;
    let infinite = est.value.is_infinite();
    let doc = document(&est, json!({ "value": number(est.value), "infinite": infinite }))?;
    emit_json(&doc, a.common.out.as_deref())
}

fn run_legendre(a: LegendreArgs) -> Result<()> {
    let act: Activation = a.activation.parse()?;
    let y = dual(read_matrix(&a.y)?)?;
    let q = cov(read_matrix(&a.q)?)?;
    let seed = resolve_seed(a.common.seed, None)?;
    let opts = LegendreOptions::with_kappa(kappa_options(a.method.as_deref(), a.samples, seed, a.common.workers)?);
    let r = kappa_star(&y, &q, &act, &opts)?;
    let mut doc = document(
        &r,
        json!({
            "value": number(r.value),
            "infinite": r.is_infinite(),
            "maximizer": r.maximizer_eta.as_ref().map(|m| m.matrix().to_rows()),
        }),
    )?;
    if let Some(obj) = doc.as_object_mut() {
        obj.remove("maximizer_eta");
    }
    emit_json(&doc, a.common.out.as_deref())
}

fn rate_options(cfg: &ExperimentConfig, restarts: Option<usize>, seed: u64, workers: usize) -> Result<RateOptions> {
    let mut opts = RateOptions { seed, workers, ..RateOptions::default() };
    if let Some(r) = restarts.or(cfg.restarts) {
        opts.restarts = r;
    }
    if let Some(m) = &cfg.kappa_method {
        opts.legendre.kappa.method = Some(m.parse()?);
    }
    if let Some(s) = cfg.mc_samples {
        opts.legendre.kappa.samples = s;
    }
    opts.legendre.kappa.seed = seed;
    Ok(opts)
}

fn run_rate(a: RateArgs) -> Result<()> {
    let cfg = ExperimentConfig::load(&a.config)?;
    let network = cfg.network()?;
    let seed = resolve_seed(a.common.seed, cfg.seed)?;
    let opts = rate_options(&cfg, a.restarts, seed, a.common.workers)?;
    let cert = match (&a.z, &a.g) {
        (Some(z), _) => {
            let mode = match a.mode {
                ModeArg::Simplified => RateMode::Simplified,
                ModeArg::Full => RateMode::FullCrosscheck,
            };
            rate_i_z(&read_matrix(z)?, &network, &opts, mode)?
        }
        (None, Some(g)) => rate_i_g(&cov(read_matrix(g)?)?, &network, &opts)?,
        (None, None) => bail!("one of --z or --g is required"),
    };
    let doc = document(&cert, json!({ "value": number(cert.value), "infinite": cert.value.is_infinite(), "seed": seed }))?;
    emit_json(&doc, a.common.out.as_deref())
}

fn run_tail(a: TailArgs) -> Result<()> {
    let cfg = ExperimentConfig::load(&a.config)?;
    let network = cfg.network()?;
    let seed = resolve_seed(a.common.seed, cfg.seed)?;
    let summary = match &a.functional {
        Some(w) => Summary::OutputFunctional { weights: read_matrix(w)? },
        None => Summary::GramDiagonal { alpha: a.alpha },
    };
    let direction = match a.direction {
        DirectionArg::Above => Direction::Above,
        DirectionArg::Below => Direction::Below,
    };
    let opts = TailOptions {
        v_list: a.v.clone(),
        samples_per_v: a.samples,
        seed,
        workers: a.common.workers,
        prefactor: match a.prefactor {
            PrefactorArg::None => Prefactor::None,
            PrefactorArg::BahadurRao => Prefactor::BahadurRao,
        },
        rate: rate_options(&cfg, None, seed, a.common.workers)?,
    };
    let r = tail_experiment(&network, &summary, a.t, direction, &opts)?;
    let rows: Vec<Vec<String>> = r
        .rows
        .iter()
        .map(|row| {
            vec![
                row.v.to_string(),
                row.samples.to_string(),
                row.hits.to_string(),
                fmt_f64(row.p_hat),
                fmt_f64(row.neg_log_p_over_v),
                fmt_f64(row.std_error),
            ]
        })
        .collect();
    let header = ["v", "samples", "hits", "p_hat", "neg_log_p_over_v", "std_err"];
    if let Some(path) = &a.csv {
        write_csv(Some(path), &header, &rows)?;
    }
    let summary_doc = json!({
        "slope": r.fit.slope,
        "slope_std_error": r.fit.slope_std_error,
        "intercept": r.fit.intercept,
        "predicted_rate": number(r.predicted_rate),
        "relative_gap": number(r.relative_gap),
        "prefactor": r.prefactor,
        "seed": seed,
        "rows": r.rows.iter().map(|row| json!({
            "v": row.v,
            "samples": row.samples,
            "hits": row.hits,
            "p_hat": row.p_hat,
            "neg_log_p_over_v": number(row.neg_log_p_over_v),
            "std_err": number(row.std_error),
            "excluded": row.excluded,
        })).collect::<Vec<Value>>(),
    });
    emit_json(&document(summary_doc, Value::Null)?, a.common.out.as_deref())
}

fn run_figure(a: FigureArgs) -> Result<()> {
    let act: Activation = a.activation.parse()?;
    let eta = parse_grid(&a.eta_grid)?;
    let y = parse_grid(&a.y_grid)?;
    let data = figure_data(&act, a.q, &eta, &y, &LegendreOptions::default())?;
    std::fs::create_dir_all(&a.out_dir).with_context(|| format!("creating {}", a.out_dir.display()))?;
    let kappa_path = a.out_dir.join("kappa.csv");
    let star_path = a.out_dir.join("kappa_star.csv");
    let rows = |r: &[ldpnn_core::simulator::FigureRow]| -> Vec<Vec<String>> {
        r.iter().map(|p| vec![fmt_f64(p.x), fmt_f64(p.value)]).collect()
    };
    write_csv(Some(&kappa_path), &["x", "kappa"], &rows(&data.kappa))?;
    write_csv(Some(&star_path), &["y", "kappa_star"], &rows(&data.kappa_star))?;
    let doc = json!({
        "schema": io::SCHEMA,
        "activation": act.name(),
        "q": a.q,
        "files": [kappa_path.display().to_string(), star_path.display().to_string()],
    });
    emit_json(&doc, None)
}

fn run_certify(a: CertifyArgs) -> Result<()> {
    let act: Activation = a.activation.parse()?;
    let report = asymptotic_constants(&act);
    let growth = growth_bound(&act);
    let pass = report.pass && growth.is_ok();
    let doc = document(
        &report,
        json!({
            "c_plus": act.c_plus(),
            "c_minus": act.c_minus(),
            "left_slope": act.left_slope(),
            "growth_C": act.growth_c(),
            "growth_check": growth.as_ref().err().map(|e| e.to_string()),
            "pass": pass,
        }),
    )?;
    emit_json(&doc, a.out.as_deref())
}

fn exit_code(e: &anyhow::Error) -> u8 {
    match e.downcast_ref::<Error>() {
        Some(Error::Diverged(_) | Error::Inconclusive(_) | Error::Certification(_)) => 2,
        _ => 1,
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Kappa(a) => run_kappa(a),
        Command::Legendre(a) => run_legendre(a),
        Command::Rate(a) => run_rate(a),
        Command::Simulate(SimulateCommand::Tail(a)) => run_tail(a),
        Command::Figure(a) => run_figure(a),
        Command::CertifyActivation(a) => run_certify(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
