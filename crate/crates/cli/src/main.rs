//! `nsde`: generate Heston targets, calibrate neural SDEs, compute price
//! bounds and summarize runs.

mod config;
mod manifest;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use nsde::autodiff::ParamStore;
use nsde::calibrate::{self, write_instruments_csv, Direction, InstrumentRow, Summary, Trainer};
use nsde::hedge::{hedge_error_stats, write_residuals_csv, HedgeNet};
use nsde::market::{heston_mc_lookback, heston_mc_surface, strike_preset, write_lookback_csv, MarketSurface};
use nsde::nets::{format_f64, Checkpoint};
use nsde::rng::derive_seed;
use nsde::sde::ModelSpec;
use nsde::stats::quantile;

use config::Config;
use manifest::{sha256_file, sha256_text, Manifest};

const CHECKPOINT: &str = "checkpoint.txt";
const SUMMARY: &str = "summary.txt";
const INSTRUMENTS: &str = "instruments.csv";
const EPOCHS: &str = "epochs.csv";
const PRICE_TAG: u64 = 40;

#[derive(Parser, Debug)]
#[command(name = "nsde", version, about = "Neural SDE calibration with hedging control variates and price bounds")]
struct Cli {
    /// Configuration file; built-in defaults fill missing keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override a configuration key, e.g. `--set training.epochs=100`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, env = "NSDE_OUTPUT_DIR", default_value = "nsde-out")]
    out: PathBuf,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Print the resolved configuration as TOML.
    PrintConfig,
    /// Heston call surface and lookback references.
    GenMarket,
    /// Calibrate to a call surface.
    Calibrate(TrainArgs),
    /// Lower or upper exotic price bound subject to calibration.
    Bound {
        #[arg(long, value_enum)]
        direction: BoundDirection,
        #[command(flatten)]
        train: TrainArgs,
    },
    /// Price the calibration instruments and the exotic with a checkpoint.
    Price {
        #[command(flatten)]
        eval: EvalArgs,
        /// Ignore the stored hedge.
        #[arg(long)]
        no_hedge: bool,
    },
    /// Hedging error of the exotic: residuals and E[s²].
    HedgeEval {
        #[command(flatten)]
        eval: EvalArgs,
        /// Evaluate a zero hedge instead of the stored one.
        #[arg(long)]
        zero_hedge: bool,
        /// Histogram bins of the residual CSV.
        #[arg(long, default_value_t = 50)]
        bins: usize,
    },
    /// Quantiles of exotic price and MSE across runs, per direction.
    Report {
        #[arg(required = true)]
        runs: Vec<PathBuf>,
    },
    /// Internal consistency checks; with a run directory also verifies its
    /// artifacts and replays the first epoch.
    Selfcheck { run: Option<PathBuf> },
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Call surface CSV.
    #[arg(long)]
    market: PathBuf,
    /// Continue from the checkpoint in this run directory.
    #[arg(long)]
    from: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// Run directory holding the checkpoint.
    #[arg(long)]
    run: PathBuf,
    #[arg(long)]
    market: PathBuf,
    /// Evaluation paths (default from the configuration).
    #[arg(long)]
    paths: Option<usize>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum BoundDirection {
    Lower,
    Upper,
}

/// Exit status by error class.
fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<nsde::Error>() {
            return match e {
                nsde::Error::Divergence { .. } => 4,
                nsde::Error::Io(_) | nsde::Error::Csv(_) | nsde::Error::Parse(_) => 3,
                nsde::Error::InvalidArgument(_) | nsde::Error::ImpliedVol(_) => 2,
                _ => 1,
            };
        }
        if cause.is::<std::io::Error>() {
            return 3;
        }
        if cause.is::<toml::de::Error>() || cause.is::<ConfigError>() {
            return 2;
        }
    }
    1
}

#[derive(Debug, thiserror::Error)]
#[error("{0}")]
struct ConfigError(String);

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn load_config(cli: &Cli) -> Result<Config> {
    let base = match &cli.config {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            Config::parse(&text).map_err(|e| ConfigError(format!("{}: {e}", p.display())))?
        }
        None => Config::default(),
    };
    let mut c = base
        .with_overrides(&cli.overrides)
        .map_err(|e| ConfigError(format!("{e:#}")))?;
    if let Some(s) = cli.seed {
        c.seed = s;
    }
    Ok(c)
}

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            bail!(ConfigError("--threads must be positive".into()));
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    let cfg = load_config(&cli)?;
    match &cli.command {
        Command::PrintConfig => {
            print!("{}", cfg.to_toml());
            Ok(())
        }
        Command::GenMarket => gen_market(&cfg, &cli.out),
        Command::Calibrate(a) => train(&cfg, &cli.out, Direction::None, a),
        Command::Bound { direction, train: a } => {
            let d = match direction {
                BoundDirection::Lower => Direction::Lower,
                BoundDirection::Upper => Direction::Upper,
            };
            train(&cfg, &cli.out, d, a)
        }
        Command::Price { eval, no_hedge } => price(&cfg, &cli.out, eval, *no_hedge),
        Command::HedgeEval { eval, zero_hedge, bins } => hedge_eval(&cfg, &cli.out, eval, *zero_hedge, *bins),
        Command::Report { runs } => report(&cli.out, runs),
        Command::Selfcheck { run } => selfcheck(run.as_deref()),
    }
}

fn create_dir(out: &Path) -> Result<()> {
    std::fs::create_dir_all(out).with_context(|| format!("creating output directory {}", out.display()))
}

fn gen_market(cfg: &Config, out: &Path) -> Result<()> {
    create_dir(out)?;
    let sim = cfg.heston()?;
    let m = &cfg.market;
    let strikes = strike_preset(m.strikes)?;
    let surface = heston_mc_surface(&sim, &m.maturities, &strikes, m.paths, derive_seed(cfg.seed, 1))?;
    for w in surface.arbitrage_warnings() {
        log::warn!("{w}");
    }
    let lb_sim = nsde::market::HestonSim {
        steps_per_year: m.lookback_steps_per_year,
        ..sim
    };
    let lookback = heston_mc_lookback(&lb_sim, &m.maturities, m.paths, derive_seed(cfg.seed, 2))?;
    let (sp, lp) = (out.join("surface.csv"), out.join("lookback.csv"));
    surface.write_csv(&sp)?;
    write_lookback_csv(&lp, &lookback)?;
    for q in &lookback {
        println!("lookback T={:.6} price={:.6} stderr={:.2e}", q.maturity, q.price, q.stderr);
    }
    println!("{} quotes on {} maturities -> {}", surface.len(), surface.maturities().len(), sp.display());
    Manifest::new("gen-market", cfg).with_artifacts(out, &["surface.csv", "lookback.csv"])?.write(out)
}

fn read_market(path: &Path) -> Result<MarketSurface> {
    MarketSurface::read_csv(path).with_context(|| format!("reading market file {}", path.display()))
}

fn load_checkpoint(run: &Path) -> Result<(ModelSpec, Option<(HedgeNet, ParamStore)>)> {
    let p = run.join(CHECKPOINT);
    let cp = Checkpoint::read(&p).with_context(|| format!("reading {}", p.display()))?;
    let model = ModelSpec::from_checkpoint(&cp)?;
    let hedge = if cp.get("hedge.maturities").is_some() {
        Some(HedgeNet::from_checkpoint(&cp)?)
    } else {
        None
    };
    Ok((model, hedge))
}

fn checkpoint_text(model: &ModelSpec, hedge: Option<&(HedgeNet, ParamStore)>) -> String {
    let mut cp = Checkpoint::new();
    model.to_checkpoint(&mut cp);
    if let Some((h, s)) = hedge {
        h.to_checkpoint(s, &mut cp);
    }
    cp.to_text()
}

fn build_trainer(cfg: &Config, direction: Direction, market: &Path, from: Option<&Path>) -> Result<Trainer> {
    let cc = cfg.calib_config(direction)?;
    let surface = read_market(market)?;
    Ok(match from {
        Some(dir) => {
            let (model, hedge) = load_checkpoint(dir)?;
            if model.config().maturities != cc.model.maturities {
                bail!(ConfigError("checkpoint maturities differ from the configuration".into()));
            }
            log::info!("continuing from {}", dir.display());
            Trainer::with_state(cc, &surface, model, hedge)?
        }
        None => Trainer::new(cc, &surface)?,
    })
}

/// Hash of the state after the first epoch (or the initial state when no
/// epoch is configured).
fn first_epoch_fingerprint(t: &mut Trainer) -> Result<String> {
    if t.config().epochs > 0 && t.epoch() == 0 {
        t.step()?;
    }
    Ok(sha256_text(&checkpoint_text(&t.model, t.hedge.as_ref())))
}

fn train(cfg: &Config, out: &Path, direction: Direction, a: &TrainArgs) -> Result<()> {
    create_dir(out)?;
    let mut t = build_trainer(cfg, direction, &a.market, a.from.as_deref())?;
    let fingerprint = first_epoch_fingerprint(&mut t)?;
    let total = t.config().epochs;
    while t.epoch() < total {
        let r = t.step()?;
        if r.epoch % 50 == 0 || r.epoch + 1 == total {
            log::info!("epoch {} mse {:.3e} exotic {:?}", r.epoch, r.mse, r.exotic_price);
        }
    }
    let cal = t.finish()?;
    std::fs::write(out.join(CHECKPOINT), checkpoint_text(&cal.model, cal.hedge.as_ref()))?;
    cal.report.write_epochs_csv(&out.join(EPOCHS))?;
    let rows: Vec<InstrumentRow> = cal.evaluation.instruments.iter().map(InstrumentRow::from).collect();
    write_instruments_csv(&out.join(INSTRUMENTS), &rows)?;
    let summary = Summary::of(&cal);
    summary.write(&out.join(SUMMARY))?;
    println!("direction {} final mse {:.3e}", direction.as_str(), summary.final_mse);
    if let (Some(p), Some(se)) = (summary.exotic_price, summary.exotic_stderr) {
        println!("exotic {p:.6} ± {se:.2e}");
    }
    let mut m = Manifest::new(if direction == Direction::None { "calibrate" } else { "bound" }, cfg);
    m.direction = Some(direction.as_str().into());
    m.fingerprint = Some(fingerprint);
    m.add_input("market", &a.market)?;
    if let Some(dir) = &a.from {
        m.add_input("from", &dir.join(CHECKPOINT))?;
    }
    m.with_artifacts(out, &[CHECKPOINT, EPOCHS, INSTRUMENTS, SUMMARY])?.write(out)
}

fn evaluation_inputs(cfg: &Config, e: &EvalArgs) -> Result<(ModelSpec, Option<(HedgeNet, ParamStore)>, Vec<nsde::market::Quote>, usize)> {
    let (model, hedge) = load_checkpoint(&e.run)?;
    let surface = read_market(&e.market)?;
    let quotes = surface.restrict(model.maturities())?.quotes().to_vec();
    let paths = e.paths.unwrap_or(cfg.evaluation.paths);
    Ok((model, hedge, quotes, paths))
}

fn price(cfg: &Config, out: &Path, e: &EvalArgs, no_hedge: bool) -> Result<()> {
    create_dir(out)?;
    let (model, hedge, quotes, paths) = evaluation_inputs(cfg, e)?;
    let hedge = if no_hedge { None } else { hedge };
    let exotic = cfg.exotic()?;
    let ev = calibrate::evaluate(
        &model,
        hedge.as_ref().map(|(h, s)| (h, s)),
        &quotes,
        exotic.as_ref(),
        cfg.training.steps_per_year,
        paths,
        derive_seed(cfg.seed, PRICE_TAG),
        cfg.evaluation.antithetic,
        false,
    )?;
    let rows: Vec<InstrumentRow> = ev.instruments.iter().map(InstrumentRow::from).collect();
    write_instruments_csv(&out.join(INSTRUMENTS), &rows)?;
    for r in &rows {
        println!(
            "T={:.6} K={:.4} target={:.6} price={:.6} stderr={:.2e}",
            r.maturity, r.strike, r.target, r.price, r.stderr
        );
    }
    println!("mse {:.3e}", ev.mse);
    if let Some((spec, raw, cv)) = ev.exotic {
        println!("{} T={} raw {:.6} ± {:.2e} hedged {:.6} ± {:.2e}", spec.kind.as_str(), spec.maturity, raw.mean, raw.stderr, cv.mean, cv.stderr);
    }
    let mut m = Manifest::new("price", cfg);
    m.add_input("checkpoint", &e.run.join(CHECKPOINT))?;
    m.add_input("market", &e.market)?;
    m.with_artifacts(out, &[INSTRUMENTS])?.write(out)
}

/// Equal-width histogram: `(left edge, right edge, count)`.
fn histogram(xs: &[f64], bins: usize) -> Vec<(f64, f64, usize)> {
    let lo = xs.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let width = if hi > lo { (hi - lo) / bins as f64 } else { 1.0 };
    let mut counts = vec![0usize; bins];
    for &x in xs {
        let k = (((x - lo) / width) as usize).min(bins - 1);
        counts[k] += 1;
    }
    counts
        .into_iter()
        .enumerate()
        .map(|(k, c)| (lo + k as f64 * width, lo + (k + 1) as f64 * width, c))
        .collect()
}

fn hedge_eval(cfg: &Config, out: &Path, e: &EvalArgs, zero_hedge: bool, bins: usize) -> Result<()> {
    if bins == 0 {
        bail!(ConfigError("--bins must be positive".into()));
    }
    create_dir(out)?;
    let (model, hedge, quotes, paths) = evaluation_inputs(cfg, e)?;
    let exotic = cfg
        .exotic()?
        .ok_or_else(|| ConfigError("hedge-eval needs an exotic in the configuration".into()))?;
    let hedge = if zero_hedge { None } else { hedge };
    if let Some((h, _)) = &hedge {
        if h.exotic_maturity().is_none() {
            bail!(ConfigError("checkpoint has no exotic hedge".into()));
        }
    }
    let ev = calibrate::evaluate(
        &model,
        hedge.as_ref().map(|(h, s)| (h, s)),
        &quotes,
        Some(&exotic),
        cfg.training.steps_per_year,
        paths,
        derive_seed(cfg.seed, PRICE_TAG),
        cfg.evaluation.antithetic,
        true,
    )?;
    let (psi, gains) = ev.exotic_paths.expect("requested exotic paths");
    let stats = hedge_error_stats(&psi, &gains)?;
    write_residuals_csv(&out.join("residuals.csv"), &stats.residuals)?;
    let mut w = csv::Writer::from_path(out.join("residual_histogram.csv"))?;
    w.write_record(["left", "right", "count"])?;
    for (l, r, c) in histogram(&stats.residuals, bins) {
        w.write_record([format_f64(l), format_f64(r), c.to_string()])?;
    }
    w.flush()?;
    println!("E[s^2] = {:.6e} over {} paths", stats.mean_square, psi.len());
    let mut m = Manifest::new("hedge-eval", cfg);
    m.add_input("checkpoint", &e.run.join(CHECKPOINT))?;
    m.add_input("market", &e.market)?;
    m.with_artifacts(out, &["residuals.csv", "residual_histogram.csv"])?.write(out)
}

fn report(out: &Path, runs: &[PathBuf]) -> Result<()> {
    let mut loaded = Vec::new();
    for dir in runs {
        let s = Summary::read(&dir.join(SUMMARY)).with_context(|| format!("reading summary of {}", dir.display()))?;
        let grid: Vec<(u64, u64)> = calibrate::read_instruments_csv(&dir.join(INSTRUMENTS))?
            .iter()
            .map(|r| (r.maturity.to_bits(), r.strike.to_bits()))
            .collect();
        loaded.push((dir, s, grid));
    }
    let (first_dir, first, grid0) = &loaded[0];
    for (dir, s, grid) in &loaded[1..] {
        if grid != grid0 || s.exotic != first.exotic || s.model != first.model {
            bail!(ConfigError(format!(
                "runs {} and {} use different instruments, exotic or model",
                first_dir.display(),
                dir.display()
            )));
        }
    }
    create_dir(out)?;
    let path = out.join("report.csv");
    let mut w = csv::Writer::from_path(&path)?;
    w.write_record(["direction", "metric", "runs", "min", "q25", "median", "q75", "max"])?;
    for d in [Direction::Lower, Direction::None, Direction::Upper] {
        let group: Vec<&Summary> = loaded.iter().map(|x| &x.1).filter(|s| s.direction == d).collect();
        if group.is_empty() {
            continue;
        }
        let metrics: [(&str, Vec<f64>); 2] = [
            ("exotic_price", group.iter().filter_map(|s| s.exotic_price).collect()),
            ("final_mse", group.iter().map(|s| s.final_mse).collect()),
        ];
        for (name, mut xs) in metrics {
            if xs.is_empty() {
                continue;
            }
            xs.sort_by(f64::total_cmp);
            let q: Vec<f64> = [0.0, 0.25, 0.5, 0.75, 1.0].iter().map(|&p| quantile(&xs, p)).collect();
            println!(
                "{:5} {:12} n={} min {:.6} q25 {:.6} median {:.6} q75 {:.6} max {:.6}",
                d.as_str(),
                name,
                xs.len(),
                q[0],
                q[1],
                q[2],
                q[3],
                q[4]
            );
            let mut rec = vec![d.as_str().to_string(), name.to_string(), xs.len().to_string()];
            rec.extend(q.iter().map(|v| format_f64(*v)));
            w.write_record(&rec)?;
        }
    }
    w.flush()?;
    Ok(())
}

fn check(name: &str, ok: bool, failures: &mut usize) {
    println!("{} {name}", if ok { "ok  " } else { "FAIL" });
    if !ok {
        *failures += 1;
    }
}

fn builtin_checks(failures: &mut usize) -> Result<()> {
    use nsde::market::{bs_price, implied_vol};
    use nsde::sde::{martingale_check, ModelConfig, TimeGrid};

    let mut worst: f64 = 0.0;
    for &k in &[0.8, 1.0, 1.2] {
        for &vol in &[0.1, 0.3, 0.6] {
            let p = bs_price(1.0, k, 0.02, 0.5, vol);
            worst = worst.max((implied_vol(p, 1.0, k, 0.02, 0.5)? - vol).abs());
        }
    }
    check("implied-vol round trip", worst <= 1e-8, failures);

    let model = ModelSpec::new(ModelConfig {
        maturities: vec![0.25],
        hidden: vec![8, 8],
        ..ModelConfig::default()
    })?;
    let grid = TimeGrid::uniform(0.25, 96)?;
    let mc = martingale_check(&model, &grid, 20_000, 7, true)?;
    check("discounted asset is a martingale", mc.within(3.0), failures);

    let text = checkpoint_text(&model, None);
    let back = ModelSpec::from_checkpoint(&Checkpoint::parse(&text)?)?;
    check("checkpoint round trip", checkpoint_text(&back, None) == text, failures);
    Ok(())
}

fn selfcheck(run: Option<&Path>) -> Result<()> {
    let mut failures = 0;
    builtin_checks(&mut failures)?;
    if let Some(dir) = run {
        let m = Manifest::read(dir)?;
        for (name, hash) in &m.artifacts {
            let ok = sha256_file(&dir.join(name)).map(|h| &h == hash).unwrap_or(false);
            check(&format!("artifact {name}"), ok, &mut failures);
        }
        for (name, (path, hash)) in &m.inputs {
            let ok = sha256_file(Path::new(path)).map(|h| &h == hash).unwrap_or(false);
            check(&format!("input {name}"), ok, &mut failures);
        }
        if let Some(fp) = &m.fingerprint {
            let direction = Direction::parse(m.direction.as_deref().unwrap_or("none"))?;
            let market = &m.inputs.get("market").context("manifest lacks the market input")?.0;
            let from = m.inputs.get("from").map(|(p, _)| PathBuf::from(p));
            let from_dir = from.as_ref().and_then(|p| p.parent());
            let mut t = build_trainer(&m.config, direction, Path::new(market), from_dir)?;
            check("first-epoch fingerprint", &first_epoch_fingerprint(&mut t)? == fp, &mut failures);
        }
    }
    if failures > 0 {
        bail!("{failures} self-check(s) failed");
    }
    Ok(())
}
