use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde::Serialize;
use sha2::{Digest, Sha256};

use averaging_games::config::ExperimentConfig;
use averaging_games::diffusion_ref::{euler_maruyama_terminal, reference_dt, DiffusionSpec};
use averaging_games::dynkin;
use averaging_games::experiments::{convergence_study, law_comparison, theoretical_bounds, BOUNDS_NOTE};
use averaging_games::rng::NORMAL_SAMPLER;
use averaging_games::scheme::ensemble_summary;
use averaging_games::{Error, Result};

#[derive(Parser)]
#[command(name = "avgame", version, about = "Averaging schemes, limiting diffusions and Dynkin game values")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Master seed; overrides the config's `seed` (default 0).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Limit coefficients b_bar, c, A and sigma at the configured probes.
    Coeffs { config: PathBuf },
    /// Per-step ensemble statistics of the discrete scheme.
    Simulate { config: PathBuf },
    /// Terminal ensemble of the limiting diffusion by Euler–Maruyama.
    Reference { config: PathBuf },
    /// KS distances between scheme and diffusion ensembles along the schedule.
    Compare { config: PathBuf },
    /// Game value at a single step scale.
    Value { config: PathBuf },
    /// Game values along the schedule and the fitted convergence rate.
    Converge { config: PathBuf },
    /// Theoretical constants delta(d) and log10 eps0(d).
    Bounds {
        #[arg(long, value_delimiter = ',', default_value = "1,2,3")]
        dims: Vec<usize>,
        #[arg(long, default_value_t = 2)]
        moment: usize,
    },
}

#[derive(Serialize)]
struct Manifest<'a> {
    command: &'a str,
    package: &'static str,
    version: &'static str,
    config_sha256: Option<String>,
    seed: u64,
    threads: usize,
    rng: &'static str,
    normal_sampler: &'static str,
    outputs: Vec<String>,
    note: &'static str,
    #[serde(skip_serializing_if = "Option::is_none")]
    details: Option<serde_json::Value>,
}

struct Run {
    out: PathBuf,
    outputs: Vec<String>,
}

impl Run {
    fn csv(&mut self, name: &str, header: Vec<String>, rows: Vec<Vec<String>>) -> Result<()> {
        let mut w = csv::Writer::from_path(self.out.join(name)).map_err(|e| Error::Io(e.to_string()))?;
        w.write_record(&header).map_err(|e| Error::Io(e.to_string()))?;
        for r in rows {
            w.write_record(&r).map_err(|e| Error::Io(e.to_string()))?;
        }
        w.flush()?;
        self.outputs.push(name.to_string());
        Ok(())
    }

    fn json(&mut self, name: &str, value: &impl Serialize) -> Result<()> {
        fs::write(self.out.join(name), serde_json::to_string_pretty(value)? + "\n")?;
        self.outputs.push(name.to_string());
        Ok(())
    }
}

fn num(v: f64) -> String {
    format!("{v}")
}

fn opt<T: ToString>(v: Option<T>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn indexed(prefix: &str, n: usize) -> impl Iterator<Item = String> + '_ {
    (0..n).map(move |i| format!("{prefix}{i}"))
}

fn load(path: &Path) -> Result<(ExperimentConfig, String)> {
    let bytes = fs::read(path)?;
    let hash = Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect();
    let text = String::from_utf8(bytes).map_err(|e| Error::Config(e.to_string()))?;
    Ok((ExperimentConfig::from_json(&text)?, hash))
}

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::InvalidParameter(e.to_string()))?;
    }
    fs::create_dir_all(&cli.out)?;
    let mut run = Run { out: cli.out.clone(), outputs: Vec::new() };
    let (name, loaded) = match &cli.command {
        Command::Coeffs { config } => ("coeffs", Some(load(config)?)),
        Command::Simulate { config } => ("simulate", Some(load(config)?)),
        Command::Reference { config } => ("reference", Some(load(config)?)),
        Command::Compare { config } => ("compare", Some(load(config)?)),
        Command::Value { config } => ("value", Some(load(config)?)),
        Command::Converge { config } => ("converge", Some(load(config)?)),
        Command::Bounds { .. } => ("bounds", None),
    };
    let seed = cli.seed.or(loaded.as_ref().and_then(|(c, _)| c.seed)).unwrap_or(0);
    let details = match (&cli.command, loaded.as_ref()) {
        (Command::Coeffs { .. }, Some((c, _))) => coeffs(&mut run, c)?,
        (Command::Simulate { .. }, Some((c, _))) => simulate(&mut run, c, seed)?,
        (Command::Reference { .. }, Some((c, _))) => reference(&mut run, c, seed)?,
        (Command::Compare { .. }, Some((c, _))) => compare(&mut run, c, seed)?,
        (Command::Value { .. }, Some((c, _))) => value(&mut run, c)?,
        (Command::Converge { .. }, Some((c, _))) => converge(&mut run, c)?,
        (Command::Bounds { dims, moment }, _) => bounds(&mut run, dims, *moment)?,
        _ => unreachable!("every config command loads its config"),
    };
    let manifest = Manifest {
        command: name,
        package: env!("CARGO_PKG_NAME"),
        version: env!("CARGO_PKG_VERSION"),
        config_sha256: loaded.map(|(_, h)| h),
        seed,
        threads: rayon::current_num_threads(),
        rng: "ChaCha8Rng, one stream per ensemble member",
        normal_sampler: NORMAL_SAMPLER,
        outputs: run.outputs.clone(),
        note: BOUNDS_NOTE,
        details,
    };
    let mut r = Run { out: cli.out, outputs: Vec::new() };
    r.json("manifest.json", &manifest)
}

fn coeffs(run: &mut Run, config: &ExperimentConfig) -> Result<Option<serde_json::Value>> {
    let lc = config.limit_coefficients()?;
    let d = lc.dim();
    let mut header: Vec<String> = indexed("x", d).chain(indexed("b_bar", d)).chain(indexed("c", d)).collect();
    for prefix in ["a", "sigma"] {
        for i in 0..d {
            header.extend((0..d).map(|j| format!("{prefix}{i}{j}")));
        }
    }
    header.extend(["correction_truncation_bound".into(), "diffusion_truncation_bound".into()]);
    let mut rows = Vec::new();
    for x in config.probes() {
        let pc = lc.at(&x)?;
        let mut row: Vec<String> = x.iter().chain(&pc.b_bar).chain(&pc.c).map(|v| num(*v)).collect();
        for m in [&pc.a, &pc.sigma] {
            for i in 0..d {
                row.extend((0..d).map(|j| num(m[(i, j)])));
            }
        }
        row.extend([num(pc.correction_truncation_bound), num(pc.diffusion_truncation_bound)]);
        rows.push(row);
    }
    run.csv("coefficients.csv", header, rows)?;
    Ok(Some(serde_json::json!({ "n_max": lc.n_max(), "audit": lc.audit(), "audit_passed": lc.audit().passed() })))
}

fn simulate(run: &mut Run, config: &ExperimentConfig, seed: u64) -> Result<Option<serde_json::Value>> {
    let (noise, field) = config.build_model()?;
    let eps = config.single_eps()?;
    let rows = ensemble_summary(&config.x0, eps, config.horizon, &field, &noise, seed, config.paths)?;
    let header = ["step", "t", "coord", "mean", "variance", "q05", "q50", "q95"].map(String::from).to_vec();
    let rows = rows
        .iter()
        .map(|r| {
            vec![r.step.to_string(), num(r.t), r.coord.to_string(), num(r.mean), num(r.variance), num(r.q05), num(r.q50), num(r.q95)]
        })
        .collect();
    run.csv("summary.csv", header, rows)?;
    Ok(Some(serde_json::json!({ "eps": eps, "paths": config.paths })))
}

fn reference(run: &mut Run, config: &ExperimentConfig, seed: u64) -> Result<Option<serde_json::Value>> {
    let lc = std::sync::Arc::new(config.limit_coefficients()?);
    let dt = match config.dt {
        Some(dt) => dt,
        None if lc.field().is_constant() => config.horizon,
        None => reference_dt(config.single_eps()?),
    };
    let spec = DiffusionSpec::new(lc.clone(), config.x0.clone(), config.horizon)?;
    let xs = euler_maruyama_terminal(&spec, dt, seed, config.paths)?;
    let d = config.x0.len();
    let header = std::iter::once("path".to_string()).chain(indexed("x", d)).collect();
    let rows = xs
        .iter()
        .enumerate()
        .map(|(i, x)| std::iter::once(i.to_string()).chain(x.iter().map(|v| num(*v))).collect())
        .collect();
    run.csv("reference.csv", header, rows)?;
    Ok(Some(serde_json::json!({ "dt": dt, "paths": config.paths, "n_max": lc.n_max() })))
}

fn compare(run: &mut Run, config: &ExperimentConfig, seed: u64) -> Result<Option<serde_json::Value>> {
    let rows = law_comparison(config, seed)?;
    let d = config.x0.len();
    let header = ["eps", "steps", "dt"]
        .map(String::from)
        .into_iter()
        .chain(indexed("ks_x", d))
        .chain(["ks_norm".into(), "ks_exact".into(), "error".into()])
        .collect();
    let body = rows
        .iter()
        .map(|r| {
            let mut row = vec![num(r.eps), r.steps.to_string(), num(r.dt)];
            row.extend((0..d).map(|i| r.ks_per_coord.get(i).map(|v| num(*v)).unwrap_or_default()));
            row.extend([num(r.ks_norm), opt(r.ks_exact), r.error.clone().unwrap_or_default()]);
            row
        })
        .collect();
    run.csv("compare.csv", header, body)?;
    Ok(Some(serde_json::json!({ "paths": config.paths })))
}

fn value(run: &mut Run, config: &ExperimentConfig) -> Result<Option<serde_json::Value>> {
    let (noise, field) = config.build_model()?;
    let payoffs = config.payoff_pair()?;
    let eps = config.single_eps()?;
    let result = dynkin::value(&payoffs, &field, &noise, &config.x0, eps, config.horizon, &config.engine())?;
    run.json("value.json", &result)?;
    if let Some(regions) = &result.stop_regions {
        let d = config.x0.len();
        let header = std::iter::once("step".to_string()).chain(indexed("x", d)).chain(["region".into()]).collect();
        let rows = regions
            .iter()
            .map(|s| {
                std::iter::once(s.step.to_string())
                    .chain(s.state.iter().map(|v| num(*v)))
                    .chain([s.region.as_str().to_string()])
                    .collect()
            })
            .collect();
        run.csv("regions.csv", header, rows)?;
    }
    Ok(None)
}

fn converge(run: &mut Run, config: &ExperimentConfig) -> Result<Option<serde_json::Value>> {
    let study = convergence_study(config)?;
    let header = ["eps", "steps", "value", "diff_to_reference", "successive_diff", "node_count", "sandwich_violations", "error"]
        .map(String::from)
        .to_vec();
    let rows = study
        .rows
        .iter()
        .map(|r| {
            vec![
                num(r.eps),
                opt(r.steps),
                opt(r.value),
                opt(r.diff_to_reference),
                opt(r.successive_diff),
                opt(r.node_count),
                opt(r.sandwich_violations),
                r.error.clone().unwrap_or_default(),
            ]
        })
        .collect();
    run.csv("convergence.csv", header, rows)?;
    Ok(Some(serde_json::json!({
        "reference": study.reference,
        "reference_value": study.reference_value,
        "fitted_rate": study.fitted_rate,
        "exact": study.exact,
        "successive_strictly_decreasing": study.successive_strictly_decreasing(),
    })))
}

fn bounds(run: &mut Run, dims: &[usize], moment: usize) -> Result<Option<serde_json::Value>> {
    let header = ["d", "m", "delta", "log10_epsilon0"].map(String::from).to_vec();
    let rows = dims
        .iter()
        .map(|&d| {
            let b = theoretical_bounds(d, moment)?;
            Ok(vec![b.d.to_string(), b.m.to_string(), num(b.delta), num(b.log10_epsilon0)])
        })
        .collect::<Result<_>>()?;
    run.csv("bounds.csv", header, rows)?;
    Ok(None)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
