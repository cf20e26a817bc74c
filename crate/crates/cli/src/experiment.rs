//! Dispatch from a validated config to the core modules, and persistence of
//! `instance.json`, `results.csv` and `manifest.json`.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use serde::Serialize;
use serde_json::json;
use tdlab_core::bound_lab::{self, mc_errors, summarize_errors, BoundInputs, ErrorReport, HorizonRow, ReportOptions, Runner};
use tdlab_core::mrp_model::{make_random_features, make_random_mrp, one_hot_features};
use tdlab_core::stability_probe::{self, ProbeSettings, StabilityReport};
use tdlab_core::td_algorithms::{self, TdContext};
use tdlab_core::{fmt_f64, DVector, InitialState, InstanceSnapshot, SeedSpec, TdRunConfig};

use crate::config::{AlphaSpec, ExperimentConfig, ExperimentKind, FeatureKind, InstanceSpec, SkipSpec, StartSpec, Theta0Spec};
use crate::{plot, CliError};

/// Slack below which an exact inequality counts as violated.
pub const SLACK_TOLERANCE: f64 = 1e-10;

#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    /// Overrides `output.dir`.
    pub out: Option<PathBuf>,
    /// Worker threads; `None` uses rayon's default.
    pub threads: Option<usize>,
    /// Forces plot emission on.
    pub plot: bool,
}

#[derive(Clone, Debug)]
pub struct RunSummary {
    pub out_dir: PathBuf,
    pub results: PathBuf,
    pub images: Vec<PathBuf>,
    /// Failed built-in checks (stability violations, negative slacks).
    pub failures: Vec<String>,
    pub wall_clock_seconds: f64,
}

impl RunSummary {
    pub fn exit_code(&self) -> i32 {
        if self.failures.is_empty() {
            0
        } else {
            4
        }
    }
}

/// Resolved per-horizon parameters, echoed into the manifest.
#[derive(Clone, Debug, Serialize)]
struct Resolved {
    n: usize,
    alpha: f64,
    q: usize,
}

struct Outcome {
    csv: String,
    resolved: Vec<Resolved>,
    seeds: serde_json::Value,
    failures: Vec<String>,
    extra: serde_json::Value,
}

pub fn build_instance(spec: &InstanceSpec) -> Result<InstanceSnapshot, CliError> {
    match spec {
        InstanceSpec::Generated { states, branching, gamma, dim, seed, feature_seed, features } => {
            let mrp = make_random_mrp(*states, *branching, *gamma, *seed)?;
            let f = match features {
                FeatureKind::Random => make_random_features(&mrp, *dim, *feature_seed)?,
                FeatureKind::OneHot => {
                    if dim != states {
                        return Err(CliError::Config(format!(
                            "instance.dim: one_hot features need dim = states = {states}"
                        )));
                    }
                    one_hot_features(*states)?
                }
            };
            Ok(InstanceSnapshot::derive(mrp, f)?)
        }
        InstanceSpec::File(path) => {
            let snap = InstanceSnapshot::load(path)
                .map_err(|e| CliError::Config(format!("instance.path: cannot load {}: {e}", path.display())))?;
            let problems = snap.verify()?;
            if !problems.is_empty() {
                return Err(CliError::Config(format!("instance.path: {}", problems.join("; "))));
            }
            Ok(snap)
        }
    }
}

fn theta0(cfg: &ExperimentConfig, snap: &InstanceSnapshot) -> Result<DVector<f64>, CliError> {
    let d = snap.features.dim();
    Ok(match &cfg.algorithm.theta0 {
        Theta0Spec::Zero => DVector::zeros(d),
        Theta0Spec::Star => snap.instance.theta_star.clone(),
        Theta0Spec::Vector(v) => {
            if v.len() != d {
                return Err(CliError::Config(format!("algorithm.theta0: has {} entries, feature dimension is {d}", v.len())));
            }
            DVector::from_column_slice(v)
        }
    })
}

fn start_state(cfg: &ExperimentConfig, snap: &InstanceSnapshot) -> Result<InitialState, CliError> {
    Ok(match cfg.algorithm.start {
        StartSpec::Stationary => InitialState::Stationary,
        StartSpec::State(s) => {
            if s >= snap.mrp.num_states() {
                return Err(CliError::Config(format!("algorithm.start: state {s} out of range")));
            }
            InitialState::State(s)
        }
    })
}

/// Step size and skip period used at horizon `n`.
fn td_parameters(cfg: &ExperimentConfig, snap: &InstanceSnapshot, n: usize) -> Result<(f64, usize), CliError> {
    let gamma = snap.mrp.gamma();
    let a = &cfg.algorithm;
    let alpha = match a.alpha {
        AlphaSpec::Universal => td_algorithms::step_size_universal(gamma, a.p)?,
        AlphaSpec::Markov => td_algorithms::step_size_markov(gamma, n, a.delta)?,
        AlphaSpec::Value(x) => x,
    };
    let q = match a.q {
        SkipSpec::Value(q) => q,
        SkipSpec::Auto => {
            let t_mix = snap.instance.t_mix.ok_or_else(|| {
                CliError::Config("algorithm.q: auto needs a finite mixing time, this chain has none".into())
            })?;
            td_algorithms::skip_period(t_mix, n, a.delta)?
        }
    };
    if cfg.kind == ExperimentKind::TdDataDrop && n / q < 2 {
        return Err(CliError::Config(format!("run.horizons: n = {n} with q = {q} leaves fewer than 2 updates")));
    }
    let cap = (1.0 - gamma) / 2.0;
    if !(alpha > 0.0 && alpha <= cap) {
        return Err(CliError::Config(format!("algorithm.alpha: {alpha} is outside (0, (1-gamma)/2 = {cap}]")));
    }
    Ok((alpha, q))
}

fn append_column(csv: &str, name: &str, values: &[Option<f64>]) -> String {
    let mut out = String::with_capacity(csv.len() + 32 * values.len());
    let mut lines = csv.lines();
    if let Some(h) = lines.next() {
        let _ = writeln!(out, "{h},{name}");
    }
    for (line, v) in lines.zip(values.iter().chain(std::iter::repeat(&None))) {
        let _ = writeln!(out, "{line},{}", v.map(fmt_f64).unwrap_or_default());
    }
    out
}

fn bound_or_none(label: &str, r: tdlab_core::Result<f64>) -> Option<f64> {
    match r {
        Ok(x) => Some(x),
        Err(e) => {
            log::warn!("{label} not evaluated: {e}");
            None
        }
    }
}

fn run_td(cfg: &ExperimentConfig, snap: &InstanceSnapshot) -> Result<Outcome, CliError> {
    let runner = if cfg.kind == ExperimentKind::TdDataDrop { Runner::DataDrop } else { Runner::Td0 };
    let theta0 = theta0(cfg, snap)?;
    let start = start_state(cfg, snap)?;
    let resolved: Vec<Resolved> = cfg
        .horizons
        .iter()
        .map(|&n| td_parameters(cfg, snap, n).map(|(alpha, q)| Resolved { n, alpha, q }))
        .collect::<Result<_, _>>()?;
    if cfg.replications < 30 {
        log::warn!("run.replications = {} is below 30; confidence intervals are rough", cfg.replications);
    }
    let ctx = TdContext::new(&snap.mrp, &snap.features, &snap.instance)?;
    let make = |n: usize| {
        let r = resolved.iter().find(|r| r.n == n).expect("resolved horizon");
        let mut c = TdRunConfig::new(r.alpha, n, SeedSpec::new(cfg.seed, 0));
        c.n0 = cfg.algorithm.n0;
        c.q = r.q;
        c.p = cfg.algorithm.p;
        c.delta = cfg.algorithm.delta;
        c.theta0 = Some(theta0.clone());
        c.start = start;
        c
    };
    // validate once per horizon before spending compute
    for r in &resolved {
        make(r.n).validate(snap.mrp.gamma(), snap.features.dim())?;
    }
    let errs = mc_errors(&ctx, runner, make, &cfg.horizons, cfg.replications, cfg.seed)?;
    let options = ReportOptions { p: Some(cfg.algorithm.p), quantile_delta: Some(cfg.algorithm.delta) };
    let mut diverged_count = 0;
    let rows: Vec<HorizonRow> = cfg
        .horizons
        .iter()
        .zip(&errs)
        .map(|(&n, es)| {
            let ok: Vec<f64> = es.iter().flatten().copied().collect();
            let diverged = cfg.replications - ok.len();
            diverged_count += diverged;
            HorizonRow { n, diverged, stats: summarize_errors(&ok, &options) }
        })
        .collect();
    let report = ErrorReport { runner, replications: cfg.replications, diverged_count, options, rows };
    let mut buf = Vec::new();
    report.write_csv(&mut buf)?;
    let mut csv = String::from_utf8(buf).expect("ascii csv");

    let inputs = BoundInputs::from_instance(&snap.instance, &snap.mrp, &snap.features);
    let e0 = bound_lab::initial_error(&snap.instance, &theta0);
    match cfg.kind {
        ExperimentKind::TdDataDrop => {
            let b: Vec<_> = resolved
                .iter()
                .map(|r| {
                    bound_or_none(
                        "trajectory bound",
                        bound_lab::bound_theorem12_markov(&inputs, r.n, cfg.algorithm.delta, e0).map(|m| m.shape.total.powi(2)),
                    )
                })
                .collect();
            csv = append_column(&csv, "bound_sq", &b);
        }
        ExperimentKind::BoundComparison => {
            let t4: Vec<_> = resolved
                .iter()
                .map(|r| bound_or_none("mse bound", bound_lab::bound_theorem4(&inputs, r.alpha, r.n, e0).map(|s| s.total.powi(2))))
                .collect();
            let t9: Vec<_> = resolved
                .iter()
                .map(|r| {
                    bound_or_none(
                        "optimal-variance bound",
                        bound_lab::bound_theorem9_optimal(&inputs, r.alpha, r.n, e0).map(|s| s.total.powi(2)),
                    )
                })
                .collect();
            csv = append_column(&csv, "mse_bound_sq", &t4);
            csv = append_column(&csv, "optimal_bound_sq", &t9);
        }
        _ => {
            let b: Vec<_> = resolved
                .iter()
                .map(|r| bound_or_none("mse bound", bound_lab::bound_theorem4(&inputs, r.alpha, r.n, e0).map(|s| s.total.powi(2))))
                .collect();
            csv = append_column(&csv, "bound_sq", &b);
        }
    }
    let extra = match bound_lab::fit_loglog_slope(&report) {
        Ok((slope, intercept, r2)) => json!({ "loglog_fit": { "slope": slope, "intercept": intercept, "r2": r2 } }),
        Err(_) => json!({}),
    };
    Ok(Outcome {
        csv,
        resolved,
        seeds: json!({
            "master_seed": cfg.seed,
            "scheme": "replication r at horizon index h draws from ChaCha8 stream SeedSpec(master_seed, h*replications + r)",
        }),
        failures: Vec::new(),
        extra,
    })
}

fn probe_alpha(cfg: &ExperimentConfig, gamma: f64, p: u32) -> Result<f64, CliError> {
    let cap = (1.0 - gamma) / (128.0 * f64::from(p));
    match cfg.algorithm.alpha {
        AlphaSpec::Universal => Ok(cap / 2.0),
        AlphaSpec::Value(a) if a <= cap => Ok(a),
        AlphaSpec::Value(a) => Err(CliError::Config(format!(
            "algorithm.alpha: {a} exceeds (1-gamma)/(128p) = {cap} for probe.moments entry {p}"
        ))),
        AlphaSpec::Markov => Err(CliError::Config("algorithm.alpha: markov does not apply to stability probes".into())),
    }
}

/// Unit probe direction: `θ0 − θ*` normalized when θ0 is an explicit vector,
/// otherwise the normalized all-ones vector.
fn probe_direction(cfg: &ExperimentConfig, snap: &InstanceSnapshot) -> Result<DVector<f64>, CliError> {
    let d = snap.features.dim();
    let u = match &cfg.algorithm.theta0 {
        Theta0Spec::Vector(_) => theta0(cfg, snap)? - &snap.instance.theta_star,
        _ => DVector::from_element(d, 1.0),
    };
    let norm = u.norm();
    if !(norm > 0.0) {
        return Err(CliError::Config("algorithm.theta0: probe direction theta0 - theta* is zero".into()));
    }
    Ok(u / norm)
}

fn run_stability(cfg: &ExperimentConfig, snap: &InstanceSnapshot) -> Result<Outcome, CliError> {
    let gamma = snap.mrp.gamma();
    let u = probe_direction(cfg, snap)?;
    let alphas: Vec<f64> = cfg.moments.iter().map(|&p| probe_alpha(cfg, gamma, p)).collect::<Result<_, _>>()?;
    let mut csv = format!("{}\n", StabilityReport::CSV_HEADER);
    let mut failures = Vec::new();
    let mut seeds = Vec::new();
    let mut reports = Vec::new();
    for (i, (&p, &alpha)) in cfg.moments.iter().zip(&alphas).enumerate() {
        let master = SeedSpec::new(cfg.seed, i as u64).child(0).master_seed;
        seeds.push(json!({ "p": p, "master_seed": master }));
        let rep = stability_probe::estimate_product_moment(
            &snap.instance,
            &snap.mrp,
            &snap.features,
            alpha,
            p,
            &cfg.horizons,
            &u,
            ProbeSettings::new(cfg.replications, master),
        )?;
        let mut buf = Vec::new();
        rep.write_csv(&mut buf, false)?;
        csv.push_str(std::str::from_utf8(&buf).expect("ascii csv"));
        for r in rep.rows.iter().filter(|r| r.violation) {
            failures.push(format!("p = {p}, n = {}: estimate {} exceeds envelope {}", r.n, r.estimate, r.envelope));
        }
        reports.push(rep);
    }
    let resolved = cfg
        .moments
        .iter()
        .zip(&alphas)
        .flat_map(|(_, &alpha)| cfg.horizons.iter().map(move |&n| Resolved { n, alpha, q: 1 }))
        .collect();
    Ok(Outcome {
        csv,
        resolved,
        seeds: json!({
            "master_seed": cfg.seed,
            "per_moment": seeds,
            "scheme": "moment index i uses master SeedSpec(master_seed, i).child(0); replication r draws from SeedSpec(that master, r)",
        }),
        failures,
        extra: json!({ "direction": u.as_slice() }),
    })
}

fn run_lemmas(cfg: &ExperimentConfig, snap: &InstanceSnapshot) -> Result<Outcome, CliError> {
    let mut csv = String::from("p,alpha,check,slack\n");
    let mut failures = Vec::new();
    for &p in &cfg.moments {
        let s = stability_probe::lemma_slacks(&snap.instance, &snap.mrp, &snap.features, p)?;
        for (name, v) in
            [("symmetrized_power", s.symmetrized_power), ("b_mean_lower", s.b_mean_lower), ("b_power_upper", s.b_power_upper)]
        {
            let _ = writeln!(csv, "{p},{},{name},{}", fmt_f64(s.alpha), fmt_f64(v));
            if v < -SLACK_TOLERANCE {
                failures.push(format!("p = {p}: {name} slack {v} is below -{SLACK_TOLERANCE}"));
            }
        }
    }
    Ok(Outcome {
        csv,
        resolved: Vec::new(),
        seeds: json!({ "master_seed": cfg.seed, "scheme": "exact enumeration, no random draws" }),
        failures,
        extra: json!({}),
    })
}

fn write_manifest(
    path: &Path,
    cfg: &ExperimentConfig,
    snap: &InstanceSnapshot,
    outcome: &Outcome,
    threads: usize,
    wall: f64,
    started: u64,
) -> Result<(), CliError> {
    let (instance_seed, feature_seed) = match &cfg.instance {
        InstanceSpec::Generated { seed, feature_seed, .. } => (json!(seed), json!(feature_seed)),
        InstanceSpec::File(_) => (serde_json::Value::Null, serde_json::Value::Null),
    };
    let m = json!({
        "config_text": cfg.to_text(),
        "config": cfg,
        "seeds": {
            "experiment": outcome.seeds,
            "instance_seed": instance_seed,
            "feature_seed": feature_seed,
        },
        "rng": "ChaCha8 keyed by a bijective mix of (master_seed, stream index)",
        "resolved": outcome.resolved,
        "instance_summary": {
            "states": snap.mrp.num_states(),
            "dim": snap.features.dim(),
            "gamma": snap.mrp.gamma(),
            "lambda_min": snap.instance.lambda_min,
            "t_mix": snap.instance.t_mix,
        },
        "details": outcome.extra,
        "failures": outcome.failures,
        "versions": {
            "tdlab_cli": env!("CARGO_PKG_VERSION"),
            "tdlab_core": tdlab_core::VERSION,
        },
        "threads": threads,
        "started_unix_seconds": started,
        "wall_clock_seconds": wall,
    });
    std::fs::write(path, serde_json::to_string_pretty(&m)? + "\n")?;
    Ok(())
}

/// Runs one experiment and writes its artifacts.
pub fn run_experiment(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<RunSummary, CliError> {
    let pool = {
        let mut b = rayon::ThreadPoolBuilder::new();
        if let Some(t) = opts.threads {
            if t == 0 {
                return Err(CliError::Config("--threads must be at least 1".into()));
            }
            b = b.num_threads(t);
        }
        b.build().map_err(|e| CliError::Runtime(format!("thread pool: {e}")))?
    };
    pool.install(|| run_in_pool(cfg, opts))
}

fn run_in_pool(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<RunSummary, CliError> {
    let clock = Instant::now();
    let started = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
    let snap = build_instance(&cfg.instance)?;
    cfg.check_alpha(snap.mrp.gamma())?;
    let out_dir = opts.out.clone().unwrap_or_else(|| cfg.output_dir.clone());
    std::fs::create_dir_all(&out_dir)?;

    let outcome = match cfg.kind {
        ExperimentKind::Td0Iid | ExperimentKind::TdDataDrop | ExperimentKind::BoundComparison => run_td(cfg, &snap)?,
        ExperimentKind::StabilityProbe => run_stability(cfg, &snap)?,
        ExperimentKind::LemmaChecks => run_lemmas(cfg, &snap)?,
    };

    snap.save(&out_dir.join("instance.json"))?;
    let results = out_dir.join("results.csv");
    std::fs::write(&results, &outcome.csv)?;
    let images = if cfg.plot || opts.plot {
        match cfg.kind {
            ExperimentKind::StabilityProbe => plot::emit_plots(&results, plot::PlotKind::Stability, &out_dir)?,
            ExperimentKind::LemmaChecks => {
                log::warn!("lemma_checks produces no plot");
                Vec::new()
            }
            _ => plot::emit_plots(&results, plot::PlotKind::Mse, &out_dir)?,
        }
    } else {
        Vec::new()
    };
    let wall = clock.elapsed().as_secs_f64();
    write_manifest(&out_dir.join("manifest.json"), cfg, &snap, &outcome, rayon::current_num_threads(), wall, started)?;
    for f in &outcome.failures {
        log::error!("check failed: {f}");
    }
    Ok(RunSummary { out_dir, results, images, failures: outcome.failures, wall_clock_seconds: wall })
}

/// Loads an `instance.json` and lists every disagreement with a fresh
/// derivation.
pub fn check_instance(path: &Path) -> Result<Vec<String>, CliError> {
    let snap = InstanceSnapshot::load(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    Ok(snap.verify()?)
}
