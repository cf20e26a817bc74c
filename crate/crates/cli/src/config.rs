//! Plain-text experiment configuration: one `section.key = value` per line,
//! `#` starts a comment. Unknown keys are rejected.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::CliError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    Td0Iid,
    TdDataDrop,
    StabilityProbe,
    LemmaChecks,
    BoundComparison,
}

impl ExperimentKind {
    pub const ALL: [ExperimentKind; 5] = [
        ExperimentKind::Td0Iid,
        ExperimentKind::TdDataDrop,
        ExperimentKind::StabilityProbe,
        ExperimentKind::LemmaChecks,
        ExperimentKind::BoundComparison,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ExperimentKind::Td0Iid => "td0_iid",
            ExperimentKind::TdDataDrop => "td_data_drop",
            ExperimentKind::StabilityProbe => "stability_probe",
            ExperimentKind::LemmaChecks => "lemma_checks",
            ExperimentKind::BoundComparison => "bound_comparison",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == s)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureKind {
    Random,
    OneHot,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum InstanceSpec {
    Generated { states: usize, branching: usize, gamma: f64, dim: usize, seed: u64, feature_seed: u64, features: FeatureKind },
    File(PathBuf),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum AlphaSpec {
    /// `(1−γ)/(128p)`; for probes, half of it per moment order.
    Universal,
    /// `(1−γ)/(128 ln(n/δ))` per horizon.
    Markov,
    Value(f64),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SkipSpec {
    /// `⌈t_mix ln(n/δ)/ln 4⌉` per horizon.
    Auto,
    Value(usize),
}

#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Theta0Spec {
    Zero,
    Star,
    Vector(Vec<f64>),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum StartSpec {
    Stationary,
    State(usize),
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AlgorithmConfig {
    pub alpha: AlphaSpec,
    /// `None` means `⌊n/2⌋`.
    pub n0: Option<usize>,
    pub q: SkipSpec,
    pub p: f64,
    pub delta: f64,
    pub theta0: Theta0Spec,
    pub start: StartSpec,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ExperimentConfig {
    pub kind: ExperimentKind,
    pub seed: u64,
    pub instance: InstanceSpec,
    pub algorithm: AlgorithmConfig,
    pub horizons: Vec<usize>,
    pub replications: usize,
    /// Moment orders for the probe kinds.
    pub moments: Vec<u32>,
    pub output_dir: PathBuf,
    pub plot: bool,
}

const KEYS: &[&str] = &[
    "experiment.kind",
    "experiment.seed",
    "instance.path",
    "instance.states",
    "instance.branching",
    "instance.gamma",
    "instance.dim",
    "instance.seed",
    "instance.feature_seed",
    "instance.features",
    "algorithm.alpha",
    "algorithm.n0",
    "algorithm.q",
    "algorithm.p",
    "algorithm.delta",
    "algorithm.theta0",
    "algorithm.start",
    "run.horizons",
    "run.replications",
    "probe.moments",
    "output.dir",
    "output.plot",
];

fn invalid(key: &str, msg: impl std::fmt::Display) -> CliError {
    CliError::Config(format!("{key}: {msg}"))
}

struct Entries {
    map: BTreeMap<String, (usize, String)>,
}

impl Entries {
    fn raw(&self, key: &str) -> Option<&str> {
        self.map.get(key).map(|(_, v)| v.as_str())
    }

    fn get<T: std::str::FromStr>(&self, key: &str) -> Result<Option<T>, CliError> {
        match self.map.get(key) {
            None => Ok(None),
            Some((line, v)) => v
                .parse()
                .map(Some)
                .map_err(|_| invalid(key, format!("cannot parse {v:?} (line {line})"))),
        }
    }

    fn require<T: std::str::FromStr>(&self, key: &str) -> Result<T, CliError> {
        self.get(key)?.ok_or_else(|| invalid(key, "required key is missing"))
    }

    fn list<T: std::str::FromStr>(&self, key: &str) -> Result<Option<Vec<T>>, CliError> {
        let Some((line, v)) = self.map.get(key) else { return Ok(None) };
        v.split(',')
            .map(|x| x.trim().parse().map_err(|_| invalid(key, format!("cannot parse list item {x:?} (line {line})"))))
            .collect::<Result<Vec<T>, _>>()
            .map(Some)
    }
}

fn tokenize(text: &str) -> Result<Entries, CliError> {
    let mut map = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        let lineno = i + 1;
        let body = line.split('#').next().unwrap_or("").trim();
        if body.is_empty() {
            continue;
        }
        let (k, v) = body
            .split_once('=')
            .ok_or_else(|| CliError::Config(format!("line {lineno}: expected `section.key = value`")))?;
        let (k, v) = (k.trim(), v.trim());
        if !k.contains('.') || k.split('.').any(str::is_empty) {
            return Err(CliError::Config(format!("line {lineno}: key {k:?} is not of the form section.key")));
        }
        if !KEYS.contains(&k) {
            return Err(CliError::Config(format!("line {lineno}: unknown key {k:?}")));
        }
        if map.insert(k.to_string(), (lineno, v.to_string())).is_some() {
            return Err(CliError::Config(format!("line {lineno}: duplicate key {k:?}")));
        }
    }
    Ok(Entries { map })
}

/// Reads a config file; a relative `instance.path` resolves against the
/// file's directory.
pub fn parse_config_file(path: &Path) -> Result<ExperimentConfig, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    parse_config_in(&text, path.parent())
}

/// Parses and validates inline text; a relative `instance.path` resolves
/// against the working directory.
pub fn parse_config(text: &str) -> Result<ExperimentConfig, CliError> {
    parse_config_in(text, None)
}

fn parse_config_in(text: &str, base: Option<&Path>) -> Result<ExperimentConfig, CliError> {
    let e = tokenize(text)?;
    let kind_s: String = e.require("experiment.kind")?;
    let kind = ExperimentKind::parse(&kind_s).ok_or_else(|| {
        let names: Vec<_> = ExperimentKind::ALL.iter().map(|k| k.name()).collect();
        invalid("experiment.kind", format!("{kind_s:?} is not one of {}", names.join(", ")))
    })?;
    let seed = e.get("experiment.seed")?.unwrap_or(0);

    let instance = match e.raw("instance.path") {
        Some(p) => {
            for k in ["instance.states", "instance.branching", "instance.gamma", "instance.dim", "instance.seed", "instance.features"] {
                if e.raw(k).is_some() {
                    return Err(invalid(k, "cannot be combined with instance.path"));
                }
            }
            let p = PathBuf::from(p);
            InstanceSpec::File(match base {
                Some(b) if p.is_relative() => b.join(p),
                _ => p,
            })
        }
        None => {
            let states: usize = e.require("instance.states")?;
            let branching: usize = e.get("instance.branching")?.unwrap_or(states.min(3));
            let gamma: f64 = e.require("instance.gamma")?;
            let dim: usize = e.require("instance.dim")?;
            let seed: u64 = e.get("instance.seed")?.unwrap_or(0);
            let feature_seed: u64 = e.get("instance.feature_seed")?.unwrap_or(seed.wrapping_add(1));
            let features = match e.raw("instance.features").unwrap_or("random") {
                "random" => FeatureKind::Random,
                "one_hot" => FeatureKind::OneHot,
                other => return Err(invalid("instance.features", format!("{other:?} is not random or one_hot"))),
            };
            InstanceSpec::Generated { states, branching, gamma, dim, seed, feature_seed, features }
        }
    };

    let alpha = match e.raw("algorithm.alpha") {
        None | Some("universal") => AlphaSpec::Universal,
        Some("markov") => AlphaSpec::Markov,
        Some(_) => AlphaSpec::Value(e.require("algorithm.alpha")?),
    };
    let q = match e.raw("algorithm.q") {
        None => SkipSpec::Value(1),
        Some("auto") => SkipSpec::Auto,
        Some(_) => SkipSpec::Value(e.require("algorithm.q")?),
    };
    let theta0 = match e.raw("algorithm.theta0") {
        None | Some("zero") => Theta0Spec::Zero,
        Some("star") => Theta0Spec::Star,
        Some(_) => Theta0Spec::Vector(e.list("algorithm.theta0")?.expect("present")),
    };
    let start = match e.raw("algorithm.start") {
        None | Some("stationary") => StartSpec::Stationary,
        Some(_) => StartSpec::State(e.require("algorithm.start")?),
    };
    let algorithm = AlgorithmConfig {
        alpha,
        n0: e.get("algorithm.n0")?,
        q,
        p: e.get("algorithm.p")?.unwrap_or(2.0),
        delta: e.get("algorithm.delta")?.unwrap_or(0.05),
        theta0,
        start,
    };
    let default_moments: Vec<u32> = match kind {
        ExperimentKind::LemmaChecks => vec![1, 2, 3, 4],
        _ => vec![2, 4],
    };
    let cfg = ExperimentConfig {
        kind,
        seed,
        instance,
        algorithm,
        horizons: e.list("run.horizons")?.unwrap_or_default(),
        replications: e.get("run.replications")?.unwrap_or(100),
        moments: e.list("probe.moments")?.unwrap_or(default_moments),
        output_dir: PathBuf::from(e.raw("output.dir").unwrap_or("tdlab-out")),
        plot: e.get("output.plot")?.unwrap_or(false),
    };
    cfg.validate()?;
    Ok(cfg)
}

impl ExperimentConfig {
    pub fn gamma(&self) -> Option<f64> {
        match self.instance {
            InstanceSpec::Generated { gamma, .. } => Some(gamma),
            InstanceSpec::File(_) => None,
        }
    }

    /// Checks every precondition that does not need the instance itself.
    pub fn validate(&self) -> Result<(), CliError> {
        match &self.instance {
            InstanceSpec::Generated { states, branching, gamma, dim, .. } => {
                if *states == 0 {
                    return Err(invalid("instance.states", "must be at least 1"));
                }
                if *branching == 0 || branching > states {
                    return Err(invalid("instance.branching", format!("must lie in 1..={states}")));
                }
                if !(*gamma > 0.0 && *gamma < 1.0) {
                    return Err(invalid("instance.gamma", "must lie in (0, 1)"));
                }
                if *dim == 0 || dim > states {
                    return Err(invalid("instance.dim", format!("must lie in 1..={states}")));
                }
            }
            InstanceSpec::File(p) => {
                if !p.exists() {
                    return Err(invalid("instance.path", format!("{} does not exist", p.display())));
                }
            }
        }
        if let Some(g) = self.gamma() {
            self.check_alpha(g)?;
        }
        let a = &self.algorithm;
        if !(a.p >= 1.0) {
            return Err(invalid("algorithm.p", "must be at least 1"));
        }
        if !(a.delta > 0.0 && a.delta < 1.0) {
            return Err(invalid("algorithm.delta", "must lie in (0, 1)"));
        }
        if a.q == SkipSpec::Value(0) {
            return Err(invalid("algorithm.q", "must be at least 1"));
        }
        let needs_horizons = !matches!(self.kind, ExperimentKind::LemmaChecks);
        if needs_horizons && self.horizons.is_empty() {
            return Err(invalid("run.horizons", "at least one horizon is required"));
        }
        if self.horizons.iter().any(|&n| n < 2) {
            return Err(invalid("run.horizons", "every horizon must be at least 2"));
        }
        if let Some(n0) = a.n0 {
            if self.horizons.iter().any(|&n| n0 >= n) {
                return Err(invalid("algorithm.n0", "must be below every horizon"));
            }
        }
        if needs_horizons && self.replications < 2 {
            return Err(invalid("run.replications", "must be at least 2"));
        }
        if self.moments.is_empty() || self.moments.contains(&0) {
            return Err(invalid("probe.moments", "need one or more positive integers"));
        }
        if matches!(self.kind, ExperimentKind::Td0Iid | ExperimentKind::BoundComparison | ExperimentKind::StabilityProbe) {
            if a.alpha == AlphaSpec::Markov {
                return Err(invalid("algorithm.alpha", "markov step size only applies to td_data_drop"));
            }
        }
        if self.kind != ExperimentKind::TdDataDrop && a.q == SkipSpec::Auto {
            return Err(invalid("algorithm.q", "auto only applies to td_data_drop"));
        }
        Ok(())
    }

    /// Range checks that need γ (known once the instance is loaded).
    pub fn check_alpha(&self, gamma: f64) -> Result<(), CliError> {
        if let AlphaSpec::Value(alpha) = self.algorithm.alpha {
            let cap = (1.0 - gamma) / 2.0;
            let probe = matches!(self.kind, ExperimentKind::StabilityProbe | ExperimentKind::LemmaChecks);
            let lo_ok = if probe { alpha >= 0.0 } else { alpha > 0.0 };
            if !(lo_ok && alpha <= cap) {
                return Err(invalid("algorithm.alpha", format!("{alpha} is outside (0, (1-gamma)/2 = {cap}]")));
            }
        }
        Ok(())
    }

    /// Canonical text form; parsing it gives back an equal config.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        let join = |xs: &[String]| xs.join(", ");
        kv("experiment.kind", self.kind.name().to_string());
        kv("experiment.seed", self.seed.to_string());
        match &self.instance {
            InstanceSpec::Generated { states, branching, gamma, dim, seed, feature_seed, features } => {
                kv("instance.states", states.to_string());
                kv("instance.branching", branching.to_string());
                kv("instance.gamma", format!("{gamma:?}"));
                kv("instance.dim", dim.to_string());
                kv("instance.seed", seed.to_string());
                kv("instance.feature_seed", feature_seed.to_string());
                kv(
                    "instance.features",
                    match features {
                        FeatureKind::Random => "random",
                        FeatureKind::OneHot => "one_hot",
                    }
                    .to_string(),
                );
            }
            InstanceSpec::File(p) => kv("instance.path", p.display().to_string()),
        }
        let a = &self.algorithm;
        kv(
            "algorithm.alpha",
            match a.alpha {
                AlphaSpec::Universal => "universal".into(),
                AlphaSpec::Markov => "markov".into(),
                AlphaSpec::Value(x) => format!("{x:?}"),
            },
        );
        if let Some(n0) = a.n0 {
            kv("algorithm.n0", n0.to_string());
        }
        kv(
            "algorithm.q",
            match a.q {
                SkipSpec::Auto => "auto".into(),
                SkipSpec::Value(q) => q.to_string(),
            },
        );
        kv("algorithm.p", format!("{:?}", a.p));
        kv("algorithm.delta", format!("{:?}", a.delta));
        kv(
            "algorithm.theta0",
            match &a.theta0 {
                Theta0Spec::Zero => "zero".into(),
                Theta0Spec::Star => "star".into(),
                Theta0Spec::Vector(v) => join(&v.iter().map(|x| format!("{x:?}")).collect::<Vec<_>>()),
            },
        );
        kv(
            "algorithm.start",
            match a.start {
                StartSpec::Stationary => "stationary".into(),
                StartSpec::State(i) => i.to_string(),
            },
        );
        if !self.horizons.is_empty() {
            kv("run.horizons", join(&self.horizons.iter().map(|n| n.to_string()).collect::<Vec<_>>()));
        }
        kv("run.replications", self.replications.to_string());
        kv("probe.moments", join(&self.moments.iter().map(|n| n.to_string()).collect::<Vec<_>>()));
        kv("output.dir", self.output_dir.display().to_string());
        kv("output.plot", self.plot.to_string());
        s
    }
}
