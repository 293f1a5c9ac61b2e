//! Simulation configuration: the in-memory [`SimulationConfig`] and its TOML
//! file form with `[flow]`, `[integrator]`, `[ensemble]` and `[output]`
//! sections.

use std::collections::BTreeMap;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::flows::{FlowError, FlowField};
use crate::integrators::{IntegratorError, Scheme};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{}{message}", line_prefix(*line))]
    Invalid { line: Option<usize>, message: String },
    #[error("{0}")]
    Parse(String),
    #[error("no master seed: pass --seed or set `seed` in [ensemble]")]
    MissingSeed,
    #[error(transparent)]
    Flow(#[from] FlowError),
    #[error(transparent)]
    Integrator(#[from] IntegratorError),
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

fn line_prefix(line: Option<usize>) -> String {
    line.map(|l| format!("line {l}: ")).unwrap_or_default()
}

impl ConfigError {
    fn invalid(message: impl Into<String>) -> Self {
        ConfigError::Invalid {
            line: None,
            message: message.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowSpec {
    pub name: String,
    #[serde(default)]
    pub params: BTreeMap<String, f64>,
}

impl FlowSpec {
    pub fn new(name: &str, params: &[(&str, f64)]) -> Self {
        Self {
            name: name.to_string(),
            params: params.iter().map(|&(k, v)| (k.to_string(), v)).collect(),
        }
    }

    pub fn build(&self) -> Result<FlowField, FlowError> {
        FlowField::from_catalog(&self.name, &self.params)
    }
}

/// Additive noise: scalar `σ` or a full constant matrix `Σ`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DiffusionSpec {
    Sigma(f64),
    Matrix(Vec<Vec<f64>>),
}

impl DiffusionSpec {
    pub fn from_d0(d0: f64) -> Self {
        DiffusionSpec::Sigma((2.0 * d0).sqrt())
    }

    /// `σ²/2` for scalar noise.
    pub fn d0(&self) -> Option<f64> {
        match self {
            DiffusionSpec::Sigma(s) => Some(0.5 * s * s),
            DiffusionSpec::Matrix(_) => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InitialDistribution {
    Dirac { at: Vec<f64> },
    UniformBox { lo: Vec<f64>, hi: Vec<f64> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SampleSchedule {
    /// `count` log-spaced elapsed times from `first` (default
    /// `max(Δt, T/10⁴)`) to the horizon.
    Log {
        count: usize,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        first: Option<f64>,
    },
    Explicit { times: Vec<f64> },
}

impl Default for SampleSchedule {
    fn default() -> Self {
        SampleSchedule::Log {
            count: 64,
            first: None,
        }
    }
}

/// Everything that determines the statistics of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationConfig {
    pub flow: FlowSpec,
    pub scheme: Scheme,
    pub diffusion: DiffusionSpec,
    pub dt: f64,
    pub horizon: f64,
    pub n_particles: u64,
    pub master_seed: u64,
    pub samples: SampleSchedule,
    pub initial: InitialDistribution,
    pub start_time: f64,
}

/// Snapped sampling plan.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplePlan {
    /// Step indices (1-based, strictly increasing) at which displacements
    /// are recorded.
    pub steps: Vec<u64>,
    /// Elapsed time `steps[k]·Δt`.
    pub times: Vec<f64>,
    /// `|requested − snapped|`, at most `Δt/2` for in-range requests.
    pub snap_errors: Vec<f64>,
}

impl SimulationConfig {
    pub fn total_steps(&self) -> u64 {
        (self.horizon / self.dt).round() as u64
    }

    pub fn dim(&self) -> Result<usize, ConfigError> {
        Ok(self.flow.build()?.dim)
    }

    /// First 16 hex digits of the SHA-256 of the canonical JSON form.
    pub fn fingerprint(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        let digest = Sha256::digest(json.as_bytes());
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn validate(&self) -> Result<FlowField, ConfigError> {
        let flow = self.flow.build()?;
        let d = flow.dim;
        self.scheme.supports_dim(d)?;

        if !(self.dt.is_finite() && self.dt > 0.0) {
            return Err(ConfigError::invalid(format!("dt must be positive, got {}", self.dt)));
        }
        if !(self.horizon.is_finite() && self.horizon >= self.dt) {
            return Err(ConfigError::invalid(format!(
                "horizon must be at least dt, got {}",
                self.horizon
            )));
        }
        let ratio = self.horizon / self.dt;
        if ratio > 1e15 {
            return Err(ConfigError::invalid("horizon/dt exceeds the step counter range"));
        }
        if (ratio - ratio.round()).abs() > 1e-6 * ratio.max(1.0) {
            log::warn!(
                "horizon {} is not a multiple of dt {}; running {} steps",
                self.horizon,
                self.dt,
                self.total_steps()
            );
        }
        if !self.start_time.is_finite() {
            return Err(ConfigError::invalid("start_time must be finite"));
        }
        if self.n_particles == 0 {
            return Err(ConfigError::invalid("particles must be at least 1"));
        }
        if let Some(period) = flow.time_period {
            let k = period / self.dt;
            if (k - k.round()).abs() > 1e-9 * k.max(1.0) {
                log::warn!("dt {} does not divide the flow's time period {}", self.dt, period);
            }
        }

        match &self.diffusion {
            DiffusionSpec::Sigma(s) if !(s.is_finite() && *s >= 0.0) => {
                return Err(IntegratorError::NegativeSigma(*s).into());
            }
            DiffusionSpec::Matrix(rows) => {
                if rows.len() != d || rows.iter().any(|r| r.len() != d) {
                    return Err(IntegratorError::MatrixShape { expected: d }.into());
                }
                let m = nalgebra::DMatrix::from_fn(d, d, |i, j| rows[i][j]);
                let det = m.determinant();
                let scale = rows.iter().flatten().fold(0.0f64, |a, v| a.max(v.abs()));
                if !det.is_finite() || scale == 0.0 || det.abs() <= 1e-12 * scale.powi(d as i32) {
                    return Err(IntegratorError::SingularMatrix(det.abs()).into());
                }
            }
            _ => {}
        }

        match &self.initial {
            InitialDistribution::Dirac { at } => {
                if at.len() != d || at.iter().any(|v| !v.is_finite()) {
                    return Err(ConfigError::invalid(format!(
                        "initial point must have {d} finite coordinates"
                    )));
                }
            }
            InitialDistribution::UniformBox { lo, hi } => {
                if lo.len() != d || hi.len() != d {
                    return Err(ConfigError::invalid(format!(
                        "initial box bounds must have {d} coordinates"
                    )));
                }
                if lo.iter().zip(hi).any(|(l, h)| !(l.is_finite() && h.is_finite() && l < h)) {
                    return Err(ConfigError::invalid("initial box needs finite lo < hi"));
                }
            }
        }

        self.sample_plan()?;
        Ok(flow)
    }

    pub fn sample_plan(&self) -> Result<SamplePlan, ConfigError> {
        let total = self.total_steps().max(1);
        let horizon = total as f64 * self.dt;
        let requested: Vec<f64> = match &self.samples {
            SampleSchedule::Log { count, first } => {
                if *count == 0 {
                    return Err(ConfigError::invalid("sample count must be positive"));
                }
                let first = first.unwrap_or_else(|| self.dt.max(horizon / 1e4));
                if !(first > 0.0 && first <= horizon) {
                    return Err(ConfigError::invalid("first sample time must lie in (0, horizon]"));
                }
                if *count == 1 {
                    vec![horizon]
                } else {
                    let ratio = horizon / first;
                    (0..*count)
                        .map(|j| first * ratio.powf(j as f64 / (*count - 1) as f64))
                        .collect()
                }
            }
            SampleSchedule::Explicit { times } => {
                if times.is_empty() {
                    return Err(ConfigError::invalid("explicit sample list is empty"));
                }
                if times
                    .iter()
                    .any(|&t| !(t > 0.0 && t <= horizon + 0.5 * self.dt))
                {
                    return Err(ConfigError::invalid("sample times must lie in (0, horizon]"));
                }
                times.clone()
            }
        };

        let mut plan = SamplePlan {
            steps: Vec::new(),
            times: Vec::new(),
            snap_errors: Vec::new(),
        };
        let mut snapped: Vec<(u64, f64)> = requested
            .iter()
            .map(|&t| (((t / self.dt).round() as u64).clamp(1, total), t))
            .collect();
        snapped.sort_by(|a, b| a.0.cmp(&b.0).then(a.1.total_cmp(&b.1)));
        for (step, t) in snapped {
            if plan.steps.last() == Some(&step) {
                continue;
            }
            let at = step as f64 * self.dt;
            plan.steps.push(step);
            plan.times.push(at);
            plan.snap_errors.push((at - t).abs());
        }
        Ok(plan)
    }
}

/// Where reports go.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutputSpec {
    pub dir: PathBuf,
    pub prefix: String,
}

/// A parsed configuration file. The seed stays optional until the caller
/// resolves it (command line first, then file).
#[derive(Debug, Clone)]
pub struct ConfigFile {
    pub flow: FlowSpec,
    pub scheme: Scheme,
    pub diffusion: DiffusionSpec,
    pub dt: f64,
    pub horizon: f64,
    pub n_particles: u64,
    pub seed: Option<u64>,
    pub samples: SampleSchedule,
    pub initial: Option<InitialDistribution>,
    pub start_time: f64,
    pub workers: usize,
    pub checkpoint_every: u64,
    pub output: OutputSpec,
    source: String,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawFile {
    flow: toml::Table,
    integrator: RawIntegrator,
    ensemble: RawEnsemble,
    #[serde(default)]
    output: Option<RawOutput>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawIntegrator {
    scheme: String,
    dt: f64,
    sigma: Option<f64>,
    d0: Option<f64>,
    sigma_matrix: Option<Vec<Vec<f64>>>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawEnsemble {
    horizon: f64,
    particles: u64,
    seed: Option<u64>,
    #[serde(default)]
    start_time: f64,
    #[serde(default)]
    samples: Option<SampleSchedule>,
    #[serde(default)]
    initial: Option<InitialDistribution>,
    #[serde(default)]
    workers: usize,
    #[serde(default)]
    checkpoint_every: u64,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawOutput {
    dir: Option<PathBuf>,
    prefix: Option<String>,
}

/// 1-based line of `key = ...` inside `[section]`, for error messages.
fn locate(source: &str, section: &str, key: &str) -> Option<usize> {
    let header = format!("[{section}]");
    let mut inside = false;
    for (n, line) in source.lines().enumerate() {
        let trimmed = line.trim();
        if trimmed.starts_with('[') {
            inside = trimmed == header;
            continue;
        }
        if inside {
            if let Some((k, _)) = trimmed.split_once('=') {
                if k.trim() == key {
                    return Some(n + 1);
                }
            }
        }
    }
    source
        .lines()
        .position(|l| l.trim() == header)
        .map(|n| n + 1)
}

fn offset_to_line(source: &str, offset: usize) -> usize {
    source[..offset.min(source.len())].matches('\n').count() + 1
}

impl ConfigFile {
    pub fn load(path: &std::path::Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let raw: RawFile = toml::from_str(text).map_err(|e| match e.span() {
            Some(span) => ConfigError::Invalid {
                line: Some(offset_to_line(text, span.start)),
                message: e.message().to_string(),
            },
            None => ConfigError::Parse(e.to_string()),
        })?;
        let at = |section: &str, key: &str, message: String| ConfigError::Invalid {
            line: locate(text, section, key),
            message,
        };

        let mut flow_name = None;
        let mut params = BTreeMap::new();
        for (k, v) in &raw.flow {
            match (k.as_str(), v) {
                ("name", toml::Value::String(s)) => flow_name = Some(s.clone()),
                (_, toml::Value::Float(f)) => {
                    params.insert(k.clone(), *f);
                }
                (_, toml::Value::Integer(i)) => {
                    params.insert(k.clone(), *i as f64);
                }
                _ => {
                    return Err(at("flow", k, format!("`{k}` must be a number")));
                }
            }
        }
        let flow = FlowSpec {
            name: flow_name.ok_or_else(|| at("flow", "name", "[flow] needs `name`".into()))?,
            params,
        };
        let built = flow.build().map_err(|e| {
            let key = match &e {
                FlowError::UnknownParam { param, .. }
                | FlowError::MissingParam { param, .. }
                | FlowError::InvalidParam { param, .. } => param.clone(),
                _ => "name".into(),
            };
            at("flow", &key, e.to_string())
        })?;

        let ri = &raw.integrator;
        let scheme: Scheme = ri
            .scheme
            .parse()
            .map_err(|e: IntegratorError| at("integrator", "scheme", e.to_string()))?;
        scheme
            .supports_dim(built.dim)
            .map_err(|e| at("integrator", "scheme", e.to_string()))?;
        let diffusion = match (ri.sigma, ri.d0, &ri.sigma_matrix) {
            (Some(s), None, None) => DiffusionSpec::Sigma(s),
            (None, Some(d0), None) => {
                if !(d0 >= 0.0) {
                    return Err(at("integrator", "d0", format!("d0 must be non-negative, got {d0}")));
                }
                DiffusionSpec::from_d0(d0)
            }
            (None, None, Some(m)) => DiffusionSpec::Matrix(m.clone()),
            _ => {
                return Err(at(
                    "integrator",
                    "scheme",
                    "[integrator] needs exactly one of `sigma`, `d0`, `sigma_matrix`".into(),
                ))
            }
        };

        let re = raw.ensemble;
        let output = raw.output.unwrap_or(RawOutput {
            dir: None,
            prefix: None,
        });
        let file = ConfigFile {
            flow,
            scheme,
            diffusion,
            dt: ri.dt,
            horizon: re.horizon,
            n_particles: re.particles,
            seed: re.seed,
            samples: re.samples.unwrap_or_default(),
            initial: re.initial,
            start_time: re.start_time,
            workers: re.workers,
            checkpoint_every: re.checkpoint_every,
            output: OutputSpec {
                dir: output.dir.unwrap_or_else(|| PathBuf::from(".")),
                prefix: output.prefix.unwrap_or_else(|| built.name.clone()),
            },
            source: text.to_string(),
        };
        // Validate with a placeholder seed so semantic errors surface at load
        // time with a line number.
        file.with_seed(0).validate().map_err(|e| file.anchor(e))?;
        Ok(file)
    }

    fn anchor(&self, e: ConfigError) -> ConfigError {
        let text = &self.source;
        match e {
            ConfigError::Invalid { line: None, message } => {
                let (section, key) = if message.starts_with("dt") {
                    ("integrator", "dt")
                } else if message.starts_with("horizon") {
                    ("ensemble", "horizon")
                } else if message.starts_with("particles") {
                    ("ensemble", "particles")
                } else if message.starts_with("initial") {
                    ("ensemble", "initial")
                } else if message.starts_with("start_time") {
                    ("ensemble", "start_time")
                } else {
                    ("ensemble", "samples")
                };
                ConfigError::Invalid {
                    line: locate(text, section, key),
                    message,
                }
            }
            ConfigError::Integrator(err) => {
                let key = match err {
                    IntegratorError::NegativeSigma(_) => "sigma",
                    IntegratorError::MatrixShape { .. } | IntegratorError::SingularMatrix(_) => {
                        "sigma_matrix"
                    }
                    _ => "scheme",
                };
                ConfigError::Invalid {
                    line: locate(text, "integrator", key),
                    message: err.to_string(),
                }
            }
            other => other,
        }
    }

    /// Resolves the seed (command line wins over the file) into a runnable
    /// configuration.
    pub fn resolve(&self, cli_seed: Option<u64>) -> Result<SimulationConfig, ConfigError> {
        let seed = cli_seed.or(self.seed).ok_or(ConfigError::MissingSeed)?;
        let cfg = self.with_seed(seed);
        cfg.validate().map_err(|e| self.anchor(e))?;
        Ok(cfg)
    }

    fn with_seed(&self, seed: u64) -> SimulationConfig {
        let dim = self.flow.build().map(|f| f.dim).unwrap_or(2);
        SimulationConfig {
            flow: self.flow.clone(),
            scheme: self.scheme,
            diffusion: self.diffusion.clone(),
            dt: self.dt,
            horizon: self.horizon,
            n_particles: self.n_particles,
            master_seed: seed,
            samples: self.samples.clone(),
            initial: self.initial.clone().unwrap_or(InitialDistribution::Dirac {
                at: vec![0.0; dim],
            }),
            start_time: self.start_time,
        }
    }
}
