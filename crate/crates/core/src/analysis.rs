//! Effective diffusivity estimates, log-log fits, convergence studies and
//! parameter sweeps.

use serde::Serialize;
use thiserror::Error;

use crate::config::{DiffusionSpec, SimulationConfig};
use crate::ensemble::{run_ensemble, EnsembleStatistics, ExecOptions, RunError};
use crate::rng::mix_seed;

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error("log-log fit needs strictly positive points, got ({0}, {1})")]
    NonPositive(f64, f64),
    #[error("log-log fit needs at least two distinct abscissae")]
    Degenerate,
    #[error("statistics contain no particles")]
    Empty,
    #[error("{0}")]
    Invalid(String),
    #[error(transparent)]
    Run(#[from] RunError),
}

/// `D_ij(t_k) = E[Δ_i Δ_j] / (2 t_k)` with batch-means standard errors.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DiffusivityReport {
    pub dim: usize,
    pub times: Vec<f64>,
    /// Row-major `dim × dim` matrix per sampling time.
    pub d: Vec<Vec<f64>>,
    pub se: Vec<Vec<f64>>,
    pub n_particles: u64,
    pub config_fingerprint: String,
    /// Set for fine-step reference runs.
    pub reference: bool,
}

impl DiffusivityReport {
    pub fn entry(&self, k: usize, i: usize, j: usize) -> f64 {
        self.d[k][i * self.dim + j]
    }

    pub fn se_entry(&self, k: usize, i: usize, j: usize) -> f64 {
        self.se[k][i * self.dim + j]
    }

    pub fn d11(&self) -> Vec<f64> {
        self.d.iter().map(|m| m[0]).collect()
    }

    /// `(D11, SE11)` at the last sampling time.
    pub fn final_d11(&self) -> (f64, f64) {
        let k = self.times.len() - 1;
        (self.entry(k, 0, 0), self.se_entry(k, 0, 0))
    }
}

pub fn effective_diffusivity(stats: &EnsembleStatistics) -> Result<DiffusivityReport, AnalysisError> {
    if stats.n_particles == 0 {
        return Err(AnalysisError::Empty);
    }
    let d = stats.dim;
    let mut report = DiffusivityReport {
        dim: d,
        times: Vec::new(),
        d: Vec::new(),
        se: Vec::new(),
        n_particles: stats.n_particles,
        config_fingerprint: stats.config_fingerprint.clone(),
        reference: false,
    };
    for (k, &t) in stats.sample_times.iter().enumerate() {
        if t <= 0.0 {
            continue;
        }
        let scale = 1.0 / (2.0 * t);
        let mut dm = vec![0.0; d * d];
        let mut se = vec![0.0; d * d];
        for i in 0..d {
            for j in i..d {
                let value = stats.total[k].second_moment(i, j) * scale;
                let batch_values: Vec<f64> = stats
                    .batches
                    .iter()
                    .filter(|b| b[k].count() > 0)
                    .map(|b| b[k].second_moment(i, j) * scale)
                    .collect();
                let err = batch_standard_error(&batch_values);
                dm[i * d + j] = value;
                dm[j * d + i] = value;
                se[i * d + j] = err;
                se[j * d + i] = err;
            }
        }
        report.times.push(t);
        report.d.push(dm);
        report.se.push(se);
    }
    Ok(report)
}

/// Standard error of the mean of batch means; NaN with fewer than two batches.
fn batch_standard_error(values: &[f64]) -> f64 {
    let b = values.len();
    if b < 2 {
        return f64::NAN;
    }
    let mean = values.iter().sum::<f64>() / b as f64;
    let ss: f64 = values.iter().map(|v| (v - mean).powi(2)).sum();
    (ss / (b as f64 * (b as f64 - 1.0))).sqrt()
}

/// Least-squares line through `(log u, log w)`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SlopeFit {
    pub points: Vec<(f64, f64)>,
    pub slope: f64,
    pub intercept: f64,
    pub residual_norm: f64,
    pub r_squared: f64,
}

impl SlopeFit {
    pub fn predict(&self, u: f64) -> f64 {
        (self.intercept + self.slope * u.ln()).exp()
    }
}

pub fn fit_loglog(points: &[(f64, f64)]) -> Result<SlopeFit, AnalysisError> {
    if let Some(&(u, w)) = points.iter().find(|(u, w)| !(*u > 0.0 && *w > 0.0)) {
        return Err(AnalysisError::NonPositive(u, w));
    }
    let logs: Vec<(f64, f64)> = points.iter().map(|(u, w)| (u.ln(), w.ln())).collect();
    let n = logs.len() as f64;
    let mx = logs.iter().map(|p| p.0).sum::<f64>() / n;
    let my = logs.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = logs.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = logs.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let syy: f64 = logs.iter().map(|p| (p.1 - my).powi(2)).sum();
    if logs.len() < 2 || sxx <= f64::EPSILON * n * (1.0 + mx * mx) {
        return Err(AnalysisError::Degenerate);
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let rss: f64 = logs
        .iter()
        .map(|p| (p.1 - intercept - slope * p.0).powi(2))
        .sum();
    let r_squared = if syy > 0.0 { 1.0 - rss / syy } else { 1.0 };
    Ok(SlopeFit {
        points: points.to_vec(),
        slope,
        intercept,
        residual_norm: rss.sqrt(),
        r_squared,
    })
}

/// Mixing-time detection on the `D11` time series.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PlateauDetection {
    pub window: usize,
    pub tolerance: f64,
    /// `None` means not mixed.
    pub t_mix: Option<f64>,
}

impl PlateauDetection {
    pub fn mixed(&self) -> bool {
        self.t_mix.is_some()
    }
}

pub const DEFAULT_PLATEAU_WINDOW: usize = 8;
pub const DEFAULT_PLATEAU_TOLERANCE: f64 = 0.05;

/// Earliest sampling time from which every window of `window` consecutive
/// `D11` values has relative spread `(max − min)/|mean|` below `tolerance`.
pub fn detect_plateau(report: &DiffusivityReport, window: usize, tolerance: f64) -> PlateauDetection {
    let series = report.d11();
    let mut result = PlateauDetection {
        window,
        tolerance,
        t_mix: None,
    };
    if window == 0 || series.len() < window {
        return result;
    }
    let spread = |w: &[f64]| {
        let max = w.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let min = w.iter().copied().fold(f64::INFINITY, f64::min);
        let mean = w.iter().sum::<f64>() / w.len() as f64;
        if max == min {
            0.0
        } else {
            (max - min) / mean.abs()
        }
    };
    let ok: Vec<bool> = series.windows(window).map(|w| spread(w) < tolerance).collect();
    // the last failing window decides where the plateau can start
    let start = match ok.iter().rposition(|&good| !good) {
        None => 0,
        Some(last_bad) if last_bad + 1 < ok.len() => last_bad + 1,
        Some(_) => return result,
    };
    result.t_mix = Some(report.times[start]);
    result
}

/// Where the reference value of a convergence study comes from.
#[derive(Debug, Clone, PartialEq)]
pub enum Reference {
    /// Run the same configuration at this (much smaller) step.
    SelfRun { dt: f64 },
    /// A stored value with its standard error.
    Stored { d11: f64, se: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConvergenceRow {
    pub dt: f64,
    pub seed: u64,
    pub d11: f64,
    pub se: f64,
    pub abs_error: f64,
    /// `|D(Δt) − D(ref)| < 2 (SE(Δt) + SE(ref))`; excluded from the fit.
    pub noise_dominated: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConvergenceStudy {
    pub rows: Vec<ConvergenceRow>,
    pub reference_dt: Option<f64>,
    pub reference_d11: f64,
    pub reference_se: f64,
    /// `None` when fewer than two points are discretization-dominated.
    pub fit: Option<SlopeFit>,
}

/// Seed of the run at position `index` of a study. The reference run uses
/// `u64::MAX`. Each run gets an independent stream family.
pub fn study_seed(master: u64, index: u64) -> u64 {
    mix_seed(master, index)
}

/// Runs `base` at each `Δt` and measures `|D11(Δt) − D11(ref)|` at the
/// horizon; the order is the slope of the error against `Δt` on log-log
/// axes, fitted over the points where discretization error dominates.
pub fn convergence_study(
    base: &SimulationConfig,
    dt_list: &[f64],
    reference: &Reference,
    exec: &ExecOptions,
) -> Result<ConvergenceStudy, AnalysisError> {
    if dt_list.is_empty() {
        return Err(AnalysisError::Invalid("empty time-step list".into()));
    }
    if dt_list.windows(2).any(|w| w[0] <= w[1]) {
        return Err(AnalysisError::Invalid(
            "time steps must be strictly decreasing".into(),
        ));
    }
    let min_dt = *dt_list.last().unwrap();
    let run_at = |dt: f64, seed: u64| -> Result<DiffusivityReport, AnalysisError> {
        let mut cfg = base.clone();
        cfg.dt = dt;
        cfg.master_seed = seed;
        let stats = run_ensemble(&cfg, exec)?;
        effective_diffusivity(&stats)
    };

    let (reference_dt, reference_d11, reference_se) = match *reference {
        Reference::SelfRun { dt } => {
            if dt * 8.0 > min_dt * (1.0 + 1e-12) {
                return Err(AnalysisError::Invalid(format!(
                    "reference step {dt} must be at least 8x smaller than {min_dt}"
                )));
            }
            let report = run_at(dt, study_seed(base.master_seed, u64::MAX))?;
            let (d, se) = report.final_d11();
            (Some(dt), d, se)
        }
        Reference::Stored { d11, se } => (None, d11, se),
    };

    let mut rows = Vec::with_capacity(dt_list.len());
    for (i, &dt) in dt_list.iter().enumerate() {
        let seed = study_seed(base.master_seed, i as u64);
        let (d11, se) = run_at(dt, seed)?.final_d11();
        let abs_error = (d11 - reference_d11).abs();
        let noise = 2.0 * (se + reference_se);
        rows.push(ConvergenceRow {
            dt,
            seed,
            d11,
            se,
            abs_error,
            noise_dominated: !(abs_error >= noise),
        });
        log::info!("dt = {dt}: D11 = {d11} ± {se}, error {abs_error:.3e}");
    }

    let points: Vec<(f64, f64)> = rows
        .iter()
        .filter(|r| !r.noise_dominated)
        .map(|r| (r.dt, r.abs_error))
        .collect();
    let fit = if points.len() >= 2 {
        Some(fit_loglog(&points)?)
    } else {
        None
    };
    Ok(ConvergenceStudy {
        rows,
        reference_dt,
        reference_d11,
        reference_se,
        fit,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum SweepParam {
    D0,
    Eps,
    Omega,
}

impl SweepParam {
    pub fn name(self) -> &'static str {
        match self {
            SweepParam::D0 => "d0",
            SweepParam::Eps => "eps",
            SweepParam::Omega => "omega",
        }
    }

    /// Copy of `base` with the parameter set to `value`.
    pub fn apply(self, base: &SimulationConfig, value: f64) -> Result<SimulationConfig, AnalysisError> {
        let mut cfg = base.clone();
        match self {
            SweepParam::D0 => {
                if !(value > 0.0) {
                    return Err(AnalysisError::Invalid(format!("D0 must be positive, got {value}")));
                }
                cfg.diffusion = DiffusionSpec::from_d0(value);
            }
            SweepParam::Eps => {
                if !matches!(cfg.flow.name.as_str(), "kolmogorov3d" | "abc3d") {
                    return Err(AnalysisError::Invalid(format!(
                        "flow `{}` has no eps parameter",
                        cfg.flow.name
                    )));
                }
                cfg.flow.params.insert("eps".into(), value);
            }
            SweepParam::Omega => {
                if cfg.flow.name != "abc3d_omega" {
                    return Err(AnalysisError::Invalid(format!(
                        "flow `{}` has no omega parameter",
                        cfg.flow.name
                    )));
                }
                cfg.flow.params.insert("omega".into(), value);
            }
        }
        Ok(cfg)
    }
}

impl std::str::FromStr for SweepParam {
    type Err = AnalysisError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "d0" => Ok(SweepParam::D0),
            "eps" => Ok(SweepParam::Eps),
            "omega" => Ok(SweepParam::Omega),
            other => Err(AnalysisError::Invalid(format!(
                "unknown sweep parameter `{other}` (known: d0, eps, omega)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub value: f64,
    pub seed: u64,
    pub horizon: f64,
    pub d11: f64,
    pub se: f64,
    pub plateau: PlateauDetection,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepTable {
    pub param: SweepParam,
    pub rows: Vec<SweepRow>,
    /// Enhancement slope of `D11` against `D0` (D0 sweeps only).
    pub fit: Option<SlopeFit>,
}

#[derive(Debug, Clone, Default)]
pub struct SweepOptions {
    /// Per-value horizons; the base horizon is used when absent.
    pub horizons: Option<Vec<f64>>,
    pub plateau_window: Option<usize>,
    pub plateau_tolerance: Option<f64>,
    /// How many times a value whose `D11` has not plateaued is rerun with
    /// twice the horizon. Zero keeps the given horizon.
    pub max_extensions: u32,
}

/// One independent ensemble per value. Value `i` runs with seed
/// `mix_seed(base.master_seed, i)`.
pub fn sweep(
    base: &SimulationConfig,
    param: SweepParam,
    values: &[f64],
    options: &SweepOptions,
    exec: &ExecOptions,
) -> Result<SweepTable, AnalysisError> {
    if values.is_empty() {
        return Err(AnalysisError::Invalid("no sweep values".into()));
    }
    if let Some(h) = &options.horizons {
        if h.len() != values.len() {
            return Err(AnalysisError::Invalid(format!(
                "{} horizons given for {} values",
                h.len(),
                values.len()
            )));
        }
    }
    let window = options.plateau_window.unwrap_or(DEFAULT_PLATEAU_WINDOW);
    let tolerance = options.plateau_tolerance.unwrap_or(DEFAULT_PLATEAU_TOLERANCE);

    let mut rows = Vec::with_capacity(values.len());
    for (i, &value) in values.iter().enumerate() {
        let mut cfg = param.apply(base, value)?;
        cfg.master_seed = mix_seed(base.master_seed, i as u64);
        if let Some(h) = &options.horizons {
            cfg.horizon = h[i];
        }
        let mut extensions = 0;
        let (report, plateau) = loop {
            let report = effective_diffusivity(&run_ensemble(&cfg, exec)?)?;
            let plateau = detect_plateau(&report, window, tolerance);
            if plateau.mixed() || extensions == options.max_extensions {
                break (report, plateau);
            }
            extensions += 1;
            cfg.horizon *= 2.0;
            log::info!("{} = {value}: not mixed, extending to t = {}", param.name(), cfg.horizon);
        };
        let (d11, se) = report.final_d11();
        if !plateau.mixed() {
            log::warn!("{} = {value}: D11 has not plateaued by t = {}", param.name(), cfg.horizon);
        }
        log::info!("{} = {value}: D11 = {d11} ± {se}", param.name());
        rows.push(SweepRow {
            value,
            seed: cfg.master_seed,
            horizon: cfg.horizon,
            d11,
            se,
            plateau,
        });
    }
    let fit = match param {
        SweepParam::D0 if rows.len() >= 2 => Some(fit_loglog(
            &rows.iter().map(|r| (r.value, r.d11)).collect::<Vec<_>>(),
        )?),
        _ => None,
    };
    Ok(SweepTable { param, rows, fit })
}
