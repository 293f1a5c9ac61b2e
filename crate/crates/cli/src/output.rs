//! CSV reports and the run manifest.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::Serialize;
use tracer_core::analysis::{ConvergenceStudy, PlateauDetection, SweepTable};
use tracer_core::{DiffusivityReport, SimulationConfig};

/// Header comment lines shared by every CSV of a run.
pub struct Header {
    lines: Vec<String>,
}

impl Header {
    pub fn new(kind: &str, config: &SimulationConfig) -> Self {
        let lines = vec![
            format!("# tracer {} {kind}", env!("CARGO_PKG_VERSION")),
            format!("# config_hash = {}", config.fingerprint()),
            format!("# flow = {}", flow_label(config)),
            format!("# scheme = {}", config.scheme),
            format!("# seed = {}", config.master_seed),
            format!("# dt = {}", config.dt),
            format!("# horizon = {}", config.horizon),
            format!("# n_particles = {}", config.n_particles),
        ];
        Self { lines }
    }

    pub fn note(mut self, key: &str, value: impl std::fmt::Display) -> Self {
        self.lines.push(format!("# {key} = {value}"));
        self
    }

    fn render(&self, columns: &[String]) -> String {
        let mut s = String::new();
        for l in &self.lines {
            s.push_str(l);
            s.push('\n');
        }
        s.push_str(&columns.join(","));
        s.push('\n');
        s
    }
}

fn flow_label(config: &SimulationConfig) -> String {
    let params: Vec<String> = config
        .flow
        .params
        .iter()
        .map(|(k, v)| format!("{k}={v}"))
        .collect();
    if params.is_empty() {
        config.flow.name.clone()
    } else {
        format!("{}({})", config.flow.name, params.join(";"))
    }
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// `t, D11, SE11, D12, SE12, ..., Ddd, SEdd`.
pub fn timeseries_csv(header: &Header, report: &DiffusivityReport) -> String {
    let d = report.dim;
    let mut columns = vec!["t".to_string()];
    for i in 1..=d {
        for j in 1..=d {
            columns.push(format!("D{i}{j}"));
            columns.push(format!("SE{i}{j}"));
        }
    }
    let mut s = header.render(&columns);
    for (k, t) in report.times.iter().enumerate() {
        s.push_str(&t.to_string());
        for i in 0..d {
            for j in 0..d {
                let _ = write!(s, ",{},{}", report.entry(k, i, j), report.se_entry(k, i, j));
            }
        }
        s.push('\n');
    }
    s
}

/// The diffusivity matrix at the horizon, one entry per row.
pub fn final_csv(header: &Header, report: &DiffusivityReport, plateau: &PlateauDetection) -> String {
    let header = Header {
        lines: header.lines.clone(),
    }
    .note("t_final", report.times.last().copied().unwrap_or(0.0))
    .note("t_mix", opt(plateau.t_mix));
    let columns = ["i", "j", "D", "SE"].map(String::from);
    let mut s = header.render(&columns);
    let k = report.times.len() - 1;
    for i in 0..report.dim {
        for j in 0..report.dim {
            let _ = writeln!(
                s,
                "{},{},{},{}",
                i + 1,
                j + 1,
                report.entry(k, i, j),
                report.se_entry(k, i, j)
            );
        }
    }
    s
}

pub fn convergence_csv(header: &Header, study: &ConvergenceStudy) -> String {
    let header = Header {
        lines: header.lines.clone(),
    }
    .note("reference_dt", opt(study.reference_dt))
    .note("reference_D11", study.reference_d11)
    .note("reference_SE", study.reference_se)
    .note("slope", opt(study.fit.as_ref().map(|f| f.slope)));
    let columns = ["dt", "seed", "D11", "SE11", "abs_error", "noise_dominated"].map(String::from);
    let mut s = header.render(&columns);
    for r in &study.rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{}",
            r.dt, r.seed, r.d11, r.se, r.abs_error, r.noise_dominated
        );
    }
    s
}

pub fn sweep_csv(header: &Header, table: &SweepTable) -> String {
    let header = Header {
        lines: header.lines.clone(),
    }
    .note("param", table.param.name())
    .note("slope", opt(table.fit.as_ref().map(|f| f.slope)));
    let columns = ["value", "seed", "horizon", "D11", "SE11", "t_mix"].map(String::from);
    let mut s = header.render(&columns);
    for r in &table.rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{}",
            r.value,
            r.seed,
            r.horizon,
            r.d11,
            r.se,
            opt(r.plateau.t_mix)
        );
    }
    s
}

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub config_hash: String,
    pub code_version: String,
    pub seed: u64,
    pub wall_clock_seconds: f64,
    pub particle_steps: u64,
    pub throughput: f64,
    pub outputs: Vec<PathBuf>,
}

impl RunManifest {
    pub fn new(command: &str, config: &SimulationConfig) -> Self {
        Self {
            command: command.to_string(),
            config_hash: config.fingerprint(),
            code_version: env!("CARGO_PKG_VERSION").to_string(),
            seed: config.master_seed,
            wall_clock_seconds: 0.0,
            particle_steps: 0,
            throughput: 0.0,
            outputs: Vec::new(),
        }
    }

    pub fn finish(&mut self, seconds: f64, particle_steps: u64) {
        self.wall_clock_seconds = seconds;
        self.particle_steps = particle_steps;
        self.throughput = if seconds > 0.0 {
            particle_steps as f64 / seconds
        } else {
            0.0
        };
    }
}

pub struct OutputDir {
    pub dir: PathBuf,
    pub prefix: String,
}

impl OutputDir {
    pub fn path(&self, suffix: &str) -> PathBuf {
        self.dir.join(format!("{}_{suffix}", self.prefix))
    }

    pub fn write(&self, suffix: &str, body: &str, manifest: &mut RunManifest) -> std::io::Result<PathBuf> {
        std::fs::create_dir_all(&self.dir)?;
        let path = self.path(suffix);
        std::fs::write(&path, body)?;
        manifest.outputs.push(path.clone());
        Ok(path)
    }

    pub fn write_manifest(&self, manifest: &RunManifest) -> std::io::Result<PathBuf> {
        let path = self.path(&format!("{}_manifest.json", manifest.command));
        let json = serde_json::to_string_pretty(manifest).map_err(std::io::Error::other)?;
        write_file(&path, &json)?;
        Ok(path)
    }
}

fn write_file(path: &Path, body: &str) -> std::io::Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, body)
}
