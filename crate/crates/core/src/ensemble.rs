//! Monte Carlo ensembles of independent tracer particles.
//!
//! Particles are processed in fixed-size chunks that advance in lockstep, so
//! the frozen velocity field of each step is shared by the whole chunk.
//! Chunks run on a rayon pool; their per-particle displacement samples are
//! folded into the statistics strictly in particle-index order. The result
//! is therefore bitwise independent of the worker count and of where a run
//! was checkpointed and resumed.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{ConfigError, DiffusionSpec, InitialDistribution, SamplePlan, SimulationConfig};
use crate::flows::{FlowKind, Lanes, VelocityField, LANES};
use crate::integrators::{
    Diffusion, EulerMaruyama, Scheme, SymplecticSplit2d, Transport, VolumePreservingSplit,
};
use crate::rng::{derive_particle_rng, ParticleRng};
use crate::stats::MomentAccumulator;

/// Particles advanced together by one task.
pub const CHUNK: usize = 64;
/// Batches used for batch-means standard errors; particle `i` goes to batch
/// `i % N_BATCHES`.
pub const N_BATCHES: usize = 32;
const DEFAULT_WAVE: u64 = 16_384;
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("particle {particle} left the finite range at step {step} (t = {time})")]
    NonFinite { particle: u64, step: u64, time: f64 },
    #[error("checkpoint {path}: {message}")]
    Checkpoint { path: PathBuf, message: String },
    #[error("thread pool: {0}")]
    Pool(String),
}

/// How to execute a run; none of these affect the statistics.
#[derive(Debug, Clone, Default)]
pub struct ExecOptions {
    /// 0 means one worker per available core.
    pub workers: usize,
    pub checkpoint: Option<CheckpointSpec>,
    /// Log throughput to standard error after each wave.
    pub progress: bool,
}

impl ExecOptions {
    pub fn with_workers(workers: usize) -> Self {
        Self {
            workers,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone)]
pub struct CheckpointSpec {
    pub path: PathBuf,
    /// Snapshot after every `every` particles (rounded up to whole chunks).
    pub every: u64,
}

/// Displacement moments at each sampling time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleStatistics {
    pub dim: usize,
    /// Elapsed times `t_k` since the start of the run.
    pub sample_times: Vec<f64>,
    pub snap_errors: Vec<f64>,
    /// All particles, per sampling time.
    pub total: Vec<MomentAccumulator>,
    /// `batches[b][k]`: particles with index `≡ b (mod N_BATCHES)`.
    pub batches: Vec<Vec<MomentAccumulator>>,
    /// Number of particles folded in.
    pub n_particles: u64,
    pub config_fingerprint: String,
}

impl EnsembleStatistics {
    pub fn new(dim: usize, plan: &SamplePlan, fingerprint: String) -> Self {
        let k = plan.times.len();
        Self {
            dim,
            sample_times: plan.times.clone(),
            snap_errors: plan.snap_errors.clone(),
            total: vec![MomentAccumulator::new(dim); k],
            batches: vec![vec![MomentAccumulator::new(dim); k]; N_BATCHES],
            n_particles: 0,
            config_fingerprint: fingerprint,
        }
    }

    /// Folds one particle's displacements (`samples[k*dim..(k+1)*dim]` at
    /// time `t_k`).
    pub fn push_particle(&mut self, particle_index: u64, samples: &[f64]) {
        let d = self.dim;
        let batch = &mut self.batches[(particle_index % N_BATCHES as u64) as usize];
        for (k, disp) in samples.chunks_exact(d).enumerate() {
            self.total[k].push(disp);
            batch[k].push(disp);
        }
        self.n_particles += 1;
    }

    /// Builds statistics from raw per-particle samples; the `i`-th sample
    /// belongs to particle `i`.
    pub fn from_samples<'a>(
        dim: usize,
        times: &[f64],
        samples: impl IntoIterator<Item = &'a [f64]>,
    ) -> Self {
        Self::from_indexed_samples(dim, times, (0u64..).zip(samples))
    }

    /// Builds statistics from `(particle index, samples)` pairs given in any
    /// order. They are folded in index order, so the result does not depend
    /// on the arrival order.
    pub fn from_indexed_samples<'a>(
        dim: usize,
        times: &[f64],
        samples: impl IntoIterator<Item = (u64, &'a [f64])>,
    ) -> Self {
        let plan = SamplePlan {
            steps: (1..=times.len() as u64).collect(),
            times: times.to_vec(),
            snap_errors: vec![0.0; times.len()],
        };
        let mut sorted: Vec<_> = samples.into_iter().collect();
        sorted.sort_by_key(|s| s.0);
        let mut stats = Self::new(dim, &plan, String::new());
        for (i, s) in sorted {
            stats.push_particle(i, s);
        }
        stats
    }
}

/// Displacements of one particle at each sampling time.
#[derive(Debug, Clone, PartialEq)]
pub struct ParticleSamples {
    pub times: Vec<f64>,
    pub displacements: Vec<Vec<f64>>,
}

/// Receives the concrete flow, stepper and noise of a configuration.
pub trait Visitor {
    type Output;
    fn visit<const D: usize, F: VelocityField<D>, S: Transport<D>>(
        self,
        flow: &F,
        stepper: S,
        diffusion: Diffusion<D>,
    ) -> Self::Output;
}

fn diffusion_for<const D: usize>(spec: &DiffusionSpec) -> Result<Diffusion<D>, ConfigError> {
    Ok(match spec {
        DiffusionSpec::Sigma(s) => Diffusion::scalar(*s)?,
        DiffusionSpec::Matrix(rows) => {
            let m: [[f64; D]; D] = std::array::from_fn(|i| std::array::from_fn(|j| rows[i][j]));
            Diffusion::matrix(m)?
        }
    })
}

fn with_scheme<const D: usize, F: VelocityField<D>, V: Visitor>(
    scheme: Scheme,
    flow: &F,
    diffusion: Diffusion<D>,
    visitor: V,
) -> Result<V::Output, ConfigError> {
    match scheme {
        Scheme::Split2d => Err(crate::integrators::IntegratorError::NotTwoDimensional(D).into()),
        Scheme::SplitNd => Ok(visitor.visit(flow, VolumePreservingSplit, diffusion)),
        Scheme::Euler => Ok(visitor.visit(flow, EulerMaruyama, diffusion)),
    }
}

fn with_scheme_2d<F: VelocityField<2>, V: Visitor>(
    scheme: Scheme,
    flow: &F,
    diffusion: Diffusion<2>,
    visitor: V,
) -> Result<V::Output, ConfigError> {
    match scheme {
        Scheme::Split2d => Ok(visitor.visit(flow, SymplecticSplit2d, diffusion)),
        other => with_scheme(other, flow, diffusion, visitor),
    }
}

/// Validates `config` and hands its monomorphized parts to `visitor`.
pub fn dispatch<V: Visitor>(config: &SimulationConfig, visitor: V) -> Result<V::Output, ConfigError> {
    let flow = config.validate()?;
    match flow.kind {
        FlowKind::Chaotic2d(f) => {
            with_scheme_2d(config.scheme, &f, diffusion_for(&config.diffusion)?, visitor)
        }
        FlowKind::Shear2d(f) => {
            with_scheme_2d(config.scheme, &f, diffusion_for(&config.diffusion)?, visitor)
        }
        FlowKind::Zero { dim: 2 } => with_scheme_2d(
            config.scheme,
            &crate::flows::ZeroFlow,
            diffusion_for(&config.diffusion)?,
            visitor,
        ),
        FlowKind::Zero { .. } => with_scheme::<3, _, _>(
            config.scheme,
            &crate::flows::ZeroFlow,
            diffusion_for(&config.diffusion)?,
            visitor,
        ),
        FlowKind::Kolmogorov3d(f) => {
            with_scheme(config.scheme, &f, diffusion_for(&config.diffusion)?, visitor)
        }
        FlowKind::Abc3d(f) => {
            with_scheme(config.scheme, &f, diffusion_for(&config.diffusion)?, visitor)
        }
    }
}

/// Resolved, flow-independent part of a run.
#[derive(Debug, Clone)]
pub struct RunPlan {
    pub dt: f64,
    pub start_time: f64,
    pub total_steps: u64,
    pub samples: SamplePlan,
    pub master_seed: u64,
    pub initial: InitialDistribution,
}

impl RunPlan {
    pub fn from_config(config: &SimulationConfig) -> Result<Self, ConfigError> {
        Ok(Self {
            dt: config.dt,
            start_time: config.start_time,
            total_steps: config.total_steps(),
            samples: config.sample_plan()?,
            master_seed: config.master_seed,
            initial: config.initial.clone(),
        })
    }
}

fn initial_position<const D: usize>(initial: &InitialDistribution, rng: &mut ParticleRng) -> [f64; D] {
    match initial {
        InitialDistribution::Dirac { at } => std::array::from_fn(|i| at[i]),
        InitialDistribution::UniformBox { lo, hi } => {
            std::array::from_fn(|i| rng.uniform(lo[i], hi[i]))
        }
    }
}

/// Advances particles `first..first+count` to the horizon and returns their
/// displacements, laid out `[particle][sample][dim]`.
///
/// Particles are packed four to a [`Lanes`] group; a short final group is
/// padded with copies of the last particle that draw no noise and are never
/// reported.
pub fn run_chunk<const D: usize, F: VelocityField<D>, S: Transport<D>>(
    flow: &F,
    stepper: S,
    diffusion: &Diffusion<D>,
    plan: &RunPlan,
    first: u64,
    count: usize,
) -> Result<Vec<f64>, RunError> {
    let n_samples = plan.samples.steps.len();
    let n_groups = count.div_ceil(LANES);
    let mut rngs: Vec<ParticleRng> = (0..count as u64)
        .map(|p| derive_particle_rng(plan.master_seed, first + p))
        .collect();
    let starts: Vec<[f64; D]> = rngs
        .iter_mut()
        .map(|rng| initial_position(&plan.initial, rng))
        .collect();
    let mut xs: Vec<[Lanes; D]> = (0..n_groups)
        .map(|g| {
            std::array::from_fn(|i| {
                Lanes::new(std::array::from_fn(|l| {
                    starts[(g * LANES + l).min(count - 1)][i]
                }))
            })
        })
        .collect();
    let mut out = vec![0.0; count * n_samples * D];

    let dt = plan.dt;
    let sqrt_dt = dt.sqrt();
    let noisy = !diffusion.is_zero();
    let mut next = 0;

    for step in 0..plan.total_steps {
        let t = plan.start_time + step as f64 * dt;
        let frozen = flow.freeze(stepper.eval_time(t, dt));
        for (g, x) in xs.iter_mut().enumerate() {
            let lanes = (count - g * LANES).min(LANES);
            stepper.transport_lanes(&frozen, dt, x);
            if noisy {
                let mut dw = [[0.0; LANES]; D];
                for (l, rng) in rngs[g * LANES..g * LANES + lanes].iter_mut().enumerate() {
                    for row in dw.iter_mut() {
                        row[l] = sqrt_dt * rng.normal();
                    }
                }
                diffusion.apply_lanes(x, &dw.map(Lanes::new));
            }
            let finite = x[1..].iter().fold(x[0].is_finite(), |m, v| m & v.is_finite());
            if !finite.all() {
                let mask = finite.to_bitmask();
                if let Some(l) = (0..lanes).find(|l| mask & (1 << l) == 0) {
                    return Err(RunError::NonFinite {
                        particle: first + (g * LANES + l) as u64,
                        step: step + 1,
                        time: t + dt,
                    });
                }
            }
        }
        if next < n_samples && step + 1 == plan.samples.steps[next] {
            for (p, x0) in starts.iter().enumerate() {
                let group = &xs[p / LANES];
                let base = (p * n_samples + next) * D;
                for i in 0..D {
                    out[base + i] = group[i].as_array()[p % LANES] - x0[i];
                }
            }
            next += 1;
        }
    }
    Ok(out)
}

/// Trajectory samples of a single particle, identical to what the ensemble
/// records for it.
pub fn run_particle(config: &SimulationConfig, particle_index: u64) -> Result<ParticleSamples, RunError> {
    struct One<'a> {
        plan: &'a RunPlan,
        index: u64,
    }
    impl Visitor for One<'_> {
        type Output = Result<Vec<f64>, RunError>;
        fn visit<const D: usize, F: VelocityField<D>, S: Transport<D>>(
            self,
            flow: &F,
            stepper: S,
            diffusion: Diffusion<D>,
        ) -> Self::Output {
            run_chunk(flow, stepper, &diffusion, self.plan, self.index, 1)
        }
    }
    let plan = RunPlan::from_config(config)?;
    let dim = config.dim()?;
    let raw = dispatch(
        config,
        One {
            plan: &plan,
            index: particle_index,
        },
    )??;
    Ok(ParticleSamples {
        times: plan.samples.times.clone(),
        displacements: raw.chunks_exact(dim).map(<[f64]>::to_vec).collect(),
    })
}

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    version: u32,
    config_fingerprint: String,
    next_particle: u64,
    stats: EnsembleStatistics,
}

fn load_checkpoint(path: &Path, fingerprint: &str) -> Result<Option<EnsembleStatistics>, RunError> {
    let err = |message: String| RunError::Checkpoint {
        path: path.to_path_buf(),
        message,
    };
    let text = match std::fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(None),
        Err(e) => return Err(err(e.to_string())),
    };
    let ck: Checkpoint = serde_json::from_str(&text).map_err(|e| err(e.to_string()))?;
    if ck.version != CHECKPOINT_VERSION {
        return Err(err(format!("unsupported version {}", ck.version)));
    }
    if ck.config_fingerprint != fingerprint {
        return Err(err(format!(
            "written for config {}, current config is {}",
            ck.config_fingerprint, fingerprint
        )));
    }
    if ck.stats.n_particles != ck.next_particle {
        return Err(err("particle count does not match resume index".into()));
    }
    Ok(Some(ck.stats))
}

fn save_checkpoint(path: &Path, stats: &EnsembleStatistics) -> Result<(), RunError> {
    let err = |message: String| RunError::Checkpoint {
        path: path.to_path_buf(),
        message,
    };
    let ck = Checkpoint {
        version: CHECKPOINT_VERSION,
        config_fingerprint: stats.config_fingerprint.clone(),
        next_particle: stats.n_particles,
        stats: stats.clone(),
    };
    let json = serde_json::to_string(&ck).map_err(|e| err(e.to_string()))?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| err(e.to_string()))?;
    }
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, json).map_err(|e| err(e.to_string()))?;
    std::fs::rename(&tmp, path).map_err(|e| err(e.to_string()))
}

struct Ensemble<'a> {
    config: &'a SimulationConfig,
    plan: RunPlan,
    exec: &'a ExecOptions,
    stop_after: Option<u64>,
}

impl Visitor for Ensemble<'_> {
    type Output = Result<EnsembleStatistics, RunError>;

    fn visit<const D: usize, F: VelocityField<D>, S: Transport<D>>(
        self,
        flow: &F,
        stepper: S,
        diffusion: Diffusion<D>,
    ) -> Self::Output {
        let fingerprint = self.config.fingerprint();
        let n = self.config.n_particles;
        let mut stats = match &self.exec.checkpoint {
            Some(ck) => load_checkpoint(&ck.path, &fingerprint)?,
            None => None,
        }
        .unwrap_or_else(|| EnsembleStatistics::new(D, &self.plan.samples, fingerprint));
        if stats.n_particles > 0 {
            log::info!("resuming at particle {} of {}", stats.n_particles, n);
        }

        let chunk = CHUNK as u64;
        let wave = match &self.exec.checkpoint {
            Some(ck) => ck.every.max(1).div_ceil(chunk) * chunk,
            None => DEFAULT_WAVE,
        };
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(self.exec.workers)
            .build()
            .map_err(|e| RunError::Pool(e.to_string()))?;
        let n_samples = self.plan.samples.steps.len();
        let started = Instant::now();
        let resumed_from = stats.n_particles;
        let end = self.stop_after.map_or(n, |s| s.min(n));

        while stats.n_particles < end {
            let wave_start = stats.n_particles;
            let wave_end = (wave_start + wave).min(end);
            let chunks: Vec<(u64, usize)> = (wave_start..wave_end)
                .step_by(CHUNK)
                .map(|first| (first, (wave_end - first).min(chunk) as usize))
                .collect();
            let plan = &self.plan;
            let results: Vec<Result<Vec<f64>, RunError>> = pool.install(|| {
                chunks
                    .par_iter()
                    .map(|&(first, count)| run_chunk(flow, stepper, &diffusion, plan, first, count))
                    .collect()
            });
            for (&(first, _), result) in chunks.iter().zip(results) {
                let raw = result?;
                for (p, samples) in raw.chunks_exact(n_samples * D).enumerate() {
                    stats.push_particle(first + p as u64, samples);
                }
            }
            if let Some(ck) = &self.exec.checkpoint {
                save_checkpoint(&ck.path, &stats)?;
            }
            if self.exec.progress {
                let elapsed = started.elapsed().as_secs_f64();
                let done = stats.n_particles - resumed_from;
                let steps = done as f64 * plan.total_steps as f64;
                log::info!(
                    "{}/{} particles, {:.0} particles/s, {:.3e} particle-steps/s",
                    stats.n_particles,
                    n,
                    done as f64 / elapsed,
                    steps / elapsed
                );
            }
        }
        Ok(stats)
    }
}

/// Runs all `config.n_particles` particles and returns their statistics.
pub fn run_ensemble(config: &SimulationConfig, exec: &ExecOptions) -> Result<EnsembleStatistics, RunError> {
    let plan = RunPlan::from_config(config)?;
    dispatch(
        config,
        Ensemble {
            config,
            plan,
            exec,
            stop_after: None,
        },
    )?
}

/// Like [`run_ensemble`], but stops (with a checkpoint written, if
/// configured) once `particles` have been folded in. Useful to split a long
/// run across sessions.
pub fn run_ensemble_partial(
    config: &SimulationConfig,
    exec: &ExecOptions,
    particles: u64,
) -> Result<EnsembleStatistics, RunError> {
    let plan = RunPlan::from_config(config)?;
    dispatch(
        config,
        Ensemble {
            config,
            plan,
            exec,
            stop_after: Some(particles),
        },
    )?
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{FlowSpec, SampleSchedule};

    fn base(flow: FlowSpec, scheme: Scheme, sigma: f64) -> SimulationConfig {
        let dim = flow.build().unwrap().dim;
        SimulationConfig {
            flow,
            scheme,
            diffusion: DiffusionSpec::Sigma(sigma),
            dt: 0.05,
            horizon: 2.0,
            n_particles: 150,
            master_seed: 11,
            samples: SampleSchedule::Log {
                count: 8,
                first: None,
            },
            initial: InitialDistribution::UniformBox {
                lo: vec![-0.5; dim],
                hi: vec![0.5; dim],
            },
            start_time: 0.0,
        }
    }

    #[test]
    fn stationary_without_noise() {
        let c = base(FlowSpec::new("zero", &[]), Scheme::SplitNd, 0.0);
        let stats = run_ensemble(&c, &ExecOptions::default()).unwrap();
        for acc in &stats.total {
            assert_eq!(acc.second_moment(0, 0), 0.0);
            assert_eq!(acc.second_moment(1, 1), 0.0);
        }
        assert!(stats.total.iter().all(|a| a.count() == 150));
    }

    #[test]
    fn shear_moves_in_straight_lines() {
        let (a, k) = (0.7, 2.0);
        let period = std::f64::consts::TAU / k;
        let mut c = base(
            FlowSpec::new("shear2d", &[("amplitude", a), ("wavenumber", k)]),
            Scheme::Split2d,
            0.0,
        );
        let y0 = 0.25 * period;
        c.initial = InitialDistribution::Dirac { at: vec![0.0, y0] };
        let s = run_particle(&c, 0).unwrap();
        let speed = a * (k * y0).sin();
        for (t, d) in s.times.iter().zip(&s.displacements) {
            assert_eq!(d[1], 0.0);
            let steps = (t / c.dt).round();
            let mut x = 0.0;
            for _ in 0..steps as usize {
                x += speed * c.dt;
            }
            assert_eq!(d[0], x);
        }
    }

    #[test]
    fn single_particle_matches_ensemble() {
        let mut c = base(FlowSpec::new("chaotic2d", &[]), Scheme::Split2d, 0.3);
        c.n_particles = 1;
        let stats = run_ensemble(&c, &ExecOptions::default()).unwrap();
        let s = run_particle(&c, 0).unwrap();
        for (k, d) in s.displacements.iter().enumerate() {
            assert_eq!(stats.total[k].second_moment(0, 0), d[0] * d[0]);
            assert_eq!(stats.total[k].second_moment(0, 1), d[0] * d[1]);
            assert_eq!(stats.total[k].second_moment(1, 1), d[1] * d[1]);
        }
    }

    #[test]
    fn worker_count_does_not_change_results() {
        let c = base(FlowSpec::new("abc3d", &[("eps", 0.5)]), Scheme::SplitNd, 0.2);
        let one = run_ensemble(&c, &ExecOptions::with_workers(1)).unwrap();
        let four = run_ensemble(&c, &ExecOptions::with_workers(4)).unwrap();
        assert_eq!(one, four);
    }

    #[test]
    fn checkpoint_resume_is_bitwise_identical() {
        let dir = tempfile::tempdir().unwrap();
        let mut c = base(FlowSpec::new("kolmogorov3d", &[("eps", 0.1)]), Scheme::SplitNd, 0.1);
        c.n_particles = 300;
        let full = run_ensemble(&c, &ExecOptions::default()).unwrap();

        let exec = ExecOptions {
            checkpoint: Some(CheckpointSpec {
                path: dir.path().join("run.ckpt"),
                every: 100,
            }),
            ..ExecOptions::default()
        };
        let partial = run_ensemble_partial(&c, &exec, 128).unwrap();
        assert_eq!(partial.n_particles, 128);
        let resumed = run_ensemble(&c, &exec).unwrap();
        assert_eq!(resumed, full);

        // a checkpoint from another config is refused
        c.master_seed += 1;
        assert!(matches!(
            run_ensemble(&c, &exec),
            Err(RunError::Checkpoint { .. })
        ));
    }

    struct Breaks;
    impl VelocityField<2> for Breaks {
        type Frozen = f64;
        fn freeze(&self, t: f64) -> f64 {
            t
        }
    }
    impl crate::flows::FrozenField<2> for f64 {
        fn component_lanes(&self, _i: usize, _x: &[Lanes; 2]) -> Lanes {
            Lanes::splat(if *self > 0.3 { f64::NAN } else { 0.0 })
        }
    }

    #[test]
    fn non_finite_state_is_reported() {
        let c = base(FlowSpec::new("zero", &[]), Scheme::SplitNd, 0.1);
        let plan = RunPlan::from_config(&c).unwrap();
        let err = run_chunk(&Breaks, VolumePreservingSplit, &Diffusion::Scalar(0.1), &plan, 7, 3)
            .unwrap_err();
        match err {
            // midpoint of step 7 is 0.325
            RunError::NonFinite { particle, step, .. } => assert_eq!((particle, step), (7, 7)),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn particle_paths_do_not_depend_on_ensemble_size() {
        let mut c = base(FlowSpec::new("chaotic2d", &[]), Scheme::Split2d, 0.4);
        let a = run_particle(&c, 5).unwrap();
        c.n_particles = 10_000;
        let b = run_particle(&c, 5).unwrap();
        assert_eq!(a, b);
    }
}
