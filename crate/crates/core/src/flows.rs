//! Space-time periodic, divergence-free velocity fields and their structural checks.
//!
//! Every field here has the property that component `i` of the velocity does
//! not depend on coordinate `x_i`. The splitting integrators rely on it: each
//! sub-step is then a shear, and the composed map has unit Jacobian determinant.

use std::collections::BTreeMap;
use std::f64::consts::{FRAC_PI_2, PI, TAU};

use serde::Serialize;
use thiserror::Error;

/// Four positions (or velocities) evaluated side by side. All velocity
/// evaluation goes through this type, including single-point calls, so the
/// batched ensemble path and the scalar path agree to the last bit.
pub type Lanes = wide::f64x4;
pub const LANES: usize = 4;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FlowError {
    #[error("unknown flow `{0}` (known: chaotic2d, kolmogorov3d, abc3d, abc3d_omega, shear2d, zero)")]
    UnknownFlow(String),
    #[error("flow `{flow}` does not take parameter `{param}`")]
    UnknownParam { flow: String, param: String },
    #[error("flow `{flow}` requires parameter `{param}`")]
    MissingParam { flow: String, param: String },
    #[error("flow `{flow}`: parameter `{param}` = {value} is invalid ({reason})")]
    InvalidParam {
        flow: String,
        param: String,
        value: f64,
        reason: &'static str,
    },
    #[error("position has {got} components, flow `{flow}` is {expected}-dimensional")]
    DimensionMismatch {
        flow: String,
        expected: usize,
        got: usize,
    },
    #[error("non-finite input to flow `{0}`")]
    NonFinite(String),
}

/// A velocity field `v(t, x)` on `R^D`.
///
/// Evaluation happens in two stages: [`VelocityField::freeze`] fixes the time
/// (and precomputes whatever depends only on it), after which the frozen
/// field is evaluated component by component.
pub trait VelocityField<const D: usize>: Sync {
    type Frozen: FrozenField<D>;

    fn freeze(&self, t: f64) -> Self::Frozen;

    fn velocity(&self, t: f64, x: &[f64; D]) -> [f64; D] {
        let frozen = self.freeze(t);
        std::array::from_fn(|i| frozen.component(i, x))
    }
}

/// A velocity field at a fixed time.
pub trait FrozenField<const D: usize> {
    /// Component `i` at four points at once.
    fn component_lanes(&self, i: usize, x: &[Lanes; D]) -> Lanes;

    #[inline]
    fn component(&self, i: usize, x: &[f64; D]) -> f64 {
        self.component_lanes(i, &x.map(Lanes::splat)).to_array()[0]
    }
}

/// Time forcing `amplitude * sin(angular_frequency * t)` shared by the
/// catalog flows.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Forcing {
    pub amplitude: f64,
    pub angular_frequency: f64,
}

impl Forcing {
    pub fn unit_period(amplitude: f64) -> Self {
        Self {
            amplitude,
            angular_frequency: TAU,
        }
    }

    #[inline]
    pub fn phase(&self, t: f64) -> f64 {
        if self.amplitude == 0.0 {
            0.0
        } else {
            self.amplitude * (self.angular_frequency * t).sin()
        }
    }

    pub fn period(&self) -> Option<f64> {
        if self.amplitude == 0.0 || self.angular_frequency == 0.0 {
            None
        } else {
            Some(TAU / self.angular_frequency.abs())
        }
    }
}

/// Phase-shifted field at a fixed time: the catalog flows only depend on
/// time through a scalar phase.
#[derive(Debug, Clone, Copy)]
pub struct Phased<F> {
    flow: F,
    phase: f64,
}

/// The two-dimensional time-dependent chaotic flow
///
/// ```text
/// v1 = sin(4 x2 + 1 + sin 2πt) exp(cos(4 x2 + 1 + sin 2πt))
/// v2 = cos(2 x1 + sin 2πt)     exp(sin(2 x1 + sin 2πt))
/// ```
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct Chaotic2d;

impl VelocityField<2> for Chaotic2d {
    type Frozen = Phased<Chaotic2d>;

    #[inline]
    fn freeze(&self, t: f64) -> Self::Frozen {
        Phased {
            flow: *self,
            phase: (TAU * t).sin(),
        }
    }
}

impl FrozenField<2> for Phased<Chaotic2d> {
    #[inline]
    fn component_lanes(&self, i: usize, x: &[Lanes; 2]) -> Lanes {
        match i {
            0 => {
                let (s, c) = (x[1] * 4.0 + (1.0 + self.phase)).sin_cos();
                s * c.exp()
            }
            _ => {
                let (s, c) = (x[0] * 2.0 + self.phase).sin_cos();
                c * s.exp()
            }
        }
    }
}

/// Time-dependent Kolmogorov flow `v = (sin(x3 + φ), sin(x1 + φ), sin(x2 + φ))`,
/// `φ = ε sin 2πt`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Kolmogorov3d {
    pub forcing: Forcing,
}

impl VelocityField<3> for Kolmogorov3d {
    type Frozen = Phased<Kolmogorov3d>;

    #[inline]
    fn freeze(&self, t: f64) -> Self::Frozen {
        Phased {
            flow: *self,
            phase: self.forcing.phase(t),
        }
    }
}

impl FrozenField<3> for Phased<Kolmogorov3d> {
    #[inline]
    fn component_lanes(&self, i: usize, x: &[Lanes; 3]) -> Lanes {
        let j = (i + 2) % 3;
        (x[j] + self.phase).sin_cos().0
    }
}

/// Time-dependent ABC flow
///
/// ```text
/// v1 = A sin(x3 + φ) + C cos(x2 + φ)
/// v2 = B sin(x1 + φ) + A cos(x3 + φ)
/// v3 = C sin(x2 + φ) + B cos(x1 + φ)
/// ```
///
/// with `φ = ε sin 2πt` or `φ = sin Ωt` depending on the forcing.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Abc3d {
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub forcing: Forcing,
}

impl VelocityField<3> for Abc3d {
    type Frozen = Phased<Abc3d>;

    #[inline]
    fn freeze(&self, t: f64) -> Self::Frozen {
        Phased {
            flow: *self,
            phase: self.forcing.phase(t),
        }
    }
}

impl FrozenField<3> for Phased<Abc3d> {
    #[inline]
    fn component_lanes(&self, i: usize, x: &[Lanes; 3]) -> Lanes {
        let Abc3d { a, b, c, .. } = self.flow;
        let p = self.phase;
        let (s, co, w_s, w_c) = match i {
            0 => ((x[2] + p).sin_cos().0, (x[1] + p).sin_cos().1, a, c),
            1 => ((x[0] + p).sin_cos().0, (x[2] + p).sin_cos().1, b, a),
            _ => ((x[1] + p).sin_cos().0, (x[0] + p).sin_cos().1, c, b),
        };
        s * w_s + co * w_c
    }
}

/// Steady shear `v = (a sin(k x2), 0)`; its effective diffusivity is known in
/// closed form.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Shear2d {
    pub amplitude: f64,
    pub wavenumber: f64,
}

impl VelocityField<2> for Shear2d {
    type Frozen = Shear2d;

    #[inline]
    fn freeze(&self, _t: f64) -> Self::Frozen {
        *self
    }
}

impl FrozenField<2> for Shear2d {
    #[inline]
    fn component_lanes(&self, i: usize, x: &[Lanes; 2]) -> Lanes {
        if i == 0 {
            (x[1] * self.wavenumber).sin_cos().0 * self.amplitude
        } else {
            Lanes::ZERO
        }
    }
}

/// `v ≡ 0` in any dimension.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct ZeroFlow;

impl<const D: usize> VelocityField<D> for ZeroFlow {
    type Frozen = ZeroFlow;

    #[inline]
    fn freeze(&self, _t: f64) -> Self::Frozen {
        ZeroFlow
    }
}

impl<const D: usize> FrozenField<D> for ZeroFlow {
    #[inline]
    fn component_lanes(&self, _i: usize, _x: &[Lanes; D]) -> Lanes {
        Lanes::ZERO
    }
}

/// Concrete catalog flow, used to dispatch to monomorphized integration code.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub enum FlowKind {
    Chaotic2d(Chaotic2d),
    Kolmogorov3d(Kolmogorov3d),
    Abc3d(Abc3d),
    Shear2d(Shear2d),
    Zero { dim: usize },
}

/// A named, parameterized catalog flow together with its periodicity.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FlowField {
    pub name: String,
    pub dim: usize,
    pub params: BTreeMap<String, f64>,
    /// Per-dimension spatial period.
    pub spatial_period: Vec<f64>,
    /// `None` for a steady flow.
    pub time_period: Option<f64>,
    pub kind: FlowKind,
}

impl FlowField {
    /// Looks the flow up in the catalog and builds it from `params`.
    pub fn from_catalog(name: &str, params: &BTreeMap<String, f64>) -> Result<Self, FlowError> {
        let entry = catalog()
            .iter()
            .find(|e| e.name == name)
            .ok_or_else(|| FlowError::UnknownFlow(name.to_string()))?;
        (entry.construct)(params)
    }

    pub fn velocity(&self, t: f64, x: &[f64]) -> Result<Vec<f64>, FlowError> {
        if x.len() != self.dim {
            return Err(FlowError::DimensionMismatch {
                flow: self.name.clone(),
                expected: self.dim,
                got: x.len(),
            });
        }
        if !t.is_finite() || x.iter().any(|v| !v.is_finite()) {
            return Err(FlowError::NonFinite(self.name.clone()));
        }
        Ok(match self.kind {
            FlowKind::Chaotic2d(f) => f.velocity(t, &[x[0], x[1]]).to_vec(),
            FlowKind::Kolmogorov3d(f) => f.velocity(t, &[x[0], x[1], x[2]]).to_vec(),
            FlowKind::Abc3d(f) => f.velocity(t, &[x[0], x[1], x[2]]).to_vec(),
            FlowKind::Shear2d(f) => f.velocity(t, &[x[0], x[1]]).to_vec(),
            FlowKind::Zero { dim } => vec![0.0; dim],
        })
    }

    /// Runs [`check_structure`] on the concrete field.
    pub fn check_structure(&self, n_samples: usize, h: f64) -> StructureReport {
        let time_period = self.time_period.unwrap_or(1.0);
        match self.kind {
            FlowKind::Chaotic2d(f) => {
                check_structure(&f, &self.periodicity::<2>(time_period), n_samples, h)
            }
            FlowKind::Shear2d(f) => {
                check_structure(&f, &self.periodicity::<2>(time_period), n_samples, h)
            }
            FlowKind::Kolmogorov3d(f) => {
                check_structure(&f, &self.periodicity::<3>(time_period), n_samples, h)
            }
            FlowKind::Abc3d(f) => {
                check_structure(&f, &self.periodicity::<3>(time_period), n_samples, h)
            }
            FlowKind::Zero { .. } => StructureReport::default(),
        }
    }

    fn periodicity<const D: usize>(&self, time_period: f64) -> Periodicity<D> {
        Periodicity {
            spatial: std::array::from_fn(|i| self.spatial_period[i]),
            time: time_period,
        }
    }
}

/// One entry of the flow catalog.
pub struct FlowCatalogEntry {
    pub name: &'static str,
    pub doc: &'static str,
    pub params: &'static [&'static str],
    pub construct: fn(&BTreeMap<String, f64>) -> Result<FlowField, FlowError>,
}

pub fn catalog() -> &'static [FlowCatalogEntry] {
    &CATALOG
}

static CATALOG: [FlowCatalogEntry; 6] = [
    FlowCatalogEntry {
        name: "chaotic2d",
        doc: "v1 = sin(4x2+1+sin2πt)·exp(cos(4x2+1+sin2πt)), v2 = cos(2x1+sin2πt)·exp(sin(2x1+sin2πt))",
        params: &[],
        construct: build_chaotic2d,
    },
    FlowCatalogEntry {
        name: "kolmogorov3d",
        doc: "v = (sin(x3+φ), sin(x1+φ), sin(x2+φ)), φ = eps·sin(2πt)",
        params: &["eps"],
        construct: build_kolmogorov3d,
    },
    FlowCatalogEntry {
        name: "abc3d",
        doc: "v1 = A sin(x3+φ) + C cos(x2+φ), v2 = B sin(x1+φ) + A cos(x3+φ), v3 = C sin(x2+φ) + B cos(x1+φ), φ = eps·sin(2πt)",
        params: &["A", "B", "C", "eps"],
        construct: build_abc3d,
    },
    FlowCatalogEntry {
        name: "abc3d_omega",
        doc: "ABC flow with phase φ = sin(Ωt)",
        params: &["A", "B", "C", "omega"],
        construct: build_abc3d_omega,
    },
    FlowCatalogEntry {
        name: "shear2d",
        doc: "v = (a·sin(k x2), 0)",
        params: &["amplitude", "wavenumber"],
        construct: build_shear2d,
    },
    FlowCatalogEntry {
        name: "zero",
        doc: "v ≡ 0",
        params: &["dim"],
        construct: build_zero,
    },
];

struct ParamReader<'a> {
    flow: &'static str,
    params: &'a BTreeMap<String, f64>,
}

impl<'a> ParamReader<'a> {
    fn new(
        flow: &'static str,
        params: &'a BTreeMap<String, f64>,
        allowed: &[&str],
    ) -> Result<Self, FlowError> {
        if let Some(bad) = params.keys().find(|k| !allowed.contains(&k.as_str())) {
            return Err(FlowError::UnknownParam {
                flow: flow.into(),
                param: bad.clone(),
            });
        }
        for (k, &v) in params {
            if !v.is_finite() {
                return Err(FlowError::InvalidParam {
                    flow: flow.into(),
                    param: k.clone(),
                    value: v,
                    reason: "must be finite",
                });
            }
        }
        Ok(Self { flow, params })
    }

    fn get(&self, key: &str, default: f64) -> f64 {
        self.params.get(key).copied().unwrap_or(default)
    }

    fn require(&self, key: &str) -> Result<f64, FlowError> {
        self.params
            .get(key)
            .copied()
            .ok_or_else(|| FlowError::MissingParam {
                flow: self.flow.into(),
                param: key.into(),
            })
    }

    fn positive(&self, key: &str, value: f64) -> Result<f64, FlowError> {
        if value > 0.0 {
            Ok(value)
        } else {
            Err(FlowError::InvalidParam {
                flow: self.flow.into(),
                param: key.into(),
                value,
                reason: "must be positive",
            })
        }
    }

    fn resolved(&self, pairs: &[(&str, f64)]) -> BTreeMap<String, f64> {
        pairs.iter().map(|&(k, v)| (k.to_string(), v)).collect()
    }
}

fn build_chaotic2d(params: &BTreeMap<String, f64>) -> Result<FlowField, FlowError> {
    let r = ParamReader::new("chaotic2d", params, &[])?;
    Ok(FlowField {
        name: r.flow.into(),
        dim: 2,
        params: BTreeMap::new(),
        // v2 depends on 2·x1, v1 on 4·x2
        spatial_period: vec![PI, FRAC_PI_2],
        time_period: Some(1.0),
        kind: FlowKind::Chaotic2d(Chaotic2d),
    })
}

fn build_kolmogorov3d(params: &BTreeMap<String, f64>) -> Result<FlowField, FlowError> {
    let r = ParamReader::new("kolmogorov3d", params, &["eps"])?;
    let eps = r.get("eps", 0.0);
    let forcing = Forcing::unit_period(eps);
    Ok(FlowField {
        name: r.flow.into(),
        dim: 3,
        params: r.resolved(&[("eps", eps)]),
        spatial_period: vec![TAU; 3],
        time_period: forcing.period(),
        kind: FlowKind::Kolmogorov3d(Kolmogorov3d { forcing }),
    })
}

fn build_abc3d(params: &BTreeMap<String, f64>) -> Result<FlowField, FlowError> {
    let r = ParamReader::new("abc3d", params, &["A", "B", "C", "eps"])?;
    let (a, b, c) = (r.get("A", 1.0), r.get("B", 1.0), r.get("C", 1.0));
    let eps = r.get("eps", 0.0);
    let forcing = Forcing::unit_period(eps);
    Ok(FlowField {
        name: r.flow.into(),
        dim: 3,
        params: r.resolved(&[("A", a), ("B", b), ("C", c), ("eps", eps)]),
        spatial_period: vec![TAU; 3],
        time_period: forcing.period(),
        kind: FlowKind::Abc3d(Abc3d { a, b, c, forcing }),
    })
}

fn build_abc3d_omega(params: &BTreeMap<String, f64>) -> Result<FlowField, FlowError> {
    let r = ParamReader::new("abc3d_omega", params, &["A", "B", "C", "omega"])?;
    let (a, b, c) = (r.get("A", 1.0), r.get("B", 1.0), r.get("C", 1.0));
    let omega = r.require("omega")?;
    if omega < 0.0 {
        return Err(FlowError::InvalidParam {
            flow: r.flow.into(),
            param: "omega".into(),
            value: omega,
            reason: "must be non-negative",
        });
    }
    let forcing = Forcing {
        amplitude: 1.0,
        angular_frequency: omega,
    };
    Ok(FlowField {
        name: r.flow.into(),
        dim: 3,
        params: r.resolved(&[("A", a), ("B", b), ("C", c), ("omega", omega)]),
        spatial_period: vec![TAU; 3],
        time_period: forcing.period(),
        kind: FlowKind::Abc3d(Abc3d { a, b, c, forcing }),
    })
}

fn build_shear2d(params: &BTreeMap<String, f64>) -> Result<FlowField, FlowError> {
    let r = ParamReader::new("shear2d", params, &["amplitude", "wavenumber"])?;
    let amplitude = r.get("amplitude", 1.0);
    let wavenumber = r.positive("wavenumber", r.get("wavenumber", TAU))?;
    let period = TAU / wavenumber;
    Ok(FlowField {
        name: r.flow.into(),
        dim: 2,
        params: r.resolved(&[("amplitude", amplitude), ("wavenumber", wavenumber)]),
        spatial_period: vec![period, period],
        time_period: None,
        kind: FlowKind::Shear2d(Shear2d {
            amplitude,
            wavenumber,
        }),
    })
}

fn build_zero(params: &BTreeMap<String, f64>) -> Result<FlowField, FlowError> {
    let r = ParamReader::new("zero", params, &["dim"])?;
    let raw = r.get("dim", 2.0);
    if raw.fract() != 0.0 || !(2.0..=3.0).contains(&raw) {
        return Err(FlowError::InvalidParam {
            flow: r.flow.into(),
            param: "dim".into(),
            value: raw,
            reason: "must be 2 or 3",
        });
    }
    let dim = raw as usize;
    Ok(FlowField {
        name: r.flow.into(),
        dim,
        params: r.resolved(&[("dim", raw)]),
        spatial_period: vec![1.0; dim],
        time_period: None,
        kind: FlowKind::Zero { dim },
    })
}

/// Spatial and temporal periods of a field. Steady fields use any positive
/// time period.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Periodicity<const D: usize> {
    pub spatial: [f64; D],
    pub time: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct StructureReport {
    pub max_abs_divergence: f64,
    pub max_abs_diag_jacobian: f64,
    pub max_abs_mean: f64,
}

impl StructureReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_abs_divergence < tol && self.max_abs_diag_jacobian < tol && self.max_abs_mean < tol
    }
}

/// Quadrature nodes used for the mean-zero check: 2^10 in total over the
/// `D - 1` coordinates a component is averaged over.
fn mean_nodes_per_dim(dim: usize) -> usize {
    let free = dim.saturating_sub(1).max(1) as f64;
    (1024f64.powf(1.0 / free)).round() as usize
}

/// Diagnoses the structural assumptions of the splitting schemes.
///
/// Samples are taken on a Kronecker (R-sequence) low-discrepancy set over one
/// space-time period. Divergence and the Jacobian diagonal come from central
/// differences with step `h`. The mean of each component `v_i` is taken over
/// the torus of the coordinates other than `x_i` with the periodic trapezoid
/// rule.
pub fn check_structure<const D: usize, F: VelocityField<D>>(
    flow: &F,
    period: &Periodicity<D>,
    n_samples: usize,
    h: f64,
) -> StructureReport {
    let mut report = StructureReport::default();
    let points = kronecker_points(D + 1, n_samples);
    let nodes = mean_nodes_per_dim(D);

    for u in &points {
        let t = u[0] * period.time;
        let x: [f64; D] = std::array::from_fn(|i| u[i + 1] * period.spatial[i]);
        let frozen = flow.freeze(t);

        let mut div = 0.0;
        for i in 0..D {
            let mut plus = x;
            let mut minus = x;
            plus[i] += h;
            minus[i] -= h;
            let d_ii = (frozen.component(i, &plus) - frozen.component(i, &minus)) / (2.0 * h);
            div += d_ii;
            report.max_abs_diag_jacobian = report.max_abs_diag_jacobian.max(d_ii.abs());
        }
        report.max_abs_divergence = report.max_abs_divergence.max(div.abs());

        for i in 0..D {
            let mean = torus_mean(&frozen, i, &x, &period.spatial, nodes);
            report.max_abs_mean = report.max_abs_mean.max(mean.abs());
        }
    }
    report
}

/// Mean of component `i` over all coordinates except `x_i`, which stays at
/// `x[i]`. Periodic trapezoid rule with `nodes` points per coordinate.
fn torus_mean<const D: usize, Z: FrozenField<D>>(
    frozen: &Z,
    i: usize,
    x: &[f64; D],
    spatial: &[f64; D],
    nodes: usize,
) -> f64 {
    let free: Vec<usize> = (0..D).filter(|&j| j != i).collect();
    let total = nodes.pow(free.len() as u32);
    let mut sum = 0.0;
    let mut p = *x;
    for flat in 0..total {
        let mut rem = flat;
        for &j in &free {
            let node = rem % nodes;
            rem /= nodes;
            p[j] = spatial[j] * node as f64 / nodes as f64;
        }
        sum += frozen.component(i, &p);
    }
    sum / total as f64
}

/// Additive-recurrence low-discrepancy points in `[0,1)^dim` using the
/// generalized golden ratio.
pub fn kronecker_points(dim: usize, n: usize) -> Vec<Vec<f64>> {
    // root of x^(dim+1) = x + 1
    let mut phi = 2.0f64;
    for _ in 0..64 {
        phi = (1.0 + phi).powf(1.0 / (dim as f64 + 1.0));
    }
    let alpha: Vec<f64> = (1..=dim).map(|j| phi.powi(-(j as i32)).fract()).collect();
    (0..n)
        .map(|k| {
            alpha
                .iter()
                .map(|a| (0.5 + a * (k as f64 + 1.0)).fract())
                .collect()
        })
        .collect()
}
