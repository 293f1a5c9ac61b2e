//! One-step maps for `dX = v(t, X) dt + Σ dW`.
//!
//! A step is a deterministic transport sub-step followed by the additive
//! noise `Σ·dW`. The splitting schemes evaluate the velocity at the midpoint
//! time `t + Δt/2` of the step being taken and update the coordinates one at
//! a time, each update seeing the already-advanced earlier coordinates. Since
//! `v_i` never depends on `x_i`, every sub-update is a shear and the
//! transport map preserves volume exactly.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::flows::{FrozenField, Lanes, VelocityField};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum IntegratorError {
    #[error("unknown integrator `{0}` (known: split2d, splitnd, euler)")]
    UnknownScheme(String),
    #[error("integrator `split2d` needs a 2-dimensional flow, got dimension {0}")]
    NotTwoDimensional(usize),
    #[error("diffusion coefficient must be finite and non-negative, got {0}")]
    NegativeSigma(f64),
    #[error("diffusion matrix must be {expected}x{expected}")]
    MatrixShape { expected: usize },
    #[error("diffusion matrix is singular (|det| = {0:e})")]
    SingularMatrix(f64),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ParticleState<const D: usize> {
    /// Unwrapped position, never reduced to the torus.
    pub x: [f64; D],
    pub x0: [f64; D],
    pub t: f64,
}

impl<const D: usize> ParticleState<D> {
    pub fn new(x: [f64; D], t: f64) -> Self {
        Self { x, x0: x, t }
    }

    pub fn displacement(&self) -> [f64; D] {
        std::array::from_fn(|i| self.x[i] - self.x0[i])
    }

    pub fn is_finite(&self) -> bool {
        self.t.is_finite() && self.x.iter().all(|v| v.is_finite())
    }
}

/// Brownian increment over one step: each entry is `√Δt · N(0,1)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseIncrement<const D: usize> {
    pub dw: [f64; D],
}

impl<const D: usize> NoiseIncrement<D> {
    pub fn zero() -> Self {
        Self { dw: [0.0; D] }
    }

    pub fn from_normals(xi: [f64; D], dt: f64) -> Self {
        let s = dt.sqrt();
        Self {
            dw: xi.map(|v| s * v),
        }
    }
}

/// Constant additive diffusion `Σ`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Diffusion<const D: usize> {
    /// `Σ = σ I`.
    Scalar(f64),
    /// Full non-singular matrix, row-major.
    Matrix([[f64; D]; D]),
}

impl<const D: usize> Diffusion<D> {
    pub fn scalar(sigma: f64) -> Result<Self, IntegratorError> {
        if sigma.is_finite() && sigma >= 0.0 {
            Ok(Self::Scalar(sigma))
        } else {
            Err(IntegratorError::NegativeSigma(sigma))
        }
    }

    pub fn from_d0(d0: f64) -> Result<Self, IntegratorError> {
        Self::scalar((2.0 * d0).sqrt())
    }

    pub fn matrix(rows: [[f64; D]; D]) -> Result<Self, IntegratorError> {
        let m = DMatrix::from_fn(D, D, |i, j| rows[i][j]);
        let det = m.determinant();
        let scale = rows.iter().flatten().fold(0.0f64, |a, v| a.max(v.abs()));
        if !det.is_finite() || det.abs() <= 1e-12 * scale.powi(D as i32) || scale == 0.0 {
            return Err(IntegratorError::SingularMatrix(det.abs()));
        }
        Ok(Self::Matrix(rows))
    }

    /// Molecular diffusivity `σ²/2` for the scalar case.
    pub fn d0(&self) -> Option<f64> {
        match self {
            Self::Scalar(s) => Some(0.5 * s * s),
            Self::Matrix(_) => None,
        }
    }

    pub fn is_zero(&self) -> bool {
        match self {
            Self::Scalar(s) => *s == 0.0,
            Self::Matrix(_) => false,
        }
    }

    #[inline]
    pub fn apply(&self, x: &mut [f64; D], dw: &[f64; D]) {
        match self {
            Self::Scalar(s) => {
                for i in 0..D {
                    x[i] += s * dw[i];
                }
            }
            Self::Matrix(m) => {
                for i in 0..D {
                    let mut acc = 0.0;
                    for j in 0..D {
                        acc += m[i][j] * dw[j];
                    }
                    x[i] += acc;
                }
            }
        }
    }

    /// [`Diffusion::apply`] on four particles, same operation order.
    #[inline]
    pub fn apply_lanes(&self, x: &mut [Lanes; D], dw: &[Lanes; D]) {
        match self {
            Self::Scalar(s) => {
                for i in 0..D {
                    x[i] += dw[i] * *s;
                }
            }
            Self::Matrix(m) => {
                for i in 0..D {
                    let mut acc = Lanes::ZERO;
                    for j in 0..D {
                        acc += dw[j] * m[i][j];
                    }
                    x[i] += acc;
                }
            }
        }
    }
}

/// Deterministic transport sub-step of a scheme.
pub trait Transport<const D: usize>: Copy + Send + Sync {
    /// Time at which the velocity is frozen for a step starting at `t`.
    fn eval_time(&self, t: f64, dt: f64) -> f64;

    /// Transport of four independent particles.
    fn transport_lanes<Z: FrozenField<D>>(&self, frozen: &Z, dt: f64, x: &mut [Lanes; D]);

    #[inline]
    fn transport<Z: FrozenField<D>>(&self, frozen: &Z, dt: f64, x: &mut [f64; D]) {
        let mut lanes = x.map(Lanes::splat);
        self.transport_lanes(frozen, dt, &mut lanes);
        *x = lanes.map(|v| v.to_array()[0]);
    }

    fn step<F: VelocityField<D>>(
        &self,
        flow: &F,
        s: &ParticleState<D>,
        dt: f64,
        diffusion: &Diffusion<D>,
        noise: &NoiseIncrement<D>,
    ) -> ParticleState<D> {
        let frozen = flow.freeze(self.eval_time(s.t, dt));
        let mut x = s.x;
        self.transport(&frozen, dt, &mut x);
        diffusion.apply(&mut x, &noise.dw);
        ParticleState {
            x,
            x0: s.x0,
            t: s.t + dt,
        }
    }
}

/// Symplectic Euler with frozen midpoint time, for 2D flows.
#[derive(Debug, Clone, Copy, Default)]
pub struct SymplecticSplit2d;

impl Transport<2> for SymplecticSplit2d {
    #[inline]
    fn eval_time(&self, t: f64, dt: f64) -> f64 {
        t + 0.5 * dt
    }

    #[inline]
    fn transport_lanes<Z: FrozenField<2>>(&self, frozen: &Z, dt: f64, x: &mut [Lanes; 2]) {
        let x1 = x[0] + frozen.component_lanes(0, x) * dt;
        let x2 = x[1] + frozen.component_lanes(1, &[x1, x[1]]) * dt;
        *x = [x1, x2];
    }
}

/// Sequential shear sweep over all coordinates (volume preserving in any
/// dimension).
#[derive(Debug, Clone, Copy, Default)]
pub struct VolumePreservingSplit;

impl<const D: usize> Transport<D> for VolumePreservingSplit {
    #[inline]
    fn eval_time(&self, t: f64, dt: f64) -> f64 {
        t + 0.5 * dt
    }

    #[inline]
    fn transport_lanes<Z: FrozenField<D>>(&self, frozen: &Z, dt: f64, x: &mut [Lanes; D]) {
        for i in 0..D {
            let v = frozen.component_lanes(i, x);
            x[i] += v * dt;
        }
    }
}

/// Explicit Euler–Maruyama, velocity at the start of the step.
#[derive(Debug, Clone, Copy, Default)]
pub struct EulerMaruyama;

impl<const D: usize> Transport<D> for EulerMaruyama {
    #[inline]
    fn eval_time(&self, t: f64, _dt: f64) -> f64 {
        t
    }

    #[inline]
    fn transport_lanes<Z: FrozenField<D>>(&self, frozen: &Z, dt: f64, x: &mut [Lanes; D]) {
        let v: [Lanes; D] = std::array::from_fn(|i| frozen.component_lanes(i, x));
        for i in 0..D {
            x[i] += v[i] * dt;
        }
    }
}

/// Integrator selected by name in configuration files.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scheme {
    Split2d,
    SplitNd,
    Euler,
}

impl Scheme {
    pub fn name(self) -> &'static str {
        match self {
            Scheme::Split2d => "split2d",
            Scheme::SplitNd => "splitnd",
            Scheme::Euler => "euler",
        }
    }

    pub fn supports_dim(self, dim: usize) -> Result<(), IntegratorError> {
        match self {
            Scheme::Split2d if dim != 2 => Err(IntegratorError::NotTwoDimensional(dim)),
            _ => Ok(()),
        }
    }
}

impl std::str::FromStr for Scheme {
    type Err = IntegratorError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "split2d" => Ok(Scheme::Split2d),
            "splitnd" => Ok(Scheme::SplitNd),
            "euler" => Ok(Scheme::Euler),
            other => Err(IntegratorError::UnknownScheme(other.to_string())),
        }
    }
}

impl std::fmt::Display for Scheme {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// The 2D stochastic symplectic splitting step, written out term by term:
///
/// ```text
/// x1' = x1 + v1(t + Δt/2, x2) Δt + σ N1
/// x2' = x2 + v2(t + Δt/2, x1 + v1(t + Δt/2, x2) Δt) Δt + σ N2
/// ```
pub fn step_2d_splitting<F: VelocityField<2>>(
    s: &ParticleState<2>,
    dt: f64,
    flow: &F,
    sigma: f64,
    noise: &NoiseIncrement<2>,
) -> ParticleState<2> {
    let frozen = flow.freeze(s.t + 0.5 * dt);
    let [x1, x2] = s.x;
    let shifted = x1 + frozen.component(0, &[x1, x2]) * dt;
    let x1_next = shifted + sigma * noise.dw[0];
    let x2_next = x2 + frozen.component(1, &[shifted, x2]) * dt + sigma * noise.dw[1];
    ParticleState {
        x: [x1_next, x2_next],
        x0: s.x0,
        t: s.t + dt,
    }
}

/// The d-dimensional stochastic volume-preserving splitting step.
pub fn step_nd_volume_preserving<const D: usize, F: VelocityField<D>>(
    s: &ParticleState<D>,
    dt: f64,
    flow: &F,
    diffusion: &Diffusion<D>,
    noise: &NoiseIncrement<D>,
) -> ParticleState<D> {
    VolumePreservingSplit.step(flow, s, dt, diffusion, noise)
}

pub fn step_euler_maruyama<const D: usize, F: VelocityField<D>>(
    s: &ParticleState<D>,
    dt: f64,
    flow: &F,
    diffusion: &Diffusion<D>,
    noise: &NoiseIncrement<D>,
) -> ParticleState<D> {
    EulerMaruyama.step(flow, s, dt, diffusion, noise)
}

/// Central-difference Jacobian of the noise-free one-step map `X ↦ X⁺`.
pub fn deterministic_jacobian<const D: usize, F: VelocityField<D>, S: Transport<D>>(
    stepper: &S,
    flow: &F,
    t: f64,
    x: &[f64; D],
    dt: f64,
    h: f64,
) -> DMatrix<f64> {
    let frozen = flow.freeze(stepper.eval_time(t, dt));
    let map = |mut p: [f64; D]| {
        stepper.transport(&frozen, dt, &mut p);
        p
    };
    let mut jac = DMatrix::zeros(D, D);
    for j in 0..D {
        let mut plus = *x;
        let mut minus = *x;
        plus[j] += h;
        minus[j] -= h;
        let (fp, fm) = (map(plus), map(minus));
        for i in 0..D {
            jac[(i, j)] = (fp[i] - fm[i]) / (2.0 * h);
        }
    }
    jac
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flows::{Abc3d, Chaotic2d, Forcing, Kolmogorov3d, ZeroFlow};

    #[derive(Clone, Copy)]
    struct Constant(f64, f64);
    impl VelocityField<2> for Constant {
        type Frozen = Constant;
        fn freeze(&self, _t: f64) -> Constant {
            *self
        }
    }
    impl FrozenField<2> for Constant {
        fn component_lanes(&self, i: usize, _x: &[Lanes; 2]) -> Lanes {
            Lanes::splat(if i == 0 { self.0 } else { self.1 })
        }
    }

    fn abc(eps: f64) -> Abc3d {
        Abc3d {
            a: 1.0,
            b: 1.0,
            c: 1.0,
            forcing: Forcing::unit_period(eps),
        }
    }

    #[test]
    fn zero_flow_without_noise_only_advances_time() {
        let s = ParticleState::new([0.3, -1.2], 2.0);
        let next = step_2d_splitting(&s, 0.1, &ZeroFlow, 0.0, &NoiseIncrement::zero());
        assert_eq!(next.x, s.x);
        assert_eq!(next.t, 2.1);
    }

    #[test]
    fn constant_flow_translates() {
        let s = ParticleState::new([1.0, 2.0], 0.0);
        let flow = Constant(3.0, -4.0);
        let n = NoiseIncrement::zero();
        let expect = [2.5, 0.0];
        assert_eq!(step_2d_splitting(&s, 0.5, &flow, 0.0, &n).x, expect);
        let d = Diffusion::Scalar(0.0);
        assert_eq!(step_euler_maruyama(&s, 0.5, &flow, &d, &n).x, expect);
        assert_eq!(step_nd_volume_preserving(&s, 0.5, &flow, &d, &n).x, expect);
    }

    #[test]
    fn chaotic2d_hand_composed_step() {
        let s = ParticleState::new([0.0, 0.0], 0.0);
        let next = step_2d_splitting(&s, 0.5, &Chaotic2d, 0.0, &NoiseIncrement::zero());
        // midpoint time 0.25: sin(2π·0.25) = 1
        let x1 = 0.5 * 2f64.sin() * 2f64.cos().exp();
        let arg = 2.0 * x1 + 1.0;
        let x2 = 0.5 * arg.cos() * arg.sin().exp();
        assert!((next.x[0] - x1).abs() < 1e-15);
        assert!((next.x[1] - x2).abs() < 1e-15);
    }

    #[test]
    fn brownian_step_in_zero_flow() {
        let s = ParticleState::new([1.0, 1.0, 1.0], 0.0);
        let n = NoiseIncrement {
            dw: [0.1, -0.2, 0.3],
        };
        let next = step_nd_volume_preserving(&s, 0.01, &ZeroFlow, &Diffusion::Scalar(2.0), &n);
        assert_eq!(next.x, [1.2, 0.6, 1.6]);
        let em = step_euler_maruyama(&s, 0.01, &ZeroFlow, &Diffusion::Scalar(2.0), &n);
        assert_eq!(em.x, next.x);
    }

    #[test]
    fn kolmogorov_origin_is_fixed() {
        let flow = Kolmogorov3d {
            forcing: Forcing::unit_period(0.0),
        };
        let s = ParticleState::new([0.0; 3], 0.0);
        let next = step_nd_volume_preserving(
            &s,
            1.0,
            &flow,
            &Diffusion::Scalar(0.0),
            &NoiseIncrement::zero(),
        );
        assert_eq!(next.x, [0.0; 3]);
    }

    #[test]
    fn abc_hand_composed_sweep() {
        let s = ParticleState::new([0.0; 3], 0.0);
        let d = Diffusion::Scalar(0.0);
        let n = NoiseIncrement::zero();
        let next = step_nd_volume_preserving(&s, 0.1, &abc(0.0), &d, &n);
        let x1: f64 = 0.1;
        let x2 = 0.1 * (x1.sin() + 1.0);
        let x3 = 0.1 * (x2.sin() + x1.cos());
        assert!((next.x[0] - x1).abs() < 1e-16);
        assert!((next.x[1] - x2).abs() < 1e-16);
        assert!((next.x[2] - x3).abs() < 1e-16);

        let em = step_euler_maruyama(&s, 0.1, &abc(0.0), &d, &n);
        assert_eq!(em.x, [0.1, 0.1, 0.1]);
    }

    #[test]
    fn two_dimensional_sweep_matches_splitting_bitwise() {
        let sigma = 0.447;
        let d = Diffusion::Scalar(sigma);
        let mut s = ParticleState::new([0.1, -0.3], 0.0);
        let mut r = s;
        for k in 0..200 {
            let w = (k as f64 * 0.77).sin();
            let n = NoiseIncrement { dw: [w, -0.5 * w] };
            s = step_2d_splitting(&s, 0.05, &Chaotic2d, sigma, &n);
            r = step_nd_volume_preserving(&r, 0.05, &Chaotic2d, &d, &n);
            assert_eq!(s.x.map(f64::to_bits), r.x.map(f64::to_bits));
        }
    }

    #[test]
    fn matrix_diffusion() {
        let d = Diffusion::matrix([[1.0, 2.0], [0.0, 1.0]]).unwrap();
        let mut x = [0.0, 0.0];
        d.apply(&mut x, &[1.0, 1.0]);
        assert_eq!(x, [3.0, 1.0]);
        assert!(matches!(
            Diffusion::matrix([[1.0, 2.0], [2.0, 4.0]]),
            Err(IntegratorError::SingularMatrix(_))
        ));
        assert!(Diffusion::<2>::scalar(-1.0).is_err());
        assert_eq!(Diffusion::<2>::from_d0(0.5).unwrap().d0(), Some(0.5));
    }

    #[test]
    fn scheme_names_round_trip() {
        for s in [Scheme::Split2d, Scheme::SplitNd, Scheme::Euler] {
            assert_eq!(s.name().parse::<Scheme>().unwrap(), s);
        }
        assert!("rk4".parse::<Scheme>().is_err());
        assert!(Scheme::Split2d.supports_dim(3).is_err());
    }

    #[test]
    fn euler_is_not_volume_preserving() {
        let flow = abc(0.0);
        let jac = deterministic_jacobian(&EulerMaruyama, &flow, 0.0, &[0.4, 1.1, 2.3], 0.1, 1e-5);
        assert!((jac.determinant() - 1.0).abs() > 1e-6);
    }
}
