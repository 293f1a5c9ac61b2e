//! Ground truth for validating the Monte Carlo pipeline.

use crate::analysis::{effective_diffusivity, AnalysisError, DiffusivityReport};
use crate::config::SimulationConfig;
use crate::ensemble::{run_ensemble, ExecOptions};
use crate::rng::mix_seed;

/// Steady shear `v = (a sin(k x2), 0)` with molecular diffusivity `D0`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ShearFlowSpec {
    pub amplitude: f64,
    pub wavenumber: f64,
    pub d0: f64,
}

/// `D11 = D0 + a² / (2 D0 k²)`.
///
/// The corrector solves `D0 χ'' = −a sin(k x2)`, so `χ = a sin(k x2)/(D0 k²)`
/// and the enhancement is `⟨v1 χ⟩ = a²/(2 D0 k²)`.
pub fn shear_effective_diffusivity(spec: &ShearFlowSpec) -> f64 {
    let ShearFlowSpec {
        amplitude: a,
        wavenumber: k,
        d0,
    } = *spec;
    d0 + a * a / (2.0 * d0 * k * k)
}

/// Effective diffusivity matrix without advection: `D0·I`, row-major.
pub fn zero_flow_diffusivity(d0: f64, dim: usize) -> Vec<f64> {
    let mut m = vec![0.0; dim * dim];
    for i in 0..dim {
        m[i * dim + i] = d0;
    }
    m
}

/// Seed tag for reference runs.
const REFERENCE_STREAM: u64 = 0x5EF_E2E7CE;

/// Reruns `config` at `Δt / refinement` with the same particle count and an
/// independent seed; the report is tagged as a reference.
pub fn reference_run(
    config: &SimulationConfig,
    refinement: u32,
    exec: &ExecOptions,
) -> Result<DiffusivityReport, AnalysisError> {
    if refinement < 8 {
        return Err(AnalysisError::Invalid(format!(
            "reference refinement must be at least 8, got {refinement}"
        )));
    }
    let mut fine = config.clone();
    fine.dt = config.dt / refinement as f64;
    fine.master_seed = mix_seed(config.master_seed, REFERENCE_STREAM);
    let mut report = effective_diffusivity(&run_ensemble(&fine, exec)?)?;
    report.reference = true;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::{PI, TAU};

    #[test]
    fn no_convection_no_enhancement() {
        let s = ShearFlowSpec {
            amplitude: 0.0,
            wavenumber: 3.0,
            d0: 0.37,
        };
        assert_eq!(shear_effective_diffusivity(&s), 0.37);
    }

    #[test]
    fn shear_values() {
        let d = |d0| {
            shear_effective_diffusivity(&ShearFlowSpec {
                amplitude: 1.0,
                wavenumber: TAU,
                d0,
            })
        };
        assert!((d(0.1) - (0.1 + 1.0 / (0.8 * PI * PI))).abs() < 1e-15);
        assert!((d(0.1) - 0.22665).abs() < 1e-5);
        assert!((d(1.0) - 1.01267).abs() < 1e-5);
    }

    #[test]
    fn shear_enhancement_is_maximal() {
        // D11 − D0 ∝ 1/D0 exactly
        let e = |d0: f64| {
            shear_effective_diffusivity(&ShearFlowSpec {
                amplitude: 1.0,
                wavenumber: TAU,
                d0,
            }) - d0
        };
        let slope = (e(1e-6).ln() - e(1e-3).ln()) / (1e-6f64.ln() - 1e-3f64.ln());
        assert!((slope + 1.0).abs() < 1e-12);
        // and the total tends to slope −1 as D0 → 0
        let total = |d0: f64| {
            shear_effective_diffusivity(&ShearFlowSpec {
                amplitude: 1.0,
                wavenumber: TAU,
                d0,
            })
        };
        let slope = (total(1e-7).ln() - total(1e-6).ln()) / (1e-7f64.ln() - 1e-6f64.ln());
        assert!((slope + 1.0).abs() < 1e-9);
    }

    #[test]
    fn zero_flow_matrix() {
        assert_eq!(zero_flow_diffusivity(0.1, 2), vec![0.1, 0.0, 0.0, 0.1]);
        assert!(zero_flow_diffusivity(0.0, 3).iter().all(|&v| v == 0.0));
        let m = zero_flow_diffusivity(1e-5, 3);
        assert_eq!((m[0], m[4], m[8]), (1e-5, 1e-5, 1e-5));
    }
}
