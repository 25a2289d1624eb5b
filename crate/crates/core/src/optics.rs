//! Polarization optics of a spin-selective dipole in a bad cavity.
//!
//! Light is described by Jones vectors in the circular `{R, L}` basis. The
//! cavity is adiabatically eliminated, so the emitter enters only through the
//! single-pole reflection amplitude `r(δ) = 1 − 2β / (1 + 2iδ/Γ)` on the
//! circular component it couples to. Everything here is a pure function of
//! its arguments.

use std::f64::consts::{FRAC_1_SQRT_2, PI};

use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Below this magnitude the reflected amplitude carries no usable phase.
pub const UNDEFINED_PHASE_MAGNITUDE: f64 = 1e-12;

/// FWHM of a Gaussian in units of its standard deviation, `2√(2 ln 2)`.
pub const GAUSSIAN_FWHM_PER_SIGMA: f64 = 2.354_820_045_030_949_3;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OpticsError {
    #[error("invalid reflection model: {field} {reason}")]
    InvalidModel { field: &'static str, reason: String },
    #[error("phase undefined: |r| = {magnitude:e} at critical coupling")]
    UndefinedPhase { magnitude: f64 },
    #[error("{name} must be positive, got {value}")]
    NonPositive { name: &'static str, value: f64 },
    #[error("cavity metadata inconsistent: mode_energy/mode_fwhm = {ratio:.1} vs Q = {q_factor:.1}")]
    InconsistentCavity { ratio: f64, q_factor: f64 },
}

/// Ground-state spin of the charged dot.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Spin {
    Up,
    Down,
}

impl Spin {
    pub fn flipped(self) -> Self {
        match self {
            Spin::Up => Spin::Down,
            Spin::Down => Spin::Up,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Spin::Up => "up",
            Spin::Down => "down",
        }
    }
}

impl std::str::FromStr for Spin {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "up" => Ok(Spin::Up),
            "down" => Ok(Spin::Down),
            other => Err(format!("unknown spin state `{other}`")),
        }
    }
}

/// Emitter and collection parameters that fix the complex reflection
/// amplitude. Energies are in µeV.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReflectionModel {
    /// Fraction of the emitter decay into the cavity mode.
    pub beta: f64,
    /// Total transition linewidth in µeV.
    #[serde(rename = "gamma_total_ueV")]
    pub gamma_total: f64,
    /// Incoherent, V-polarized fraction of the collected light that never
    /// reached the emitter.
    pub background_fraction: f64,
    /// Ground-state Zeeman splitting in µeV.
    #[serde(rename = "zeeman_split_ueV")]
    pub zeeman_split: f64,
    /// Intensity loss of the bare cavity reflection. Zero means the
    /// uncoupled circular component is reflected with unit amplitude.
    #[serde(default)]
    pub mirror_loss: f64,
}

impl Default for ReflectionModel {
    fn default() -> Self {
        Self {
            beta: 0.65,
            gamma_total: 0.7,
            background_fraction: 0.2,
            zeeman_split: 40.0,
            mirror_loss: 0.0,
        }
    }
}

impl ReflectionModel {
    pub fn new(beta: f64, gamma_total: f64, background_fraction: f64, zeeman_split: f64) -> Result<Self, OpticsError> {
        let model = Self { beta, gamma_total, background_fraction, zeeman_split, mirror_loss: 0.0 };
        model.validate()?;
        Ok(model)
    }

    pub fn validate(&self) -> Result<(), OpticsError> {
        let bad = |field, reason: &str| Err(OpticsError::InvalidModel { field, reason: reason.to_owned() });
        if !(0.0..=1.0).contains(&self.beta) {
            return bad("beta", "must lie in [0, 1]");
        }
        if !(self.gamma_total > 0.0 && self.gamma_total.is_finite()) {
            return bad("gamma_total_ueV", "must be positive and finite");
        }
        if !(0.0..1.0).contains(&self.background_fraction) {
            return bad("background_fraction", "must lie in [0, 1)");
        }
        if !(self.zeeman_split >= 0.0 && self.zeeman_split.is_finite()) {
            return bad("zeeman_split_ueV", "must be non-negative and finite");
        }
        if !(0.0..1.0).contains(&self.mirror_loss) {
            return bad("mirror_loss", "must lie in [0, 1)");
        }
        Ok(())
    }

    fn mirror_amplitude(&self) -> f64 {
        (1.0 - self.mirror_loss).sqrt()
    }

    /// Complex reflection amplitude of the coupled circular component at
    /// laser–dot detuning `delta` (µeV).
    ///
    /// Written out in real and imaginary parts so that `r(0)` has an exactly
    /// zero (positive) imaginary part.
    pub fn reflection_amplitude(&self, delta: f64) -> Complex64 {
        let x = 2.0 * delta / self.gamma_total;
        let denom = 1.0 + x * x;
        let re = 1.0 - 2.0 * self.beta / denom;
        let im = 2.0 * self.beta * x / denom;
        Complex64::new(re, im) * self.mirror_amplitude()
    }

    /// Applies the spin-selective reflection to `input`.
    ///
    /// Only `|L⟩` couples to the spin-down transition. For spin up the same
    /// dipole response is displaced by the full Zeeman splitting.
    pub fn reflect(&self, input: JonesVector, delta: f64, spin: Spin) -> JonesVector {
        let effective = match spin {
            Spin::Down => delta,
            Spin::Up => delta + self.zeeman_split,
        };
        JonesVector {
            amp_r: input.amp_r * self.mirror_amplitude(),
            amp_l: input.amp_l * self.reflection_amplitude(effective),
        }
    }

    /// Background-diluted analyzer intensities for a unit V input.
    ///
    /// The background adds `b` to the V channel incoherently and scales the
    /// reflected signal by `1 − b`.
    pub fn diluted_projections(&self, delta: f64, spin: Spin) -> DetectorIntensities {
        let signal = project_vh(self.reflect(JonesVector::vertical(), delta, spin));
        let b = self.background_fraction;
        DetectorIntensities { v: (1.0 - b) * signal.v + b, h: (1.0 - b) * signal.h }
    }

    /// Linear-basis lower-bound phase `arccos[(V̄ − H̄)/(V̄ + H̄)]` the model
    /// predicts for spin down, in `[0, π]`.
    pub fn analytic_phase_lb(&self, delta: f64) -> f64 {
        let i = self.diluted_projections(delta, Spin::Down);
        (i.cos_phase()).acos()
    }

    /// Principal argument of `r(δ)` in `(−π, π]`.
    pub fn exact_phase(&self, delta: f64) -> Result<f64, OpticsError> {
        let r = self.reflection_amplitude(delta);
        let magnitude = r.norm();
        if magnitude < UNDEFINED_PHASE_MAGNITUDE {
            return Err(OpticsError::UndefinedPhase { magnitude });
        }
        let arg = r.arg();
        Ok(if arg <= -PI { PI } else { arg })
    }

    /// Largest `|δ|` for which `analytic_phase_lb` stays at or above
    /// `threshold` (radians), or `None` if even the resonant value falls
    /// short. The phase is maximal at `δ = 0` and even in `δ`.
    pub fn phase_window_halfwidth(&self, threshold: f64) -> Option<f64> {
        if self.analytic_phase_lb(0.0) < threshold {
            return None;
        }
        let (mut lo, mut hi) = (0.0, self.gamma_total);
        while self.analytic_phase_lb(hi) >= threshold {
            hi *= 2.0;
            if hi > 1e6 * self.gamma_total {
                return Some(f64::INFINITY);
            }
        }
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if self.analytic_phase_lb(mid) >= threshold {
                lo = mid;
            } else {
                hi = mid;
            }
            if hi - lo <= 1e-15 * self.gamma_total {
                break;
            }
        }
        Some(lo)
    }
}

/// Two complex amplitudes in the circular basis.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct JonesVector {
    pub amp_r: Complex64,
    pub amp_l: Complex64,
}

impl JonesVector {
    pub fn new(amp_r: Complex64, amp_l: Complex64) -> Self {
        Self { amp_r, amp_l }
    }

    /// `|V⟩ = (|R⟩ − i|L⟩)/√2`
    pub fn vertical() -> Self {
        Self::new(Complex64::new(FRAC_1_SQRT_2, 0.0), Complex64::new(0.0, -FRAC_1_SQRT_2))
    }

    /// `|H⟩ = (|R⟩ + i|L⟩)/√2`
    pub fn horizontal() -> Self {
        Self::new(Complex64::new(FRAC_1_SQRT_2, 0.0), Complex64::new(0.0, FRAC_1_SQRT_2))
    }

    pub fn norm_sqr(&self) -> f64 {
        self.amp_r.norm_sqr() + self.amp_l.norm_sqr()
    }
}

/// Intensities behind the V and H analyzers.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DetectorIntensities {
    pub v: f64,
    pub h: f64,
}

impl DetectorIntensities {
    pub fn total(&self) -> f64 {
        self.v + self.h
    }

    /// `(V − H)/(V + H)`, clamped to `[−1, 1]`.
    pub fn cos_phase(&self) -> f64 {
        ((self.v - self.h) / (self.v + self.h)).clamp(-1.0, 1.0)
    }
}

/// Projects onto the linear analyzers with `⟨V| = (⟨R| + i⟨L|)/√2` and
/// `⟨H| = (⟨R| − i⟨L|)/√2`.
pub fn project_vh(state: JonesVector) -> DetectorIntensities {
    let i = Complex64::i();
    let v = (state.amp_r + i * state.amp_l) * FRAC_1_SQRT_2;
    let h = (state.amp_r - i * state.amp_l) * FRAC_1_SQRT_2;
    DetectorIntensities { v: v.norm_sqr(), h: h.norm_sqr() }
}

/// Probability mass of a zero-mean Gaussian of the given FWHM inside
/// `±window_halfwidth`. Both arguments in the same energy unit; infinite
/// values are accepted as limits.
pub fn resonance_dwell_fraction(inhomogeneous_fwhm: f64, window_halfwidth: f64) -> Result<f64, OpticsError> {
    if !(inhomogeneous_fwhm > 0.0) {
        return Err(OpticsError::NonPositive { name: "inhomogeneous_fwhm", value: inhomogeneous_fwhm });
    }
    if !(window_halfwidth > 0.0) {
        return Err(OpticsError::NonPositive { name: "window_halfwidth", value: window_halfwidth });
    }
    if window_halfwidth.is_infinite() {
        return Ok(1.0);
    }
    if inhomogeneous_fwhm.is_infinite() {
        return Ok(0.0);
    }
    let sigma = inhomogeneous_fwhm / GAUSSIAN_FWHM_PER_SIGMA;
    Ok(libm::erf(window_halfwidth / (sigma * std::f64::consts::SQRT_2)))
}

/// Passive cavity metadata. Not used by the dynamics, only cross-checked.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CavitySpec {
    pub q_factor: f64,
    #[serde(rename = "mode_energy_meV")]
    pub mode_energy: f64,
    #[serde(rename = "mode_fwhm_meV")]
    pub mode_fwhm: f64,
}

impl Default for CavitySpec {
    fn default() -> Self {
        Self { q_factor: 290.0, mode_energy: 1388.0, mode_fwhm: 4.1 }
    }
}

impl CavitySpec {
    pub const TOLERANCE: f64 = 0.05;

    /// Relative mismatch between the quoted Q and `mode_energy / mode_fwhm`.
    pub fn mismatch(&self) -> f64 {
        (self.mode_energy / self.mode_fwhm - self.q_factor).abs() / self.q_factor
    }

    pub fn check(&self) -> Result<(), OpticsError> {
        if self.mismatch() <= Self::TOLERANCE {
            Ok(())
        } else {
            Err(OpticsError::InconsistentCavity { ratio: self.mode_energy / self.mode_fwhm, q_factor: self.q_factor })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model(beta: f64, b: f64) -> ReflectionModel {
        ReflectionModel::new(beta, 0.7, b, 40.0).unwrap()
    }

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn resonant_amplitudes() {
        assert_eq!(model(1.0, 0.0).reflection_amplitude(0.0), Complex64::new(-1.0, 0.0));
        assert_eq!(model(0.5, 0.0).reflection_amplitude(0.0), Complex64::new(0.0, 0.0));
        let r = model(0.65, 0.0).reflection_amplitude(0.0);
        assert!(close(r.re, -0.3, 1e-15) && r.im == 0.0);
        let far = model(0.65, 0.0).reflection_amplitude(1e9);
        assert!((far - Complex64::new(1.0, 0.0)).norm() < 1e-8);
    }

    #[test]
    fn giant_faraday_rotation_maps_v_to_h() {
        let out = model(1.0, 0.0).reflect(JonesVector::vertical(), 0.0, Spin::Down);
        let i = project_vh(out);
        assert!(close(i.v, 0.0, 1e-15) && close(i.h, 1.0, 1e-15));
        // Same ray up to global phase: |⟨H|out⟩| = 1.
        let h = JonesVector::horizontal();
        let overlap = h.amp_r.conj() * out.amp_r + h.amp_l.conj() * out.amp_l;
        assert!(close(overlap.norm(), 1.0, 1e-15));
    }

    #[test]
    fn spin_up_is_detuned() {
        let m = model(0.65, 0.0);
        assert!((m.reflection_amplitude(40.0) - 1.0).norm() < 0.02);
        let out = m.reflect(JonesVector::vertical(), 0.0, Spin::Up);
        let i = project_vh(out);
        assert!(i.v > 0.999);
    }

    #[test]
    fn partial_coupling_projections() {
        let out = model(0.65, 0.0).reflect(JonesVector::vertical(), 0.0, Spin::Down);
        let i = project_vh(out);
        assert!(close(i.v, 0.1225, 1e-12));
        assert!(close(i.h, 0.4225, 1e-12));
        assert!(close(i.h / i.v, (1.3f64 / 0.7).powi(2), 1e-12));
    }

    #[test]
    fn basis_projections() {
        let v = project_vh(JonesVector::vertical());
        let h = project_vh(JonesVector::horizontal());
        assert!(close(v.v, 1.0, 1e-15) && close(v.h, 0.0, 1e-15));
        assert!(close(h.v, 0.0, 1e-15) && close(h.h, 1.0, 1e-15));
    }

    #[test]
    fn analytic_lower_bound_values() {
        assert!(close(model(1.0, 0.0).analytic_phase_lb(0.0), PI, 1e-12));
        let with_background = model(1.0, 0.2).analytic_phase_lb(0.0);
        assert!(close(with_background, (-0.6f64).acos(), 1e-12));
        assert!(close(with_background / PI, 0.7048, 1e-4));
        let partial = model(0.65, 0.0).analytic_phase_lb(0.0);
        assert!(close(partial.cos(), -0.6 / 1.09, 1e-12));
        assert!(close(partial / PI, 0.6855, 1e-4));
    }

    #[test]
    fn exact_phase_values() {
        assert_eq!(model(0.65, 0.0).exact_phase(0.0).unwrap(), PI);
        assert_eq!(model(0.3, 0.0).exact_phase(0.0).unwrap(), 0.0);
        // δ = Γ/2: r = 1 − 2β/(1+i) = 0.35 + 0.65i.
        let phase = model(0.65, 0.0).exact_phase(0.35).unwrap();
        assert!(close(phase, 0.65f64.atan2(0.35), 1e-12));
        assert!(close(phase / PI, 0.3428, 1e-3));
        assert!(matches!(model(0.5, 0.0).exact_phase(0.0), Err(OpticsError::UndefinedPhase { .. })));
    }

    #[test]
    fn dwell_fraction_limits_and_values() {
        assert_eq!(resonance_dwell_fraction(f64::INFINITY, 0.015).unwrap(), 0.0);
        assert_eq!(resonance_dwell_fraction(5.0, f64::INFINITY).unwrap(), 1.0);
        assert!(resonance_dwell_fraction(1e6, 0.015).unwrap() < 1e-7);
        assert!(resonance_dwell_fraction(0.01, 10.0).unwrap() > 1.0 - 1e-12);
        let f = resonance_dwell_fraction(5.0, 0.015).unwrap();
        assert!(close(f, 5.637e-3, 2e-6), "{f}");
        assert!(f <= 1e-2);
        // ±half FWHM of a Gaussian holds 76.1 % of the mass.
        assert!(close(resonance_dwell_fraction(0.7, 0.35).unwrap(), 0.7610, 1e-4));
        assert!(resonance_dwell_fraction(0.0, 1.0).is_err());
        assert!(resonance_dwell_fraction(1.0, -1.0).is_err());
    }

    #[test]
    fn phase_window_for_perfect_coupling() {
        // β = 1, b = 0: cos φ_LB = (x² − 1)/(x² + 1) with x = 2δ/Γ.
        let m = model(1.0, 0.0);
        let threshold = 0.95 * PI;
        let c = threshold.cos();
        let x = ((1.0 + c) / (1.0 - c)).sqrt();
        let expected = x * 0.7 / 2.0;
        let got = m.phase_window_halfwidth(threshold).unwrap();
        assert!(close(got, expected, 1e-12), "{got} vs {expected}");
        assert!(model(0.65, 0.2).phase_window_halfwidth(threshold).is_none());
    }

    #[test]
    fn invalid_models_rejected() {
        assert!(ReflectionModel::new(1.1, 0.7, 0.2, 40.0).is_err());
        assert!(ReflectionModel::new(0.5, 0.0, 0.2, 40.0).is_err());
        assert!(ReflectionModel::new(0.5, 0.7, 1.0, 40.0).is_err());
        assert!(ReflectionModel::new(0.5, 0.7, 0.2, -1.0).is_err());
    }

    #[test]
    fn quoted_cavity_metadata_is_inconsistent() {
        let quoted = CavitySpec::default();
        assert!(quoted.mismatch() > 0.15);
        assert!(quoted.check().is_err());
        let consistent = CavitySpec { q_factor: 290.0, mode_energy: 1388.0, mode_fwhm: 1388.0 / 290.0 };
        assert!(consistent.check().is_ok());
    }

    mod properties {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn passivity(beta in 0.0f64..=1.0, delta_over_gamma in -100.0f64..100.0) {
                let m = model(beta, 0.0);
                prop_assert!(m.reflection_amplitude(delta_over_gamma * 0.7).norm() <= 1.0 + 1e-15);
            }

            #[test]
            fn projector_completeness(rr in -1.0f64..1.0, ri in -1.0f64..1.0, lr in -1.0f64..1.0, li in -1.0f64..1.0) {
                let s = JonesVector::new(Complex64::new(rr, ri), Complex64::new(lr, li));
                let p = project_vh(s);
                prop_assert!((p.total() - s.norm_sqr()).abs() < 1e-12);
            }

            #[test]
            fn lower_bound_pulls_toward_half_pi(beta in 0.0f64..=1.0, delta in -20.0f64..20.0) {
                let m = model(beta, 0.0);
                let r = m.reflection_amplitude(delta);
                prop_assume!(r.norm() > 1e-9);
                let lb = m.analytic_phase_lb(delta).cos().abs();
                let exact = m.exact_phase(delta).unwrap().cos().abs();
                prop_assert!(lb <= exact + 1e-12);
            }

            #[test]
            fn background_dilutes_monotonically(beta in 0.51f64..=1.0, b in 0.0f64..0.49) {
                let lo = model(beta, b).analytic_phase_lb(0.0);
                let hi = model(beta, b + 0.01).analytic_phase_lb(0.0);
                prop_assert!(hi < lo);
            }
        }

        #[test]
        fn passivity_grid() {
            for beta in [0.0, 0.25, 0.5, 0.65, 0.9, 1.0] {
                let m = model(beta, 0.0);
                for k in -2000..=2000 {
                    let delta = k as f64 * 0.05 * 0.7;
                    assert!(m.reflection_amplitude(delta).norm() <= 1.0 + 1e-15);
                }
            }
        }

        #[test]
        fn asymptotic_transparency() {
            for beta in [0.25, 0.65, 1.0] {
                for b in [0.0, 0.2] {
                    let m = model(beta, b);
                    assert!(m.analytic_phase_lb(100.0 * 0.7) < 0.01 * PI);
                    assert!(m.analytic_phase_lb(-100.0 * 0.7) < 0.01 * PI);
                }
            }
        }

        #[test]
        fn equality_only_for_unit_modulus() {
            // β = 1 is lossless: |r| = 1 and the bound is tight everywhere.
            let m = model(1.0, 0.0);
            for delta in [-3.0, -0.2, 0.1, 0.5, 4.0] {
                let lb = m.analytic_phase_lb(delta).cos().abs();
                let exact = m.exact_phase(delta).unwrap().cos().abs();
                assert!((lb - exact).abs() < 1e-12);
            }
            let lossy = model(0.65, 0.0);
            let gap = lossy.exact_phase(0.1).unwrap().cos().abs() - lossy.analytic_phase_lb(0.1).cos().abs();
            assert!(gap > 1e-3);
        }
    }
}
