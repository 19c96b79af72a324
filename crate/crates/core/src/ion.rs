//! Motional heating of a trapped ion driven by electrode voltage noise.
//!
//! A voltage-noise PSD `S_V` on the control electrodes heats the axial mode
//! at
//!
//! ```text
//! dn/dt = q² · S_V / (4 · m · ħ · ω_t · D_eff²)
//! ```
//!
//! where `D_eff` converts electrode voltage to field at the ion. `D_eff` is
//! not computed from geometry here; it is fitted to measured
//! (noise, rate) pairs with [`fit_deff`].

use thiserror::Error;

use crate::constants::{ATOMIC_MASS_UNIT, CA40_MASS_U, ELEMENTARY_CHARGE, HBAR, TWO_PI};

/// Effective distance fitted to the closed-switch pair (18.2 nV/√Hz,
/// 1090 quanta/s) at 2π·1.5 MHz for 40Ca+.
pub const FITTED_D_EFF_M: f64 = 5.437_677_87e-3;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum IonError {
    #[error("invalid ion species: {0}")]
    InvalidSpecies(String),
    #[error("invalid trap mode: {0}")]
    InvalidMode(String),
    #[error("invalid measurement: {0}")]
    InvalidMeasurement(String),
    #[error("rate {rate} quanta/s is below the anomalous baseline {baseline} quanta/s")]
    Infeasible { rate: f64, baseline: f64 },
    #[error("no heating measurements to fit")]
    MissingData,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IonSpecies {
    mass_kg: f64,
    charge_c: f64,
}

impl IonSpecies {
    pub fn new(mass_kg: f64, charge_c: f64) -> Result<Self, IonError> {
        if !(mass_kg > 0.0 && mass_kg.is_finite() && charge_c > 0.0 && charge_c.is_finite()) {
            return Err(IonError::InvalidSpecies(format!(
                "mass={mass_kg} kg, charge={charge_c} C"
            )));
        }
        Ok(IonSpecies { mass_kg, charge_c })
    }

    pub fn calcium40() -> Self {
        IonSpecies {
            mass_kg: CA40_MASS_U * ATOMIC_MASS_UNIT,
            charge_c: ELEMENTARY_CHARGE,
        }
    }

    pub fn mass_kg(&self) -> f64 {
        self.mass_kg
    }

    pub fn charge_c(&self) -> f64 {
        self.charge_c
    }
}

impl Default for IonSpecies {
    fn default() -> Self {
        Self::calcium40()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrapMode {
    omega_t: f64,
    d_eff: f64,
    anomalous_baseline: f64,
}

impl TrapMode {
    pub fn new(omega_t: f64, d_eff: f64, anomalous_baseline: f64) -> Result<Self, IonError> {
        if !(omega_t > 0.0 && omega_t.is_finite()) {
            return Err(IonError::InvalidMode(format!("omega_t={omega_t}")));
        }
        if !(d_eff > 0.0 && d_eff.is_finite()) {
            return Err(IonError::InvalidMode(format!("d_eff={d_eff}")));
        }
        if !(anomalous_baseline >= 0.0 && anomalous_baseline.is_finite()) {
            return Err(IonError::InvalidMode(format!(
                "anomalous_baseline={anomalous_baseline}"
            )));
        }
        Ok(TrapMode {
            omega_t,
            d_eff,
            anomalous_baseline,
        })
    }

    /// Mode at trap frequency `freq_hz` (not angular), no baseline.
    pub fn at_frequency(freq_hz: f64, d_eff: f64) -> Result<Self, IonError> {
        Self::new(TWO_PI * freq_hz, d_eff, 0.0)
    }

    pub fn with_baseline(self, anomalous_baseline: f64) -> Result<Self, IonError> {
        Self::new(self.omega_t, self.d_eff, anomalous_baseline)
    }

    pub fn omega_t(&self) -> f64 {
        self.omega_t
    }

    pub fn freq_hz(&self) -> f64 {
        self.omega_t / TWO_PI
    }

    pub fn d_eff(&self) -> f64 {
        self.d_eff
    }

    pub fn anomalous_baseline(&self) -> f64 {
        self.anomalous_baseline
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HeatingMeasurement {
    pub s_v_amplitude: f64,
    pub rate: f64,
    pub rate_sigma: f64,
}

impl HeatingMeasurement {
    pub fn new(s_v_amplitude: f64, rate: f64, rate_sigma: f64) -> Result<Self, IonError> {
        let ok = |x: f64| x > 0.0 && x.is_finite();
        if !(ok(s_v_amplitude) && ok(rate) && ok(rate_sigma)) {
            return Err(IonError::InvalidMeasurement(format!(
                "amplitude={s_v_amplitude}, rate={rate}, sigma={rate_sigma}"
            )));
        }
        Ok(HeatingMeasurement {
            s_v_amplitude,
            rate,
            rate_sigma,
        })
    }
}

/// Heating rate per unit `S_V/D_eff²` (quanta/s per V²/(Hz·m²)).
fn coupling(omega_t: f64, ion: &IonSpecies) -> f64 {
    ion.charge_c * ion.charge_c / (4.0 * ion.mass_kg * HBAR * omega_t)
}

/// Heating rate for noise power density `s_v` (V²/Hz), plus the baseline.
pub fn heating_rate(s_v: f64, mode: &TrapMode, ion: &IonSpecies) -> f64 {
    coupling(mode.omega_t, ion) * s_v / (mode.d_eff * mode.d_eff) + mode.anomalous_baseline
}

/// Noise amplitude (V/√Hz) that would produce `rate`.
pub fn noise_from_heating(rate: f64, mode: &TrapMode, ion: &IonSpecies) -> Result<f64, IonError> {
    let excess = rate - mode.anomalous_baseline;
    if !(excess >= 0.0) {
        return Err(IonError::Infeasible {
            rate,
            baseline: mode.anomalous_baseline,
        });
    }
    Ok((excess * mode.d_eff * mode.d_eff / coupling(mode.omega_t, ion)).sqrt())
}

/// Weighted least-squares `D_eff` over the measurements.
///
/// The model is linear in `x = 1/D_eff²`, so minimizing
/// `Σ (rate_i − K_i·x)²/σ_i²` has the closed form
/// `x = Σ K_i·rate_i/σ_i² / Σ K_i²/σ_i²`.
pub fn fit_deff(
    measurements: &[HeatingMeasurement],
    omega_t: f64,
    ion: &IonSpecies,
) -> Result<f64, IonError> {
    if measurements.is_empty() {
        return Err(IonError::MissingData);
    }
    let k0 = coupling(omega_t, ion);
    let (num, den) = measurements.iter().fold((0.0, 0.0), |(num, den), m| {
        let k = k0 * m.s_v_amplitude * m.s_v_amplitude;
        let w = 1.0 / (m.rate_sigma * m.rate_sigma);
        (num + w * k * m.rate, den + w * k * k)
    });
    Ok((den / num).sqrt())
}

/// Mean occupation after `t` seconds of linear heating from `n0`.
pub fn nbar_after_delay(n0: f64, rate: f64, t: f64) -> f64 {
    n0 + rate * t
}

/// Upper bound on the open-switch rate when the residual noise is below a
/// measurement floor of `floor_amplitude` V/√Hz.
pub fn expected_open_rate_bound(floor_amplitude: f64, mode: &TrapMode, ion: &IonSpecies) -> f64 {
    heating_rate(floor_amplitude * floor_amplitude, mode, ion)
}
