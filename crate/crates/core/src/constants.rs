//! Physical constants (CODATA 2018 exact or recommended values).

/// Elementary charge, C.
pub const ELEMENTARY_CHARGE: f64 = 1.602_176_634e-19;
/// Reduced Planck constant, J·s.
pub const HBAR: f64 = 1.054_571_817e-34;
/// Boltzmann constant, J/K.
pub const BOLTZMANN: f64 = 1.380_649e-23;
/// Unified atomic mass unit, kg.
pub const ATOMIC_MASS_UNIT: f64 = 1.660_539_066_60e-27;

/// Isotopic mass of 40Ca in atomic mass units.
pub const CA40_MASS_U: f64 = 39.9626;

pub const TWO_PI: f64 = std::f64::consts::TAU;
