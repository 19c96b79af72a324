//! Electrode isolation switch, RC networks and voltage-noise budgets.
//!
//! The network seen by an electrode is a series resistance (amplifier output
//! plus the EIS) driving a shunt made of the electrode capacitance, any
//! parallel capacitance, and optionally a parallel resistor such as an
//! analyzer input. Every filter here is single-pole.
//!
//! Noise is tracked as power spectral density `S_V` in V²/Hz; amplitudes in
//! V/√Hz are `√S_V`. Independent sources add in power.

use thiserror::Error;

use crate::constants::{BOLTZMANN, TWO_PI};

pub const DEFAULT_R_CLOSED_OHM: f64 = 3.3e3;
pub const DEFAULT_R_OPEN_OHM: f64 = 1e12;
pub const DEFAULT_C_ELECTRODE_F: f64 = 1e-12;
pub const DEFAULT_CHIP_TEMP_K: f64 = 50.0;

pub const ACTIVE_POWER_W: f64 = 0.500;
pub const POWER_DOWN_W: f64 = 0.016;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AnalogError {
    #[error("invalid switch: {0}")]
    InvalidSwitch(String),
    #[error("invalid network: {0}")]
    InvalidNetwork(String),
    #[error("invalid noise source: {0}")]
    InvalidSource(String),
    #[error("invalid frequency grid: {0}")]
    InvalidGrid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SwitchState {
    Open,
    Closed,
}

impl SwitchState {
    pub fn as_str(self) -> &'static str {
        match self {
            SwitchState::Open => "open",
            SwitchState::Closed => "closed",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "open" => Some(SwitchState::Open),
            "closed" => Some(SwitchState::Closed),
            _ => None,
        }
    }
}

/// Electrode isolation switch: a voltage-variable resistance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EisState {
    state: SwitchState,
    r_closed: f64,
    r_open: f64,
}

impl EisState {
    pub fn new(state: SwitchState, r_closed: f64, r_open: f64) -> Result<Self, AnalogError> {
        if !(r_closed > 0.0 && r_closed < r_open && r_open.is_finite()) {
            return Err(AnalogError::InvalidSwitch(format!(
                "need 0 < r_closed < r_open, got r_closed={r_closed}, r_open={r_open}"
            )));
        }
        Ok(EisState {
            state,
            r_closed,
            r_open,
        })
    }

    pub fn closed() -> Self {
        EisState {
            state: SwitchState::Closed,
            r_closed: DEFAULT_R_CLOSED_OHM,
            r_open: DEFAULT_R_OPEN_OHM,
        }
    }

    pub fn open() -> Self {
        EisState {
            state: SwitchState::Open,
            ..Self::closed()
        }
    }

    pub fn with_state(self, state: SwitchState) -> Self {
        EisState { state, ..self }
    }

    pub fn state(&self) -> SwitchState {
        self.state
    }

    pub fn r_closed(&self) -> f64 {
        self.r_closed
    }

    pub fn r_open(&self) -> f64 {
        self.r_open
    }

    pub fn resistance(&self) -> f64 {
        self.resistance_in(self.state)
    }

    pub fn resistance_in(&self, state: SwitchState) -> f64 {
        match state {
            SwitchState::Open => self.r_open,
            SwitchState::Closed => self.r_closed,
        }
    }
}

impl Default for EisState {
    fn default() -> Self {
        Self::closed()
    }
}

/// Series-R / shunt-C (/ shunt-R) network between amplifier and ground.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RcNetwork {
    /// Source resistance in series with the switch (0 for an ideal amp).
    r_source: f64,
    c_electrode: f64,
    c_parallel: f64,
    r_parallel: Option<f64>,
}

impl RcNetwork {
    pub fn new(
        r_source: f64,
        c_electrode: f64,
        c_parallel: f64,
        r_parallel: Option<f64>,
    ) -> Result<Self, AnalogError> {
        if !(r_source >= 0.0 && r_source.is_finite()) {
            return Err(AnalogError::InvalidNetwork(format!(
                "r_source must be >= 0, got {r_source}"
            )));
        }
        if !(c_electrode > 0.0 && c_electrode.is_finite()) {
            return Err(AnalogError::InvalidNetwork(format!(
                "c_electrode must be > 0, got {c_electrode}"
            )));
        }
        if !(c_parallel >= 0.0 && c_parallel.is_finite()) {
            return Err(AnalogError::InvalidNetwork(format!(
                "c_parallel must be >= 0, got {c_parallel}"
            )));
        }
        if let Some(r) = r_parallel {
            if !(r > 0.0 && r.is_finite()) {
                return Err(AnalogError::InvalidNetwork(format!(
                    "r_parallel must be > 0, got {r}"
                )));
            }
        }
        Ok(RcNetwork {
            r_source,
            c_electrode,
            c_parallel,
            r_parallel,
        })
    }

    /// Electrode plus external shunt capacitance, no parallel resistor.
    pub fn electrode(c_parallel: f64) -> Result<Self, AnalogError> {
        Self::new(0.0, DEFAULT_C_ELECTRODE_F, c_parallel, None)
    }

    pub fn r_source(&self) -> f64 {
        self.r_source
    }

    pub fn c_electrode(&self) -> f64 {
        self.c_electrode
    }

    pub fn c_parallel(&self) -> f64 {
        self.c_parallel
    }

    pub fn r_parallel(&self) -> Option<f64> {
        self.r_parallel
    }

    pub fn c_total(&self) -> f64 {
        self.c_electrode + self.c_parallel
    }

    /// Total series resistance with the switch in `eis`'s state.
    pub fn series_resistance(&self, eis: &EisState) -> f64 {
        self.r_source + eis.resistance()
    }

    /// Resistance the shunt capacitance sees (series ∥ parallel).
    pub fn thevenin_resistance(&self, eis: &EisState) -> f64 {
        let rs = self.series_resistance(eis);
        match self.r_parallel {
            Some(rp) => rs * rp / (rs + rp),
            None => rs,
        }
    }

    pub fn pole(&self, eis: &EisState) -> f64 {
        pole_frequency(self.thevenin_resistance(eis), self.c_total())
    }

    /// Time constant of the electrode node.
    pub fn tau(&self, eis: &EisState) -> f64 {
        self.thevenin_resistance(eis) * self.c_total()
    }
}

/// Where a noise source enters the network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum NoisePort {
    /// In series with the drive, i.e. at the amplifier output.
    Drive,
    /// In series with the parallel resistor (its own Johnson noise).
    Shunt,
    /// Added at the measurement point without filtering.
    Measurement,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum NoiseKind {
    /// Power density `anchor_amplitude²·anchor_freq/f`.
    OneOverF {
        anchor_hz: f64,
        anchor_v_per_rthz: f64,
    },
    /// Thermal noise `4·k_B·T·R`.
    Johnson { r_ohm: f64, temp_k: f64 },
    /// Flat floor.
    Floor { v_per_rthz: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseSource {
    kind: NoiseKind,
    port: NoisePort,
}

impl NoiseSource {
    pub fn new(kind: NoiseKind, port: NoisePort) -> Result<Self, AnalogError> {
        let ok = |x: f64| x > 0.0 && x.is_finite();
        let valid = match kind {
            NoiseKind::OneOverF {
                anchor_hz,
                anchor_v_per_rthz,
            } => ok(anchor_hz) && ok(anchor_v_per_rthz),
            NoiseKind::Johnson { r_ohm, temp_k } => ok(r_ohm) && ok(temp_k),
            NoiseKind::Floor { v_per_rthz } => ok(v_per_rthz),
        };
        if !valid {
            return Err(AnalogError::InvalidSource(format!("{kind:?}")));
        }
        Ok(NoiseSource { kind, port })
    }

    pub fn one_over_f(anchor_hz: f64, anchor_v_per_rthz: f64) -> Result<Self, AnalogError> {
        Self::new(
            NoiseKind::OneOverF {
                anchor_hz,
                anchor_v_per_rthz,
            },
            NoisePort::Drive,
        )
    }

    pub fn johnson(r_ohm: f64, temp_k: f64, port: NoisePort) -> Result<Self, AnalogError> {
        Self::new(NoiseKind::Johnson { r_ohm, temp_k }, port)
    }

    pub fn floor(v_per_rthz: f64) -> Result<Self, AnalogError> {
        Self::new(NoiseKind::Floor { v_per_rthz }, NoisePort::Measurement)
    }

    pub fn kind(&self) -> &NoiseKind {
        &self.kind
    }

    pub fn port(&self) -> NoisePort {
        self.port
    }
}

pub fn pole_frequency(r: f64, c: f64) -> f64 {
    1.0 / (TWO_PI * r * c)
}

/// Source power density at `f`, V²/Hz.
pub fn source_psd(src: &NoiseSource, f: f64) -> f64 {
    match src.kind {
        NoiseKind::OneOverF {
            anchor_hz,
            anchor_v_per_rthz,
        } => anchor_v_per_rthz * anchor_v_per_rthz * anchor_hz / f,
        NoiseKind::Johnson { r_ohm, temp_k } => 4.0 * BOLTZMANN * temp_k * r_ohm,
        NoiseKind::Floor { v_per_rthz } => v_per_rthz * v_per_rthz,
    }
}

/// `|H(f)|²` from the amplifier output to the electrode.
pub fn network_transfer_sq(net: &RcNetwork, eis: &EisState, f: f64) -> f64 {
    port_transfer_sq(net, eis, NoisePort::Drive, f)
}

pub fn port_transfer_sq(net: &RcNetwork, eis: &EisState, port: NoisePort, f: f64) -> f64 {
    let rs = net.series_resistance(eis);
    let divider = match (port, net.r_parallel) {
        (NoisePort::Measurement, _) => return 1.0,
        (NoisePort::Drive, None) => 1.0,
        (NoisePort::Drive, Some(rp)) => rp / (rs + rp),
        // no parallel resistor, nothing to inject into
        (NoisePort::Shunt, None) => return 0.0,
        (NoisePort::Shunt, Some(rp)) => rs / (rs + rp),
    };
    let x = f / net.pole(eis);
    divider * divider / (1.0 + x * x)
}

/// Total electrode noise PSD at `f`.
pub fn electrode_noise_psd(
    sources: &[NoiseSource],
    net: &RcNetwork,
    eis: &EisState,
    f: f64,
) -> f64 {
    sources
        .iter()
        .map(|s| source_psd(s, f) * port_transfer_sq(net, eis, s.port, f))
        .sum()
}

/// Power transfer through the switch into `c_total`, in dB (negative).
pub fn eis_isolation_db(eis: &EisState, c_total: f64, f: f64) -> f64 {
    let zc = 1.0 / (TWO_PI * f * c_total);
    let r = eis.resistance();
    // Z_C is purely reactive, so |Z_C + R|² = R² + |Z_C|².
    10.0 * (zc * zc / (r * r + zc * zc)).log10()
}

/// Fraction of RF amplitude coupled onto a shunted control electrode.
pub fn rf_leakage_fraction(c_couple: f64, c_shunt: f64) -> f64 {
    c_couple / (c_couple + c_shunt)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PowerMode {
    Active,
    PowerDown,
}

pub fn power_draw(mode: PowerMode) -> f64 {
    match mode {
        PowerMode::Active => ACTIVE_POWER_W,
        PowerMode::PowerDown => POWER_DOWN_W,
    }
}

/// Logarithmic grid from `f_min` to `f_max` inclusive, merged with `extra`.
pub fn log_grid(
    f_min: f64,
    f_max: f64,
    points_per_decade: usize,
    extra: &[f64],
) -> Result<Vec<f64>, AnalogError> {
    if !(f_min > 0.0 && f_max > f_min && f_max.is_finite()) || points_per_decade == 0 {
        return Err(AnalogError::InvalidGrid(format!(
            "need 0 < f_min < f_max and points_per_decade > 0, got {f_min}, {f_max}, {points_per_decade}"
        )));
    }
    if let Some(bad) = extra.iter().find(|f| !(**f > 0.0 && f.is_finite())) {
        return Err(AnalogError::InvalidGrid(format!("bad extra frequency {bad}")));
    }
    let decades = (f_max / f_min).log10();
    let steps = (decades * points_per_decade as f64 - 1e-9).ceil() as usize;
    let mut grid: Vec<f64> = (0..steps)
        .map(|i| f_min * 10f64.powf(i as f64 / points_per_decade as f64))
        .collect();
    grid.push(f_max);
    grid.extend_from_slice(extra);
    grid.sort_by(|a, b| a.total_cmp(b));
    grid.dedup_by(|a, b| (*a - *b).abs() <= 1e-12 * b.abs());
    Ok(grid)
}

/// Slope of log(amplitude) against log(f) between two points.
pub fn loglog_slope(f1: f64, a1: f64, f2: f64, a2: f64) -> f64 {
    (a2 / a1).ln() / (f2 / f1).ln()
}

/// A noise budget: the sources feeding one electrode and the network they
/// pass through.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseBudget {
    pub sources: Vec<NoiseSource>,
    pub network: RcNetwork,
    pub eis: EisState,
}

impl NoiseBudget {
    pub fn psd(&self, f: f64) -> f64 {
        electrode_noise_psd(&self.sources, &self.network, &self.eis, f)
    }

    pub fn amplitude(&self, f: f64) -> f64 {
        self.psd(f).sqrt()
    }

    pub fn with_state(&self, state: SwitchState) -> Self {
        NoiseBudget {
            eis: self.eis.with_state(state),
            ..self.clone()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use num_complex::Complex64;
    use proptest::prelude::*;

    /// Independent route: node voltage by complex impedance division.
    fn oracle_transfer_sq(net: &RcNetwork, eis: &EisState, port: NoisePort, f: f64) -> f64 {
        let w = TWO_PI * f;
        let zc = Complex64::new(0.0, -1.0 / (w * net.c_total()));
        let rs = Complex64::new(net.series_resistance(eis), 0.0);
        let par = |a: Complex64, b: Complex64| a * b / (a + b);
        let h = match (port, net.r_parallel()) {
            (NoisePort::Measurement, _) => Complex64::new(1.0, 0.0),
            (NoisePort::Drive, None) => zc / (rs + zc),
            (NoisePort::Drive, Some(rp)) => {
                let shunt = par(zc, Complex64::new(rp, 0.0));
                shunt / (rs + shunt)
            }
            (NoisePort::Shunt, None) => Complex64::new(0.0, 0.0),
            (NoisePort::Shunt, Some(rp)) => {
                let other = par(zc, rs);
                other / (Complex64::new(rp, 0.0) + other)
            }
        };
        h.norm_sqr()
    }

    fn bench(state: SwitchState) -> (RcNetwork, EisState) {
        (
            RcNetwork::new(0.0, 1e-12, 400e-12, Some(1e6)).unwrap(),
            EisState::closed().with_state(state),
        )
    }

    #[test]
    fn poles() {
        assert_relative_eq!(pole_frequency(3.3e3, 1e-9), 48_228.77, max_relative = 1e-6);
        assert_relative_eq!(pole_frequency(3.3e3, 400e-12), 120_571.9, max_relative = 1e-6);
        assert_relative_eq!(pole_frequency(1e6, 400e-12), 397.887, max_relative = 1e-5);
    }

    #[test]
    fn source_psds() {
        let s = NoiseSource::one_over_f(1.5e6, 0.98e-6).unwrap();
        assert_relative_eq!(source_psd(&s, 1.5e6), 0.98e-6 * 0.98e-6, max_relative = 1e-14);
        assert_relative_eq!(
            source_psd(&s, 1.0e6).sqrt(),
            (0.98f64.powi(2) * 1.5).sqrt() * 1e-6,
            max_relative = 1e-12
        );
        assert_relative_eq!(source_psd(&s, 1.0e6).sqrt(), 1.20e-6, max_relative = 2e-3);
        let j = NoiseSource::johnson(1e6, 300.0, NoisePort::Shunt).unwrap();
        assert_relative_eq!(source_psd(&j, 123.0).sqrt(), 128.7e-9, max_relative = 1e-3);
        assert!(NoiseSource::floor(0.0).is_err());
        assert!(NoiseSource::johnson(-1.0, 300.0, NoisePort::Drive).is_err());
    }

    #[test]
    fn closed_switch_filtering() {
        let net = RcNetwork::new(0.0, 1e-12, 1e-9 - 1e-12, None).unwrap();
        let eis = EisState::closed();
        assert_relative_eq!(network_transfer_sq(&net, &eis, 1.0), 1.0, epsilon = 1e-4);
        let fc = net.pole(&eis);
        assert_relative_eq!(network_transfer_sq(&net, &eis, fc), 0.5, max_relative = 1e-12);
        let amp = network_transfer_sq(&net, &eis, 1.5e6).sqrt();
        assert_relative_eq!(amp, 0.0321, max_relative = 2e-3);
        assert_relative_eq!(amp * 0.98e-6, 31.5e-9, max_relative = 2e-3);
    }

    #[test]
    fn bench_open_trace_asymptotes() {
        let (net, eis) = bench(SwitchState::Open);
        let sources = vec![
            NoiseSource::one_over_f(1.5e6, 0.98e-6).unwrap(),
            NoiseSource::johnson(1e6, 300.0, NoisePort::Shunt).unwrap(),
            NoiseSource::floor(8e-9).unwrap(),
        ];
        let a10 = electrode_noise_psd(&sources, &net, &eis, 10.0).sqrt();
        let a100k = electrode_noise_psd(&sources, &net, &eis, 1e5).sqrt();
        assert_relative_eq!(a10, 128.7e-9, max_relative = 0.05);
        assert_relative_eq!(a100k, 8e-9, max_relative = 0.05);
    }

    #[test]
    fn isolation() {
        let open = EisState::open();
        assert_relative_eq!(eis_isolation_db(&open, 10e-12, 1.5e6), -159.485, epsilon = 1e-2);
        assert_relative_eq!(eis_isolation_db(&open, 50e-12, 1.5e6), -173.465, epsilon = 1e-2);
        let closed = EisState::closed();
        let diff = eis_isolation_db(&closed, 1e-9, 100e6) - eis_isolation_db(&open, 1e-9, 100e6);
        assert_relative_eq!(diff, 20.0 * (1e12f64 / 3.3e3).log10(), max_relative = 1e-6);
    }

    #[test]
    fn leakage_and_power() {
        assert!(rf_leakage_fraction(0.5e-12, 50e-12) <= 0.01);
        assert!(rf_leakage_fraction(0.1e-12, 10e-12) <= 0.01);
        assert_relative_eq!(rf_leakage_fraction(0.5e-12, 4.5e-12), 0.10, max_relative = 1e-12);
        assert_eq!(power_draw(PowerMode::Active), 0.5);
        assert_eq!(power_draw(PowerMode::PowerDown), 0.016);
        assert_relative_eq!(
            power_draw(PowerMode::Active) - power_draw(PowerMode::PowerDown),
            0.484,
            max_relative = 1e-12
        );
    }

    #[test]
    fn switch_and_network_validation() {
        assert!(EisState::new(SwitchState::Open, 1e6, 1e3).is_err());
        assert!(EisState::new(SwitchState::Open, 0.0, 1e3).is_err());
        assert!(RcNetwork::new(0.0, 0.0, 0.0, None).is_err());
        assert!(RcNetwork::new(0.0, 1e-12, -1.0, None).is_err());
        assert!(RcNetwork::new(-1.0, 1e-12, 0.0, None).is_err());
        assert!(RcNetwork::new(0.0, 1e-12, 0.0, Some(0.0)).is_err());
        assert_eq!(SwitchState::parse(" Open "), Some(SwitchState::Open));
        assert_eq!(SwitchState::parse("ajar"), None);
    }

    #[test]
    fn grid_shape() {
        let g = log_grid(1.0, 1e3, 10, &[1.5e2, 10.0]).unwrap();
        assert_eq!(g.first(), Some(&1.0));
        assert_eq!(g.last(), Some(&1e3));
        assert_eq!(g.len(), 32);
        assert!(g.windows(2).all(|w| w[0] < w[1]));
        assert!(log_grid(10.0, 1.0, 10, &[]).is_err());
        assert!(log_grid(1.0, 10.0, 0, &[]).is_err());
    }

    proptest! {
        #[test]
        fn transfer_matches_impedance_oracle(
            rs in 1.0f64..1e12,
            ce in 1e-15f64..1e-9,
            cp in 0.0f64..1e-8,
            rp in prop::option::of(1.0f64..1e9),
            f in 1e-1f64..1e8,
            open in any::<bool>(),
        ) {
            let net = RcNetwork::new(0.0, ce, cp, rp).unwrap();
            let state = if open { SwitchState::Open } else { SwitchState::Closed };
            let eis = EisState::new(state, rs, rs * 10.0 + 1.0).unwrap();
            for port in [NoisePort::Drive, NoisePort::Shunt, NoisePort::Measurement] {
                let got = port_transfer_sq(&net, &eis, port, f);
                let want = oracle_transfer_sq(&net, &eis, port, f);
                prop_assert!((got - want).abs() <= 1e-9 * want.max(1e-300) + 1e-300,
                    "port {:?}: {} vs {}", port, got, want);
            }
        }

        #[test]
        fn pole_scale_symmetry(r in 1.0f64..1e9, c in 1e-15f64..1e-6, k in 1e-3f64..1e3) {
            let a = pole_frequency(r, c);
            let b = pole_frequency(r * k, c / k);
            prop_assert!((a - b).abs() <= 1e-12 * a);
        }

        #[test]
        fn psd_non_increasing(
            anchor in 1e-9f64..1e-5,
            r_white in 1.0f64..1e6,
            cp in 0.0f64..1e-8,
            f1 in 1.0f64..1e7,
            ratio in 1.0f64..100.0,
        ) {
            let net = RcNetwork::electrode(cp).unwrap();
            let eis = EisState::closed();
            let sources = [
                NoiseSource::one_over_f(1e6, anchor).unwrap(),
                NoiseSource::johnson(r_white, 50.0, NoisePort::Drive).unwrap(),
            ];
            let p1 = electrode_noise_psd(&sources, &net, &eis, f1);
            let p2 = electrode_noise_psd(&sources, &net, &eis, f1 * ratio);
            prop_assert!(p2 <= p1 * (1.0 + 1e-12));
        }

        #[test]
        fn leakage_bounds(cc in 1e-16f64..1e-9, cs1 in 1e-15f64..1e-8, dcs in 1e-15f64..1e-8) {
            let a = rf_leakage_fraction(cc, cs1);
            let b = rf_leakage_fraction(cc, cs1 + dcs);
            prop_assert!(a > 0.0 && a < 1.0);
            prop_assert!(b < a);
        }
    }
}
