//! Scenario configuration.
//!
//! TOML with one table per subsystem. Every key carries its unit in the
//! name, unknown keys are rejected, and any missing table or key falls
//! back to the nominal hardware values.

use std::path::{Path, PathBuf};

use serde::Deserialize;
use thiserror::Error;

use crate::analog::{
    AnalogError, EisState, NoiseBudget, NoisePort, NoiseSource, RcNetwork, SwitchState,
    DEFAULT_CHIP_TEMP_K,
};
use crate::constants::{ATOMIC_MASS_UNIT, CA40_MASS_U, ELEMENTARY_CHARGE};
use crate::dac::{
    fit_calibration_with_rail, group_by_channel, read_sweep_csv, ChannelCalibration, DacError,
    IdealTransfer, TransferSet, DEFAULT_MONOTONIC_TOLERANCE_V,
};
use crate::ion::{HeatingMeasurement, IonError, IonSpecies};
use crate::protocol::{BusConfig, ProtocolError, CHANNELS, DEFAULT_MAX_RELIABLE_CLOCK_HZ};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {message}")]
    Parse { path: String, message: String },
    #[error("{path}: cannot read: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{key}: {message}")]
    Invalid { key: String, message: String },
}

impl ConfigError {
    fn invalid(key: &str, message: impl ToString) -> Self {
        ConfigError::Invalid {
            key: key.to_string(),
            message: message.to_string(),
        }
    }
}

#[derive(Debug, Clone, Deserialize, Default, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    pub bus: BusSection,
    pub dac: DacSection,
    pub analog: AnalogSection,
    pub noise: NoiseSection,
    pub spectrum: SpectrumSection,
    pub ion: IonSection,
    pub leakage: LeakageSection,
    pub transport: TransportSection,
}

#[derive(Debug, Clone, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct BusSection {
    pub clock_hz: f64,
    pub max_reliable_clock_hz: f64,
}

impl Default for BusSection {
    fn default() -> Self {
        BusSection {
            clock_hz: 50e6,
            max_reliable_clock_hz: DEFAULT_MAX_RELIABLE_CLOCK_HZ,
        }
    }
}

#[derive(Debug, Clone, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct DacSection {
    pub vref_v: f64,
    pub gain: f64,
    pub offset_v: f64,
    pub rail_v: f64,
    pub monotonic_tolerance_v: f64,
    /// Sweep files ("channel,code,volts"), relative to the config file.
    pub calibration_files: Vec<PathBuf>,
    pub sweep_code_step: usize,
}

impl Default for DacSection {
    fn default() -> Self {
        let t = IdealTransfer::default();
        DacSection {
            vref_v: t.vref(),
            gain: t.gain(),
            offset_v: t.offset(),
            rail_v: t.rail(),
            monotonic_tolerance_v: DEFAULT_MONOTONIC_TOLERANCE_V,
            calibration_files: Vec::new(),
            sweep_code_step: 1,
        }
    }
}

#[derive(Debug, Clone, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct AnalogSection {
    pub r_closed_ohm: f64,
    pub r_open_ohm: f64,
    pub r_source_ohm: f64,
    pub c_electrode_f: f64,
    /// Filter-board capacitance on the electrode during ion operation.
    pub c_board_f: f64,
    pub chip_temp_k: f64,
    pub bench_c_parallel_f: f64,
    pub bench_r_parallel_ohm: f64,
    pub analyzer_temp_k: f64,
    pub analyzer_floor_v_per_rthz: f64,
}

impl Default for AnalogSection {
    fn default() -> Self {
        AnalogSection {
            r_closed_ohm: 3.3e3,
            r_open_ohm: 1e12,
            r_source_ohm: 0.0,
            c_electrode_f: 1e-12,
            c_board_f: 1e-9,
            chip_temp_k: DEFAULT_CHIP_TEMP_K,
            bench_c_parallel_f: 400e-12,
            bench_r_parallel_ohm: 1e6,
            analyzer_temp_k: 300.0,
            analyzer_floor_v_per_rthz: 8e-9,
        }
    }
}

#[derive(Debug, Clone, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseSection {
    /// Amplifier 1/f noise anchor point.
    pub anchor_hz: f64,
    pub anchor_v_per_rthz: f64,
    /// Include the switch's own Johnson noise at the chip temperature.
    pub include_switch_johnson: bool,
}

impl Default for NoiseSection {
    fn default() -> Self {
        NoiseSection {
            anchor_hz: 1.5e6,
            anchor_v_per_rthz: 0.98e-6,
            include_switch_johnson: true,
        }
    }
}

#[derive(Debug, Clone, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct SpectrumSection {
    pub f_min_hz: f64,
    pub f_max_hz: f64,
    pub points_per_decade: usize,
    pub extra_hz: Vec<f64>,
}

impl Default for SpectrumSection {
    fn default() -> Self {
        SpectrumSection {
            f_min_hz: 1.0,
            f_max_hz: 10e6,
            points_per_decade: 20,
            extra_hz: vec![1.5e6],
        }
    }
}

#[derive(Debug, Clone, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct MeasurementEntry {
    pub label: String,
    pub s_v_amplitude_v_per_rthz: f64,
    pub rate_per_s: f64,
    pub rate_sigma_per_s: f64,
}

#[derive(Debug, Clone, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct IonSection {
    pub mass_u: f64,
    pub charge_e: f64,
    pub trap_hz: f64,
    /// Fixed effective distance; fitted from `measurements` when absent.
    pub d_eff_m: Option<f64>,
    /// Labels of the measurements used for the fit (all when empty).
    pub fit_labels: Vec<String>,
    pub anomalous_baseline_per_s: f64,
    pub measurements: Vec<MeasurementEntry>,
}

impl Default for IonSection {
    fn default() -> Self {
        IonSection {
            mass_u: CA40_MASS_U,
            charge_e: 1.0,
            trap_hz: 1.5e6,
            d_eff_m: None,
            fit_labels: vec!["eis_closed".into()],
            anomalous_baseline_per_s: 0.0,
            measurements: vec![
                MeasurementEntry {
                    label: "eis_closed".into(),
                    s_v_amplitude_v_per_rthz: 18.2e-9,
                    rate_per_s: 1090.0,
                    rate_sigma_per_s: 20.0,
                },
                MeasurementEntry {
                    label: "eis_open".into(),
                    s_v_amplitude_v_per_rthz: 6.0e-9,
                    rate_per_s: 120.0,
                    rate_sigma_per_s: 30.0,
                },
            ],
        }
    }
}

#[derive(Debug, Clone, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct LeakageSection {
    pub c_couple_f: Vec<f64>,
    pub c_shunt_f: Vec<f64>,
    pub isolation_hz: f64,
    pub max_fraction: f64,
}

impl Default for LeakageSection {
    fn default() -> Self {
        LeakageSection {
            c_couple_f: vec![0.1e-12, 0.5e-12],
            c_shunt_f: vec![10e-12, 50e-12],
            isolation_hz: 1.5e6,
            max_fraction: 0.01,
        }
    }
}

#[derive(Debug, Clone, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct TransportSection {
    pub distance_m: f64,
    pub speed_m_per_s: f64,
    pub clock_hz: f64,
    /// Start voltages per channel; defaults to a -8 V..+8 V spread.
    pub v_start_v: Option<Vec<f64>>,
    /// End voltages; defaults to the start spread mirrored.
    pub v_end_v: Option<Vec<f64>>,
    pub tolerance_v: Option<f64>,
    pub cycles: usize,
    pub sample_dt_s: f64,
    /// Optional extra outputs, relative to the config file.
    pub waveform_out: Option<PathBuf>,
    pub schedule_out: Option<PathBuf>,
    pub trace_out: Option<PathBuf>,
}

impl Default for TransportSection {
    fn default() -> Self {
        TransportSection {
            distance_m: 80e-6,
            speed_m_per_s: 2e-3,
            clock_hz: 200e3,
            v_start_v: None,
            v_end_v: None,
            tolerance_v: None,
            cycles: 200,
            sample_dt_s: 10e-6,
            waveform_out: None,
            schedule_out: None,
            trace_out: None,
        }
    }
}

impl ScenarioConfig {
    pub fn parse(text: &str, origin: &str) -> Result<Self, ConfigError> {
        toml::from_str(text).map_err(|e| ConfigError::Parse {
            path: origin.to_string(),
            message: e.to_string(),
        })
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::parse(&text, &path.display().to_string())
    }
}

/// Validated model objects built from a [`ScenarioConfig`].
#[derive(Debug, Clone)]
pub struct Resolved {
    pub config: ScenarioConfig,
    pub base_dir: PathBuf,
    pub bus: BusConfig,
    pub ideal: IdealTransfer,
    pub calibrations: Vec<ChannelCalibration>,
    pub transfers: TransferSet,
    pub eis: EisState,
    pub ion_network: RcNetwork,
    pub bench_network: RcNetwork,
    pub ion: IonSpecies,
    pub measurements: Vec<(String, HeatingMeasurement)>,
    pub transport_bus: BusConfig,
    pub v_start: [f64; CHANNELS],
    pub v_end: [f64; CHANNELS],
    pub tolerance_v: f64,
}

fn positive(key: &str, v: f64) -> Result<f64, ConfigError> {
    if v > 0.0 && v.is_finite() {
        Ok(v)
    } else {
        Err(ConfigError::invalid(key, format!("must be positive, got {v}")))
    }
}

fn channel_array(key: &str, v: &[f64]) -> Result<[f64; CHANNELS], ConfigError> {
    v.try_into()
        .map_err(|_| ConfigError::invalid(key, format!("needs {CHANNELS} values, got {}", v.len())))
}

fn bus_err(key: &'static str) -> impl Fn(ProtocolError) -> ConfigError {
    move |e| ConfigError::invalid(key, e)
}

fn analog_err(key: &'static str) -> impl Fn(AnalogError) -> ConfigError {
    move |e| ConfigError::invalid(key, e)
}

fn ion_err(key: &'static str) -> impl Fn(IonError) -> ConfigError {
    move |e| ConfigError::invalid(key, e)
}

impl Resolved {
    pub fn new(config: ScenarioConfig, base_dir: &Path) -> Result<Self, ConfigError> {
        let c = &config;
        let bus = BusConfig::new(c.bus.clock_hz, c.bus.max_reliable_clock_hz).map_err(bus_err("bus"))?;
        let transport_bus = BusConfig::new(c.transport.clock_hz, c.bus.max_reliable_clock_hz)
            .map_err(bus_err("transport.clock_hz"))?;

        let ideal = IdealTransfer::new(c.dac.vref_v, c.dac.gain, c.dac.offset_v, c.dac.rail_v)
            .map_err(|e| ConfigError::invalid("dac", e))?;
        positive("dac.monotonic_tolerance_v", c.dac.monotonic_tolerance_v)?;
        if c.dac.sweep_code_step == 0 {
            return Err(ConfigError::invalid("dac.sweep_code_step", "must be >= 1"));
        }

        let eis = EisState::new(SwitchState::Closed, c.analog.r_closed_ohm, c.analog.r_open_ohm)
            .map_err(analog_err("analog.r_closed_ohm"))?;
        let ion_network = RcNetwork::new(
            c.analog.r_source_ohm,
            c.analog.c_electrode_f,
            c.analog.c_board_f,
            None,
        )
        .map_err(analog_err("analog"))?;
        let bench_network = RcNetwork::new(
            c.analog.r_source_ohm,
            c.analog.c_electrode_f,
            c.analog.bench_c_parallel_f,
            Some(c.analog.bench_r_parallel_ohm),
        )
        .map_err(analog_err("analog.bench_*"))?;
        positive("analog.chip_temp_k", c.analog.chip_temp_k)?;
        positive("analog.analyzer_temp_k", c.analog.analyzer_temp_k)?;
        positive("analog.analyzer_floor_v_per_rthz", c.analog.analyzer_floor_v_per_rthz)?;
        positive("noise.anchor_hz", c.noise.anchor_hz)?;
        positive("noise.anchor_v_per_rthz", c.noise.anchor_v_per_rthz)?;

        let ion = IonSpecies::new(
            positive("ion.mass_u", c.ion.mass_u)? * ATOMIC_MASS_UNIT,
            positive("ion.charge_e", c.ion.charge_e)? * ELEMENTARY_CHARGE,
        )
        .map_err(ion_err("ion"))?;
        positive("ion.trap_hz", c.ion.trap_hz)?;
        if let Some(d) = c.ion.d_eff_m {
            positive("ion.d_eff_m", d)?;
        }
        if !(c.ion.anomalous_baseline_per_s >= 0.0) {
            return Err(ConfigError::invalid("ion.anomalous_baseline_per_s", "must be >= 0"));
        }
        let measurements = c
            .ion
            .measurements
            .iter()
            .map(|m| {
                HeatingMeasurement::new(m.s_v_amplitude_v_per_rthz, m.rate_per_s, m.rate_sigma_per_s)
                    .map(|hm| (m.label.clone(), hm))
                    .map_err(ion_err("ion.measurements"))
            })
            .collect::<Result<Vec<_>, _>>()?;
        for label in &c.ion.fit_labels {
            if !measurements.iter().any(|(l, _)| l == label) {
                return Err(ConfigError::invalid(
                    "ion.fit_labels",
                    format!("no measurement labelled {label:?}"),
                ));
            }
        }
        if c.ion.d_eff_m.is_none() && measurements.is_empty() {
            return Err(ConfigError::invalid(
                "ion",
                "either d_eff_m or at least one measurement is required",
            ));
        }

        positive("leakage.isolation_hz", c.leakage.isolation_hz)?;
        for (i, v) in c.leakage.c_couple_f.iter().enumerate() {
            positive(&format!("leakage.c_couple_f[{i}]"), *v)?;
        }
        for (i, v) in c.leakage.c_shunt_f.iter().enumerate() {
            positive(&format!("leakage.c_shunt_f[{i}]"), *v)?;
        }

        positive("transport.distance_m", c.transport.distance_m)?;
        positive("transport.speed_m_per_s", c.transport.speed_m_per_s)?;
        positive("transport.sample_dt_s", c.transport.sample_dt_s)?;
        let default_start: [f64; CHANNELS] =
            std::array::from_fn(|k| -ideal.rail() + 2.0 * ideal.rail() * k as f64 / (CHANNELS - 1) as f64);
        let v_start = match &c.transport.v_start_v {
            Some(v) => channel_array("transport.v_start_v", v)?,
            None => default_start,
        };
        let v_end = match &c.transport.v_end_v {
            Some(v) => channel_array("transport.v_end_v", v)?,
            None => {
                let mut v = v_start;
                v.reverse();
                v
            }
        };
        let tolerance_v = match c.transport.tolerance_v {
            Some(t) => positive("transport.tolerance_v", t)?,
            None => ideal.lsb(),
        };

        let mut calibrations = Vec::new();
        for file in &c.dac.calibration_files {
            let path = base_dir.join(file);
            let f = std::fs::File::open(&path).map_err(|source| ConfigError::Io {
                path: path.display().to_string(),
                source,
            })?;
            let rows = read_sweep_csv(f).map_err(|e| ConfigError::invalid("dac.calibration_files", format!("{}: {e}", path.display())))?;
            for (ch, sweep) in group_by_channel(&rows) {
                if ch >= CHANNELS {
                    return Err(ConfigError::invalid(
                        "dac.calibration_files",
                        DacError::BadChannel(ch),
                    ));
                }
                match fit_calibration_with_rail(ch, &sweep, c.dac.monotonic_tolerance_v, ideal.rail()) {
                    Ok(cal) => calibrations.push(cal),
                    // rejected channels stay on the ideal transfer; `calibrate` reports them
                    Err(DacError::CalibrationRejected { .. }) => {}
                    Err(e) => return Err(ConfigError::invalid("dac.calibration_files", e)),
                }
            }
        }
        let mut transfers = TransferSet::ideal(ideal);
        for cal in &calibrations {
            transfers = transfers.with_calibration(cal.clone());
        }

        Ok(Resolved {
            config,
            base_dir: base_dir.to_path_buf(),
            bus,
            ideal,
            calibrations,
            transfers,
            eis,
            ion_network,
            bench_network,
            ion,
            measurements,
            transport_bus,
            v_start,
            v_end,
            tolerance_v,
        })
    }

    pub fn defaults() -> Self {
        Resolved::new(ScenarioConfig::default(), Path::new(".")).expect("defaults are valid")
    }

    /// Amplifier 1/f noise at the drive port.
    pub fn amplifier_noise(&self) -> NoiseSource {
        NoiseSource::one_over_f(self.config.noise.anchor_hz, self.config.noise.anchor_v_per_rthz)
            .expect("validated")
    }

    fn switch_johnson(&self, state: SwitchState) -> Option<NoiseSource> {
        self.config.noise.include_switch_johnson.then(|| {
            NoiseSource::johnson(
                self.eis.resistance_in(state),
                self.config.analog.chip_temp_k,
                NoisePort::Drive,
            )
            .expect("validated")
        })
    }

    /// Bench fixture: analyzer input R and C across the electrode, plus the
    /// analyzer's own floor.
    pub fn bench_budget(&self, state: SwitchState) -> NoiseBudget {
        let a = &self.config.analog;
        let mut sources = vec![self.amplifier_noise()];
        sources.extend(self.switch_johnson(state));
        sources.push(
            NoiseSource::johnson(a.bench_r_parallel_ohm, a.analyzer_temp_k, NoisePort::Shunt)
                .expect("validated"),
        );
        sources.push(NoiseSource::floor(a.analyzer_floor_v_per_rthz).expect("validated"));
        NoiseBudget {
            sources,
            network: self.bench_network,
            eis: self.eis.with_state(state),
        }
    }

    /// Electrode as seen by the ion: filter board, no analyzer.
    pub fn ion_budget(&self, state: SwitchState) -> NoiseBudget {
        let mut sources = vec![self.amplifier_noise()];
        sources.extend(self.switch_johnson(state));
        NoiseBudget {
            sources,
            network: self.ion_network,
            eis: self.eis.with_state(state),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_config_gives_defaults() {
        let c = ScenarioConfig::parse("", "inline").unwrap();
        assert_eq!(c, ScenarioConfig::default());
        let r = Resolved::new(c, Path::new(".")).unwrap();
        assert_eq!(r.bus.clock_hz(), 50e6);
        assert_eq!(r.v_start[0], -8.0);
        assert_eq!(r.v_end[0], 8.0);
    }

    #[test]
    fn partial_section_keeps_other_defaults() {
        let c = ScenarioConfig::parse("[bus]\nclock_hz = 1e6\n", "inline").unwrap();
        assert_eq!(c.bus.clock_hz, 1e6);
        assert_eq!(c.bus.max_reliable_clock_hz, 50e6);
        assert_eq!(c.analog, AnalogSection::default());
    }

    #[test]
    fn unknown_key_is_rejected_with_location() {
        let err = ScenarioConfig::parse("[bus]\nclock_hz = 1e6\nclock_mhz = 3\n", "x.toml")
            .unwrap_err()
            .to_string();
        assert!(err.contains("clock_mhz"), "{err}");
        assert!(err.contains("line 3"), "{err}");
        assert!(ScenarioConfig::parse("[buss]\n", "x").is_err());
    }

    #[test]
    fn invalid_values_name_the_key() {
        let c = ScenarioConfig::parse("[transport]\nspeed_m_per_s = -1.0\n", "x").unwrap();
        let err = Resolved::new(c, Path::new(".")).unwrap_err().to_string();
        assert!(err.starts_with("transport.speed_m_per_s"), "{err}");

        let c = ScenarioConfig::parse("[transport]\nv_start_v = [1.0, 2.0]\n", "x").unwrap();
        let err = Resolved::new(c, Path::new(".")).unwrap_err().to_string();
        assert!(err.contains("v_start_v"), "{err}");
    }

    #[test]
    fn measurement_tables() {
        let text = r#"
[ion]
fit_labels = ["a"]
[[ion.measurements]]
label = "a"
s_v_amplitude_v_per_rthz = 1e-8
rate_per_s = 300.0
rate_sigma_per_s = 10.0
"#;
        let c = ScenarioConfig::parse(text, "x").unwrap();
        let r = Resolved::new(c, Path::new(".")).unwrap();
        assert_eq!(r.measurements.len(), 1);

        let bad = text.replace("fit_labels = [\"a\"]", "fit_labels = [\"b\"]");
        let c = ScenarioConfig::parse(&bad, "x").unwrap();
        assert!(Resolved::new(c, Path::new(".")).is_err());
    }
}
