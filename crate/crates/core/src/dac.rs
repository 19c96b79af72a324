//! Code-to-voltage transfer of one DAC block (R-2R ladder, buffer, HV amp).
//!
//! Every channel is described by a [`Transfer`]. The nominal one is
//! [`IdealTransfer`]; channels that were swept in situ carry a
//! [`ChannelCalibration`] table instead. Planning code only ever talks to
//! the trait, so calibrated and uncalibrated channels mix freely in a
//! [`TransferSet`].

use std::io::Read;
use std::sync::Arc;

use thiserror::Error;

use crate::protocol::{DacCode, CHANNELS, CODE_BITS, MAX_CODE};

/// Default monotonicity tolerance for calibration sweeps.
pub const DEFAULT_MONOTONIC_TOLERANCE_V: f64 = 0.05;

const CODE_SPAN: f64 = (1u32 << CODE_BITS) as f64;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DacError {
    #[error("invalid transfer parameters: {0}")]
    InvalidTransfer(String),
    #[error("channel {0} is outside 0..16")]
    BadChannel(usize),
    #[error("channel {channel}: calibration needs at least 2 samples, got {got}")]
    TooFewSamples { channel: usize, got: usize },
    #[error("channel {channel}: calibration codes must be strictly increasing (code {code})")]
    CodesNotIncreasing { channel: usize, code: u16 },
    #[error(
        "channel {channel}: calibration rejected, output drops {dip_v:.4} V at code {code} \
         (tolerance {tolerance_v:.4} V)"
    )]
    CalibrationRejected {
        channel: usize,
        code: u16,
        dip_v: f64,
        tolerance_v: f64,
    },
    #[error("target {target_v} V is outside the channel range, nearest achievable is {nearest_v} V")]
    OutOfRange { target_v: f64, nearest_v: f64 },
    #[error("calibration file: {0}")]
    File(String),
}

/// Monotone code-to-voltage map for one channel.
pub trait Transfer: Send + Sync + std::fmt::Debug {
    fn voltage(&self, code: DacCode) -> f64;

    /// Short label for reports ("ideal", "calibrated").
    fn kind(&self) -> &'static str;

    fn min_voltage(&self) -> f64 {
        self.voltage(DacCode::ZERO)
    }

    fn max_voltage(&self) -> f64 {
        self.voltage(DacCode::MAX)
    }
}

/// Nominal chain: `clamp(gain·(vref·code/4096 − offset), ±rail)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IdealTransfer {
    vref: f64,
    gain: f64,
    offset: f64,
    rail: f64,
}

impl Default for IdealTransfer {
    fn default() -> Self {
        IdealTransfer {
            vref: 1.8,
            gain: 9.0,
            offset: 0.9,
            rail: 8.0,
        }
    }
}

impl IdealTransfer {
    pub fn new(vref: f64, gain: f64, offset: f64, rail: f64) -> Result<Self, DacError> {
        if !(vref > 0.0) || !(gain > 0.0) || !(rail > 0.0) || !offset.is_finite() {
            return Err(DacError::InvalidTransfer(format!(
                "vref={vref}, gain={gain}, offset={offset}, rail={rail}"
            )));
        }
        Ok(IdealTransfer {
            vref,
            gain,
            offset,
            rail,
        })
    }

    pub fn vref(&self) -> f64 {
        self.vref
    }

    pub fn gain(&self) -> f64 {
        self.gain
    }

    pub fn offset(&self) -> f64 {
        self.offset
    }

    pub fn rail(&self) -> f64 {
        self.rail
    }

    /// Voltage step per code away from the rails.
    pub fn lsb(&self) -> f64 {
        self.gain * self.vref / CODE_SPAN
    }

    /// Amplifier output before the rail clamp.
    pub fn unclamped(&self, code: DacCode) -> f64 {
        self.gain * (self.vref * code.value() as f64 / CODE_SPAN - self.offset)
    }
}

impl Transfer for IdealTransfer {
    fn voltage(&self, code: DacCode) -> f64 {
        self.unclamped(code).clamp(-self.rail, self.rail)
    }

    fn kind(&self) -> &'static str {
        "ideal"
    }
}

pub fn ideal_transfer(t: &IdealTransfer, code: DacCode) -> f64 {
    t.voltage(code)
}

/// Component values of the high-voltage amplifier. Recorded only; the
/// behavioral gain lives in [`IdealTransfer`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AmplifierSpec {
    pub r1_ohm: f64,
    pub r2_ohm: f64,
    pub r3_ohm: f64,
    pub c_comp_f: f64,
}

impl Default for AmplifierSpec {
    fn default() -> Self {
        AmplifierSpec {
            r1_ohm: 70e3,
            r2_ohm: 2e3,
            r3_ohm: 8e3,
            c_comp_f: 200e-15,
        }
    }
}

/// Measured, monotone code-to-voltage table for one electrode.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelCalibration {
    channel: usize,
    samples: Vec<(DacCode, f64)>,
    rail: f64,
    /// Largest dip that was flattened while fitting.
    max_flattened_v: f64,
}

impl ChannelCalibration {
    pub fn channel(&self) -> usize {
        self.channel
    }

    pub fn samples(&self) -> &[(DacCode, f64)] {
        &self.samples
    }

    pub fn rail(&self) -> f64 {
        self.rail
    }

    pub fn max_flattened_v(&self) -> f64 {
        self.max_flattened_v
    }
}

impl Transfer for ChannelCalibration {
    fn voltage(&self, code: DacCode) -> f64 {
        calibrated_voltage(self, code)
    }

    fn kind(&self) -> &'static str {
        "calibrated"
    }
}

/// Builds a calibration table from a code sweep, clamped to ±8 V rails.
pub fn fit_calibration(
    channel: usize,
    sweep: &[(DacCode, f64)],
    tolerance_v: f64,
) -> Result<ChannelCalibration, DacError> {
    fit_calibration_with_rail(channel, sweep, tolerance_v, IdealTransfer::default().rail())
}

pub fn fit_calibration_with_rail(
    channel: usize,
    sweep: &[(DacCode, f64)],
    tolerance_v: f64,
    rail: f64,
) -> Result<ChannelCalibration, DacError> {
    if channel >= CHANNELS {
        return Err(DacError::BadChannel(channel));
    }
    if sweep.len() < 2 {
        return Err(DacError::TooFewSamples {
            channel,
            got: sweep.len(),
        });
    }
    for pair in sweep.windows(2) {
        if pair[1].0 <= pair[0].0 {
            return Err(DacError::CodesNotIncreasing {
                channel,
                code: pair[1].0.value(),
            });
        }
    }

    let mut samples = Vec::with_capacity(sweep.len());
    let mut running_max = f64::NEG_INFINITY;
    let mut max_flattened_v: f64 = 0.0;
    for &(code, volts) in sweep {
        if !volts.is_finite() {
            return Err(DacError::File(format!(
                "channel {channel}: non-finite voltage at code {code}"
            )));
        }
        let dip = running_max - volts;
        if dip > tolerance_v {
            return Err(DacError::CalibrationRejected {
                channel,
                code: code.value(),
                dip_v: dip,
                tolerance_v,
            });
        }
        if dip > 0.0 {
            max_flattened_v = max_flattened_v.max(dip);
        }
        running_max = running_max.max(volts);
        samples.push((code, running_max));
    }

    Ok(ChannelCalibration {
        channel,
        samples,
        rail,
        max_flattened_v,
    })
}

/// Piecewise-linear lookup; outside the sampled span the nearest segment is
/// extended and the result clamped to the rails.
pub fn calibrated_voltage(cal: &ChannelCalibration, code: DacCode) -> f64 {
    let samples = &cal.samples;
    let x = code.value();
    let seg = match samples.binary_search_by_key(&x, |(c, _)| c.value()) {
        Ok(i) => return samples[i].1,
        Err(0) => 0,
        Err(i) if i >= samples.len() => samples.len() - 2,
        Err(i) => i - 1,
    };
    let (c0, v0) = samples[seg];
    let (c1, v1) = samples[seg + 1];
    let (c0, c1) = (c0.value() as f64, c1.value() as f64);
    let v = v0 + (v1 - v0) * (x as f64 - c0) / (c1 - c0);
    v.clamp(-cal.rail, cal.rail)
}

/// Nearest code for `target`; ties resolve to the lower code.
pub fn code_for_voltage(transfer: &dyn Transfer, target_v: f64) -> Result<DacCode, DacError> {
    let lo_v = transfer.min_voltage();
    let hi_v = transfer.max_voltage();
    let slack = 1e-12 * hi_v.abs().max(lo_v.abs()).max(1.0);
    if !target_v.is_finite() || target_v < lo_v - slack || target_v > hi_v + slack {
        let nearest_v = if target_v.is_nan() || target_v < lo_v {
            lo_v
        } else {
            hi_v
        };
        return Err(DacError::OutOfRange {
            target_v,
            nearest_v,
        });
    }

    // First code whose voltage reaches the target.
    let (mut lo, mut hi) = (0u32, MAX_CODE as u32);
    while lo < hi {
        let mid = (lo + hi) / 2;
        if transfer.voltage(DacCode::from_masked(mid as u16)) >= target_v {
            hi = mid;
        } else {
            lo = mid + 1;
        }
    }
    let upper = DacCode::from_masked(lo as u16);
    if lo == 0 {
        return Ok(upper);
    }
    let lower = DacCode::from_masked((lo - 1) as u16);
    let above = transfer.voltage(upper) - target_v;
    let below = target_v - transfer.voltage(lower);
    Ok(if above < below { upper } else { lower })
}

/// Per-channel transfers for the whole chip.
#[derive(Debug, Clone)]
pub struct TransferSet {
    channels: Vec<Arc<dyn Transfer>>,
}

impl TransferSet {
    pub fn uniform(transfer: Arc<dyn Transfer>) -> Self {
        TransferSet {
            channels: vec![transfer; CHANNELS],
        }
    }

    pub fn ideal(t: IdealTransfer) -> Self {
        Self::uniform(Arc::new(t))
    }

    pub fn set(&mut self, channel: usize, transfer: Arc<dyn Transfer>) -> Result<(), DacError> {
        let slot = self
            .channels
            .get_mut(channel)
            .ok_or(DacError::BadChannel(channel))?;
        *slot = transfer;
        Ok(())
    }

    pub fn with_calibration(mut self, cal: ChannelCalibration) -> Self {
        let ch = cal.channel();
        self.channels[ch] = Arc::new(cal);
        self
    }

    pub fn channel(&self, channel: usize) -> &dyn Transfer {
        self.channels[channel].as_ref()
    }

    pub fn voltages(&self, frame: &crate::protocol::Frame) -> [f64; CHANNELS] {
        std::array::from_fn(|ch| self.channels[ch].voltage(frame.code(ch)))
    }
}

impl Default for TransferSet {
    fn default() -> Self {
        Self::ideal(IdealTransfer::default())
    }
}

/// Reads "channel,code,volts" rows. A leading header row is skipped.
pub fn read_sweep_csv<R: Read>(reader: R) -> Result<Vec<(usize, DacCode, f64)>, DacError> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .comment(Some(b'#'))
        .from_reader(reader);
    let mut rows = Vec::new();
    for (idx, record) in rdr.records().enumerate() {
        let record = record.map_err(|e| DacError::File(e.to_string()))?;
        if record.len() != 3 {
            return Err(DacError::File(format!(
                "row {}: expected 3 fields, got {}",
                idx + 1,
                record.len()
            )));
        }
        if idx == 0 && record[0].parse::<usize>().is_err() {
            continue;
        }
        let bad = |what: &str| DacError::File(format!("row {}: bad {what}", idx + 1));
        let channel: usize = record[0].parse().map_err(|_| bad("channel"))?;
        let code: u32 = record[1].parse().map_err(|_| bad("code"))?;
        let volts: f64 = record[2].parse().map_err(|_| bad("volts"))?;
        let code = DacCode::new(code).map_err(|e| DacError::File(e.to_string()))?;
        rows.push((channel, code, volts));
    }
    Ok(rows)
}

/// Groups sweep rows by channel, preserving row order within a channel.
pub fn group_by_channel(rows: &[(usize, DacCode, f64)]) -> Vec<(usize, Vec<(DacCode, f64)>)> {
    let mut groups: Vec<(usize, Vec<(DacCode, f64)>)> = Vec::new();
    for &(ch, code, v) in rows {
        match groups.iter_mut().find(|(c, _)| *c == ch) {
            Some((_, s)) => s.push((code, v)),
            None => groups.push((ch, vec![(code, v)])),
        }
    }
    groups.sort_by_key(|(c, _)| *c);
    groups
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn code(v: u32) -> DacCode {
        DacCode::new(v).unwrap()
    }

    fn ideal_sweep(t: &IdealTransfer, step: usize) -> Vec<(DacCode, f64)> {
        let mut codes: Vec<DacCode> = DacCode::all().step_by(step).collect();
        if codes.last() != Some(&DacCode::MAX) {
            codes.push(DacCode::MAX);
        }
        codes.into_iter().map(|c| (c, t.voltage(c))).collect()
    }

    #[test]
    fn ideal_transfer_points() {
        let t = IdealTransfer::default();
        assert_eq!(ideal_transfer(&t, DacCode::MIDSCALE), 0.0);
        assert_abs_diff_eq!(t.unclamped(DacCode::ZERO), -8.1, epsilon = 1e-12);
        assert_eq!(ideal_transfer(&t, DacCode::ZERO), -8.0);
        assert_abs_diff_eq!(t.unclamped(DacCode::MAX), 8.096_044_921_875, epsilon = 1e-12);
        assert_eq!(ideal_transfer(&t, DacCode::MAX), 8.0);
        assert_abs_diff_eq!(t.lsb(), 3.955_078_125e-3, epsilon = 1e-15);
    }

    #[test]
    fn rejects_bad_transfer_params() {
        assert!(IdealTransfer::new(0.0, 9.0, 0.9, 8.0).is_err());
        assert!(IdealTransfer::new(1.8, -1.0, 0.9, 8.0).is_err());
        assert!(IdealTransfer::new(1.8, 9.0, 0.9, 0.0).is_err());
    }

    #[test]
    fn calibration_from_ideal_sweep_is_identity() {
        let t = IdealTransfer::default();
        let sweep = ideal_sweep(&t, 64);
        let cal = fit_calibration(3, &sweep, DEFAULT_MONOTONIC_TOLERANCE_V).unwrap();
        for &(c, v) in &sweep {
            assert_eq!(calibrated_voltage(&cal, c), v);
        }
        // code 1024 is a sample point of the step-64 sweep
        assert_abs_diff_eq!(calibrated_voltage(&cal, code(1024)), -4.05, epsilon = 1e-12);
    }

    #[test]
    fn two_point_calibration_interpolates() {
        let cal = fit_calibration(
            0,
            &[(DacCode::ZERO, -8.0), (DacCode::MAX, 8.0)],
            DEFAULT_MONOTONIC_TOLERANCE_V,
        )
        .unwrap();
        let v = calibrated_voltage(&cal, code(2048));
        assert_abs_diff_eq!(v, -8.0 + 16.0 * 2048.0 / 4095.0, epsilon = 1e-12);
        assert_abs_diff_eq!(v, 0.0020, epsilon = 5e-5);
    }

    #[test]
    fn midpoint_is_mean() {
        let cal = fit_calibration(0, &[(code(100), 1.0), (code(200), 2.0)], 0.05).unwrap();
        assert_eq!(calibrated_voltage(&cal, code(150)), 1.5);
    }

    #[test]
    fn extrapolation_is_clamped() {
        let cal = fit_calibration(0, &[(code(1000), 0.0), (code(1100), 1.0)], 0.05).unwrap();
        assert_eq!(calibrated_voltage(&cal, code(4000)), 8.0);
        assert_eq!(calibrated_voltage(&cal, code(0)), -8.0);
        assert_abs_diff_eq!(calibrated_voltage(&cal, code(1150)), 1.5, epsilon = 1e-12);
    }

    #[test]
    fn large_dip_rejects_small_dip_flattens() {
        let mut sweep: Vec<(DacCode, f64)> =
            (0..10).map(|i| (code(i * 400), -8.0 + i as f64)).collect();
        sweep[5].1 = sweep[4].1 - 0.2;
        let err = fit_calibration(2, &sweep, 0.05).unwrap_err();
        assert!(matches!(err, DacError::CalibrationRejected { channel: 2, code: 2000, .. }));

        sweep[5].1 = sweep[4].1 - 0.03;
        let cal = fit_calibration(2, &sweep, 0.05).unwrap();
        assert_eq!(cal.samples()[5].1, sweep[4].1);
        assert_abs_diff_eq!(cal.max_flattened_v(), 0.03, epsilon = 1e-12);
    }

    #[test]
    fn calibration_preconditions() {
        assert!(matches!(
            fit_calibration(0, &[(code(1), 0.0)], 0.05),
            Err(DacError::TooFewSamples { .. })
        ));
        assert!(matches!(
            fit_calibration(0, &[(code(5), 0.0), (code(5), 1.0)], 0.05),
            Err(DacError::CodesNotIncreasing { .. })
        ));
        assert!(matches!(
            fit_calibration(16, &[(code(1), 0.0), (code(2), 1.0)], 0.05),
            Err(DacError::BadChannel(16))
        ));
    }

    #[test]
    fn inverse_on_ideal_transfer() {
        let t = IdealTransfer::default();
        assert_eq!(code_for_voltage(&t, 0.0).unwrap(), DacCode::MIDSCALE);
        let c = code_for_voltage(&t, 1.0).unwrap();
        assert_eq!(c.value(), 2301);
        let err = (t.voltage(c) - 1.0).abs();
        assert!(err < t.lsb() / 2.0, "error {err}");
        assert_abs_diff_eq!(t.voltage(c), 1.000_634_765_625, epsilon = 1e-12);

        match code_for_voltage(&t, 9.0) {
            Err(DacError::OutOfRange { nearest_v, .. }) => assert_eq!(nearest_v, 8.0),
            other => panic!("unexpected {other:?}"),
        }
        match code_for_voltage(&t, -9.0) {
            Err(DacError::OutOfRange { nearest_v, .. }) => assert_eq!(nearest_v, -8.0),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn inverse_ties_break_low() {
        // plateau at both rails: the lowest code that reaches the rail wins
        let t = IdealTransfer::default();
        assert_eq!(code_for_voltage(&t, -8.0).unwrap(), DacCode::ZERO);
        let top = code_for_voltage(&t, 8.0).unwrap();
        assert_eq!(t.voltage(top), 8.0);
        assert!(t.voltage(code(top.value() as u32 - 1)) < 8.0);

        let cal = fit_calibration(0, &[(code(0), 0.0), (code(2), 2.0)], 0.05).unwrap();
        // exactly between codes 0 (0 V) and 1 (1 V)
        assert_eq!(code_for_voltage(&cal, 0.5).unwrap().value(), 0);
    }

    #[test]
    fn sweep_csv_parsing() {
        let text = "channel,code,volts\n0,0,-8.0\n0,4095,8.0\n# note\n3,10,1.5\n";
        let rows = read_sweep_csv(text.as_bytes()).unwrap();
        assert_eq!(rows.len(), 3);
        let groups = group_by_channel(&rows);
        assert_eq!(groups.len(), 2);
        assert_eq!(groups[0].1.len(), 2);
        assert!(read_sweep_csv("0,1\n".as_bytes()).is_err());
        assert!(read_sweep_csv("0,5000,1.0\n".as_bytes()).is_err());
    }

    #[test]
    fn transfer_set_is_per_channel() {
        let cal = fit_calibration(4, &[(code(0), -1.0), (code(4095), 1.0)], 0.05).unwrap();
        let set = TransferSet::default().with_calibration(cal);
        assert_eq!(set.channel(4).kind(), "calibrated");
        assert_eq!(set.channel(3).kind(), "ideal");
        assert_eq!(set.channel(3).voltage(DacCode::ZERO), -8.0);
        assert_eq!(set.channel(4).voltage(DacCode::ZERO), -1.0);
    }
}
