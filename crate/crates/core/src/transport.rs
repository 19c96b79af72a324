//! Waveform planning and exact electrode response.
//!
//! A [`Waveform`] is a sequence of latched frames. Between latch events and
//! switch transitions the electrode is a first-order node, so the response
//! is integrated in closed form: each segment of constant command and
//! switch state is one exponential. Sampling only reads that solution and
//! never feeds back into it.

use std::io::{Read, Write};

use thiserror::Error;

use crate::analog::{AnalogError, EisState, RcNetwork, SwitchState};
use crate::dac::{code_for_voltage, DacError, TransferSet};
use crate::protocol::{update_rate, BusConfig, DacCode, Frame, ProtocolError, CHANNELS};

const TIME_SLACK: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum TransportError {
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
    #[error(transparent)]
    Analog(#[from] AnalogError),
    #[error("channel {channel}: {source}")]
    Channel {
        channel: usize,
        #[source]
        source: DacError,
    },
    #[error("invalid waveform: {0}")]
    InvalidWaveform(String),
    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),
    #[error("schedule incomplete: {0}")]
    ScheduleIncomplete(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("file: {0}")]
    File(String),
}

/// One latched frame and the electrode voltages it commands.
#[derive(Debug, Clone, PartialEq)]
pub struct WaveformEntry {
    pub t: f64,
    pub frame: Frame,
    pub levels: [f64; CHANNELS],
}

#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    entries: Vec<WaveformEntry>,
}

impl Waveform {
    /// Validates ordering and that no two frames are closer than one bus
    /// frame period.
    pub fn new(entries: Vec<WaveformEntry>, bus: &BusConfig) -> Result<Self, TransportError> {
        if entries.is_empty() {
            return Err(TransportError::InvalidWaveform("no frames".into()));
        }
        let period = bus.frame_period();
        for (i, pair) in entries.windows(2).enumerate() {
            let gap = pair[1].t - pair[0].t;
            if !(gap > 0.0) {
                return Err(TransportError::InvalidWaveform(format!(
                    "times not strictly increasing at entry {}",
                    i + 1
                )));
            }
            if gap < period * (1.0 - TIME_SLACK) {
                return Err(TransportError::InvalidWaveform(format!(
                    "entry {} follows after {gap:e} s, shorter than the frame period {period:e} s",
                    i + 1
                )));
            }
        }
        if entries.iter().any(|e| !e.t.is_finite()) {
            return Err(TransportError::InvalidWaveform("non-finite time".into()));
        }
        Ok(Waveform { entries })
    }

    /// Builds entries from bare frames, resolving levels through `transfers`.
    pub fn from_frames(
        frames: Vec<(f64, Frame)>,
        transfers: &TransferSet,
        bus: &BusConfig,
    ) -> Result<Self, TransportError> {
        let entries = frames
            .into_iter()
            .map(|(t, frame)| WaveformEntry {
                t,
                levels: transfers.voltages(&frame),
                frame,
            })
            .collect();
        Waveform::new(entries, bus)
    }

    pub fn entries(&self) -> &[WaveformEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn start(&self) -> f64 {
        self.entries[0].t
    }

    pub fn end(&self) -> f64 {
        self.entries[self.entries.len() - 1].t
    }

    /// Writes "t_s,code0,...,code15" rows with a header.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<(), TransportError> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["t_s".to_string()];
        header.extend((0..CHANNELS).map(|c| format!("code{c}")));
        w.write_record(&header).map_err(file_err)?;
        for e in &self.entries {
            let mut row = vec![format_f64(e.t)];
            row.extend(e.frame.codes().iter().map(|c| c.to_string()));
            w.write_record(&row).map_err(file_err)?;
        }
        w.flush().map_err(|e| TransportError::File(e.to_string()))
    }

    pub fn read_csv<R: Read>(
        input: R,
        transfers: &TransferSet,
        bus: &BusConfig,
    ) -> Result<Self, TransportError> {
        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(true)
            .trim(csv::Trim::All)
            .from_reader(input);
        let mut frames = Vec::new();
        for (idx, rec) in rdr.records().enumerate() {
            let rec = rec.map_err(file_err)?;
            if rec.len() != CHANNELS + 1 {
                return Err(TransportError::File(format!(
                    "row {}: expected {} fields, got {}",
                    idx + 1,
                    CHANNELS + 1,
                    rec.len()
                )));
            }
            let t: f64 = rec[0]
                .parse()
                .map_err(|_| TransportError::File(format!("row {}: bad time", idx + 1)))?;
            let mut codes = [DacCode::ZERO; CHANNELS];
            for (ch, slot) in codes.iter_mut().enumerate() {
                let v: u32 = rec[ch + 1].parse().map_err(|_| {
                    TransportError::File(format!("row {}: bad code{ch}", idx + 1))
                })?;
                *slot = DacCode::new(v)?;
            }
            frames.push((t, Frame::new(codes)));
        }
        Waveform::from_frames(frames, transfers, bus)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EisInterval {
    pub t_start: f64,
    pub t_end: f64,
    pub state: SwitchState,
}

/// Open/closed intervals of the isolation switch.
#[derive(Debug, Clone, PartialEq)]
pub struct EisSchedule {
    intervals: Vec<EisInterval>,
}

impl EisSchedule {
    /// Intervals must be non-empty, ascending and non-overlapping. Gaps are
    /// allowed here and rejected when simulating.
    pub fn new(intervals: Vec<EisInterval>) -> Result<Self, TransportError> {
        if intervals.is_empty() {
            return Err(TransportError::InvalidSchedule("no intervals".into()));
        }
        for (i, iv) in intervals.iter().enumerate() {
            if !(iv.t_end > iv.t_start) || !iv.t_start.is_finite() || !iv.t_end.is_finite() {
                return Err(TransportError::InvalidSchedule(format!(
                    "interval {i} has t_end <= t_start"
                )));
            }
        }
        for (i, pair) in intervals.windows(2).enumerate() {
            if pair[1].t_start < pair[0].t_end - slack(pair[0].t_end) {
                return Err(TransportError::InvalidSchedule(format!(
                    "interval {} overlaps interval {i}",
                    i + 1
                )));
            }
        }
        Ok(EisSchedule { intervals })
    }

    pub fn constant(t_start: f64, t_end: f64, state: SwitchState) -> Result<Self, TransportError> {
        Self::new(vec![EisInterval {
            t_start,
            t_end,
            state,
        }])
    }

    pub fn intervals(&self) -> &[EisInterval] {
        &self.intervals
    }

    pub fn start(&self) -> f64 {
        self.intervals[0].t_start
    }

    pub fn end(&self) -> f64 {
        self.intervals[self.intervals.len() - 1].t_end
    }

    /// First gap between consecutive intervals, if any.
    pub fn first_gap(&self) -> Option<(f64, f64)> {
        self.intervals
            .windows(2)
            .find(|p| p[1].t_start > p[0].t_end + slack(p[0].t_end))
            .map(|p| (p[0].t_end, p[1].t_start))
    }

    pub fn state_at(&self, t: f64) -> Option<SwitchState> {
        self.intervals
            .iter()
            .rev()
            .find(|iv| iv.t_start <= t && t <= iv.t_end)
            .map(|iv| iv.state)
    }

    /// Concatenation; `other` must start where `self` ends.
    pub fn then(&self, other: &EisSchedule) -> Result<EisSchedule, TransportError> {
        let mut intervals = self.intervals.clone();
        intervals.extend_from_slice(&other.intervals);
        EisSchedule::new(intervals)
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<(), TransportError> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["t_start", "t_end", "state"])
            .map_err(file_err)?;
        for iv in &self.intervals {
            w.write_record([
                format_f64(iv.t_start),
                format_f64(iv.t_end),
                iv.state.as_str().to_string(),
            ])
            .map_err(file_err)?;
        }
        w.flush().map_err(|e| TransportError::File(e.to_string()))
    }

    pub fn read_csv<R: Read>(input: R) -> Result<Self, TransportError> {
        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(true)
            .trim(csv::Trim::All)
            .from_reader(input);
        let mut intervals = Vec::new();
        for (idx, rec) in rdr.records().enumerate() {
            let rec = rec.map_err(file_err)?;
            let bad = || TransportError::File(format!("row {}: expected t_start,t_end,state", idx + 1));
            if rec.len() != 3 {
                return Err(bad());
            }
            intervals.push(EisInterval {
                t_start: rec[0].parse().map_err(|_| bad())?,
                t_end: rec[1].parse().map_err(|_| bad())?,
                state: SwitchState::parse(&rec[2]).ok_or_else(bad)?,
            });
        }
        EisSchedule::new(intervals)
    }
}

fn slack(t: f64) -> f64 {
    TIME_SLACK * t.abs().max(1e-12)
}

fn file_err(e: csv::Error) -> TransportError {
    TransportError::File(e.to_string())
}

/// Shortest round-trip float formatting, used for all time columns.
pub(crate) fn format_f64(x: f64) -> String {
    format!("{x:e}")
}

/// Uniform ramp between two electrode voltage sets.
pub fn plan_linear_ramp(
    v_start: &[f64; CHANNELS],
    v_end: &[f64; CHANNELS],
    duration: f64,
    bus: &BusConfig,
    transfers: &TransferSet,
) -> Result<Waveform, TransportError> {
    if !(duration > 0.0) {
        return Err(TransportError::InvalidArgument(format!(
            "duration must be positive, got {duration}"
        )));
    }
    if bus.clock_hz() > bus.max_reliable_clock_hz() {
        return Err(ProtocolError::Overclock {
            clock_hz: bus.clock_hz(),
            max_hz: bus.max_reliable_clock_hz(),
        }
        .into());
    }
    let n = (duration * update_rate(bus)).floor() as usize + 1;
    let mut entries = Vec::with_capacity(n);
    for k in 0..n {
        let (t, frac) = if n == 1 {
            (0.0, 1.0)
        } else {
            let frac = k as f64 / (n - 1) as f64;
            (duration * frac, frac)
        };
        let mut codes = [DacCode::ZERO; CHANNELS];
        let mut levels = [0.0; CHANNELS];
        for ch in 0..CHANNELS {
            let target = v_start[ch] + (v_end[ch] - v_start[ch]) * frac;
            let transfer = transfers.channel(ch);
            let code = code_for_voltage(transfer, target)
                .map_err(|source| TransportError::Channel { channel: ch, source })?;
            codes[ch] = code;
            levels[ch] = transfer.voltage(code);
        }
        entries.push(WaveformEntry {
            t,
            frame: Frame::new(codes),
            levels,
        });
    }
    Waveform::new(entries, bus)
}

/// One constant-command, constant-state stretch of the response.
#[derive(Debug, Clone, Copy)]
struct Segment {
    t0: f64,
    t1: f64,
    state: SwitchState,
    v0: [f64; CHANNELS],
    target: [f64; CHANNELS],
    tau: f64,
    /// Command in effect (the target while closed).
    command: [f64; CHANNELS],
}

impl Segment {
    fn eval(&self, t: f64) -> [f64; CHANNELS] {
        let decay = (-(t - self.t0) / self.tau).exp();
        std::array::from_fn(|ch| self.target[ch] + (self.v0[ch] - self.target[ch]) * decay)
    }
}

/// Closed-form solution over a schedule window.
#[derive(Debug, Clone)]
pub struct Response {
    segments: Vec<Segment>,
}

impl Response {
    /// Propagates from `initial` at the schedule start. Before the first
    /// frame latches, the command is `initial`.
    pub fn solve(
        wf: &Waveform,
        net: &RcNetwork,
        eis: &EisState,
        sched: &EisSchedule,
        initial: &[f64; CHANNELS],
    ) -> Result<Self, TransportError> {
        if let Some((a, b)) = sched.first_gap() {
            return Err(TransportError::ScheduleIncomplete(format!(
                "no switch state between {a:e} s and {b:e} s"
            )));
        }
        let (start, end) = (sched.start(), sched.end());
        if wf.start() < start - slack(start) || wf.end() > end + slack(end) {
            return Err(TransportError::ScheduleIncomplete(format!(
                "schedule [{start:e}, {end:e}] s does not cover waveform [{:e}, {:e}] s",
                wf.start(),
                wf.end()
            )));
        }

        let divider = match net.r_parallel() {
            Some(rp) => {
                let rs = net.series_resistance(&eis.with_state(SwitchState::Closed));
                rp / (rs + rp)
            }
            None => 1.0,
        };

        let mut events: Vec<f64> = wf.entries().iter().map(|e| e.t).collect();
        for iv in sched.intervals() {
            events.push(iv.t_start);
            events.push(iv.t_end);
        }
        events.retain(|&t| t >= start && t <= end);
        events.sort_by(|a, b| a.total_cmp(b));
        events.dedup();

        let entries = wf.entries();
        let mut next_entry = 0;
        let mut command = *initial;
        let mut v = *initial;
        let mut segments = Vec::with_capacity(events.len());
        for pair in events.windows(2) {
            let (t0, t1) = (pair[0], pair[1]);
            while next_entry < entries.len() && entries[next_entry].t <= t0 {
                command = entries[next_entry].levels;
                next_entry += 1;
            }
            let mid = 0.5 * (t0 + t1);
            let state = sched.state_at(mid).ok_or_else(|| {
                TransportError::ScheduleIncomplete(format!("no switch state at {mid:e} s"))
            })?;
            let tau = net.tau(&eis.with_state(state));
            let target = match state {
                SwitchState::Closed => command.map(|c| c * divider),
                SwitchState::Open => [0.0; CHANNELS],
            };
            let seg = Segment {
                t0,
                t1,
                state,
                v0: v,
                target,
                tau,
                command,
            };
            v = seg.eval(t1);
            segments.push(seg);
        }
        if segments.is_empty() {
            return Err(TransportError::ScheduleIncomplete("empty window".into()));
        }
        Ok(Response { segments })
    }

    pub fn start(&self) -> f64 {
        self.segments[0].t0
    }

    pub fn end(&self) -> f64 {
        self.segments[self.segments.len() - 1].t1
    }

    fn segment_at(&self, t: f64) -> &Segment {
        let idx = self.segments.partition_point(|s| s.t1 < t);
        &self.segments[idx.min(self.segments.len() - 1)]
    }

    /// Electrode voltages at `t` (clamped into the window).
    pub fn voltage_at(&self, t: f64) -> [f64; CHANNELS] {
        let t = t.clamp(self.start(), self.end());
        self.segment_at(t).eval(t)
    }

    pub fn final_voltage(&self) -> [f64; CHANNELS] {
        self.voltage_at(self.end())
    }
}

/// Sampled electrode voltages, one row per channel.
#[derive(Debug, Clone, PartialEq)]
pub struct Trace {
    pub times: Vec<f64>,
    pub channels: Vec<Vec<f64>>,
}

impl Trace {
    /// Writes "t_s,channel,volts" rows with a header.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<(), TransportError> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["t_s", "channel", "volts"]).map_err(file_err)?;
        for (i, t) in self.times.iter().enumerate() {
            for (ch, series) in self.channels.iter().enumerate() {
                w.write_record([format_f64(*t), ch.to_string(), format_f64(series[i])])
                    .map_err(file_err)?;
            }
        }
        w.flush().map_err(|e| TransportError::File(e.to_string()))
    }
}

/// Samples the exact response every `sample_dt` over the schedule window.
pub fn simulate_electrode_voltage(
    wf: &Waveform,
    net: &RcNetwork,
    eis: &EisState,
    sched: &EisSchedule,
    initial: &[f64; CHANNELS],
    sample_dt: f64,
) -> Result<Trace, TransportError> {
    if !(sample_dt > 0.0) {
        return Err(TransportError::InvalidArgument(format!(
            "sample_dt must be positive, got {sample_dt}"
        )));
    }
    let resp = Response::solve(wf, net, eis, sched, initial)?;
    let (start, end) = (resp.start(), resp.end());
    let count = ((end - start) / sample_dt * (1.0 + 1e-12)).floor() as usize + 1;
    let mut times = Vec::with_capacity(count);
    let mut channels: Vec<Vec<f64>> = (0..CHANNELS).map(|_| Vec::with_capacity(count)).collect();
    for i in 0..count {
        let t = start + i as f64 * sample_dt;
        let v = resp.voltage_at(t);
        times.push(t);
        for (ch, series) in channels.iter_mut().enumerate() {
            series.push(v[ch]);
        }
    }
    Ok(Trace { times, channels })
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepReport {
    pub entry: usize,
    pub channel: usize,
    pub t: f64,
    pub delta_v: f64,
    pub settle_time: f64,
    pub window: f64,
    pub flagged: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ChannelSettling {
    pub settle_time: f64,
    pub max_overshoot: f64,
    pub final_error: f64,
    pub droop: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SettlingReport {
    pub channels: [ChannelSettling; CHANNELS],
    pub steps: Vec<StepReport>,
}

impl SettlingReport {
    pub fn flagged(&self) -> impl Iterator<Item = &StepReport> {
        self.steps.iter().filter(|s| s.flagged)
    }

    pub fn all_settled(&self) -> bool {
        self.flagged().next().is_none()
    }

    pub fn max_settle_time(&self) -> f64 {
        self.channels
            .iter()
            .map(|c| c.settle_time)
            .fold(0.0, f64::max)
    }
}

/// Time for a first-order step of `delta_v` to come within `tolerance`.
pub fn settle_time(delta_v: f64, tau: f64, tolerance: f64) -> f64 {
    let d = delta_v.abs();
    if d <= tolerance {
        0.0
    } else {
        tau * (d / tolerance).ln()
    }
}

/// Per-step settling analysis. A step is flagged when it does not settle
/// before the next frame (or the end of the schedule for the last one).
pub fn settling_check(
    wf: &Waveform,
    net: &RcNetwork,
    eis: &EisState,
    sched: &EisSchedule,
    initial: &[f64; CHANNELS],
    tolerance: f64,
) -> Result<SettlingReport, TransportError> {
    if !(tolerance > 0.0) {
        return Err(TransportError::InvalidArgument(format!(
            "tolerance must be positive, got {tolerance}"
        )));
    }
    let resp = Response::solve(wf, net, eis, sched, initial)?;
    let entries = wf.entries();
    let tau_closed = net.tau(&eis.with_state(SwitchState::Closed));
    let mut channels = [ChannelSettling::default(); CHANNELS];
    let mut steps = Vec::new();

    for (k, entry) in entries.iter().enumerate() {
        let v_now = resp.voltage_at(entry.t);
        let window = match entries.get(k + 1) {
            Some(next) => next.t - entry.t,
            None => sched.end() - entry.t,
        };
        let state = sched.state_at(entry.t).unwrap_or(SwitchState::Open);
        for ch in 0..CHANNELS {
            let delta_v = entry.levels[ch] - v_now[ch];
            let settle = match state {
                SwitchState::Closed => settle_time(delta_v, tau_closed, tolerance),
                SwitchState::Open if delta_v.abs() <= tolerance => 0.0,
                SwitchState::Open => f64::INFINITY,
            };
            let flagged = settle > window;
            channels[ch].settle_time = channels[ch].settle_time.max(settle);
            steps.push(StepReport {
                entry: k,
                channel: ch,
                t: entry.t,
                delta_v,
                settle_time: settle,
                window,
                flagged,
            });
        }
    }

    // Overshoot can only appear at segment starts: inside a segment the
    // distance to the target shrinks monotonically.
    let mut prev_command = *initial;
    for seg in resp.segments.iter().filter(|s| s.state == SwitchState::Closed) {
        for ch in 0..CHANNELS {
            let dir = (seg.command[ch] - prev_command[ch]).signum();
            if dir != 0.0 {
                let excess = (seg.v0[ch] - seg.target[ch]) * dir;
                channels[ch].max_overshoot = channels[ch].max_overshoot.max(excess);
            }
        }
        prev_command = seg.command;
    }

    let final_v = resp.final_voltage();
    let last = &entries[entries.len() - 1].levels;
    for ch in 0..CHANNELS {
        channels[ch].final_error = (final_v[ch] - last[ch]).abs();
    }

    for iv in sched
        .intervals()
        .iter()
        .filter(|iv| iv.state == SwitchState::Open)
    {
        let a = resp.voltage_at(iv.t_start);
        let b = resp.voltage_at(iv.t_end);
        for ch in 0..CHANNELS {
            channels[ch].droop = channels[ch].droop.max((a[ch] - b[ch]).abs());
        }
    }

    Ok(SettlingReport { channels, steps })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ShuttleReport {
    pub distance_m: f64,
    pub speed_m_per_s: f64,
    pub duration_s: f64,
    pub frame_count: usize,
    pub frame_spacing_s: f64,
    pub frame_period_s: f64,
    pub max_step_v: f64,
    pub max_settle_s: f64,
    pub flagged_steps: usize,
    pub monotone: bool,
    pub return_error_v: f64,
    pub cycles_requested: usize,
    pub cycles_feasible: usize,
}

impl ShuttleReport {
    pub fn feasible(&self) -> bool {
        self.cycles_feasible == self.cycles_requested
    }
}

/// Inputs to [`shuttle_scenario`] beyond the distance and speed.
#[derive(Debug, Clone)]
pub struct ShuttlePlan<'a> {
    pub bus: &'a BusConfig,
    pub net: &'a RcNetwork,
    pub eis: &'a EisState,
    pub transfers: &'a TransferSet,
    pub v_start: [f64; CHANNELS],
    pub v_end: [f64; CHANNELS],
    pub tolerance: f64,
    pub cycles: usize,
}

/// Back-and-forth shuttle with the switch closed throughout.
///
/// One round trip is planned and integrated. Every round trip starts from
/// the same settled state, so one feasible trip (no flagged steps,
/// monotone tracking, return to start within tolerance) covers all cycles.
pub fn shuttle_scenario(
    distance: f64,
    speed: f64,
    plan: &ShuttlePlan<'_>,
) -> Result<(ShuttleReport, Waveform, EisSchedule), TransportError> {
    if !(distance > 0.0 && speed > 0.0) {
        return Err(TransportError::InvalidArgument(format!(
            "distance and speed must be positive, got {distance}, {speed}"
        )));
    }
    let duration = distance / speed;
    let forward = plan_linear_ramp(&plan.v_start, &plan.v_end, duration, plan.bus, plan.transfers)?;
    let backward = plan_linear_ramp(&plan.v_end, &plan.v_start, duration, plan.bus, plan.transfers)?;
    let frame_count = forward.len();
    let spacing = if frame_count > 1 {
        forward.entries()[1].t - forward.entries()[0].t
    } else {
        plan.bus.frame_period()
    };

    let mut entries = forward.entries().to_vec();
    let offset = forward.end() + spacing;
    let reverse_at = offset;
    entries.extend(backward.entries().iter().map(|e| WaveformEntry {
        t: e.t + offset,
        ..e.clone()
    }));
    let round_trip = Waveform::new(entries, plan.bus)?;
    let sched = EisSchedule::constant(0.0, round_trip.end() + spacing, SwitchState::Closed)?;
    let initial = forward.entries()[0].levels;

    let report = settling_check(&round_trip, plan.net, plan.eis, &sched, &initial, plan.tolerance)?;
    let resp = Response::solve(&round_trip, plan.net, plan.eis, &sched, &initial)?;

    // Monotone tracking: check each half at every event and at quarter
    // spacing in between.
    let dt = spacing / 4.0;
    let n = ((sched.end() - sched.start()) / dt).floor() as usize + 1;
    let mut monotone = true;
    let mut prev = resp.voltage_at(0.0);
    let mut prev_t = 0.0;
    for i in 1..n {
        let t = i as f64 * dt;
        let v = resp.voltage_at(t);
        let same_half = (prev_t < reverse_at) == (t < reverse_at);
        if same_half {
            let forward_half = t < reverse_at;
            for ch in 0..CHANNELS {
                let dir = (plan.v_end[ch] - plan.v_start[ch]).signum();
                let dir = if forward_half { dir } else { -dir };
                if (v[ch] - prev[ch]) * dir < -1e-12 {
                    monotone = false;
                }
            }
        }
        prev = v;
        prev_t = t;
    }

    let final_v = resp.final_voltage();
    let return_error_v = (0..CHANNELS)
        .map(|ch| (final_v[ch] - initial[ch]).abs())
        .fold(0.0, f64::max);
    let max_step_v = report
        .steps
        .iter()
        .map(|s| s.delta_v.abs())
        .fold(0.0, f64::max);
    let flagged_steps = report.flagged().count();
    let feasible = flagged_steps == 0 && monotone && return_error_v <= plan.tolerance;

    Ok((
        ShuttleReport {
            distance_m: distance,
            speed_m_per_s: speed,
            duration_s: duration,
            frame_count,
            frame_spacing_s: spacing,
            frame_period_s: plan.bus.frame_period(),
            max_step_v,
            max_settle_s: report.max_settle_time(),
            flagged_steps,
            monotone,
            return_error_v,
            cycles_requested: plan.cycles,
            cycles_feasible: if feasible { plan.cycles } else { 0 },
        },
        round_trip,
        sched,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dac::IdealTransfer;
    use approx::assert_relative_eq;

    fn ideal() -> TransferSet {
        TransferSet::ideal(IdealTransfer::default())
    }

    fn levels_entry(t: f64, v: f64) -> WaveformEntry {
        WaveformEntry {
            t,
            frame: Frame::default(),
            levels: [v; CHANNELS],
        }
    }

    /// tau = 3.3 µs: 3.3 kΩ into 1 nF exactly.
    fn net_1nf() -> RcNetwork {
        RcNetwork::new(0.0, 1e-12, 1e-9 - 1e-12, None).unwrap()
    }

    #[test]
    fn ramp_frame_count() {
        let bus = BusConfig::with_clock(200e3).unwrap();
        let v0 = [-1.0; CHANNELS];
        let v1 = [1.0; CHANNELS];
        let wf = plan_linear_ramp(&v0, &v1, 0.04, &bus, &ideal()).unwrap();
        assert_eq!(wf.len(), 42);
        assert_eq!(wf.start(), 0.0);
        assert_relative_eq!(wf.end(), 0.04, max_relative = 1e-12);
        for pair in wf.entries().windows(2) {
            assert!(pair[1].t - pair[0].t >= bus.frame_period());
        }
    }

    #[test]
    fn flat_ramp_and_degenerate() {
        let bus = BusConfig::with_clock(200e3).unwrap();
        let v = [0.5; CHANNELS];
        let wf = plan_linear_ramp(&v, &v, 0.01, &bus, &ideal()).unwrap();
        assert!(wf.entries().iter().all(|e| e.frame == wf.entries()[0].frame));

        let wf = plan_linear_ramp(&[0.0; CHANNELS], &v, 1e-4, &bus, &ideal()).unwrap();
        assert_eq!(wf.len(), 1);
        let code = code_for_voltage(&IdealTransfer::default(), 0.5).unwrap();
        assert_eq!(wf.entries()[0].frame.code(0), code);
    }

    #[test]
    fn ramp_out_of_range_names_channel() {
        let bus = BusConfig::with_clock(200e3).unwrap();
        let mut v1 = [0.0; CHANNELS];
        v1[9] = 9.0;
        match plan_linear_ramp(&[0.0; CHANNELS], &v1, 0.01, &bus, &ideal()) {
            Err(TransportError::Channel { channel: 9, .. }) => {}
            other => panic!("unexpected {other:?}"),
        }
        assert!(plan_linear_ramp(&v1, &v1, 0.0, &bus, &ideal()).is_err());
    }

    #[test]
    fn step_response_at_tau() {
        let bus = BusConfig::with_clock(50e6).unwrap();
        let wf = Waveform::new(vec![levels_entry(0.0, 1.0)], &bus).unwrap();
        let sched = EisSchedule::constant(0.0, 20e-6, SwitchState::Closed).unwrap();
        let net = net_1nf();
        let eis = EisState::closed();
        let tau = net.tau(&eis);
        assert_relative_eq!(tau, 3.3e-6, max_relative = 1e-12);
        let resp = Response::solve(&wf, &net, &eis, &sched, &[0.0; CHANNELS]).unwrap();
        assert_relative_eq!(resp.voltage_at(tau)[0], 1.0 - (-1.0f64).exp(), max_relative = 1e-12);
        assert_relative_eq!(resp.voltage_at(tau)[0], 0.6321, epsilon = 1e-4);
    }

    #[test]
    fn droop_while_open() {
        let bus = BusConfig::with_clock(50e6).unwrap();
        let net = RcNetwork::electrode(1e-9).unwrap();
        let eis = EisState::closed();
        let tau_c = net.tau(&eis);
        let wf = Waveform::new(vec![levels_entry(0.0, 1.0)], &bus).unwrap();
        let t_open = 5.0 * tau_c;
        let sched = EisSchedule::new(vec![
            EisInterval {
                t_start: 0.0,
                t_end: t_open,
                state: SwitchState::Closed,
            },
            EisInterval {
                t_start: t_open,
                t_end: t_open + 60.0,
                state: SwitchState::Open,
            },
        ])
        .unwrap();
        let report = settling_check(&wf, &net, &eis, &sched, &[0.0; CHANNELS], 1e-3).unwrap();
        let tau_open: f64 = 1e12 * 1.001e-9;
        let held = 1.0 - (-5.0f64).exp();
        let expected = held * (1.0 - (-60.0 / tau_open).exp());
        assert_relative_eq!(report.channels[0].droop, expected, max_relative = 1e-9);
        assert_relative_eq!(report.channels[0].droop / held, 0.0582, epsilon = 1e-3);
    }

    #[test]
    fn ramp_tracking_lag() {
        // 4 µs staircase of 10 mV steps, tau = 3.3 µs: steady-state lag ~ tau
        let bus = BusConfig::with_clock(48e6).unwrap();
        let period = 4e-6;
        let slope = 0.01 / period;
        let entries: Vec<_> = (0..200)
            .map(|k| levels_entry(k as f64 * period, 0.01 * (k + 1) as f64))
            .collect();
        let wf = Waveform::new(entries, &bus).unwrap();
        let sched = EisSchedule::constant(0.0, 200.0 * period, SwitchState::Closed).unwrap();
        let net = net_1nf();
        let eis = EisState::closed();
        let resp = Response::solve(&wf, &net, &eis, &sched, &[0.0; CHANNELS]).unwrap();
        // average lag over one staircase period, late in the ramp
        let k0 = 150;
        let n = 400;
        let mut lag = 0.0;
        for i in 0..n {
            let t = k0 as f64 * period + period * (i as f64 + 0.5) / n as f64;
            let ideal_ramp = slope * t;
            lag += (ideal_ramp - resp.voltage_at(t)[0]) / slope;
        }
        lag /= n as f64;
        // the staircase itself leads a continuous ramp by half a period
        let tau = net.tau(&eis);
        assert_relative_eq!(lag, tau - period / 2.0, max_relative = 1e-3);
    }

    #[test]
    fn settling_flags() {
        let bus = BusConfig::with_clock(48e6).unwrap();
        let net = net_1nf();
        let eis = EisState::closed();
        let entries = vec![levels_entry(0.0, 1.0), levels_entry(4e-6, 1.0)];
        let wf = Waveform::new(entries, &bus).unwrap();
        let sched = EisSchedule::constant(0.0, 8e-6, SwitchState::Closed).unwrap();
        let r = settling_check(&wf, &net, &eis, &sched, &[0.0; CHANNELS], 0.01).unwrap();
        let first = &r.steps[0];
        assert_relative_eq!(first.settle_time, 3.3e-6 * 100f64.ln(), max_relative = 1e-12);
        assert_relative_eq!(first.settle_time, 15.2e-6, max_relative = 1e-3);
        assert!(first.flagged);
        assert!(!r.all_settled());

        let small = RcNetwork::new(0.0, 1e-12, 9e-12, None).unwrap();
        let r = settling_check(&wf, &small, &eis, &sched, &[0.0; CHANNELS], 0.01).unwrap();
        assert_relative_eq!(r.steps[0].settle_time, 152e-9, max_relative = 1e-3);
        assert!(r.all_settled());

        assert_eq!(settle_time(0.005, 1.0, 0.01), 0.0);
        assert!(settling_check(&wf, &net, &eis, &sched, &[0.0; CHANNELS], 0.0).is_err());
    }

    #[test]
    fn first_order_never_overshoots() {
        let bus = BusConfig::with_clock(48e6).unwrap();
        let entries = vec![
            levels_entry(0.0, 1.0),
            levels_entry(5e-6, -1.0),
            levels_entry(10e-6, 0.5),
        ];
        let wf = Waveform::new(entries, &bus).unwrap();
        let sched = EisSchedule::constant(0.0, 50e-6, SwitchState::Closed).unwrap();
        let r = settling_check(&wf, &net_1nf(), &EisState::closed(), &sched, &[0.0; CHANNELS], 1e-3)
            .unwrap();
        assert_eq!(r.channels[0].max_overshoot, 0.0);
        assert!(r.channels[0].final_error < 1e-3);
    }

    #[test]
    fn schedule_gaps_and_coverage() {
        let bus = BusConfig::with_clock(48e6).unwrap();
        let wf = Waveform::new(vec![levels_entry(0.0, 1.0)], &bus).unwrap();
        let gappy = EisSchedule::new(vec![
            EisInterval {
                t_start: 0.0,
                t_end: 1e-6,
                state: SwitchState::Closed,
            },
            EisInterval {
                t_start: 2e-6,
                t_end: 3e-6,
                state: SwitchState::Open,
            },
        ])
        .unwrap();
        let err =
            simulate_electrode_voltage(&wf, &net_1nf(), &EisState::closed(), &gappy, &[0.0; 16], 1e-7)
                .unwrap_err();
        assert!(matches!(err, TransportError::ScheduleIncomplete(_)));

        let late = EisSchedule::constant(1e-6, 2e-6, SwitchState::Closed).unwrap();
        assert!(matches!(
            Response::solve(&wf, &net_1nf(), &EisState::closed(), &late, &[0.0; 16]),
            Err(TransportError::ScheduleIncomplete(_))
        ));

        let overlapping = EisSchedule::new(vec![
            EisInterval {
                t_start: 0.0,
                t_end: 2e-6,
                state: SwitchState::Closed,
            },
            EisInterval {
                t_start: 1e-6,
                t_end: 3e-6,
                state: SwitchState::Open,
            },
        ]);
        assert!(overlapping.is_err());
    }

    #[test]
    fn waveform_validation() {
        let bus = BusConfig::with_clock(200e3).unwrap();
        let too_close = vec![levels_entry(0.0, 0.0), levels_entry(1e-4, 0.0)];
        assert!(Waveform::new(too_close, &bus).is_err());
        let backwards = vec![levels_entry(1.0, 0.0), levels_entry(0.0, 0.0)];
        assert!(Waveform::new(backwards, &bus).is_err());
        assert!(Waveform::new(vec![], &bus).is_err());
    }

    #[test]
    fn csv_roundtrip_files() {
        let bus = BusConfig::with_clock(200e3).unwrap();
        let set = ideal();
        let wf = plan_linear_ramp(&[-2.0; CHANNELS], &[3.0; CHANNELS], 0.01, &bus, &set).unwrap();
        let mut buf = Vec::new();
        wf.write_csv(&mut buf).unwrap();
        let back = Waveform::read_csv(buf.as_slice(), &set, &bus).unwrap();
        assert_eq!(back, wf);

        let sched = EisSchedule::new(vec![
            EisInterval {
                t_start: 0.0,
                t_end: 0.5,
                state: SwitchState::Closed,
            },
            EisInterval {
                t_start: 0.5,
                t_end: 2.0,
                state: SwitchState::Open,
            },
        ])
        .unwrap();
        let mut buf = Vec::new();
        sched.write_csv(&mut buf).unwrap();
        assert_eq!(
            String::from_utf8(buf.clone()).unwrap(),
            "t_start,t_end,state\n0e0,5e-1,closed\n5e-1,2e0,open\n"
        );
        assert_eq!(EisSchedule::read_csv(buf.as_slice()).unwrap(), sched);
    }

    #[test]
    fn shuttle_round_trip() {
        let bus = BusConfig::with_clock(200e3).unwrap();
        let net = RcNetwork::electrode(1e-9).unwrap();
        let eis = EisState::closed();
        let set = ideal();
        let v_start: [f64; CHANNELS] = std::array::from_fn(|k| -8.0 + 16.0 * k as f64 / 15.0);
        let mut v_end = v_start;
        v_end.reverse();
        let plan = ShuttlePlan {
            bus: &bus,
            net: &net,
            eis: &eis,
            transfers: &set,
            v_start,
            v_end,
            tolerance: IdealTransfer::default().lsb(),
            cycles: 200,
        };
        let (report, wf, _) = shuttle_scenario(80e-6, 2e-3, &plan).unwrap();
        assert_relative_eq!(report.duration_s, 0.04, max_relative = 1e-12);
        assert_eq!(report.frame_count, 42);
        assert_eq!(wf.len(), 84);
        assert_eq!(report.flagged_steps, 0);
        assert!(report.monotone);
        assert!(report.max_step_v < 0.4);
        assert!(report.max_settle_s < report.frame_period_s);
        assert!(report.feasible());
    }
}
