//! Serial programming bus for the 16-channel DAC array.
//!
//! The chip exposes one shift chain: sixteen 12-bit registers daisy-chained
//! behind a single serial input. A frame is therefore always 192 bits, and
//! nothing latches until the whole frame has been shifted in.
//!
//! On the wire, channel 15 goes out first and channel 0 last, so that after
//! 192 shift cycles channel 0's word sits at the far end of the chain. Each
//! word is sent most-significant bit first.

use std::fmt;
use std::str::FromStr;

use thiserror::Error;

/// Number of electrode channels on the chip.
pub const CHANNELS: usize = 16;
/// Resolution of each DAC word.
pub const CODE_BITS: usize = 12;
/// Bits in one programming frame.
pub const FRAME_BITS: usize = CHANNELS * CODE_BITS;
/// Largest valid code.
pub const MAX_CODE: u16 = (1 << CODE_BITS) - 1;

/// Highest clock at which the bus was run without conversion errors.
pub const DEFAULT_MAX_RELIABLE_CLOCK_HZ: f64 = 50e6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ProtocolError {
    #[error("code {0} does not fit in 12 bits")]
    CodeOutOfRange(u32),
    #[error("malformed frame: expected {FRAME_BITS} bits, got {0}")]
    MalformedFrame(usize),
    #[error("malformed frame: invalid bit character {0:?}")]
    InvalidBitChar(char),
    #[error("malformed frame line: {0}")]
    MalformedLine(String),
    #[error("invalid bus configuration: {0}")]
    InvalidConfig(String),
    #[error("clock {clock_hz} Hz exceeds reliable limit {max_hz} Hz")]
    Overclock { clock_hz: f64, max_hz: f64 },
    #[error("no frames to send")]
    NoFrames,
}

/// A 12-bit DAC code word.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct DacCode(u16);

impl DacCode {
    pub const ZERO: DacCode = DacCode(0);
    pub const MAX: DacCode = DacCode(MAX_CODE);
    pub const MIDSCALE: DacCode = DacCode(1 << (CODE_BITS - 1));

    pub fn new(value: u32) -> Result<Self, ProtocolError> {
        if value > MAX_CODE as u32 {
            return Err(ProtocolError::CodeOutOfRange(value));
        }
        Ok(DacCode(value as u16))
    }

    /// Keeps the low 12 bits.
    pub fn from_masked(value: u16) -> Self {
        DacCode(value & MAX_CODE)
    }

    pub fn value(self) -> u16 {
        self.0
    }

    /// Iterator over all 4096 codes in ascending order.
    pub fn all() -> impl DoubleEndedIterator<Item = DacCode> + ExactSizeIterator {
        (0..=MAX_CODE).map(DacCode)
    }
}

impl fmt::Display for DacCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// One programming frame: a code for every channel, indexed by electrode.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct Frame {
    codes: [DacCode; CHANNELS],
}

impl Frame {
    pub fn new(codes: [DacCode; CHANNELS]) -> Self {
        Frame { codes }
    }

    pub fn uniform(code: DacCode) -> Self {
        Frame {
            codes: [code; CHANNELS],
        }
    }

    pub fn codes(&self) -> &[DacCode; CHANNELS] {
        &self.codes
    }

    pub fn code(&self, channel: usize) -> DacCode {
        self.codes[channel]
    }

    pub fn with_code(mut self, channel: usize, code: DacCode) -> Self {
        self.codes[channel] = code;
        self
    }

    /// Parses one dump line of 16 comma-separated decimal codes.
    pub fn parse_line(line: &str) -> Result<Self, ProtocolError> {
        let fields: Vec<&str> = line.trim().split(',').map(str::trim).collect();
        if fields.len() != CHANNELS {
            return Err(ProtocolError::MalformedLine(format!(
                "expected {CHANNELS} codes, got {}",
                fields.len()
            )));
        }
        let mut codes = [DacCode::ZERO; CHANNELS];
        for (slot, field) in codes.iter_mut().zip(fields) {
            let value: u32 = field
                .parse()
                .map_err(|_| ProtocolError::MalformedLine(format!("not a code: {field:?}")))?;
            *slot = DacCode::new(value)?;
        }
        Ok(Frame { codes })
    }

    /// Dump line: 16 comma-separated decimal codes.
    pub fn to_line(&self) -> String {
        self.codes
            .iter()
            .map(|c| c.to_string())
            .collect::<Vec<_>>()
            .join(",")
    }
}

/// Exactly 192 bits in wire order (index 0 is shifted first).
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct BitString(Vec<bool>);

impl BitString {
    pub fn from_bits(bits: Vec<bool>) -> Result<Self, ProtocolError> {
        if bits.len() != FRAME_BITS {
            return Err(ProtocolError::MalformedFrame(bits.len()));
        }
        Ok(BitString(bits))
    }

    pub fn bits(&self) -> &[bool] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl fmt::Display for BitString {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for &b in &self.0 {
            f.write_str(if b { "1" } else { "0" })?;
        }
        Ok(())
    }
}

impl FromStr for BitString {
    type Err = ProtocolError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bits = s
            .trim()
            .chars()
            .map(|c| match c {
                '0' => Ok(false),
                '1' => Ok(true),
                other => Err(ProtocolError::InvalidBitChar(other)),
            })
            .collect::<Result<Vec<_>, _>>()?;
        BitString::from_bits(bits)
    }
}

/// Serializes a frame into wire order.
pub fn encode_frame(frame: &Frame) -> BitString {
    let mut bits = Vec::with_capacity(FRAME_BITS);
    for code in frame.codes.iter().rev() {
        let v = code.value();
        for bit in (0..CODE_BITS).rev() {
            bits.push((v >> bit) & 1 == 1);
        }
    }
    BitString(bits)
}

/// Inverse of [`encode_frame`].
pub fn decode_frame(bits: &[bool]) -> Result<Frame, ProtocolError> {
    if bits.len() != FRAME_BITS {
        return Err(ProtocolError::MalformedFrame(bits.len()));
    }
    let mut codes = [DacCode::ZERO; CHANNELS];
    for (word_idx, word) in bits.chunks_exact(CODE_BITS).enumerate() {
        let value = word.iter().fold(0u16, |acc, &b| (acc << 1) | b as u16);
        codes[CHANNELS - 1 - word_idx] = DacCode(value);
    }
    Ok(Frame { codes })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BusConfig {
    clock_hz: f64,
    max_reliable_clock_hz: f64,
}

impl BusConfig {
    pub fn new(clock_hz: f64, max_reliable_clock_hz: f64) -> Result<Self, ProtocolError> {
        if !(clock_hz > 0.0 && clock_hz.is_finite()) {
            return Err(ProtocolError::InvalidConfig(format!(
                "clock_hz must be positive, got {clock_hz}"
            )));
        }
        if !(max_reliable_clock_hz > 0.0 && max_reliable_clock_hz.is_finite()) {
            return Err(ProtocolError::InvalidConfig(format!(
                "max_reliable_clock_hz must be positive, got {max_reliable_clock_hz}"
            )));
        }
        Ok(BusConfig {
            clock_hz,
            max_reliable_clock_hz,
        })
    }

    /// Bus at `clock_hz` with the default reliability limit.
    pub fn with_clock(clock_hz: f64) -> Result<Self, ProtocolError> {
        Self::new(clock_hz, DEFAULT_MAX_RELIABLE_CLOCK_HZ)
    }

    pub fn clock_hz(&self) -> f64 {
        self.clock_hz
    }

    pub fn max_reliable_clock_hz(&self) -> f64 {
        self.max_reliable_clock_hz
    }

    /// Time to shift one whole frame.
    pub fn frame_period(&self) -> f64 {
        FRAME_BITS as f64 / self.clock_hz
    }
}

/// Electrode update rate: one update per full frame.
pub fn update_rate(cfg: &BusConfig) -> f64 {
    cfg.clock_hz / FRAME_BITS as f64
}

/// Latch event produced by [`simulate_bus`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Latch {
    pub time_s: f64,
    pub frame: Frame,
}

/// Shifts `frames` back to back; frame `k` latches at `(k+1)·192/clock`.
pub fn simulate_bus(cfg: &BusConfig, frames: &[Frame]) -> Result<Vec<Latch>, ProtocolError> {
    if cfg.clock_hz > cfg.max_reliable_clock_hz {
        return Err(ProtocolError::Overclock {
            clock_hz: cfg.clock_hz,
            max_hz: cfg.max_reliable_clock_hz,
        });
    }
    if frames.is_empty() {
        return Err(ProtocolError::NoFrames);
    }
    let period = cfg.frame_period();
    Ok(frames
        .iter()
        .enumerate()
        .map(|(k, frame)| Latch {
            time_s: (k + 1) as f64 * period,
            frame: *frame,
        })
        .collect())
}

/// Bit-level model of the daisy chain: a 192-stage shift register whose
/// contents are copied to the DAC latches on demand.
#[derive(Debug, Clone)]
pub struct ShiftChain {
    stages: Vec<bool>,
    latched: Frame,
}

impl Default for ShiftChain {
    fn default() -> Self {
        ShiftChain {
            stages: vec![false; FRAME_BITS],
            latched: Frame::default(),
        }
    }
}

impl ShiftChain {
    /// Shifts one bit in at the chain input. Stage 0 is the far end
    /// (channel 0's MSB after a full frame).
    pub fn shift_in(&mut self, bit: bool) {
        self.stages.remove(0);
        self.stages.push(bit);
    }

    pub fn shift_frame(&mut self, bits: &BitString) {
        for &b in bits.bits() {
            self.shift_in(b);
        }
    }

    /// Copies the chain into the output latches, all channels at once.
    pub fn latch(&mut self) -> Frame {
        // Stage order equals wire order once a full frame has been shifted.
        self.latched = decode_frame(&self.stages).expect("chain length is fixed");
        self.latched
    }

    pub fn latched(&self) -> &Frame {
        &self.latched
    }
}
