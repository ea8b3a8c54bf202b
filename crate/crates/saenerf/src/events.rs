//! Event-camera simulation, storage, and window accumulation.
//!
//! The simulator follows the standard reference-tracking contrast model: each
//! pixel keeps the log intensity at which it last fired; whenever the
//! (linearly interpolated) signal moves a full threshold away from that
//! reference, an event fires and the reference steps by one threshold toward
//! the signal. Residual sub-threshold change carries over between frames, so
//! the accumulated polarity count times the threshold tracks the true
//! log-intensity change to within one threshold.
//!
//! Events are channel-agnostic in storage; a pixel's color channel is fixed
//! by its position in the Bayer mosaic and resolved via [`bayer_channel`]
//! when the stream is consumed.

use std::collections::BTreeMap;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// File magic for the binary event container (version byte at the end).
pub const EVENT_FILE_MAGIC: [u8; 16] = *b"SAEN-EVT\0\0\0\0\0\0\0\x01";

/// Bytes per packed event record.
pub const EVENT_RECORD_BYTES: usize = 16;

#[derive(Debug, Error)]
pub enum EventError {
    #[error("need at least 2 frames, got {0}")]
    TooFewFrames(usize),
    #[error("frame {index} timestamp {t_us} does not increase over previous {prev_us}")]
    UnsortedFrames { index: usize, t_us: u64, prev_us: u64 },
    #[error("frame {index} has {got} pixels, sensor is {expected}")]
    FrameSize { index: usize, expected: usize, got: usize },
    #[error("threshold must be positive, got {0}")]
    BadThreshold(f64),
    #[error("noise fraction must be non-negative and finite, got {0}")]
    BadNoiseFraction(f64),
    #[error("sensor {width}x{height} exceeds the 16-bit pixel coordinate range")]
    SensorTooLarge { width: u32, height: u32 },
    #[error("event {index}: pixel ({x},{y}) outside sensor {width}x{height}")]
    EventOutOfBounds { index: usize, x: u16, y: u16, width: u32, height: u32 },
    #[error("event {index}: timestamp {t_us} not below stream duration {duration_us}")]
    EventPastEnd { index: usize, t_us: u64, duration_us: u64 },
    #[error("event {index}: polarity {p} is not +1 or -1")]
    BadPolarity { index: usize, p: i8 },
    #[error("window [{t0},{t}) invalid for stream duration {duration_us}")]
    BadWindow { t0: u64, t: u64, duration_us: u64 },
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic at byte offset 0 (not an event file)")]
    BadMagic,
    #[error("unreadable header at byte offset {offset}: {reason}")]
    BadHeader { offset: u64, reason: String },
    #[error("truncated record at byte offset {offset}")]
    TruncatedRecord { offset: u64 },
    #[error("trailing data at byte offset {offset}")]
    TrailingData { offset: u64 },
    #[error("unsorted timestamps at byte offset {offset} (record {index})")]
    UnsortedRecords { offset: u64, index: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BayerPattern {
    #[serde(rename = "RGGB")]
    Rggb,
    #[serde(rename = "mono")]
    Mono,
}

impl std::fmt::Display for BayerPattern {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            BayerPattern::Rggb => "RGGB",
            BayerPattern::Mono => "mono",
        })
    }
}

/// The color channel a sensor pixel observes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Channel {
    Red,
    Green,
    Blue,
    /// Mean of the three rendered channels, taken before the log map.
    Luminance,
}

impl Channel {
    /// Index into an RGB triple; `None` for luminance.
    pub fn rgb_index(self) -> Option<usize> {
        match self {
            Channel::Red => Some(0),
            Channel::Green => Some(1),
            Channel::Blue => Some(2),
            Channel::Luminance => None,
        }
    }
}

/// Channel of pixel `(x, y)` (column, row) under the given mosaic.
pub fn bayer_channel(x: u32, y: u32, pattern: BayerPattern) -> Channel {
    match pattern {
        BayerPattern::Mono => Channel::Luminance,
        BayerPattern::Rggb => match (y % 2, x % 2) {
            (0, 0) => Channel::Red,
            (1, 1) => Channel::Blue,
            _ => Channel::Green,
        },
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Event {
    /// Microseconds.
    pub t: u64,
    /// Column.
    pub x: u16,
    /// Row.
    pub y: u16,
    /// +1 or -1.
    pub p: i8,
}

/// One sensor snapshot: per-pixel log intensity in each pixel's own color
/// channel (row-major).
#[derive(Debug, Clone)]
pub struct LogFrame {
    pub t_us: u64,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EventStream {
    pub width: u32,
    pub height: u32,
    /// Contrast threshold the stream was simulated with.
    pub threshold: f64,
    pub pattern: BayerPattern,
    /// Timestamp of the last source frame; every event is strictly earlier.
    pub duration_us: u64,
    pub events: Vec<Event>,
}

#[derive(Debug, Serialize, Deserialize)]
struct HeaderJson {
    width: u32,
    height: u32,
    threshold: f64,
    pattern: BayerPattern,
    duration_us: u64,
    count: u64,
}

impl EventStream {
    /// Validates every stream invariant; all constructors funnel through
    /// this.
    pub fn new(
        width: u32,
        height: u32,
        threshold: f64,
        pattern: BayerPattern,
        duration_us: u64,
        events: Vec<Event>,
    ) -> Result<EventStream, EventError> {
        if !(threshold > 0.0) || !threshold.is_finite() {
            return Err(EventError::BadThreshold(threshold));
        }
        if width > u16::MAX as u32 + 1 || height > u16::MAX as u32 + 1 {
            return Err(EventError::SensorTooLarge { width, height });
        }
        let mut prev = 0u64;
        for (index, e) in events.iter().enumerate() {
            if index > 0 && e.t < prev {
                return Err(EventError::UnsortedRecords { offset: 0, index });
            }
            prev = e.t;
            if (e.x as u32) >= width || (e.y as u32) >= height {
                return Err(EventError::EventOutOfBounds {
                    index,
                    x: e.x,
                    y: e.y,
                    width,
                    height,
                });
            }
            if e.t >= duration_us {
                return Err(EventError::EventPastEnd { index, t_us: e.t, duration_us });
            }
            if e.p != 1 && e.p != -1 {
                return Err(EventError::BadPolarity { index, p: e.p });
            }
        }
        Ok(EventStream { width, height, threshold, pattern, duration_us, events })
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }
}

/// Sparse per-pixel accumulated polarity counts over a time window. Pixels
/// that sum to zero are absent.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct PolarityMap {
    map: BTreeMap<(u16, u16), i64>,
}

impl PolarityMap {
    pub fn get(&self, x: u16, y: u16) -> i64 {
        self.map.get(&(x, y)).copied().unwrap_or(0)
    }

    pub fn iter(&self) -> impl Iterator<Item = ((u16, u16), i64)> + '_ {
        self.map.iter().map(|(&k, &v)| (k, v))
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    fn add(&mut self, x: u16, y: u16, p: i64) {
        *self.map.entry((x, y)).or_insert(0) += p;
    }

    fn drop_zeros(&mut self) {
        self.map.retain(|_, v| *v != 0);
    }
}

/// Runs the contrast-threshold model over time-sorted log-intensity frames,
/// then appends `floor(noise_fraction * genuine_count)` spurious events at
/// uniform random pixels/times/polarities and re-sorts (stably, so genuine
/// events keep their order). Deterministic for a fixed seed.
pub fn simulate_events(
    width: u32,
    height: u32,
    frames: &[LogFrame],
    threshold: f64,
    pattern: BayerPattern,
    noise_fraction: f64,
    seed: u64,
) -> Result<EventStream, EventError> {
    if frames.len() < 2 {
        return Err(EventError::TooFewFrames(frames.len()));
    }
    if !(threshold > 0.0) || !threshold.is_finite() {
        return Err(EventError::BadThreshold(threshold));
    }
    if !(noise_fraction >= 0.0) || !noise_fraction.is_finite() {
        return Err(EventError::BadNoiseFraction(noise_fraction));
    }
    if width > u16::MAX as u32 + 1 || height > u16::MAX as u32 + 1 {
        return Err(EventError::SensorTooLarge { width, height });
    }
    let n_pixels = (width * height) as usize;
    for (index, f) in frames.iter().enumerate() {
        if f.values.len() != n_pixels {
            return Err(EventError::FrameSize {
                index,
                expected: n_pixels,
                got: f.values.len(),
            });
        }
        if index > 0 && f.t_us <= frames[index - 1].t_us {
            return Err(EventError::UnsortedFrames {
                index,
                t_us: f.t_us,
                prev_us: frames[index - 1].t_us,
            });
        }
    }

    // Independent per-pixel reference tracking; ordered collect keeps the
    // result identical across thread counts.
    let per_pixel: Vec<Vec<Event>> = (0..n_pixels)
        .into_par_iter()
        .map(|i| {
            let x = (i % width as usize) as u16;
            let y = (i / width as usize) as u16;
            let mut out = Vec::new();
            // The reference level is held as an integer count of thresholds
            // above the first frame (level = base + n*threshold) rather than
            // a running float, so it cannot drift: the emitted count times
            // the threshold stays within one threshold of the true log
            // change at every frame, including signals that return exactly
            // to their starting value.
            let base = frames[0].values[i];
            let mut n_ref = 0i64;
            for k in 1..frames.len() {
                let (t_a, t_b) = (frames[k - 1].t_us, frames[k].t_us);
                let (l_a, l_b) = (frames[k - 1].values[i], frames[k].values[i]);
                loop {
                    let gap = (l_b - base) - n_ref as f64 * threshold;
                    if gap.abs() < threshold {
                        break;
                    }
                    let p: i8 = if gap > 0.0 { 1 } else { -1 };
                    let level = base + (n_ref + p as i64) as f64 * threshold;
                    // Crossing time of the interpolated signal; l_b != l_a
                    // whenever the loop is entered because the residual
                    // against l_a is below one threshold.
                    let frac = ((level - l_a) / (l_b - l_a)).clamp(0.0, 1.0);
                    let t = t_a as f64 + frac * (t_b - t_a) as f64;
                    let t = (t.round() as u64).clamp(t_a, t_b - 1);
                    out.push(Event { t, x, y, p });
                    n_ref += p as i64;
                }
            }
            out
        })
        .collect();

    let mut events: Vec<Event> = per_pixel.into_iter().flatten().collect();
    events.sort_by_key(|e| e.t);

    let n_noise = (noise_fraction * events.len() as f64).floor() as usize;
    if n_noise > 0 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let t_start = frames[0].t_us;
        let t_end = frames[frames.len() - 1].t_us;
        for _ in 0..n_noise {
            events.push(Event {
                t: rng.random_range(t_start..t_end),
                x: rng.random_range(0..width as u16),
                y: rng.random_range(0..height as u16),
                p: if rng.random::<bool>() { 1 } else { -1 },
            });
        }
        events.sort_by_key(|e| e.t);
    }

    EventStream::new(width, height, threshold, pattern, frames[frames.len() - 1].t_us, events)
}

/// Per-pixel polarity sums over the half-open window `[t0, t)`, optionally
/// restricted to a pixel set.
pub fn accumulate(
    stream: &EventStream,
    t0: u64,
    t: u64,
    pixels: Option<&[(u16, u16)]>,
) -> Result<PolarityMap, EventError> {
    if t0 >= t || t > stream.duration_us {
        return Err(EventError::BadWindow { t0, t, duration_us: stream.duration_us });
    }
    let lo = stream.events.partition_point(|e| e.t < t0);
    let hi = stream.events.partition_point(|e| e.t < t);
    let mut map = PolarityMap::default();
    match pixels {
        None => {
            for e in &stream.events[lo..hi] {
                map.add(e.x, e.y, e.p as i64);
            }
        }
        Some(set) => {
            let wanted: std::collections::BTreeSet<(u16, u16)> = set.iter().copied().collect();
            for e in &stream.events[lo..hi] {
                if wanted.contains(&(e.x, e.y)) {
                    map.add(e.x, e.y, e.p as i64);
                }
            }
        }
    }
    map.drop_zeros();
    Ok(map)
}

pub fn write_events(stream: &EventStream, path: &Path) -> Result<(), EventError> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    w.write_all(&EVENT_FILE_MAGIC)?;
    let header = HeaderJson {
        width: stream.width,
        height: stream.height,
        threshold: stream.threshold,
        pattern: stream.pattern,
        duration_us: stream.duration_us,
        count: stream.events.len() as u64,
    };
    let json = serde_json::to_vec(&header).expect("header serialization cannot fail");
    w.write_all(&(json.len() as u32).to_le_bytes())?;
    w.write_all(&json)?;
    for e in &stream.events {
        let mut rec = [0u8; EVENT_RECORD_BYTES];
        rec[0..8].copy_from_slice(&e.t.to_le_bytes());
        rec[8..10].copy_from_slice(&e.x.to_le_bytes());
        rec[10..12].copy_from_slice(&e.y.to_le_bytes());
        rec[12] = e.p as u8;
        w.write_all(&rec)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_events(path: &Path) -> Result<EventStream, EventError> {
    let mut r = BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 16];
    read_exact_at(&mut r, &mut magic, 0)?;
    if magic != EVENT_FILE_MAGIC {
        return Err(EventError::BadMagic);
    }
    let mut len_bytes = [0u8; 4];
    read_exact_at(&mut r, &mut len_bytes, 16)?;
    let json_len = u32::from_le_bytes(len_bytes) as usize;
    let mut json = vec![0u8; json_len];
    read_exact_at(&mut r, &mut json, 20)?;
    let header: HeaderJson = serde_json::from_slice(&json).map_err(|e| EventError::BadHeader {
        offset: 20,
        reason: e.to_string(),
    })?;

    let records_start = 20 + json_len as u64;
    let mut events = Vec::with_capacity(header.count as usize);
    let mut prev_t = 0u64;
    for index in 0..header.count as usize {
        let offset = records_start + (index * EVENT_RECORD_BYTES) as u64;
        let mut rec = [0u8; EVENT_RECORD_BYTES];
        read_exact_at(&mut r, &mut rec, offset)?;
        let t = u64::from_le_bytes(rec[0..8].try_into().unwrap());
        if index > 0 && t < prev_t {
            return Err(EventError::UnsortedRecords { offset, index });
        }
        prev_t = t;
        events.push(Event {
            t,
            x: u16::from_le_bytes(rec[8..10].try_into().unwrap()),
            y: u16::from_le_bytes(rec[10..12].try_into().unwrap()),
            p: rec[12] as i8,
        });
    }
    let end_offset = records_start + header.count * EVENT_RECORD_BYTES as u64;
    let mut probe = [0u8; 1];
    if r.read(&mut probe)? != 0 {
        return Err(EventError::TrailingData { offset: end_offset });
    }
    EventStream::new(
        header.width,
        header.height,
        header.threshold,
        header.pattern,
        header.duration_us,
        events,
    )
}

/// `read_exact` that reports the failing byte offset instead of a bare EOF.
fn read_exact_at<R: Read>(r: &mut R, buf: &mut [u8], offset: u64) -> Result<(), EventError> {
    let mut filled = 0;
    while filled < buf.len() {
        let n = r.read(&mut buf[filled..])?;
        if n == 0 {
            return Err(EventError::TruncatedRecord { offset: offset + filled as u64 });
        }
        filled += n;
    }
    Ok(())
}
