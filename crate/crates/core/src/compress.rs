//! Spatio-temporal compression: a stream is cut into `T` time slices, each
//! slice into `N_r` sub-windows, and the per-pixel event count of sub-window
//! `k` is weighted by `2^k` and summed into a `[T, 2, H, W]` frame.
//!
//! Sub-windows are half-open `[start, end)` except the last sub-window of the
//! last slice, which is closed so that the final event is counted exactly once.

use crate::error::{Error, Result};
use crate::events::EventStream;
use std::collections::HashMap;

/// Inclusive-lower / exclusive-upper microsecond bounds of one slice (the
/// last slice is also closed on the right).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SliceBounds {
    pub lower: u64,
    pub upper: u64,
}

/// How the per-sub-window event count enters the weighted sum.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum CountMode {
    /// Raw event counts, so a cell may exceed `2^N_r - 1`.
    #[default]
    Count,
    /// Each sub-window contributes at most one event per cell.
    Binary,
}

/// Dense `[T, 2, H, W]` frame tensor. Channel 0 holds OFF events, channel 1
/// ON events.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameTensor {
    steps: usize,
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl FrameTensor {
    pub fn zeros(steps: usize, height: usize, width: usize) -> Self {
        Self {
            steps,
            height,
            width,
            data: vec![0.0; steps * 2 * height * width],
        }
    }

    pub fn from_vec(steps: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != steps * 2 * height * width {
            return Err(Error::Shape(format!(
                "{} values for frame shape [{steps}, 2, {height}, {width}]",
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
            return Err(Error::Value(format!("frame entries must be finite and >= 0, got {v}")));
        }
        Ok(Self {
            steps,
            height,
            width,
            data,
        })
    }

    pub fn shape(&self) -> [usize; 4] {
        [self.steps, 2, self.height, self.width]
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn index(&self, j: usize, p: usize, y: usize, x: usize) -> usize {
        ((j * 2 + p) * self.height + y) * self.width + x
    }

    pub fn get(&self, j: usize, p: usize, y: usize, x: usize) -> f32 {
        self.data[self.index(j, p, y, x)]
    }

    /// The `[2, H, W]` block of time step `j`.
    pub fn step(&self, j: usize) -> &[f32] {
        let n = 2 * self.height * self.width;
        &self.data[j * n..(j + 1) * n]
    }

    pub fn nonzero_density(&self) -> f64 {
        if self.data.is_empty() {
            return 0.0;
        }
        self.data.iter().filter(|v| **v != 0.0).count() as f64 / self.data.len() as f64
    }

    /// Four little-endian `u32` dims `[T, 2, H, W]` followed by the values
    /// as little-endian `f32`.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + 4 * self.data.len());
        for d in self.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 {
            return Err(Error::Format("frame header truncated".into()));
        }
        let dim = |i: usize| {
            u32::from_le_bytes(bytes[4 * i..4 * i + 4].try_into().unwrap()) as usize
        };
        let (steps, ch, height, width) = (dim(0), dim(1), dim(2), dim(3));
        if ch != 2 {
            return Err(Error::Format(format!("expected 2 channels, header says {ch}")));
        }
        let body = &bytes[16..];
        if body.len() != 4 * steps * 2 * height * width {
            return Err(Error::Format(format!(
                "body holds {} bytes, header implies {}",
                body.len(),
                4 * steps * 2 * height * width
            )));
        }
        let data = body
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Self::from_vec(steps, height, width, data)
    }
}

/// Bounds of slice `j` out of `steps` for a recording of `duration` µs.
pub fn slice_bounds(j: usize, steps: usize, duration: u64) -> Result<SliceBounds> {
    if steps == 0 {
        return Err(Error::Argument("time steps must be >= 1".into()));
    }
    if j >= steps {
        return Err(Error::Index {
            index: j,
            len: steps,
        });
    }
    let width = duration / steps as u64;
    let lower = width * j as u64;
    let upper = if j + 1 < steps {
        width * (j as u64 + 1)
    } else {
        duration
    };
    Ok(SliceBounds { lower, upper })
}

fn check_args(steps: usize, resolution: usize) -> Result<()> {
    if steps == 0 {
        return Err(Error::Argument("time steps must be >= 1".into()));
    }
    if resolution == 0 || resolution > 31 {
        return Err(Error::Argument(format!(
            "resolution must be in 1..=31, got {resolution}"
        )));
    }
    Ok(())
}

fn weighted_sum(
    counts: &[u32],
    steps: usize,
    resolution: usize,
    plane: usize,
    mode: CountMode,
) -> Vec<f32> {
    let mut data = vec![0.0f32; steps * plane];
    for j in 0..steps {
        for k in 0..resolution {
            let weight = f64::from(1u32 << k);
            let base = (j * resolution + k) * plane;
            for (cell, &c) in counts[base..base + plane].iter().enumerate() {
                if c > 0 {
                    let c = match mode {
                        CountMode::Count => f64::from(c),
                        CountMode::Binary => 1.0,
                    };
                    let out = &mut data[j * plane + cell];
                    *out = (f64::from(*out) + weight * c) as f32;
                }
            }
        }
    }
    data
}

/// Compresses `stream` into `steps` frames at `resolution` sub-windows per
/// frame. Each event is located by index arithmetic in O(1).
pub fn compress(
    stream: &EventStream,
    steps: usize,
    resolution: usize,
    mode: CountMode,
) -> Result<FrameTensor> {
    check_args(steps, resolution)?;
    let (h, w) = (stream.height() as usize, stream.width() as usize);
    let plane = 2 * h * w;
    let duration = stream.duration();
    let slice_len = duration / steps as u64;
    let n = resolution as u64;
    let mut counts = vec![0u32; steps * resolution * plane];
    for e in stream.events() {
        let j = if slice_len == 0 {
            steps - 1
        } else {
            ((e.t / slice_len) as usize).min(steps - 1)
        };
        let b = slice_bounds(j, steps, duration)?;
        let len = b.upper - b.lower;
        let offset = e.t - b.lower;
        // smallest k with offset < floor((k+1)·len/N); the closed last window takes offset == len
        let k = if len == 0 {
            resolution - 1
        } else {
            (((offset as u128 + 1) * n as u128 - 1) / len as u128).min(n as u128 - 1) as usize
        };
        let cell = (e.p.index() * h + e.y as usize) * w + e.x as usize;
        counts[(j * resolution + k) * plane + cell] += 1;
    }
    let data = weighted_sum(&counts, steps, resolution, plane, mode);
    Ok(FrameTensor {
        steps,
        height: h,
        width: w,
        data,
    })
}

/// Window membership of one event as found by [`compress_oracle`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WindowHits {
    /// Every `(slice, sub-window)` pair whose interval contains the event.
    pub windows: Vec<(usize, usize)>,
}

/// Reference implementation: for every event scan all `(j, k)` windows and
/// test interval membership directly. O(n·T·N_r). Returns the frame and the
/// per-event list of windows that claimed the event.
pub fn compress_oracle_instrumented(
    stream: &EventStream,
    steps: usize,
    resolution: usize,
    mode: CountMode,
) -> Result<(FrameTensor, Vec<WindowHits>)> {
    check_args(steps, resolution)?;
    let (h, w) = (stream.height() as usize, stream.width() as usize);
    let duration = stream.duration();
    let mut windows = Vec::with_capacity(steps * resolution);
    for j in 0..steps {
        let b = slice_bounds(j, steps, duration)?;
        let span = b.upper - b.lower;
        for k in 0..resolution {
            let start = b.lower + (k as u64 * span) / resolution as u64;
            let end = b.lower + ((k as u64 + 1) * span) / resolution as u64;
            let closed = j == steps - 1 && k == resolution - 1;
            windows.push((j, k, start, end, closed));
        }
    }
    let mut tally: HashMap<(usize, usize, usize, u32, u32), u32> = HashMap::new();
    let mut hits = Vec::with_capacity(stream.len());
    for e in stream.events() {
        let mut mine = Vec::new();
        for &(j, k, start, end, closed) in &windows {
            let inside = e.t >= start && (e.t < end || (closed && e.t == end));
            if inside {
                mine.push((j, k));
                *tally.entry((j, k, e.p.index(), e.y, e.x)).or_insert(0) += 1;
            }
        }
        hits.push(WindowHits { windows: mine });
    }
    let mut frame = FrameTensor::zeros(steps, h, w);
    let mut keys: Vec<_> = tally.into_iter().collect();
    keys.sort();
    for ((j, k, p, y, x), c) in keys {
        let c = match mode {
            CountMode::Count => f64::from(c),
            CountMode::Binary => 1.0,
        };
        let idx = frame.index(j, p, y as usize, x as usize);
        frame.data[idx] = (f64::from(frame.data[idx]) + 2f64.powi(k as i32) * c) as f32;
    }
    Ok((frame, hits))
}

pub fn compress_oracle(
    stream: &EventStream,
    steps: usize,
    resolution: usize,
    mode: CountMode,
) -> Result<FrameTensor> {
    compress_oracle_instrumented(stream, steps, resolution, mode).map(|(f, _)| f)
}

/// `steps / source_frames` as a percentage.
pub fn compression_ratio(source_frames: f64, steps: f64) -> Result<f64> {
    if !(source_frames > 0.0) || !(steps > 0.0) {
        return Err(Error::Argument(format!(
            "frame counts must be positive (source {source_frames}, steps {steps})"
        )));
    }
    Ok(100.0 * steps / source_frames)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::events::{Event, Polarity};
    use proptest::prelude::*;

    fn stream(events: Vec<Event>, w: u32, h: u32) -> EventStream {
        EventStream::new(events, w, h).unwrap()
    }

    #[test]
    fn bounds_examples() {
        assert_eq!(
            slice_bounds(0, 2, 100).unwrap(),
            SliceBounds { lower: 0, upper: 50 }
        );
        assert_eq!(
            slice_bounds(1, 2, 101).unwrap(),
            SliceBounds { lower: 50, upper: 101 }
        );
        assert_eq!(
            slice_bounds(0, 1, 777).unwrap(),
            SliceBounds { lower: 0, upper: 777 }
        );
        assert!(matches!(slice_bounds(2, 2, 10), Err(Error::Index { .. })));
        assert!(slice_bounds(0, 0, 10).is_err());
    }

    #[test]
    fn empty_stream_gives_zero_tensor() {
        let s = EventStream::empty(5, 3);
        let f = compress(&s, 4, 8, CountMode::Count).unwrap();
        assert_eq!(f.shape(), [4, 2, 3, 5]);
        assert!(f.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn first_and_last_subwindow_weights() {
        // the second event pins the duration at 800 µs
        let s = stream(
            vec![
                Event::new(1, 0, 0, Polarity::On),
                Event::new(2, 1, 800, Polarity::Off),
            ],
            4,
            4,
        );
        let f = compress(&s, 1, 8, CountMode::Count).unwrap();
        assert_eq!(f.get(0, 1, 0, 1), 1.0);
        assert_eq!(f.get(0, 0, 1, 2), 128.0);
        assert_eq!(f.data().iter().filter(|v| **v != 0.0).count(), 2);
    }

    #[test]
    fn one_event_per_subwindow_sums_to_255() {
        let events = (0..8)
            .map(|k| Event::new(0, 0, k * 100 + 50, Polarity::On))
            .chain(std::iter::once(Event::new(3, 3, 800, Polarity::Off)))
            .collect();
        let f = compress(&stream(events, 4, 4), 1, 8, CountMode::Count).unwrap();
        assert_eq!(f.get(0, 1, 0, 0), 255.0);
    }

    #[test]
    fn binary_mode_clamps_counts() {
        let events = vec![
            Event::new(0, 0, 0, Polarity::On),
            Event::new(0, 0, 1, Polarity::On),
            Event::new(0, 0, 2, Polarity::On),
            Event::new(1, 1, 80, Polarity::On),
        ];
        let s = stream(events, 2, 2);
        assert_eq!(compress(&s, 1, 8, CountMode::Count).unwrap().get(0, 1, 0, 0), 3.0);
        assert_eq!(compress(&s, 1, 8, CountMode::Binary).unwrap().get(0, 1, 0, 0), 1.0);
    }

    #[test]
    fn duration_shorter_than_steps() {
        // floor(2/5) = 0: every slice but the last is empty
        let events = vec![
            Event::new(0, 0, 0, Polarity::On),
            Event::new(0, 0, 2, Polarity::On),
        ];
        let s = stream(events, 1, 1);
        let f = compress(&s, 5, 4, CountMode::Count).unwrap();
        assert_eq!(f, compress_oracle(&s, 5, 4, CountMode::Count).unwrap());
        assert!(f.data()[..8].iter().all(|v| *v == 0.0));
    }

    #[test]
    fn oracle_single_event_single_nonzero() {
        let s = stream(vec![Event::new(1, 1, 42, Polarity::Off)], 3, 3);
        let f = compress_oracle(&s, 3, 4, CountMode::Count).unwrap();
        assert_eq!(f.data().iter().filter(|v| **v != 0.0).count(), 1);
        let e = compress_oracle(&EventStream::empty(3, 3), 2, 2, CountMode::Count).unwrap();
        assert!(e.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn frame_bytes_round_trip() {
        let s = stream(vec![Event::new(1, 1, 42, Polarity::Off)], 3, 2);
        let f = compress(&s, 2, 8, CountMode::Count).unwrap();
        let bytes = f.to_bytes();
        assert_eq!(&bytes[..16], &[2, 0, 0, 0, 2, 0, 0, 0, 2, 0, 0, 0, 3, 0, 0, 0]);
        assert_eq!(FrameTensor::from_bytes(&bytes).unwrap(), f);
        assert!(FrameTensor::from_bytes(&bytes[..20]).is_err());
    }

    #[test]
    fn ratio_examples() {
        assert!((compression_ratio(19.2, 5.0).unwrap() - 26.04).abs() < 5e-3);
        assert!((compression_ratio(19.2, 2.0).unwrap() - 10.42).abs() < 5e-3);
        assert_eq!(compression_ratio(7.0, 7.0).unwrap(), 100.0);
        assert!(compression_ratio(0.0, 2.0).is_err());
        assert!(compression_ratio(3.0, 0.0).is_err());
    }

    fn arb_events(max_t: u64) -> impl Strategy<Value = EventStream> {
        prop::collection::vec((0u32..4, 0u32..3, 0..=max_t, any::<bool>()), 0..200).prop_map(
            |v| {
                let ev = v
                    .into_iter()
                    .map(|(x, y, t, p)| {
                        Event::new(x, y, t, if p { Polarity::On } else { Polarity::Off })
                    })
                    .collect();
                EventStream::new(ev, 4, 3).unwrap()
            },
        )
    }

    proptest! {
        #[test]
        fn matches_oracle(s in arb_events(5000), steps in 1usize..6, res in 1usize..9, bin in any::<bool>()) {
            let mode = if bin { CountMode::Binary } else { CountMode::Count };
            prop_assert_eq!(compress(&s, steps, res, mode).unwrap(), compress_oracle(&s, steps, res, mode).unwrap());
        }

        #[test]
        fn single_resolution_conserves_events(s in arb_events(90), steps in 1usize..6) {
            let f = compress(&s, steps, 1, CountMode::Count).unwrap();
            let total: f64 = f.data().iter().map(|v| f64::from(*v)).sum();
            prop_assert_eq!(total, s.len() as f64);
        }

        #[test]
        fn adding_an_event_is_monotone(s in arb_events(300), x in 0u32..4, y in 0u32..3, t in 0u64..300, steps in 1usize..4, res in 1usize..5) {
            let before = compress(&s, steps, res, CountMode::Count).unwrap();
            let mut ev = s.events().to_vec();
            // stay within the current duration so window edges do not move
            ev.push(Event::new(x, y, t % (s.duration() + 1), Polarity::On));
            let grown = EventStream::new(ev, 4, 3).unwrap();
            prop_assert_eq!(grown.duration(), s.duration());
            let after = compress(&grown, steps, res, CountMode::Count).unwrap();
            prop_assert!(before.data().iter().zip(after.data()).all(|(b, a)| a >= b));
        }
    }
}
