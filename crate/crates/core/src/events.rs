//! Address-event streams: validation, the 5-byte ATIS binary layout used by
//! N-MNIST, a plain CSV text format, and a synthetic two-class generator.

use crate::error::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};

/// Largest timestamp representable in the 23-bit binary field.
pub const MAX_BIN_TIMESTAMP: u64 = (1 << 23) - 1;

const RECORD_LEN: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Polarity {
    Off = 0,
    On = 1,
}

impl Polarity {
    pub fn from_bit(bit: u8) -> Result<Self> {
        match bit {
            0 => Ok(Polarity::Off),
            1 => Ok(Polarity::On),
            other => Err(Error::Value(format!("polarity must be 0 or 1, got {other}"))),
        }
    }

    #[inline]
    pub fn index(self) -> usize {
        self as usize
    }
}

/// One address event. `t` is in microseconds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Event {
    pub x: u32,
    pub y: u32,
    pub t: u64,
    pub p: Polarity,
}

impl Event {
    pub fn new(x: u32, y: u32, t: u64, p: Polarity) -> Self {
        Self { x, y, t, p }
    }
}

/// A validated recording: events sorted by timestamp, all inside the sensor.
///
/// Immutable once built; the only constructors validate and sort.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EventStream {
    events: Vec<Event>,
    width: u32,
    height: u32,
}

impl EventStream {
    /// Validates bounds and stable-sorts by timestamp. Duplicates are kept.
    pub fn new(mut events: Vec<Event>, width: u32, height: u32) -> Result<Self> {
        if let Some((index, ev)) = events
            .iter()
            .enumerate()
            .find(|(_, e)| e.x >= width || e.y >= height)
        {
            return Err(Error::CorruptRecord {
                index,
                reason: format!(
                    "address ({}, {}) outside {width}x{height} sensor",
                    ev.x, ev.y
                ),
            });
        }
        events.sort_by_key(|e| e.t);
        Ok(Self {
            events,
            width,
            height,
        })
    }

    pub fn empty(width: u32, height: u32) -> Self {
        Self {
            events: Vec::new(),
            width,
            height,
        }
    }

    pub fn events(&self) -> &[Event] {
        &self.events
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    /// Timestamp of the last event, 0 for an empty stream.
    pub fn duration(&self) -> u64 {
        self.events.last().map_or(0, |e| e.t)
    }

    /// Keeps the events inside a `width`x`height` window whose top-left
    /// corner is at (`x0`, `y0`), re-addressed relative to the window.
    pub fn crop(&self, x0: u32, y0: u32, width: u32, height: u32) -> Result<Self> {
        if x0 + width > self.width || y0 + height > self.height {
            return Err(Error::Argument(format!(
                "crop {width}x{height}+{x0}+{y0} exceeds {}x{} sensor",
                self.width, self.height
            )));
        }
        let events = self
            .events
            .iter()
            .filter(|e| e.x >= x0 && e.x < x0 + width && e.y >= y0 && e.y < y0 + height)
            .map(|e| Event::new(e.x - x0, e.y - y0, e.t, e.p))
            .collect();
        Ok(Self {
            events,
            width,
            height,
        })
    }
}

/// Decodes the 5-byte ATIS record layout:
/// byte0 = x, byte1 = y, byte2 bit 7 = polarity, and the remaining 23 bits
/// (byte2 bits 6..0, byte3, byte4) form a big-endian timestamp in µs.
pub fn load_nmnist_bin(bytes: &[u8], width: u32, height: u32) -> Result<EventStream> {
    if !bytes.len().is_multiple_of(RECORD_LEN) {
        return Err(Error::Format(format!(
            "length {} is not a multiple of {RECORD_LEN}",
            bytes.len()
        )));
    }
    let events = bytes
        .chunks_exact(RECORD_LEN)
        .map(|r| {
            let t = (u64::from(r[2] & 0x7f) << 16) | (u64::from(r[3]) << 8) | u64::from(r[4]);
            let p = if r[2] & 0x80 != 0 {
                Polarity::On
            } else {
                Polarity::Off
            };
            Event::new(u32::from(r[0]), u32::from(r[1]), t, p)
        })
        .collect();
    EventStream::new(events, width, height)
}

/// Inverse of [`load_nmnist_bin`]. Fails for events that do not fit the
/// 8-bit address or 23-bit timestamp fields.
pub fn encode_nmnist_bin(stream: &EventStream) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(stream.len() * RECORD_LEN);
    for (index, e) in stream.events().iter().enumerate() {
        if e.x > 255 || e.y > 255 {
            return Err(Error::CorruptRecord {
                index,
                reason: "address does not fit in 8 bits".into(),
            });
        }
        if e.t > MAX_BIN_TIMESTAMP {
            return Err(Error::CorruptRecord {
                index,
                reason: format!("timestamp {} does not fit in 23 bits", e.t),
            });
        }
        let pol = if e.p == Polarity::On { 0x80 } else { 0 };
        out.extend_from_slice(&[
            e.x as u8,
            e.y as u8,
            pol | ((e.t >> 16) as u8 & 0x7f),
            (e.t >> 8) as u8,
            e.t as u8,
        ]);
    }
    Ok(out)
}

/// Parses `x,y,t,p` lines. Blank lines and lines starting with `#` are
/// skipped; LF and CRLF endings are both accepted. Line numbers in errors
/// are 1-based.
pub fn load_aer_csv(text: &str, width: u32, height: u32) -> Result<EventStream> {
    let mut events = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.trim_end_matches('\r').trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != 4 {
            return Err(Error::Parse {
                line: line_no,
                reason: format!("expected 4 fields, found {}", fields.len()),
            });
        }
        let num = |s: &str, name: &str| -> Result<u64> {
            s.parse::<u64>().map_err(|_| Error::Parse {
                line: line_no,
                reason: format!("{name} is not a non-negative integer: {s:?}"),
            })
        };
        let x = num(fields[0], "x")?;
        let y = num(fields[1], "y")?;
        let t = num(fields[2], "t")?;
        let p = num(fields[3], "p")?;
        if p > 1 {
            return Err(Error::Value(format!(
                "line {line_no}: polarity must be 0 or 1, got {p}"
            )));
        }
        if x >= u64::from(width) || y >= u64::from(height) {
            return Err(Error::CorruptRecord {
                index: line_no,
                reason: format!("address ({x}, {y}) outside {width}x{height} sensor"),
            });
        }
        events.push(Event::new(x as u32, y as u32, t, Polarity::from_bit(p as u8)?));
    }
    EventStream::new(events, width, height)
}

pub fn write_aer_csv(stream: &EventStream) -> String {
    let mut out = String::from("# x,y,t,p\n");
    for e in stream.events() {
        out.push_str(&format!("{},{},{},{}\n", e.x, e.y, e.t, e.p.index()));
    }
    out
}

/// Poisson events on a class-dependent mask: class 0 fires on the left half
/// (`x < width / 2`), class 1 on the right half. Each active pixel draws a
/// Poisson(`rate * duration`) event count with uniform timestamps in
/// `[0, duration]` and uniform polarity.
pub fn synth_two_class(
    class_id: u8,
    width: u32,
    height: u32,
    duration: u64,
    rate: f64,
    seed: u64,
) -> Result<EventStream> {
    if !(rate > 0.0 && rate.is_finite()) {
        return Err(Error::Argument(format!("rate must be positive, got {rate}")));
    }
    if duration == 0 {
        return Err(Error::Argument("duration must be positive".into()));
    }
    let half = width / 2;
    let cols = match class_id {
        0 => 0..half,
        1 => half..width,
        other => return Err(Error::Argument(format!("class must be 0 or 1, got {other}"))),
    };
    if cols.is_empty() || height == 0 {
        return Err(Error::Argument(format!(
            "class {class_id} mask is empty on a {width}x{height} sensor"
        )));
    }
    let mean = rate * duration as f64;
    let poisson = Poisson::new(mean)
        .map_err(|e| Error::Argument(format!("poisson mean {mean}: {e}")))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut events = Vec::new();
    for y in 0..height {
        for x in cols.clone() {
            let count = poisson.sample(&mut rng) as u64;
            for _ in 0..count {
                let t = rng.random_range(0..=duration);
                let p = if rng.random::<bool>() {
                    Polarity::On
                } else {
                    Polarity::Off
                };
                events.push(Event::new(x, y, t, p));
            }
        }
    }
    EventStream::new(events, width, height)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn decodes_single_record() {
        let s = load_nmnist_bin(&[0x03, 0x07, 0x80, 0x00, 0x64], 34, 34).unwrap();
        assert_eq!(s.events(), &[Event::new(3, 7, 100, Polarity::On)]);
        assert_eq!(s.duration(), 100);
    }

    #[test]
    fn decodes_zero_record_and_empty() {
        let s = load_nmnist_bin(&[0; 5], 34, 34).unwrap();
        assert_eq!(s.events(), &[Event::new(0, 0, 0, Polarity::Off)]);
        let e = load_nmnist_bin(&[], 34, 34).unwrap();
        assert!(e.is_empty());
        assert_eq!(e.duration(), 0);
    }

    #[test]
    fn decodes_full_timestamp_width() {
        let s = load_nmnist_bin(&[1, 2, 0x7f, 0xff, 0xff], 34, 34).unwrap();
        assert_eq!(s.events()[0].t, MAX_BIN_TIMESTAMP);
        assert_eq!(s.events()[0].p, Polarity::Off);
    }

    #[test]
    fn rejects_bad_length_and_bounds() {
        assert!(matches!(
            load_nmnist_bin(&[0; 7], 34, 34),
            Err(Error::Format(_))
        ));
        let bytes = [0, 0, 0, 0, 1, 40, 0, 0, 0, 2];
        assert!(matches!(
            load_nmnist_bin(&bytes, 34, 34),
            Err(Error::CorruptRecord { index: 1, .. })
        ));
    }

    #[test]
    fn unsorted_binary_input_is_stably_sorted() {
        let bytes = [1, 1, 0, 0, 9, 2, 2, 0, 0, 3, 3, 3, 0x80, 0, 3];
        let s = load_nmnist_bin(&bytes, 34, 34).unwrap();
        let xs: Vec<u32> = s.events().iter().map(|e| e.x).collect();
        assert_eq!(xs, vec![2, 3, 1]);
    }

    #[test]
    fn encode_rejects_wide_timestamp() {
        let s = EventStream::new(vec![Event::new(0, 0, 1 << 23, Polarity::On)], 4, 4).unwrap();
        assert!(encode_nmnist_bin(&s).is_err());
    }

    #[test]
    fn csv_single_and_comment() {
        let s = load_aer_csv("1,2,50,1\n", 4, 4).unwrap();
        assert_eq!(s.events(), &[Event::new(1, 2, 50, Polarity::On)]);
        assert!(load_aer_csv("# header\n", 4, 4).unwrap().is_empty());
        let crlf = load_aer_csv("# h\r\n1,2,50,0\r\n\r\n0,0,7,1\r\n", 4, 4).unwrap();
        assert_eq!(crlf.len(), 2);
        assert_eq!(crlf.events()[0].t, 7);
    }

    #[test]
    fn csv_errors() {
        assert!(matches!(
            load_aer_csv("1,2,3,1\n1,2,x,1\n", 4, 4),
            Err(Error::Parse { line: 2, .. })
        ));
        assert!(matches!(
            load_aer_csv("1,2,3\n", 4, 4),
            Err(Error::Parse { line: 1, .. })
        ));
        assert!(matches!(load_aer_csv("1,2,3,2\n", 4, 4), Err(Error::Value(_))));
        assert!(load_aer_csv("9,2,3,1\n", 4, 4).is_err());
    }

    #[test]
    fn csv_allows_wide_timestamps() {
        let s = load_aer_csv("0,0,100000000000,1\n", 4, 4).unwrap();
        assert_eq!(s.duration(), 100_000_000_000);
    }

    #[test]
    fn csv_out_of_order_is_sorted_multiset() {
        let text = "3,0,30,1\n1,0,10,0\n2,0,20,1\n0,0,10,1\n";
        let s = load_aer_csv(text, 4, 4).unwrap();
        let mut expected = vec![
            Event::new(3, 0, 30, Polarity::On),
            Event::new(1, 0, 10, Polarity::Off),
            Event::new(2, 0, 20, Polarity::On),
            Event::new(0, 0, 10, Polarity::On),
        ];
        expected.sort_by_key(|e| e.t);
        assert_eq!(s.events(), expected.as_slice());
    }

    #[test]
    fn synth_mask_and_determinism() {
        let a = synth_two_class(0, 16, 16, 1000, 0.002, 7).unwrap();
        assert!(a.events().iter().all(|e| e.x < 8));
        let b = synth_two_class(0, 16, 16, 1000, 0.002, 7).unwrap();
        assert_eq!(a, b);
        let c = synth_two_class(1, 16, 16, 1000, 0.002, 7).unwrap();
        assert!(c.events().iter().all(|e| e.x >= 8));
    }

    #[test]
    fn synth_count_within_three_sigma() {
        let (w, h, dur, rate) = (16u32, 16u32, 1000u64, 0.003);
        let active = f64::from((w / 2) * h);
        let mean = rate * dur as f64 * active;
        for seed in 0..5 {
            let s = synth_two_class(1, w, h, dur, rate, seed).unwrap();
            let dev = (s.len() as f64 - mean).abs();
            assert!(dev <= 3.0 * mean.sqrt(), "seed {seed}: {} vs {mean}", s.len());
        }
    }

    #[test]
    fn synth_rejects_empty_mask() {
        assert!(synth_two_class(0, 1, 4, 10, 0.1, 0).is_err());
        assert!(synth_two_class(1, 4, 0, 10, 0.1, 0).is_err());
        assert!(synth_two_class(0, 4, 4, 0, 0.1, 0).is_err());
        assert!(synth_two_class(0, 4, 4, 10, 0.0, 0).is_err());
    }

    fn arb_stream() -> impl Strategy<Value = EventStream> {
        prop::collection::vec(
            (0u32..256, 0u32..256, 0u64..=MAX_BIN_TIMESTAMP, any::<bool>()),
            0..64,
        )
        .prop_map(|v| {
            let events = v
                .into_iter()
                .map(|(x, y, t, p)| {
                    Event::new(x, y, t, if p { Polarity::On } else { Polarity::Off })
                })
                .collect();
            EventStream::new(events, 256, 256).unwrap()
        })
    }

    fn assert_valid(s: &EventStream) {
        assert!(s.events().windows(2).all(|w| w[0].t <= w[1].t));
        assert!(s
            .events()
            .iter()
            .all(|e| e.x < s.width() && e.y < s.height()));
        assert_eq!(s.duration(), s.events().last().map_or(0, |e| e.t));
    }

    proptest! {
        #[test]
        fn binary_round_trip(s in arb_stream()) {
            let bytes = encode_nmnist_bin(&s).unwrap();
            let back = load_nmnist_bin(&bytes, 256, 256).unwrap();
            prop_assert_eq!(back, s);
        }

        #[test]
        fn mutated_bytes_never_yield_invalid_stream(
            mut bytes in prop::collection::vec(any::<u8>(), 0..120),
            flips in prop::collection::vec((any::<usize>(), any::<u8>()), 0..8),
            w in 1u32..64,
            h in 1u32..64,
        ) {
            for (i, b) in flips {
                if !bytes.is_empty() {
                    let n = bytes.len();
                    bytes[i % n] ^= b;
                }
            }
            match load_nmnist_bin(&bytes, w, h) {
                Ok(s) => assert_valid(&s),
                Err(Error::Format(_)) | Err(Error::CorruptRecord { .. }) => {}
                Err(other) => prop_assert!(false, "unexpected error {other:?}"),
            }
        }
    }
}
