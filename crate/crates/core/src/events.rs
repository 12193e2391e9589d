//! Event streams: file IO, sliding windows, and tensor encodings.
//!
//! Two on-disk formats are supported. EVB is a packed little-endian binary:
//!
//! ```text
//! "EVB1" | u16 height | u16 width | u64 count | count x { u64 t_us, u16 x, u16 y, i8 p }
//! ```
//!
//! CSV files carry a `t_us,x,y,p` header and one event per row. CSV has no
//! sensor header, so the sensor size is passed in or inferred from the data.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{make_tile_mask, DenseTensor, IncrementTensor, Shape, TileShape};

pub const EVB_MAGIC: &[u8; 4] = b"EVB1";
const EVB_HEADER_LEN: u64 = 16;
const EVB_RECORD_LEN: u64 = 13;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Event {
    pub t: u64,
    pub x: u16,
    pub y: u16,
    pub p: i8,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SensorSize {
    pub height: u16,
    pub width: u16,
}

impl SensorSize {
    pub fn new(height: u16, width: u16) -> Self {
        Self { height, width }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EventFormat {
    Evb,
    Csv,
}

impl EventFormat {
    /// Picks the format from a file extension (`.csv` or anything else as EVB).
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some(ext) if ext.eq_ignore_ascii_case("csv") => EventFormat::Csv,
            _ => EventFormat::Evb,
        }
    }
}

/// Time-sorted, in-bounds events from one sensor.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EventStream {
    sensor: SensorSize,
    events: Vec<Event>,
}

impl EventStream {
    /// Validates bounds and polarity, then sorts by timestamp (stable).
    pub fn new(sensor: SensorSize, mut events: Vec<Event>) -> Result<Self> {
        for (index, e) in events.iter().enumerate() {
            check_event(index, e, sensor)?;
        }
        events.sort_by_key(|e| e.t);
        Ok(Self { sensor, events })
    }

    pub fn sensor(&self) -> SensorSize {
        self.sensor
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

    pub fn first_t(&self) -> Option<u64> {
        self.events.first().map(|e| e.t)
    }

    pub fn last_t(&self) -> Option<u64> {
        self.events.last().map(|e| e.t)
    }
}

fn check_event(index: usize, e: &Event, sensor: SensorSize) -> Result<()> {
    if e.x >= sensor.width || e.y >= sensor.height {
        return Err(Error::OutOfBounds {
            index,
            x: e.x.into(),
            y: e.y.into(),
            width: sensor.width.into(),
            height: sensor.height.into(),
        });
    }
    if e.p != 1 && e.p != -1 {
        return Err(Error::InvalidParam(format!("event {index} has polarity {} (expected +1 or -1)", e.p)));
    }
    Ok(())
}

/// Reads a stream. `sensor` is required for CSV unless it should be inferred
/// as one past the largest coordinate; EVB files carry their own.
pub fn read_events(path: &Path, format: EventFormat, sensor: Option<SensorSize>) -> Result<EventStream> {
    match format {
        EventFormat::Evb => read_evb(path),
        EventFormat::Csv => read_csv(path, sensor),
    }
}

pub fn write_events(path: &Path, format: EventFormat, stream: &EventStream) -> Result<()> {
    match format {
        EventFormat::Evb => write_evb(path, stream),
        EventFormat::Csv => write_csv(path, stream),
    }
}

pub fn encode_evb(stream: &EventStream) -> Vec<u8> {
    let mut buf = Vec::with_capacity((EVB_HEADER_LEN + EVB_RECORD_LEN * stream.len() as u64) as usize);
    buf.extend_from_slice(EVB_MAGIC);
    buf.extend_from_slice(&stream.sensor.height.to_le_bytes());
    buf.extend_from_slice(&stream.sensor.width.to_le_bytes());
    buf.extend_from_slice(&(stream.len() as u64).to_le_bytes());
    for e in &stream.events {
        buf.extend_from_slice(&e.t.to_le_bytes());
        buf.extend_from_slice(&e.x.to_le_bytes());
        buf.extend_from_slice(&e.y.to_le_bytes());
        buf.extend_from_slice(&e.p.to_le_bytes());
    }
    buf
}

fn write_evb(path: &Path, stream: &EventStream) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&encode_evb(stream))?;
    w.flush()?;
    Ok(())
}

pub fn decode_evb(bytes: &[u8], path: &Path) -> Result<EventStream> {
    let fail = |offset: u64, msg: String| Error::Format {
        path: path.to_path_buf(),
        offset,
        msg,
    };
    if bytes.len() < EVB_HEADER_LEN as usize {
        return Err(fail(0, format!("truncated header ({} bytes)", bytes.len())));
    }
    if &bytes[..4] != EVB_MAGIC {
        return Err(fail(0, "bad magic, expected \"EVB1\"".into()));
    }
    let height = u16::from_le_bytes([bytes[4], bytes[5]]);
    let width = u16::from_le_bytes([bytes[6], bytes[7]]);
    let count = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
    let body = &bytes[EVB_HEADER_LEN as usize..];
    let expected = count
        .checked_mul(EVB_RECORD_LEN)
        .ok_or_else(|| fail(8, format!("event count {count} overflows")))?;
    if (body.len() as u64) != expected {
        return Err(fail(
            EVB_HEADER_LEN + (body.len() as u64).min(expected),
            format!("header declares {count} events ({expected} bytes), body has {} bytes", body.len()),
        ));
    }
    let sensor = SensorSize { height, width };
    let mut events = Vec::with_capacity(count as usize);
    for (index, rec) in body.chunks_exact(EVB_RECORD_LEN as usize).enumerate() {
        let e = Event {
            t: u64::from_le_bytes(rec[..8].try_into().expect("8 bytes")),
            x: u16::from_le_bytes([rec[8], rec[9]]),
            y: u16::from_le_bytes([rec[10], rec[11]]),
            p: rec[12] as i8,
        };
        let offset = EVB_HEADER_LEN + index as u64 * EVB_RECORD_LEN;
        if let Err(err) = check_event(index, &e, sensor) {
            return Err(fail(offset, err.to_string()));
        }
        events.push(e);
    }
    EventStream::new(sensor, events)
}

fn read_evb(path: &Path) -> Result<EventStream> {
    let mut bytes = Vec::new();
    BufReader::new(File::open(path)?).read_to_end(&mut bytes)?;
    decode_evb(&bytes, path)
}

fn read_csv(path: &Path, sensor: Option<SensorSize>) -> Result<EventStream> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path).map_err(|e| csv_error(path, e))?;
    let headers = rdr.headers().map_err(|e| csv_error(path, e))?.clone();
    let want = ["t_us", "x", "y", "p"];
    if headers.iter().collect::<Vec<_>>() != want {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            line: 1,
            msg: format!("expected header `t_us,x,y,p`, found `{}`", headers.iter().collect::<Vec<_>>().join(",")),
        });
    }
    let mut events = Vec::new();
    for rec in rdr.deserialize::<CsvRow>() {
        let row = rec.map_err(|e| csv_error(path, e))?;
        events.push(Event {
            t: row.t_us,
            x: row.x,
            y: row.y,
            p: row.p,
        });
    }
    let sensor = match sensor {
        Some(s) => s,
        None => SensorSize {
            height: events.iter().map(|e| e.y.saturating_add(1)).max().unwrap_or(0),
            width: events.iter().map(|e| e.x.saturating_add(1)).max().unwrap_or(0),
        },
    };
    EventStream::new(sensor, events)
}

#[derive(Debug, Serialize, Deserialize)]
struct CsvRow {
    t_us: u64,
    x: u16,
    y: u16,
    p: i8,
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    let line = e.position().map(|p| p.line()).unwrap_or(0);
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        kind => Error::Parse {
            path: path.to_path_buf(),
            line,
            msg: format!("{kind:?}"),
        },
    }
}

fn write_csv(path: &Path, stream: &EventStream) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    for e in &stream.events {
        w.serialize(CsvRow {
            t_us: e.t,
            x: e.x,
            y: e.y,
            p: e.p,
        })
        .map_err(|e| csv_error(path, e))?;
    }
    if stream.is_empty() {
        w.write_record(["t_us", "x", "y", "p"]).map_err(|e| csv_error(path, e))?;
    }
    w.flush()?;
    Ok(())
}

/// Events with `end - length < t <= end`.
#[derive(Debug, Clone, Copy)]
pub struct EventWindow<'a> {
    pub events: &'a [Event],
    pub end: u64,
    pub length: u64,
    pub sensor: SensorSize,
}

impl EventWindow<'_> {
    /// Window start (exclusive), possibly negative for windows near t = 0.
    pub fn start(&self) -> i128 {
        i128::from(self.end) - i128::from(self.length)
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }
}

pub fn slice_window(s: &EventStream, end: u64, length: u64) -> Result<EventWindow<'_>> {
    if length == 0 {
        return Err(Error::InvalidParam("window length must be > 0".into()));
    }
    let ev = &s.events;
    let lo = ev.partition_point(|e| e.t.saturating_add(length) <= end);
    let hi = ev.partition_point(|e| e.t <= end);
    Ok(EventWindow {
        events: &ev[lo..hi.max(lo)],
        end,
        length,
        sensor: s.sensor,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EncoderKind {
    /// Signed bilinear temporal histogram over `bins` channels.
    VoxelGrid { bins: usize },
    /// Per-polarity event counts (2 channels: positive, negative).
    EventCount,
    /// Per-polarity normalised timestamp of the latest event (2 channels).
    RecentTimestamp,
}

impl EncoderKind {
    pub fn channels(&self) -> usize {
        match self {
            EncoderKind::VoxelGrid { bins } => *bins,
            EncoderKind::EventCount | EncoderKind::RecentTimestamp => 2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            EncoderKind::VoxelGrid { bins: 0 } => Err(Error::InvalidParam("voxel grid needs at least one bin".into())),
            _ => Ok(()),
        }
    }

    pub fn output_shape(&self, sensor: SensorSize) -> Shape {
        Shape::new(self.channels(), sensor.height.into(), sensor.width.into())
    }
}

impl std::fmt::Display for EncoderKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            EncoderKind::VoxelGrid { bins } => write!(f, "voxel:{bins}"),
            EncoderKind::EventCount => f.write_str("count"),
            EncoderKind::RecentTimestamp => f.write_str("timestamp"),
        }
    }
}

impl std::str::FromStr for EncoderKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "count" => Ok(EncoderKind::EventCount),
            "timestamp" => Ok(EncoderKind::RecentTimestamp),
            _ => {
                let bins = s
                    .strip_prefix("voxel:")
                    .and_then(|b| b.parse::<usize>().ok())
                    .ok_or_else(|| Error::InvalidParam(format!("unknown encoder `{s}` (count, timestamp, voxel:B)")))?;
                let kind = EncoderKind::VoxelGrid { bins };
                kind.validate()?;
                Ok(kind)
            }
        }
    }
}

pub fn encode(w: &EventWindow<'_>, kind: EncoderKind) -> Result<DenseTensor> {
    kind.validate()?;
    let shape = kind.output_shape(w.sensor);
    let mut out = DenseTensor::zeros(shape);
    let start = w.start();
    let length = w.length as f64;
    // offset of each event inside the window, in (0, length]
    let offset = |e: &Event| (i128::from(e.t) - start) as f64;
    match kind {
        EncoderKind::EventCount => {
            for e in w.events {
                let c = usize::from(e.p < 0);
                let i = out.index(c, e.y.into(), e.x.into());
                out.data_mut()[i] += 1.0;
            }
        }
        EncoderKind::RecentTimestamp => {
            // events are time-sorted, so the last write wins
            for e in w.events {
                let c = usize::from(e.p < 0);
                out.set(c, e.y.into(), e.x.into(), (offset(e) / length) as f32);
            }
        }
        EncoderKind::VoxelGrid { bins } => {
            let scale = (bins - 1) as f64 / length;
            for e in w.events {
                let t_star = offset(e) * scale;
                let lo = t_star.floor() as usize;
                for b in [lo, lo + 1] {
                    if b >= bins {
                        continue;
                    }
                    let weight = (1.0 - (b as f64 - t_star).abs()).max(0.0);
                    if weight > 0.0 {
                        let i = out.index(b, e.y.into(), e.x.into());
                        out.data_mut()[i] += f32::from(e.p) * weight as f32;
                    }
                }
            }
        }
    }
    Ok(out)
}

/// `cur - prev` with an exact tile mask.
pub fn step_increment(prev: &DenseTensor, cur: &DenseTensor, tile: TileShape) -> Result<IncrementTensor> {
    let values = cur.sub(prev)?;
    let mask = make_tile_mask(&values, tile);
    IncrementTensor::from_parts(values, mask)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::integrate;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn ev(t: u64, x: u16, y: u16, p: i8) -> Event {
        Event { t, x, y, p }
    }

    fn random_stream(seed: u64, n: usize, sensor: SensorSize) -> EventStream {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let events = (0..n)
            .map(|_| {
                ev(
                    rng.gen_range(0..200_000),
                    rng.gen_range(0..sensor.width),
                    rng.gen_range(0..sensor.height),
                    if rng.gen_bool(0.5) { 1 } else { -1 },
                )
            })
            .collect();
        EventStream::new(sensor, events).unwrap()
    }

    #[test]
    fn csv_empty_and_echo() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("e.csv");
        std::fs::write(&p, "t_us,x,y,p\n").unwrap();
        let s = read_events(&p, EventFormat::Csv, Some(SensorSize::new(4, 4))).unwrap();
        assert!(s.is_empty());

        std::fs::write(&p, "t_us,x,y,p\n10,1,2,1\n5,3,0,-1\n20,0,0,1\n").unwrap();
        let s = read_events(&p, EventFormat::Csv, Some(SensorSize::new(4, 4))).unwrap();
        assert_eq!(s.events(), &[ev(5, 3, 0, -1), ev(10, 1, 2, 1), ev(20, 0, 0, 1)]);
        let inferred = read_events(&p, EventFormat::Csv, None).unwrap();
        assert_eq!(inferred.sensor(), SensorSize::new(3, 4));
    }

    #[test]
    fn csv_errors_name_line() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("e.csv");
        std::fs::write(&p, "t_us,x,y,p\n10,1,2,1\n11,zz,2,1\n").unwrap();
        match read_events(&p, EventFormat::Csv, Some(SensorSize::new(4, 4))) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
        std::fs::write(&p, "t_us,x,y,p\n10,9,2,1\n").unwrap();
        assert!(matches!(
            read_events(&p, EventFormat::Csv, Some(SensorSize::new(4, 4))),
            Err(Error::OutOfBounds { index: 0, .. })
        ));
        std::fs::write(&p, "t_us,x,y,p\n10,1,2,0\n").unwrap();
        assert!(read_events(&p, EventFormat::Csv, Some(SensorSize::new(4, 4))).is_err());
    }

    #[test]
    fn evb_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("e.evb");
        let s = random_stream(1, 500, SensorSize::new(30, 40));
        write_events(&p, EventFormat::Evb, &s).unwrap();
        assert_eq!(std::fs::metadata(&p).unwrap().len(), 16 + 13 * 500);
        assert_eq!(read_events(&p, EventFormat::Evb, None).unwrap(), s);

        let c = dir.path().join("e.csv");
        write_events(&c, EventFormat::Csv, &s).unwrap();
        assert_eq!(read_events(&c, EventFormat::Csv, Some(s.sensor())).unwrap(), s);
    }

    #[test]
    fn evb_rejects_corruption() {
        let s = random_stream(2, 3, SensorSize::new(8, 8));
        let good = encode_evb(&s);
        let path = Path::new("mem.evb");
        let mut bad = good.clone();
        bad[0] = b'X';
        assert!(matches!(decode_evb(&bad, path), Err(Error::Format { offset: 0, .. })));
        assert!(matches!(decode_evb(&good[..good.len() - 1], path), Err(Error::Format { .. })));
        let mut oob = good.clone();
        oob[16 + 13 + 8] = 200; // x of the second record
        match decode_evb(&oob, path) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, 16 + 13),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn window_examples() {
        let s = EventStream::new(
            SensorSize::new(2, 2),
            vec![ev(10, 0, 0, 1), ev(60, 0, 0, 1), ev(110, 0, 0, 1)],
        )
        .unwrap();
        assert!(slice_window(&s, 5, 50).unwrap().is_empty());
        // the lower edge is exclusive: t = 60 sits exactly on 110 - 50
        let w = slice_window(&s, 110, 50).unwrap();
        assert_eq!(w.events.iter().map(|e| e.t).collect::<Vec<_>>(), vec![110]);
        let w = slice_window(&s, 110, 51).unwrap();
        assert_eq!(w.events.iter().map(|e| e.t).collect::<Vec<_>>(), vec![60, 110]);
        assert!(slice_window(&s, 110, 0).is_err());
    }

    #[test]
    fn window_matches_linear_scan() {
        let s = random_stream(3, 2000, SensorSize::new(10, 10));
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..200 {
            let end = rng.gen_range(0..210_000u64);
            let len = rng.gen_range(1..60_000u64);
            let w = slice_window(&s, end, len).unwrap();
            let want: Vec<Event> = s
                .events()
                .iter()
                .copied()
                .filter(|e| i128::from(e.t) > i128::from(end) - i128::from(len) && e.t <= end)
                .collect();
            assert_eq!(w.events, &want[..]);
        }
    }

    #[test]
    fn empty_window_encodes_to_zero() {
        let s = EventStream::new(SensorSize::new(3, 4), vec![]).unwrap();
        let w = slice_window(&s, 100, 50).unwrap();
        for kind in [EncoderKind::EventCount, EncoderKind::RecentTimestamp, EncoderKind::VoxelGrid { bins: 3 }] {
            let t = encode(&w, kind).unwrap();
            assert_eq!(t.shape(), kind.output_shape(s.sensor()));
            assert!(t.data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn count_encoding() {
        let s = EventStream::new(
            SensorSize::new(4, 8),
            vec![ev(1, 5, 2, 1), ev(2, 5, 2, 1), ev(3, 5, 2, 1), ev(3, 1, 1, -1)],
        )
        .unwrap();
        let t = encode(&slice_window(&s, 3, 50).unwrap(), EncoderKind::EventCount).unwrap();
        assert_eq!(t.get(0, 2, 5), 3.0);
        assert_eq!(t.get(1, 1, 1), 1.0);
        assert_eq!(t.data().iter().sum::<f32>(), 4.0);
    }

    #[test]
    fn timestamp_encoding_keeps_latest() {
        let s = EventStream::new(SensorSize::new(2, 2), vec![ev(60, 1, 0, 1), ev(85, 1, 0, 1)]).unwrap();
        let t = encode(&slice_window(&s, 100, 50).unwrap(), EncoderKind::RecentTimestamp).unwrap();
        assert!((t.get(0, 0, 1) - 0.7).abs() < 1e-6);
        assert_eq!(t.get(1, 0, 1), 0.0);
    }

    #[test]
    fn voxel_hat_function() {
        // window (0, 100], B = 5: t* = t * 4 / 100
        let sensor = SensorSize::new(1, 2);
        let on_bin = EventStream::new(sensor, vec![ev(50, 0, 0, -1)]).unwrap();
        let t = encode(&slice_window(&on_bin, 100, 100).unwrap(), EncoderKind::VoxelGrid { bins: 5 }).unwrap();
        let col: Vec<f32> = (0..5).map(|b| t.get(b, 0, 0)).collect();
        assert_eq!(col, vec![0.0, 0.0, -1.0, 0.0, 0.0]);

        let mid = EventStream::new(sensor, vec![ev(6250, 1, 0, 1)]).unwrap();
        let t = encode(&slice_window(&mid, 10_000, 10_000).unwrap(), EncoderKind::VoxelGrid { bins: 5 }).unwrap();
        let col: Vec<f32> = (0..5).map(|b| t.get(b, 0, 1)).collect();
        assert_eq!(col, vec![0.0, 0.0, 0.5, 0.5, 0.0]);
    }

    #[test]
    fn voxel_partition_of_unity() {
        let s = random_stream(5, 300, SensorSize::new(6, 6));
        let w = slice_window(&s, 200_000, 200_000).unwrap();
        for e in w.events {
            let one = EventStream::new(s.sensor(), vec![*e]).unwrap();
            let t = encode(&slice_window(&one, 200_000, 200_000).unwrap(), EncoderKind::VoxelGrid { bins: 7 }).unwrap();
            let total: f32 = t.data().iter().map(|v| v.abs()).sum();
            assert!((total - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn encoder_parsing() {
        assert_eq!("count".parse::<EncoderKind>().unwrap(), EncoderKind::EventCount);
        assert_eq!("voxel:5".parse::<EncoderKind>().unwrap(), EncoderKind::VoxelGrid { bins: 5 });
        assert!("voxel:0".parse::<EncoderKind>().is_err());
        assert!("frames".parse::<EncoderKind>().is_err());
    }

    #[test]
    fn increment_examples() {
        let shape = Shape::new(1, 1, 2);
        let tile = TileShape::new(1, 1).unwrap();
        let a = DenseTensor::from_vec(shape, vec![1.0, 2.0]).unwrap();
        let z = step_increment(&a, &a, tile).unwrap();
        assert_eq!(z.mask().count_true(), 0);
        let b = DenseTensor::from_vec(shape, vec![1.0, 5.0]).unwrap();
        assert_eq!(step_increment(&a, &b, tile).unwrap().values().data(), &[0.0, 3.0]);
        assert!(step_increment(&a, &DenseTensor::zeros(Shape::new(1, 2, 1)), tile).is_err());
    }

    #[test]
    fn sliding_windows_telescope() {
        let s = random_stream(6, 4000, SensorSize::new(12, 16));
        let tile = TileShape::new(4, 4).unwrap();
        for kind in [EncoderKind::EventCount, EncoderKind::RecentTimestamp, EncoderKind::VoxelGrid { bins: 4 }] {
            let (len, shift) = (50_000, 1_000);
            let enc = |end| encode(&slice_window(&s, end, len).unwrap(), kind).unwrap();
            let base = enc(60_000);
            let mut acc = base.clone();
            let mut prev = base;
            for n in 1..=40u64 {
                let cur = enc(60_000 + n * shift);
                let inc = step_increment(&prev, &cur, tile).unwrap();
                let one_step = integrate(&prev, &inc).unwrap();
                if kind == EncoderKind::EventCount {
                    assert_eq!(one_step, cur);
                } else {
                    assert!(one_step.max_abs_diff(&cur).unwrap() <= 1e-6);
                }
                acc = integrate(&acc, &inc).unwrap();
                assert!(acc.max_abs_diff(&cur).unwrap() <= 1e-5);
                prev = cur;
            }
            if kind == EncoderKind::EventCount {
                assert!(acc.data().iter().all(|v| v.fract() == 0.0 && *v >= 0.0));
            }
        }
    }
}
