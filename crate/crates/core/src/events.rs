//! Event data model, time slicing, spatio-temporal embedding and file I/O.
//!
//! Two on-disk formats are supported:
//!
//! * CSV: `# width=<W>` and `# height=<H>` comment lines, an optional
//!   `# duration=<D>` comment line, then the header `t_us,x,y,p` and one
//!   event per row.
//! * Binary: magic `EVT1`, `u32` width, `u32` height, `u64` count, then
//!   `count` records of `{u64 t, u16 x, u16 y, i8 p}`, all little-endian.

use std::fmt;
use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use nalgebra::Point3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Timestamps are integer microseconds from the start of the stream.
pub type Micros = u64;

const BINARY_MAGIC: &[u8; 4] = b"EVT1";

#[derive(Error, Debug)]
pub enum EventError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("invalid event stream: {0}")]
    Validation(String),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
}

impl EventError {
    fn parse(line: usize, message: impl Into<String>) -> Self {
        EventError::Parse {
            line,
            message: message.into(),
        }
    }

    fn io(path: &Path, source: io::Error) -> Self {
        EventError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Polarity {
    Positive,
    Negative,
}

impl Polarity {
    pub fn as_i8(self) -> i8 {
        match self {
            Polarity::Positive => 1,
            Polarity::Negative => -1,
        }
    }

    pub fn from_i8(value: i8) -> Option<Self> {
        match value {
            1 => Some(Polarity::Positive),
            -1 => Some(Polarity::Negative),
            _ => None,
        }
    }
}

/// One sensor event.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Event {
    pub t: Micros,
    pub x: u16,
    pub y: u16,
    pub p: Polarity,
}

impl Event {
    pub fn new(t: Micros, x: u16, y: u16, p: Polarity) -> Self {
        Event { t, x, y, p }
    }

    #[inline]
    pub fn xy(&self) -> [f64; 2] {
        [self.x as f64, self.y as f64]
    }
}

/// Sensor geometry in pixels.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Geometry {
    pub width: u32,
    pub height: u32,
}

impl Geometry {
    pub fn new(width: u32, height: u32) -> Self {
        Geometry { width, height }
    }

    pub fn contains(&self, x: u16, y: u16) -> bool {
        (x as u32) < self.width && (y as u32) < self.height
    }
}

/// A time-ordered sequence of events with its sensor geometry.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EventStream {
    events: Vec<Event>,
    geometry: Geometry,
    duration: Micros,
}

impl EventStream {
    /// Builds a stream, stably sorting the events by timestamp.
    ///
    /// Events cover `[0, duration)`; `duration` defaults to one past the
    /// largest timestamp when `None`.
    pub fn new(
        mut events: Vec<Event>,
        geometry: Geometry,
        duration: Option<Micros>,
    ) -> Result<Self, EventError> {
        if let Some(bad) = events.iter().find(|e| !geometry.contains(e.x, e.y)) {
            return Err(EventError::Validation(format!(
                "event at ({}, {}) t={} lies outside the {}x{} sensor",
                bad.x, bad.y, bad.t, geometry.width, geometry.height
            )));
        }
        if !events.windows(2).all(|w| w[0].t <= w[1].t) {
            events.sort_by_key(|e| e.t);
        }
        let end = events.last().map_or(0, |e| e.t + 1);
        let duration = duration.unwrap_or(end);
        if duration < end {
            return Err(EventError::Validation(format!(
                "duration {duration} us does not cover the last event at {} us",
                end - 1
            )));
        }
        Ok(EventStream {
            events,
            geometry,
            duration,
        })
    }

    pub fn empty(geometry: Geometry) -> Self {
        EventStream {
            events: Vec::new(),
            geometry,
            duration: 0,
        }
    }

    pub fn events(&self) -> &[Event] {
        &self.events
    }

    pub fn into_events(self) -> Vec<Event> {
        self.events
    }

    pub fn geometry(&self) -> Geometry {
        self.geometry
    }

    pub fn width(&self) -> u32 {
        self.geometry.width
    }

    pub fn height(&self) -> u32 {
        self.geometry.height
    }

    pub fn duration(&self) -> Micros {
        self.duration
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    /// The events with `t_start <= t < t_start + t_len`.
    pub fn slice(&self, t_start: Micros, t_len: Micros) -> EventSlice<'_> {
        EventSlice::new(&self.events, self.geometry, t_start, t_len)
    }

    /// A new stream keeping the events selected by `keep`, same geometry and duration.
    pub fn filtered(&self, mut keep: impl FnMut(usize, &Event) -> bool) -> EventStream {
        let events = self
            .events
            .iter()
            .enumerate()
            .filter(|(i, e)| keep(*i, e))
            .map(|(_, e)| *e)
            .collect();
        EventStream {
            events,
            geometry: self.geometry,
            duration: self.duration,
        }
    }

    pub fn load(path: impl AsRef<Path>, format: EventFormat) -> Result<Self, EventError> {
        load_events(path, format)
    }

    pub fn store(&self, path: impl AsRef<Path>, format: EventFormat) -> Result<(), EventError> {
        store_events(self, path, format)
    }
}

/// A half-open time window `[t_start, t_start + t_len)` of a stream.
#[derive(Clone, Copy, Debug)]
pub struct EventSlice<'a> {
    geometry: Geometry,
    t_start: Micros,
    t_len: Micros,
    events: &'a [Event],
}

impl<'a> EventSlice<'a> {
    /// `events` must be sorted by timestamp.
    pub fn new(events: &'a [Event], geometry: Geometry, t_start: Micros, t_len: Micros) -> Self {
        let end = t_start.saturating_add(t_len);
        let lo = events.partition_point(|e| e.t < t_start);
        let hi = lo + events[lo..].partition_point(|e| e.t < end);
        EventSlice {
            geometry,
            t_start,
            t_len,
            events: &events[lo..hi],
        }
    }

    pub fn events(&self) -> &'a [Event] {
        self.events
    }

    pub fn geometry(&self) -> Geometry {
        self.geometry
    }

    pub fn t_start(&self) -> Micros {
        self.t_start
    }

    pub fn t_len(&self) -> Micros {
        self.t_len
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    /// Maps every event to `(x, y, (t - t_start) * temporal_scale / 1000)`.
    pub fn embed(&self, temporal_scale: f64) -> Vec<Point3<f64>> {
        embed(self, temporal_scale)
    }
}

/// Slice length, step between slice starts and the temporal scale of the embedding.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SlicingParams {
    pub t_l: Micros,
    pub t_s: Micros,
    /// Spatial units per millisecond along the time axis.
    pub temporal_scale: f64,
}

impl SlicingParams {
    pub fn new(t_l: Micros, t_s: Micros, temporal_scale: f64) -> Result<Self, EventError> {
        let params = SlicingParams {
            t_l,
            t_s,
            temporal_scale,
        };
        params.validate()?;
        Ok(params)
    }

    pub fn validate(&self) -> Result<(), EventError> {
        if self.t_s == 0 || self.t_s > self.t_l {
            return Err(EventError::Validation(format!(
                "slicing requires 0 < t_s <= t_l (t_s={}, t_l={})",
                self.t_s, self.t_l
            )));
        }
        if !(self.temporal_scale > 0.0) || !self.temporal_scale.is_finite() {
            return Err(EventError::Validation(format!(
                "temporal_scale must be positive, got {}",
                self.temporal_scale
            )));
        }
        Ok(())
    }

    /// Overlap between consecutive slices.
    pub fn overlap(&self) -> Micros {
        self.t_l - self.t_s
    }
}

pub fn slice(stream: &EventStream, t_start: Micros, t_len: Micros) -> EventSlice<'_> {
    stream.slice(t_start, t_len)
}

/// Spatio-temporal embedding with time re-based to the slice start. Polarity is dropped.
pub fn embed(slice: &EventSlice<'_>, temporal_scale: f64) -> Vec<Point3<f64>> {
    let t0 = slice.t_start;
    let k = temporal_scale / 1000.0;
    slice
        .events
        .iter()
        .map(|e| Point3::new(e.x as f64, e.y as f64, (e.t - t0) as f64 * k))
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum EventFormat {
    Csv,
    Binary,
}

impl EventFormat {
    /// `.bin`/`.evt` are binary, everything else is CSV.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some("bin") | Some("evt") => EventFormat::Binary,
            _ => EventFormat::Csv,
        }
    }
}

impl FromStr for EventFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "csv" => Ok(EventFormat::Csv),
            "bin" | "binary" => Ok(EventFormat::Binary),
            other => Err(format!("unknown event format '{other}'")),
        }
    }
}

impl fmt::Display for EventFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EventFormat::Csv => f.write_str("csv"),
            EventFormat::Binary => f.write_str("binary"),
        }
    }
}

pub fn load_events(path: impl AsRef<Path>, format: EventFormat) -> Result<EventStream, EventError> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| EventError::io(path, e))?;
    let reader = BufReader::new(file);
    match format {
        EventFormat::Csv => read_csv(reader),
        EventFormat::Binary => read_binary(reader).map_err(|e| match e {
            EventError::Io { source, .. } => EventError::io(path, source),
            other => other,
        }),
    }
}

pub fn store_events(
    stream: &EventStream,
    path: impl AsRef<Path>,
    format: EventFormat,
) -> Result<(), EventError> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| EventError::io(path, e))?;
    let mut writer = BufWriter::new(file);
    let result = match format {
        EventFormat::Csv => write_csv(stream, &mut writer),
        EventFormat::Binary => write_binary(stream, &mut writer),
    };
    result
        .and_then(|_| writer.flush())
        .map_err(|e| EventError::io(path, e))
}

pub fn write_csv<W: Write>(stream: &EventStream, mut w: W) -> io::Result<()> {
    writeln!(w, "# width={}", stream.width())?;
    writeln!(w, "# height={}", stream.height())?;
    writeln!(w, "# duration={}", stream.duration())?;
    writeln!(w, "t_us,x,y,p")?;
    for e in &stream.events {
        writeln!(w, "{},{},{},{}", e.t, e.x, e.y, e.p.as_i8())?;
    }
    Ok(())
}

pub fn read_csv<R: BufRead>(reader: R) -> Result<EventStream, EventError> {
    let mut width = None;
    let mut height = None;
    let mut duration = None;
    let mut seen_header = false;
    let mut events = Vec::new();

    for (idx, line) in reader.lines().enumerate() {
        let lineno = idx + 1;
        let line = line.map_err(|e| EventError::parse(lineno, e.to_string()))?;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        if let Some(comment) = line.strip_prefix('#') {
            if let Some((key, value)) = comment.trim().split_once('=') {
                let parsed = || {
                    value
                        .trim()
                        .parse::<u64>()
                        .map_err(|e| EventError::parse(lineno, format!("bad {}: {e}", key.trim())))
                };
                match key.trim() {
                    "width" => width = Some(parsed()?),
                    "height" => height = Some(parsed()?),
                    "duration" => duration = Some(parsed()?),
                    _ => {}
                }
            }
            continue;
        }
        if !seen_header {
            if line.replace(' ', "") != "t_us,x,y,p" {
                return Err(EventError::parse(
                    lineno,
                    format!("expected header 't_us,x,y,p', found '{line}'"),
                ));
            }
            seen_header = true;
            continue;
        }
        events.push(parse_row(line, lineno)?);
    }

    let width = width.ok_or_else(|| EventError::Validation("missing '# width=' line".into()))?;
    let height = height.ok_or_else(|| EventError::Validation("missing '# height=' line".into()))?;
    if !seen_header && !events.is_empty() {
        return Err(EventError::Validation("missing 't_us,x,y,p' header".into()));
    }
    let geometry = Geometry::new(to_u32(width, "width")?, to_u32(height, "height")?);
    EventStream::new(events, geometry, duration)
}

fn to_u32(v: u64, what: &str) -> Result<u32, EventError> {
    u32::try_from(v).map_err(|_| EventError::Validation(format!("{what} {v} out of range")))
}

fn parse_row(line: &str, lineno: usize) -> Result<Event, EventError> {
    let mut fields = line.split(',').map(str::trim);
    let mut next = |name: &str| {
        fields
            .next()
            .ok_or_else(|| EventError::parse(lineno, format!("missing field '{name}'")))
    };
    let t = next("t_us")?;
    let x = next("x")?;
    let y = next("y")?;
    let p = next("p")?;
    if fields.next().is_some() {
        return Err(EventError::parse(lineno, "too many fields"));
    }
    let t = t
        .parse::<u64>()
        .map_err(|e| EventError::parse(lineno, format!("bad t_us '{t}': {e}")))?;
    let x = x
        .parse::<u16>()
        .map_err(|e| EventError::parse(lineno, format!("bad x '{x}': {e}")))?;
    let y = y
        .parse::<u16>()
        .map_err(|e| EventError::parse(lineno, format!("bad y '{y}': {e}")))?;
    let p = p
        .parse::<i8>()
        .ok()
        .and_then(Polarity::from_i8)
        .ok_or_else(|| EventError::parse(lineno, format!("bad polarity '{p}', expected 1 or -1")))?;
    Ok(Event::new(t, x, y, p))
}

pub fn write_binary<W: Write>(stream: &EventStream, mut w: W) -> io::Result<()> {
    w.write_all(BINARY_MAGIC)?;
    w.write_all(&stream.width().to_le_bytes())?;
    w.write_all(&stream.height().to_le_bytes())?;
    w.write_all(&(stream.events.len() as u64).to_le_bytes())?;
    for e in &stream.events {
        w.write_all(&e.t.to_le_bytes())?;
        w.write_all(&e.x.to_le_bytes())?;
        w.write_all(&e.y.to_le_bytes())?;
        w.write_all(&e.p.as_i8().to_le_bytes())?;
    }
    Ok(())
}

/// Reads the binary format. The duration is one past the largest timestamp.
pub fn read_binary<R: Read>(mut r: R) -> Result<EventStream, EventError> {
    let io_err = |e: io::Error| match e.kind() {
        io::ErrorKind::UnexpectedEof => EventError::Validation("truncated header".into()),
        _ => EventError::Io {
            path: PathBuf::new(),
            source: e,
        },
    };
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(io_err)?;
    if &magic != BINARY_MAGIC {
        return Err(EventError::Validation("bad magic, expected EVT1".into()));
    }
    let mut u32buf = [0u8; 4];
    r.read_exact(&mut u32buf).map_err(io_err)?;
    let width = u32::from_le_bytes(u32buf);
    r.read_exact(&mut u32buf).map_err(io_err)?;
    let height = u32::from_le_bytes(u32buf);
    let mut u64buf = [0u8; 8];
    r.read_exact(&mut u64buf).map_err(io_err)?;
    let count = u64::from_le_bytes(u64buf);

    let mut events = Vec::with_capacity(count.min(1 << 24) as usize);
    let mut record = [0u8; 13];
    for i in 0..count {
        r.read_exact(&mut record).map_err(|e| {
            EventError::Validation(format!("truncated record {i} of {count}: {e}"))
        })?;
        let t = u64::from_le_bytes(record[0..8].try_into().unwrap());
        let x = u16::from_le_bytes([record[8], record[9]]);
        let y = u16::from_le_bytes([record[10], record[11]]);
        let p = Polarity::from_i8(record[12] as i8).ok_or_else(|| {
            EventError::Validation(format!("record {i}: bad polarity {}", record[12] as i8))
        })?;
        events.push(Event::new(t, x, y, p));
    }
    EventStream::new(events, Geometry::new(width, height), None)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ev(t: u64, x: u16, y: u16, p: i8) -> Event {
        Event::new(t, x, y, Polarity::from_i8(p).unwrap())
    }

    fn geometry() -> Geometry {
        Geometry::new(346, 260)
    }

    #[test]
    fn parses_two_rows() {
        let text = "# width=346\n# height=260\nt_us,x,y,p\n0,10,20,1\n5,11,20,-1\n";
        let s = read_csv(text.as_bytes()).unwrap();
        assert_eq!(s.len(), 2);
        assert_eq!(s.duration(), 6);
        assert_eq!(s.events()[1], ev(5, 11, 20, -1));
        assert_eq!(s.geometry(), geometry());
    }

    #[test]
    fn empty_body_is_empty_stream() {
        let s = read_csv("# width=346\n# height=260\nt_us,x,y,p\n".as_bytes()).unwrap();
        assert!(s.is_empty());
        assert_eq!(s.duration(), 0);
    }

    #[test]
    fn malformed_row_reports_line() {
        let text = "# width=346\n# height=260\nt_us,x,y,p\n0,10,20,1\n5,eleven,20,1\n";
        match read_csv(text.as_bytes()) {
            Err(EventError::Parse { line, .. }) => assert_eq!(line, 5),
            other => panic!("expected parse error, got {other:?}"),
        }
        let text = "# width=346\n# height=260\nt_us,x,y,p\n0,10,20,0\n";
        assert!(matches!(
            read_csv(text.as_bytes()),
            Err(EventError::Parse { line: 4, .. })
        ));
    }

    #[test]
    fn out_of_geometry_is_validation_error() {
        let text = "# width=10\n# height=10\nt_us,x,y,p\n0,10,2,1\n";
        assert!(matches!(
            read_csv(text.as_bytes()),
            Err(EventError::Validation(_))
        ));
    }

    #[test]
    fn unordered_rows_are_stably_sorted() {
        let text = "# width=346\n# height=260\nt_us,x,y,p\n7,1,1,1\n3,2,2,1\n7,3,3,-1\n3,4,4,-1\n";
        let s = read_csv(text.as_bytes()).unwrap();
        let order: Vec<_> = s.events().iter().map(|e| (e.t, e.x)).collect();
        assert_eq!(order, vec![(3, 2), (3, 4), (7, 1), (7, 3)]);
    }

    #[test]
    fn store_empty_writes_header_only() {
        let mut buf = Vec::new();
        write_csv(&EventStream::empty(geometry()), &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().filter(|l| !l.starts_with('#')).count(), 1);
        assert!(text.ends_with("t_us,x,y,p\n"));
    }

    #[test]
    fn store_three_events_in_order() {
        let s = EventStream::new(
            vec![ev(4, 1, 1, 1), ev(1, 2, 2, -1), ev(2, 3, 3, 1)],
            geometry(),
            None,
        )
        .unwrap();
        let mut buf = Vec::new();
        write_csv(&s, &mut buf).unwrap();
        let rows: Vec<_> = String::from_utf8(buf)
            .unwrap()
            .lines()
            .skip(4)
            .map(str::to_owned)
            .collect();
        assert_eq!(rows, vec!["1,2,2,-1", "2,3,3,1", "4,1,1,1"]);
    }

    #[test]
    fn binary_layout() {
        let s = EventStream::new(vec![ev(258, 3, 4, -1)], Geometry::new(346, 260), None).unwrap();
        let mut buf = Vec::new();
        write_binary(&s, &mut buf).unwrap();
        assert_eq!(buf.len(), 4 + 4 + 4 + 8 + 13);
        assert_eq!(&buf[0..4], b"EVT1");
        assert_eq!(&buf[4..8], &346u32.to_le_bytes());
        assert_eq!(&buf[12..20], &1u64.to_le_bytes());
        assert_eq!(&buf[20..28], &258u64.to_le_bytes());
        assert_eq!(buf[32], 0xff);
        assert_eq!(read_binary(buf.as_slice()).unwrap(), s);
    }

    #[test]
    fn half_open_slices() {
        let s = EventStream::new(
            vec![ev(0, 0, 0, 1), ev(5, 0, 0, 1), ev(10, 0, 0, 1)],
            geometry(),
            None,
        )
        .unwrap();
        let ts: Vec<_> = s.slice(0, 10).events().iter().map(|e| e.t).collect();
        assert_eq!(ts, vec![0, 5]);
        assert!(s.slice(11, 100).is_empty());
        assert!(s.slice(u64::MAX - 1, 10).is_empty());
    }

    #[test]
    fn overlapping_slices_share_overlap_window() {
        let events: Vec<_> = (0..20_000u64).step_by(7).map(|t| ev(t, 1, 1, 1)).collect();
        let s = EventStream::new(events, geometry(), None).unwrap();
        let params = SlicingParams::new(10_000, 3_000, 1.0).unwrap();
        assert_eq!(params.overlap(), 7_000);
        let a: std::collections::BTreeSet<_> =
            s.slice(0, params.t_l).events().iter().map(|e| e.t).collect();
        let b: std::collections::BTreeSet<_> = s
            .slice(params.t_s, params.t_l)
            .events()
            .iter()
            .map(|e| e.t)
            .collect();
        let shared: std::collections::BTreeSet<_> = a.intersection(&b).copied().collect();
        let window: std::collections::BTreeSet<_> =
            s.slice(3_000, 7_000).events().iter().map(|e| e.t).collect();
        assert_eq!(shared, window);
    }

    #[test]
    fn embedding_rebases_and_scales() {
        let s = EventStream::new(
            vec![ev(2_000, 3, 4, 1), ev(3_000, 5, 6, -1), ev(3_500, 7, 8, 1)],
            geometry(),
            None,
        )
        .unwrap();
        let sl = s.slice(2_000, 5_000);
        let pts = sl.embed(1.0);
        assert_eq!(pts[0], Point3::new(3.0, 4.0, 0.0));
        assert_eq!(pts[1], Point3::new(5.0, 6.0, 1.0));
        let pts = sl.embed(2.0);
        assert_eq!(pts[2].z, 3.0);
    }

    #[test]
    fn slicing_params_invariants() {
        assert!(SlicingParams::new(10, 0, 1.0).is_err());
        assert!(SlicingParams::new(10, 11, 1.0).is_err());
        assert!(SlicingParams::new(10, 10, 0.0).is_err());
        assert!(SlicingParams::new(10, 10, 1.0).is_ok());
    }
}
