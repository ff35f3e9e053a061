//! Two-view sparse event representation and its line-oriented file format.
//!
//! A file starts with one header object and then holds one event object per
//! line. Floats are written with the shortest representation that parses
//! back to the same `f64`, so `read_events(write_events(e)) == e` bit for bit.

use std::fmt;
use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Transverse cells per view.
pub const GRID_TRANSVERSE: usize = 80;
/// Planes per view (the axis shared by both views).
pub const GRID_PLANES: usize = 100;
/// Views per event (XZ top view, YZ side view).
pub const N_VIEWS: usize = 2;
pub const FORMAT_VERSION: u32 = 1;
pub const DEFAULT_N_CLASSES: u8 = 6;
pub const DEFAULT_P_MAX: u8 = 8;

/// Semantic particle classes.
pub const CLASS_NAMES: [&str; 6] = ["electron", "muon", "proton", "pion", "photon", "other"];
pub const CLASS_ELECTRON: u8 = 0;
pub const CLASS_MUON: u8 = 1;
pub const CLASS_PROTON: u8 = 2;
pub const CLASS_PION: u8 = 3;
pub const CLASS_PHOTON: u8 = 4;
pub const CLASS_OTHER: u8 = 5;

#[derive(Debug, Error)]
pub enum EventIoError {
    #[error("malformed record at line {line}: {reason}")]
    MalformedRecord { line: usize, reason: String },
    #[error("unsupported format version {found} (expected {FORMAT_VERSION})")]
    VersionMismatch { found: u32 },
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// One detection: `coord = [transverse, plane]` in grid units.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hit {
    pub coord: [f64; 2],
    pub value: f64,
    pub sem_label: u8,
    pub ins_label: u8,
}

impl Hit {
    pub fn new(transverse: f64, plane: f64, value: f64, sem_label: u8, ins_label: u8) -> Self {
        Self {
            coord: [transverse, plane],
            value,
            sem_label,
            ins_label,
        }
    }

    pub fn transverse(&self) -> f64 {
        self.coord[0]
    }

    pub fn plane(&self) -> f64 {
        self.coord[1]
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct View {
    pub view_id: u8,
    pub hits: Vec<Hit>,
}

impl View {
    pub fn new(view_id: u8, hits: Vec<Hit>) -> Self {
        Self { view_id, hits }
    }

    pub fn len(&self) -> usize {
        self.hits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.hits.is_empty()
    }

    pub fn coords(&self) -> Vec<[f64; 2]> {
        self.hits.iter().map(|h| h.coord).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Event {
    pub event_id: u64,
    pub views: [View; N_VIEWS],
    /// `1 + max instance id` over both views, 0 for an empty event.
    pub n_instances: usize,
}

impl Event {
    pub fn new(event_id: u64, view0: Vec<Hit>, view1: Vec<Hit>) -> Self {
        let n_instances = view0
            .iter()
            .chain(view1.iter())
            .map(|h| h.ins_label as usize + 1)
            .max()
            .unwrap_or(0);
        Self {
            event_id,
            views: [View::new(0, view0), View::new(1, view1)],
            n_instances,
        }
    }

    pub fn n_hits(&self) -> usize {
        self.views.iter().map(View::len).sum()
    }

    pub fn hits(&self) -> impl Iterator<Item = &Hit> {
        self.views.iter().flat_map(|v| v.hits.iter())
    }

    /// Per-view flattened instance labels, view 0 first.
    pub fn ins_labels(&self) -> Vec<usize> {
        self.hits().map(|h| h.ins_label as usize).collect()
    }

    pub fn sem_labels(&self) -> Vec<usize> {
        self.hits().map(|h| h.sem_label as usize).collect()
    }
}

/// Label ranges an event is validated against.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LabelSpace {
    pub n_classes: u8,
    pub p_max: u8,
}

impl Default for LabelSpace {
    fn default() -> Self {
        Self {
            n_classes: DEFAULT_N_CLASSES,
            p_max: DEFAULT_P_MAX,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub format_version: u32,
    pub n_classes: u8,
    pub p_max: u8,
    pub grid: [usize; 2],
    pub n_events: u64,
}

impl DatasetHeader {
    pub fn new(labels: LabelSpace, n_events: u64) -> Self {
        Self {
            format_version: FORMAT_VERSION,
            n_classes: labels.n_classes,
            p_max: labels.p_max,
            grid: [GRID_TRANSVERSE, GRID_PLANES],
            n_events,
        }
    }

    pub fn labels(&self) -> LabelSpace {
        LabelSpace {
            n_classes: self.n_classes,
            p_max: self.p_max,
        }
    }
}

/// Where in an event a violation sits.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HitLocation {
    pub view: usize,
    pub hit: usize,
}

impl fmt::Display for HitLocation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "view {} hit {}", self.view, self.hit)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Violation {
    WrongViewId { view: usize, found: u8 },
    NonFiniteCoord(HitLocation),
    OutOfGrid(HitLocation),
    BadValue(HitLocation),
    SemLabelOutOfRange(HitLocation),
    InsLabelOutOfRange(HitLocation),
    NonContiguousInstances { missing: Vec<usize> },
    InstanceCountMismatch { stored: usize, actual: usize },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::WrongViewId { view, found } => {
                write!(f, "view slot {view} carries view id {found}")
            }
            Violation::NonFiniteCoord(at) => write!(f, "non-finite coordinate at {at}"),
            Violation::OutOfGrid(at) => write!(f, "coordinate outside the grid at {at}"),
            Violation::BadValue(at) => write!(f, "negative or non-finite value at {at}"),
            Violation::SemLabelOutOfRange(at) => write!(f, "semantic label out of range at {at}"),
            Violation::InsLabelOutOfRange(at) => write!(f, "instance label out of range at {at}"),
            Violation::NonContiguousInstances { missing } => {
                write!(f, "instance ids not contiguous, missing {missing:?}")
            }
            Violation::InstanceCountMismatch { stored, actual } => {
                write!(f, "n_instances is {stored} but labels imply {actual}")
            }
        }
    }
}

/// Checks every hit, view and event invariant; an empty result means valid.
pub fn validate_event(event: &Event, labels: LabelSpace) -> Vec<Violation> {
    let mut out = Vec::new();
    let mut seen = vec![false; labels.p_max as usize];
    let mut max_label: Option<usize> = None;
    for (slot, view) in event.views.iter().enumerate() {
        if view.view_id as usize != slot {
            out.push(Violation::WrongViewId {
                view: slot,
                found: view.view_id,
            });
        }
        for (i, hit) in view.hits.iter().enumerate() {
            let at = HitLocation { view: slot, hit: i };
            let [t, z] = hit.coord;
            if !t.is_finite() || !z.is_finite() {
                out.push(Violation::NonFiniteCoord(at));
            } else if !(0.0..GRID_TRANSVERSE as f64).contains(&t)
                || !(0.0..GRID_PLANES as f64).contains(&z)
            {
                out.push(Violation::OutOfGrid(at));
            }
            if !hit.value.is_finite() || hit.value < 0.0 {
                out.push(Violation::BadValue(at));
            }
            if hit.sem_label >= labels.n_classes {
                out.push(Violation::SemLabelOutOfRange(at));
            }
            let p = hit.ins_label as usize;
            if hit.ins_label >= labels.p_max {
                out.push(Violation::InsLabelOutOfRange(at));
            } else {
                seen[p] = true;
            }
            max_label = Some(max_label.map_or(p, |m| m.max(p)));
        }
    }
    let actual = max_label.map_or(0, |m| m + 1);
    if actual != event.n_instances {
        out.push(Violation::InstanceCountMismatch {
            stored: event.n_instances,
            actual,
        });
    }
    let missing: Vec<usize> = (0..actual.min(seen.len())).filter(|&p| !seen[p]).collect();
    if !missing.is_empty() {
        out.push(Violation::NonContiguousInstances { missing });
    }
    out
}

/// Dense `[view][transverse][plane]` image of an event, values summed per cell.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseEvent {
    pub data: Vec<f64>,
}

impl DenseEvent {
    pub const SHAPE: [usize; 3] = [N_VIEWS, GRID_TRANSVERSE, GRID_PLANES];

    pub fn get(&self, view: usize, transverse: usize, plane: usize) -> f64 {
        self.data[(view * GRID_TRANSVERSE + transverse) * GRID_PLANES + plane]
    }

    pub fn byte_size(&self) -> usize {
        self.data.len() * std::mem::size_of::<f64>()
    }
}

/// Scatters hits into a dense array; hits are assumed to sit on integer cells.
pub fn densify(event: &Event) -> DenseEvent {
    let mut data = vec![0.0; N_VIEWS * GRID_TRANSVERSE * GRID_PLANES];
    for (j, view) in event.views.iter().enumerate() {
        for hit in &view.hits {
            let t = hit.coord[0].floor() as usize;
            let z = hit.coord[1].floor() as usize;
            data[(j * GRID_TRANSVERSE + t) * GRID_PLANES + z] += hit.value;
        }
    }
    DenseEvent { data }
}

#[derive(Serialize, Deserialize)]
struct WireHit {
    c: [f64; 2],
    v: f64,
    s: u8,
    p: u8,
}

#[derive(Serialize, Deserialize)]
struct WireEvent {
    id: u64,
    views: [Vec<WireHit>; N_VIEWS],
}

impl From<&Event> for WireEvent {
    fn from(e: &Event) -> Self {
        let conv = |v: &View| {
            v.hits
                .iter()
                .map(|h| WireHit {
                    c: h.coord,
                    v: h.value,
                    s: h.sem_label,
                    p: h.ins_label,
                })
                .collect()
        };
        WireEvent {
            id: e.event_id,
            views: [conv(&e.views[0]), conv(&e.views[1])],
        }
    }
}

impl From<WireEvent> for Event {
    fn from(w: WireEvent) -> Self {
        let [v0, v1] = w.views;
        let conv = |hits: Vec<WireHit>| {
            hits.into_iter()
                .map(|h| Hit {
                    coord: h.c,
                    value: h.v,
                    sem_label: h.s,
                    ins_label: h.p,
                })
                .collect()
        };
        Event::new(w.id, conv(v0), conv(v1))
    }
}

/// Serializes one event as a single-line JSON record.
pub fn event_to_line(event: &Event) -> String {
    serde_json::to_string(&WireEvent::from(event)).expect("event serialization is infallible")
}

pub fn write_events_to<W: Write>(
    events: &[Event],
    labels: LabelSpace,
    mut out: W,
) -> io::Result<DatasetHeader> {
    let header = DatasetHeader::new(labels, events.len() as u64);
    serde_json::to_writer(&mut out, &header)?;
    out.write_all(b"\n")?;
    for e in events {
        out.write_all(event_to_line(e).as_bytes())?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(header)
}

pub fn write_events(
    events: &[Event],
    labels: LabelSpace,
    path: impl AsRef<Path>,
) -> Result<DatasetHeader, EventIoError> {
    let file = File::create(path)?;
    Ok(write_events_to(events, labels, BufWriter::new(file))?)
}

/// Reads a whole dataset, validating every event against the header's labels.
pub fn read_events_from<R: BufRead>(input: R) -> Result<(DatasetHeader, Vec<Event>), EventIoError> {
    let mut lines = input.lines();
    let first = lines.next().ok_or_else(|| EventIoError::MalformedRecord {
        line: 1,
        reason: "missing header".into(),
    })??;
    let header: DatasetHeader =
        serde_json::from_str(&first).map_err(|e| EventIoError::MalformedRecord {
            line: 1,
            reason: e.to_string(),
        })?;
    if header.format_version != FORMAT_VERSION {
        return Err(EventIoError::VersionMismatch {
            found: header.format_version,
        });
    }
    if header.n_classes < 2 || header.p_max < 1 {
        return Err(EventIoError::MalformedRecord {
            line: 1,
            reason: "header needs n_classes >= 2 and p_max >= 1".into(),
        });
    }
    if header.grid != [GRID_TRANSVERSE, GRID_PLANES] {
        return Err(EventIoError::MalformedRecord {
            line: 1,
            reason: format!("unsupported grid {:?}", header.grid),
        });
    }
    let labels = header.labels();
    let mut events = Vec::new();
    for (i, line) in lines.enumerate() {
        let line_no = i + 2;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let wire: WireEvent =
            serde_json::from_str(&line).map_err(|e| EventIoError::MalformedRecord {
                line: line_no,
                reason: e.to_string(),
            })?;
        let event = Event::from(wire);
        let violations = validate_event(&event, labels);
        if let Some(v) = violations.first() {
            return Err(EventIoError::MalformedRecord {
                line: line_no,
                reason: v.to_string(),
            });
        }
        events.push(event);
    }
    if events.len() as u64 != header.n_events {
        return Err(EventIoError::MalformedRecord {
            line: 1,
            reason: format!(
                "header announces {} events, file holds {}",
                header.n_events,
                events.len()
            ),
        });
    }
    Ok((header, events))
}

pub fn read_events(path: impl AsRef<Path>) -> Result<(DatasetHeader, Vec<Event>), EventIoError> {
    let file = File::open(path)?;
    read_events_from(BufReader::new(file))
}
