//! Inference timing, allocation accounting, representation sizes and SVG
//! event displays.

use std::alloc::{GlobalAlloc, Layout, System};
use std::fmt::Write as _;
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::time::Instant;

use serde::Serialize;

use crate::event::{Event, CLASS_NAMES, GRID_PLANES, GRID_TRANSVERSE};
use crate::metrics::Predictor;
use crate::model::{ModelError, Prediction};

/// Bytes per hit in the sparse form: two f64 coordinates and one f64 value.
pub const SPARSE_BYTES_PER_HIT: usize = 2 * 8 + 8;
/// Both views as dense f64 images.
pub const DENSE_BYTES: usize = 2 * GRID_TRANSVERSE * GRID_PLANES * 8;

pub fn sparse_bytes(n_hits: usize) -> usize {
    n_hits * SPARSE_BYTES_PER_HIT
}

/// Smallest hit count at which the sparse form is no smaller than the dense one.
pub fn crossover_hits() -> usize {
    DENSE_BYTES.div_ceil(SPARSE_BYTES_PER_HIT)
}

static CURRENT: AtomicUsize = AtomicUsize::new(0);
static PEAK: AtomicUsize = AtomicUsize::new(0);
static ACTIVE: AtomicBool = AtomicBool::new(false);

/// System allocator that tracks live bytes and their high-water mark.
/// Register it with `#[global_allocator]` to enable memory figures.
pub struct CountingAllocator;

unsafe impl GlobalAlloc for CountingAllocator {
    unsafe fn alloc(&self, layout: Layout) -> *mut u8 {
        let p = unsafe { System.alloc(layout) };
        if !p.is_null() {
            ACTIVE.store(true, Ordering::Relaxed);
            let now = CURRENT.fetch_add(layout.size(), Ordering::Relaxed) + layout.size();
            PEAK.fetch_max(now, Ordering::Relaxed);
        }
        p
    }

    unsafe fn dealloc(&self, ptr: *mut u8, layout: Layout) {
        unsafe { System.dealloc(ptr, layout) };
        CURRENT.fetch_sub(layout.size(), Ordering::Relaxed);
    }

    unsafe fn realloc(&self, ptr: *mut u8, layout: Layout, new_size: usize) -> *mut u8 {
        let p = unsafe { System.realloc(ptr, layout, new_size) };
        if !p.is_null() {
            if new_size >= layout.size() {
                let now = CURRENT.fetch_add(new_size - layout.size(), Ordering::Relaxed)
                    + (new_size - layout.size());
                PEAK.fetch_max(now, Ordering::Relaxed);
            } else {
                CURRENT.fetch_sub(layout.size() - new_size, Ordering::Relaxed);
            }
        }
        p
    }
}

/// Whether a [`CountingAllocator`] is installed in this process.
pub fn allocator_active() -> bool {
    ACTIVE.load(Ordering::Relaxed)
}

pub fn live_bytes() -> usize {
    CURRENT.load(Ordering::Relaxed)
}

/// Restarts peak tracking from the current live size and returns it.
pub fn reset_peak() -> usize {
    let now = CURRENT.load(Ordering::Relaxed);
    PEAK.store(now, Ordering::Relaxed);
    now
}

pub fn peak_bytes() -> usize {
    PEAK.load(Ordering::Relaxed)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchReport {
    pub n_samples: usize,
    pub mean_seconds: f64,
    pub sd_seconds: f64,
    /// Largest rise in live heap bytes during one inference, in MiB;
    /// `None` without the counting allocator.
    pub peak_incremental_mib: Option<f64>,
    pub mean_hits: f64,
    pub sparse_bytes_mean: f64,
    pub dense_bytes: usize,
    pub sparse_dense_ratio: f64,
    pub crossover_hits: usize,
    /// Samples whose sparse form is at least as large as the dense one.
    pub n_over_crossover: usize,
}

/// Runs single-event inference on `n_samples` events (cycling through
/// `events`) after one warm-up pass.
pub fn bench_inference(
    model: &dyn Predictor,
    events: &[Event],
    n_samples: usize,
) -> Result<BenchReport, ModelError> {
    if events.is_empty() || n_samples == 0 {
        return Err(ModelError::InvalidHyper(
            "bench needs at least one event and one sample".into(),
        ));
    }
    std::hint::black_box(model.predict(&events[0])?);
    let mut times = Vec::with_capacity(n_samples);
    let mut peak = 0usize;
    let mut hits = 0usize;
    let mut over = 0usize;
    for i in 0..n_samples {
        let e = &events[i % events.len()];
        hits += e.n_hits();
        if sparse_bytes(e.n_hits()) >= DENSE_BYTES {
            over += 1;
        }
        let base = reset_peak();
        let t = Instant::now();
        let p = model.predict(e)?;
        let dt = t.elapsed().as_secs_f64();
        peak = peak.max(peak_bytes().saturating_sub(base));
        drop(std::hint::black_box(p));
        times.push(dt);
    }
    let n = n_samples as f64;
    let mean = times.iter().sum::<f64>() / n;
    let var = times.iter().map(|t| (t - mean) * (t - mean)).sum::<f64>() / (n - 1.0).max(1.0);
    let mean_hits = hits as f64 / n;
    let sparse = sparse_bytes(1) as f64 * mean_hits;
    Ok(BenchReport {
        n_samples,
        mean_seconds: mean,
        sd_seconds: var.sqrt(),
        peak_incremental_mib: allocator_active().then(|| peak as f64 / (1024.0 * 1024.0)),
        mean_hits,
        sparse_bytes_mean: sparse,
        dense_bytes: DENSE_BYTES,
        sparse_dense_ratio: sparse / DENSE_BYTES as f64,
        crossover_hits: crossover_hits(),
        n_over_crossover: over,
    })
}

pub const DEFAULT_COLORS: [&str; 6] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#7f7f7f",
];

#[derive(Debug, Clone, PartialEq)]
pub struct DisplaySpec {
    pub show_truth: bool,
    pub show_prediction: bool,
    /// One fill color per class.
    pub colors: Vec<String>,
    /// Pixels per grid cell.
    pub cell_px: usize,
}

impl Default for DisplaySpec {
    fn default() -> Self {
        Self {
            show_truth: true,
            show_prediction: true,
            colors: DEFAULT_COLORS.iter().map(|c| c.to_string()).collect(),
            cell_px: 4,
        }
    }
}

const MARGIN: usize = 30;
const LEGEND_W: usize = 110;

/// Renders the XZ and YZ views side by side, planes along x and transverse
/// cells along y. A second row shows predicted classes when a prediction is
/// given and requested.
pub fn render_event_display(
    event: &Event,
    prediction: Option<&Prediction>,
    spec: &DisplaySpec,
) -> String {
    let px = spec.cell_px;
    let pw = GRID_PLANES * px;
    let ph = GRID_TRANSVERSE * px;
    let mut rows: Vec<(&str, Vec<usize>)> = Vec::new();
    if spec.show_truth || prediction.is_none() || !spec.show_prediction {
        rows.push(("true", event.sem_labels()));
    }
    if let (Some(p), true) = (prediction, spec.show_prediction) {
        rows.push(("predicted", p.classes.clone()));
    }
    let width = MARGIN + 2 * (pw + MARGIN) + LEGEND_W;
    let height = MARGIN + rows.len() * (ph + MARGIN);
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}">"#
    );
    let _ = writeln!(
        s,
        r#"<rect width="{width}" height="{height}" fill="white"/>"#
    );
    for (r, (label, classes)) in rows.iter().enumerate() {
        let top = MARGIN + r * (ph + MARGIN);
        let mut offset = 0;
        for (v, name) in ["XZ", "YZ"].iter().enumerate() {
            let left = MARGIN + v * (pw + MARGIN);
            let _ = writeln!(
                s,
                r##"<rect x="{left}" y="{top}" width="{pw}" height="{ph}" fill="none" stroke="#000000"/>"##
            );
            let _ = writeln!(
                s,
                r#"<text x="{left}" y="{}" font-family="sans-serif" font-size="12">{name} {label}</text>"#,
                top - 6
            );
            for (i, h) in event.views[v].hits.iter().enumerate() {
                let c = classes[offset + i];
                let color = spec.colors.get(c).map_or("#000000", String::as_str);
                let x = left + (h.plane() * px as f64) as usize;
                let y = top + (h.transverse() * px as f64) as usize;
                let _ = writeln!(
                    s,
                    r#"<rect x="{x}" y="{y}" width="{px}" height="{px}" fill="{color}"/>"#
                );
            }
            offset += event.views[v].len();
        }
    }
    let lx = MARGIN + 2 * (pw + MARGIN);
    for (c, color) in spec.colors.iter().enumerate() {
        let y = MARGIN + c * 18;
        let name = CLASS_NAMES.get(c).copied().unwrap_or("class");
        let _ = writeln!(
            s,
            r#"<rect x="{lx}" y="{y}" width="12" height="12" fill="{color}"/>"#
        );
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" font-family="sans-serif" font-size="12">{name}</text>"#,
            lx + 18,
            y + 11
        );
    }
    s.push_str("</svg>\n");
    s
}
