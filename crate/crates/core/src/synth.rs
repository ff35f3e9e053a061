//! Labeled synthetic two-view events.
//!
//! Every prong is one 3D trajectory projected onto both views, so its hits
//! share the same plane progression in XZ and YZ. Prongs start near a common
//! transverse position, each at its own depth, preferably on planes no other
//! prong uses. Per class:
//!
//! | class    | shape                                         |
//! |----------|-----------------------------------------------|
//! | electron | shower cone starting at the prong vertex      |
//! | photon   | shower cone starting a few planes downstream  |
//! | muon     | long straight track                           |
//! | pion     | medium track with one kink                    |
//! | proton   | short track with heavy deposits               |
//! | other    | small blob                                    |
//!
//! An *ambiguous* prong drops the single-view cues (gap, kink, length) of
//! the electron/photon and muon/pion pairs. Each view is then drawn narrow or
//! wide at random; electrons and muons get the same width in both views,
//! photons and pions get opposite widths. A single view therefore carries
//! no information about which member of the pair produced the prong.

use std::collections::BTreeSet;
use std::path::Path;

use rand::distr::{weighted::WeightedIndex, Distribution};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, LogNormal, Normal, Poisson};
use rayon::prelude::*;
use thiserror::Error;

use crate::event::{
    write_events, DatasetHeader, Event, EventIoError, Hit, LabelSpace, CLASS_ELECTRON, CLASS_MUON,
    CLASS_OTHER, CLASS_PHOTON, CLASS_PION, CLASS_PROTON, GRID_PLANES, GRID_TRANSVERSE,
};

const MAX_ATTEMPTS: usize = 100;
const PRONG_ATTEMPTS: usize = 20;
/// Expected hits per prong of the built-in class templates under the
/// default mixture; `hits_per_prong_mean` rescales prong lengths from it.
const TEMPLATE_HITS_PER_PRONG: f64 = 23.3;

#[derive(Debug, Error)]
pub enum GenError {
    #[error("invalid generator config: {0}")]
    InvalidConfig(String),
    #[error("event {event_id}: no prong landed inside the grid after {MAX_ATTEMPTS} attempts")]
    DegenerateEvent { event_id: u64 },
    #[error(transparent)]
    Io(#[from] EventIoError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenConfig {
    pub seed: u64,
    /// Inclusive prong-count range.
    pub n_prongs_range: [usize; 2],
    pub hits_per_prong_mean: f64,
    /// Mean number of isolated noise hits per event.
    pub noise_hit_rate: f64,
    /// Prong class probabilities, one per semantic class.
    pub class_mixture: Vec<f64>,
    pub cross_view_ambiguity: f64,
    pub labels: LabelSpace,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            n_prongs_range: [1, 6],
            hits_per_prong_mean: 23.0,
            noise_hit_rate: 3.0,
            class_mixture: vec![0.3, 0.3, 0.1, 0.1, 0.1, 0.1],
            cross_view_ambiguity: 0.5,
            labels: LabelSpace::default(),
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<(), GenError> {
        let bad = |m: String| Err(GenError::InvalidConfig(m));
        let [lo, hi] = self.n_prongs_range;
        if lo == 0 || lo > hi {
            return bad(format!(
                "prong range [{lo}, {hi}] must be nonempty and start at 1 or more"
            ));
        }
        if self.class_mixture.len() != self.labels.n_classes as usize {
            return bad(format!(
                "class mixture has {} entries for {} classes",
                self.class_mixture.len(),
                self.labels.n_classes
            ));
        }
        if self
            .class_mixture
            .iter()
            .any(|p| !(p.is_finite() && *p >= 0.0))
        {
            return bad("class mixture entries must be finite and non-negative".into());
        }
        let total: f64 = self.class_mixture.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return bad(format!("class mixture sums to {total}"));
        }
        if !(0.0..=1.0).contains(&self.cross_view_ambiguity) {
            return bad("cross_view_ambiguity must lie in [0, 1]".into());
        }
        if !(self.hits_per_prong_mean > 0.0 && self.hits_per_prong_mean.is_finite()) {
            return bad("hits_per_prong_mean must be positive".into());
        }
        if !(self.noise_hit_rate >= 0.0 && self.noise_hit_rate.is_finite()) {
            return bad("noise_hit_rate must be non-negative".into());
        }
        // prongs plus one shared noise instance must fit the slots
        let needed = hi + usize::from(self.noise_hit_rate > 0.0);
        if needed > self.labels.p_max as usize {
            return bad(format!(
                "{needed} instances can exceed p_max {}",
                self.labels.p_max
            ));
        }
        if self.labels.n_classes as usize <= CLASS_OTHER as usize {
            return bad("generator needs all six particle classes".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WidthMode {
    Narrow,
    Wide,
}

impl WidthMode {
    fn flip(self) -> Self {
        match self {
            WidthMode::Narrow => WidthMode::Wide,
            WidthMode::Wide => WidthMode::Narrow,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ProngShape {
    Track,
    Shower,
    Blob,
}

/// Geometry of one generated particle.
#[derive(Debug, Clone, PartialEq)]
pub struct ProngSpec {
    pub class: u8,
    pub ambiguous: bool,
    pub vertex: [f64; 3],
    /// Unit vector of the initial direction.
    pub direction: [f64; 3],
    /// 3D path length in cell units.
    pub length: f64,
    /// Transverse scatter scale, per class.
    pub width_profile: f64,
    pub shape: ProngShape,
    pub view_widths: [WidthMode; 2],
    /// Planes skipped before the first deposit.
    pub gap_planes: usize,
    /// Plane step at which the slopes change, and the new slopes.
    pub kink: Option<(usize, [f64; 2])>,
    /// Planes spanned along the beam axis.
    pub n_planes: usize,
    /// Transverse slopes `(dx/dz, dy/dz)` and beam-axis sign.
    pub slopes: [f64; 2],
    pub z_sign: f64,
    /// Log-normal deposit parameters `(ln median, sigma)`.
    pub value_params: (f64, f64),
}

fn event_rng(seed: u64, event_id: u64) -> ChaCha8Rng {
    // splitmix64 finalizer over the pair keeps per-event streams independent
    let mut z = seed ^ event_id.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    ChaCha8Rng::seed_from_u64(z ^ (z >> 31))
}

fn scaled_planes(rng: &mut ChaCha8Rng, lo: usize, hi: usize, scale: f64) -> usize {
    let base = rng.random_range(lo..=hi) as f64;
    ((base * scale).round() as usize).max(1)
}

fn sample_prong(
    rng: &mut ChaCha8Rng,
    class: u8,
    ambiguous: bool,
    vertex: [f64; 3],
    scale: f64,
) -> ProngSpec {
    let normal = Normal::new(0.0f64, 0.45).expect("valid normal");
    let mut slopes = [
        normal.sample(rng).clamp(-1.0, 1.0),
        normal.sample(rng).clamp(-1.0, 1.0),
    ];
    let z_sign = if rng.random_bool(0.85) { 1.0 } else { -1.0 };
    let random_mode = |rng: &mut ChaCha8Rng| {
        if rng.random_bool(0.5) {
            WidthMode::Wide
        } else {
            WidthMode::Narrow
        }
    };
    let mut view_widths = [WidthMode::Narrow; 2];
    let mut gap_planes = 0;
    let mut kink = None;
    let (shape, n_planes, width_profile, value_params) = match class {
        CLASS_ELECTRON | CLASS_PHOTON => {
            let n = scaled_planes(rng, 4, 7, scale);
            if ambiguous {
                let first = random_mode(rng);
                let second = if class == CLASS_ELECTRON {
                    first
                } else {
                    first.flip()
                };
                view_widths = [first, second];
            } else {
                view_widths = [WidthMode::Wide; 2];
                if class == CLASS_PHOTON {
                    gap_planes = rng.random_range(3..=7);
                }
            }
            (ProngShape::Shower, n, 0.25, (0.7f64.ln(), 0.5))
        }
        CLASS_MUON | CLASS_PION => {
            let n = if ambiguous {
                let first = random_mode(rng);
                let second = if class == CLASS_MUON {
                    first
                } else {
                    first.flip()
                };
                view_widths = [first, second];
                scaled_planes(rng, 6, 11, scale)
            } else if class == CLASS_MUON {
                scaled_planes(rng, 9, 15, scale)
            } else {
                let n = scaled_planes(rng, 6, 10, scale);
                let at = (n as f64 * rng.random_range(0.35..0.65)).round() as usize;
                let turn = |rng: &mut ChaCha8Rng, s: f64| {
                    let delta =
                        rng.random_range(0.5..1.0) * if rng.random_bool(0.5) { 1.0 } else { -1.0 };
                    (s + delta).clamp(-1.5, 1.5)
                };
                kink = Some((at.max(1), [turn(rng, slopes[0]), turn(rng, slopes[1])]));
                n
            };
            (ProngShape::Track, n, 0.0, (0.0, 0.25))
        }
        CLASS_PROTON => (
            ProngShape::Track,
            scaled_planes(rng, 2, 5, scale),
            0.0,
            (3.0f64.ln(), 0.3),
        ),
        _ => {
            slopes = [0.0, 0.0];
            (
                ProngShape::Blob,
                scaled_planes(rng, 1, 3, scale),
                1.0,
                (0.5f64.ln(), 0.4),
            )
        }
    };
    let dir = [slopes[0] * z_sign, slopes[1] * z_sign, z_sign];
    let norm = (dir[0] * dir[0] + dir[1] * dir[1] + 1.0).sqrt();
    ProngSpec {
        class,
        ambiguous,
        vertex,
        direction: [dir[0] / norm, dir[1] / norm, dir[2] / norm],
        length: n_planes as f64 * norm,
        width_profile,
        shape,
        view_widths,
        gap_planes,
        kink,
        n_planes,
        slopes,
        z_sign,
        value_params,
    }
}

fn in_transverse(t: f64) -> bool {
    (0.0..GRID_TRANSVERSE as f64).contains(&t.round())
}

/// Transverse cells hit on one plane for a given centre.
fn cells_on_plane(
    rng: &mut ChaCha8Rng,
    spec: &ProngSpec,
    view: usize,
    step: usize,
    centre: f64,
) -> Vec<i64> {
    let c = centre.round() as i64;
    match spec.shape {
        ProngShape::Track => match spec.view_widths[view] {
            WidthMode::Narrow => vec![c],
            WidthMode::Wide => {
                let mut cells = vec![c, c + 1];
                if rng.random_bool(0.4) {
                    cells.push(c - 1);
                }
                cells
            }
        },
        ProngShape::Shower => {
            let (hw0, growth) = if spec.ambiguous {
                match spec.view_widths[view] {
                    WidthMode::Narrow => (0.3, 0.05),
                    WidthMode::Wide => (1.0, 0.3),
                }
            } else {
                (0.5, spec.width_profile)
            };
            let hw = hw0 + growth * step as f64;
            let lo = (centre - hw).round() as i64;
            let hi = (centre + hw).round() as i64;
            let mut cells = vec![c];
            for t in lo..=hi {
                if t != c && rng.random_bool(0.7) {
                    cells.push(t);
                }
            }
            cells
        }
        ProngShape::Blob => {
            let mut cells = vec![c];
            if rng.random_bool(0.5) {
                cells.push(c + if rng.random_bool(0.5) { 1 } else { -1 });
            }
            cells
        }
    }
}

/// Projects one prong into both views. Tracing stops at the first plane
/// where the trajectory leaves the grid in either view, so both views cover
/// the same planes.
fn trace(rng: &mut ChaCha8Rng, spec: &ProngSpec) -> [Vec<(f64, f64, f64)>; 2] {
    let values = LogNormal::new(spec.value_params.0, spec.value_params.1).expect("valid lognormal");
    let mut cells: [BTreeSet<(i64, i64)>; 2] = [BTreeSet::new(), BTreeSet::new()];
    let mut pos = [spec.vertex[0], spec.vertex[1]];
    let mut slopes = spec.slopes;
    let mut z = spec.vertex[2];
    for step in 0..spec.gap_planes + spec.n_planes {
        if let Some((at, new)) = spec.kink {
            if step == at {
                slopes = new;
            }
        }
        let plane = z.round();
        if !(0.0..GRID_PLANES as f64).contains(&plane)
            || !in_transverse(pos[0])
            || !in_transverse(pos[1])
        {
            break;
        }
        if step >= spec.gap_planes {
            let deposit_step = step - spec.gap_planes;
            for (view, set) in cells.iter_mut().enumerate() {
                for t in cells_on_plane(rng, spec, view, deposit_step, pos[view]) {
                    if (0..GRID_TRANSVERSE as i64).contains(&t) {
                        set.insert((plane as i64, t));
                    }
                }
            }
        }
        pos[0] += slopes[0];
        pos[1] += slopes[1];
        z += spec.z_sign;
    }
    cells.map(|set| {
        set.into_iter()
            .map(|(z, t)| (t as f64, z as f64, values.sample(rng)))
            .collect()
    })
}

/// Generates one event deterministically from `(config.seed, event_id)`.
pub fn generate_event(event_id: u64, config: &GenConfig) -> Result<Event, GenError> {
    config.validate()?;
    let mut rng = event_rng(config.seed, event_id);
    let classes = WeightedIndex::new(&config.class_mixture)
        .map_err(|e| GenError::InvalidConfig(e.to_string()))?;
    let scale = config.hits_per_prong_mean / TEMPLATE_HITS_PER_PRONG;
    let [lo, hi] = config.n_prongs_range;
    let extra = Binomial::new((hi - lo) as u64, 0.4).expect("valid binomial");

    for _ in 0..MAX_ATTEMPTS {
        let n_prongs = lo + extra.sample(&mut rng) as usize;
        let centre = [rng.random_range(20.0..60.0), rng.random_range(20.0..60.0)];
        let mut views: [Vec<Hit>; 2] = [Vec::new(), Vec::new()];
        // a cell reads out once; the first prong to reach it owns the hit
        let mut taken: [BTreeSet<(i64, i64)>; 2] = [BTreeSet::new(), BTreeSet::new()];
        let mut next_id = 0u8;
        let mut used_planes: BTreeSet<i64> = BTreeSet::new();
        for _ in 0..n_prongs {
            let class = classes.sample(&mut rng) as u8;
            let ambiguous = rng.random_bool(config.cross_view_ambiguity);
            // redraw the geometry, not the class, when earlier prongs cover this one
            let placed = (0..PRONG_ATTEMPTS).find_map(|attempt| {
                let vertex = [
                    centre[0] + rng.random_range(-6.0..6.0),
                    centre[1] + rng.random_range(-6.0..6.0),
                    rng.random_range(5.0..80.0),
                ];
                let spec = sample_prong(&mut rng, class, ambiguous, vertex, scale);
                let mut projected = trace(&mut rng, &spec);
                for (view, hits) in projected.iter_mut().enumerate() {
                    hits.retain(|&(t, z, _)| !taken[view].contains(&(t as i64, z as i64)));
                }
                let planes = |hits: &[(f64, f64, f64)]| -> BTreeSet<i64> {
                    hits.iter().map(|h| h.1 as i64).collect()
                };
                let shared: BTreeSet<i64> = planes(&projected[0])
                    .intersection(&planes(&projected[1]))
                    .copied()
                    .collect();
                // prefer planes no earlier prong uses; settle for overlap late on
                if attempt < PRONG_ATTEMPTS / 2 && !shared.is_disjoint(&used_planes) {
                    return None;
                }
                for hits in projected.iter_mut() {
                    hits.retain(|h| shared.contains(&(h.1 as i64)));
                }
                (!shared.is_empty()).then_some(projected)
            });
            let Some(projected) = placed else {
                continue;
            };
            for (view, hits) in projected.into_iter().enumerate() {
                for (t, z, v) in hits {
                    used_planes.insert(z as i64);
                    taken[view].insert((t as i64, z as i64));
                    views[view].push(Hit::new(t, z, v, class, next_id));
                }
            }
            next_id += 1;
        }
        if next_id == 0 {
            continue;
        }
        if config.noise_hit_rate > 0.0 {
            let n_noise = Poisson::new(config.noise_hit_rate)
                .expect("positive rate")
                .sample(&mut rng) as usize;
            let values = LogNormal::new(0.3f64.ln(), 0.5).expect("valid lognormal");
            for _ in 0..n_noise {
                let view = rng.random_range(0..2);
                let t = rng.random_range(0..GRID_TRANSVERSE) as f64;
                let z = rng.random_range(0..GRID_PLANES) as f64;
                let value = values.sample(&mut rng);
                if taken[view].insert((t as i64, z as i64)) {
                    views[view].push(Hit::new(t, z, value, CLASS_OTHER, next_id));
                }
            }
        }
        let [v0, v1] = views;
        return Ok(Event::new(event_id, v0, v1));
    }
    Err(GenError::DegenerateEvent { event_id })
}

/// Generates events `0..n_events`; output does not depend on thread count.
pub fn generate_events(n_events: u64, config: &GenConfig) -> Result<Vec<Event>, GenError> {
    config.validate()?;
    (0..n_events)
        .into_par_iter()
        .map(|id| generate_event(id, config))
        .collect()
}

pub fn generate_dataset(
    n_events: u64,
    config: &GenConfig,
    out_path: impl AsRef<Path>,
) -> Result<DatasetHeader, GenError> {
    let events = generate_events(n_events, config)?;
    Ok(write_events(&events, config.labels, out_path)?)
}

/// Per-view shape summary of one prong: mean transverse extent per occupied
/// plane and the number of occupied planes.
pub fn prong_view_features(hits: &[&Hit]) -> [f64; 2] {
    use std::collections::BTreeMap;
    let mut per_plane: BTreeMap<i64, (f64, f64)> = BTreeMap::new();
    for h in hits {
        let e = per_plane
            .entry(h.plane() as i64)
            .or_insert((f64::INFINITY, f64::NEG_INFINITY));
        e.0 = e.0.min(h.transverse());
        e.1 = e.1.max(h.transverse());
    }
    if per_plane.is_empty() {
        return [0.0, 0.0];
    }
    let width = per_plane
        .values()
        .map(|(lo, hi)| hi - lo + 1.0)
        .sum::<f64>()
        / per_plane.len() as f64;
    [width, per_plane.len() as f64]
}
