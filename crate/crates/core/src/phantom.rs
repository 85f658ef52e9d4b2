//! Synthetic layered "retina-like" B-scans.
//!
//! A healthy B-scan is a stack of `K - 1` bands delimited by `K` smooth,
//! strictly ordered boundary curves. The bands are filled with palette
//! intensities and multiplied by gamma-distributed speckle. The boundaries
//! double as the weak layer labels.
//!
//! Diseased B-scans are produced from their healthy twin: anomalies deform the
//! boundary geometry and paint overlays, the scan is re-rendered with the same
//! speckle field, and the ground-truth mask is the set of altered pixels.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use log::warn;
use rand::Rng as _;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{BScan, BinaryMask, Grid, LabelMap};
use crate::io;
use crate::rng::{derive_seed, rng_for, Rng};

/// Minimum band thickness in pixels.
pub const MIN_GAP: f64 = 2.0;
/// Curves must stay within `[TOP_LIMIT, height - 3]`.
const TOP_LIMIT: f64 = 2.0;
/// Intensity change that counts as "altered" for the ground-truth mask.
const ALTERED_INTENSITY: f32 = 0.05;
/// Boundary displacement (pixels) that counts as "altered".
const ALTERED_DISPLACEMENT: i64 = 1;
const MAX_PLACEMENT_ATTEMPTS: usize = 20;
/// Share of each boundary's excursion that follows the scan-wide shape.
const COHERENCE: f64 = 0.85;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnomalyKind {
    FluidBlob,
    DrusenBump,
    BrightFocus,
}

/// One anomaly family with its size and per-B-scan count ranges (inclusive).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum AnomalySpec {
    /// Dark ellipse inside the layered region; layers above it bulge upward.
    FluidBlob {
        semi_axis_x: [f64; 2],
        semi_axis_y: [f64; 2],
        count: [usize; 2],
    },
    /// Upward elevation of the bottom band.
    DrusenBump {
        half_width: [f64; 2],
        height: [f64; 2],
        count: [usize; 2],
    },
    /// Small bright disk.
    BrightFocus { radius: [f64; 2], count: [usize; 2] },
}

impl AnomalySpec {
    pub fn kind(&self) -> AnomalyKind {
        match self {
            AnomalySpec::FluidBlob { .. } => AnomalyKind::FluidBlob,
            AnomalySpec::DrusenBump { .. } => AnomalyKind::DrusenBump,
            AnomalySpec::BrightFocus { .. } => AnomalyKind::BrightFocus,
        }
    }

    fn count(&self) -> [usize; 2] {
        match self {
            AnomalySpec::FluidBlob { count, .. }
            | AnomalySpec::DrusenBump { count, .. }
            | AnomalySpec::BrightFocus { count, .. } => *count,
        }
    }

    fn ranges(&self) -> Vec<(&'static str, [f64; 2])> {
        match self {
            AnomalySpec::FluidBlob {
                semi_axis_x,
                semi_axis_y,
                ..
            } => vec![("semi_axis_x", *semi_axis_x), ("semi_axis_y", *semi_axis_y)],
            AnomalySpec::DrusenBump {
                half_width, height, ..
            } => vec![("half_width", *half_width), ("height", *height)],
            AnomalySpec::BrightFocus { radius, .. } => vec![("radius", *radius)],
        }
    }

    fn validate(&self, height: usize, width: usize) -> Result<()> {
        let [lo, hi] = self.count();
        if lo > hi {
            return Err(Error::config(format!("{:?}: empty count range", self.kind())));
        }
        for (name, [a, b]) in self.ranges() {
            if !(a > 0.0 && a <= b && a.is_finite() && b.is_finite()) {
                return Err(Error::config(format!(
                    "{:?}: {name} range [{a}, {b}] must be nonempty and positive",
                    self.kind()
                )));
            }
            if 2.0 * b + 2.0 > height.min(width) as f64 {
                return Err(Error::config(format!(
                    "{:?}: {name} up to {b} does not fit a {height}x{width} image",
                    self.kind()
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhantomConfig {
    pub height: usize,
    pub width: usize,
    pub bscans_per_volume: usize,
    /// Number of label classes: background plus `num_classes - 1` bands.
    pub num_classes: usize,
    /// Mean row of each of the `num_classes` boundaries, top to bottom.
    pub boundary_rows: Vec<f64>,
    /// Per-boundary maximum vertical excursion (pixels) of the smooth shape.
    pub boundary_smoothness: Vec<f64>,
    /// Maximum random vertical offset applied to the whole stack.
    pub max_vertical_shift: f64,
    /// Mean intensity per class; entry 0 is the background.
    pub layer_intensity_palette: Vec<f32>,
    /// Standard deviation of the unit-mean multiplicative speckle.
    pub speckle_strength: f32,
    pub anomaly_spec: Vec<AnomalySpec>,
    pub seed: u64,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        Self {
            height: 64,
            width: 128,
            bscans_per_volume: 8,
            num_classes: 7,
            boundary_rows: vec![12.0, 19.0, 26.0, 33.0, 40.0, 46.0, 52.0],
            boundary_smoothness: vec![5.0; 7],
            max_vertical_shift: 3.0,
            layer_intensity_palette: vec![0.08, 0.80, 0.45, 0.65, 0.30, 0.55, 0.90],
            speckle_strength: 0.2,
            anomaly_spec: vec![
                AnomalySpec::FluidBlob {
                    semi_axis_x: [6.0, 16.0],
                    semi_axis_y: [3.0, 7.0],
                    count: [0, 2],
                },
                AnomalySpec::DrusenBump {
                    half_width: [6.0, 14.0],
                    height: [2.0, 5.0],
                    count: [0, 1],
                },
                AnomalySpec::BrightFocus {
                    radius: [1.0, 2.5],
                    count: [0, 2],
                },
            ],
            seed: 0,
        }
    }
}

impl PhantomConfig {
    pub fn validate(&self) -> Result<()> {
        let k = self.num_classes;
        if self.height < 16 || self.width < 16 {
            return Err(Error::config(format!(
                "phantom size {}x{} is below the 16x16 minimum",
                self.height, self.width
            )));
        }
        if k < 2 {
            return Err(Error::config("num_classes must be at least 2"));
        }
        if k > u8::MAX as usize {
            return Err(Error::config("num_classes must fit in a byte"));
        }
        if self.bscans_per_volume == 0 {
            return Err(Error::config("bscans_per_volume must be positive"));
        }
        let lowest = self.height as f64 - 3.0;
        if MIN_GAP * (k - 1) as f64 > lowest - TOP_LIMIT {
            return Err(Error::config(format!(
                "minimum gap: {k} boundaries {MIN_GAP} px apart do not fit between rows {TOP_LIMIT} and {lowest}"
            )));
        }
        for (name, len) in [
            ("boundary_rows", self.boundary_rows.len()),
            ("boundary_smoothness", self.boundary_smoothness.len()),
            ("layer_intensity_palette", self.layer_intensity_palette.len()),
        ] {
            if len != k {
                return Err(Error::config(format!("{name} has {len} entries, expected {k}")));
            }
        }
        if let Some(v) = self
            .layer_intensity_palette
            .iter()
            .find(|v| !(0.0..=1.0).contains(*v))
        {
            return Err(Error::config(format!("palette value {v} outside [0, 1]")));
        }
        if self.boundary_smoothness.iter().any(|s| !(*s >= 0.0)) || !(self.max_vertical_shift >= 0.0) {
            return Err(Error::config("boundary excursions must be nonnegative"));
        }
        if !(self.speckle_strength >= 0.0) {
            return Err(Error::config("speckle_strength must be nonnegative"));
        }
        for w in self.boundary_rows.windows(2) {
            if w[1] - w[0] < MIN_GAP {
                return Err(Error::config(format!(
                    "minimum gap: boundary rows {} and {} are closer than {MIN_GAP} px",
                    w[0], w[1]
                )));
            }
        }
        for spec in &self.anomaly_spec {
            spec.validate(self.height, self.width)?;
        }
        Ok(())
    }
}

/// `K` boundary curves, each `width` row positions, top to bottom.
#[derive(Clone, Debug, PartialEq)]
pub struct Boundaries {
    pub curves: Vec<Vec<f64>>,
}

impl Boundaries {
    pub fn num_curves(&self) -> usize {
        self.curves.len()
    }

    pub fn width(&self) -> usize {
        self.curves.first().map_or(0, Vec::len)
    }

    /// Integer row of boundary `k` at column `c`.
    #[inline]
    pub fn row(&self, k: usize, c: usize) -> i64 {
        self.curves[k][c].round() as i64
    }

    /// Row index of the bottom band's lower boundary, per column.
    pub fn bottom(&self) -> Vec<usize> {
        let last = self.curves.len() - 1;
        (0..self.width()).map(|c| self.row(last, c) as usize).collect()
    }

    /// Pushes curves apart to `MIN_GAP` and clamps them into `[lo, hi]`.
    /// Returns false when the stack cannot fit.
    fn repair_upward(&mut self, lo: f64) -> bool {
        let k = self.curves.len();
        for c in 0..self.width() {
            for i in (0..k - 1).rev() {
                let limit = self.curves[i + 1][c] - MIN_GAP;
                if self.curves[i][c] > limit {
                    self.curves[i][c] = limit;
                }
            }
            if self.curves[0][c] < lo {
                return false;
            }
        }
        true
    }
}

fn random_shape(rng: &mut Rng, terms: usize, freq: (f64, f64), width: usize) -> Vec<f64> {
    let amps: Vec<f64> = (0..terms).map(|_| rng.gen_range(0.2..1.0)).collect();
    let total: f64 = amps.iter().sum();
    let params: Vec<(f64, f64, f64)> = amps
        .iter()
        .map(|a| (a / total, rng.gen_range(freq.0..freq.1), rng.gen_range(0.0..2.0 * PI)))
        .collect();
    (0..width)
        .map(|c| {
            let x = c as f64 / width as f64;
            params
                .iter()
                .map(|&(a, f, phi)| a * (2.0 * PI * f * x + phi).sin())
                .sum()
        })
        .collect()
}

/// Draws `K` smooth, ordered boundary curves.
///
/// Each curve is its configured row plus a shared random offset plus at most
/// four low-frequency sinusoids (two shared across boundaries, two private)
/// whose amplitudes sum to the boundary's excursion.
pub fn generate_boundaries(config: &PhantomConfig, rng: &mut Rng) -> Result<Boundaries> {
    config.validate()?;
    let (h, w, k) = (config.height, config.width, config.num_classes);
    let shift = if config.max_vertical_shift > 0.0 {
        rng.gen_range(-config.max_vertical_shift..=config.max_vertical_shift)
    } else {
        0.0
    };
    let shared = random_shape(rng, 2, (0.3, 1.2), w);
    let lo = TOP_LIMIT;
    let hi = h as f64 - 3.0;
    let mut curves = Vec::with_capacity(k);
    for b in 0..k {
        let own = random_shape(rng, 2, (1.0, 2.5), w);
        let amp = config.boundary_smoothness[b];
        let floor = lo + MIN_GAP * b as f64;
        let ceil = hi - MIN_GAP * (k - 1 - b) as f64;
        curves.push(
            (0..w)
                .map(|c| {
                    let y = config.boundary_rows[b]
                        + shift
                        + amp * (COHERENCE * shared[c] + (1.0 - COHERENCE) * own[c]);
                    y.clamp(floor, ceil)
                })
                .collect::<Vec<f64>>(),
        );
    }
    // Forward pass restores the minimum gap; the per-index clamps above keep
    // every curve within bounds after it.
    for b in 1..k {
        for c in 0..w {
            let min = curves[b - 1][c] + MIN_GAP;
            if curves[b][c] < min {
                curves[b][c] = min;
            }
        }
    }
    Ok(Boundaries { curves })
}

/// Noise-free intensities and labels for a boundary stack.
pub fn render_clean(boundaries: &Boundaries, palette: &[f32], height: usize) -> (Grid<f32>, LabelMap) {
    let k = boundaries.num_curves();
    let w = boundaries.width();
    let mut labels = LabelMap::new(height, w);
    for c in 0..w {
        for band in 1..k {
            let top = boundaries.row(band - 1, c).max(0) as usize;
            let bottom = (boundaries.row(band, c).max(0) as usize).min(height);
            for r in top..bottom {
                labels.set(r, c, band as u8);
            }
        }
    }
    let image = labels.map(|&l| palette[l as usize]);
    (image, labels)
}

/// Unit-mean gamma speckle with standard deviation `strength`.
pub fn speckle_field(height: usize, width: usize, strength: f32, rng: &mut Rng) -> Grid<f32> {
    if strength <= 0.0 {
        return Grid::filled(height, width, 1.0);
    }
    let s2 = (strength as f64).powi(2);
    let gamma = Gamma::new(1.0 / s2, s2).expect("valid gamma parameters");
    Grid::from_fn(height, width, |_, _| gamma.sample(rng) as f32)
}

fn apply_speckle(clean: &Grid<f32>, speckle: &Grid<f32>) -> BScan {
    let data = clean
        .as_slice()
        .iter()
        .zip(speckle.as_slice())
        .map(|(&v, &s)| (v * s).clamp(0.0, 1.0))
        .collect();
    Grid::from_vec(clean.rows(), clean.cols(), data).expect("same shape")
}

/// A rendered healthy B-scan together with what is needed to re-render it.
#[derive(Clone, Debug)]
pub struct HealthyScan {
    pub image: BScan,
    pub labels: LabelMap,
    pub boundaries: Boundaries,
    pub clean: Grid<f32>,
    pub speckle: Grid<f32>,
}

/// Fills bands with palette intensities and multiplies by speckle.
pub fn render_bscan(boundaries: &Boundaries, config: &PhantomConfig, rng: &mut Rng) -> HealthyScan {
    let (clean, labels) = render_clean(boundaries, &config.layer_intensity_palette, config.height);
    let speckle = speckle_field(config.height, config.width, config.speckle_strength, rng);
    HealthyScan {
        image: apply_speckle(&clean, &speckle),
        labels,
        boundaries: boundaries.clone(),
        clean,
        speckle,
    }
}

#[derive(Clone, Debug)]
enum Overlay {
    Ellipse { cy: f64, cx: f64, a: f64, b: f64, value: f32 },
    Disk { cy: f64, cx: f64, radius: f64, value: f32 },
    /// Rows `[from, to)` in column `col`.
    Column { col: usize, from: i64, to: i64, value: f32 },
}

impl Overlay {
    fn paint(&self, image: &mut Grid<f32>) {
        let (h, w) = image.shape();
        match *self {
            Overlay::Ellipse { cy, cx, a, b, value } => {
                for_each_in_box(cy, cx, b, a, h, w, |r, c| {
                    let (dy, dx) = ((r as f64 - cy) / b, (c as f64 - cx) / a);
                    if dy * dy + dx * dx <= 1.0 {
                        image.set(r, c, value);
                    }
                });
            }
            Overlay::Disk { cy, cx, radius, value } => {
                for_each_in_box(cy, cx, radius, radius, h, w, |r, c| {
                    let (dy, dx) = (r as f64 - cy, c as f64 - cx);
                    if dy * dy + dx * dx <= radius * radius {
                        image.set(r, c, value);
                    }
                });
            }
            Overlay::Column { col, from, to, value } => {
                for r in from.max(0)..to.min(h as i64) {
                    image.set(r as usize, col, value);
                }
            }
        }
    }
}

fn for_each_in_box(
    cy: f64,
    cx: f64,
    ry: f64,
    rx: f64,
    h: usize,
    w: usize,
    mut f: impl FnMut(usize, usize),
) {
    let r0 = (cy - ry).floor().max(0.0) as usize;
    let r1 = ((cy + ry).ceil() as usize).min(h - 1);
    let c0 = (cx - rx).floor().max(0.0) as usize;
    let c1 = ((cx + rx).ceil() as usize).min(w - 1);
    for r in r0..=r1 {
        for c in c0..=c1 {
            f(r, c);
        }
    }
}

/// Result of injecting anomalies into a healthy scan.
#[derive(Clone, Debug)]
pub struct Injection {
    pub image: BScan,
    pub mask: BinaryMask,
    pub boundaries: Boundaries,
    /// Anomalies that could not be placed within the attempt budget.
    pub skipped: usize,
}

fn sample(range: [f64; 2], rng: &mut Rng) -> f64 {
    if range[0] >= range[1] {
        range[0]
    } else {
        rng.gen_range(range[0]..=range[1])
    }
}

/// Retina extent (first and last boundary rows) over a column span.
fn retina_span(geom: &Boundaries, c0: usize, c1: usize) -> (f64, f64) {
    let last = geom.num_curves() - 1;
    let top = (c0..=c1).map(|c| geom.curves[0][c]).fold(f64::MIN, f64::max);
    let bottom = (c0..=c1).map(|c| geom.curves[last][c]).fold(f64::MAX, f64::min);
    (top, bottom)
}

fn try_fluid(
    geom: &Boundaries,
    a: f64,
    b: f64,
    value: f32,
    rng: &mut Rng,
) -> Option<(Boundaries, Overlay)> {
    let w = geom.width();
    if 2.0 * a + 4.0 > w as f64 {
        return None;
    }
    let cx = rng.gen_range(a + 1.0..=w as f64 - a - 2.0);
    let c0 = (cx - a).floor().max(0.0) as usize;
    let c1 = ((cx + a).ceil() as usize).min(w - 1);
    let (top, bottom) = retina_span(geom, c0, c1);
    let (lo, hi) = (top + b + 1.0, bottom - b - 1.0);
    if lo > hi {
        return None;
    }
    let cy = rng.gen_range(lo..=hi);
    let mut out = geom.clone();
    for c in c0..=c1 {
        let t = (c as f64 - cx) / a;
        if t.abs() >= 1.0 {
            continue;
        }
        let chord = b * (1.0 - t * t).sqrt();
        let ellipse_top = cy - chord;
        for curve in out.curves.iter_mut() {
            let y = curve[c];
            if y >= cy {
                continue;
            }
            // Displacement is the local half-chord, fading to zero two
            // semi-axes above the ellipse.
            let dist = (ellipse_top - y).max(0.0);
            curve[c] = y - chord * (1.0 - dist / (2.0 * b)).max(0.0);
        }
    }
    if !out.repair_upward(TOP_LIMIT) {
        return None;
    }
    Some((out, Overlay::Ellipse { cy, cx, a, b, value }))
}

fn try_drusen(
    geom: &Boundaries,
    half_width: f64,
    height: f64,
    value: f32,
    rng: &mut Rng,
) -> Option<(Boundaries, Vec<Overlay>)> {
    let w = geom.width();
    let k = geom.num_curves();
    if k < 2 || 2.0 * half_width + 4.0 > w as f64 {
        return None;
    }
    let cx = rng.gen_range(half_width + 1.0..=w as f64 - half_width - 2.0);
    let mut out = geom.clone();
    let mut fills = Vec::new();
    for c in 0..w {
        let t = (c as f64 - cx) / half_width;
        if t.abs() >= 1.0 {
            continue;
        }
        let lift = height * (1.0 - t * t);
        let old_bottom = geom.row(k - 1, c);
        out.curves[k - 2][c] -= lift;
        out.curves[k - 1][c] -= lift;
        fills.push((c, old_bottom));
    }
    if !out.repair_upward(TOP_LIMIT) {
        return None;
    }
    let overlays = fills
        .into_iter()
        .map(|(col, old_bottom)| Overlay::Column {
            col,
            from: out.row(k - 1, col),
            to: old_bottom,
            value,
        })
        .collect();
    Some((out, overlays))
}

fn try_focus(geom: &Boundaries, radius: f64, value: f32, rng: &mut Rng) -> Option<Overlay> {
    let w = geom.width();
    let cx = rng.gen_range(radius + 1.0..=w as f64 - radius - 2.0);
    let c0 = (cx - radius).floor().max(0.0) as usize;
    let c1 = ((cx + radius).ceil() as usize).min(w - 1);
    let (top, bottom) = retina_span(geom, c0, c1);
    let (lo, hi) = (top + radius + 1.0, bottom - radius - 1.0);
    if lo > hi {
        return None;
    }
    let cy = rng.gen_range(lo..=hi);
    Some(Overlay::Disk { cy, cx, radius, value })
}

/// Injects anomalies drawn from `specs` into a healthy scan.
///
/// The mask is the union of pixels whose noise-free intensity changed by more
/// than 0.05 and pixels swept by a boundary that moved by more than one pixel.
pub fn inject_anomalies(
    scan: &HealthyScan,
    specs: &[AnomalySpec],
    palette: &[f32],
    rng: &mut Rng,
) -> Injection {
    let (h, w) = scan.image.shape();
    let mut geom = scan.boundaries.clone();
    let mut overlays = Vec::new();
    let mut skipped = 0;
    for spec in specs {
        let [lo, hi] = spec.count();
        let n = rng.gen_range(lo..=hi);
        for _ in 0..n {
            let mut placed = false;
            for _ in 0..MAX_PLACEMENT_ATTEMPTS {
                match spec {
                    AnomalySpec::FluidBlob {
                        semi_axis_x,
                        semi_axis_y,
                        ..
                    } => {
                        let a = sample(*semi_axis_x, rng);
                        let b = sample(*semi_axis_y, rng);
                        let value = rng.gen_range(0.05..=0.15);
                        if let Some((g, o)) = try_fluid(&geom, a, b, value, rng) {
                            geom = g;
                            overlays.push(o);
                            placed = true;
                        }
                    }
                    AnomalySpec::DrusenBump {
                        half_width, height, ..
                    } => {
                        let hw = sample(*half_width, rng);
                        let ht = sample(*height, rng);
                        let value = rng.gen_range(0.40..=0.50);
                        if let Some((g, o)) = try_drusen(&geom, hw, ht, value, rng) {
                            geom = g;
                            overlays.extend(o);
                            placed = true;
                        }
                    }
                    AnomalySpec::BrightFocus { radius, .. } => {
                        let r = sample(*radius, rng);
                        let value = rng.gen_range(0.9..=1.0);
                        if let Some(o) = try_focus(&geom, r, value, rng) {
                            overlays.push(o);
                            placed = true;
                        }
                    }
                }
                if placed {
                    break;
                }
            }
            if !placed {
                skipped += 1;
            }
        }
    }
    if skipped > 0 {
        warn!("skipped {skipped} anomalies that could not be placed");
    }

    let (mut clean, _) = render_clean(&geom, palette, h);
    for o in &overlays {
        o.paint(&mut clean);
    }
    let mut mask = BinaryMask::from_fn(h, w, |r, c| {
        (clean.get(r, c) - scan.clean.get(r, c)).abs() > ALTERED_INTENSITY
    });
    for (new, old) in geom.curves.iter().zip(&scan.boundaries.curves) {
        for c in 0..w {
            let (a, b) = (new[c].round() as i64, old[c].round() as i64);
            if (a - b).abs() > ALTERED_DISPLACEMENT {
                for r in a.min(b).max(0)..a.max(b).min(h as i64) {
                    mask.set(r as usize, c, true);
                }
            }
        }
    }
    Injection {
        image: apply_speckle(&clean, &scan.speckle),
        mask,
        boundaries: geom,
        skipped,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Condition {
    Healthy,
    Diseased,
}

/// One synthetic volume ("eye").
#[derive(Clone, Debug)]
pub struct VolumeRecord {
    pub volume_id: String,
    pub condition: Condition,
    pub bscans: Vec<BScan>,
    /// Weak layer labels, healthy volumes only.
    pub labels: Vec<LabelMap>,
    /// Ground-truth anomaly masks, diseased volumes only.
    pub anomaly_masks: Vec<BinaryMask>,
    /// Per B-scan, the row of the bottom band's lower boundary per column.
    /// For diseased scans this is the undeformed (healthy twin) boundary.
    pub bottom_boundary: Vec<Vec<usize>>,
    /// Anomalies dropped because they could not be placed.
    pub skipped_anomalies: usize,
}

impl VolumeRecord {
    pub fn len(&self) -> usize {
        self.bscans.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bscans.is_empty()
    }
}

/// Healthy B-scan `index` of the volume seeded with `seed`.
pub fn healthy_bscan(config: &PhantomConfig, seed: u64, index: usize) -> Result<HealthyScan> {
    let mut geom_rng = rng_for(seed, &[index as u64, 0]);
    let boundaries = generate_boundaries(config, &mut geom_rng)?;
    let mut speckle_rng = rng_for(seed, &[index as u64, 1]);
    Ok(render_bscan(&boundaries, config, &mut speckle_rng))
}

/// Generates a full volume as a pure function of `(config, condition, seed)`.
/// A diseased volume shares every healthy B-scan with the healthy volume of
/// the same seed before injection.
pub fn generate_volume(
    config: &PhantomConfig,
    volume_id: impl Into<String>,
    condition: Condition,
    seed: u64,
) -> Result<VolumeRecord> {
    config.validate()?;
    let mut record = VolumeRecord {
        volume_id: volume_id.into(),
        condition,
        bscans: Vec::with_capacity(config.bscans_per_volume),
        labels: Vec::new(),
        anomaly_masks: Vec::new(),
        bottom_boundary: Vec::new(),
        skipped_anomalies: 0,
    };
    for i in 0..config.bscans_per_volume {
        let scan = healthy_bscan(config, seed, i)?;
        record.bottom_boundary.push(scan.boundaries.bottom());
        match condition {
            Condition::Healthy => {
                record.bscans.push(scan.image);
                record.labels.push(scan.labels);
            }
            Condition::Diseased => {
                let mut rng = rng_for(seed, &[i as u64, 2]);
                let inj = inject_anomalies(
                    &scan,
                    &config.anomaly_spec,
                    &config.layer_intensity_palette,
                    &mut rng,
                );
                record.skipped_anomalies += inj.skipped;
                record.bscans.push(inj.image);
                record.anomaly_masks.push(inj.mask);
            }
        }
    }
    Ok(record)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::config(format!("unknown split {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetCounts {
    pub train_healthy: usize,
    pub val_healthy: usize,
    pub val_diseased: usize,
    pub test_diseased: usize,
    pub test_healthy: usize,
}

impl Default for DatasetCounts {
    fn default() -> Self {
        Self {
            train_healthy: 40,
            val_healthy: 6,
            val_diseased: 5,
            test_diseased: 20,
            test_healthy: 15,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub condition: Condition,
    pub split: Split,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub seed: u64,
    pub counts: DatasetCounts,
    pub config: PhantomConfig,
    pub volumes: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn entries<'a>(
        &'a self,
        split: Split,
        condition: Option<Condition>,
    ) -> impl Iterator<Item = &'a ManifestEntry> + 'a {
        self.volumes
            .iter()
            .filter(move |e| e.split == split && condition.map_or(true, |c| e.condition == c))
    }
}

/// Lists every volume of a dataset with its derived seed.
pub fn plan_dataset(config: &PhantomConfig, counts: DatasetCounts, seed: u64) -> Result<DatasetManifest> {
    config.validate()?;
    for (name, n) in [
        ("train_healthy", counts.train_healthy),
        ("val_healthy", counts.val_healthy),
        ("val_diseased", counts.val_diseased),
        ("test_diseased", counts.test_diseased),
    ] {
        if n == 0 {
            return Err(Error::config(format!("dataset count {name} must be at least 1")));
        }
    }
    let groups = [
        ("train_h", Split::Train, Condition::Healthy, counts.train_healthy),
        ("val_h", Split::Val, Condition::Healthy, counts.val_healthy),
        ("val_d", Split::Val, Condition::Diseased, counts.val_diseased),
        ("test_d", Split::Test, Condition::Diseased, counts.test_diseased),
        ("test_h", Split::Test, Condition::Healthy, counts.test_healthy),
    ];
    let mut volumes = Vec::new();
    for (prefix, split, condition, n) in groups {
        for i in 0..n {
            let index = volumes.len() as u64;
            volumes.push(ManifestEntry {
                id: format!("{prefix}_{i:03}"),
                condition,
                split,
                seed: derive_seed(seed, index),
            });
        }
    }
    Ok(DatasetManifest {
        seed,
        counts,
        config: config.clone(),
        volumes,
    })
}

pub fn generate_entry(manifest: &DatasetManifest, entry: &ManifestEntry) -> Result<VolumeRecord> {
    generate_volume(&manifest.config, entry.id.clone(), entry.condition, entry.seed)
}

pub const MANIFEST_FILE: &str = "manifest.json";

/// Writes a full dataset under `root`. The dataset is built in a sibling
/// staging directory and moved into place only once complete.
pub fn generate_dataset(
    config: &PhantomConfig,
    counts: DatasetCounts,
    seed: u64,
    root: &Path,
) -> Result<DatasetManifest> {
    let manifest = plan_dataset(config, counts, seed)?;
    let staging = staging_dir(root);
    if staging.exists() {
        fs::remove_dir_all(&staging).map_err(|e| Error::io(&staging, e))?;
    }
    let result = write_dataset(&manifest, &staging);
    if let Err(e) = result {
        let _ = fs::remove_dir_all(&staging);
        return Err(e);
    }
    if root.exists() {
        fs::remove_dir_all(root).map_err(|e| Error::io(root, e))?;
    }
    fs::rename(&staging, root).map_err(|e| {
        let _ = fs::remove_dir_all(&staging);
        Error::io(root, e)
    })?;
    Ok(manifest)
}

fn staging_dir(root: &Path) -> PathBuf {
    let name = root
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "dataset".into());
    root.with_file_name(format!(".{name}.partial"))
}

fn write_dataset(manifest: &DatasetManifest, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for entry in &manifest.volumes {
        let record = generate_entry(manifest, entry)?;
        write_volume(&record, &dir.join(&entry.id))?;
    }
    let json = serde_json::to_string_pretty(manifest)?;
    io::write_atomic(&dir.join(MANIFEST_FILE), json.as_bytes())
}

pub fn write_volume(record: &VolumeRecord, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (i, scan) in record.bscans.iter().enumerate() {
        io::write_pgm(&dir.join(format!("bscan_{i}.pgm")), &io::quantize(scan))?;
        let bottom: Vec<String> = record.bottom_boundary[i].iter().map(|r| r.to_string()).collect();
        io::write_atomic(
            &dir.join(format!("bottom_{i}.csv")),
            format!("{}\n", bottom.join(",")).as_bytes(),
        )?;
    }
    for (i, labels) in record.labels.iter().enumerate() {
        io::write_pgm(&dir.join(format!("label_{i}.pgm")), labels)?;
    }
    for (i, mask) in record.anomaly_masks.iter().enumerate() {
        io::write_pgm(&dir.join(format!("anomaly_{i}.pgm")), &io::mask_to_bytes(mask))?;
    }
    Ok(())
}

pub fn read_manifest(root: &Path) -> Result<DatasetManifest> {
    let path = root.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// Loads a volume written by [`write_volume`]. Intensities come back
/// quantized to 8 bits.
pub fn read_volume(root: &Path, entry: &ManifestEntry, bscans: usize) -> Result<VolumeRecord> {
    let dir = root.join(&entry.id);
    let mut record = VolumeRecord {
        volume_id: entry.id.clone(),
        condition: entry.condition,
        bscans: Vec::with_capacity(bscans),
        labels: Vec::new(),
        anomaly_masks: Vec::new(),
        bottom_boundary: Vec::new(),
        skipped_anomalies: 0,
    };
    for i in 0..bscans {
        record
            .bscans
            .push(io::dequantize(&io::read_pgm(&dir.join(format!("bscan_{i}.pgm")))?));
        let path = dir.join(format!("bottom_{i}.csv"));
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let row = text
            .trim()
            .split(',')
            .map(|v| v.trim().parse::<usize>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::format("boundary csv", e.to_string()))?;
        record.bottom_boundary.push(row);
        match entry.condition {
            Condition::Healthy => record
                .labels
                .push(io::read_pgm(&dir.join(format!("label_{i}.pgm")))?),
            Condition::Diseased => record
                .anomaly_masks
                .push(io::bytes_to_mask(&io::read_pgm(&dir.join(format!("anomaly_{i}.pgm")))?)),
        }
    }
    Ok(record)
}
