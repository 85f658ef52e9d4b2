//! Paired geometric augmentation of a B-scan and its label map.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{BScan, Grid, LabelMap};
use crate::rng::Rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    pub flip: bool,
    pub max_rotation_deg: f64,
    /// Fractions of the image width and height.
    pub max_shift_x: f64,
    pub max_shift_y: f64,
    pub max_scale: f64,
    /// Chance of applying each transform independently.
    pub probability: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            flip: true,
            max_rotation_deg: 10.0,
            max_shift_x: 0.05,
            max_shift_y: 0.20,
            max_scale: 0.02,
            probability: 0.5,
        }
    }
}

impl AugmentConfig {
    pub fn none() -> Self {
        AugmentConfig {
            flip: false,
            max_rotation_deg: 0.0,
            max_shift_x: 0.0,
            max_shift_y: 0.0,
            max_scale: 0.0,
            probability: 0.5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fractions = [self.max_shift_x, self.max_shift_y, self.max_scale];
        if fractions.iter().any(|f| !(0.0..1.0).contains(f)) {
            return Err(Error::config("translation and scale fractions must lie in [0, 1)"));
        }
        if !(0.0..=180.0).contains(&self.max_rotation_deg) {
            return Err(Error::config("max_rotation_deg must lie in [0, 180]"));
        }
        if !(0.0..=1.0).contains(&self.probability) {
            return Err(Error::config("augmentation probability must lie in [0, 1]"));
        }
        Ok(())
    }
}

/// One draw of transform parameters.
#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct Transform {
    pub flip: bool,
    pub angle_rad: f64,
    pub shift_x: f64,
    pub shift_y: f64,
    pub scale: f64,
}

impl Transform {
    pub fn sample(cfg: &AugmentConfig, rows: usize, cols: usize, rng: &mut Rng) -> Self {
        // Every draw happens unconditionally so the stream layout is fixed.
        let on = |rng: &mut Rng| rng.gen::<f64>() < cfg.probability;
        let sym = |rng: &mut Rng, m: f64| if m > 0.0 { rng.gen_range(-m..=m) } else { 0.0 };
        let flip = on(rng) && cfg.flip;
        let rot = on(rng);
        let angle = sym(rng, cfg.max_rotation_deg.to_radians());
        let shift = on(rng);
        let sx = sym(rng, cfg.max_shift_x * cols as f64);
        let sy = sym(rng, cfg.max_shift_y * rows as f64);
        let scale = on(rng);
        let s = sym(rng, cfg.max_scale);
        Transform {
            flip,
            angle_rad: if rot { angle } else { 0.0 },
            shift_x: if shift { sx } else { 0.0 },
            shift_y: if shift { sy } else { 0.0 },
            scale: if scale { s } else { 0.0 },
        }
    }

    fn is_affine_identity(&self) -> bool {
        self.angle_rad == 0.0 && self.shift_x == 0.0 && self.shift_y == 0.0 && self.scale == 0.0
    }

    /// Applies the flip, then rotation and scaling about the centre, then the
    /// translation.
    pub fn apply(&self, image: &BScan, labels: &LabelMap) -> (BScan, LabelMap) {
        let (mut img, mut lab) = (image.clone(), labels.clone());
        if self.flip {
            img = flip(&img);
            lab = flip(&lab);
        }
        if self.is_affine_identity() {
            return (img, lab);
        }
        let (rows, cols) = img.shape();
        let (cy, cx) = ((rows as f64 - 1.0) / 2.0, (cols as f64 - 1.0) / 2.0);
        let (sin, cos) = self.angle_rad.sin_cos();
        let inv_s = 1.0 / (1.0 + self.scale);
        let source = |r: usize, c: usize| {
            let dx = c as f64 - cx - self.shift_x;
            let dy = r as f64 - cy - self.shift_y;
            let x = (cos * dx + sin * dy) * inv_s + cx;
            let y = (-sin * dx + cos * dy) * inv_s + cy;
            (y, x)
        };
        let out_img = Grid::from_fn(rows, cols, |r, c| {
            let (y, x) = source(r, c);
            bilinear(&img, y, x)
        });
        let out_lab = Grid::from_fn(rows, cols, |r, c| {
            let (y, x) = source(r, c);
            let (ry, rx) = (y.round(), x.round());
            if ry >= 0.0 && rx >= 0.0 && (ry as usize) < rows && (rx as usize) < cols {
                *lab.get(ry as usize, rx as usize)
            } else {
                0
            }
        });
        (out_img, out_lab)
    }
}

pub fn flip<T: Clone>(g: &Grid<T>) -> Grid<T> {
    let cols = g.cols();
    Grid::from_fn(g.rows(), cols, |r, c| g.get(r, cols - 1 - c).clone())
}

/// Bilinear sample with zero outside the canvas.
fn bilinear(img: &BScan, y: f64, x: f64) -> f32 {
    let (y0, x0) = (y.floor(), x.floor());
    let (fy, fx) = (y - y0, x - x0);
    let px = |r: f64, c: f64| -> f64 {
        if r < 0.0 || c < 0.0 || r >= img.rows() as f64 || c >= img.cols() as f64 {
            0.0
        } else {
            *img.get(r as usize, c as usize) as f64
        }
    };
    let v = (1.0 - fy) * ((1.0 - fx) * px(y0, x0) + fx * px(y0, x0 + 1.0))
        + fy * ((1.0 - fx) * px(y0 + 1.0, x0) + fx * px(y0 + 1.0, x0 + 1.0));
    v.clamp(0.0, 1.0) as f32
}

/// Samples a transform and applies it to both grids.
pub fn augment(image: &BScan, labels: &LabelMap, cfg: &AugmentConfig, rng: &mut Rng) -> (BScan, LabelMap) {
    Transform::sample(cfg, image.rows(), image.cols(), rng).apply(image, labels)
}
