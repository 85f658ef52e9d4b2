//! From an uncertainty map to a compact binary anomaly mask.
//!
//! The full pipeline thresholds the map, removes small connected components,
//! fills concavities by iterated majority ray casting and smooths the result
//! with a morphological closing followed by an opening. Optionally the map is
//! first flattened so the bottom retinal boundary becomes a horizontal line.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{BinaryMask, Grid, VoteMap};
use crate::uncertainty::UncertaintyMap;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    #[default]
    Full,
    ThresholdingOnly,
    ConvexHull,
    NoMorphology,
}

impl Variant {
    pub const ALL: [Variant; 4] = [
        Variant::Full,
        Variant::ThresholdingOnly,
        Variant::ConvexHull,
        Variant::NoMorphology,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::ThresholdingOnly => "thresholding_only",
            Variant::ConvexHull => "convex_hull",
            Variant::NoMorphology => "no_morphology",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| Error::config(format!("unknown variant {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PostprocParams {
    pub threshold: f64,
    pub min_component_area: usize,
    pub vote_thresholds: Vec<u8>,
    pub closing_radius: usize,
    pub opening_radius: usize,
    /// 4 or 8.
    pub connectivity: u8,
    pub flatten: bool,
    pub variant: Variant,
}

impl Default for PostprocParams {
    fn default() -> Self {
        PostprocParams {
            threshold: 0.10,
            min_component_area: 10,
            vote_thresholds: vec![3, 4],
            closing_radius: 4,
            opening_radius: 2,
            connectivity: 8,
            flatten: false,
            variant: Variant::Full,
        }
    }
}

impl PostprocParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.threshold > 0.0 && self.threshold.is_finite()) {
            return Err(Error::config(format!("threshold {} must be positive", self.threshold)));
        }
        if self.vote_thresholds.iter().any(|v| !(1..=4).contains(v)) {
            return Err(Error::config("vote thresholds must lie in 1..=4"));
        }
        if self.connectivity != 4 && self.connectivity != 8 {
            return Err(Error::config(format!("connectivity {} is not 4 or 8", self.connectivity)));
        }
        Ok(())
    }
}

/// `u >= t`.
pub fn threshold(u: &Grid<f64>, t: f64) -> BinaryMask {
    u.map(|&v| v >= t)
}

/// Connected-component labels (0 = background, components numbered from 1 in
/// raster order of their first pixel) and the size of each component.
pub fn label_components(mask: &BinaryMask, connectivity: u8) -> (Grid<u32>, Vec<usize>) {
    let (rows, cols) = mask.shape();
    let mut labels = Grid::filled(rows, cols, 0u32);
    let mut sizes = vec![0];
    let mut stack = Vec::new();
    let diag = connectivity == 8;
    for start in 0..rows * cols {
        if !mask.as_slice()[start] || labels.as_slice()[start] != 0 {
            continue;
        }
        let id = sizes.len() as u32;
        let mut size = 0;
        labels.as_mut_slice()[start] = id;
        stack.push(start);
        while let Some(i) = stack.pop() {
            size += 1;
            let (r, c) = ((i / cols) as isize, (i % cols) as isize);
            for dr in -1isize..=1 {
                for dc in -1isize..=1 {
                    if (dr == 0 && dc == 0) || (!diag && dr != 0 && dc != 0) {
                        continue;
                    }
                    let (nr, nc) = (r + dr, c + dc);
                    if nr < 0 || nc < 0 || nr >= rows as isize || nc >= cols as isize {
                        continue;
                    }
                    let j = nr as usize * cols + nc as usize;
                    if mask.as_slice()[j] && labels.as_slice()[j] == 0 {
                        labels.as_mut_slice()[j] = id;
                        stack.push(j);
                    }
                }
            }
        }
        sizes.push(size);
    }
    (labels, sizes)
}

/// Drops components with fewer than `s` pixels.
pub fn remove_small_components(mask: &BinaryMask, s: usize, connectivity: u8) -> BinaryMask {
    if s == 0 {
        return mask.clone();
    }
    let (labels, sizes) = label_components(mask, connectivity);
    labels.map(|&l| l != 0 && sizes[l as usize] >= s)
}

/// Number of cardinal directions in which a foreground pixel lies strictly
/// beyond each background pixel. Foreground pixels get 4.
pub fn cast_votes(mask: &BinaryMask) -> VoteMap {
    let (rows, cols) = mask.shape();
    let m = mask.as_slice();
    let mut votes = Grid::filled(rows, cols, 0u8);
    let v = votes.as_mut_slice();
    for r in 0..rows {
        let row = &m[r * cols..(r + 1) * cols];
        let out = &mut v[r * cols..(r + 1) * cols];
        let mut seen = false;
        for c in 0..cols {
            out[c] += seen as u8;
            seen |= row[c];
        }
        seen = false;
        for c in (0..cols).rev() {
            out[c] += seen as u8;
            seen |= row[c];
        }
    }
    let mut seen = vec![false; cols];
    for r in 0..rows {
        for c in 0..cols {
            v[r * cols + c] += seen[c] as u8;
            seen[c] |= m[r * cols + c];
        }
    }
    seen.fill(false);
    for r in (0..rows).rev() {
        for c in 0..cols {
            v[r * cols + c] += seen[c] as u8;
            seen[c] |= m[r * cols + c];
        }
    }
    for (o, &b) in v.iter_mut().zip(m) {
        if b {
            *o = 4;
        }
    }
    votes
}

/// `B(j) = B(j-1) OR (V(B(j-1)) >= v_j)` for each threshold in turn.
pub fn majority_ray_cast(mask: &BinaryMask, vote_thresholds: &[u8]) -> BinaryMask {
    let mut b = mask.clone();
    for &v in vote_thresholds {
        let votes = cast_votes(&b);
        for (x, &n) in b.as_mut_slice().iter_mut().zip(votes.as_slice()) {
            *x |= n >= v;
        }
    }
    b
}

/// Offsets `(dy, dx)` with `dy² + dx² <= r²`.
pub fn disk(r: usize) -> Vec<(isize, isize)> {
    let r = r as isize;
    let mut out = Vec::new();
    for dy in -r..=r {
        for dx in -r..=r {
            if dy * dy + dx * dx <= r * r {
                out.push((dy, dx));
            }
        }
    }
    out
}

fn probe(mask: &BinaryMask, r: isize, c: isize) -> bool {
    r >= 0 && c >= 0 && (r as usize) < mask.rows() && (c as usize) < mask.cols() && *mask.get(r as usize, c as usize)
}

pub fn dilate(mask: &BinaryMask, r: usize) -> BinaryMask {
    if r == 0 {
        return mask.clone();
    }
    let se = disk(r);
    let mut out = Grid::filled(mask.rows(), mask.cols(), false);
    for y in 0..mask.rows() {
        for x in 0..mask.cols() {
            if !*mask.get(y, x) {
                continue;
            }
            for &(dy, dx) in &se {
                let (ny, nx) = (y as isize + dy, x as isize + dx);
                if ny >= 0 && nx >= 0 && (ny as usize) < mask.rows() && (nx as usize) < mask.cols() {
                    out.set(ny as usize, nx as usize, true);
                }
            }
        }
    }
    out
}

/// Pixels outside the canvas count as background.
pub fn erode(mask: &BinaryMask, r: usize) -> BinaryMask {
    if r == 0 {
        return mask.clone();
    }
    let se = disk(r);
    Grid::from_fn(mask.rows(), mask.cols(), |y, x| {
        *mask.get(y, x) && se.iter().all(|&(dy, dx)| probe(mask, y as isize + dy, x as isize + dx))
    })
}

/// Closing with radius `m_c`, then opening with radius `m_o`.
pub fn close_open(mask: &BinaryMask, m_c: usize, m_o: usize) -> BinaryMask {
    let closed = erode(&dilate(mask, m_c), m_c);
    dilate(&erode(&closed, m_o), m_o)
}

fn cross(o: (i64, i64), a: (i64, i64), b: (i64, i64)) -> i64 {
    (a.0 - o.0) * (b.1 - o.1) - (a.1 - o.1) * (b.0 - o.0)
}

/// Filled convex hull of all foreground pixel centres.
pub fn convex_hull_variant(mask: &BinaryMask) -> BinaryMask {
    let mut pts: Vec<(i64, i64)> = (0..mask.rows())
        .flat_map(|r| (0..mask.cols()).map(move |c| (r, c)))
        .filter(|&(r, c)| *mask.get(r, c))
        .map(|(r, c)| (r as i64, c as i64))
        .collect();
    let mut out = Grid::filled(mask.rows(), mask.cols(), false);
    if pts.is_empty() {
        return out;
    }
    pts.sort_unstable();
    // Monotone chain, counter-clockwise, collinear points dropped.
    let mut hull: Vec<(i64, i64)> = Vec::new();
    for pass in 0..2 {
        let start = hull.len();
        let iter: Box<dyn Iterator<Item = &(i64, i64)>> =
            if pass == 0 { Box::new(pts.iter()) } else { Box::new(pts.iter().rev()) };
        for &p in iter {
            while hull.len() >= start + 2 && cross(hull[hull.len() - 2], hull[hull.len() - 1], p) <= 0 {
                hull.pop();
            }
            hull.push(p);
        }
        hull.pop();
    }
    if hull.is_empty() {
        hull.push(pts[0]);
    }
    let (r0, r1) = (hull.iter().map(|p| p.0).min().unwrap(), hull.iter().map(|p| p.0).max().unwrap());
    let (c0, c1) = (hull.iter().map(|p| p.1).min().unwrap(), hull.iter().map(|p| p.1).max().unwrap());
    let n = hull.len();
    for r in r0..=r1 {
        for c in c0..=c1 {
            let p = (r, c);
            let inside = match n {
                1 => p == hull[0],
                2 => cross(hull[0], hull[1], p) == 0,
                _ => (0..n).all(|i| cross(hull[i], hull[(i + 1) % n], p) >= 0),
            };
            if inside {
                out.set(r as usize, c as usize, true);
            }
        }
    }
    out
}

/// Column shifts that move the bottom boundary onto one row, with enough
/// padding above and below that nothing leaves the canvas.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FlattenRecord {
    pub rows: usize,
    pub cols: usize,
    /// Target row in original coordinates (median of the boundary).
    pub target: usize,
    /// Downward shift per column.
    pub shifts: Vec<isize>,
    pub pad_top: usize,
    pub pad_bottom: usize,
}

impl FlattenRecord {
    pub fn new(rows: usize, bottom: &[usize]) -> Result<Self> {
        if bottom.is_empty() {
            return Err(Error::config("flattening needs a boundary row per column"));
        }
        if let Some(&bad) = bottom.iter().find(|&&b| b >= rows) {
            return Err(Error::config(format!("boundary row {bad} outside {rows} rows")));
        }
        let mut sorted = bottom.to_vec();
        sorted.sort_unstable();
        let target = sorted[(sorted.len() - 1) / 2];
        let shifts: Vec<isize> = bottom.iter().map(|&b| target as isize - b as isize).collect();
        let pad_top = shifts.iter().copied().min().unwrap_or(0).min(0).unsigned_abs();
        let pad_bottom = shifts.iter().copied().max().unwrap_or(0).max(0) as usize;
        Ok(FlattenRecord {
            rows,
            cols: bottom.len(),
            target,
            shifts,
            pad_top,
            pad_bottom,
        })
    }

    pub fn flat_rows(&self) -> usize {
        self.rows + self.pad_top + self.pad_bottom
    }

    /// Row of the flattened boundary on the padded canvas.
    pub fn flat_target(&self) -> usize {
        self.target + self.pad_top
    }

    fn dest(&self, r: usize, c: usize) -> usize {
        (r as isize + self.shifts[c] + self.pad_top as isize) as usize
    }
}

pub fn flatten<T: Clone>(grid: &Grid<T>, record: &FlattenRecord, fill: T) -> Result<Grid<T>> {
    if grid.shape() != (record.rows, record.cols) {
        return Err(Error::shape(
            format!("{}x{}", record.rows, record.cols),
            format!("{}x{}", grid.rows(), grid.cols()),
        ));
    }
    let mut out = Grid::filled(record.flat_rows(), record.cols, fill);
    for r in 0..record.rows {
        for c in 0..record.cols {
            out.set(record.dest(r, c), c, grid.get(r, c).clone());
        }
    }
    Ok(out)
}

pub fn unflatten<T: Clone>(grid: &Grid<T>, record: &FlattenRecord) -> Result<Grid<T>> {
    if grid.shape() != (record.flat_rows(), record.cols) {
        return Err(Error::shape(
            format!("{}x{}", record.flat_rows(), record.cols),
            format!("{}x{}", grid.rows(), grid.cols()),
        ));
    }
    Ok(Grid::from_fn(record.rows, record.cols, |r, c| grid.get(record.dest(r, c), c).clone()))
}

/// Runs the configured variant on raw uncertainty values.
pub fn pipeline_values(u: &Grid<f64>, params: &PostprocParams, bottom: Option<&[usize]>) -> Result<BinaryMask> {
    params.validate()?;
    let record = if params.flatten {
        let b = bottom.ok_or_else(|| Error::config("flatten requires the bottom boundary"))?;
        if b.len() != u.cols() {
            return Err(Error::shape(u.cols(), b.len()));
        }
        Some(FlattenRecord::new(u.rows(), b)?)
    } else {
        None
    };
    let work = match &record {
        Some(rec) => flatten(u, rec, 0.0)?,
        None => u.clone(),
    };
    let mut b = threshold(&work, params.threshold);
    if params.variant != Variant::ThresholdingOnly {
        b = remove_small_components(&b, params.min_component_area, params.connectivity);
        b = match params.variant {
            Variant::ConvexHull => convex_hull_variant(&b),
            _ => majority_ray_cast(&b, &params.vote_thresholds),
        };
        if params.variant != Variant::NoMorphology {
            b = close_open(&b, params.closing_radius, params.opening_radius);
        }
    }
    match &record {
        Some(rec) => unflatten(&b, rec),
        None => Ok(b),
    }
}

pub fn pipeline(u: &UncertaintyMap, params: &PostprocParams, bottom: Option<&[usize]>) -> Result<BinaryMask> {
    pipeline_values(&u.values, params, bottom)
}

#[cfg(test)]
pub(crate) mod oracle {
    use super::*;

    /// Walks each of the four rays pixel by pixel.
    pub fn votes(mask: &BinaryMask) -> VoteMap {
        let (rows, cols) = mask.shape();
        Grid::from_fn(rows, cols, |r, c| {
            if *mask.get(r, c) {
                return 4;
            }
            let mut n = 0;
            for (dr, dc) in [(0isize, -1isize), (0, 1), (-1, 0), (1, 0)] {
                let (mut y, mut x) = (r as isize + dr, c as isize + dc);
                while y >= 0 && x >= 0 && y < rows as isize && x < cols as isize {
                    if *mask.get(y as usize, x as usize) {
                        n += 1;
                        break;
                    }
                    y += dr;
                    x += dc;
                }
            }
            n
        })
    }

    pub fn ray_cast(mask: &BinaryMask, v: &[u8]) -> BinaryMask {
        let mut b = mask.clone();
        for &t in v {
            let votes = votes(&b);
            b = Grid::from_fn(b.rows(), b.cols(), |r, c| *b.get(r, c) || *votes.get(r, c) >= t);
        }
        b
    }

    /// Component sizes via union-find over right/down(/diagonal) neighbours.
    pub fn component_sizes(mask: &BinaryMask, connectivity: u8) -> Vec<usize> {
        let (rows, cols) = mask.shape();
        let mut parent: Vec<usize> = (0..rows * cols).collect();
        fn find(p: &mut [usize], mut i: usize) -> usize {
            while p[i] != i {
                p[i] = p[p[i]];
                i = p[i];
            }
            i
        }
        let on = |r: isize, c: isize| r >= 0 && c >= 0 && r < rows as isize && c < cols as isize && *mask.get(r as usize, c as usize);
        for r in 0..rows as isize {
            for c in 0..cols as isize {
                if !on(r, c) {
                    continue;
                }
                let mut nbrs = vec![(r, c + 1), (r + 1, c)];
                if connectivity == 8 {
                    nbrs.extend([(r + 1, c + 1), (r + 1, c - 1)]);
                }
                for (nr, nc) in nbrs {
                    if on(nr, nc) {
                        let a = find(&mut parent, r as usize * cols + c as usize);
                        let b = find(&mut parent, nr as usize * cols + nc as usize);
                        parent[a] = b;
                    }
                }
            }
        }
        let mut sizes = vec![0; rows * cols];
        for i in 0..rows * cols {
            if mask.as_slice()[i] {
                let root = find(&mut parent, i);
                sizes[root] += 1;
            }
        }
        (0..rows * cols)
            .map(|i| if mask.as_slice()[i] { sizes[find(&mut parent, i)] } else { 0 })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from;
    use proptest::prelude::*;
    use rand::Rng as _;

    fn mask_from(rows: &[&str]) -> BinaryMask {
        let cols = rows[0].len();
        Grid::from_fn(rows.len(), cols, |r, c| rows[r].as_bytes()[c] == b'#')
    }

    fn random_mask(rows: usize, cols: usize, density: f64, seed: u64) -> BinaryMask {
        let mut rng = rng_from(seed);
        Grid::from_fn(rows, cols, |_, _| rng.gen_bool(density))
    }

    #[test]
    fn threshold_examples() {
        let zero = Grid::filled(3, 3, 0.0);
        assert_eq!(threshold(&zero, 0.1).count(), 0);
        let pos = Grid::from_fn(3, 3, |r, c| 0.01 + (r * 3 + c) as f64 * 0.01);
        assert_eq!(threshold(&pos, 0.005).count(), 9);
        let mut one = Grid::filled(4, 4, 0.0);
        one.set(2, 1, 0.2);
        let m = threshold(&one, 0.10);
        assert_eq!(m.count(), 1);
        assert!(*m.get(2, 1));
        assert_eq!(threshold(&one, 0.2).count(), 1);
    }

    #[test]
    fn component_size_boundary() {
        let m = mask_from(&["###...", "......", "....##", "....##"]);
        let out = remove_small_components(&m, 4, 8);
        assert_eq!(out, mask_from(&["......", "......", "....##", "....##"]));
        let kept = remove_small_components(&m, 3, 8);
        assert_eq!(kept, m);
        assert_eq!(remove_small_components(&m, 0, 8), m);
    }

    #[test]
    fn connectivity_matters_for_diagonals() {
        let m = mask_from(&["#..", ".#.", "..#"]);
        assert_eq!(remove_small_components(&m, 3, 8), m);
        assert_eq!(remove_small_components(&m, 2, 4).count(), 0);
    }

    #[test]
    fn components_match_union_find() {
        for seed in 0..200 {
            let m = random_mask(20, 23, 0.45, seed);
            let conn = if seed % 2 == 0 { 8 } else { 4 };
            let s = (seed % 12) as usize;
            let sizes = oracle::component_sizes(&m, conn);
            let expect = Grid::from_vec(20, 23, sizes.iter().map(|&n| n > 0 && n >= s).collect()).unwrap();
            assert_eq!(remove_small_components(&m, s, conn), expect, "seed {seed}");
        }
    }

    #[test]
    fn vote_examples() {
        assert!(cast_votes(&Grid::filled(4, 5, false)).as_slice().iter().all(|&v| v == 0));
        let v = cast_votes(&mask_from(&["#.#"]));
        assert_eq!(v.as_slice(), &[4, 2, 4]);
    }

    #[test]
    fn hollow_rectangle_is_filled() {
        let m = mask_from(&[
            ".......",
            ".#####.",
            ".#...#.",
            ".#...#.",
            ".#####.",
            ".......",
        ]);
        let out = majority_ray_cast(&m, &[4]);
        let filled = mask_from(&[
            ".......",
            ".#####.",
            ".#####.",
            ".#####.",
            ".#####.",
            ".......",
        ]);
        assert_eq!(out, filled);
        assert_eq!(majority_ray_cast(&Grid::filled(5, 5, false), &[3, 4]).count(), 0);
    }

    #[test]
    fn votes_match_ray_walk() {
        let mut rng = rng_from(77);
        for seed in 0..300 {
            let (r, c) = (rng.gen_range(1..=40), rng.gen_range(1..=40));
            let m = random_mask(r, c, rng.gen_range(0.0..0.3), seed);
            assert_eq!(cast_votes(&m), oracle::votes(&m));
            assert_eq!(majority_ray_cast(&m, &[3, 4]), oracle::ray_cast(&m, &[3, 4]));
        }
    }

    #[test]
    fn disk_shapes() {
        assert_eq!(disk(0), vec![(0, 0)]);
        assert_eq!(disk(1).len(), 5);
        assert_eq!(disk(2).len(), 13);
    }

    #[test]
    fn radius_zero_morphology_is_identity() {
        let m = random_mask(12, 12, 0.4, 3);
        assert_eq!(close_open(&m, 0, 0), m);
    }

    #[test]
    fn closing_of_isolated_pair_with_unit_disk() {
        // The radius-1 disk is a 5-pixel cross: the midpoint of two pixels at
        // Chebyshev distance 2 is reached by the dilation but its vertical
        // neighbours are not, so erosion removes it again.
        for (a, b) in [((2, 1), (2, 3)), ((1, 1), (3, 3)), ((1, 1), (3, 2))] {
            let mut m = Grid::filled(5, 5, false);
            m.set(a.0, a.1, true);
            m.set(b.0, b.1, true);
            assert_eq!(close_open(&m, 1, 0), m);
        }
    }

    #[test]
    fn closing_bridges_gap_between_blocks() {
        let m = mask_from(&[
            ".........",
            ".###.###.",
            ".###.###.",
            ".###.###.",
            ".........",
        ]);
        let out = close_open(&m, 1, 0);
        assert!(*out.get(2, 4));
        assert!(!*out.get(1, 4) && !*out.get(3, 4));
        assert!(m.is_subset_of(&out));
    }

    #[test]
    fn opening_removes_isolated_pixel() {
        let mut m = Grid::filled(9, 9, false);
        m.set(4, 4, true);
        assert_eq!(close_open(&m, 0, 2).count(), 0);
    }

    #[test]
    fn erosion_treats_border_as_background() {
        let m = Grid::filled(5, 5, true);
        let e = erode(&m, 1);
        assert_eq!(e.count(), 9);
        assert!(!*e.get(0, 2));
    }

    #[test]
    fn hull_examples() {
        assert_eq!(convex_hull_variant(&Grid::filled(4, 4, false)).count(), 0);
        let mut one = Grid::filled(4, 4, false);
        one.set(1, 2, true);
        assert_eq!(convex_hull_variant(&one), one);
        let mut tri = Grid::filled(10, 10, false);
        for (r, c) in [(1, 1), (8, 2), (4, 8)] {
            tri.set(r, c, true);
        }
        let h = convex_hull_variant(&tri);
        assert!(tri.is_subset_of(&h));
        assert!(h.count() > 20);
        assert_eq!(convex_hull_variant(&h), h);
        let line = mask_from(&["#...", ".#..", "..#.", "...#"]);
        let hl = convex_hull_variant(&line);
        assert_eq!(hl, line);
    }

    #[test]
    fn flatten_horizontal_is_identity() {
        let rec = FlattenRecord::new(10, &[6; 7]).unwrap();
        assert!(rec.shifts.iter().all(|&s| s == 0));
        assert_eq!((rec.pad_top, rec.pad_bottom), (0, 0));
        let m = random_mask(10, 7, 0.5, 1);
        assert_eq!(flatten(&m, &rec, false).unwrap(), m);
    }

    #[test]
    fn flatten_levels_tilted_boundary() {
        let bottom: Vec<usize> = (0..16).map(|c| 20 + c / 2).collect();
        let rec = FlattenRecord::new(32, &bottom).unwrap();
        let marker = Grid::from_fn(32, 16, |r, c| r == bottom[c]);
        let flat = flatten(&marker, &rec, false).unwrap();
        let rows: Vec<usize> = (0..16)
            .map(|c| (0..flat.rows()).find(|&r| *flat.get(r, c)).unwrap())
            .collect();
        assert!(rows.iter().all(|&r| r == rec.flat_target()));
        let m = random_mask(32, 16, 0.3, 4);
        assert_eq!(unflatten(&flatten(&m, &rec, false).unwrap(), &rec).unwrap(), m);
    }

    #[test]
    fn pipeline_zero_map_is_empty() {
        let u = Grid::filled(16, 16, 0.0);
        for variant in Variant::ALL {
            let p = PostprocParams { variant, ..PostprocParams::default() };
            assert_eq!(pipeline_values(&u, &p, None).unwrap().count(), 0);
        }
    }

    #[test]
    fn pipeline_is_the_staged_composition() {
        let mut rng = rng_from(5);
        let u = Grid::from_fn(40, 48, |r, c| {
            let d = ((r as f64 - 20.0).powi(2) + (c as f64 - 24.0).powi(2)).sqrt();
            (0.2 - d * 0.01).max(0.0) + rng.gen_range(0.0..0.05)
        });
        let p = PostprocParams::default();
        let b0 = threshold(&u, 0.10);
        let b1 = remove_small_components(&b0, 10, 8);
        let b2 = majority_ray_cast(&b1, &[3, 4]);
        assert!(b1.is_subset_of(&b2));
        let b3 = close_open(&b2, 4, 2);
        assert_eq!(pipeline_values(&u, &p, None).unwrap(), b3);
        let nm = PostprocParams { variant: Variant::NoMorphology, ..p.clone() };
        assert_eq!(pipeline_values(&u, &nm, None).unwrap(), b2);
        let th = PostprocParams { variant: Variant::ThresholdingOnly, ..p.clone() };
        assert_eq!(pipeline_values(&u, &th, None).unwrap(), b0);
        let ch = PostprocParams { variant: Variant::ConvexHull, ..p };
        assert_eq!(pipeline_values(&u, &ch, None).unwrap(), close_open(&convex_hull_variant(&b1), 4, 2));
    }

    #[test]
    fn pipeline_flatten_requires_boundary() {
        let u = Grid::filled(16, 16, 0.0);
        let p = PostprocParams { flatten: true, ..PostprocParams::default() };
        assert!(pipeline_values(&u, &p, None).is_err());
        let bottom: Vec<usize> = (0..16).map(|c| 8 + c / 4).collect();
        assert_eq!(pipeline_values(&u, &p, Some(&bottom)).unwrap().shape(), (16, 16));
    }

    #[test]
    fn params_validation_and_names() {
        assert!(PostprocParams::default().validate().is_ok());
        assert!(PostprocParams { threshold: 0.0, ..Default::default() }.validate().is_err());
        assert!(PostprocParams { vote_thresholds: vec![5], ..Default::default() }.validate().is_err());
        assert!(PostprocParams { connectivity: 6, ..Default::default() }.validate().is_err());
        for v in Variant::ALL {
            assert_eq!(v.as_str().parse::<Variant>().unwrap(), v);
        }
        assert!("hull".parse::<Variant>().is_err());
    }

    fn arb_mask(max: usize) -> impl Strategy<Value = BinaryMask> {
        (1..=max, 1..=max, any::<u64>(), 0.0..0.5f64)
            .prop_map(|(r, c, seed, d)| random_mask(r, c, d, seed))
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(200))]

        #[test]
        fn threshold_is_antitone(seed in any::<u64>(), t1 in 0.001..0.3f64, dt in 0.0..0.2f64) {
            let mut rng = rng_from(seed);
            let u = Grid::from_fn(12, 12, |_, _| rng.gen_range(0.0..0.3));
            prop_assert!(threshold(&u, t1 + dt).is_subset_of(&threshold(&u, t1)));
        }

        #[test]
        fn ray_cast_grows_and_is_monotone(a in arb_mask(24), seed in any::<u64>(), v in prop::collection::vec(1u8..=4, 1..4)) {
            let extra = random_mask(a.rows(), a.cols(), 0.1, seed);
            let b = a.union(&extra);
            let ra = majority_ray_cast(&a, &v);
            let rb = majority_ray_cast(&b, &v);
            prop_assert!(a.is_subset_of(&ra));
            prop_assert!(ra.is_subset_of(&rb));
        }

        #[test]
        fn flatten_roundtrip(seed in any::<u64>(), rows in 8usize..30, cols in 1usize..20) {
            let mut rng = rng_from(seed);
            let bottom: Vec<usize> = (0..cols).map(|_| rng.gen_range(0..rows)).collect();
            let rec = FlattenRecord::new(rows, &bottom).unwrap();
            let m = random_mask(rows, cols, 0.4, seed ^ 1);
            prop_assert_eq!(unflatten(&flatten(&m, &rec, false).unwrap(), &rec).unwrap(), m);
        }
    }
}
