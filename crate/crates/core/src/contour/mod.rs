//! Circle fitting on segmentation masks.
//!
//! The largest 8-connected iris object gives a rough center and radius from its equivalent
//! ellipse. A circular Hough transform over the mask boundary then refines the limbic circle,
//! and a second transform over the boundary pixels inside it finds the pupil.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::BinaryMask;

/// Connected object statistics. Axis lengths are those of the ellipse with the same
/// normalized second central moments, with each pixel treated as a unit square.
#[derive(Clone, Debug, PartialEq)]
pub struct Blob {
    pub pixel_count: usize,
    pub centroid: (f64, f64),
    pub major_axis_len: f64,
    pub minor_axis_len: f64,
    /// `(min_x, min_y, max_x, max_y)`, inclusive.
    pub bbox: (usize, usize, usize, usize),
    pub pixels: Vec<(usize, usize)>,
}

impl Blob {
    fn from_pixels(pixels: Vec<(usize, usize)>) -> Self {
        let n = pixels.len() as f64;
        let (sx, sy) = pixels
            .iter()
            .fold((0.0, 0.0), |(a, b), &(x, y)| (a + x as f64, b + y as f64));
        let (cx, cy) = (sx / n, sy / n);
        let (mut uxx, mut uyy, mut uxy) = (0.0, 0.0, 0.0);
        let mut bbox = (usize::MAX, usize::MAX, 0, 0);
        for &(x, y) in &pixels {
            let (dx, dy) = (x as f64 - cx, y as f64 - cy);
            uxx += dx * dx;
            uyy += dy * dy;
            uxy += dx * dy;
            bbox = (bbox.0.min(x), bbox.1.min(y), bbox.2.max(x), bbox.3.max(y));
        }
        // +1/12: second moment of a unit pixel about its own center
        uxx = uxx / n + 1.0 / 12.0;
        uyy = uyy / n + 1.0 / 12.0;
        uxy /= n;
        let common = ((uxx - uyy).powi(2) + 4.0 * uxy * uxy).sqrt();
        let k = 2.0 * 2f64.sqrt();
        Blob {
            pixel_count: pixels.len(),
            centroid: (cx, cy),
            major_axis_len: k * (uxx + uyy + common).sqrt(),
            minor_axis_len: k * (uxx + uyy - common).max(0.0).sqrt(),
            bbox,
            pixels,
        }
    }

    pub fn to_mask(&self, width: usize, height: usize) -> BinaryMask {
        let mut m = BinaryMask::new(width, height);
        for &(x, y) in &self.pixels {
            m.set(x, y, true);
        }
        m
    }
}

/// Largest 8-connected iris object; among equal sizes, the one reached first in row-major
/// order.
pub fn largest_component(mask: &BinaryMask) -> Result<Blob> {
    let (w, h) = (mask.width(), mask.height());
    let mut seen = vec![false; w * h];
    let mut best: Option<Vec<(usize, usize)>> = None;
    let mut queue = VecDeque::new();
    for start in 0..w * h {
        if seen[start] || !mask.bits()[start] {
            continue;
        }
        seen[start] = true;
        queue.push_back(start);
        let mut pixels = Vec::new();
        while let Some(p) = queue.pop_front() {
            let (x, y) = (p % w, p / w);
            pixels.push((x, y));
            for dy in -1isize..=1 {
                for dx in -1isize..=1 {
                    let (nx, ny) = (x as isize + dx, y as isize + dy);
                    if nx < 0 || ny < 0 || nx >= w as isize || ny >= h as isize {
                        continue;
                    }
                    let q = ny as usize * w + nx as usize;
                    if !seen[q] && mask.bits()[q] {
                        seen[q] = true;
                        queue.push_back(q);
                    }
                }
            }
        }
        if best.as_ref().is_none_or(|b| pixels.len() > b.len()) {
            best = Some(pixels);
        }
    }
    best.map(Blob::from_pixels).ok_or(Error::NoIrisFound)
}

/// Centroid and half the mean axis length.
pub fn rough_iris(blob: &Blob) -> ((f64, f64), f64) {
    (blob.centroid, (blob.major_axis_len + blob.minor_axis_len) / 4.0)
}

/// Iris pixels with at least one non-iris (or out-of-image) 4-neighbor.
pub fn boundary(mask: &BinaryMask) -> BinaryMask {
    BinaryMask::from_fn(mask.width(), mask.height(), |x, y| {
        let (x, y) = (x as isize, y as isize);
        mask.get_signed(x, y)
            && !(mask.get_signed(x - 1, y)
                && mask.get_signed(x + 1, y)
                && mask.get_signed(x, y - 1)
                && mask.get_signed(x, y + 1))
    })
}

/// Distinct offsets of the midpoint (Bresenham) circle of radius `r`, sorted.
pub fn circle_offsets(r: usize) -> Vec<(isize, isize)> {
    let r = r as isize;
    let mut pts = Vec::new();
    let (mut x, mut y, mut d) = (r, 0isize, 1 - r);
    while x >= y {
        for (a, b) in [(x, y), (y, x)] {
            pts.extend_from_slice(&[(a, b), (-a, b), (a, -b), (-a, -b)]);
        }
        y += 1;
        if d < 0 {
            d += 2 * y + 1;
        } else {
            x -= 1;
            d += 2 * (y - x) + 1;
        }
    }
    pts.sort_unstable();
    pts.dedup();
    pts
}

/// Inclusive rectangle of candidate centers.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Roi {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl Roi {
    /// `center +- (half_w, half_h)`, clipped to a `width x height` image.
    pub fn around(center: (f64, f64), half_w: f64, half_h: f64, width: usize, height: usize) -> Result<Self> {
        let clip = |v: f64, n: usize| v.clamp(0.0, (n - 1) as f64) as usize;
        let (x0, x1) = ((center.0 - half_w).floor(), (center.0 + half_w).ceil());
        let (y0, y1) = ((center.1 - half_h).floor(), (center.1 + half_h).ceil());
        if x1 < 0.0 || y1 < 0.0 || x0 > (width - 1) as f64 || y0 > (height - 1) as f64 {
            return Err(Error::Geometry("region of interest lies outside the image".into()));
        }
        Ok(Roi {
            x0: clip(x0, width),
            y0: clip(y0, height),
            x1: clip(x1, width),
            y1: clip(y1, height),
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Circle {
    pub cx: f64,
    pub cy: f64,
    pub r: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct HoughPeak {
    pub cx: usize,
    pub cy: usize,
    pub r: usize,
    pub votes: u32,
}

/// Circular Hough transform over integer radii `r_min..=r_max` and centers inside `roi`.
/// Each edge pixel votes for every center whose Bresenham circle passes through it. Ties go
/// to the smallest radius, then the first center in row-major order.
pub fn cht(edges: &BinaryMask, r_min: usize, r_max: usize, roi: Roi) -> Result<HoughPeak> {
    if r_min > r_max || r_min == 0 {
        return Err(Error::invalid(format!("radius range [{r_min}, {r_max}] is empty")));
    }
    if roi.x1 >= edges.width() || roi.y1 >= edges.height() || roi.x0 > roi.x1 || roi.y0 > roi.y1 {
        return Err(Error::invalid("region of interest outside the edge map"));
    }
    let pts: Vec<(isize, isize)> = (0..edges.height())
        .flat_map(|y| (0..edges.width()).map(move |x| (x, y)))
        .filter(|&(x, y)| edges.get(x, y))
        .map(|(x, y)| (x as isize, y as isize))
        .collect();
    if pts.is_empty() {
        return Err(Error::NoCircleFound);
    }
    let (rw, rh) = (roi.x1 - roi.x0 + 1, roi.y1 - roi.y0 + 1);
    let mut acc = vec![0u32; rw * rh];
    let mut best: Option<HoughPeak> = None;
    for r in r_min..=r_max {
        acc.iter_mut().for_each(|v| *v = 0);
        let offs = circle_offsets(r);
        for &(ex, ey) in &pts {
            for &(dx, dy) in &offs {
                let (cx, cy) = (ex - dx - roi.x0 as isize, ey - dy - roi.y0 as isize);
                if cx >= 0 && cy >= 0 && (cx as usize) < rw && (cy as usize) < rh {
                    acc[cy as usize * rw + cx as usize] += 1;
                }
            }
        }
        for (i, &v) in acc.iter().enumerate() {
            if v > 0 && best.is_none_or(|b| v > b.votes) {
                best = Some(HoughPeak {
                    cx: roi.x0 + i % rw,
                    cy: roi.y0 + i / rw,
                    r,
                    votes: v,
                });
            }
        }
    }
    best.ok_or(Error::NoCircleFound)
}

/// Tunable fitting constants.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ContourConfig {
    /// Iris radii searched are `rough * (1 +- window)`.
    pub iris_radius_window: f64,
    /// Iris centers searched are within this fraction of the image dims of the rough center.
    pub iris_roi_frac: f64,
    pub pupil_min_ratio: f64,
    pub pupil_max_ratio: f64,
    /// Pupil centers searched are within this fraction of the iris radius of its center.
    pub pupil_roi_frac: f64,
    /// Boundary pixels closer than this fraction of the iris radius form the pupil edge set.
    pub inner_edge_frac: f64,
    /// Pupil votes below this fraction of its circle's points are rejected.
    pub min_pupil_support: f64,
    /// Concentric pupil radius used when no pupil is found.
    pub fallback_ratio: f64,
}

impl Default for ContourConfig {
    fn default() -> Self {
        ContourConfig {
            iris_radius_window: 0.15,
            iris_roi_frac: 0.10,
            pupil_min_ratio: 0.1,
            pupil_max_ratio: 0.8,
            pupil_roi_frac: 0.25,
            inner_edge_frac: 0.9,
            min_pupil_support: 0.3,
            fallback_ratio: 0.3,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EyeGeometry {
    pub iris: Circle,
    pub pupil: Circle,
    pub pupil_fallback: bool,
}

impl EyeGeometry {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("geometry serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        serde_json::from_str(s).map_err(|e| Error::Format(format!("geometry JSON: {e}")))
    }
}

fn radius_range(lo: f64, hi: f64) -> (usize, usize) {
    let a = lo.ceil().max(1.0) as usize;
    let b = hi.floor().max(1.0) as usize;
    if a > b {
        let m = ((lo + hi) / 2.0).round().max(1.0) as usize;
        (m, m)
    } else {
        (a, b)
    }
}

pub fn fit_contours(mask: &BinaryMask) -> Result<EyeGeometry> {
    fit_contours_with(mask, &ContourConfig::default())
}

pub fn fit_contours_with(mask: &BinaryMask, cfg: &ContourConfig) -> Result<EyeGeometry> {
    let (w, h) = (mask.width(), mask.height());
    let blob = largest_component(mask)?;
    let (rc, rr) = rough_iris(&blob);
    let edges = boundary(&blob.to_mask(w, h));

    let (lo, hi) = radius_range(rr * (1.0 - cfg.iris_radius_window), rr * (1.0 + cfg.iris_radius_window));
    let roi = Roi::around(rc, cfg.iris_roi_frac * w as f64, cfg.iris_roi_frac * h as f64, w, h)?;
    let ip = cht(&edges, lo, hi, roi)?;
    let iris = Circle {
        cx: ip.cx as f64,
        cy: ip.cy as f64,
        r: ip.r as f64,
    };

    let fallback = EyeGeometry {
        iris,
        pupil: Circle {
            cx: iris.cx,
            cy: iris.cy,
            r: cfg.fallback_ratio * iris.r,
        },
        pupil_fallback: true,
    };
    let inner_r2 = (cfg.inner_edge_frac * iris.r).powi(2);
    let inner = BinaryMask::from_fn(w, h, |x, y| {
        edges.get(x, y) && (x as f64 - iris.cx).powi(2) + (y as f64 - iris.cy).powi(2) < inner_r2
    });
    let (plo, phi) = (
        (cfg.pupil_min_ratio * iris.r).ceil().max(1.0) as usize,
        (cfg.pupil_max_ratio * iris.r).floor() as usize,
    );
    if plo > phi {
        return Ok(fallback);
    }
    let half = cfg.pupil_roi_frac * iris.r;
    let proi = Roi::around((iris.cx, iris.cy), half, half, w, h)?;
    let pp = match cht(&inner, plo, phi, proi) {
        Ok(p) => p,
        Err(Error::NoCircleFound) => return Ok(fallback),
        Err(e) => return Err(e),
    };
    let support = pp.votes as f64 / circle_offsets(pp.r).len() as f64;
    let pupil = Circle {
        cx: pp.cx as f64,
        cy: pp.cy as f64,
        r: pp.r as f64,
    };
    let inside = (pupil.cx - iris.cx).hypot(pupil.cy - iris.cy) + pupil.r < iris.r;
    if support < cfg.min_pupil_support || !inside {
        return Ok(fallback);
    }
    Ok(EyeGeometry {
        iris,
        pupil,
        pupil_fallback: false,
    })
}

/// Renders an annulus: pixels whose centers lie within `outer` of `(cx, cy)` and not within
/// `inner` of `(px, py)`.
pub fn render_annulus(
    width: usize,
    height: usize,
    (cx, cy, outer): (f64, f64, f64),
    (px, py, inner): (f64, f64, f64),
) -> BinaryMask {
    BinaryMask::from_fn(width, height, |x, y| {
        let (x, y) = (x as f64, y as f64);
        (x - cx).hypot(y - cy) <= outer && (x - px).hypot(y - py) > inner
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn largest_of_two_blobs() {
        let m = BinaryMask::from_fn(20, 10, |x, y| (y == 1 && x < 10) || (y == 7 && (12..17).contains(&x)));
        let b = largest_component(&m).unwrap();
        assert_eq!(b.pixel_count, 10);
        assert_eq!(b.centroid, (4.5, 1.0));
        assert!(matches!(largest_component(&BinaryMask::new(3, 3)), Err(Error::NoIrisFound)));
    }

    #[test]
    fn diagonal_pixels_are_connected() {
        let m = BinaryMask::from_fn(5, 5, |x, y| x == y);
        assert_eq!(largest_component(&m).unwrap().pixel_count, 5);
    }

    #[test]
    fn single_pixel_centroid() {
        let mut m = BinaryMask::new(10, 10);
        m.set(7, 3, true);
        let b = largest_component(&m).unwrap();
        assert_eq!(b.centroid, (7.0, 3.0));
        // unit square: both second moments 1/12, so each axis is 2 sqrt(2) sqrt(1/6) = 2 / sqrt(3)
        assert!((b.major_axis_len - 2.0 / 3f64.sqrt()).abs() < 1e-12);
        assert_eq!(b.major_axis_len, b.minor_axis_len);
    }

    #[test]
    fn disk_moments() {
        let m = render_annulus(100, 100, (50.0, 45.0, 20.0), (0.0, 0.0, -1.0));
        let b = largest_component(&m).unwrap();
        assert!((b.centroid.0 - 50.0).abs() < 0.1 && (b.centroid.1 - 45.0).abs() < 0.1);
        assert!((b.major_axis_len - 40.0).abs() < 1.0 && (b.minor_axis_len - 40.0).abs() < 1.0);
        let (_, r) = rough_iris(&b);
        assert!((r - 20.0).abs() < 0.5);
    }

    #[test]
    fn ellipse_axes() {
        // semi-axes 22 and 18
        let m = BinaryMask::from_fn(100, 100, |x, y| {
            let (dx, dy) = (x as f64 - 50.0, y as f64 - 50.0);
            (dx / 22.0).powi(2) + (dy / 18.0).powi(2) <= 1.0
        });
        let b = largest_component(&m).unwrap();
        assert!((b.major_axis_len - 44.0).abs() < 1.0);
        assert!((b.minor_axis_len - 36.0).abs() < 1.0);
        assert!((rough_iris(&b).1 - 20.0).abs() < 0.5);
    }

    #[test]
    fn rough_radius_of_annulus() {
        let m = render_annulus(200, 200, (100.0, 100.0, 50.0), (100.0, 100.0, 20.0));
        let (_, r) = rough_iris(&largest_component(&m).unwrap());
        assert!((r - 50.0).abs() < 5.0, "{r}");
    }

    #[test]
    fn bresenham_offsets() {
        assert_eq!(circle_offsets(1), vec![(-1, 0), (0, -1), (0, 1), (1, 0)]);
        for r in 1..30 {
            let o = circle_offsets(r);
            for &(x, y) in &o {
                let d = ((x * x + y * y) as f64).sqrt();
                assert!((d - r as f64).abs() < 1.0);
            }
        }
    }

    fn ring(w: usize, h: usize, cx: isize, cy: isize, r: usize) -> BinaryMask {
        let mut m = BinaryMask::new(w, h);
        for (dx, dy) in circle_offsets(r) {
            m.set((cx + dx) as usize, (cy + dy) as usize, true);
        }
        m
    }

    #[test]
    fn cht_finds_rendered_ring() {
        let e = ring(40, 40, 20, 20, 10);
        let roi = Roi { x0: 0, y0: 0, x1: 39, y1: 39 };
        let p = cht(&e, 8, 12, roi).unwrap();
        assert_eq!((p.cx, p.cy, p.r), (20, 20, 10));
        assert!(matches!(cht(&BinaryMask::new(40, 40), 8, 12, roi), Err(Error::NoCircleFound)));
    }

    #[test]
    fn cht_respects_radius_range() {
        let mut e = ring(60, 60, 30, 30, 10);
        for (dx, dy) in circle_offsets(20) {
            e.set((30 + dx) as usize, (30 + dy) as usize, true);
        }
        let roi = Roi { x0: 0, y0: 0, x1: 59, y1: 59 };
        assert_eq!(cht(&e, 15, 25, roi).unwrap().r, 20);
        assert_eq!(cht(&e, 5, 15, roi).unwrap().r, 10);
    }

    #[test]
    fn fit_perfect_annulus() {
        let m = render_annulus(200, 200, (100.0, 100.0, 50.0), (100.0, 100.0, 20.0));
        let g = fit_contours(&m).unwrap();
        assert!(!g.pupil_fallback);
        assert!((g.iris.cx - 100.0).abs() <= 1.0 && (g.iris.cy - 100.0).abs() <= 1.0);
        assert!((g.iris.r - 50.0).abs() <= 1.0);
        assert!((g.pupil.cx - 100.0).abs() <= 1.0 && (g.pupil.cy - 100.0).abs() <= 1.0);
        assert!((g.pupil.r - 20.0).abs() <= 1.0);
    }

    #[test]
    fn no_pupil_hole_falls_back() {
        let m = render_annulus(120, 100, (60.0, 50.0, 30.0), (0.0, 0.0, -1.0));
        let g = fit_contours(&m).unwrap();
        assert!(g.pupil_fallback);
        assert_eq!(g.pupil.r, 0.3 * g.iris.r);
        assert_eq!((g.pupil.cx, g.pupil.cy), (g.iris.cx, g.iris.cy));
    }

    #[test]
    fn salt_and_pepper_noise() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let clean = render_annulus(200, 200, (100.0, 100.0, 50.0), (100.0, 100.0, 20.0));
        let bits = clean.bits().iter().map(|&b| b ^ rng.gen_bool(0.05)).collect();
        let noisy = BinaryMask::from_bits(200, 200, bits).unwrap();
        let g = fit_contours(&noisy).unwrap();
        assert!((g.iris.r - 50.0).abs() <= 3.0, "{g:?}");
        assert!((g.iris.cx - 100.0).abs() <= 2.0 && (g.iris.cy - 100.0).abs() <= 2.0);
    }

    #[test]
    fn geometry_json_roundtrip() {
        let g = EyeGeometry {
            iris: Circle { cx: 10.0, cy: 12.5, r: 30.0 },
            pupil: Circle { cx: 11.0, cy: 12.0, r: 9.0 },
            pupil_fallback: false,
        };
        let back = EyeGeometry::from_json(&g.to_json()).unwrap();
        assert_eq!(back, g);
        assert!(EyeGeometry::from_json("{").is_err());
    }
}
