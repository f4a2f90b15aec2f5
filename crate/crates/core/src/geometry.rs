//! Flip, resize and short-side dimension arithmetic.
//!
//! Both interpolators sample at pixel centers: output pixel `i` reads the
//! source at `(i + 0.5) * src / dst`. Under that convention a horizontal
//! flip commutes with resizing.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::raster::{BinaryMask, ProbMap};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Dims {
    pub width: usize,
    pub height: usize,
}

impl Dims {
    pub fn new(width: usize, height: usize) -> Self {
        assert!(width >= 1 && height >= 1, "dims must be at least 1x1");
        Self { width, height }
    }

    pub fn area(&self) -> usize {
        self.width * self.height
    }

    pub fn short_side(&self) -> usize {
        self.width.min(self.height)
    }

    pub fn long_side(&self) -> usize {
        self.width.max(self.height)
    }
}

impl fmt::Display for Dims {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}", self.width, self.height)
    }
}

fn scaled(len: usize, s: f64) -> usize {
    // f64::round rounds half away from zero
    ((len as f64 * s).round() as usize).max(1)
}

/// Rescales `orig` so its short side equals `short_side`, unless that would
/// push the long side past `long_cap`, in which case the long side is pinned
/// to the cap instead. Aspect ratio is kept in both cases.
pub fn target_dims(orig: Dims, short_side: usize, long_cap: Option<usize>) -> Dims {
    assert!(short_side >= 1, "short side must be positive");
    if let Some(cap) = long_cap {
        assert!(cap >= short_side, "long-side cap below short side");
    }
    let mut s = short_side as f64 / orig.short_side() as f64;
    if let Some(cap) = long_cap {
        if scaled(orig.long_side(), s) > cap {
            s = cap as f64 / orig.long_side() as f64;
        }
    }
    Dims {
        width: scaled(orig.width, s),
        height: scaled(orig.height, s),
    }
}

fn hflip_rows<T: Copy>(data: &[T], width: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(data.len());
    for row in data.chunks(width) {
        out.extend(row.iter().rev());
    }
    out
}

pub fn hflip_mask(m: &BinaryMask) -> BinaryMask {
    BinaryMask::new(m.width(), m.height(), hflip_rows(m.data(), m.width()))
        .expect("flip preserves shape")
}

pub fn hflip_prob(p: &ProbMap) -> ProbMap {
    ProbMap::from_raw(p.dims(), hflip_rows(p.data(), p.width()))
}

fn nearest_index(i: usize, src: usize, dst: usize) -> usize {
    let pos = ((i as f64 + 0.5) * src as f64 / dst as f64).floor() as usize;
    pos.min(src - 1)
}

pub fn resize_nearest(m: &BinaryMask, to: Dims) -> BinaryMask {
    if m.dims() == to {
        return m.clone();
    }
    let xs: Vec<usize> = (0..to.width)
        .map(|x| nearest_index(x, m.width(), to.width))
        .collect();
    let ys: Vec<usize> = (0..to.height)
        .map(|y| nearest_index(y, m.height(), to.height))
        .collect();
    BinaryMask::from_fn(to, |x, y| m.get(xs[x], ys[y]))
}

/// Precomputed two-tap interpolation along one axis.
struct Taps {
    lo: Vec<usize>,
    hi: Vec<usize>,
    frac: Vec<f64>,
}

impl Taps {
    fn new(src: usize, dst: usize) -> Self {
        let ratio = src as f64 / dst as f64;
        let max = (src - 1) as f64;
        let mut taps = Taps {
            lo: Vec::with_capacity(dst),
            hi: Vec::with_capacity(dst),
            frac: Vec::with_capacity(dst),
        };
        for i in 0..dst {
            let c = ((i as f64 + 0.5) * ratio - 0.5).clamp(0.0, max);
            let lo = c.floor();
            taps.lo.push(lo as usize);
            taps.hi.push((lo as usize + 1).min(src - 1));
            taps.frac.push(c - lo);
        }
        taps
    }
}

pub fn resize_bilinear(p: &ProbMap, to: Dims) -> ProbMap {
    if p.dims() == to {
        return p.clone();
    }
    let tx = Taps::new(p.width(), to.width);
    let ty = Taps::new(p.height(), to.height);
    let mut out = Vec::with_capacity(to.area());
    for y in 0..to.height {
        let (y0, y1, fy) = (ty.lo[y], ty.hi[y], ty.frac[y]);
        for x in 0..to.width {
            let (x0, x1, fx) = (tx.lo[x], tx.hi[x], tx.frac[x]);
            let taps = [p.get(x0, y0), p.get(x1, y0), p.get(x0, y1), p.get(x1, y1)];
            let top = lerp(taps[0], taps[1], fx);
            let bottom = lerp(taps[2], taps[3], fx);
            let v = lerp_f64(top, bottom, fy) as f32;
            let lo = taps.iter().cloned().fold(f32::INFINITY, f32::min);
            let hi = taps.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
            out.push(v.clamp(lo, hi));
        }
    }
    ProbMap::from_raw(to, out)
}

#[inline]
fn lerp(a: f32, b: f32, t: f64) -> f64 {
    lerp_f64(a as f64, b as f64, t)
}

#[inline]
fn lerp_f64(a: f64, b: f64, t: f64) -> f64 {
    // exact at t == 0 and for a == b
    if a == b {
        a
    } else {
        a + (b - a) * t
    }
}
