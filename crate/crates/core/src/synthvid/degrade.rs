use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::bbox::BBox;

/// Occluders cover this fraction range of the target object's box.
pub const OCCLUSION_COVERAGE: (f64, f64) = (0.5, 0.7);

const BLUR_RADIUS: usize = 2;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Degradation {
    /// 5×5 box filter applied twice, reflective borders.
    Blur,
    /// Background-coloured strip over part of `target`. `coverage` overrides
    /// the random fraction when set.
    Occlusion {
        target: BBox,
        background: f32,
        coverage: Option<f64>,
    },
}

/// A single-channel image, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    pub h: usize,
    pub w: usize,
    pub pixels: Vec<f32>,
}

impl Frame {
    pub fn filled(h: usize, w: usize, value: f32) -> Self {
        Self {
            h,
            w,
            pixels: vec![value; h * w],
        }
    }

    pub fn get(&self, y: usize, x: usize) -> f32 {
        self.pixels[y * self.w + x]
    }

    pub fn set(&mut self, y: usize, x: usize, v: f32) {
        self.pixels[y * self.w + x] = v;
    }

    pub fn mean(&self) -> f64 {
        self.pixels.iter().map(|&v| v as f64).sum::<f64>() / self.pixels.len() as f64
    }
}

/// Integer pixel rectangle `[y0, y1) × [x0, x1)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PixelRect {
    pub y0: usize,
    pub x0: usize,
    pub y1: usize,
    pub x1: usize,
}

impl PixelRect {
    pub fn area(&self) -> usize {
        (self.y1 - self.y0) * (self.x1 - self.x0)
    }

    pub fn to_bbox(self) -> BBox {
        BBox::new(self.x0 as f64, self.y0 as f64, self.x1 as f64, self.y1 as f64)
    }
}

/// Applies one degradation; the returned occluder rectangle is set for occlusions.
pub fn apply_degradation(frame: &Frame, kind: Degradation, seed: u64) -> (Frame, Option<PixelRect>) {
    match kind {
        Degradation::Blur => (box_blur(&box_blur(frame)), None),
        Degradation::Occlusion {
            target,
            background,
            coverage,
        } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let frac = coverage.unwrap_or_else(|| rng.gen_range(OCCLUSION_COVERAGE.0..=OCCLUSION_COVERAGE.1));
            let rect = occluder(&target, frac, rng.gen_range(0..4), frame.h, frame.w);
            let mut out = frame.clone();
            for y in rect.y0..rect.y1 {
                for x in rect.x0..rect.x1 {
                    out.set(y, x, background.clamp(0.0, 1.0));
                }
            }
            (out, Some(rect))
        }
    }
}

/// Strip along one side of `target` covering `frac` of its extent (rounded up).
fn occluder(target: &BBox, frac: f64, side: u32, h: usize, w: usize) -> PixelRect {
    let (y0, x0) = (target.y1.max(0.0) as usize, target.x1.max(0.0) as usize);
    let (y1, x1) = ((target.y2 as usize).min(h), (target.x2 as usize).min(w));
    let bh = ((y1 - y0) as f64 * frac).ceil() as usize;
    let bw = ((x1 - x0) as f64 * frac).ceil() as usize;
    match side {
        0 => PixelRect { y0, x0, y1: y0 + bh, x1 },
        1 => PixelRect { y0: y1 - bh, x0, y1, x1 },
        2 => PixelRect { y0, x0, y1, x1: x0 + bw },
        _ => PixelRect { y0, x0: x1 - bw, y1, x1 },
    }
}

fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let mut i = i;
    if n == 1 {
        return 0;
    }
    while i < 0 || i >= n {
        if i < 0 {
            i = -i - 1;
        }
        if i >= n {
            i = 2 * n - i - 1;
        }
    }
    i as usize
}

/// Separable 5×5 mean filter with reflective (edge-repeating) borders.
fn box_blur(frame: &Frame) -> Frame {
    let r = BLUR_RADIUS as isize;
    let norm = (2 * BLUR_RADIUS + 1) as f64;
    let mut tmp = vec![0.0f64; frame.h * frame.w];
    for y in 0..frame.h {
        for x in 0..frame.w {
            let s: f64 = (-r..=r)
                .map(|d| frame.get(y, reflect(x as isize + d, frame.w)) as f64)
                .sum();
            tmp[y * frame.w + x] = s / norm;
        }
    }
    let mut out = Frame::filled(frame.h, frame.w, 0.0);
    for y in 0..frame.h {
        for x in 0..frame.w {
            let s: f64 = (-r..=r)
                .map(|d| tmp[reflect(y as isize + d, frame.h) * frame.w + x])
                .sum();
            out.set(y, x, ((s / norm) as f32).clamp(0.0, 1.0));
        }
    }
    out
}
