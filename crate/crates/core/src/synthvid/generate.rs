use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::degrade::{apply_degradation, Degradation, Frame, PixelRect};
use crate::bbox::BBox;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

const SPAWN_ATTEMPTS: usize = 200;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Shape {
    Disk,
    Square,
    Triangle,
}

impl Shape {
    pub const ALL: [Shape; 3] = [Shape::Disk, Shape::Square, Shape::Triangle];

    pub fn class_id(self) -> usize {
        self as usize
    }

    /// Whether pixel `(r, c)` of an `s×s` box is covered. Every shape touches all four box sides.
    fn covers(self, r: usize, c: usize, s: usize) -> bool {
        let (cy, cx) = (r as f64 + 0.5, c as f64 + 0.5);
        let half = s as f64 / 2.0;
        match self {
            Shape::Square => true,
            Shape::Disk => (cy - half).powi(2) + (cx - half).powi(2) <= half * half,
            // apex at the top centre, base on the bottom row
            Shape::Triangle => (cx - half).abs() <= half * (r as f64 + 1.0) / s as f64,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClipConfig {
    pub frames: usize,
    pub image_h: usize,
    pub image_w: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    /// Object side length range in pixels (inclusive, rounded down to even).
    pub object_size: (usize, usize),
    /// Per-axis speed range in pixels/frame; at least one axis reaches the minimum.
    pub speed: (i64, i64),
    pub occlusion_prob: f64,
    pub blur_prob: f64,
    pub noise_std: f64,
    pub background: f32,
    pub seed: u64,
}

impl Default for ClipConfig {
    fn default() -> Self {
        Self {
            frames: 9,
            image_h: 64,
            image_w: 64,
            min_objects: 1,
            max_objects: 3,
            object_size: (10, 16),
            speed: (1, 4),
            occlusion_prob: 0.7,
            blur_prob: 0.5,
            noise_std: 0.05,
            background: 0.1,
            seed: 0,
        }
    }
}

impl ClipConfig {
    pub fn validate(&self) -> Result<()> {
        if self.frames == 0 {
            return Err(Error::invalid("clip needs at least one frame"));
        }
        for p in [self.occlusion_prob, self.blur_prob] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::invalid(format!("probability {p} outside [0, 1]")));
            }
        }
        if self.min_objects == 0 || self.min_objects > self.max_objects || self.max_objects > 3 {
            return Err(Error::invalid("object count range must lie within 1..=3"));
        }
        if self.object_size.0 < 2 || self.object_size.0 > self.object_size.1 {
            return Err(Error::invalid("invalid object size range"));
        }
        if self.speed.0 < 0 || self.speed.0 > self.speed.1 {
            return Err(Error::invalid("invalid speed range"));
        }
        if !(self.noise_std >= 0.0) || !(0.0..=1.0).contains(&self.background) {
            return Err(Error::invalid("noise_std must be non-negative and background in [0, 1]"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GtBox {
    pub object: usize,
    pub class_id: usize,
    pub bbox: BBox,
}

/// A synthetic video with per-frame annotations.
#[derive(Clone, Debug, PartialEq)]
pub struct Clip {
    /// `[T, 1, H, W]`, values in `[0, 1]`.
    pub frames: Tensor<f32>,
    /// Ground truth per frame, in object order.
    pub boxes: Vec<Vec<GtBox>>,
    /// `(dy, dx)` per frame per object: position at `t+1` minus position at `t`.
    pub motion: Vec<Vec<(f64, f64)>>,
    pub degraded: Vec<bool>,
    /// Designated reference frame (clip centre), the only one that may be degraded.
    pub reference: usize,
    /// Occluder drawn on the reference frame, if any.
    pub occluder: Option<BBox>,
}

impl Clip {
    pub fn len(&self) -> usize {
        self.frames.dims()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn height(&self) -> usize {
        self.frames.dims()[2]
    }

    pub fn width(&self) -> usize {
        self.frames.dims()[3]
    }

    /// Frame `t` as a `[1, H, W]` tensor.
    pub fn frame<T: Scalar>(&self, t: usize) -> Tensor<T> {
        let (h, w) = (self.height(), self.width());
        let px = &self.frames.data()[t * h * w..(t + 1) * h * w];
        Tensor::from_parts(vec![1, h, w], px.iter().map(|&v| T::from_f64_lossy(v as f64)).collect())
    }

    pub fn frame_tensors<T: Scalar>(&self) -> Vec<Tensor<T>> {
        (0..self.len()).map(|t| self.frame(t)).collect()
    }

    /// A clip of the same length whose every frame (and annotation) is a copy of frame `t`.
    pub fn frozen_at(&self, t: usize) -> Clip {
        let (h, w) = (self.height(), self.width());
        let px = &self.frames.data()[t * h * w..(t + 1) * h * w];
        let n = self.len();
        let mut data = Vec::with_capacity(n * h * w);
        for _ in 0..n {
            data.extend_from_slice(px);
        }
        Clip {
            frames: Tensor::from_parts(vec![n, 1, h, w], data),
            boxes: vec![self.boxes[t].clone(); n],
            motion: vec![vec![(0.0, 0.0); self.boxes[t].len()]; n],
            degraded: vec![self.degraded[t]; n],
            reference: self.reference,
            occluder: self.occluder,
        }
    }

    /// Displacement of `object` from frame `from` to frame `to`.
    pub fn displacement(&self, object: usize, from: usize, to: usize) -> (f64, f64) {
        let (ay, ax) = self.boxes[from][object].bbox.center();
        let (by, bx) = self.boxes[to][object].bbox.center();
        (by - ay, bx - ax)
    }
}

#[derive(Clone, Copy, Debug)]
struct Object {
    shape: Shape,
    size: usize,
    y: i64,
    x: i64,
    vy: i64,
    vx: i64,
    intensity: f32,
}

impl Object {
    fn rect(&self) -> PixelRect {
        PixelRect {
            y0: self.y as usize,
            x0: self.x as usize,
            y1: self.y as usize + self.size,
            x1: self.x as usize + self.size,
        }
    }

    fn step(&mut self, h: usize, w: usize) {
        let (ny, nvy) = bounce(self.y + self.vy, self.vy, (h - self.size) as i64);
        let (nx, nvx) = bounce(self.x + self.vx, self.vx, (w - self.size) as i64);
        (self.y, self.vy, self.x, self.vx) = (ny, nvy, nx, nvx);
    }
}

/// Reflects `pos` into `[0, max]`, flipping the velocity on each bounce.
fn bounce(mut pos: i64, mut v: i64, max: i64) -> (i64, i64) {
    if max == 0 {
        return (0, v);
    }
    loop {
        if pos < 0 {
            pos = -pos;
            v = -v;
        } else if pos > max {
            pos = 2 * max - pos;
            v = -v;
        } else {
            return (pos, v);
        }
    }
}

fn render(objects: &[Object], h: usize, w: usize, background: f32) -> Frame {
    let mut f = Frame::filled(h, w, background);
    for o in objects {
        for r in 0..o.size {
            for c in 0..o.size {
                if o.shape.covers(r, c, o.size) {
                    f.set(o.y as usize + r, o.x as usize + c, o.intensity);
                }
            }
        }
    }
    f
}

/// Bounding rectangle of an object's own rendered mask.
pub fn mask_bbox(shape: Shape, size: usize, y: usize, x: usize) -> BBox {
    let (mut r0, mut c0, mut r1, mut c1) = (usize::MAX, usize::MAX, 0, 0);
    for r in 0..size {
        for c in 0..size {
            if shape.covers(r, c, size) {
                r0 = r0.min(r);
                c0 = c0.min(c);
                r1 = r1.max(r + 1);
                c1 = c1.max(c + 1);
            }
        }
    }
    BBox::new((x + c0) as f64, (y + r0) as f64, (x + c1) as f64, (y + r1) as f64)
}

fn spawn(config: &ClipConfig, rng: &mut ChaCha8Rng) -> Result<Vec<Object>> {
    let n = rng.gen_range(config.min_objects..=config.max_objects);
    let (smin, smax) = (config.object_size.0 / 2, config.object_size.1 / 2);
    let mut objects: Vec<Object> = Vec::with_capacity(n);
    for _ in 0..n {
        let mut placed = false;
        for _ in 0..SPAWN_ATTEMPTS {
            let size = 2 * rng.gen_range(smin..=smax);
            if size > config.image_h || size > config.image_w {
                return Err(Error::invalid(format!(
                    "object size {size} does not fit a {}x{} frame",
                    config.image_h, config.image_w
                )));
            }
            let y = rng.gen_range(0..=(config.image_h - size) as i64);
            let x = rng.gen_range(0..=(config.image_w - size) as i64);
            let shape = Shape::ALL[rng.gen_range(0..3)];
            let (vy, vx) = loop {
                let vy = rng.gen_range(-config.speed.1..=config.speed.1);
                let vx = rng.gen_range(-config.speed.1..=config.speed.1);
                if vy.abs().max(vx.abs()) >= config.speed.0 {
                    break (vy, vx);
                }
            };
            let intensity = rng.gen_range(0.55f32..0.95);
            let cand = Object {
                shape,
                size,
                y,
                x,
                vy,
                vx,
                intensity,
            };
            let clear = objects.iter().all(|o| {
                let (a, b) = (o.rect(), cand.rect());
                a.y1 + 2 <= b.y0 || b.y1 + 2 <= a.y0 || a.x1 + 2 <= b.x0 || b.x1 + 2 <= a.x0
            });
            if clear {
                objects.push(cand);
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(Error::invalid("could not place objects without overlap"));
        }
    }
    Ok(objects)
}

/// Renders one clip. Fully determined by `config` (including its seed).
///
/// Objects move with constant velocity and bounce off the borders. The
/// centre frame is the designated reference frame; it alone receives an
/// occluder and/or blur, each with its configured probability. Gaussian
/// noise is drawn per frame from a stream independent of the degradations.
pub fn generate_clip(config: &ClipConfig) -> Result<Clip> {
    config.validate()?;
    let (h, w, n) = (config.image_h, config.image_w, config.frames);
    let mut obj_rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut deg_rng = ChaCha8Rng::seed_from_u64(config.seed);
    deg_rng.set_stream(1);
    let noise = Normal::new(0.0, config.noise_std.max(f64::MIN_POSITIVE)).expect("valid std");

    let mut objects = spawn(config, &mut obj_rng)?;
    let reference = n / 2;
    let occlude = deg_rng.gen_bool(config.occlusion_prob);
    let blur = deg_rng.gen_bool(config.blur_prob);
    let target = deg_rng.gen_range(0..objects.len());
    let deg_seed: u64 = deg_rng.gen();

    let mut data = Vec::with_capacity(n * h * w);
    let mut boxes = Vec::with_capacity(n);
    let mut motion = Vec::with_capacity(n);
    let mut degraded = vec![false; n];
    let mut occluder = None;
    for t in 0..n {
        let frame_boxes: Vec<GtBox> = objects
            .iter()
            .enumerate()
            .map(|(i, o)| GtBox {
                object: i,
                class_id: o.shape.class_id(),
                bbox: mask_bbox(o.shape, o.size, o.y as usize, o.x as usize),
            })
            .collect();
        let mut frame = render(&objects, h, w, config.background);
        if t == reference && (occlude || blur) {
            if occlude {
                let kind = Degradation::Occlusion {
                    target: frame_boxes[target].bbox,
                    background: config.background,
                    coverage: None,
                };
                let (f, rect) = apply_degradation(&frame, kind, deg_seed);
                frame = f;
                occluder = rect.map(PixelRect::to_bbox);
            }
            if blur {
                frame = apply_degradation(&frame, Degradation::Blur, deg_seed).0;
            }
            degraded[t] = true;
        }
        let mut noise_rng = ChaCha8Rng::seed_from_u64(config.seed);
        noise_rng.set_stream(2 + t as u64);
        if config.noise_std > 0.0 {
            for v in frame.pixels.iter_mut() {
                *v = (*v + noise.sample(&mut noise_rng) as f32).clamp(0.0, 1.0);
            }
        }
        data.extend_from_slice(&frame.pixels);
        boxes.push(frame_boxes);

        let before: Vec<(i64, i64)> = objects.iter().map(|o| (o.y, o.x)).collect();
        for o in objects.iter_mut() {
            o.step(h, w);
        }
        motion.push(
            objects
                .iter()
                .zip(before)
                .map(|(o, (y, x))| ((o.y - y) as f64, (o.x - x) as f64))
                .collect(),
        );
    }
    Ok(Clip {
        frames: Tensor::from_parts(vec![n, 1, h, w], data),
        boxes,
        motion,
        degraded,
        reference,
        occluder,
    })
}

/// `count` clips with seeds `base.seed + i`.
pub fn generate_dataset(base: &ClipConfig, count: usize) -> Result<Vec<Clip>> {
    (0..count)
        .map(|i| {
            generate_clip(&ClipConfig {
                seed: base.seed.wrapping_add(i as u64),
                ..base.clone()
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bbox::iou;

    fn cfg(seed: u64) -> ClipConfig {
        ClipConfig {
            seed,
            ..Default::default()
        }
    }

    #[test]
    fn same_seed_same_clip() {
        assert_eq!(generate_clip(&cfg(3)).unwrap(), generate_clip(&cfg(3)).unwrap());
        assert_ne!(generate_clip(&cfg(3)).unwrap().frames, generate_clip(&cfg(4)).unwrap().frames);
    }

    #[test]
    fn constant_velocity_advances_boxes() {
        let mut o = Object {
            shape: Shape::Square,
            size: 10,
            y: 20,
            x: 5,
            vy: 0,
            vx: 2,
            intensity: 0.9,
        };
        let mut xs = vec![];
        for _ in 0..3 {
            xs.push(mask_bbox(o.shape, o.size, o.y as usize, o.x as usize).x1);
            o.step(64, 64);
        }
        assert_eq!(xs, vec![5.0, 7.0, 9.0]);
    }

    #[test]
    fn bounce_reflects() {
        assert_eq!(bounce(-3, -4, 50), (3, 4));
        assert_eq!(bounce(53, 4, 50), (47, -4));
        assert_eq!(bounce(10, 4, 50), (10, 4));
    }

    #[test]
    fn shapes_fill_their_boxes() {
        for shape in Shape::ALL {
            for size in [2, 4, 10, 16] {
                assert_eq!(mask_bbox(shape, size, 3, 5), BBox::new(5.0, 3.0, 5.0 + size as f64, 3.0 + size as f64));
            }
        }
    }

    #[test]
    fn boxes_bound_rendered_objects_and_motion_is_exact() {
        for seed in 0..20 {
            let clip = generate_clip(&ClipConfig {
                noise_std: 0.0,
                min_objects: 1,
                max_objects: 1,
                occlusion_prob: 0.0,
                blur_prob: 0.0,
                ..cfg(seed)
            })
            .unwrap();
            for t in 0..clip.len() {
                for b in &clip.boxes[t] {
                    // recompute the mask bbox from pixels inside the stored box
                    let f = clip.frame::<f64>(t);
                    let (mut y0, mut x0, mut y1, mut x1) = (usize::MAX, usize::MAX, 0, 0);
                    for y in b.bbox.y1 as usize..b.bbox.y2 as usize {
                        for x in b.bbox.x1 as usize..b.bbox.x2 as usize {
                            if f.at(&[0, y, x]) > 0.3 {
                                y0 = y0.min(y);
                                x0 = x0.min(x);
                                y1 = y1.max(y + 1);
                                x1 = x1.max(x + 1);
                            }
                        }
                    }
                    let recomputed = BBox::new(x0 as f64, y0 as f64, x1 as f64, y1 as f64);
                    assert!(iou(&recomputed, &b.bbox) >= 0.95, "seed {seed} frame {t}");
                }
                if t + 1 < clip.len() {
                    for (o, &(dy, dx)) in clip.motion[t].iter().enumerate() {
                        assert_eq!(clip.displacement(o, t, t + 1), (dy, dx));
                    }
                }
            }
        }
    }

    #[test]
    fn occlusion_with_probability_one_always_covers_half_an_object() {
        for seed in 0..30 {
            let clip = generate_clip(&ClipConfig {
                occlusion_prob: 1.0,
                blur_prob: 0.0,
                ..cfg(seed)
            })
            .unwrap();
            let occ = clip.occluder.expect("occluder present");
            let covered = clip.boxes[clip.reference]
                .iter()
                .map(|b| b.bbox.intersection(&occ) / b.bbox.area())
                .fold(0.0, f64::max);
            assert!(covered >= 0.5, "seed {seed}: {covered}");
            assert!(clip.degraded[clip.reference]);
        }
    }

    #[test]
    fn only_reference_frame_is_degraded() {
        for seed in 0..10 {
            let clean = generate_clip(&ClipConfig {
                occlusion_prob: 0.0,
                blur_prob: 0.0,
                ..cfg(seed)
            })
            .unwrap();
            let dirty = generate_clip(&ClipConfig {
                occlusion_prob: 1.0,
                blur_prob: 1.0,
                ..cfg(seed)
            })
            .unwrap();
            for t in 0..clean.len() {
                let same = clean.frame::<f32>(t) == dirty.frame::<f32>(t);
                assert_eq!(same, t != dirty.reference, "seed {seed} frame {t}");
                assert_eq!(dirty.degraded[t], t == dirty.reference);
            }
        }
    }

    #[test]
    fn impossible_spawn_is_an_error() {
        let c = ClipConfig {
            image_h: 8,
            image_w: 8,
            ..cfg(0)
        };
        assert!(generate_clip(&c).is_err());
        assert!(generate_clip(&ClipConfig { frames: 0, ..cfg(0) }).is_err());
    }
}
