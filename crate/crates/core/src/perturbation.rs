//! Weak (geometric), strong (photometric) and feature-level perturbations.

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::datamodel::{Image, LabelMask};
use crate::segnet::FeaturePyramid;
use crate::tensor::{Real, Tensor};

pub const FEATURE_DROP_PROB: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WeakConfig {
    /// Bound of the small extra rotation, in degrees.
    pub max_angle_deg: f64,
    pub flip_prob: f64,
}

impl Default for WeakConfig {
    fn default() -> Self {
        WeakConfig {
            max_angle_deg: 20.0,
            flip_prob: 0.5,
        }
    }
}

/// One draw of the weak perturbation. Applied as: horizontal flip, vertical
/// flip, `quarter_turns` counter-clockwise 90° turns, then a rotation by
/// `angle_deg` about the image centre with reflect padding.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeakParams {
    pub flip_h: bool,
    pub flip_v: bool,
    pub quarter_turns: u8,
    pub angle_deg: f64,
}

impl WeakParams {
    pub const IDENTITY: WeakParams = WeakParams {
        flip_h: false,
        flip_v: false,
        quarter_turns: 0,
        angle_deg: 0.0,
    };

    /// Non-square images only draw 0° or 180° turns so the shape is kept.
    pub fn sample(cfg: &WeakConfig, height: usize, width: usize, rng: &mut dyn RngCore) -> Self {
        let flip_h = rng.random_bool(cfg.flip_prob);
        let flip_v = rng.random_bool(cfg.flip_prob);
        let quarter_turns = if height == width {
            rng.random_range(0..4u8)
        } else {
            2 * rng.random_range(0..2u8)
        };
        let angle_deg = if cfg.max_angle_deg > 0.0 {
            rng.random_range(-cfg.max_angle_deg..=cfg.max_angle_deg)
        } else {
            0.0
        };
        WeakParams {
            flip_h,
            flip_v,
            quarter_turns,
            angle_deg,
        }
    }
}

fn flip_h<T: Copy>(src: &[T], h: usize, w: usize) -> Vec<T> {
    (0..h * w).map(|i| src[(i / w) * w + (w - 1 - i % w)]).collect()
}

fn flip_v<T: Copy>(src: &[T], h: usize, w: usize) -> Vec<T> {
    (0..h * w).map(|i| src[(h - 1 - i / w) * w + i % w]).collect()
}

/// Counter-clockwise quarter turn; output is `w × h`.
fn rot90<T: Copy>(src: &[T], h: usize, w: usize) -> Vec<T> {
    let (oh, ow) = (w, h);
    (0..oh * ow)
        .map(|i| {
            let (y, x) = (i / ow, i % ow);
            src[x * w + (w - 1 - y)]
        })
        .collect()
}

/// Half-sample symmetric reflection of a continuous index into `[0, n−1]`.
pub(crate) fn reflect(u: f64, n: usize) -> f64 {
    let n = n as f64;
    let period = 2.0 * n;
    let mut v = (u + 0.5).rem_euclid(period);
    if v >= n {
        v = period - v;
    }
    (v - 0.5).clamp(0.0, n - 1.0)
}

/// Source coordinates of output pixel `(y, x)` under rotation by `deg`.
fn rotate_source(y: usize, x: usize, h: usize, w: usize, deg: f64) -> (f64, f64) {
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let (s, c) = deg.to_radians().sin_cos();
    let (dy, dx) = (y as f64 - cy, x as f64 - cx);
    // Inverse map of a counter-clockwise rotation in image coordinates (y down).
    let sx = c * dx - s * dy + cx;
    let sy = s * dx + c * dy + cy;
    (reflect(sy, h), reflect(sx, w))
}

fn rotate_bilinear(src: &[f32], h: usize, w: usize, deg: f64) -> Vec<f32> {
    let mut out = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let (sy, sx) = rotate_source(y, x, h, w, deg);
            let (y0, x0) = (sy.floor() as usize, sx.floor() as usize);
            let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
            let (fy, fx) = (sy - y0 as f64, sx - x0 as f64);
            let at = |yy: usize, xx: usize| src[yy * w + xx] as f64;
            let top = at(y0, x0) * (1.0 - fx) + at(y0, x1) * fx;
            let bot = at(y1, x0) * (1.0 - fx) + at(y1, x1) * fx;
            out.push((top * (1.0 - fy) + bot * fy) as f32);
        }
    }
    out
}

fn rotate_nearest<T: Copy>(src: &[T], h: usize, w: usize, deg: f64) -> Vec<T> {
    let mut out = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let (sy, sx) = rotate_source(y, x, h, w, deg);
            out.push(src[sy.round() as usize * w + sx.round() as usize]);
        }
    }
    out
}

/// Geometric part shared by images and masks; `rotate` handles the small angle.
fn transform<T: Copy>(
    src: &[T],
    h: usize,
    w: usize,
    p: &WeakParams,
    rotate: impl Fn(&[T], usize, usize, f64) -> Vec<T>,
) -> (Vec<T>, usize, usize) {
    let mut v = src.to_vec();
    let (mut h, mut w) = (h, w);
    if p.flip_h {
        v = flip_h(&v, h, w);
    }
    if p.flip_v {
        v = flip_v(&v, h, w);
    }
    for _ in 0..p.quarter_turns % 4 {
        v = rot90(&v, h, w);
        std::mem::swap(&mut h, &mut w);
    }
    if p.angle_deg != 0.0 {
        v = rotate(&v, h, w, p.angle_deg);
    }
    (v, h, w)
}

pub fn apply_weak_image(image: &Image, p: &WeakParams) -> Image {
    let (h, w) = image.dims();
    let (v, oh, ow) = transform(image.pixels(), h, w, p, rotate_bilinear);
    assert_eq!((oh, ow), (h, w), "quarter turn of a non-square image");
    image.with_pixels(v)
}

pub fn apply_weak_mask(mask: &LabelMask, p: &WeakParams) -> LabelMask {
    let (h, w) = mask.dims();
    let (v, oh, ow) = transform(mask.classes(), h, w, p, rotate_nearest);
    assert_eq!((oh, ow), (h, w), "quarter turn of a non-square mask");
    mask.with_classes(v)
}

/// Random rotation and flipping. The mask, when given, receives the same
/// draw with nearest-neighbour sampling.
pub fn weak(
    image: &Image,
    mask: Option<&LabelMask>,
    cfg: &WeakConfig,
    rng: &mut dyn RngCore,
) -> (Image, Option<LabelMask>, WeakParams) {
    let p = WeakParams::sample(cfg, image.height(), image.width(), rng);
    (apply_weak_image(image, &p), mask.map(|m| apply_weak_mask(m, &p)), p)
}

/// Photometric factors of one strong draw. A factor of exactly 1 is a no-op.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StrongParams {
    pub brightness: f64,
    pub contrast: f64,
    pub gamma: f64,
}

impl StrongParams {
    pub const IDENTITY: StrongParams = StrongParams {
        brightness: 1.0,
        contrast: 1.0,
        gamma: 1.0,
    };

    pub fn sample(alpha: f64, rng: &mut dyn RngCore) -> Self {
        assert!(alpha >= 0.0, "intensity factor must be nonnegative");
        if alpha == 0.0 {
            return Self::IDENTITY;
        }
        let hi = 1.0 + alpha;
        StrongParams {
            brightness: rng.random_range((1.0 - alpha).max(0.0)..=hi),
            contrast: rng.random_range((1.0 - alpha).max(0.0)..=hi),
            gamma: rng.random_range((1.0 - alpha).max(0.1)..=hi),
        }
    }
}

/// Brightness `x·b`, contrast `(x − mean)·c + mean`, gamma `x^g`, clamped to
/// `[0, 1]` after each step.
pub fn apply_strong(image: &Image, p: &StrongParams) -> Image {
    let mut v: Vec<f64> = image.pixels().iter().map(|&x| x as f64).collect();
    if p.brightness != 1.0 {
        v.iter_mut().for_each(|x| *x = (*x * p.brightness).clamp(0.0, 1.0));
    }
    if p.contrast != 1.0 {
        let mean = v.iter().sum::<f64>() / v.len() as f64;
        v.iter_mut()
            .for_each(|x| *x = ((*x - mean) * p.contrast + mean).clamp(0.0, 1.0));
    }
    if p.gamma != 1.0 {
        v.iter_mut().for_each(|x| *x = x.powf(p.gamma).clamp(0.0, 1.0));
    }
    if *p == StrongParams::IDENTITY {
        return image.clone();
    }
    image.with_pixels(v.into_iter().map(|x| x as f32).collect())
}

/// Colour jittering with intensity factor `alpha`.
pub fn strong(image: &Image, alpha: f64, rng: &mut dyn RngCore) -> (Image, StrongParams) {
    let p = StrongParams::sample(alpha, rng);
    (apply_strong(image, &p), p)
}

/// Channel keep-masks, one entry per `(channel, sample)` plane of each level.
#[derive(Clone, Debug, PartialEq)]
pub struct FeaturePerturbParams {
    pub drop_prob: f64,
    pub keep: Vec<Vec<bool>>,
}

impl FeaturePerturbParams {
    pub fn sample(shapes: &[[usize; 4]], drop_prob: f64, rng: &mut dyn RngCore) -> Self {
        let keep = shapes
            .iter()
            .map(|s| (0..s[0] * s[1]).map(|_| !rng.random_bool(drop_prob)).collect())
            .collect();
        FeaturePerturbParams { drop_prob, keep }
    }

    /// Every plane kept (scaled by `1/(1−p)`).
    pub fn keep_all(shapes: &[[usize; 4]], drop_prob: f64) -> Self {
        FeaturePerturbParams {
            drop_prob,
            keep: shapes.iter().map(|s| vec![true; s[0] * s[1]]).collect(),
        }
    }

    /// Zeroes dropped planes and scales kept ones. The map is linear, so the
    /// same call also back-propagates a gradient pyramid.
    pub fn apply<F: Real>(&self, pyramid: &FeaturePyramid<F>) -> FeaturePyramid<F> {
        assert_eq!(pyramid.levels.len(), self.keep.len(), "pyramid depth mismatch");
        let scale = F::lit(1.0 / (1.0 - self.drop_prob));
        let levels = pyramid
            .levels
            .iter()
            .zip(&self.keep)
            .map(|(t, keep)| {
                assert_eq!(t.c * t.n, keep.len(), "pyramid level shape mismatch");
                let mut out: Tensor<F> = t.clone();
                let hw = t.hw();
                for (plane, &k) in out.data.chunks_mut(hw).zip(keep) {
                    if k {
                        plane.iter_mut().for_each(|v| *v *= scale);
                    } else {
                        plane.fill(F::zero());
                    }
                }
                out
            })
            .collect();
        FeaturePyramid { levels }
    }
}

/// Channel dropout with `p = 0.5` at every pyramid level.
pub fn feature_perturb<F: Real>(
    pyramid: &FeaturePyramid<F>,
    rng: &mut dyn RngCore,
) -> (FeaturePyramid<F>, FeaturePerturbParams) {
    let p = FeaturePerturbParams::sample(&pyramid.shapes(), FEATURE_DROP_PROB, rng);
    (p.apply(pyramid), p)
}
