//! Copy-transform-paste synthesis of labelled images from one exemplar.
//!
//! Each connected foreground component of the exemplar is cut out, given its
//! own rotation, scale, flip and translation, and pasted over a transformed
//! background taken from the unlabeled pool. Instances are pasted in
//! ascending class order, so later classes win on overlap.

use std::collections::VecDeque;

use rand::{Rng, RngCore};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::datamodel::{ExemplarDataset, Image, LabelMask, SyntheticDataset, UnlabeledDataset};
use crate::error::{Error, Result};
use crate::perturbation::reflect;
use crate::rng::{substream, tag};

/// Redraws allowed when a sampled placement does not fit on the canvas.
pub const MAX_PLACEMENT_RETRIES: usize = 10;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeometricParams {
    pub rotation_deg: f64,
    pub flip_h: bool,
    pub flip_v: bool,
    pub scale: f64,
    /// Offset of the transformed centre from the original one, in pixels.
    pub dx: f64,
    pub dy: f64,
}

impl GeometricParams {
    pub const IDENTITY: GeometricParams = GeometricParams {
        rotation_deg: 0.0,
        flip_h: false,
        flip_v: false,
        scale: 1.0,
        dx: 0.0,
        dy: 0.0,
    };

    /// Maps an output position to its source position, both relative to the
    /// respective centres: undo translation, scale, rotation, then flips.
    fn inverse(&self, y: f64, x: f64) -> (f64, f64) {
        let (s, c) = self.rotation_deg.to_radians().sin_cos();
        let (uy, ux) = ((y - self.dy) / self.scale, (x - self.dx) / self.scale);
        let mut vx = c * ux + s * uy;
        let mut vy = -s * ux + c * uy;
        if self.flip_h {
            vx = -vx;
        }
        if self.flip_v {
            vy = -vy;
        }
        (vy, vx)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct IntensityParams {
    pub brightness_delta: f64,
    pub contrast_factor: f64,
    pub noise_sigma: f64,
    pub noise_seed: u64,
}

impl IntensityParams {
    pub const IDENTITY: IntensityParams = IntensityParams {
        brightness_delta: 0.0,
        contrast_factor: 1.0,
        noise_sigma: 0.0,
        noise_seed: 0,
    };

    /// `clamp((x − 0.5)·contrast + 0.5 + brightness + noise, 0, 1)`.
    pub fn apply(&self, image: &Image) -> Image {
        if *self == Self::IDENTITY {
            return image.clone();
        }
        let mut noise_rng = substream(self.noise_seed, &[]);
        let normal = Normal::new(0.0, self.noise_sigma.max(0.0)).expect("finite sigma");
        let out = image
            .pixels()
            .iter()
            .map(|&x| {
                let n = if self.noise_sigma > 0.0 { normal.sample(&mut noise_rng) } else { 0.0 };
                ((x as f64 - 0.5) * self.contrast_factor + 0.5 + self.brightness_delta + n) as f32
            })
            .collect();
        image.with_pixels(out)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthesisConfig {
    pub per_background: usize,
    pub max_rotation_deg: f64,
    pub scale_min: f64,
    pub scale_max: f64,
    pub flip_prob: f64,
    pub brightness: f64,
    pub contrast: f64,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for SynthesisConfig {
    fn default() -> Self {
        SynthesisConfig {
            per_background: 10,
            max_rotation_deg: 20.0,
            scale_min: 0.8,
            scale_max: 1.25,
            flip_prob: 0.5,
            brightness: 0.1,
            contrast: 0.1,
            noise_sigma: 0.01,
            seed: 0,
        }
    }
}

impl SynthesisConfig {
    /// Setting used for cardiac MRI (15 images per background).
    pub fn acdc() -> Self {
        SynthesisConfig {
            per_background: 15,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if self.per_background == 0 {
            return bad("per_background must be at least 1");
        }
        if !(self.scale_min > 0.0 && self.scale_min <= self.scale_max) {
            return bad("scale range must satisfy 0 < scale_min <= scale_max");
        }
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return bad("flip_prob must lie in [0, 1]");
        }
        if self.max_rotation_deg < 0.0 || self.brightness < 0.0 || !(0.0..1.0).contains(&self.contrast) || self.noise_sigma < 0.0 {
            return bad("rotation, brightness and noise must be nonnegative and contrast in [0, 1)");
        }
        Ok(())
    }
}

/// One connected component of one foreground class, cropped to its box.
#[derive(Clone, Debug, PartialEq)]
pub struct Instance {
    pub class_id: u8,
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
    /// Box-local membership, row-major.
    pub support: Vec<bool>,
}

impl Instance {
    pub fn area(&self) -> usize {
        self.support.iter().filter(|&&s| s).count()
    }

    fn centre(&self) -> (f64, f64) {
        (
            self.top as f64 + (self.height as f64 - 1.0) / 2.0,
            self.left as f64 + (self.width as f64 - 1.0) / 2.0,
        )
    }

    /// Half height and half width of the transformed box.
    fn half_extent(&self, rotation_deg: f64, scale: f64) -> (f64, f64) {
        let (s, c) = rotation_deg.to_radians().sin_cos();
        let (a, b) = (self.height as f64 / 2.0, self.width as f64 / 2.0);
        (
            scale * (a * c.abs() + b * s.abs()),
            scale * (a * s.abs() + b * c.abs()),
        )
    }

    fn contains(&self, y: isize, x: isize) -> bool {
        let (ty, tx) = (y - self.top as isize, x - self.left as isize);
        ty >= 0
            && tx >= 0
            && (ty as usize) < self.height
            && (tx as usize) < self.width
            && self.support[ty as usize * self.width + tx as usize]
    }

    /// Canvas pixels covered by this instance under `g`, each paired with
    /// its source pixel in the exemplar.
    pub fn transformed_support(&self, g: &GeometricParams, h: usize, w: usize) -> Vec<(usize, usize, usize, usize)> {
        let (cy, cx) = self.centre();
        let (ry, rx) = self.half_extent(g.rotation_deg, g.scale);
        let (ncy, ncx) = (cy + g.dy, cx + g.dx);
        let y0 = (ncy - ry - 1.0).floor().max(0.0) as usize;
        let x0 = (ncx - rx - 1.0).floor().max(0.0) as usize;
        let y1 = ((ncy + ry + 1.0).ceil().max(-1.0) as isize).min(h as isize - 1);
        let x1 = ((ncx + rx + 1.0).ceil().max(-1.0) as isize).min(w as isize - 1);
        let mut out = Vec::new();
        for y in y0 as isize..=y1 {
            for x in x0 as isize..=x1 {
                let (vy, vx) = g.inverse(y as f64 - cy, x as f64 - cx);
                let (sy, sx) = ((cy + vy).round() as isize, (cx + vx).round() as isize);
                if self.contains(sy, sx) {
                    out.push((y as usize, x as usize, sy as usize, sx as usize));
                }
            }
        }
        out
    }
}

/// 8-connected components of every foreground class, ordered by class id
/// then by first pixel in scan order.
pub fn extract_instances(mask: &LabelMask) -> Result<Vec<Instance>> {
    let (h, w) = mask.dims();
    let classes = mask.classes();
    let mut seen = vec![false; h * w];
    let mut found = Vec::new();
    for start in 0..h * w {
        let k = classes[start];
        if k == 0 || seen[start] {
            continue;
        }
        let mut pixels = Vec::new();
        let mut queue = VecDeque::from([start]);
        seen[start] = true;
        while let Some(p) = queue.pop_front() {
            pixels.push(p);
            let (y, x) = ((p / w) as isize, (p % w) as isize);
            for dy in -1..=1 {
                for dx in -1..=1 {
                    let (ny, nx) = (y + dy, x + dx);
                    if ny < 0 || nx < 0 || ny >= h as isize || nx >= w as isize {
                        continue;
                    }
                    let q = ny as usize * w + nx as usize;
                    if !seen[q] && classes[q] == k {
                        seen[q] = true;
                        queue.push_back(q);
                    }
                }
            }
        }
        let top = pixels.iter().map(|p| p / w).min().unwrap();
        let bottom = pixels.iter().map(|p| p / w).max().unwrap();
        let left = pixels.iter().map(|p| p % w).min().unwrap();
        let right = pixels.iter().map(|p| p % w).max().unwrap();
        let (bh, bw) = (bottom - top + 1, right - left + 1);
        let mut support = vec![false; bh * bw];
        for p in pixels {
            support[(p / w - top) * bw + (p % w - left)] = true;
        }
        found.push(Instance {
            class_id: k,
            top,
            left,
            height: bh,
            width: bw,
            support,
        });
    }
    if found.is_empty() {
        return Err(Error::Validation("exemplar mask has no foreground".into()));
    }
    found.sort_by_key(|i| i.class_id);
    Ok(found)
}

/// Every random choice needed to build one synthetic image.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthesisPlan {
    /// Applied to the whole background about the canvas centre; translation is ignored.
    pub background: GeometricParams,
    /// One entry per instance; `None` skips the instance.
    pub instances: Vec<Option<GeometricParams>>,
    pub intensity: IntensityParams,
}

impl SynthesisPlan {
    pub fn identity(instances: usize) -> Self {
        SynthesisPlan {
            background: GeometricParams::IDENTITY,
            instances: vec![Some(GeometricParams::IDENTITY); instances],
            intensity: IntensityParams::IDENTITY,
        }
    }
}

fn sample_pose(cfg: &SynthesisConfig, rng: &mut dyn RngCore) -> GeometricParams {
    let r = cfg.max_rotation_deg;
    GeometricParams {
        rotation_deg: if r > 0.0 { rng.random_range(-r..=r) } else { 0.0 },
        flip_h: rng.random_bool(cfg.flip_prob),
        flip_v: rng.random_bool(cfg.flip_prob),
        scale: if cfg.scale_max > cfg.scale_min {
            rng.random_range(cfg.scale_min..=cfg.scale_max)
        } else {
            cfg.scale_min
        },
        dx: 0.0,
        dy: 0.0,
    }
}

/// Places the instance uniformly so that its transformed box lies inside the
/// canvas. Returns `None` after the retry budget is exhausted.
pub fn sample_placement(
    inst: &Instance,
    h: usize,
    w: usize,
    cfg: &SynthesisConfig,
    rng: &mut dyn RngCore,
) -> Option<GeometricParams> {
    let (cy, cx) = inst.centre();
    for _ in 0..=MAX_PLACEMENT_RETRIES {
        let mut g = sample_pose(cfg, rng);
        let (ry, rx) = inst.half_extent(g.rotation_deg, g.scale);
        let (ylo, yhi) = (ry - 0.5, h as f64 - 0.5 - ry);
        let (xlo, xhi) = (rx - 0.5, w as f64 - 0.5 - rx);
        if ylo > yhi || xlo > xhi {
            continue;
        }
        g.dy = rng.random_range(ylo..=yhi) - cy;
        g.dx = rng.random_range(xlo..=xhi) - cx;
        return Some(g);
    }
    None
}

/// Draws a full plan. Instances that cannot be placed are left out and
/// reported by index.
pub fn sample_plan(
    instances: &[Instance],
    h: usize,
    w: usize,
    cfg: &SynthesisConfig,
    rng: &mut dyn RngCore,
) -> (SynthesisPlan, Vec<usize>) {
    let background = sample_pose(cfg, rng);
    let mut skipped = Vec::new();
    let placements = instances
        .iter()
        .enumerate()
        .map(|(i, inst)| {
            let g = sample_placement(inst, h, w, cfg, rng);
            if g.is_none() {
                skipped.push(i);
            }
            g
        })
        .collect();
    let uniform = |rng: &mut dyn RngCore, a: f64| if a > 0.0 { rng.random_range(-a..=a) } else { 0.0 };
    let intensity = IntensityParams {
        brightness_delta: uniform(rng, cfg.brightness),
        contrast_factor: 1.0 + uniform(rng, cfg.contrast),
        noise_sigma: cfg.noise_sigma,
        noise_seed: rng.next_u64(),
    };
    (
        SynthesisPlan {
            background,
            instances: placements,
            intensity,
        },
        skipped,
    )
}

/// Whole-canvas warp with bilinear sampling and reflect padding.
fn warp_background(image: &Image, g: &GeometricParams) -> Image {
    let centred = GeometricParams { dx: 0.0, dy: 0.0, ..*g };
    if centred == GeometricParams::IDENTITY {
        return image.clone();
    }
    let (h, w) = image.dims();
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let src = image.pixels();
    let mut out = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let (vy, vx) = centred.inverse(y as f64 - cy, x as f64 - cx);
            let (sy, sx) = (reflect(cy + vy, h), reflect(cx + vx, w));
            let (y0, x0) = (sy.floor() as usize, sx.floor() as usize);
            let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
            let (fy, fx) = (sy - y0 as f64, sx - x0 as f64);
            let at = |yy: usize, xx: usize| src[yy * w + xx] as f64;
            let top = at(y0, x0) * (1.0 - fx) + at(y0, x1) * fx;
            let bot = at(y1, x0) * (1.0 - fx) + at(y1, x1) * fx;
            out.push((top * (1.0 - fy) + bot * fy) as f32);
        }
    }
    image.with_pixels(out)
}

/// A synthetic image with its mask. `skipped` lists instances that landed
/// entirely outside the canvas or were not placed.
#[derive(Clone, Debug, PartialEq)]
pub struct Composite {
    pub image: Image,
    pub mask: LabelMask,
    pub skipped: Vec<usize>,
}

pub fn synthesize_one(
    exemplar: &ExemplarDataset,
    instances: &[Instance],
    background: &Image,
    plan: &SynthesisPlan,
) -> Result<Composite> {
    let (h, w) = exemplar.image.dims();
    if background.dims() != (h, w) {
        return Err(Error::Validation(format!(
            "background {:?} does not match exemplar {:?}",
            background.dims(),
            (h, w)
        )));
    }
    if plan.instances.len() != instances.len() {
        return Err(Error::Validation("plan and instance counts differ".into()));
    }
    let source = plan.intensity.apply(&exemplar.image);
    let base = warp_background(&plan.intensity.apply(background), &plan.background);
    let mut pixels = base.pixels().to_vec();
    let mut classes = vec![0u8; h * w];
    let mut skipped = Vec::new();
    for (i, (inst, g)) in instances.iter().zip(&plan.instances).enumerate() {
        let Some(g) = g else {
            skipped.push(i);
            continue;
        };
        let covered = inst.transformed_support(g, h, w);
        if covered.is_empty() {
            log::warn!("instance {i} (class {}) falls outside the canvas; skipped", inst.class_id);
            skipped.push(i);
            continue;
        }
        for (y, x, sy, sx) in covered {
            pixels[y * w + x] = source.at(sy, sx);
            classes[y * w + x] = inst.class_id;
        }
    }
    Ok(Composite {
        image: base.with_pixels(pixels),
        mask: exemplar.mask.with_classes(classes),
        skipped,
    })
}

/// `per_background` composites for every pool image; item `i` draws from
/// its own stream so the result does not depend on evaluation order.
pub fn build_synthetic_dataset(
    exemplar: &ExemplarDataset,
    pool: &UnlabeledDataset,
    cfg: &SynthesisConfig,
) -> Result<SyntheticDataset> {
    cfg.validate()?;
    let instances = extract_instances(&exemplar.mask)?;
    let (h, w) = exemplar.image.dims();
    let mut items = Vec::with_capacity(pool.len() * cfg.per_background);
    for (b, background) in pool.images().iter().enumerate() {
        for j in 0..cfg.per_background {
            let index = (b * cfg.per_background + j) as u64;
            let mut rng = substream(cfg.seed, &[tag::SYNTHESIS, index]);
            let (plan, unplaced) = sample_plan(&instances, h, w, cfg, &mut rng);
            for i in unplaced {
                log::warn!(
                    "synthetic item {index}: instance {i} did not fit after {MAX_PLACEMENT_RETRIES} retries; skipped"
                );
            }
            let c = synthesize_one(exemplar, &instances, background, &plan)?;
            items.push((c.image, c.mask));
        }
    }
    SyntheticDataset::new(items)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn exemplar() -> ExemplarDataset {
        // Two class-1 blobs and one class-2 square on a 16×16 canvas.
        let (h, w) = (16, 16);
        let mut c = vec![0u8; h * w];
        for (y, x) in [(1, 1), (1, 2), (2, 1), (2, 2), (3, 3)] {
            c[y * w + x] = 1;
        }
        for y in 10..13 {
            c[y * w + 12] = 1;
        }
        for y in 6..9 {
            for x in 6..9 {
                c[y * w + x] = 2;
            }
        }
        let px = (0..h * w).map(|i| ((i * 37) % 101) as f32 / 100.0).collect();
        ExemplarDataset::new(Image::new(px, h, w).unwrap(), LabelMask::new(c, h, w, 3).unwrap()).unwrap()
    }

    #[test]
    fn components_use_eight_connectivity() {
        let ex = exemplar();
        let inst = extract_instances(&ex.mask).unwrap();
        assert_eq!(inst.len(), 3);
        assert_eq!((inst[0].class_id, inst[0].area()), (1, 5));
        assert_eq!((inst[1].class_id, inst[1].area()), (1, 3));
        assert_eq!((inst[2].class_id, inst[2].area()), (2, 9));
    }

    #[test]
    fn union_reproduces_foreground() {
        let ex = exemplar();
        let inst = extract_instances(&ex.mask).unwrap();
        let mut c = vec![0u8; 256];
        for i in &inst {
            for (y, x, _, _) in i.transformed_support(&GeometricParams::IDENTITY, 16, 16) {
                c[y * 16 + x] = i.class_id;
            }
        }
        assert_eq!(c, ex.mask.classes());
    }

    #[test]
    fn empty_foreground_is_rejected() {
        let m = LabelMask::background(16, 16, 2).unwrap();
        assert!(matches!(extract_instances(&m), Err(Error::Validation(_))));
    }

    #[test]
    fn identity_plan_pastes_exemplar() {
        let ex = exemplar();
        let inst = extract_instances(&ex.mask).unwrap();
        let bg = Image::filled(0.25, 16, 16).unwrap();
        let c = synthesize_one(&ex, &inst, &bg, &SynthesisPlan::identity(inst.len())).unwrap();
        assert_eq!(c.mask, ex.mask);
        for p in 0..256 {
            let expect = if ex.mask.classes()[p] > 0 { ex.image.pixels()[p] } else { 0.25 };
            assert_eq!(c.image.pixels()[p], expect);
        }
    }

    #[test]
    fn horizontal_flip_mirrors_in_place() {
        let ex = exemplar();
        let inst = extract_instances(&ex.mask).unwrap();
        let bg = Image::filled(0.0, 16, 16).unwrap();
        let mut plan = SynthesisPlan::identity(inst.len());
        plan.instances[0] = Some(GeometricParams { flip_h: true, ..GeometricParams::IDENTITY });
        let c = synthesize_one(&ex, &inst, &bg, &plan).unwrap();
        // Blob 0 spans columns 1..=3; mirrored about its box centre.
        for (y, x) in [(1, 3), (1, 2), (2, 3), (2, 2), (3, 1)] {
            assert_eq!(c.mask.at(y, x), 1, "({y},{x})");
        }
        assert_eq!(c.mask.at(3, 3), 0);
        assert_eq!(c.image.at(3, 1), ex.image.at(3, 3));
    }

    #[test]
    fn out_of_canvas_instance_is_skipped() {
        let ex = exemplar();
        let inst = extract_instances(&ex.mask).unwrap();
        let bg = Image::filled(0.0, 16, 16).unwrap();
        let mut plan = SynthesisPlan::identity(inst.len());
        plan.instances[2] = Some(GeometricParams { dx: 100.0, ..GeometricParams::IDENTITY });
        let c = synthesize_one(&ex, &inst, &bg, &plan).unwrap();
        assert_eq!(c.skipped, vec![2]);
        assert!(!c.mask.contains_class(2));
    }

    #[test]
    fn oversized_instance_cannot_be_placed() {
        let inst = Instance {
            class_id: 1,
            top: 0,
            left: 0,
            height: 16,
            width: 16,
            support: vec![true; 256],
        };
        let cfg = SynthesisConfig { scale_min: 1.2, scale_max: 1.25, ..Default::default() };
        let mut rng = substream(0, &[]);
        assert!(sample_placement(&inst, 16, 16, &cfg, &mut rng).is_none());
    }

    #[test]
    fn placements_stay_inside() {
        let ex = exemplar();
        let inst = extract_instances(&ex.mask).unwrap();
        let cfg = SynthesisConfig::default();
        let mut rng = substream(9, &[]);
        for _ in 0..100 {
            for i in &inst {
                let g = sample_placement(i, 16, 16, &cfg, &mut rng).unwrap();
                // Every source pixel must land on the canvas.
                assert_eq!(i.transformed_support(&g, 16, 16).len(), i.transformed_support(&g, 64, 64).len());
            }
        }
    }

    #[test]
    fn dataset_size_and_determinism() {
        let ex = exemplar();
        let pool = UnlabeledDataset::new(vec![Image::filled(0.1, 16, 16).unwrap(); 3]).unwrap();
        let cfg = SynthesisConfig { seed: 4, ..Default::default() };
        let a = build_synthetic_dataset(&ex, &pool, &cfg).unwrap();
        assert_eq!(a.len(), 30);
        assert_eq!(a, build_synthetic_dataset(&ex, &pool, &cfg).unwrap());
        for (_, m) in a.items() {
            assert!(m.classes().iter().all(|&c| ex.mask.contains_class(c)));
        }
    }

    #[test]
    fn intensity_identity_and_clamp() {
        let img = Image::filled(0.9, 16, 16).unwrap();
        assert_eq!(IntensityParams::IDENTITY.apply(&img), img);
        let p = IntensityParams { brightness_delta: 0.2, ..IntensityParams::IDENTITY };
        assert!(p.apply(&img).pixels().iter().all(|&v| v == 1.0));
    }
}
