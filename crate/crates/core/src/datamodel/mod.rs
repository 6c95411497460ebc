//! Domain types shared by every stage: images, label masks, probability
//! maps, pseudo-labels and the three training datasets.

pub mod manifest;
pub mod npy;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

pub use manifest::{load_dataset, DatasetManifest, LoadedDataset, VolumeManifest};

/// Network inputs must survive four 2× downsamplings.
pub const SPATIAL_MULTIPLE: usize = 16;

/// Single-channel image with intensities in `[0, 1]`, row-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Image {
    pixels: Vec<f32>,
    height: usize,
    width: usize,
}

impl Image {
    pub fn new(pixels: Vec<f32>, height: usize, width: usize) -> Result<Self> {
        if pixels.len() != height * width {
            return Err(Error::Shape(format!(
                "image has {} pixels, expected {height}×{width}",
                pixels.len()
            )));
        }
        if height < SPATIAL_MULTIPLE
            || width < SPATIAL_MULTIPLE
            || height % SPATIAL_MULTIPLE != 0
            || width % SPATIAL_MULTIPLE != 0
        {
            return Err(Error::Shape(format!(
                "image size {height}×{width} must be at least 16 and divisible by 16"
            )));
        }
        if let Some(v) = pixels.iter().find(|v| !v.is_finite() || **v < 0.0 || **v > 1.0) {
            return Err(Error::Validation(format!(
                "image intensity {v} outside [0, 1]"
            )));
        }
        Ok(Image {
            pixels,
            height,
            width,
        })
    }

    pub fn filled(value: f32, height: usize, width: usize) -> Result<Self> {
        Image::new(vec![value; height * width], height, width)
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize) -> f32 {
        self.pixels[y * self.width + x]
    }

    /// Replaces pixel data produced by a shape-preserving transform, clamping into `[0, 1]`.
    pub(crate) fn with_pixels(&self, mut pixels: Vec<f32>) -> Image {
        assert_eq!(pixels.len(), self.pixels.len());
        pixels.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
        Image {
            pixels,
            height: self.height,
            width: self.width,
        }
    }
}

/// Per-pixel class map with values in `0..num_classes`, row-major.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelMask {
    classes: Vec<u8>,
    height: usize,
    width: usize,
    num_classes: usize,
}

impl LabelMask {
    pub fn new(classes: Vec<u8>, height: usize, width: usize, num_classes: usize) -> Result<Self> {
        if classes.len() != height * width {
            return Err(Error::Shape(format!(
                "mask has {} pixels, expected {height}×{width}",
                classes.len()
            )));
        }
        if !(1..=256).contains(&num_classes) {
            return Err(Error::Validation(format!(
                "num_classes {num_classes} out of range"
            )));
        }
        if let Some(c) = classes.iter().find(|&&c| c as usize >= num_classes) {
            return Err(Error::Validation(format!(
                "mask value {c} not below K = {num_classes}"
            )));
        }
        Ok(LabelMask {
            classes,
            height,
            width,
            num_classes,
        })
    }

    pub fn background(height: usize, width: usize, num_classes: usize) -> Result<Self> {
        LabelMask::new(vec![0; height * width], height, width, num_classes)
    }

    pub fn classes(&self) -> &[u8] {
        &self.classes
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize) -> u8 {
        self.classes[y * self.width + x]
    }

    /// Pixel count per class.
    pub fn histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.num_classes];
        self.classes.iter().for_each(|&c| h[c as usize] += 1);
        h
    }

    pub fn contains_class(&self, k: u8) -> bool {
        self.classes.contains(&k)
    }

    pub(crate) fn with_classes(&self, classes: Vec<u8>) -> LabelMask {
        assert_eq!(classes.len(), self.classes.len());
        LabelMask {
            classes,
            ..self.clone()
        }
    }
}

/// Binary `K × H × W` encoding of a mask.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct OneHot {
    pub data: Vec<u8>,
    pub num_classes: usize,
    pub height: usize,
    pub width: usize,
}

impl OneHot {
    pub fn get(&self, k: usize, y: usize, x: usize) -> u8 {
        self.data[(k * self.height + y) * self.width + x]
    }

    /// Per-pixel argmax over channels, ties toward the smallest index.
    pub fn argmax(&self) -> Vec<u8> {
        let hw = self.height * self.width;
        (0..hw)
            .map(|p| {
                (0..self.num_classes)
                    .fold((0usize, 0u8), |(best, bv), k| {
                        let v = self.data[k * hw + p];
                        if v > bv {
                            (k, v)
                        } else {
                            (best, bv)
                        }
                    })
                    .0 as u8
            })
            .collect()
    }
}

pub fn one_hot(mask: &LabelMask) -> OneHot {
    let hw = mask.height * mask.width;
    let mut data = vec![0u8; mask.num_classes * hw];
    for (p, &c) in mask.classes.iter().enumerate() {
        data[c as usize * hw + p] = 1;
    }
    OneHot {
        data,
        num_classes: mask.num_classes,
        height: mask.height,
        width: mask.width,
    }
}

/// Per-pixel class probabilities for a batch, `K × N × H × W`.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbMap<F: Real> {
    probs: Tensor<F>,
}

impl<F: Real> ProbMap<F> {
    /// Wraps a tensor, checking each pixel's channel sum is 1 within `1e-5`.
    pub fn new(probs: Tensor<F>) -> Result<Self> {
        let plane = probs.plane_len();
        let tol = F::lit(1e-5);
        for p in 0..plane {
            let mut sum = F::zero();
            for k in 0..probs.c {
                let v = probs.data[k * plane + p];
                if !(v >= F::zero() && v <= F::one()) {
                    return Err(Error::Validation(format!("probability {v:?} outside [0,1]")));
                }
                sum += v;
            }
            if (sum - F::one()).abs() > tol {
                return Err(Error::Validation(format!(
                    "probabilities sum to {sum:?} at pixel {p}"
                )));
            }
        }
        Ok(ProbMap { probs })
    }

    pub(crate) fn new_unchecked(probs: Tensor<F>) -> Self {
        ProbMap { probs }
    }

    pub fn tensor(&self) -> &Tensor<F> {
        &self.probs
    }

    pub fn into_tensor(self) -> Tensor<F> {
        self.probs
    }

    pub fn num_classes(&self) -> usize {
        self.probs.c
    }

    /// Probability of class `k` for flat pixel index `p` (NHW order).
    #[inline]
    pub fn get(&self, k: usize, p: usize) -> F {
        self.probs.data[k * self.probs.plane_len() + p]
    }

    /// Number of pixels across the batch.
    pub fn pixels(&self) -> usize {
        self.probs.plane_len()
    }
}

/// Confidence-filtered argmax labels for a batch (NHW order).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PseudoLabel {
    pub classes: Vec<u8>,
    pub valid: Vec<bool>,
    pub n: usize,
    pub height: usize,
    pub width: usize,
}

impl PseudoLabel {
    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }

    pub fn valid_fraction(&self) -> f64 {
        if self.valid.is_empty() {
            0.0
        } else {
            self.valid_count() as f64 / self.valid.len() as f64
        }
    }

    /// Literal reading of the indicator product: low-confidence pixels are
    /// relabelled background and kept as targets.
    pub fn into_literal(mut self) -> PseudoLabel {
        for (c, v) in self.classes.iter_mut().zip(self.valid.iter_mut()) {
            if !*v {
                *c = 0;
                *v = true;
            }
        }
        self
    }

    pub fn as_target(&self) -> Target<'_> {
        Target {
            classes: &self.classes,
            valid: Some(&self.valid),
        }
    }

    /// Pseudo-label for sample `i` of the batch.
    pub fn sample(&self, i: usize) -> PseudoLabel {
        let hw = self.height * self.width;
        PseudoLabel {
            classes: self.classes[i * hw..(i + 1) * hw].to_vec(),
            valid: self.valid[i * hw..(i + 1) * hw].to_vec(),
            n: 1,
            height: self.height,
            width: self.width,
        }
    }
}

/// Borrowed supervision target in NHW order; `valid = None` means every
/// pixel counts.
#[derive(Clone, Copy, Debug)]
pub struct Target<'a> {
    pub classes: &'a [u8],
    pub valid: Option<&'a [bool]>,
}

impl<'a> Target<'a> {
    pub fn dense(classes: &'a [u8]) -> Self {
        Target {
            classes,
            valid: None,
        }
    }

    #[inline]
    pub fn is_valid(&self, p: usize) -> bool {
        self.valid.is_none_or(|v| v[p])
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }
}

/// Concatenates a batch of masks into a dense NHW class buffer.
pub fn stack_masks<'a, I>(masks: I) -> Vec<u8>
where
    I: IntoIterator<Item = &'a LabelMask>,
{
    masks
        .into_iter()
        .flat_map(|m| m.classes.iter().copied())
        .collect()
}

/// Stacks images into a `1 × N × H × W` network input.
pub fn stack_images<'a, F: Real, I>(images: I) -> Tensor<F>
where
    I: IntoIterator<Item = &'a Image>,
{
    let images: Vec<&Image> = images.into_iter().collect();
    let (h, w) = images.first().map(|i| i.dims()).unwrap_or((0, 0));
    Tensor::from_planes(images.iter().map(|i| i.pixels()), h, w)
}

/// The single annotated training example.
#[derive(Clone, Debug, PartialEq)]
pub struct ExemplarDataset {
    pub image: Image,
    pub mask: LabelMask,
}

impl ExemplarDataset {
    /// Requires matching shapes and at least one pixel of every foreground class.
    pub fn new(image: Image, mask: LabelMask) -> Result<Self> {
        if image.dims() != mask.dims() {
            return Err(Error::Validation(format!(
                "exemplar image {:?} and mask {:?} differ in shape",
                image.dims(),
                mask.dims()
            )));
        }
        let hist = mask.histogram();
        if let Some(k) = (1..mask.num_classes()).find(|&k| hist[k] == 0) {
            return Err(Error::Validation(format!(
                "exemplar mask lacks class {k} of K = {}",
                mask.num_classes()
            )));
        }
        Ok(ExemplarDataset { image, mask })
    }

    pub fn num_classes(&self) -> usize {
        self.mask.num_classes()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct UnlabeledDataset {
    images: Vec<Image>,
}

impl UnlabeledDataset {
    pub fn new(images: Vec<Image>) -> Result<Self> {
        let first = images
            .first()
            .ok_or_else(|| Error::Validation("unlabeled dataset is empty".into()))?
            .dims();
        if let Some(i) = images.iter().position(|im| im.dims() != first) {
            return Err(Error::Validation(format!(
                "unlabeled image {i} has shape {:?}, expected {first:?}",
                images[i].dims()
            )));
        }
        Ok(UnlabeledDataset { images })
    }

    pub fn images(&self) -> &[Image] {
        &self.images
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticDataset {
    items: Vec<(Image, LabelMask)>,
}

impl SyntheticDataset {
    pub fn new(items: Vec<(Image, LabelMask)>) -> Result<Self> {
        if items.is_empty() {
            return Err(Error::Validation("synthetic dataset is empty".into()));
        }
        for (i, (im, m)) in items.iter().enumerate() {
            if im.dims() != m.dims() {
                return Err(Error::Validation(format!("synthetic item {i} shape mismatch")));
            }
        }
        Ok(SyntheticDataset { items })
    }

    pub fn items(&self) -> &[(Image, LabelMask)] {
        &self.items
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

/// Ordered slices of one evaluation case with their ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct TestVolume {
    pub id: String,
    pub slices: Vec<Image>,
    pub labels: Vec<LabelMask>,
}

impl TestVolume {
    pub fn new(id: impl Into<String>, slices: Vec<Image>, labels: Vec<LabelMask>) -> Result<Self> {
        let id = id.into();
        if slices.len() != labels.len() || slices.is_empty() {
            return Err(Error::Validation(format!(
                "volume {id}: {} slices but {} labels",
                slices.len(),
                labels.len()
            )));
        }
        for (i, (s, l)) in slices.iter().zip(&labels).enumerate() {
            if s.dims() != l.dims() {
                return Err(Error::Validation(format!(
                    "volume {id}: slice {i} image/mask shape mismatch"
                )));
            }
        }
        Ok(TestVolume { id, slices, labels })
    }
}

/// Bilinear resampling (half-pixel centres, edge clamp) of a raw raster.
pub fn resize_bilinear(src: &[f64], h: usize, w: usize, oh: usize, ow: usize) -> Vec<f64> {
    if (h, w) == (oh, ow) {
        return src.to_vec();
    }
    let axis = |insz: usize, outsz: usize| -> Vec<(usize, usize, f64)> {
        (0..outsz)
            .map(|d| {
                let s = ((d as f64 + 0.5) * insz as f64 / outsz as f64 - 0.5).max(0.0);
                let i0 = (s.floor() as usize).min(insz - 1);
                let i1 = (i0 + 1).min(insz - 1);
                (i0, i1, s - i0 as f64)
            })
            .collect()
    };
    let ys = axis(h, oh);
    let xs = axis(w, ow);
    let mut out = Vec::with_capacity(oh * ow);
    for &(y0, y1, fy) in &ys {
        for &(x0, x1, fx) in &xs {
            let top = src[y0 * w + x0] * (1.0 - fx) + src[y0 * w + x1] * fx;
            let bot = src[y1 * w + x0] * (1.0 - fx) + src[y1 * w + x1] * fx;
            out.push(top * (1.0 - fy) + bot * fy);
        }
    }
    out
}

/// Nearest-neighbour resampling; never invents values.
pub fn resize_nearest<T: Copy>(src: &[T], h: usize, w: usize, oh: usize, ow: usize) -> Vec<T> {
    let idx = |d: usize, insz: usize, outsz: usize| ((d * 2 + 1) * insz / (outsz * 2)).min(insz - 1);
    let mut out = Vec::with_capacity(oh * ow);
    for y in 0..oh {
        let sy = idx(y, h, oh);
        for x in 0..ow {
            out.push(src[sy * w + idx(x, w, ow)]);
        }
    }
    out
}

/// Min-max normalisation to `[0, 1]`; a constant raster maps to zeros.
pub fn min_max_normalize(values: &[f64]) -> Vec<f32> {
    let (lo, hi) = values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
    if !(hi > lo) {
        return vec![0.0; values.len()];
    }
    let span = hi - lo;
    values
        .iter()
        .map(|&v| (((v - lo) / span) as f32).clamp(0.0, 1.0))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn one_hot_single_pixel() {
        let m = LabelMask::new(vec![2], 1, 1, 3).unwrap();
        let oh = one_hot(&m);
        assert_eq!(oh.data, vec![0, 0, 1]);
    }

    #[test]
    fn one_hot_background() {
        let m = LabelMask::background(2, 2, 2).unwrap();
        let oh = one_hot(&m);
        assert!((0..2).all(|y| (0..2).all(|x| oh.get(0, y, x) == 1 && oh.get(1, y, x) == 0)));
    }

    #[test]
    fn image_rejects_bad_shapes_and_values() {
        assert!(Image::filled(0.5, 24, 32).is_err());
        assert!(Image::filled(0.5, 16, 32).is_ok());
        assert!(Image::new(vec![f32::NAN; 256], 16, 16).is_err());
        assert!(Image::new(vec![1.5; 256], 16, 16).is_err());
    }

    #[test]
    fn exemplar_requires_every_class() {
        let img = Image::filled(0.0, 16, 16).unwrap();
        let mut c = vec![0u8; 256];
        c[0] = 1;
        c[1] = 3;
        let m = LabelMask::new(c, 16, 16, 4).unwrap();
        let err = ExemplarDataset::new(img, m).unwrap_err();
        assert!(err.to_string().contains("class 2"));
    }

    #[test]
    fn mask_rejects_out_of_range() {
        assert!(LabelMask::new(vec![0, 4], 1, 2, 4).is_err());
    }

    #[test]
    fn min_max_hits_unit_range() {
        let n = min_max_normalize(&[0.0, 4095.0, 2000.0]);
        assert_eq!(n[1], 1.0);
        assert_eq!(n[0], 0.0);
    }

    #[test]
    fn pseudo_label_literal_mode_relabels_background() {
        let pl = PseudoLabel {
            classes: vec![2, 1],
            valid: vec![true, false],
            n: 1,
            height: 1,
            width: 2,
        };
        let lit = pl.into_literal();
        assert_eq!(lit.classes, vec![2, 0]);
        assert!(lit.valid.iter().all(|&v| v));
    }

    proptest! {
        #[test]
        fn one_hot_roundtrip(h in 1usize..7, w in 1usize..7, k in 2usize..6,
                             vals in proptest::collection::vec(any::<u8>(), 49)) {
            let classes: Vec<u8> = vals[..h * w].iter().map(|v| v % k as u8).collect();
            let m = LabelMask::new(classes.clone(), h, w, k).unwrap();
            let oh = one_hot(&m);
            // exactly one hot channel per pixel
            for p in 0..h * w {
                let s: u32 = (0..k).map(|c| oh.data[c * h * w + p] as u32).sum();
                prop_assert_eq!(s, 1);
            }
            prop_assert_eq!(oh.argmax(), classes);
        }

        #[test]
        fn nearest_resize_preserves_class_set(h in 2usize..12, w in 2usize..12,
                                              oh in 2usize..24, ow in 2usize..24,
                                              vals in proptest::collection::vec(0u8..5, 144)) {
            let src = &vals[..h * w];
            let out = resize_nearest(src, h, w, oh, ow);
            prop_assert!(out.iter().all(|v| src.contains(v)));
            if oh >= h && ow >= w {
                let mut a: Vec<u8> = src.to_vec(); a.sort(); a.dedup();
                let mut b = out.clone(); b.sort(); b.dedup();
                prop_assert_eq!(a, b);
            }
        }
    }

    #[test]
    fn random_one_hot_sums_to_one() {
        // 4×4, K = 5, brute-force per-pixel check.
        let classes: Vec<u8> = (0..16u32).map(|i| ((i * 7 + 3) % 5) as u8).collect();
        let m = LabelMask::new(classes, 4, 4, 5).unwrap();
        let oh = one_hot(&m);
        for y in 0..4 {
            for x in 0..4 {
                let s: u32 = (0..5).map(|k| oh.get(k, y, x) as u32).sum();
                assert_eq!(s, 1);
                assert_eq!(oh.get(m.at(y, x) as usize, y, x), 1);
            }
        }
    }
}
