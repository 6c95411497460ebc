//! JSON dataset manifest and array-file ingestion.
//!
//! ```json
//! {"exemplar": "ex.npy", "exemplar_label": "ex_label.npy",
//!  "unlabeled": ["u0.npy", "u1.npy"],
//!  "test_volumes": [{"slices": ["v0_s0.npy"], "labels": ["v0_l0.npy"]}],
//!  "num_classes": 4, "height": 224, "width": 224}
//! ```
//!
//! Paths are relative to the manifest's directory. Images may be `.npy`
//! (any numeric dtype) or 8/16-bit grayscale `.png`; masks are integer arrays.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{
    min_max_normalize, npy, resize_bilinear, resize_nearest, ExemplarDataset, Image, LabelMask,
    TestVolume, UnlabeledDataset,
};
use crate::error::{Error, Result};

fn default_side() -> usize {
    224
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VolumeManifest {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id: Option<String>,
    pub slices: Vec<String>,
    pub labels: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub exemplar: String,
    pub exemplar_label: String,
    pub unlabeled: Vec<String>,
    #[serde(default)]
    pub test_volumes: Vec<VolumeManifest>,
    pub num_classes: usize,
    #[serde(default = "default_side")]
    pub height: usize,
    #[serde(default = "default_side")]
    pub width: usize,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub class_names: Vec<String>,
}

impl DatasetManifest {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::ingestion(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    /// Class names, defaulting to `class0..classK-1`.
    pub fn resolved_class_names(&self) -> Vec<String> {
        if self.class_names.len() == self.num_classes {
            self.class_names.clone()
        } else {
            (0..self.num_classes).map(|k| format!("class{k}")).collect()
        }
    }
}

/// Everything a manifest describes, resized and normalised.
#[derive(Clone, Debug)]
pub struct LoadedDataset {
    pub exemplar: ExemplarDataset,
    pub unlabeled: UnlabeledDataset,
    pub test_volumes: Vec<TestVolume>,
    pub num_classes: usize,
    pub class_names: Vec<String>,
}

struct Raster {
    values: Vec<f64>,
    height: usize,
    width: usize,
}

fn read_raster(path: &Path) -> Result<Raster> {
    if !path.exists() {
        return Err(Error::ingestion(
            path,
            std::io::Error::new(std::io::ErrorKind::NotFound, "file not found"),
        ));
    }
    let ext = path
        .extension()
        .and_then(|e| e.to_str())
        .unwrap_or("")
        .to_ascii_lowercase();
    match ext.as_str() {
        "png" => {
            let img = image::open(path).map_err(|e| Error::format(path, e.to_string()))?;
            let gray = img.to_luma16();
            let (w, h) = gray.dimensions();
            Ok(Raster {
                values: gray.as_raw().iter().map(|&v| v as f64).collect(),
                height: h as usize,
                width: w as usize,
            })
        }
        _ => {
            let arr = npy::read(path)?;
            let (height, width) = match arr.shape.as_slice() {
                [h, w] | [1, h, w] => (*h, *w),
                s => return Err(Error::format(path, format!("expected a 2D array, got shape {s:?}"))),
            };
            Ok(Raster {
                values: arr.values,
                height,
                width,
            })
        }
    }
}

/// Reads an image, resizes it bilinearly to `height × width` and min-max
/// normalises it to `[0, 1]`.
pub fn load_image(path: &Path, height: usize, width: usize) -> Result<Image> {
    let r = read_raster(path)?;
    if r.values.iter().any(|v| !v.is_finite()) {
        return Err(Error::format(path, "non-finite intensity"));
    }
    let resized = resize_bilinear(&r.values, r.height, r.width, height, width);
    Image::new(min_max_normalize(&resized), height, width)
}

/// Reads a mask and resizes it with nearest-neighbour sampling.
pub fn load_mask(path: &Path, height: usize, width: usize, num_classes: usize) -> Result<LabelMask> {
    load_mask_with_source_shape(path, height, width, num_classes).map(|(m, _)| m)
}

fn load_mask_with_source_shape(
    path: &Path,
    height: usize,
    width: usize,
    num_classes: usize,
) -> Result<(LabelMask, (usize, usize))> {
    let r = read_raster(path)?;
    let mut classes = Vec::with_capacity(r.values.len());
    for &v in &r.values {
        if v.fract() != 0.0 || v < 0.0 || v >= num_classes as f64 {
            return Err(Error::Validation(format!(
                "{}: mask value {v} is not a class below {num_classes}",
                path.display()
            )));
        }
        classes.push(v as u8);
    }
    let resized = resize_nearest(&classes, r.height, r.width, height, width);
    Ok((
        LabelMask::new(resized, height, width, num_classes)?,
        (r.height, r.width),
    ))
}

fn raster_shape(path: &Path) -> Result<(usize, usize)> {
    read_raster(path).map(|r| (r.height, r.width))
}

fn check_pair(image: &Path, mask_shape: (usize, usize)) -> Result<()> {
    let ishape = raster_shape(image)?;
    if ishape != mask_shape {
        return Err(Error::Validation(format!(
            "{}: image shape {ishape:?} differs from mask shape {mask_shape:?}",
            image.display()
        )));
    }
    Ok(())
}

/// Loads every dataset referenced by `manifest`, resolving paths against `root`.
pub fn load_dataset(root: &Path, manifest: &DatasetManifest) -> Result<LoadedDataset> {
    let (h, w, k) = (manifest.height, manifest.width, manifest.num_classes);
    if k < 2 {
        return Err(Error::Validation(format!("num_classes must be ≥ 2, got {k}")));
    }
    let resolve = |p: &str| -> PathBuf { root.join(p) };

    let ex_path = resolve(&manifest.exemplar);
    let (ex_mask, ex_shape) = load_mask_with_source_shape(&resolve(&manifest.exemplar_label), h, w, k)?;
    check_pair(&ex_path, ex_shape)?;
    let exemplar = ExemplarDataset::new(load_image(&ex_path, h, w)?, ex_mask)?;

    let unlabeled = UnlabeledDataset::new(
        manifest
            .unlabeled
            .iter()
            .map(|p| load_image(&resolve(p), h, w))
            .collect::<Result<_>>()?,
    )?;

    let mut test_volumes = Vec::with_capacity(manifest.test_volumes.len());
    for (i, vm) in manifest.test_volumes.iter().enumerate() {
        if vm.slices.len() != vm.labels.len() {
            return Err(Error::Validation(format!(
                "test volume {i}: {} slices but {} labels",
                vm.slices.len(),
                vm.labels.len()
            )));
        }
        let mut slices = Vec::with_capacity(vm.slices.len());
        let mut labels = Vec::with_capacity(vm.labels.len());
        for (s, l) in vm.slices.iter().zip(&vm.labels) {
            let (mask, mshape) = load_mask_with_source_shape(&resolve(l), h, w, k)?;
            check_pair(&resolve(s), mshape)?;
            slices.push(load_image(&resolve(s), h, w)?);
            labels.push(mask);
        }
        let id = vm.id.clone().unwrap_or_else(|| format!("case{i:03}"));
        test_volumes.push(TestVolume::new(id, slices, labels)?);
    }

    Ok(LoadedDataset {
        exemplar,
        unlabeled,
        test_volumes,
        num_classes: k,
        class_names: manifest.resolved_class_names(),
    })
}

pub fn save_image(path: &Path, image: &Image) -> Result<()> {
    npy::write_f32(path, &[image.height(), image.width()], image.pixels())
}

pub fn save_mask(path: &Path, mask: &LabelMask) -> Result<()> {
    let data: Vec<i32> = mask.classes().iter().map(|&c| c as i32).collect();
    npy::write_i32(path, &[mask.height(), mask.width()], &data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    fn write_pair(dir: &Path, name: &str, k: usize, classes: &[u8]) {
        let img: Vec<f32> = (0..256).map(|i| (i % 17) as f32).collect();
        npy::write_f32(&dir.join(format!("{name}.npy")), &[16, 16], &img).unwrap();
        let m: Vec<i32> = classes.iter().map(|&c| c as i32 % k as i32).collect();
        npy::write_i32(&dir.join(format!("{name}_label.npy")), &[16, 16], &m).unwrap();
    }

    fn manifest(unlabeled: usize) -> DatasetManifest {
        DatasetManifest {
            exemplar: "ex.npy".into(),
            exemplar_label: "ex_label.npy".into(),
            unlabeled: (0..unlabeled).map(|i| format!("u{i}.npy")).collect(),
            test_volumes: vec![],
            num_classes: 4,
            height: 32,
            width: 32,
            class_names: vec![],
        }
    }

    #[test]
    fn cardinality_passthrough() {
        let dir = tempdir().unwrap();
        let classes: Vec<u8> = (0..256).map(|i| (i / 64) as u8).collect();
        write_pair(dir.path(), "ex", 4, &classes);
        for i in 0..3 {
            write_pair(dir.path(), &format!("u{i}"), 4, &classes);
        }
        let d = load_dataset(dir.path(), &manifest(3)).unwrap();
        assert_eq!(d.unlabeled.len(), 3);
        assert_eq!(d.exemplar.image.dims(), (32, 32));
    }

    #[test]
    fn missing_class_is_rejected() {
        let dir = tempdir().unwrap();
        let classes: Vec<u8> = (0..256).map(|i| [0u8, 1, 3, 3][i / 64]).collect();
        write_pair(dir.path(), "ex", 4, &classes);
        write_pair(dir.path(), "u0", 4, &classes);
        let err = load_dataset(dir.path(), &manifest(1)).unwrap_err();
        assert!(matches!(err, Error::Validation(_)), "{err}");
        assert!(err.to_string().contains("class 2"));
    }

    #[test]
    fn missing_file_names_the_path() {
        let dir = tempdir().unwrap();
        let err = load_dataset(dir.path(), &manifest(1)).unwrap_err();
        assert!(matches!(err, Error::Ingestion { .. }));
        assert!(err.to_string().contains("ex_label.npy"), "{err}");
    }

    #[test]
    fn shape_mismatch_is_validation_error() {
        let dir = tempdir().unwrap();
        let classes: Vec<u8> = (0..256).map(|i| (i / 64) as u8).collect();
        write_pair(dir.path(), "ex", 4, &classes);
        npy::write_f32(&dir.path().join("ex.npy"), &[16, 8], &[0.5; 128]).unwrap();
        write_pair(dir.path(), "u0", 4, &classes);
        assert!(matches!(
            load_dataset(dir.path(), &manifest(1)).unwrap_err(),
            Error::Validation(_)
        ));
    }

    #[test]
    fn sixteen_bit_raster_normalizes_to_unit_max() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("ct.png");
        let raw: Vec<u16> = (0..32 * 32).map(|i| (i * 4095 / 1023) as u16).collect();
        image::ImageBuffer::<image::Luma<u16>, _>::from_raw(32, 32, raw)
            .unwrap()
            .save(&path)
            .unwrap();
        let img = load_image(&path, 32, 32).unwrap();
        let max = img.pixels().iter().cloned().fold(0.0f32, f32::max);
        assert_eq!(max, 1.0);
    }

    #[test]
    fn repeated_loads_are_bit_identical() {
        let dir = tempdir().unwrap();
        let classes: Vec<u8> = (0..256).map(|i| (i / 64) as u8).collect();
        write_pair(dir.path(), "ex", 4, &classes);
        write_pair(dir.path(), "u0", 4, &classes);
        let a = load_dataset(dir.path(), &manifest(1)).unwrap();
        let b = load_dataset(dir.path(), &manifest(1)).unwrap();
        let bits = |d: &LoadedDataset| -> Vec<u32> {
            d.exemplar.image.pixels().iter().map(|v| v.to_bits()).collect()
        };
        assert_eq!(bits(&a), bits(&b));
        assert_eq!(a.exemplar.mask, b.exemplar.mask);
    }
}
