//! Procedural toy benchmark and ablation harness.
//!
//! Images contain up to three shape classes (disk, rectangle, annulus) over
//! a textured background. Shape intensities are drawn from overlapping
//! bands and every pixel carries Gaussian noise, so thresholding alone does
//! not solve the task. Sparse impulse noise (pixels forced to 0 or 1) pins
//! every image's range to `[0, 1]`, so per-image min-max normalisation
//! leaves intensities comparable across images. Test volumes are stacks of slices in which each
//! shape drifts and grows/shrinks smoothly.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, RngCore};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::datamodel::manifest::{save_image, save_mask, DatasetManifest, VolumeManifest};
use crate::datamodel::{min_max_normalize, ExemplarDataset, Image, LabelMask, TestVolume, UnlabeledDataset};
use crate::error::{Error, Result};
use crate::evalmetrics::Report;
use crate::rng::{derive_seed, substream, tag};
use crate::synthesis::{build_synthetic_dataset, SynthesisConfig};
use crate::trainer::{evaluate_state, fit, SharedViews, TrainConfig, TrainData, TrainState};
use crate::objective::Pairing;

/// Height-to-width ratio of the rectangle class.
const RECT_ASPECT: f64 = 0.6;

pub const CLASS_NAMES: [&str; 4] = ["background", "disk", "rectangle", "annulus"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToySpec {
    pub height: usize,
    pub width: usize,
    pub num_classes: usize,
    /// Mean-intensity band of each foreground class.
    pub bands: Vec<(f64, f64)>,
    pub background_band: (f64, f64),
    /// Amplitude of the smooth background texture.
    pub texture: f64,
    /// Per-pixel Gaussian noise.
    pub noise_sigma: f64,
    /// Probability of a pixel being forced to 0, and separately to 1.
    pub impulse_prob: f64,
    /// Size range in pixels: disk radius, rectangle half-side, annulus outer radius.
    pub size_range: (f64, f64),
    /// Inner/outer radius ratio of the annulus.
    pub annulus_ratio: f64,
    /// Probability that an unlabeled image contains a given class.
    pub unlabeled_presence: f64,
    pub n_unlabeled: usize,
    pub n_volumes: usize,
    pub slices_per_volume: usize,
    pub seed: u64,
}

impl Default for ToySpec {
    fn default() -> Self {
        ToySpec {
            height: 64,
            width: 64,
            num_classes: 4,
            bands: vec![(0.42, 0.58), (0.55, 0.70), (0.60, 0.80)],
            background_band: (0.25, 0.35),
            texture: 0.08,
            noise_sigma: 0.05,
            impulse_prob: 0.005,
            size_range: (6.0, 10.0),
            annulus_ratio: 0.5,
            unlabeled_presence: 0.85,
            n_unlabeled: 40,
            n_volumes: 5,
            slices_per_volume: 8,
            seed: 0,
        }
    }
}

impl ToySpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if self.num_classes < 2 || self.num_classes > 4 || self.bands.len() != self.num_classes - 1 {
            return bad("toy data supports 2..=4 classes with one band per foreground class");
        }
        if self.height < 32 || self.width < 32 || self.height % 16 != 0 || self.width % 16 != 0 {
            return bad("canvas sides must be multiples of 16, at least 32");
        }
        let (lo, hi) = self.size_range;
        if !(lo >= 2.0 && lo <= hi) || 4.0 * hi + 2.0 > self.height.min(self.width) as f64 {
            return bad("size_range must be ordered, at least 2, and small enough for the canvas");
        }
        if self.n_unlabeled == 0 || self.n_volumes == 0 || self.slices_per_volume == 0 {
            return bad("dataset counts must be positive");
        }
        if !(0.0..1.0).contains(&self.annulus_ratio) || !(0.0..=1.0).contains(&self.unlabeled_presence) {
            return bad("annulus_ratio must lie in [0, 1) and unlabeled_presence in [0, 1]");
        }
        if !(0.0..=0.5).contains(&self.impulse_prob) || !(self.noise_sigma >= 0.0) {
            return bad("impulse_prob must lie in [0, 0.5] and noise_sigma be nonnegative");
        }
        Ok(())
    }

    pub fn class_names(&self) -> Vec<String> {
        CLASS_NAMES[..self.num_classes].iter().map(|s| s.to_string()).collect()
    }
}

/// A shape instance: class, centre and size.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Shape {
    pub class: u8,
    pub cy: f64,
    pub cx: f64,
    pub size: f64,
    pub intensity: f64,
}

impl Shape {
    /// Whether the pixel centre `(y, x)` lies inside the shape.
    pub fn contains(&self, y: f64, x: f64, annulus_ratio: f64) -> bool {
        let (dy, dx) = (y - self.cy, x - self.cx);
        let r2 = dy * dy + dx * dx;
        match self.class {
            1 => r2 <= self.size * self.size,
            2 => dy.abs() <= self.size * RECT_ASPECT && dx.abs() <= self.size,
            _ => r2 <= self.size * self.size && r2 >= (self.size * annulus_ratio).powi(2),
        }
    }

    fn radius(&self) -> f64 {
        self.size * 1.25
    }
}

/// Smooth background made of a few random low-frequency waves.
struct Texture {
    waves: Vec<(f64, f64, f64, f64)>,
    base: f64,
}

impl Texture {
    fn sample(spec: &ToySpec, rng: &mut dyn RngCore) -> Self {
        let base = rng.random_range(spec.background_band.0..=spec.background_band.1);
        let waves = (0..3)
            .map(|_| {
                (
                    rng.random_range(0.03..0.15),
                    rng.random_range(0.0..PI),
                    rng.random_range(0.0..2.0 * PI),
                    rng.random_range(0.3..1.0) * spec.texture / 3.0,
                )
            })
            .collect();
        Texture { waves, base }
    }

    fn at(&self, y: f64, x: f64) -> f64 {
        self.base
            + self
                .waves
                .iter()
                .map(|&(f, dir, ph, a)| a * (2.0 * PI * f * (y * dir.sin() + x * dir.cos()) + ph).sin())
                .sum::<f64>()
    }
}

fn render(spec: &ToySpec, tex: &Texture, shapes: &[Shape], rng: &mut dyn RngCore) -> Result<(Image, LabelMask)> {
    let (h, w) = (spec.height, spec.width);
    let noise = Normal::new(0.0, spec.noise_sigma).map_err(|e| Error::Config(e.to_string()))?;
    let mut values = Vec::with_capacity(h * w);
    let mut classes = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let (fy, fx) = (y as f64, x as f64);
            let hit = shapes.iter().rev().find(|s| s.contains(fy, fx, spec.annulus_ratio));
            let (v, c) = match hit {
                Some(s) => (s.intensity + 0.3 * (tex.at(fy, fx) - tex.base), s.class),
                None => (tex.at(fy, fx), 0),
            };
            let u: f64 = rng.random();
            values.push(if u < spec.impulse_prob {
                0.0
            } else if u < 2.0 * spec.impulse_prob {
                1.0
            } else {
                (v + noise.sample(rng)).clamp(0.0, 1.0)
            });
            classes.push(c);
        }
    }
    let image = Image::new(min_max_normalize(&values), h, w)?;
    Ok((image, LabelMask::new(classes, h, w, spec.num_classes)?))
}

/// Places the requested classes without overlap by rejection sampling.
fn place(spec: &ToySpec, classes: &[u8], rng: &mut dyn RngCore) -> Vec<Shape> {
    let (h, w) = (spec.height as f64, spec.width as f64);
    let mut shapes: Vec<Shape> = Vec::new();
    for &class in classes {
        for _attempt in 0..200 {
            let size = rng.random_range(spec.size_range.0..=spec.size_range.1);
            let r = size * 1.25;
            let cy = rng.random_range(r + 1.0..=h - 2.0 - r);
            let cx = rng.random_range(r + 1.0..=w - 2.0 - r);
            let band = spec.bands[class as usize - 1];
            let s = Shape {
                class,
                cy,
                cx,
                size,
                intensity: rng.random_range(band.0..=band.1),
            };
            let clear = shapes
                .iter()
                .all(|o| ((o.cy - cy).powi(2) + (o.cx - cx).powi(2)).sqrt() > o.radius() + r + 1.0);
            if clear {
                shapes.push(s);
                break;
            }
        }
    }
    shapes
}

/// One labelled image containing every foreground class.
pub fn toy_labeled(spec: &ToySpec, rng: &mut dyn RngCore) -> Result<(Image, LabelMask)> {
    let all: Vec<u8> = (1..spec.num_classes as u8).collect();
    for _ in 0..100 {
        let shapes = place(spec, &all, rng);
        if shapes.len() == all.len() {
            let tex = Texture::sample(spec, rng);
            return render(spec, &tex, &shapes, rng);
        }
    }
    Err(Error::Config("cannot place all toy shapes on the canvas".into()))
}

fn toy_unlabeled(spec: &ToySpec, rng: &mut dyn RngCore) -> Result<Image> {
    let present: Vec<u8> = (1..spec.num_classes as u8)
        .filter(|_| rng.random_bool(spec.unlabeled_presence))
        .collect();
    let shapes = place(spec, &present, rng);
    let tex = Texture::sample(spec, rng);
    render(spec, &tex, &shapes, rng).map(|(i, _)| i)
}

/// Shapes follow a half-sine size profile across slices and drift linearly.
fn toy_volume(spec: &ToySpec, id: String, rng: &mut dyn RngCore) -> Result<TestVolume> {
    let all: Vec<u8> = (1..spec.num_classes as u8).collect();
    let mut base = place(spec, &all, rng);
    while base.len() != all.len() {
        base = place(spec, &all, rng);
    }
    let drift: Vec<(f64, f64)> = base
        .iter()
        .map(|_| (rng.random_range(-0.4..=0.4), rng.random_range(-0.4..=0.4)))
        .collect();
    let tex = Texture::sample(spec, rng);
    let n = spec.slices_per_volume;
    let mut slices = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for z in 0..n {
        let t = (z as f64 + 0.5) / n as f64;
        let grow = 0.7 + 0.3 * (PI * t).sin();
        let mid = z as f64 - (n as f64 - 1.0) / 2.0;
        let shapes: Vec<Shape> = base
            .iter()
            .zip(&drift)
            .map(|(s, &(dy, dx))| Shape {
                cy: s.cy + dy * mid,
                cx: s.cx + dx * mid,
                size: s.size * grow,
                ..*s
            })
            .collect();
        let (img, mask) = render(spec, &tex, &shapes, rng)?;
        slices.push(img);
        labels.push(mask);
    }
    TestVolume::new(id, slices, labels)
}

/// In-memory toy dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct ToyData {
    pub exemplar: ExemplarDataset,
    pub unlabeled: UnlabeledDataset,
    pub volumes: Vec<TestVolume>,
    pub class_names: Vec<String>,
}

impl ToyData {
    pub fn foreground_names(&self) -> Vec<String> {
        self.class_names[1..].to_vec()
    }
}

pub fn generate_toy_data(spec: &ToySpec) -> Result<ToyData> {
    spec.validate()?;
    let stream = |kind: u64, i: u64| substream(spec.seed, &[tag::TOY, kind, i]);
    let (img, mask) = toy_labeled(spec, &mut stream(0, 0))?;
    let exemplar = ExemplarDataset::new(img, mask)?;
    let unlabeled = (0..spec.n_unlabeled)
        .map(|i| toy_unlabeled(spec, &mut stream(1, i as u64)))
        .collect::<Result<Vec<_>>>()?;
    let volumes = (0..spec.n_volumes)
        .map(|j| toy_volume(spec, format!("case{j:02}"), &mut stream(2, j as u64)))
        .collect::<Result<Vec<_>>>()?;
    Ok(ToyData {
        exemplar,
        unlabeled: UnlabeledDataset::new(unlabeled)?,
        volumes,
        class_names: spec.class_names(),
    })
}

/// Writes the dataset as `.npy` rasters under `dir` with `manifest.json`;
/// returns the manifest path.
pub fn generate_toy(spec: &ToySpec, dir: &Path) -> Result<std::path::PathBuf> {
    let data = generate_toy_data(spec)?;
    std::fs::create_dir_all(dir.join("unlabeled"))?;
    std::fs::create_dir_all(dir.join("test"))?;
    save_image(&dir.join("exemplar.npy"), &data.exemplar.image)?;
    save_mask(&dir.join("exemplar_label.npy"), &data.exemplar.mask)?;
    let mut unlabeled = Vec::new();
    for (i, img) in data.unlabeled.images().iter().enumerate() {
        let rel = format!("unlabeled/u{i:03}.npy");
        save_image(&dir.join(&rel), img)?;
        unlabeled.push(rel);
    }
    let mut test_volumes = Vec::new();
    for v in &data.volumes {
        let mut vm = VolumeManifest {
            id: Some(v.id.clone()),
            slices: Vec::new(),
            labels: Vec::new(),
        };
        for (z, (s, l)) in v.slices.iter().zip(&v.labels).enumerate() {
            let (si, li) = (format!("test/{}_s{z:02}.npy", v.id), format!("test/{}_l{z:02}.npy", v.id));
            save_image(&dir.join(&si), s)?;
            save_mask(&dir.join(&li), l)?;
            vm.slices.push(si);
            vm.labels.push(li);
        }
        test_volumes.push(vm);
    }
    let manifest = DatasetManifest {
        exemplar: "exemplar.npy".into(),
        exemplar_label: "exemplar_label.npy".into(),
        unlabeled,
        test_volumes,
        num_classes: spec.num_classes,
        height: spec.height,
        width: spec.width,
        class_names: spec.class_names(),
    };
    let path = dir.join("manifest.json");
    manifest.write(&path)?;
    Ok(path)
}

/// Rows of the component ablation plus the pairing and weak-view variants.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    ExemplarOnly,
    Sd,
    SdIp,
    SdCmIp,
    Full,
    /// Full, with each network's feature-perturbed prediction supervised by its own pseudo-label.
    FullIndividualFp,
    /// Full, with both networks sharing one weak view of each unlabeled image.
    FullSameWeak,
}

impl Variant {
    pub const COMPONENTS: [Variant; 5] = [Variant::ExemplarOnly, Variant::Sd, Variant::SdIp, Variant::SdCmIp, Variant::Full];

    pub fn name(self) -> &'static str {
        match self {
            Variant::ExemplarOnly => "exemplar",
            Variant::Sd => "SD",
            Variant::SdIp => "SD+IP",
            Variant::SdCmIp => "SD+CM+IP",
            Variant::Full => "SD+CM+IP+FP",
            Variant::FullIndividualFp => "SD+CM+IP+FP(individual)",
            Variant::FullSameWeak => "SD+CM+IP+FP(same weak)",
        }
    }

    /// Identifier used on the command line and in configuration files.
    pub fn key(self) -> &'static str {
        match self {
            Variant::ExemplarOnly => "exemplar_only",
            Variant::Sd => "sd",
            Variant::SdIp => "sd_ip",
            Variant::SdCmIp => "sd_cm_ip",
            Variant::Full => "full",
            Variant::FullIndividualFp => "full_individual_fp",
            Variant::FullSameWeak => "full_same_weak",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        [
            Variant::ExemplarOnly,
            Variant::Sd,
            Variant::SdIp,
            Variant::SdCmIp,
            Variant::Full,
            Variant::FullIndividualFp,
            Variant::FullSameWeak,
        ]
        .into_iter()
        .find(|v| v.name().eq_ignore_ascii_case(s) || v.key() == s)
        .ok_or_else(|| Error::Validation(format!("unknown ablation variant {s:?}")))
    }

    /// Derives the training configuration of this row from the full setting.
    pub fn configure(self, full: &TrainConfig) -> TrainConfig {
        let mut c = TrainConfig {
            cmip_pairing: Pairing::Cross,
            cmfp_pairing: Pairing::Cross,
            shared_views: SharedViews::default(),
            ..full.clone()
        };
        match self {
            Variant::ExemplarOnly => {
                c.use_synthetic = false;
                c.lambda_cmip = 0.0;
                c.lambda_cmfp = 0.0;
            }
            Variant::Sd => {
                c.lambda_cmip = 0.0;
                c.lambda_cmfp = 0.0;
            }
            Variant::SdIp => {
                c.lambda_cmfp = 0.0;
                c.cmip_pairing = Pairing::Individual;
            }
            Variant::SdCmIp => c.lambda_cmfp = 0.0,
            Variant::Full => {}
            Variant::FullIndividualFp => c.cmfp_pairing = Pairing::Individual,
            Variant::FullSameWeak => c.shared_views.unlabeled = true,
        }
        c
    }
}

/// One trained configuration scored on the test volumes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: Variant,
    pub seed: u64,
    pub dsc_avg: f64,
    pub hd95_avg: Option<f64>,
    pub per_class_dsc: Vec<f64>,
    pub final_l_total: f64,
    pub seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub class_names: Vec<String>,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn mean_dsc(&self, v: Variant) -> Option<f64> {
        let d: Vec<f64> = self.rows.iter().filter(|r| r.variant == v).map(|r| r.dsc_avg).collect();
        (!d.is_empty()).then(|| d.iter().sum::<f64>() / d.len() as f64)
    }

    /// Variants in order of first appearance.
    pub fn variants(&self) -> Vec<Variant> {
        let mut out: Vec<Variant> = Vec::new();
        for r in &self.rows {
            if !out.contains(&r.variant) {
                out.push(r.variant);
            }
        }
        out
    }

    /// Per-run rows followed by one `mean` row per variant.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("variant,seed,dsc_avg,hd95_avg");
        for n in &self.class_names {
            let _ = write!(s, ",dsc_{n}");
        }
        s.push('\n');
        let hd = |v: Option<f64>| v.map_or(String::new(), |v| format!("{v:.4}"));
        for r in &self.rows {
            let _ = write!(s, "{},{},{:.6},{}", r.variant.name(), r.seed, r.dsc_avg, hd(r.hd95_avg));
            for d in &r.per_class_dsc {
                let _ = write!(s, ",{d:.6}");
            }
            s.push('\n');
        }
        for v in self.variants() {
            let _ = writeln!(s, "{},mean,{:.6},", v.name(), self.mean_dsc(v).unwrap());
        }
        s
    }

    pub fn to_json(&self) -> serde_json::Value {
        let means: serde_json::Map<String, serde_json::Value> = self
            .variants()
            .into_iter()
            .map(|v| (v.name().to_string(), self.mean_dsc(v).unwrap().into()))
            .collect();
        serde_json::json!({ "runs": self.rows, "mean_dsc": means, "class_names": self.class_names })
    }
}

/// Training settings sized for the toy benchmark on one CPU core, with the
/// mild perturbation and cross-input weight of the abdominal-CT setting.
pub fn toy_train_config() -> TrainConfig {
    TrainConfig {
        batch_size: 2,
        base_channels: 4,
        lr: 1e-3,
        eval_every: 0,
        ..TrainConfig::synapse()
    }
}

/// Shared inputs of an ablation: toy data, the synthetic set and the full
/// training configuration every variant is derived from.
#[derive(Clone, Debug)]
pub struct AblationSetup {
    pub data: TrainData,
    pub full: TrainConfig,
}

impl AblationSetup {
    pub fn new(spec: &ToySpec, synth: &SynthesisConfig, full: TrainConfig) -> Result<Self> {
        let toy = generate_toy_data(spec)?;
        let synth = SynthesisConfig {
            seed: derive_seed(spec.seed, &[tag::SYNTHESIS]),
            ..synth.clone()
        };
        let synthetic = build_synthetic_dataset(&toy.exemplar, &toy.unlabeled, &synth)?;
        Ok(AblationSetup {
            data: TrainData {
                exemplar: toy.exemplar.clone(),
                synthetic: Some(synthetic),
                unlabeled: toy.unlabeled.clone(),
                validation: toy.volumes.clone(),
                class_names: toy.foreground_names(),
            },
            full,
        })
    }

    /// Trains one variant with one seed and scores the final state.
    pub fn run(&self, variant: Variant, seed: u64) -> Result<(AblationRow, Report)> {
        let cfg = TrainConfig {
            seed,
            eval_every: 0,
            ..variant.configure(&self.full)
        };
        let start = std::time::Instant::now();
        let mut state = TrainState::new(&cfg, self.data.num_classes())?;
        let out = fit(&mut state, &self.data, &cfg, None)?;
        let report = evaluate_state(&state, &self.data, cfg.eval_network)?;
        let row = AblationRow {
            variant,
            seed,
            dsc_avg: report.dsc_avg,
            hd95_avg: report.hd95_avg,
            per_class_dsc: report.dsc.clone(),
            final_l_total: out.log.last().map_or(0.0, |r| r.l_total),
            seconds: start.elapsed().as_secs_f64(),
        };
        Ok((row, report))
    }
}

/// Trains every variant with every seed. `progress` sees each finished row.
pub fn run_ablation(
    setup: &AblationSetup,
    variants: &[Variant],
    seeds: &[u64],
    progress: &mut dyn FnMut(&AblationRow),
) -> Result<AblationTable> {
    let mut table = AblationTable {
        class_names: setup.data.class_names.clone(),
        rows: Vec::new(),
    };
    for &v in variants {
        for &s in seeds {
            let (row, _) = setup.run(v, s)?;
            progress(&row);
            table.rows.push(row);
        }
    }
    Ok(table)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ToySpec {
        ToySpec {
            n_unlabeled: 4,
            n_volumes: 2,
            slices_per_volume: 3,
            ..ToySpec::default()
        }
    }

    #[test]
    fn default_cardinality() {
        let d = generate_toy_data(&ToySpec::default()).unwrap();
        assert_eq!(d.unlabeled.len(), 40);
        assert_eq!(d.volumes.len(), 5);
        assert!(d.volumes.iter().all(|v| v.slices.len() == 8));
        assert_eq!(d.exemplar.num_classes(), 4);
    }

    #[test]
    fn deterministic_per_seed() {
        let a = generate_toy_data(&small()).unwrap();
        assert_eq!(a, generate_toy_data(&small()).unwrap());
        let b = generate_toy_data(&ToySpec { seed: 1, ..small() }).unwrap();
        assert_ne!(a.exemplar, b.exemplar);
    }

    #[test]
    fn class_areas_within_bands() {
        let spec = ToySpec::default();
        let d = generate_toy_data(&spec).unwrap();
        let (lo, hi) = spec.size_range;
        let r = spec.annulus_ratio;
        // Continuous areas, widened by one pixel of boundary on each side.
        let bands = [
            (PI * (lo - 1.0).powi(2), PI * (hi + 1.0).powi(2)),
            (4.0 * 0.75 * (lo - 1.0).powi(2), 4.0 * (0.75 * hi + 1.0) * (hi + 1.0)),
            (PI * ((lo - 1.0).powi(2) - (r * lo + 1.0).powi(2)), PI * ((hi + 1.0).powi(2) - (r * hi - 1.0).powi(2))),
        ];
        let hist = d.exemplar.mask.histogram();
        for k in 1..4 {
            let a = hist[k] as f64;
            assert!(a >= bands[k - 1].0 && a <= bands[k - 1].1, "class {k}: {a} outside {:?}", bands[k - 1]);
        }
    }

    #[test]
    fn intensities_overlap_across_classes() {
        let spec = ToySpec::default();
        let d = generate_toy_data(&spec).unwrap();
        let px = d.exemplar.image.pixels();
        let m = d.exemplar.mask.classes();
        let range = |k: u8| {
            let v: Vec<f32> = px.iter().zip(m).filter(|(_, &c)| c == k).map(|(&p, _)| p).collect();
            (v.iter().cloned().fold(f32::MAX, f32::min), v.iter().cloned().fold(f32::MIN, f32::max))
        };
        let (b, disk) = (range(0), range(1));
        assert!(disk.0 < b.1, "disk and background intensities should overlap");
    }

    #[test]
    fn written_manifest_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let spec = small();
        let path = generate_toy(&spec, dir.path()).unwrap();
        let m = DatasetManifest::from_file(&path).unwrap();
        let loaded = crate::datamodel::manifest::load_dataset(dir.path(), &m).unwrap();
        assert_eq!(loaded.unlabeled.len(), 4);
        assert_eq!(loaded.test_volumes.len(), 2);
        assert_eq!(loaded.exemplar.mask, generate_toy_data(&spec).unwrap().exemplar.mask);
    }

    #[test]
    fn variants_toggle_the_right_terms() {
        let full = TrainConfig::default();
        let e = Variant::ExemplarOnly.configure(&full);
        assert!(!e.use_synthetic && e.lambda_cmip == 0.0 && e.lambda_cmfp == 0.0);
        let ip = Variant::SdIp.configure(&full);
        assert_eq!((ip.cmip_pairing, ip.lambda_cmfp), (Pairing::Individual, 0.0));
        assert_eq!(Variant::FullIndividualFp.configure(&full).cmfp_pairing, Pairing::Individual);
        assert!(Variant::FullSameWeak.configure(&full).shared_views.unlabeled);
        assert_eq!(Variant::parse("sd+cm+ip").unwrap(), Variant::SdCmIp);
    }
}
