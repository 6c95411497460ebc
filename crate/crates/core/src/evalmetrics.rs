//! Volume-level DSC and HD95, slice-wise inference and case reports.
//!
//! Slices of a case are predicted independently, restacked, and scored in
//! 3D with unit spacing. HD95 is the 95th percentile (linear interpolation)
//! of the pooled surface distances in both directions, where a surface voxel
//! is a mask voxel removed by one 6-connected erosion with the outside of
//! the volume treated as background.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::datamodel::{stack_images, LabelMask, TestVolume};
use crate::error::{Error, Result};
use crate::objective::softmax_probs;
use crate::segnet::UNet;
use crate::tensor::Tensor;

/// Depth × height × width.
pub type Dims = [usize; 3];

fn check_dims(pred: &[u8], gt: &[u8], dims: Dims) -> Result<()> {
    let n = dims.iter().product::<usize>();
    if pred.len() != n || gt.len() != n {
        return Err(Error::Shape(format!(
            "prediction has {} voxels, ground truth {}, expected {n}",
            pred.len(),
            gt.len()
        )));
    }
    Ok(())
}

/// `2|P∩G| / (|P| + |G|)`; 1.0 when class `k` is absent from both.
pub fn dsc_volume(pred: &[u8], gt: &[u8], k: u8) -> f64 {
    let (mut inter, mut p, mut g) = (0usize, 0usize, 0usize);
    for (&a, &b) in pred.iter().zip(gt) {
        let (pa, gb) = (a == k, b == k);
        inter += (pa && gb) as usize;
        p += pa as usize;
        g += gb as usize;
    }
    if p + g == 0 {
        1.0
    } else {
        2.0 * inter as f64 / (p + g) as f64
    }
}

pub fn dsc(pred: &LabelMask, gt: &LabelMask, k: u8) -> Result<f64> {
    let (h, w) = gt.dims();
    check_dims(pred.classes(), gt.classes(), [1, h, w])?;
    Ok(dsc_volume(pred.classes(), gt.classes(), k))
}

/// Voxels of `mask` with at least one 6-neighbour outside the mask or the volume.
pub fn surface(mask: &[bool], dims: Dims) -> Vec<bool> {
    let [d, h, w] = dims;
    let at = |z: isize, y: isize, x: isize| -> bool {
        z >= 0
            && y >= 0
            && x >= 0
            && (z as usize) < d
            && (y as usize) < h
            && (x as usize) < w
            && mask[(z as usize * h + y as usize) * w + x as usize]
    };
    let mut out = vec![false; mask.len()];
    for z in 0..d as isize {
        for y in 0..h as isize {
            for x in 0..w as isize {
                if !at(z, y, x) {
                    continue;
                }
                let interior = at(z - 1, y, x)
                    && at(z + 1, y, x)
                    && at(z, y - 1, x)
                    && at(z, y + 1, x)
                    && at(z, y, x - 1)
                    && at(z, y, x + 1);
                out[(z as usize * h + y as usize) * w + x as usize] = !interior;
            }
        }
    }
    out
}

/// Exact squared distance transform of one line (lower envelope of parabolas).
fn edt_1d(f: &[f64], out: &mut [f64], v: &mut [usize], z: &mut [f64]) {
    let n = f.len();
    let mut k = 0usize;
    let first = match (0..n).find(|&q| f[q].is_finite()) {
        Some(q) => q,
        None => {
            out.fill(f64::INFINITY);
            return;
        }
    };
    v[0] = first;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    for q in first + 1..n {
        if !f[q].is_finite() {
            continue;
        }
        loop {
            let p = v[k];
            let s = ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2.0 * (q as f64 - p as f64));
            if s <= z[k] {
                k -= 1;
                continue;
            }
            k += 1;
            v[k] = q;
            z[k] = s;
            z[k + 1] = f64::INFINITY;
            break;
        }
    }
    k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let d = q as f64 - v[k] as f64;
        *o = d * d + f[v[k]];
    }
}

/// Euclidean distance from every voxel to the nearest `true` voxel of `features`.
pub fn distance_transform(features: &[bool], dims: Dims) -> Vec<f64> {
    let [d, h, w] = dims;
    let mut g: Vec<f64> = features.iter().map(|&f| if f { 0.0 } else { f64::INFINITY }).collect();
    let longest = d.max(h).max(w);
    let (mut line, mut out) = (vec![0.0; longest], vec![0.0; longest]);
    let (mut v, mut z) = (vec![0usize; longest], vec![0.0; longest + 1]);
    let mut pass = |len: usize, stride: usize, starts: Vec<usize>, g: &mut Vec<f64>| {
        for s in starts {
            for i in 0..len {
                line[i] = g[s + i * stride];
            }
            edt_1d(&line[..len], &mut out[..len], &mut v, &mut z);
            for i in 0..len {
                g[s + i * stride] = out[i];
            }
        }
    };
    let rows: Vec<usize> = (0..d * h).map(|r| r * w).collect();
    pass(w, 1, rows, &mut g);
    let cols: Vec<usize> = (0..d).flat_map(|zz| (0..w).map(move |x| zz * h * w + x)).collect();
    pass(h, w, cols, &mut g);
    let depth: Vec<usize> = (0..h * w).collect();
    pass(d, h * w, depth, &mut g);
    g.into_iter().map(f64::sqrt).collect()
}

/// Linear-interpolation percentile, `q` in `[0, 100]`.
pub fn percentile(values: &mut [f64], q: f64) -> f64 {
    assert!(!values.is_empty());
    values.sort_by(f64::total_cmp);
    let pos = q / 100.0 * (values.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(values.len() - 1);
    values[lo] + (values[hi] - values[lo]) * (pos - lo as f64)
}

/// Directed surface distances from `a`'s surface to `b`'s surface.
fn directed(a_surface: &[bool], b_surface: &[bool], dims: Dims) -> Vec<f64> {
    let dt = distance_transform(b_surface, dims);
    a_surface
        .iter()
        .zip(&dt)
        .filter_map(|(&s, &d)| s.then_some(d))
        .collect()
}

/// 95th-percentile symmetric surface distance, `None` if either side lacks class `k`.
pub fn hd95_volume(pred: &[u8], gt: &[u8], dims: Dims, k: u8) -> Result<Option<f64>> {
    check_dims(pred, gt, dims)?;
    let p: Vec<bool> = pred.iter().map(|&c| c == k).collect();
    let g: Vec<bool> = gt.iter().map(|&c| c == k).collect();
    if !p.contains(&true) || !g.contains(&true) {
        return Ok(None);
    }
    let (ps, gs) = (surface(&p, dims), surface(&g, dims));
    let mut all = directed(&ps, &gs, dims);
    all.extend(directed(&gs, &ps, dims));
    Ok(Some(percentile(&mut all, 95.0)))
}

pub fn hd95(pred: &LabelMask, gt: &LabelMask, k: u8) -> Result<Option<f64>> {
    let (h, w) = gt.dims();
    hd95_volume(pred.classes(), gt.classes(), [1, h, w], k)
}

/// Which trained network produces test predictions.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum NetworkSelector {
    #[default]
    #[serde(rename = "1")]
    First,
    #[serde(rename = "2")]
    Second,
    /// Mean of the two networks' probabilities.
    #[serde(rename = "avg")]
    Average,
}

impl FromStr for NetworkSelector {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "1" => Ok(Self::First),
            "2" => Ok(Self::Second),
            "avg" => Ok(Self::Average),
            other => Err(Error::Validation(format!(
                "network selector must be 1, 2 or avg, got {other:?}"
            ))),
        }
    }
}

/// Per-case scores for foreground classes `1..K`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VolumeResult {
    pub case_id: String,
    pub dsc: Vec<f64>,
    pub hd95: Vec<Option<f64>>,
}

impl VolumeResult {
    pub fn dsc_avg(&self) -> f64 {
        self.dsc.iter().sum::<f64>() / self.dsc.len() as f64
    }
}

/// Scores stacked slice predictions against stacked ground truth.
pub fn score_volume(case_id: &str, pred: &[LabelMask], gt: &[LabelMask], num_classes: usize) -> Result<VolumeResult> {
    if pred.len() != gt.len() || gt.is_empty() {
        return Err(Error::Shape(format!(
            "case {case_id}: {} predicted slices for {} labelled slices",
            pred.len(),
            gt.len()
        )));
    }
    let (h, w) = gt[0].dims();
    if let Some(i) = (0..gt.len()).find(|&i| pred[i].dims() != (h, w) || gt[i].dims() != (h, w)) {
        return Err(Error::Shape(format!("case {case_id}: slice {i} shape mismatch")));
    }
    let p: Vec<u8> = pred.iter().flat_map(|m| m.classes().iter().copied()).collect();
    let g: Vec<u8> = gt.iter().flat_map(|m| m.classes().iter().copied()).collect();
    let dims = [gt.len(), h, w];
    let mut result = VolumeResult {
        case_id: case_id.to_string(),
        dsc: Vec::new(),
        hd95: Vec::new(),
    };
    for k in 1..num_classes as u8 {
        result.dsc.push(dsc_volume(&p, &g, k));
        result.hd95.push(hd95_volume(&p, &g, dims, k)?);
    }
    Ok(result)
}

/// Eval-mode argmax prediction of a batch of slices.
pub fn predict_slices(nets: &[UNet<f32>; 2], which: NetworkSelector, x: &Tensor<f32>) -> Result<Vec<LabelMask>> {
    let probs = match which {
        NetworkSelector::First => softmax_probs(&nets[0].forward_eval(x)?)?.into_tensor(),
        NetworkSelector::Second => softmax_probs(&nets[1].forward_eval(x)?)?.into_tensor(),
        NetworkSelector::Average => {
            let mut a = softmax_probs(&nets[0].forward_eval(x)?)?.into_tensor();
            let b = softmax_probs(&nets[1].forward_eval(x)?)?.into_tensor();
            a.data.iter_mut().zip(&b.data).for_each(|(u, v)| *u = 0.5 * (*u + v));
            a
        }
    };
    let (k, n, hw) = (probs.c, probs.n, probs.hw());
    let plane = probs.plane_len();
    (0..n)
        .map(|s| {
            let classes = (0..hw)
                .map(|i| {
                    let p = s * hw + i;
                    let mut best = 0;
                    for c in 1..k {
                        if probs.data[c * plane + p] > probs.data[best * plane + p] {
                            best = c;
                        }
                    }
                    best as u8
                })
                .collect();
            LabelMask::new(classes, probs.h, probs.w, k)
        })
        .collect()
}

pub fn evaluate_volume(nets: &[UNet<f32>; 2], volume: &TestVolume, which: NetworkSelector) -> Result<VolumeResult> {
    let k = nets[0].num_classes();
    if let Some(l) = volume.labels.iter().find(|l| l.num_classes() > k) {
        return Err(Error::Validation(format!(
            "case {} has {} classes, network predicts {k}",
            volume.id,
            l.num_classes()
        )));
    }
    let x = stack_images::<f32, _>(volume.slices.iter());
    let pred = predict_slices(nets, which, &x)?;
    score_volume(&volume.id, &pred, &volume.labels, k)
}

/// Evaluates every case and averages into a report.
pub fn evaluate_dataset(
    nets: &[UNet<f32>; 2],
    volumes: &[TestVolume],
    which: NetworkSelector,
    class_names: &[String],
) -> Result<Report> {
    let results = volumes
        .iter()
        .map(|v| evaluate_volume(nets, v, which))
        .collect::<Result<Vec<_>>>()?;
    report(&results, class_names)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassScore {
    pub dsc: f64,
    pub hd95: Option<f64>,
}

/// Case-averaged scores. `hd95` entries average defined values only and are
/// `None` when no case defines them.
#[derive(Clone, Debug, PartialEq)]
pub struct Report {
    pub class_names: Vec<String>,
    pub dsc: Vec<f64>,
    pub hd95: Vec<Option<f64>>,
    pub dsc_avg: f64,
    pub hd95_avg: Option<f64>,
    pub cases: usize,
}

fn mean_defined(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let (sum, n) = values.flatten().fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

/// `class_names` lists the foreground classes in order.
pub fn report(results: &[VolumeResult], class_names: &[String]) -> Result<Report> {
    let first = results
        .first()
        .ok_or_else(|| Error::Validation("no cases to report".into()))?;
    let classes = first.dsc.len();
    if class_names.len() != classes || results.iter().any(|r| r.dsc.len() != classes || r.hd95.len() != classes) {
        return Err(Error::Validation("cases disagree on the number of classes".into()));
    }
    let dsc: Vec<f64> = (0..classes)
        .map(|k| results.iter().map(|r| r.dsc[k]).sum::<f64>() / results.len() as f64)
        .collect();
    let hd95: Vec<Option<f64>> = (0..classes)
        .map(|k| mean_defined(results.iter().map(|r| r.hd95[k])))
        .collect();
    Ok(Report {
        class_names: class_names.to_vec(),
        dsc_avg: dsc.iter().sum::<f64>() / classes as f64,
        hd95_avg: mean_defined(hd95.iter().copied()),
        dsc,
        hd95,
        cases: results.len(),
    })
}

impl Report {
    pub fn per_class(&self) -> BTreeMap<String, ClassScore> {
        self.class_names
            .iter()
            .zip(self.dsc.iter().zip(&self.hd95))
            .map(|(n, (&dsc, &hd95))| (n.clone(), ClassScore { dsc, hd95 }))
            .collect()
    }

    /// `{dsc_avg, hd95_avg, per_class: {name: {dsc, hd95}}}`.
    pub fn to_json(&self) -> serde_json::Value {
        serde_json::json!({
            "dsc_avg": self.dsc_avg,
            "hd95_avg": self.hd95_avg,
            "per_class": self.per_class(),
        })
    }

    /// Aligned text table: one header row, one row of values.
    pub fn to_table(&self) -> String {
        let mut cols = vec![("DSC".to_string(), format!("{:.4}", self.dsc_avg))];
        let fmt_hd = |v: Option<f64>| v.map_or("n/a".to_string(), |v| format!("{v:.2}"));
        cols.push(("HD95".to_string(), fmt_hd(self.hd95_avg)));
        for (name, d) in self.class_names.iter().zip(&self.dsc) {
            cols.push((name.clone(), format!("{d:.4}")));
        }
        let mut head = String::new();
        let mut row = String::new();
        for (h, v) in &cols {
            let wdt = h.len().max(v.len());
            let _ = write!(head, "{h:>wdt$}  ");
            let _ = write!(row, "{v:>wdt$}  ");
        }
        format!("{}\n{}\n", head.trim_end(), row.trim_end())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn brute_hd95(p: &[bool], g: &[bool], dims: Dims) -> f64 {
        let coords = |s: &[bool]| -> Vec<[f64; 3]> {
            let [_, h, w] = dims;
            s.iter()
                .enumerate()
                .filter(|(_, &b)| b)
                .map(|(i, _)| [(i / (h * w)) as f64, ((i / w) % h) as f64, (i % w) as f64])
                .collect()
        };
        let (a, b) = (coords(&surface(p, dims)), coords(&surface(g, dims)));
        let dist = |u: &[f64; 3], v: &[f64; 3]| ((u[0] - v[0]).powi(2) + (u[1] - v[1]).powi(2) + (u[2] - v[2]).powi(2)).sqrt();
        let mut all: Vec<f64> = a.iter().map(|u| b.iter().map(|v| dist(u, v)).fold(f64::INFINITY, f64::min)).collect();
        all.extend(b.iter().map(|v| a.iter().map(|u| dist(u, v)).fold(f64::INFINITY, f64::min)));
        percentile(&mut all, 95.0)
    }

    #[test]
    fn dsc_hand_examples() {
        let g = LabelMask::new(vec![1, 0, 0, 0], 2, 2, 2).unwrap();
        let p = LabelMask::new(vec![1, 1, 0, 0], 2, 2, 2).unwrap();
        assert_abs_diff_eq!(dsc(&p, &g, 1).unwrap(), 2.0 / 3.0, epsilon = 1e-15);
        assert_eq!(dsc(&g, &g, 1).unwrap(), 1.0);
        let q = LabelMask::new(vec![0, 0, 0, 1], 2, 2, 2).unwrap();
        assert_eq!(dsc(&q, &g, 1).unwrap(), 0.0);
        let e = LabelMask::background(2, 2, 2).unwrap();
        assert_eq!(dsc(&e, &e, 1).unwrap(), 1.0);
    }

    #[test]
    fn hd95_hand_examples() {
        let mut a = vec![0u8; 16 * 16];
        let mut b = a.clone();
        a[5 * 16 + 4] = 1;
        b[5 * 16 + 7] = 1;
        let ma = LabelMask::new(a.clone(), 16, 16, 2).unwrap();
        let mb = LabelMask::new(b, 16, 16, 2).unwrap();
        assert_eq!(hd95(&ma, &mb, 1).unwrap(), Some(3.0));
        assert_eq!(hd95(&ma, &ma, 1).unwrap(), Some(0.0));
        let e = LabelMask::background(16, 16, 2).unwrap();
        assert_eq!(hd95(&e, &ma, 1).unwrap(), None);
    }

    #[test]
    fn hd95_offset_squares_match_brute_force() {
        let dims = [1, 16, 16];
        let square = |oy: usize| -> Vec<bool> {
            (0..256).map(|i| (oy..oy + 5).contains(&(i / 16)) && (3..8).contains(&(i % 16))).collect()
        };
        let (p, g) = (square(2), square(4));
        let pu: Vec<u8> = p.iter().map(|&b| b as u8).collect();
        let gu: Vec<u8> = g.iter().map(|&b| b as u8).collect();
        let v = hd95_volume(&pu, &gu, dims, 1).unwrap().unwrap();
        assert_abs_diff_eq!(v, brute_hd95(&p, &g, dims), epsilon = 1e-12);
        assert_abs_diff_eq!(v, 2.0, epsilon = 1e-12);
    }

    #[test]
    fn distance_transform_matches_brute_force() {
        let dims = [3, 5, 7];
        let f: Vec<bool> = (0..105).map(|i| i % 17 == 3 || i == 50).collect();
        let dt = distance_transform(&f, dims);
        for (i, &d) in dt.iter().enumerate() {
            let (z, y, x) = ((i / 35) as f64, ((i / 7) % 5) as f64, (i % 7) as f64);
            let best = f
                .iter()
                .enumerate()
                .filter(|(_, &b)| b)
                .map(|(j, _)| {
                    let (zz, yy, xx) = ((j / 35) as f64, ((j / 7) % 5) as f64, (j % 7) as f64);
                    ((z - zz).powi(2) + (y - yy).powi(2) + (x - xx).powi(2)).sqrt()
                })
                .fold(f64::INFINITY, f64::min);
            assert_eq!(d, best);
        }
    }

    #[test]
    fn surface_of_solid_cube() {
        let dims = [3, 3, 3];
        let s = surface(&[true; 27], dims);
        assert_eq!(s.iter().filter(|&&b| b).count(), 26);
        assert!(!s[13]);
    }

    #[test]
    fn numpy_percentile() {
        let mut v = vec![1.0, 2.0, 3.0, 4.0, 5.0];
        assert_eq!(percentile(&mut v, 95.0), 4.8);
        assert_eq!(percentile(&mut [7.0], 95.0), 7.0);
    }

    #[test]
    fn report_averages() {
        let names = vec!["a".to_string(), "b".to_string()];
        let r1 = VolumeResult { case_id: "1".into(), dsc: vec![0.4, 1.0], hd95: vec![Some(2.0), None] };
        let r2 = VolumeResult { case_id: "2".into(), dsc: vec![0.6, 0.0], hd95: vec![Some(4.0), Some(6.0)] };
        let single = report(std::slice::from_ref(&r1), &names).unwrap();
        assert_eq!(single.dsc, r1.dsc);
        assert_eq!(single.hd95, r1.hd95);
        let r = report(&[r1, r2], &names).unwrap();
        assert_abs_diff_eq!(r.dsc[0], 0.5, epsilon = 1e-15);
        assert_eq!(r.hd95, vec![Some(3.0), Some(6.0)]);
        assert_abs_diff_eq!(r.hd95_avg.unwrap(), 4.5);
        let j = r.to_json();
        assert_eq!(j["per_class"]["b"]["hd95"], 6.0);
        assert!(r.to_table().lines().count() == 2);
    }

    #[test]
    fn gt_as_prediction_is_perfect() {
        let c: Vec<u8> = (0..256).map(|i| ((i / 16) / 6) as u8).collect();
        let m = LabelMask::new(c, 16, 16, 3).unwrap();
        let r = score_volume("x", &[m.clone(), m.clone()], &[m.clone(), m], 3).unwrap();
        assert_eq!(r.dsc, vec![1.0, 1.0]);
        assert_eq!(r.hd95, vec![Some(0.0), Some(0.0)]);
    }

    #[test]
    fn selector_parsing() {
        assert_eq!("avg".parse::<NetworkSelector>().unwrap(), NetworkSelector::Average);
        assert!("3".parse::<NetworkSelector>().is_err());
    }
}
