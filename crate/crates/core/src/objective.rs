//! Losses and pseudo-label generation.
//!
//! Every loss works on a batch of probabilities laid out `K × N × H × W` and a
//! [`Target`] in `N × H × W` order. Pixels whose target is not valid are
//! excluded from every sum. Each loss also has a `*_grad` form returning the
//! gradient with respect to the probabilities; [`softmax_backward`] carries
//! it back to the logits.

use serde::{Deserialize, Serialize};

use crate::datamodel::{ProbMap, PseudoLabel, Target};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

pub const DICE_SMOOTH: f64 = 1e-5;
pub const PROB_CLAMP: f64 = 1e-7;

/// Class-wise softmax with max subtraction.
pub fn softmax_probs<F: Real>(logits: &Tensor<F>) -> Result<ProbMap<F>> {
    if !logits.all_finite() {
        return Err(Error::NonFinite("logits".into()));
    }
    let k = logits.c;
    let plane = logits.plane_len();
    let mut out = logits.clone();
    for p in 0..plane {
        let mut m = F::neg_infinity();
        for c in 0..k {
            m = m.max(logits.data[c * plane + p]);
        }
        let mut sum = F::zero();
        for c in 0..k {
            let e = (logits.data[c * plane + p] - m).exp();
            out.data[c * plane + p] = e;
            sum += e;
        }
        let inv = F::one() / sum;
        for c in 0..k {
            out.data[c * plane + p] *= inv;
        }
    }
    Ok(ProbMap::new_unchecked(out))
}

/// Chain rule through softmax: `dz_k = p_k (g_k − Σ_j p_j g_j)`.
pub fn softmax_backward<F: Real>(probs: &ProbMap<F>, dprobs: &Tensor<F>) -> Tensor<F> {
    let p = probs.tensor();
    assert_eq!(p.shape(), dprobs.shape());
    let (k, plane) = (p.c, p.plane_len());
    let mut dz = Tensor::zeros(p.c, p.n, p.h, p.w);
    for i in 0..plane {
        let mut dot = F::zero();
        for c in 0..k {
            dot += p.data[c * plane + i] * dprobs.data[c * plane + i];
        }
        for c in 0..k {
            let idx = c * plane + i;
            dz.data[idx] = p.data[idx] * (dprobs.data[idx] - dot);
        }
    }
    dz
}

/// Confidence-filtered argmax. Ties resolve to the smallest class index;
/// a pixel is valid iff its largest probability is at least `tau`.
pub fn pseudo_label<F: Real>(p: &ProbMap<F>, tau: f64) -> PseudoLabel {
    let t = p.tensor();
    let (k, plane) = (t.c, t.plane_len());
    let tau = F::lit(tau);
    let mut classes = Vec::with_capacity(plane);
    let mut valid = Vec::with_capacity(plane);
    for i in 0..plane {
        let mut best = 0;
        let mut bv = t.data[i];
        for c in 1..k {
            let v = t.data[c * plane + i];
            if v > bv {
                best = c;
                bv = v;
            }
        }
        classes.push(best as u8);
        valid.push(bv >= tau);
    }
    PseudoLabel {
        classes,
        valid,
        n: t.n,
        height: t.h,
        width: t.w,
    }
}

fn check_target<F: Real>(p: &ProbMap<F>, target: &Target<'_>) -> Result<()> {
    if target.len() != p.pixels() || target.valid.is_some_and(|v| v.len() != p.pixels()) {
        return Err(Error::Shape(format!(
            "target has {} pixels, prediction has {}",
            target.len(),
            p.pixels()
        )));
    }
    if let Some(c) = target.classes.iter().find(|&&c| c as usize >= p.num_classes()) {
        return Err(Error::Shape(format!(
            "target class {c} exceeds K = {}",
            p.num_classes()
        )));
    }
    Ok(())
}

/// Mean over valid pixels of `−ln p[target]`, probabilities clamped into
/// `[1e-7, 1 − 1e-7]`. No valid pixels gives 0.
pub fn ce_loss<F: Real>(p: &ProbMap<F>, target: Target<'_>) -> Result<f64> {
    ce_impl(p, target, false).map(|(v, _)| v)
}

pub fn ce_loss_grad<F: Real>(p: &ProbMap<F>, target: Target<'_>) -> Result<(f64, Tensor<F>)> {
    ce_impl(p, target, true).map(|(v, g)| (v, g.expect("gradient requested")))
}

fn ce_impl<F: Real>(p: &ProbMap<F>, target: Target<'_>, grad: bool) -> Result<(f64, Option<Tensor<F>>)> {
    check_target(p, &target)?;
    let t = p.tensor();
    let plane = t.plane_len();
    let count = (0..plane).filter(|&i| target.is_valid(i)).count();
    let mut g = grad.then(|| Tensor::zeros(t.c, t.n, t.h, t.w));
    if count == 0 {
        return Ok((0.0, g));
    }
    let inv = 1.0 / count as f64;
    let mut sum = 0.0;
    for i in 0..plane {
        if !target.is_valid(i) {
            continue;
        }
        let idx = target.classes[i] as usize * plane + i;
        let pv = t.data[idx].to_f64().unwrap();
        let clamped = pv.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
        sum -= clamped.ln();
        if let Some(g) = g.as_mut() {
            if clamped == pv {
                g.data[idx] = F::lit(-inv / pv);
            }
        }
    }
    Ok((sum * inv, g))
}

/// `1 − mean_k (2Σ p_k t_k + ε) / (Σ p_k + Σ t_k + ε)`, per batch item and
/// averaged over the batch. The background class is included.
pub fn dice_loss<F: Real>(p: &ProbMap<F>, target: Target<'_>) -> Result<f64> {
    dice_impl(p, target, false).map(|(v, _)| v)
}

pub fn dice_loss_grad<F: Real>(p: &ProbMap<F>, target: Target<'_>) -> Result<(f64, Tensor<F>)> {
    dice_impl(p, target, true).map(|(v, g)| (v, g.expect("gradient requested")))
}

fn dice_impl<F: Real>(p: &ProbMap<F>, target: Target<'_>, grad: bool) -> Result<(f64, Option<Tensor<F>>)> {
    check_target(p, &target)?;
    let t = p.tensor();
    let (k, n, hw, plane) = (t.c, t.n, t.hw(), t.plane_len());
    let mut g = grad.then(|| Tensor::zeros(t.c, t.n, t.h, t.w));
    let scale = 1.0 / (k as f64 * n as f64);
    let mut loss = 0.0;
    for s in 0..n {
        let mut item = 0.0;
        for c in 0..k {
            let (mut inter, mut sp, mut st) = (0.0, 0.0, 0.0);
            for q in s * hw..(s + 1) * hw {
                if !target.is_valid(q) {
                    continue;
                }
                let pv = t.data[c * plane + q].to_f64().unwrap();
                let tv = if target.classes[q] as usize == c { 1.0 } else { 0.0 };
                inter += pv * tv;
                sp += pv;
                st += tv;
            }
            let denom = sp + st + DICE_SMOOTH;
            let numer = 2.0 * inter + DICE_SMOOTH;
            item += numer / denom;
            if let Some(g) = g.as_mut() {
                for q in s * hw..(s + 1) * hw {
                    if !target.is_valid(q) {
                        continue;
                    }
                    let tv = if target.classes[q] as usize == c { 1.0 } else { 0.0 };
                    let dd = (2.0 * tv * denom - numer) / (denom * denom);
                    g.data[c * plane + q] = F::lit(-scale * dd);
                }
            }
        }
        loss += 1.0 - item / k as f64;
    }
    Ok((loss / n as f64, g))
}

/// Value of the combined segmentation loss with its two halves.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SegLoss {
    pub ce: f64,
    pub dice: f64,
    pub total: f64,
}

/// `½·CE + ½·Dice`.
pub fn seg_loss<F: Real>(p: &ProbMap<F>, target: Target<'_>) -> Result<f64> {
    let ce = ce_loss(p, target)?;
    let dice = dice_loss(p, target)?;
    Ok(0.5 * ce + 0.5 * dice)
}

pub fn seg_loss_grad<F: Real>(p: &ProbMap<F>, target: Target<'_>) -> Result<(SegLoss, Tensor<F>)> {
    let (ce, mut g) = ce_loss_grad(p, target)?;
    let (dice, gd) = dice_loss_grad(p, target)?;
    let half = F::lit(0.5);
    g.data
        .iter_mut()
        .zip(&gd.data)
        .for_each(|(a, &b)| *a = (*a + b) * half);
    Ok((
        SegLoss {
            ce,
            dice,
            total: 0.5 * ce + 0.5 * dice,
        },
        g,
    ))
}

/// Segmentation loss on raw logits. Returns the loss and `weight · dL/dlogits`.
pub fn seg_loss_logits<F: Real>(
    logits: &Tensor<F>,
    target: Target<'_>,
    weight: f64,
) -> Result<(SegLoss, Tensor<F>)> {
    let p = softmax_probs(logits)?;
    let (loss, mut dp) = seg_loss_grad(&p, target)?;
    if weight != 1.0 {
        let w = F::lit(weight);
        dp.data.iter_mut().for_each(|v| *v *= w);
    }
    Ok((loss, softmax_backward(&p, &dp)))
}

/// Which network's pseudo-label supervises network `m`'s prediction.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pairing {
    /// Network `m` learns from the other network's pseudo-label.
    #[default]
    Cross,
    /// Network `m` learns from its own pseudo-label.
    Individual,
}

impl Pairing {
    /// Index (0-based) of the pseudo-label that supervises network `m`.
    pub fn teacher(self, m: usize) -> usize {
        match self {
            Pairing::Cross => 1 - m,
            Pairing::Individual => m,
        }
    }
}

/// `Σ_m seg_loss(preds[m], pseudos[teacher(m)])` for two networks.
pub fn paired_consistency_loss<F: Real>(
    preds: [&ProbMap<F>; 2],
    pseudos: [&PseudoLabel; 2],
    pairing: Pairing,
) -> Result<f64> {
    let mut total = 0.0;
    for (m, pred) in preds.iter().enumerate() {
        total += seg_loss(pred, pseudos[pairing.teacher(m)].as_target())?;
    }
    Ok(total)
}

/// Image-perturbation consistency: strong-view predictions of network `m`
/// supervised by network `m̄`'s weak-view pseudo-label.
pub fn cmip_loss<F: Real>(preds: [&ProbMap<F>; 2], pseudos: [&PseudoLabel; 2]) -> Result<f64> {
    paired_consistency_loss(preds, pseudos, Pairing::Cross)
}

/// Feature-perturbation consistency: predictions decoded from dropped-out
/// features of network `m` supervised by network `m̄`'s pseudo-label.
pub fn cmfp_loss<F: Real>(preds: [&ProbMap<F>; 2], pseudos: [&PseudoLabel; 2]) -> Result<f64> {
    paired_consistency_loss(preds, pseudos, Pairing::Cross)
}

/// Loss weights of the two consistency terms.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub cmip: f64,
    pub cmfp: f64,
}

impl LossWeights {
    /// Cardiac-MRI setting.
    pub const ACDC: LossWeights = LossWeights { cmip: 1.0, cmfp: 0.09 };
    /// Abdominal-CT setting.
    pub const SYNAPSE: LossWeights = LossWeights { cmip: 0.1, cmfp: 0.09 };
}

/// One network's share of each term.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct NetworkTerms {
    pub e: f64,
    pub s: f64,
    pub cmip: f64,
    pub cmfp: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_e: f64,
    pub l_s: f64,
    pub l_cmip: f64,
    pub l_cmfp: f64,
    pub l_total: f64,
    pub per_network: [NetworkTerms; 2],
}

/// Sums per-network terms and applies the weights:
/// `l_total = l_e + l_s + λ_cmip·l_cmip + λ_cmfp·l_cmfp`.
pub fn total_loss(per_network: [NetworkTerms; 2], weights: LossWeights) -> LossBreakdown {
    let sum = |f: fn(&NetworkTerms) -> f64| f(&per_network[0]) + f(&per_network[1]);
    let l_e = sum(|t| t.e);
    let l_s = sum(|t| t.s);
    let l_cmip = sum(|t| t.cmip);
    let l_cmfp = sum(|t| t.cmfp);
    LossBreakdown {
        l_e,
        l_s,
        l_cmip,
        l_cmfp,
        l_total: combine(l_e, l_s, l_cmip, l_cmfp, weights),
        per_network,
    }
}

#[inline]
pub fn combine(l_e: f64, l_s: f64, l_cmip: f64, l_cmfp: f64, w: LossWeights) -> f64 {
    l_e + l_s + w.cmip * l_cmip + w.cmfp * l_cmfp
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn probs(k: usize, n: usize, h: usize, w: usize, per_pixel: &[&[f64]]) -> ProbMap<f64> {
        // per_pixel[i] holds the K probabilities of pixel i (NHW order).
        let plane = n * h * w;
        let mut data = vec![0.0; k * plane];
        for (i, px) in per_pixel.iter().enumerate() {
            for c in 0..k {
                data[c * plane + i] = px[c];
            }
        }
        ProbMap::new(Tensor::from_vec(data, k, n, h, w)).unwrap()
    }

    #[test]
    fn softmax_uniform_and_stable() {
        let z = Tensor::<f64>::zeros(4, 1, 1, 1);
        let p = softmax_probs(&z).unwrap();
        assert!(p.tensor().data.iter().all(|&v| v == 0.25));
        let z = Tensor::<f64>::from_vec(vec![1000.0, 0.0], 2, 1, 1, 1);
        let p = softmax_probs(&z).unwrap();
        assert_eq!(p.tensor().data, vec![1.0, 0.0]);
    }

    #[test]
    fn softmax_rejects_nan() {
        let z = Tensor::<f32>::from_vec(vec![f32::NAN, 0.0], 2, 1, 1, 1);
        assert!(matches!(softmax_probs(&z), Err(Error::NonFinite(_))));
    }

    #[test]
    fn pseudo_label_threshold() {
        let p = probs(2, 1, 1, 2, &[&[0.9, 0.1], &[0.6, 0.4]]);
        let pl = pseudo_label(&p, 0.8);
        assert_eq!(pl.classes, vec![0, 0]);
        assert_eq!(pl.valid, vec![true, false]);
    }

    #[test]
    fn pseudo_label_ties_go_low() {
        let p = probs(3, 1, 1, 1, &[&[0.25, 0.375, 0.375]]);
        assert_eq!(pseudo_label(&p, 0.5).classes, vec![1]);
    }

    #[test]
    fn ce_closed_forms() {
        let p = probs(4, 1, 1, 2, &[&[0.25; 4], &[0.25; 4]]);
        let t = [1u8, 3];
        assert_abs_diff_eq!(ce_loss(&p, Target::dense(&t)).unwrap(), 4f64.ln(), epsilon = 1e-12);
        let p = probs(2, 1, 1, 2, &[&[1.0, 0.0], &[0.0, 1.0]]);
        let v = ce_loss(&p, Target::dense(&[0, 1])).unwrap();
        assert!(v <= 1.2e-7, "{v}");
    }

    #[test]
    fn ce_ignores_invalid_pixels() {
        let p = probs(2, 1, 1, 4, &[&[0.7, 0.3], &[0.2, 0.8], &[0.5, 0.5], &[0.9, 0.1]]);
        let classes = [0u8, 1, 0, 1];
        let valid = [true, true, false, false];
        let masked = ce_loss(&p, Target { classes: &classes, valid: Some(&valid) }).unwrap();
        let half = probs(2, 1, 1, 2, &[&[0.7, 0.3], &[0.2, 0.8]]);
        let expect = ce_loss(&half, Target::dense(&[0, 1])).unwrap();
        assert_abs_diff_eq!(masked, expect, epsilon = 1e-15);
        let none = [false; 4];
        assert_eq!(ce_loss(&p, Target { classes: &classes, valid: Some(&none) }).unwrap(), 0.0);
    }

    #[test]
    fn dice_closed_forms() {
        let t = [0u8, 0, 1, 1];
        let exact = probs(2, 1, 2, 2, &[&[1.0, 0.0], &[1.0, 0.0], &[0.0, 1.0], &[0.0, 1.0]]);
        assert!(dice_loss(&exact, Target::dense(&t)).unwrap() <= 1e-4);
        let half = probs(2, 1, 2, 2, &[&[0.5, 0.5][..]; 4]);
        assert_abs_diff_eq!(dice_loss(&half, Target::dense(&t)).unwrap(), 0.5, epsilon = 1e-5);
        let wrong = probs(2, 1, 2, 2, &[&[0.0, 1.0], &[0.0, 1.0], &[1.0, 0.0], &[1.0, 0.0]]);
        assert!(dice_loss(&wrong, Target::dense(&t)).unwrap() > 1.0 - 1e-5);
    }

    #[test]
    fn seg_loss_is_even_mix() {
        let p = probs(3, 1, 1, 3, &[&[0.2, 0.5, 0.3], &[0.6, 0.3, 0.1], &[0.1, 0.1, 0.8]]);
        let t = Target::dense(&[1, 0, 2]);
        let s = seg_loss(&p, t).unwrap();
        let expect = 0.5 * ce_loss(&p, t).unwrap() + 0.5 * dice_loss(&p, t).unwrap();
        assert_eq!(s, expect);
    }

    #[test]
    fn weighted_total() {
        let terms = [
            NetworkTerms { e: 0.5, s: 1.0, cmip: 1.5, cmfp: 2.0 },
            NetworkTerms { e: 0.5, s: 1.0, cmip: 1.5, cmfp: 2.0 },
        ];
        let b = total_loss(terms, LossWeights { cmip: 0.1, cmfp: 0.09 });
        assert_eq!((b.l_e, b.l_s, b.l_cmip, b.l_cmfp), (1.0, 2.0, 3.0, 4.0));
        assert_abs_diff_eq!(b.l_total, 3.66, epsilon = 1e-12);
        let sup = total_loss(terms, LossWeights { cmip: 0.0, cmfp: 0.0 });
        assert_eq!(sup.l_total, sup.l_e + sup.l_s);
        assert_eq!(LossWeights::ACDC, LossWeights { cmip: 1.0, cmfp: 0.09 });
    }

    #[test]
    fn cmip_with_empty_supervision_is_zero() {
        let p = probs(2, 1, 1, 2, &[&[0.6, 0.4], &[0.3, 0.7]]);
        let empty = PseudoLabel { classes: vec![0, 1], valid: vec![false; 2], n: 1, height: 1, width: 2 };
        assert_eq!(cmip_loss([&p, &p], [&empty, &empty]).unwrap(), 0.0);
        let full = PseudoLabel { valid: vec![true; 2], ..empty.clone() };
        // Network 1 is supervised by pseudo 2 (empty), network 2 by pseudo 1 (full).
        let v = cmip_loss([&p, &p], [&full, &empty]).unwrap();
        assert_eq!(v, seg_loss(&p, full.as_target()).unwrap());
        assert_eq!(cmfp_loss([&p, &p], [&full, &empty]).unwrap(), v);
    }

    #[test]
    fn shape_mismatch_is_error() {
        let p = probs(2, 1, 1, 2, &[&[0.6, 0.4], &[0.3, 0.7]]);
        assert!(ce_loss(&p, Target::dense(&[0])).is_err());
        assert!(dice_loss(&p, Target::dense(&[0, 2])).is_err());
    }
}
