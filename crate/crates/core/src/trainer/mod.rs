//! Two-network training loop.
//!
//! Every step draws independent weak views of the exemplar, synthetic and
//! unlabeled images for each network, produces confidence-filtered
//! pseudo-labels in evaluation mode, and accumulates gradients of
//! `L_e + L_s + λ_cmip·L_cmip + λ_cmfp·L_cmfp` pass by pass before a single
//! Adam update over both networks.
//!
//! All randomness is drawn from streams keyed by `(seed, iteration, …)`, so a
//! step depends only on the configuration, the iteration number and the
//! network/optimizer state. Terms with zero weight are skipped entirely.

pub mod checkpoint;

use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::datamodel::{
    stack_images, stack_masks, ExemplarDataset, Image, LabelMask, PseudoLabel, SyntheticDataset, Target, TestVolume,
    UnlabeledDataset,
};
use crate::error::{Error, Result};
use crate::evalmetrics::{evaluate_dataset, NetworkSelector, Report};
use crate::objective::{pseudo_label, seg_loss_logits, softmax_probs, total_loss, LossBreakdown, LossWeights, NetworkTerms, Pairing};
use crate::perturbation::{apply_strong, apply_weak_image, apply_weak_mask, feature_perturb, StrongParams, WeakConfig, WeakParams};
use crate::rng::{derive_seed, substream, tag};
use crate::segnet::{UNet, UNetConfig};
use crate::tensor::{Real, Tensor};

/// Whether both networks see the same weak view of a data source.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct SharedViews {
    pub exemplar: bool,
    pub synthetic: bool,
    pub unlabeled: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Pseudo-label confidence threshold.
    pub tau: f64,
    /// Strong-perturbation intensity factor.
    pub alpha: f64,
    pub lambda_cmip: f64,
    pub lambda_cmfp: f64,
    pub max_iter: u64,
    pub seed: u64,
    /// Validation interval in steps; 0 disables periodic evaluation.
    pub eval_every: u64,
    pub base_channels: usize,
    pub use_synthetic: bool,
    pub cmip_pairing: Pairing,
    pub cmfp_pairing: Pairing,
    pub shared_views: SharedViews,
    /// Treat below-threshold pixels as background targets instead of ignoring them.
    pub literal_eq3: bool,
    pub weak: WeakConfig,
    pub eval_network: NetworkSelector,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 12,
            lr: 3e-4,
            weight_decay: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            tau: 0.8,
            alpha: 1.0,
            lambda_cmip: 1.0,
            lambda_cmfp: 0.09,
            max_iter: 2000,
            seed: 0,
            eval_every: 200,
            base_channels: 16,
            use_synthetic: true,
            cmip_pairing: Pairing::Cross,
            cmfp_pairing: Pairing::Cross,
            shared_views: SharedViews::default(),
            literal_eq3: false,
            weak: WeakConfig::default(),
            eval_network: NetworkSelector::First,
        }
    }
}

impl TrainConfig {
    /// Abdominal-CT setting: `α = 0.2`, `λ = (0.1, 0.09)`.
    pub fn synapse() -> Self {
        TrainConfig {
            alpha: 0.2,
            lambda_cmip: 0.1,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if !(self.lr > 0.0) || !(self.weight_decay >= 0.0) || !(self.adam_eps > 0.0) {
            return bad("lr and adam_eps must be positive, weight_decay nonnegative".into());
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("Adam betas must lie in [0, 1)".into());
        }
        if !(self.tau > 0.0 && self.tau < 1.0) {
            return bad(format!("tau must lie in (0, 1), got {}", self.tau));
        }
        if !(self.alpha >= 0.0) || !(self.lambda_cmip >= 0.0) || !(self.lambda_cmfp >= 0.0) {
            return bad("alpha and loss weights must be nonnegative".into());
        }
        if self.base_channels == 0 {
            return bad("base_channels must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.weak.flip_prob) || !(self.weak.max_angle_deg >= 0.0) {
            return bad("weak perturbation ranges are invalid".into());
        }
        Ok(())
    }

    pub fn weights(&self) -> LossWeights {
        LossWeights {
            cmip: self.lambda_cmip,
            cmfp: self.lambda_cmfp,
        }
    }

    fn needs_unlabeled(&self) -> bool {
        self.lambda_cmip > 0.0 || self.lambda_cmfp > 0.0
    }

    /// Hash of every setting that influences the training trajectory.
    pub fn config_hash(&self) -> u64 {
        let canonical = TrainConfig {
            max_iter: 0,
            eval_every: 0,
            eval_network: NetworkSelector::First,
            ..self.clone()
        };
        let text = serde_json::to_string(&canonical).expect("config serializes");
        text.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
            (h ^ b as u64).wrapping_mul(0x0100_0000_01b3)
        })
    }
}

/// Everything the loop trains and validates on.
#[derive(Clone, Debug)]
pub struct TrainData {
    pub exemplar: ExemplarDataset,
    pub synthetic: Option<SyntheticDataset>,
    pub unlabeled: UnlabeledDataset,
    pub validation: Vec<TestVolume>,
    /// Foreground class names, in class order.
    pub class_names: Vec<String>,
}

impl TrainData {
    pub fn num_classes(&self) -> usize {
        self.exemplar.num_classes()
    }

    pub fn dims(&self) -> (usize, usize) {
        self.exemplar.image.dims()
    }
}

/// Indices drawn for one step. The exemplar is repeated `batch_size` times.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BatchIndices {
    pub synthetic: Vec<usize>,
    pub unlabeled: Vec<usize>,
}

impl BatchIndices {
    pub fn len(&self) -> usize {
        self.unlabeled.len()
    }

    pub fn is_empty(&self) -> bool {
        self.unlabeled.is_empty()
    }
}

/// Uniform draws with replacement from the synthetic and unlabeled sets.
pub fn sample_batch(data: &TrainData, batch_size: usize, rng: &mut dyn RngCore) -> Result<BatchIndices> {
    if data.unlabeled.is_empty() {
        return Err(Error::Config("unlabeled dataset is empty".into()));
    }
    let synthetic = match &data.synthetic {
        Some(s) if !s.is_empty() => (0..batch_size).map(|_| rng.random_range(0..s.len())).collect(),
        _ => Vec::new(),
    };
    let unlabeled = (0..batch_size)
        .map(|_| rng.random_range(0..data.unlabeled.len()))
        .collect();
    Ok(BatchIndices { synthetic, unlabeled })
}

/// A batch of images with dense labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Labeled<F> {
    pub images: Tensor<F>,
    pub classes: Vec<u8>,
}

/// Inputs seen by one network in one step.
#[derive(Clone, Debug, PartialEq)]
pub struct NetViews<F> {
    pub exemplar: Labeled<F>,
    pub synthetic: Option<Labeled<F>>,
    pub weak_u: Option<Tensor<F>>,
    pub strong_u: Option<Tensor<F>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepViews<F> {
    pub iteration: u64,
    pub nets: [NetViews<F>; 2],
}

impl StepViews<f32> {
    pub fn cast<G: Real>(&self) -> StepViews<G> {
        let lab = |l: &Labeled<f32>| Labeled {
            images: l.images.cast(),
            classes: l.classes.clone(),
        };
        let net = |v: &NetViews<f32>| NetViews {
            exemplar: lab(&v.exemplar),
            synthetic: v.synthetic.as_ref().map(lab),
            weak_u: v.weak_u.as_ref().map(|t| t.cast()),
            strong_u: v.strong_u.as_ref().map(|t| t.cast()),
        };
        StepViews {
            iteration: self.iteration,
            nets: [net(&self.nets[0]), net(&self.nets[1])],
        }
    }
}

mod source {
    pub const EXEMPLAR: u64 = 0;
    pub const SYNTHETIC: u64 = 1;
    pub const UNLABELED: u64 = 2;
}

mod pass {
    pub const EXEMPLAR: u64 = 0;
    pub const SYNTHETIC: u64 = 1;
    pub const CMIP: u64 = 2;
    pub const CMFP: u64 = 3;
}

fn weak_params(cfg: &TrainConfig, it: u64, src: u64, g: usize, m: usize, shared: bool, h: usize, w: usize) -> WeakParams {
    let m = if shared { 0 } else { m };
    let mut rng = substream(cfg.seed, &[tag::WEAK, it, src, g as u64, m as u64]);
    WeakParams::sample(&cfg.weak, h, w, &mut rng)
}

fn labeled_views<'a>(
    items: impl Iterator<Item = (&'a Image, &'a LabelMask)>,
    cfg: &TrainConfig,
    it: u64,
    src: u64,
    shared: bool,
) -> [Labeled<f32>; 2] {
    let items: Vec<_> = items.collect();
    let make = |m: usize| {
        let views: Vec<(Image, LabelMask)> = items
            .iter()
            .enumerate()
            .map(|(g, (img, mask))| {
                let p = weak_params(cfg, it, src, g, m, shared, img.height(), img.width());
                (apply_weak_image(img, &p), apply_weak_mask(mask, &p))
            })
            .collect();
        Labeled {
            images: stack_images(views.iter().map(|v| &v.0)),
            classes: stack_masks(views.iter().map(|v| &v.1)),
        }
    };
    let first = make(0);
    let second = if shared { first.clone() } else { make(1) };
    [first, second]
}

/// Weak views for both networks, plus strong views of the unlabeled weak
/// views. Sources that no active term uses are not generated.
pub fn prepare_views(data: &TrainData, batch: &BatchIndices, cfg: &TrainConfig, iteration: u64) -> Result<StepViews<f32>> {
    let b = batch.len();
    let ex = &data.exemplar;
    let [e0, e1] = labeled_views(
        std::iter::repeat_n((&ex.image, &ex.mask), b),
        cfg,
        iteration,
        source::EXEMPLAR,
        cfg.shared_views.exemplar,
    );
    let (s0, s1) = if cfg.use_synthetic {
        let syn = data
            .synthetic
            .as_ref()
            .ok_or_else(|| Error::Config("use_synthetic is set but no synthetic dataset was given".into()))?;
        let items = batch.synthetic.iter().map(|&i| (&syn.items()[i].0, &syn.items()[i].1));
        let [a, c] = labeled_views(items, cfg, iteration, source::SYNTHETIC, cfg.shared_views.synthetic);
        (Some(a), Some(c))
    } else {
        (None, None)
    };
    let mut weak_u: [Option<Tensor<f32>>; 2] = [None, None];
    let mut strong_u: [Option<Tensor<f32>>; 2] = [None, None];
    if cfg.needs_unlabeled() {
        let shared = cfg.shared_views.unlabeled;
        for m in 0..2 {
            let mut weak = Vec::with_capacity(b);
            let mut strong = Vec::with_capacity(b);
            for (g, &i) in batch.unlabeled.iter().enumerate() {
                let img = &data.unlabeled.images()[i];
                let p = weak_params(cfg, iteration, source::UNLABELED, g, m, shared, img.height(), img.width());
                let wv = apply_weak_image(img, &p);
                let mut rng = substream(cfg.seed, &[tag::STRONG, iteration, g as u64, m as u64]);
                let sp = StrongParams::sample(cfg.alpha, &mut rng);
                strong.push(apply_strong(&wv, &sp));
                weak.push(wv);
            }
            weak_u[m] = Some(stack_images(weak.iter()));
            strong_u[m] = Some(stack_images(strong.iter()));
        }
    }
    let [w0, w1] = weak_u;
    let [st0, st1] = strong_u;
    Ok(StepViews {
        iteration,
        nets: [
            NetViews {
                exemplar: e0,
                synthetic: s0,
                weak_u: w0,
                strong_u: st0,
            },
            NetViews {
                exemplar: e1,
                synthetic: s1,
                weak_u: w1,
                strong_u: st1,
            },
        ],
    })
}

/// Pseudo-labels of each network on its own weak unlabeled view, computed
/// in evaluation mode (running statistics, no dropout). `None` when no
/// consistency term is active.
pub fn pseudo_labels<F: Real>(nets: &[UNet<F>; 2], views: &StepViews<F>, cfg: &TrainConfig) -> Result<Option<[PseudoLabel; 2]>> {
    if !cfg.needs_unlabeled() {
        return Ok(None);
    }
    let make = |m: usize| -> Result<PseudoLabel> {
        let x = views.nets[m]
            .weak_u
            .as_ref()
            .ok_or_else(|| Error::Config("unlabeled views missing".into()))?;
        let p = pseudo_label(&softmax_probs(&nets[m].forward_eval(x)?)?, cfg.tau);
        Ok(if cfg.literal_eq3 { p.into_literal() } else { p })
    };
    Ok(Some([make(0)?, make(1)?]))
}

fn finite(loss: f64, term: &str, m: usize, detail: impl FnOnce() -> String) -> Result<f64> {
    if loss.is_finite() {
        Ok(loss)
    } else {
        Err(Error::NonFinite(format!("{term} loss of network {} is {loss} ({})", m + 1, detail())))
    }
}

fn supervised_pass<F: Real>(
    net: &mut UNet<F>,
    x: &Tensor<F>,
    target: Target<'_>,
    weight: f64,
    rng: &mut dyn RngCore,
    term: &str,
    m: usize,
) -> Result<f64> {
    let (logits, tape) = net.forward_train(x, rng)?;
    let (loss, dlogits) = seg_loss_logits(&logits, target, weight)?;
    finite(loss.total, term, m, || format!("ce {}, dice {}", loss.ce, loss.dice))?;
    net.backward(&tape, &dlogits);
    Ok(loss.total)
}

/// Encoder, channel dropout on every pyramid level, decoder.
fn feature_pass<F: Real>(
    net: &mut UNet<F>,
    x: &Tensor<F>,
    target: Target<'_>,
    weight: f64,
    rng: &mut dyn RngCore,
    feature_rng: &mut dyn RngCore,
    m: usize,
) -> Result<f64> {
    let (pyramid, enc) = net.encode_train(x, rng)?;
    let (perturbed, mask) = feature_perturb(&pyramid, feature_rng);
    let (logits, dec) = net.decode_train(&perturbed, rng)?;
    let (loss, dlogits) = seg_loss_logits(&logits, target, weight)?;
    finite(loss.total, "cmfp", m, || format!("ce {}, dice {}", loss.ce, loss.dice))?;
    let dpyramid = net.backward_decoder(&dec, &dlogits);
    net.backward_encoder(&enc, mask.apply(&dpyramid));
    Ok(loss.total)
}

/// Zeroes gradients, then runs every active pass of both networks with
/// immediate backpropagation. Pseudo-labels are treated as constants.
/// Dropout and channel masks depend only on the seed and iteration, so
/// repeated calls on the same state see identical masks.
pub fn loss_and_grad<F: Real>(
    nets: &mut [UNet<F>; 2],
    views: &StepViews<F>,
    pseudo: Option<&[PseudoLabel; 2]>,
    cfg: &TrainConfig,
) -> Result<LossBreakdown> {
    let it = views.iteration;
    let dropout = |m: usize, p: u64| substream(cfg.seed, &[tag::DROPOUT, it, m as u64, p]);
    let mut terms = [NetworkTerms::default(); 2];
    for (m, net) in nets.iter_mut().enumerate() {
        net.zero_grad();
        let v = &views.nets[m];
        let t = &mut terms[m];
        t.e = supervised_pass(
            net,
            &v.exemplar.images,
            Target::dense(&v.exemplar.classes),
            1.0,
            &mut dropout(m, pass::EXEMPLAR),
            "exemplar",
            m,
        )?;
        if let Some(s) = &v.synthetic {
            t.s = supervised_pass(
                net,
                &s.images,
                Target::dense(&s.classes),
                1.0,
                &mut dropout(m, pass::SYNTHETIC),
                "synthetic",
                m,
            )?;
        }
        let Some(pseudo) = pseudo else { continue };
        if cfg.lambda_cmip > 0.0 {
            let src = cfg.cmip_pairing.teacher(m);
            let x = views.nets[src].strong_u.as_ref().expect("strong views prepared");
            t.cmip = supervised_pass(
                net,
                x,
                pseudo[src].as_target(),
                cfg.lambda_cmip,
                &mut dropout(m, pass::CMIP),
                "cmip",
                m,
            )?;
        }
        if cfg.lambda_cmfp > 0.0 {
            let src = cfg.cmfp_pairing.teacher(m);
            let x = views.nets[src].weak_u.as_ref().expect("weak views prepared");
            let mut frng = substream(cfg.seed, &[tag::FEATURE, it, m as u64]);
            t.cmfp = feature_pass(
                net,
                x,
                pseudo[src].as_target(),
                cfg.lambda_cmfp,
                &mut dropout(m, pass::CMFP),
                &mut frng,
                m,
            )?;
        }
    }
    let b = total_loss(terms, cfg.weights());
    finite(b.l_total, "total", 0, || format!("{b:?}"))?;
    Ok(b)
}

/// Adam with L2 weight decay added to the gradient, over both networks.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub step: u64,
    pub m: Vec<Vec<f32>>,
    pub v: Vec<Vec<f32>>,
}

impl Adam {
    pub fn new(cfg: &TrainConfig, nets: &[UNet<f32>; 2]) -> Self {
        let mut m = Vec::new();
        for net in nets {
            net.visit_params(&mut |p| m.push(vec![0.0f32; p.len()]));
        }
        Adam {
            lr: cfg.lr,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.adam_eps,
            weight_decay: cfg.weight_decay,
            step: 0,
            v: m.clone(),
            m,
        }
    }

    pub fn update(&mut self, nets: &mut [UNet<f32>; 2]) {
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (self.beta1 as f32, self.beta2 as f32);
        let step_size = (self.lr / (1.0 - self.beta1.powi(t))) as f32;
        let bc2 = (1.0 - self.beta2.powi(t)).sqrt() as f32;
        let (eps, wd) = (self.eps as f32, self.weight_decay as f32);
        let mut slot = 0;
        for net in nets.iter_mut() {
            net.visit_params_mut(&mut |p| {
                let (m, v) = (&mut self.m[slot], &mut self.v[slot]);
                for i in 0..p.value.len() {
                    let g = p.grad[i] + wd * p.value[i];
                    m[i] = b1 * m[i] + (1.0 - b1) * g;
                    v[i] = b2 * v[i] + (1.0 - b2) * g * g;
                    p.value[i] -= step_size * m[i] / (v[i].sqrt() / bc2 + eps);
                }
                slot += 1;
            });
        }
    }
}

/// Both networks, optimizer moments and the number of completed steps.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub nets: [UNet<f32>; 2],
    pub adam: Adam,
    pub iteration: u64,
}

impl TrainState {
    pub fn new(cfg: &TrainConfig, num_classes: usize) -> Result<Self> {
        cfg.validate()?;
        let net_cfg = UNetConfig::new(num_classes).with_base_channels(cfg.base_channels);
        let nets = [
            UNet::new(net_cfg.clone(), derive_seed(cfg.seed, &[tag::INIT, 0]))?,
            UNet::new(net_cfg, derive_seed(cfg.seed, &[tag::INIT, 1]))?,
        ];
        let adam = Adam::new(cfg, &nets);
        Ok(TrainState { nets, adam, iteration: 0 })
    }
}

/// One line of the metrics log.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub iter: u64,
    pub l_e: f64,
    pub l_s: f64,
    pub l_cmip: f64,
    pub l_cmfp: f64,
    pub l_total: f64,
    pub valid_pixel_fraction: f64,
}

pub fn train_step(state: &mut TrainState, data: &TrainData, cfg: &TrainConfig) -> Result<MetricRecord> {
    let it = state.iteration;
    let batch = sample_batch(data, cfg.batch_size, &mut substream(cfg.seed, &[tag::BATCH, it]))?;
    let views = prepare_views(data, &batch, cfg, it)?;
    let pseudo = pseudo_labels(&state.nets, &views, cfg)?;
    let b = loss_and_grad(&mut state.nets, &views, pseudo.as_ref(), cfg)?;
    state.adam.update(&mut state.nets);
    state.iteration += 1;
    let valid = pseudo.map_or(0.0, |p| 0.5 * (p[0].valid_fraction() + p[1].valid_fraction()));
    Ok(MetricRecord {
        iter: state.iteration,
        l_e: b.l_e,
        l_s: b.l_s,
        l_cmip: b.l_cmip,
        l_cmfp: b.l_cmfp,
        l_total: b.l_total,
        valid_pixel_fraction: valid,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub iter: u64,
    pub dsc_avg: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct FitOutcome {
    pub log: Vec<MetricRecord>,
    pub evals: Vec<EvalRecord>,
    pub best: Option<EvalRecord>,
}

pub fn evaluate_state(state: &TrainState, data: &TrainData, which: NetworkSelector) -> Result<Report> {
    evaluate_dataset(&state.nets, &data.validation, which, &data.class_names)
}

/// Runs steps until `cfg.max_iter` steps have completed. With `out_dir`,
/// appends to `metrics.jsonl`, saves `last.ckpt` at the end and
/// `best.ckpt` whenever validation DSC improves.
pub fn fit(state: &mut TrainState, data: &TrainData, cfg: &TrainConfig, out_dir: Option<&Path>) -> Result<FitOutcome> {
    cfg.validate()?;
    let mut out = FitOutcome::default();
    let mut log_file = match out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir)?;
            let f = OpenOptions::new()
                .create(true)
                .write(true)
                .append(state.iteration > 0)
                .truncate(state.iteration == 0)
                .open(dir.join("metrics.jsonl"))?;
            Some(BufWriter::new(f))
        }
        None => None,
    };
    while state.iteration < cfg.max_iter {
        let rec = train_step(state, data, cfg)?;
        if let Some(f) = log_file.as_mut() {
            serde_json::to_writer(&mut *f, &rec)?;
            f.write_all(b"\n")?;
        }
        log::debug!("iter {} total {:.4}", rec.iter, rec.l_total);
        out.log.push(rec);
        if cfg.eval_every > 0 && state.iteration % cfg.eval_every == 0 && !data.validation.is_empty() {
            let r = evaluate_state(state, data, cfg.eval_network)?;
            let e = EvalRecord {
                iter: state.iteration,
                dsc_avg: r.dsc_avg,
            };
            log::info!("iter {}: validation DSC {:.4}", e.iter, e.dsc_avg);
            out.evals.push(e);
            if out.best.is_none_or(|b| e.dsc_avg > b.dsc_avg) {
                out.best = Some(e);
                if let Some(dir) = out_dir {
                    checkpoint::save(&dir.join("best.ckpt"), state, cfg)?;
                }
            }
        }
    }
    if let Some(mut f) = log_file {
        f.flush()?;
    }
    if let Some(dir) = out_dir {
        checkpoint::save(&dir.join("last.ckpt"), state, cfg)?;
    }
    Ok(out)
}

/// Writes `value` as pretty JSON.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut f = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut f, value)?;
    f.write_all(b"\n")?;
    f.flush()?;
    Ok(())
}
