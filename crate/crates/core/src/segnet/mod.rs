//! UNet backbone split into an encoder `f` producing a five-level feature
//! pyramid and a decoder `g` consuming it, so perturbed features can be
//! injected between the two.
//!
//! ConvBlock: conv3×3 → BN → LeakyReLU → Dropout → conv3×3 → BN → LeakyReLU.
//! DownBlock: maxpool2×2 → ConvBlock.
//! UpBlock: conv1×1 → bilinear ×2 → concat(skip, up) → ConvBlock.

pub mod layers;

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::{Real, Tensor};
use layers::{
    apply_mask, dropout_mask, leaky_relu_backward, leaky_relu_inplace, maxpool2,
    maxpool2_backward, upsample2, upsample2_backward, BatchNorm, BnCache, Conv2d, Param,
};

pub const LEVELS: usize = 5;
pub const ENCODER_DROPOUT: [f64; LEVELS] = [0.05, 0.1, 0.2, 0.3, 0.5];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UNetConfig {
    pub in_channels: usize,
    pub num_classes: usize,
    /// Level-1 width; level `l` has `base_channels · 2^(l-1)` channels.
    pub base_channels: usize,
    pub encoder_dropout: [f64; LEVELS],
}

impl UNetConfig {
    pub fn new(num_classes: usize) -> Self {
        UNetConfig {
            in_channels: 1,
            num_classes,
            base_channels: 16,
            encoder_dropout: ENCODER_DROPOUT,
        }
    }

    pub fn with_base_channels(mut self, base: usize) -> Self {
        self.base_channels = base;
        self
    }

    /// `{16, 32, 64, 128, 256}` at the default width.
    pub fn channels(&self) -> [usize; LEVELS] {
        std::array::from_fn(|l| self.base_channels << l)
    }
}

/// Encoder outputs, finest level first.
#[derive(Clone, Debug, PartialEq)]
pub struct FeaturePyramid<F> {
    pub levels: Vec<Tensor<F>>,
}

impl<F: Real> FeaturePyramid<F> {
    pub fn shapes(&self) -> Vec<[usize; 4]> {
        self.levels.iter().map(|t| t.shape()).collect()
    }

    pub fn zeros_like(&self) -> Self {
        FeaturePyramid {
            levels: self
                .levels
                .iter()
                .map(|t| Tensor::zeros(t.c, t.n, t.h, t.w))
                .collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
struct ConvBlock<F> {
    conv1: Conv2d<F>,
    bn1: BatchNorm<F>,
    conv2: Conv2d<F>,
    bn2: BatchNorm<F>,
    dropout: f64,
}

struct ConvBlockTape<F> {
    input: Tensor<F>,
    bn1: BnCache<F>,
    act1: Tensor<F>,
    mask: Option<Vec<F>>,
    bn2: BnCache<F>,
    act2: Tensor<F>,
}

impl<F: Real> ConvBlock<F> {
    fn new<R: Rng + ?Sized>(cin: usize, cout: usize, dropout: f64, rng: &mut R) -> Self {
        ConvBlock {
            conv1: Conv2d::new(cin, cout, 3, rng),
            bn1: BatchNorm::new(cout),
            conv2: Conv2d::new(cout, cout, 3, rng),
            bn2: BatchNorm::new(cout),
            dropout,
        }
    }

    fn forward_eval(&self, x: &Tensor<F>) -> Tensor<F> {
        let mut a = self.bn1.forward_eval(&self.conv1.forward(x));
        leaky_relu_inplace(&mut a);
        let mut b = self.bn2.forward_eval(&self.conv2.forward(&a));
        leaky_relu_inplace(&mut b);
        b
    }

    fn forward_train(&mut self, x: Tensor<F>, rng: &mut dyn RngCore) -> (Tensor<F>, ConvBlockTape<F>) {
        let (mut act1, bn1) = self.bn1.forward_train(&self.conv1.forward(&x));
        leaky_relu_inplace(&mut act1);
        let (mid, mask) = if self.dropout > 0.0 {
            let mask = dropout_mask(act1.data.len(), self.dropout, rng);
            let mut d = act1.clone();
            apply_mask(&mut d, &mask);
            (d, Some(mask))
        } else {
            (act1.clone(), None)
        };
        let (mut act2, bn2) = self.bn2.forward_train(&self.conv2.forward(&mid));
        leaky_relu_inplace(&mut act2);
        let tape = ConvBlockTape {
            input: x,
            bn1,
            act1,
            mask,
            bn2,
            act2: act2.clone(),
        };
        (act2, tape)
    }

    fn backward(&mut self, tape: &ConvBlockTape<F>, mut dy: Tensor<F>, need_dx: bool) -> Option<Tensor<F>> {
        leaky_relu_backward(&tape.act2, &mut dy);
        let dz2 = self.bn2.backward(&tape.bn2, &dy);
        let mid = match &tape.mask {
            Some(m) => {
                let mut d = tape.act1.clone();
                apply_mask(&mut d, m);
                d
            }
            None => tape.act1.clone(),
        };
        let mut dmid = self.conv2.backward(&mid, &dz2, true).expect("dx requested");
        if let Some(m) = &tape.mask {
            apply_mask(&mut dmid, m);
        }
        leaky_relu_backward(&tape.act1, &mut dmid);
        let dz1 = self.bn1.backward(&tape.bn1, &dmid);
        self.conv1.backward(&tape.input, &dz1, need_dx)
    }

    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param<F>)) {
        f(&self.conv1.weight);
        f(&self.conv1.bias);
        f(&self.bn1.gamma);
        f(&self.bn1.beta);
        f(&self.conv2.weight);
        f(&self.conv2.bias);
        f(&self.bn2.gamma);
        f(&self.bn2.beta);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<F>)) {
        f(&mut self.conv1.weight);
        f(&mut self.conv1.bias);
        f(&mut self.bn1.gamma);
        f(&mut self.bn1.beta);
        f(&mut self.conv2.weight);
        f(&mut self.conv2.bias);
        f(&mut self.bn2.gamma);
        f(&mut self.bn2.beta);
    }

    fn visit_stats_mut(&mut self, f: &mut dyn FnMut(&mut Vec<F>)) {
        for bn in [&mut self.bn1, &mut self.bn2] {
            f(&mut bn.running_mean);
            f(&mut bn.running_var);
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
struct UpBlock<F> {
    reduce: Conv2d<F>,
    block: ConvBlock<F>,
}

struct UpBlockTape<F> {
    deep: Tensor<F>,
    deep_hw: (usize, usize),
    skip_channels: usize,
    block: ConvBlockTape<F>,
}

impl<F: Real> UpBlock<F> {
    fn new<R: Rng + ?Sized>(deep: usize, skip: usize, out: usize, rng: &mut R) -> Self {
        UpBlock {
            reduce: Conv2d::new(deep, skip, 1, rng),
            block: ConvBlock::new(skip * 2, out, 0.0, rng),
        }
    }

    fn forward_eval(&self, deep: &Tensor<F>, skip: &Tensor<F>) -> Tensor<F> {
        let up = upsample2(&self.reduce.forward(deep));
        self.block.forward_eval(&Tensor::concat_channels(skip, &up))
    }

    fn forward_train(
        &mut self,
        deep: Tensor<F>,
        skip: &Tensor<F>,
        rng: &mut dyn RngCore,
    ) -> (Tensor<F>, UpBlockTape<F>) {
        let up = upsample2(&self.reduce.forward(&deep));
        let cat = Tensor::concat_channels(skip, &up);
        let (out, block) = self.block.forward_train(cat, rng);
        let tape = UpBlockTape {
            deep_hw: (deep.h, deep.w),
            deep,
            skip_channels: skip.c,
            block,
        };
        (out, tape)
    }

    /// Returns `(d_deep, d_skip)`.
    fn backward(&mut self, tape: &UpBlockTape<F>, dy: Tensor<F>) -> (Tensor<F>, Tensor<F>) {
        let dcat = self.block.backward(&tape.block, dy, true).expect("dx requested");
        let (dskip, dup) = dcat.split_channels(tape.skip_channels);
        let dred = upsample2_backward(&dup, tape.deep_hw.0, tape.deep_hw.1);
        let ddeep = self.reduce.backward(&tape.deep, &dred, true).expect("dx requested");
        (ddeep, dskip)
    }
}

/// Cached activations of one training-mode encoder pass.
pub struct EncoderTape<F> {
    blocks: Vec<ConvBlockTape<F>>,
    pools: Vec<(Vec<u8>, usize, usize)>,
}

/// Cached activations of one training-mode decoder pass.
pub struct DecoderTape<F> {
    ups: Vec<UpBlockTape<F>>,
    head_input: Tensor<F>,
}

pub struct ForwardTape<F> {
    pub encoder: EncoderTape<F>,
    pub decoder: DecoderTape<F>,
}

/// One segmentation network: encoder, decoder and batch-norm state.
#[derive(Clone, Debug, PartialEq)]
pub struct UNet<F> {
    config: UNetConfig,
    encoder: Vec<ConvBlock<F>>,
    decoder: Vec<UpBlock<F>>,
    head: Conv2d<F>,
}

/// Whether a pass runs with dropout and batch statistics (training) or with
/// running statistics and no dropout (evaluation).
pub enum Mode<'a> {
    Eval,
    Train(&'a mut dyn RngCore),
}

impl<F: Real> UNet<F> {
    pub fn new(config: UNetConfig, seed: u64) -> Result<Self> {
        if config.num_classes < 2 {
            return Err(Error::Config(format!(
                "need at least 2 classes, got {}",
                config.num_classes
            )));
        }
        if config.base_channels == 0 || config.in_channels == 0 {
            return Err(Error::Config("channel counts must be positive".into()));
        }
        let mut r = rng::substream(seed, &[rng::tag::INIT]);
        let ch = config.channels();
        let mut encoder = Vec::with_capacity(LEVELS);
        let mut cin = config.in_channels;
        for (l, &c) in ch.iter().enumerate() {
            encoder.push(ConvBlock::new(cin, c, config.encoder_dropout[l], &mut r));
            cin = c;
        }
        let decoder = (0..LEVELS - 1)
            .rev()
            .map(|l| UpBlock::new(ch[l + 1], ch[l], ch[l], &mut r))
            .collect();
        let head = Conv2d::new(ch[0], config.num_classes, 3, &mut r);
        Ok(UNet {
            config,
            encoder,
            decoder,
            head,
        })
    }

    pub fn config(&self) -> &UNetConfig {
        &self.config
    }

    pub fn num_classes(&self) -> usize {
        self.config.num_classes
    }

    fn check_input(&self, x: &Tensor<F>) -> Result<()> {
        if x.c != self.config.in_channels {
            return Err(Error::Shape(format!(
                "network expects {} input channels, got {}",
                self.config.in_channels, x.c
            )));
        }
        let m = 1 << (LEVELS - 1);
        if x.h == 0 || x.w == 0 || x.h % m != 0 || x.w % m != 0 {
            return Err(Error::Shape(format!(
                "input {}×{} is not divisible by {m}",
                x.h, x.w
            )));
        }
        Ok(())
    }

    fn check_pyramid(&self, p: &FeaturePyramid<F>) -> Result<()> {
        if p.levels.len() != LEVELS {
            return Err(Error::Shape(format!(
                "pyramid has {} levels, expected {LEVELS}",
                p.levels.len()
            )));
        }
        let ch = self.config.channels();
        let (n, h0, w0) = (p.levels[0].n, p.levels[0].h, p.levels[0].w);
        for (l, t) in p.levels.iter().enumerate() {
            let want = [ch[l], n, h0 >> l, w0 >> l];
            if t.shape() != want || (h0 >> l) << l != h0 || (w0 >> l) << l != w0 {
                return Err(Error::Shape(format!(
                    "pyramid level {} has shape {:?}, expected {want:?}",
                    l + 1,
                    t.shape()
                )));
            }
        }
        Ok(())
    }

    pub fn encode_eval(&self, x: &Tensor<F>) -> Result<FeaturePyramid<F>> {
        self.check_input(x)?;
        let mut levels: Vec<Tensor<F>> = Vec::with_capacity(LEVELS);
        for (l, block) in self.encoder.iter().enumerate() {
            let out = if l == 0 {
                block.forward_eval(x)
            } else {
                block.forward_eval(&maxpool2(&levels[l - 1]).0)
            };
            levels.push(out);
        }
        Ok(FeaturePyramid { levels })
    }

    pub fn encode_train(
        &mut self,
        x: &Tensor<F>,
        rng: &mut dyn RngCore,
    ) -> Result<(FeaturePyramid<F>, EncoderTape<F>)> {
        self.check_input(x)?;
        let mut levels: Vec<Tensor<F>> = Vec::with_capacity(LEVELS);
        let mut blocks = Vec::with_capacity(LEVELS);
        let mut pools = Vec::with_capacity(LEVELS - 1);
        for l in 0..LEVELS {
            let input = if l == 0 {
                x.clone()
            } else {
                let prev = &levels[l - 1];
                let (p, arg) = maxpool2(prev);
                pools.push((arg, prev.h, prev.w));
                p
            };
            let (out, tape) = self.encoder[l].forward_train(input, rng);
            levels.push(out);
            blocks.push(tape);
        }
        Ok((FeaturePyramid { levels }, EncoderTape { blocks, pools }))
    }

    pub fn decode_eval(&self, p: &FeaturePyramid<F>) -> Result<Tensor<F>> {
        self.check_pyramid(p)?;
        let mut x = p.levels[LEVELS - 1].clone();
        for (i, up) in self.decoder.iter().enumerate() {
            x = up.forward_eval(&x, &p.levels[LEVELS - 2 - i]);
        }
        Ok(self.head.forward(&x))
    }

    pub fn decode_train(
        &mut self,
        p: &FeaturePyramid<F>,
        rng: &mut dyn RngCore,
    ) -> Result<(Tensor<F>, DecoderTape<F>)> {
        self.check_pyramid(p)?;
        let mut x = p.levels[LEVELS - 1].clone();
        let mut ups = Vec::with_capacity(LEVELS - 1);
        for i in 0..LEVELS - 1 {
            let (out, tape) = self.decoder[i].forward_train(x, &p.levels[LEVELS - 2 - i], rng);
            ups.push(tape);
            x = out;
        }
        let logits = self.head.forward(&x);
        Ok((logits, DecoderTape { ups, head_input: x }))
    }

    pub fn forward_eval(&self, x: &Tensor<F>) -> Result<Tensor<F>> {
        self.decode_eval(&self.encode_eval(x)?)
    }

    pub fn forward_train(&mut self, x: &Tensor<F>, rng: &mut dyn RngCore) -> Result<(Tensor<F>, ForwardTape<F>)> {
        let (p, encoder) = self.encode_train(x, rng)?;
        let (logits, decoder) = self.decode_train(&p, rng)?;
        Ok((logits, ForwardTape { encoder, decoder }))
    }

    /// Mode-dispatching encoder; the tape is only produced in training mode.
    pub fn encode(&mut self, x: &Tensor<F>, mode: Mode<'_>) -> Result<(FeaturePyramid<F>, Option<EncoderTape<F>>)> {
        match mode {
            Mode::Eval => Ok((self.encode_eval(x)?, None)),
            Mode::Train(r) => self.encode_train(x, r).map(|(p, t)| (p, Some(t))),
        }
    }

    pub fn decode(&mut self, p: &FeaturePyramid<F>, mode: Mode<'_>) -> Result<(Tensor<F>, Option<DecoderTape<F>>)> {
        match mode {
            Mode::Eval => Ok((self.decode_eval(p)?, None)),
            Mode::Train(r) => self.decode_train(p, r).map(|(l, t)| (l, Some(t))),
        }
    }

    /// Backpropagates logits gradients through the decoder, accumulating
    /// parameter gradients, and returns the gradient for every pyramid level.
    pub fn backward_decoder(&mut self, tape: &DecoderTape<F>, dlogits: &Tensor<F>) -> FeaturePyramid<F> {
        let mut dx = self
            .head
            .backward(&tape.head_input, dlogits, true)
            .expect("dx requested");
        let mut dlevels: Vec<Option<Tensor<F>>> = (0..LEVELS).map(|_| None).collect();
        for i in (0..LEVELS - 1).rev() {
            let (ddeep, dskip) = self.decoder[i].backward(&tape.ups[i], dx);
            dlevels[LEVELS - 2 - i] = Some(dskip);
            dx = ddeep;
        }
        dlevels[LEVELS - 1] = Some(dx);
        FeaturePyramid {
            levels: dlevels.into_iter().map(|t| t.expect("all levels set")).collect(),
        }
    }

    pub fn backward_encoder(&mut self, tape: &EncoderTape<F>, dpyramid: FeaturePyramid<F>) {
        let mut grads = dpyramid.levels;
        let mut carry: Option<Tensor<F>> = None;
        for l in (0..LEVELS).rev() {
            let mut g = grads.pop().expect("level gradient");
            if let Some(c) = carry.take() {
                g.add_assign(&c);
            }
            let dx = self.encoder[l].backward(&tape.blocks[l], g, l > 0);
            if l > 0 {
                let (arg, h, w) = &tape.pools[l - 1];
                carry = Some(maxpool2_backward(&dx.expect("dx requested"), arg, *h, *w));
            }
        }
    }

    pub fn backward(&mut self, tape: &ForwardTape<F>, dlogits: &Tensor<F>) {
        let dp = self.backward_decoder(&tape.decoder, dlogits);
        self.backward_encoder(&tape.encoder, dp);
    }

    /// Visits every learnable parameter in a fixed order.
    pub fn visit_params<'a>(&'a self, f: &mut dyn FnMut(&'a Param<F>)) {
        self.encoder.iter().for_each(|b| b.visit(f));
        for up in &self.decoder {
            f(&up.reduce.weight);
            f(&up.reduce.bias);
            up.block.visit(f);
        }
        f(&self.head.weight);
        f(&self.head.bias);
    }

    pub fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param<F>)) {
        self.encoder.iter_mut().for_each(|b| b.visit_mut(f));
        for up in &mut self.decoder {
            f(&mut up.reduce.weight);
            f(&mut up.reduce.bias);
            up.block.visit_mut(f);
        }
        f(&mut self.head.weight);
        f(&mut self.head.bias);
    }

    /// Visits batch-norm running statistics in a fixed order.
    pub fn visit_stats_mut(&mut self, f: &mut dyn FnMut(&mut Vec<F>)) {
        self.encoder.iter_mut().for_each(|b| b.visit_stats_mut(f));
        self.decoder.iter_mut().for_each(|u| u.block.visit_stats_mut(f));
    }

    pub fn zero_grad(&mut self) {
        self.visit_params_mut(&mut |p| p.zero_grad());
    }

    pub fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit_params(&mut |p| n += p.len());
        n
    }

    /// Flattened copy of all learnable values.
    pub fn flat_params(&self) -> Vec<F> {
        let mut v = Vec::with_capacity(self.param_count());
        self.visit_params(&mut |p| v.extend_from_slice(&p.value));
        v
    }

    pub fn flat_grads(&self) -> Vec<F> {
        let mut v = Vec::with_capacity(self.param_count());
        self.visit_params(&mut |p| v.extend_from_slice(&p.grad));
        v
    }

    /// Mutable access to the flat parameter at `index` (in visiting order).
    pub fn with_param_at(&mut self, mut index: usize, f: impl FnOnce(&mut F)) {
        let mut f = Some(f);
        self.visit_params_mut(&mut |p| {
            if index < p.len() {
                if let Some(g) = f.take() {
                    g(&mut p.value[index]);
                }
                index = usize::MAX;
            } else if index != usize::MAX {
                index -= p.len();
            }
        });
    }

    /// Input/output channels of encoder level `l` (0-based) first convolution.
    pub fn encoder_block_channels(&self, l: usize) -> (usize, usize) {
        let b = &self.encoder[l];
        (b.conv1.cin, b.conv2.cout)
    }

    pub fn encoder_dropout(&self) -> Vec<f64> {
        self.encoder.iter().map(|b| b.dropout).collect()
    }

    pub fn decoder_dropout(&self) -> Vec<f64> {
        self.decoder.iter().map(|u| u.block.dropout).collect()
    }

    pub fn head_channels(&self) -> (usize, usize) {
        (self.head.cin, self.head.cout)
    }
}

/// Builds a network at the default width for `num_classes` classes.
pub fn init_network(seed: u64, num_classes: usize) -> Result<UNet<f32>> {
    UNet::new(UNetConfig::new(num_classes), seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn input<F: Real>(n: usize, h: usize, w: usize) -> Tensor<F> {
        let data = (0..n * h * w)
            .map(|i| F::lit(((i * 37 % 101) as f64) / 101.0))
            .collect();
        Tensor::from_vec(data, 1, n, h, w)
    }

    #[test]
    fn different_seeds_give_different_parameters() {
        let a = UNet::<f32>::new(UNetConfig::new(3).with_base_channels(4), 1).unwrap();
        let b = UNet::<f32>::new(UNetConfig::new(3).with_base_channels(4), 2).unwrap();
        let diff = a
            .flat_params()
            .iter()
            .zip(b.flat_params())
            .map(|(x, y)| (x - y).abs())
            .fold(0.0f32, f32::max);
        assert!(diff > 0.0);
    }

    #[test]
    fn layer_spec_matches_default_architecture() {
        let net = init_network(0, 4).unwrap();
        assert_eq!(net.config().channels(), [16, 32, 64, 128, 256]);
        assert_eq!(net.encoder_block_channels(4), (128, 256));
        assert_eq!(net.encoder_block_channels(0), (1, 16));
        assert_eq!(net.encoder_dropout(), vec![0.05, 0.1, 0.2, 0.3, 0.5]);
        assert!(net.decoder_dropout().iter().all(|&p| p == 0.0));
        assert_eq!(net.head_channels(), (16, 4));
    }

    #[test]
    fn encode_shapes_32() {
        let net = init_network(0, 4).unwrap();
        let p = net.encode_eval(&input::<f32>(1, 32, 32)).unwrap();
        assert_eq!(p.levels[4].shape(), [256, 1, 2, 2]);
    }

    #[test]
    fn indivisible_input_is_a_shape_error() {
        let net = UNet::<f32>::new(UNetConfig::new(3).with_base_channels(2), 0).unwrap();
        assert!(matches!(net.forward_eval(&input(1, 24, 32)), Err(Error::Shape(_))));
    }

    #[test]
    fn decode_rejects_bad_pyramid() {
        let net = UNet::<f32>::new(UNetConfig::new(3).with_base_channels(2), 0).unwrap();
        let mut p = net.encode_eval(&input(1, 32, 32)).unwrap();
        p.levels.pop();
        assert!(matches!(net.decode_eval(&p), Err(Error::Shape(_))));
    }

    #[test]
    fn eval_is_deterministic_and_composes() {
        let net = UNet::<f32>::new(UNetConfig::new(3).with_base_channels(4), 9).unwrap();
        let x = input(2, 32, 32);
        let a = net.forward_eval(&x).unwrap();
        let b = net.forward_eval(&x).unwrap();
        assert_eq!(a, b);
        let c = net.decode_eval(&net.encode_eval(&x).unwrap()).unwrap();
        assert_eq!(a, c);
        assert_eq!(a.shape(), [3, 2, 32, 32]);
    }

    #[test]
    fn zero_pyramid_decodes_to_finite_logits() {
        let net = UNet::<f32>::new(UNetConfig::new(3).with_base_channels(4), 9).unwrap();
        let p = net.encode_eval(&input(1, 32, 32)).unwrap().zeros_like();
        assert!(net.decode_eval(&p).unwrap().all_finite());
    }

    #[test]
    fn train_mode_dropout_is_seeded() {
        let mut net = UNet::<f32>::new(UNetConfig::new(3).with_base_channels(4), 9).unwrap();
        let x = input(2, 32, 32);
        let mut n2 = net.clone();
        let a = net.forward_train(&x, &mut ChaCha8Rng::seed_from_u64(1)).unwrap().0;
        let b = n2.forward_train(&x, &mut ChaCha8Rng::seed_from_u64(1)).unwrap().0;
        let c = n2.forward_train(&x, &mut ChaCha8Rng::seed_from_u64(2)).unwrap().0;
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn with_param_at_addresses_flat_order() {
        let mut net = UNet::<f64>::new(UNetConfig::new(2).with_base_channels(2), 0).unwrap();
        let n = net.param_count();
        for idx in [0, 17, n / 2, n - 1] {
            net.with_param_at(idx, |v| *v = 123.0);
            assert_eq!(net.flat_params()[idx], 123.0);
        }
    }

    /// Whole-network gradient of `sum(logits ⊙ r)` against central
    /// differences on a small f64 network.
    #[test]
    fn network_backward_matches_finite_differences() {
        let cfg = UNetConfig::new(3).with_base_channels(2);
        let mut net = UNet::<f64>::new(cfg, 4).unwrap();
        let x = input::<f64>(2, 16, 16);
        let r: Vec<f64> = (0..3 * 2 * 16 * 16).map(|i| ((i * 13 % 29) as f64 - 14.0) / 14.0).collect();
        let r = Tensor::from_vec(r, 3, 2, 16, 16);
        let loss = |net: &mut UNet<f64>| -> f64 {
            let (y, _) = net.forward_train(&x, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
            y.data.iter().zip(&r.data).map(|(a, b)| a * b).sum()
        };
        net.zero_grad();
        let (_, tape) = net.forward_train(&x, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
        net.backward(&tape, &r);
        let grads = net.flat_grads();
        let n = net.param_count();
        let h = 1e-5;
        let mut worst: f64 = 0.0;
        for idx in (0..n).step_by(n / 40) {
            let mut p = net.clone();
            p.with_param_at(idx, |v| *v += h);
            let mut m = net.clone();
            m.with_param_at(idx, |v| *v -= h);
            let fd = (loss(&mut p) - loss(&mut m)) / (2.0 * h);
            let err = (fd - grads[idx]).abs() / (fd.abs().max(grads[idx].abs()).max(1e-3));
            worst = worst.max(err);
        }
        assert!(worst < 1e-4, "worst relative error {worst}");
    }
}
