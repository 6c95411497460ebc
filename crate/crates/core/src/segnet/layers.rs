//! Layers with explicit forward caches and hand-written backward passes.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::tensor::{gemm, Mat, Real, Tensor};

pub const LEAKY_SLOPE: f64 = 0.01;
pub const BN_MOMENTUM: f64 = 0.1;
pub const BN_EPS: f64 = 1e-5;

/// A learnable buffer and its accumulated gradient.
#[derive(Clone, Debug, PartialEq)]
pub struct Param<F> {
    pub value: Vec<F>,
    pub grad: Vec<F>,
}

impl<F: Real> Param<F> {
    pub fn new(value: Vec<F>) -> Self {
        let grad = vec![F::zero(); value.len()];
        Param { value, grad }
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = F::zero());
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }
}

/// Square convolution, stride 1, "same" zero padding. Kernel size 1 or 3.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv2d<F> {
    pub weight: Param<F>,
    pub bias: Param<F>,
    pub cin: usize,
    pub cout: usize,
    pub ksize: usize,
}

fn im2col<F: Real>(x: &Tensor<F>) -> Vec<F> {
    let (c, n, h, w) = (x.c, x.n, x.h, x.w);
    let zeros = vec![F::zero(); w];
    let mut col = Vec::with_capacity(c * 9 * n * h * w);
    for ci in 0..c {
        for ky in 0..3 {
            for kx in 0..3 {
                for ni in 0..n {
                    let src = x.plane(ci, ni);
                    for y in 0..h {
                        let sy = y as isize + ky as isize - 1;
                        if sy < 0 || sy >= h as isize {
                            col.extend_from_slice(&zeros);
                            continue;
                        }
                        let srow = &src[sy as usize * w..(sy as usize + 1) * w];
                        match kx {
                            0 => {
                                col.push(F::zero());
                                col.extend_from_slice(&srow[..w - 1]);
                            }
                            1 => col.extend_from_slice(srow),
                            _ => {
                                col.extend_from_slice(&srow[1..]);
                                col.push(F::zero());
                            }
                        }
                    }
                }
            }
        }
    }
    col
}

fn col2im<F: Real>(col: &[F], c: usize, n: usize, h: usize, w: usize) -> Tensor<F> {
    let hw = h * w;
    let cols = n * hw;
    let mut x = Tensor::zeros(c, n, h, w);
    for ci in 0..c {
        for ky in 0..3 {
            for kx in 0..3 {
                let r = ci * 9 + ky * 3 + kx;
                let row = &col[r * cols..(r + 1) * cols];
                for ni in 0..n {
                    let dst = x.plane_mut(ci, ni);
                    for y in 0..h {
                        let sy = y as isize + ky as isize - 1;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        let drow = &mut dst[sy as usize * w..(sy as usize + 1) * w];
                        let src = &row[ni * hw + y * w..ni * hw + (y + 1) * w];
                        match kx {
                            0 => drow[..w - 1]
                                .iter_mut()
                                .zip(&src[1..])
                                .for_each(|(d, &s)| *d += s),
                            1 => drow.iter_mut().zip(src).for_each(|(d, &s)| *d += s),
                            _ => drow[1..]
                                .iter_mut()
                                .zip(&src[..w - 1])
                                .for_each(|(d, &s)| *d += s),
                        }
                    }
                }
            }
        }
    }
    x
}

impl<F: Real> Conv2d<F> {
    /// Kaiming fan-in normal weights (leaky-ReLU gain), zero bias.
    pub fn new<R: Rng + ?Sized>(cin: usize, cout: usize, ksize: usize, rng: &mut R) -> Self {
        assert!(ksize == 1 || ksize == 3, "only 1×1 and 3×3 kernels");
        let fan_in = cin * ksize * ksize;
        let gain = (2.0 / (1.0 + LEAKY_SLOPE * LEAKY_SLOPE)).sqrt();
        let std = gain / (fan_in as f64).sqrt();
        let weight = (0..cout * fan_in)
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                F::lit(z * std)
            })
            .collect();
        Conv2d {
            weight: Param::new(weight),
            bias: Param::new(vec![F::zero(); cout]),
            cin,
            cout,
            ksize,
        }
    }

    fn patch_len(&self) -> usize {
        self.cin * self.ksize * self.ksize
    }

    pub fn forward(&self, x: &Tensor<F>) -> Tensor<F> {
        assert_eq!(x.c, self.cin, "conv input channels");
        let cols = x.plane_len();
        let mut out = Tensor::zeros(self.cout, x.n, x.h, x.w);
        let wmat = Mat::new(&self.weight.value, self.cout, self.patch_len());
        if self.ksize == 1 {
            gemm(wmat, Mat::new(&x.data, self.cin, cols), F::zero(), &mut out.data);
        } else {
            let col = im2col(x);
            gemm(wmat, Mat::new(&col, self.patch_len(), cols), F::zero(), &mut out.data);
        }
        for (co, &b) in self.bias.value.iter().enumerate() {
            if b != F::zero() {
                out.channel_mut(co).iter_mut().for_each(|v| *v += b);
            }
        }
        out
    }

    /// Accumulates parameter gradients; returns the input gradient when asked.
    pub fn backward(&mut self, x: &Tensor<F>, dout: &Tensor<F>, need_dx: bool) -> Option<Tensor<F>> {
        let cols = x.plane_len();
        let k = self.patch_len();
        for co in 0..self.cout {
            let s: F = dout.channel(co).iter().copied().sum();
            self.bias.grad[co] += s;
        }
        let dmat = Mat::new(&dout.data, self.cout, cols);
        if self.ksize == 1 {
            gemm(dmat, Mat::new(&x.data, self.cin, cols).t(), F::one(), &mut self.weight.grad);
            if !need_dx {
                return None;
            }
            let mut dx = Tensor::zeros(self.cin, x.n, x.h, x.w);
            gemm(Mat::new(&self.weight.value, self.cout, k).t(), dmat, F::zero(), &mut dx.data);
            Some(dx)
        } else {
            let col = im2col(x);
            gemm(dmat, Mat::new(&col, k, cols).t(), F::one(), &mut self.weight.grad);
            if !need_dx {
                return None;
            }
            let mut dcol = col;
            gemm(Mat::new(&self.weight.value, self.cout, k).t(), dmat, F::zero(), &mut dcol);
            Some(col2im(&dcol, self.cin, x.n, x.h, x.w))
        }
    }
}

/// Per-channel batch normalisation over `N·H·W`.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNorm<F> {
    pub gamma: Param<F>,
    pub beta: Param<F>,
    pub running_mean: Vec<F>,
    pub running_var: Vec<F>,
}

#[derive(Clone, Debug)]
pub struct BnCache<F> {
    xhat: Tensor<F>,
    inv_std: Vec<F>,
}

impl<F: Real> BatchNorm<F> {
    pub fn new(c: usize) -> Self {
        BatchNorm {
            gamma: Param::new(vec![F::one(); c]),
            beta: Param::new(vec![F::zero(); c]),
            running_mean: vec![F::zero(); c],
            running_var: vec![F::one(); c],
        }
    }

    pub fn forward_eval(&self, x: &Tensor<F>) -> Tensor<F> {
        let mut y = x.clone();
        for c in 0..x.c {
            let inv = F::one() / (self.running_var[c] + F::lit(BN_EPS)).sqrt();
            let scale = self.gamma.value[c] * inv;
            let shift = self.beta.value[c] - self.running_mean[c] * scale;
            y.channel_mut(c).iter_mut().for_each(|v| *v = *v * scale + shift);
        }
        y
    }

    /// Normalises with batch statistics and updates the running estimates.
    pub fn forward_train(&mut self, x: &Tensor<F>) -> (Tensor<F>, BnCache<F>) {
        let m = x.plane_len();
        let mut xhat = Tensor::zeros(x.c, x.n, x.h, x.w);
        let mut y = Tensor::zeros(x.c, x.n, x.h, x.w);
        let mut inv_std = Vec::with_capacity(x.c);
        for c in 0..x.c {
            let ch = x.channel(c);
            let mean = ch.iter().map(|v| v.to_f64().unwrap()).sum::<f64>() / m as f64;
            let var = ch
                .iter()
                .map(|v| {
                    let d = v.to_f64().unwrap() - mean;
                    d * d
                })
                .sum::<f64>()
                / m as f64;
            let inv = 1.0 / (var + BN_EPS).sqrt();
            let (mean_f, inv_f) = (F::lit(mean), F::lit(inv));
            let (g, b) = (self.gamma.value[c], self.beta.value[c]);
            for ((xh, yv), &v) in xhat
                .channel_mut(c)
                .iter_mut()
                .zip(y.channel_mut(c).iter_mut())
                .zip(ch)
            {
                let n = (v - mean_f) * inv_f;
                *xh = n;
                *yv = n * g + b;
            }
            let unbiased = if m > 1 { var * m as f64 / (m - 1) as f64 } else { var };
            let mom = F::lit(BN_MOMENTUM);
            self.running_mean[c] = self.running_mean[c] * (F::one() - mom) + mean_f * mom;
            self.running_var[c] = self.running_var[c] * (F::one() - mom) + F::lit(unbiased) * mom;
            inv_std.push(inv_f);
        }
        (y, BnCache { xhat, inv_std })
    }

    pub fn backward(&mut self, cache: &BnCache<F>, dy: &Tensor<F>) -> Tensor<F> {
        let m = dy.plane_len();
        let mf = F::lit(m as f64);
        let mut dx = Tensor::zeros(dy.c, dy.n, dy.h, dy.w);
        for c in 0..dy.c {
            let g = dy.channel(c);
            let xh = cache.xhat.channel(c);
            let mut sum_g = F::zero();
            let mut sum_gx = F::zero();
            for (&gv, &xv) in g.iter().zip(xh) {
                sum_g += gv;
                sum_gx += gv * xv;
            }
            self.beta.grad[c] += sum_g;
            self.gamma.grad[c] += sum_gx;
            let k = self.gamma.value[c] * cache.inv_std[c] / mf;
            for ((d, &gv), &xv) in dx.channel_mut(c).iter_mut().zip(g).zip(xh) {
                *d = k * (mf * gv - sum_g - xv * sum_gx);
            }
        }
        dx
    }
}

pub fn leaky_relu_inplace<F: Real>(x: &mut Tensor<F>) {
    let s = F::lit(LEAKY_SLOPE);
    x.data.iter_mut().for_each(|v| {
        if *v <= F::zero() {
            *v = *v * s;
        }
    });
}

/// Backward of leaky ReLU given its output (sign is preserved by the activation).
pub fn leaky_relu_backward<F: Real>(out: &Tensor<F>, dy: &mut Tensor<F>) {
    let s = F::lit(LEAKY_SLOPE);
    dy.data.iter_mut().zip(&out.data).for_each(|(g, &o)| {
        if o <= F::zero() {
            *g = *g * s;
        }
    });
}

/// Inverted element-wise dropout mask: entries are 0 or `1/(1-p)`.
pub fn dropout_mask<F: Real, R: Rng + ?Sized>(len: usize, p: f64, rng: &mut R) -> Vec<F> {
    let scale = F::lit(1.0 / (1.0 - p));
    (0..len)
        .map(|_| {
            if rng.random::<f64>() < p {
                F::zero()
            } else {
                scale
            }
        })
        .collect()
}

pub fn apply_mask<F: Real>(x: &mut Tensor<F>, mask: &[F]) {
    x.data.iter_mut().zip(mask).for_each(|(v, &m)| *v *= m);
}

/// 2×2 max pooling, stride 2. Returns the pooled tensor and the winning
/// offset (0..4) of every output cell; ties go to the first maximum.
pub fn maxpool2<F: Real>(x: &Tensor<F>) -> (Tensor<F>, Vec<u8>) {
    let (oh, ow) = (x.h / 2, x.w / 2);
    let mut out = Tensor::zeros(x.c, x.n, oh, ow);
    let mut arg = vec![0u8; out.data.len()];
    let ohw = oh * ow;
    for c in 0..x.c {
        for n in 0..x.n {
            let src = x.plane(c, n);
            let base = (c * x.n + n) * ohw;
            for y in 0..oh {
                for xx in 0..ow {
                    let i = 2 * y * x.w + 2 * xx;
                    let cand = [src[i], src[i + 1], src[i + x.w], src[i + x.w + 1]];
                    let mut best = 0;
                    for j in 1..4 {
                        if cand[j] > cand[best] {
                            best = j;
                        }
                    }
                    out.data[base + y * ow + xx] = cand[best];
                    arg[base + y * ow + xx] = best as u8;
                }
            }
        }
    }
    (out, arg)
}

pub fn maxpool2_backward<F: Real>(dy: &Tensor<F>, arg: &[u8], h: usize, w: usize) -> Tensor<F> {
    let mut dx = Tensor::zeros(dy.c, dy.n, h, w);
    let ohw = dy.hw();
    for c in 0..dy.c {
        for n in 0..dy.n {
            let base = (c * dy.n + n) * ohw;
            let g = &dy.data[base..base + ohw];
            let a = &arg[base..base + ohw];
            let dst = dx.plane_mut(c, n);
            for y in 0..dy.h {
                for xx in 0..dy.w {
                    let o = y * dy.w + xx;
                    let j = a[o] as usize;
                    dst[(2 * y + j / 2) * w + 2 * xx + j % 2] += g[o];
                }
            }
        }
    }
    dx
}

fn upsample_axis(insz: usize, outsz: usize) -> Vec<(usize, usize, f64)> {
    (0..outsz)
        .map(|o| {
            let s = if outsz > 1 {
                o as f64 * (insz - 1) as f64 / (outsz - 1) as f64
            } else {
                0.0
            };
            let i0 = (s.floor() as usize).min(insz - 1);
            let i1 = (i0 + 1).min(insz - 1);
            (i0, i1, s - i0 as f64)
        })
        .collect()
}

/// 2× bilinear upsampling with aligned corners.
pub fn upsample2<F: Real>(x: &Tensor<F>) -> Tensor<F> {
    let (oh, ow) = (x.h * 2, x.w * 2);
    let ys = upsample_axis(x.h, oh);
    let xs: Vec<(usize, usize, F)> = upsample_axis(x.w, ow)
        .into_iter()
        .map(|(a, b, f)| (a, b, F::lit(f)))
        .collect();
    let mut out = Tensor::zeros(x.c, x.n, oh, ow);
    let mut row0 = vec![F::zero(); ow];
    let mut row1 = vec![F::zero(); ow];
    for c in 0..x.c {
        for n in 0..x.n {
            let src = x.plane(c, n);
            let dst = out.plane_mut(c, n);
            for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
                let fy = F::lit(fy);
                let (r0, r1) = (&src[y0 * x.w..], &src[y1 * x.w..]);
                for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
                    row0[ox] = r0[x0] + (r0[x1] - r0[x0]) * fx;
                    row1[ox] = r1[x0] + (r1[x1] - r1[x0]) * fx;
                }
                let d = &mut dst[oy * ow..(oy + 1) * ow];
                for ((dv, &a), &b) in d.iter_mut().zip(&row0).zip(&row1) {
                    *dv = a + (b - a) * fy;
                }
            }
        }
    }
    out
}

pub fn upsample2_backward<F: Real>(dy: &Tensor<F>, h: usize, w: usize) -> Tensor<F> {
    let ys = upsample_axis(h, dy.h);
    let xs = upsample_axis(w, dy.w);
    let mut dx = Tensor::zeros(dy.c, dy.n, h, w);
    for c in 0..dy.c {
        for n in 0..dy.n {
            let g = dy.plane(c, n);
            let dst = dx.plane_mut(c, n);
            for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
                let (wy0, wy1) = (F::lit(1.0 - fy), F::lit(fy));
                for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
                    let v = g[oy * dy.w + ox];
                    let (wx0, wx1) = (F::lit(1.0 - fx), F::lit(fx));
                    dst[y0 * w + x0] += v * wy0 * wx0;
                    dst[y0 * w + x1] += v * wy0 * wx1;
                    dst[y1 * w + x0] += v * wy1 * wx0;
                    dst[y1 * w + x1] += v * wy1 * wx1;
                }
            }
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(c: usize, n: usize, h: usize, w: usize, seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..c * n * h * w).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
        Tensor::from_vec(data, c, n, h, w)
    }

    /// Direct 3×3 convolution used as an oracle for the im2col path.
    fn direct_conv(conv: &Conv2d<f64>, x: &Tensor<f64>) -> Tensor<f64> {
        let mut out = Tensor::zeros(conv.cout, x.n, x.h, x.w);
        let r = conv.ksize as isize / 2;
        for co in 0..conv.cout {
            for n in 0..x.n {
                for y in 0..x.h as isize {
                    for xx in 0..x.w as isize {
                        let mut acc = conv.bias.value[co];
                        for ci in 0..conv.cin {
                            for ky in -r..=r {
                                for kx in -r..=r {
                                    let (sy, sx) = (y + ky, xx + kx);
                                    if sy < 0 || sx < 0 || sy >= x.h as isize || sx >= x.w as isize {
                                        continue;
                                    }
                                    let wi = ((co * conv.cin + ci) as isize * conv.ksize as isize + ky + r)
                                        * conv.ksize as isize
                                        + kx
                                        + r;
                                    acc += conv.weight.value[wi as usize]
                                        * x.plane(ci, n)[(sy * x.w as isize + sx) as usize];
                                }
                            }
                        }
                        out.plane_mut(co, n)[(y * x.w as isize + xx) as usize] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_direct_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for k in [1, 3] {
            let mut conv = Conv2d::<f64>::new(3, 4, k, &mut rng);
            conv.bias.value = vec![0.1, -0.2, 0.3, 0.0];
            let x = rand_tensor(3, 2, 5, 6, 11);
            let a = conv.forward(&x);
            let b = direct_conv(&conv, &x);
            for (u, v) in a.data.iter().zip(&b.data) {
                assert!((u - v).abs() < 1e-12);
            }
        }
    }

    /// Checks a layer's input gradient against central differences of `sum(y ⊙ r)`.
    fn check_input_grad(
        x: &Tensor<f64>,
        f: &mut dyn FnMut(&Tensor<f64>) -> Tensor<f64>,
        dx: &Tensor<f64>,
        r: &Tensor<f64>,
    ) {
        let h = 1e-6;
        for i in (0..x.data.len()).step_by(7) {
            let mut xp = x.clone();
            xp.data[i] += h;
            let mut xm = x.clone();
            xm.data[i] -= h;
            let lp: f64 = f(&xp).data.iter().zip(&r.data).map(|(a, b)| a * b).sum();
            let lm: f64 = f(&xm).data.iter().zip(&r.data).map(|(a, b)| a * b).sum();
            let fd = (lp - lm) / (2.0 * h);
            assert!((fd - dx.data[i]).abs() < 1e-6 * (1.0 + fd.abs()), "i={i} fd={fd} an={}", dx.data[i]);
        }
    }

    #[test]
    fn conv_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for k in [1, 3] {
            let mut conv = Conv2d::<f64>::new(2, 3, k, &mut rng);
            let x = rand_tensor(2, 2, 4, 5, 9);
            let r = rand_tensor(3, 2, 4, 5, 10);
            let dx = conv.backward(&x, &r, true).unwrap();
            let c2 = conv.clone();
            check_input_grad(&x, &mut |t| c2.forward(t), &dx, &r);
            // weight gradient
            let h = 1e-6;
            for i in 0..conv.weight.len() {
                let mut cp = conv.clone();
                cp.weight.value[i] += h;
                let mut cm = conv.clone();
                cm.weight.value[i] -= h;
                let dot = |t: Tensor<f64>| -> f64 { t.data.iter().zip(&r.data).map(|(a, b)| a * b).sum() };
                let fd = (dot(cp.forward(&x)) - dot(cm.forward(&x))) / (2.0 * h);
                assert!((fd - conv.weight.grad[i]).abs() < 1e-6 * (1.0 + fd.abs()));
            }
        }
    }

    #[test]
    fn batchnorm_backward_matches_finite_differences() {
        let mut bn = BatchNorm::<f64>::new(2);
        bn.gamma.value = vec![1.3, 0.7];
        bn.beta.value = vec![0.2, -0.1];
        let x = rand_tensor(2, 3, 3, 3, 1);
        let r = rand_tensor(2, 3, 3, 3, 2);
        let (_, cache) = bn.forward_train(&x);
        let dx = bn.backward(&cache, &r);
        let mut b2 = bn.clone();
        check_input_grad(&x, &mut |t| b2.forward_train(t).0, &dx, &r);
    }

    #[test]
    fn upsample_backward_is_adjoint() {
        let x = rand_tensor(2, 2, 3, 4, 4);
        let r = rand_tensor(2, 2, 6, 8, 5);
        let y = upsample2(&x);
        let dx = upsample2_backward(&r, 3, 4);
        let lhs: f64 = y.data.iter().zip(&r.data).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.data.iter().zip(&dx.data).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
        // corners are aligned
        assert_eq!(y.plane(0, 0)[0], x.plane(0, 0)[0]);
        assert_eq!(y.plane(1, 1)[6 * 8 - 1], x.plane(1, 1)[11]);
    }

    #[test]
    fn maxpool_routes_gradient_to_winner() {
        let x = Tensor::<f64>::from_vec(vec![1.0, 5.0, 2.0, 3.0], 1, 1, 2, 2);
        let (y, arg) = maxpool2(&x);
        assert_eq!(y.data, vec![5.0]);
        let dx = maxpool2_backward(&Tensor::from_vec(vec![2.0], 1, 1, 1, 1), &arg, 2, 2);
        assert_eq!(dx.data, vec![0.0, 2.0, 0.0, 0.0]);
    }

    #[test]
    fn dropout_mask_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let m: Vec<f32> = dropout_mask(1000, 0.5, &mut rng);
        assert!(m.iter().all(|&v| v == 0.0 || v == 2.0));
        let kept = m.iter().filter(|&&v| v > 0.0).count();
        assert!((400..600).contains(&kept));
    }
}
