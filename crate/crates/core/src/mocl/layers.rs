//! Layers with hand-written backward passes. Each `backward` accumulates
//! parameter gradients into the supplied buffers and returns the gradient
//! with respect to the layer input.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::scalar::Scalar;

/// Square convolution, stride 1, zero "same" padding. Kernel size 1 or 3.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Conv2d<F> {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    /// `[out][in][ky][kx]`
    pub weight: Vec<F>,
    pub bias: Vec<F>,
}

impl<F: Scalar> Conv2d<F> {
    /// He-normal initialization, zero bias.
    pub fn new(in_channels: usize, out_channels: usize, kernel: usize, rng: &mut impl Rng) -> Self {
        assert!(kernel % 2 == 1, "odd kernel sizes only");
        let fan_in = (in_channels * kernel * kernel) as f64;
        let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("positive std");
        let weight = (0..out_channels * in_channels * kernel * kernel)
            .map(|_| F::lit(normal.sample(rng)))
            .collect();
        Conv2d {
            in_channels,
            out_channels,
            kernel,
            weight,
            bias: vec![F::zero(); out_channels],
        }
    }

    #[inline]
    fn w(&self, o: usize, i: usize, ky: usize, kx: usize) -> F {
        self.weight[((o * self.in_channels + i) * self.kernel + ky) * self.kernel + kx]
    }

    /// Visits every (kernel tap, output row) pair whose input row is in
    /// bounds, handing over the overlapping column ranges.
    #[inline]
    fn taps(
        &self,
        h: usize,
        w: usize,
        mut f: impl FnMut(usize, usize, usize, usize, std::ops::Range<usize>, std::ops::Range<usize>),
    ) {
        let pad = self.kernel / 2;
        for ky in 0..self.kernel {
            for kx in 0..self.kernel {
                // output col c reads input col c + kx - pad
                let c_lo = pad.saturating_sub(kx);
                let c_hi = (w + pad).saturating_sub(kx).min(w);
                if c_lo >= c_hi {
                    continue;
                }
                let in_lo = c_lo + kx - pad;
                let in_hi = c_hi + kx - pad;
                for r in 0..h {
                    let rr = r + ky;
                    if rr < pad || rr - pad >= h {
                        continue;
                    }
                    f(ky, kx, r, rr - pad, c_lo..c_hi, in_lo..in_hi);
                }
            }
        }
    }

    pub fn forward(&self, x: &Tensor<F>) -> Tensor<F> {
        assert_eq!(x.channels, self.in_channels, "conv input channels");
        let (h, w) = x.dims();
        let mut y = Tensor::zeros(self.out_channels, h, w);
        for o in 0..self.out_channels {
            let yo = y.plane_mut(o);
            yo.iter_mut().for_each(|v| *v = self.bias[o]);
            for i in 0..self.in_channels {
                let xi = x.plane(i);
                self.taps(h, w, |ky, kx, r, rr, out_cols, in_cols| {
                    let wt = self.w(o, i, ky, kx);
                    let dst = &mut yo[r * w + out_cols.start..r * w + out_cols.end];
                    let src = &xi[rr * w + in_cols.start..rr * w + in_cols.end];
                    for (d, &s) in dst.iter_mut().zip(src) {
                        *d += wt * s;
                    }
                });
            }
        }
        y
    }

    /// Returns `dL/dx`; adds `dL/dW`, `dL/db` into `gw`, `gb`.
    /// With `need_input_grad = false` the input gradient is skipped and an
    /// empty tensor returned.
    pub fn backward(
        &self,
        x: &Tensor<F>,
        gy: &Tensor<F>,
        gw: &mut [F],
        gb: &mut [F],
        need_input_grad: bool,
    ) -> Tensor<F> {
        let (h, w) = x.dims();
        let mut gx = if need_input_grad {
            Tensor::zeros(self.in_channels, h, w)
        } else {
            Tensor::zeros(0, 0, 0)
        };
        for o in 0..self.out_channels {
            let go = gy.plane(o);
            gb[o] += go.iter().copied().sum::<F>();
            for i in 0..self.in_channels {
                let xi = x.plane(i);
                let k = self.kernel;
                let base = (o * self.in_channels + i) * k * k;
                let mut acc = vec![F::zero(); k * k];
                self.taps(h, w, |ky, kx, r, rr, out_cols, in_cols| {
                    let g = &go[r * w + out_cols.start..r * w + out_cols.end];
                    let s = &xi[rr * w + in_cols.start..rr * w + in_cols.end];
                    let mut dot = F::zero();
                    for (&a, &b) in g.iter().zip(s) {
                        dot += a * b;
                    }
                    acc[ky * k + kx] += dot;
                });
                for (j, a) in acc.into_iter().enumerate() {
                    gw[base + j] += a;
                }
                if need_input_grad {
                    let gxi = gx.plane_mut(i);
                    self.taps(h, w, |ky, kx, r, rr, out_cols, in_cols| {
                        let wt = self.w(o, i, ky, kx);
                        let g = &go[r * w + out_cols.start..r * w + out_cols.end];
                        let d = &mut gxi[rr * w + in_cols.start..rr * w + in_cols.end];
                        for (dst, &gv) in d.iter_mut().zip(g) {
                            *dst += wt * gv;
                        }
                    });
                }
            }
        }
        gx
    }
}

pub fn relu_inplace<F: Scalar>(x: &mut Tensor<F>) {
    for v in &mut x.data {
        if *v < F::zero() {
            *v = F::zero();
        }
    }
}

/// Masks `grad` where the ReLU output was zero.
pub fn relu_backward<F: Scalar>(output: &Tensor<F>, grad: &mut Tensor<F>) {
    for (g, &y) in grad.data.iter_mut().zip(&output.data) {
        if y <= F::zero() {
            *g = F::zero();
        }
    }
}

/// 2x2 max pooling, stride 2. Returns the pooled map and the flat index of
/// each winner in the input plane.
pub fn maxpool2<F: Scalar>(x: &Tensor<F>) -> (Tensor<F>, Vec<usize>) {
    let (h, w) = x.dims();
    let (oh, ow) = (h / 2, w / 2);
    let mut y = Tensor::zeros(x.channels, oh, ow);
    let mut arg = vec![0; x.channels * oh * ow];
    for ch in 0..x.channels {
        let xp = x.plane(ch);
        for r in 0..oh {
            for c in 0..ow {
                let cands = [
                    2 * r * w + 2 * c,
                    2 * r * w + 2 * c + 1,
                    (2 * r + 1) * w + 2 * c,
                    (2 * r + 1) * w + 2 * c + 1,
                ];
                let mut best = cands[0];
                for &k in &cands[1..] {
                    if xp[k] > xp[best] {
                        best = k;
                    }
                }
                let oi = (ch * oh + r) * ow + c;
                y.data[oi] = xp[best];
                arg[oi] = best;
            }
        }
    }
    (y, arg)
}

pub fn maxpool2_backward<F: Scalar>(
    gy: &Tensor<F>,
    arg: &[usize],
    in_h: usize,
    in_w: usize,
) -> Tensor<F> {
    let mut gx = Tensor::zeros(gy.channels, in_h, in_w);
    let n = gy.plane_len();
    for ch in 0..gy.channels {
        let gxp = gx.plane_mut(ch);
        for j in 0..n {
            gxp[arg[ch * n + j]] += gy.data[ch * n + j];
        }
    }
    gx
}

/// Nearest-neighbour 2x upsampling.
pub fn upsample2<F: Scalar>(x: &Tensor<F>) -> Tensor<F> {
    let (h, w) = x.dims();
    let mut y = Tensor::zeros(x.channels, 2 * h, 2 * w);
    for ch in 0..x.channels {
        for r in 0..2 * h {
            for c in 0..2 * w {
                y.data[(ch * 2 * h + r) * 2 * w + c] = x.at(ch, r / 2, c / 2);
            }
        }
    }
    y
}

pub fn upsample2_backward<F: Scalar>(gy: &Tensor<F>) -> Tensor<F> {
    let (h, w) = (gy.height / 2, gy.width / 2);
    let mut gx = Tensor::zeros(gy.channels, h, w);
    for ch in 0..gy.channels {
        for r in 0..gy.height {
            for c in 0..gy.width {
                gx.data[(ch * h + r / 2) * w + c / 2] += gy.at(ch, r, c);
            }
        }
    }
    gx
}
