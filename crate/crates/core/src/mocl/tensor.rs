use serde::{Deserialize, Serialize};

use crate::dataset::Rgb;
use crate::grid::Grid;
use crate::scalar::Scalar;

/// Channel-major feature map `[channels][height][width]` for one image.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor<F> {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<F>,
}

impl<F: Scalar> Tensor<F> {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Tensor {
            channels,
            height,
            width,
            data: vec![F::zero(); channels * height * width],
        }
    }

    pub fn from_vec(channels: usize, height: usize, width: usize, data: Vec<F>) -> Option<Self> {
        (data.len() == channels * height * width).then_some(Tensor {
            channels,
            height,
            width,
            data,
        })
    }

    /// RGB image scaled to `[-1, 1]`, one channel per color.
    pub fn from_rgb(image: &Grid<Rgb>) -> Self {
        let (h, w) = image.dims();
        let mut t = Tensor::zeros(3, h, w);
        let scale = F::lit(1.0 / 127.5);
        for (i, px) in image.as_slice().iter().enumerate() {
            for (ch, &v) in px.iter().enumerate() {
                t.data[ch * h * w + i] = F::lit(f64::from(v)) * scale - F::one();
            }
        }
        t
    }

    #[inline]
    pub fn plane_len(&self) -> usize {
        self.height * self.width
    }

    #[inline]
    pub fn plane(&self, ch: usize) -> &[F] {
        let n = self.plane_len();
        &self.data[ch * n..(ch + 1) * n]
    }

    #[inline]
    pub fn plane_mut(&mut self, ch: usize) -> &mut [F] {
        let n = self.plane_len();
        &mut self.data[ch * n..(ch + 1) * n]
    }

    #[inline]
    pub fn at(&self, ch: usize, r: usize, c: usize) -> F {
        self.data[(ch * self.height + r) * self.width + c]
    }

    /// Feature vector of pixel `(r, c)` across channels.
    pub fn pixel(&self, r: usize, c: usize) -> Vec<F> {
        (0..self.channels).map(|ch| self.at(ch, r, c)).collect()
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn scale(&mut self, s: F) {
        for v in &mut self.data {
            *v *= s;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Reflect-pads bottom/right so both sides become multiples of `multiple`.
    pub fn pad_reflect_to(&self, multiple: usize) -> Self {
        let h = self.height.div_ceil(multiple) * multiple;
        let w = self.width.div_ceil(multiple) * multiple;
        if (h, w) == (self.height, self.width) {
            return self.clone();
        }
        let reflect = |i: usize, n: usize| -> usize {
            if n == 1 {
                return 0;
            }
            let period = 2 * (n - 1);
            let m = i % period;
            if m < n {
                m
            } else {
                period - m
            }
        };
        let mut out = Tensor::zeros(self.channels, h, w);
        for ch in 0..self.channels {
            for r in 0..h {
                let sr = reflect(r, self.height);
                for c in 0..w {
                    let sc = reflect(c, self.width);
                    out.data[(ch * h + r) * w + c] = self.at(ch, sr, sc);
                }
            }
        }
        out
    }

    /// Top-left `height x width` window.
    pub fn crop(&self, height: usize, width: usize) -> Self {
        let mut out = Tensor::zeros(self.channels, height, width);
        for ch in 0..self.channels {
            for r in 0..height {
                let src = (ch * self.height + r) * self.width;
                let dst = (ch * height + r) * width;
                out.data[dst..dst + width].copy_from_slice(&self.data[src..src + width]);
            }
        }
        out
    }
}

/// Per-pixel softmax over channels.
pub fn softmax<F: Scalar>(logits: &Tensor<F>) -> Tensor<F> {
    let n = logits.plane_len();
    let k = logits.channels;
    let mut out = logits.clone();
    for p in 0..n {
        let mut m = F::neg_infinity();
        for ch in 0..k {
            m = m.max(logits.data[ch * n + p]);
        }
        let mut z = F::zero();
        for ch in 0..k {
            let e = (logits.data[ch * n + p] - m).exp();
            out.data[ch * n + p] = e;
            z += e;
        }
        for ch in 0..k {
            out.data[ch * n + p] /= z;
        }
    }
    out
}
