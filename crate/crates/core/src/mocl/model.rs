//! Small two-level U-Net style encoder-decoder with a class head and an
//! auxiliary embedding head on the last decoder features.
//!
//! ```text
//! x ─conv3─relu─> e1 ──────────────────────────────(+)─conv3─relu─> d ─┬─conv1─> logits
//!                  └─pool─conv3─relu─> e2 ─conv1─up─┘                   └─conv1─> embeddings
//! ```

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::layers::{
    maxpool2, maxpool2_backward, relu_backward, relu_inplace, upsample2, upsample2_backward, Conv2d,
};
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::seeding;

pub const NUM_CLASSES: usize = 3;

/// Spatial dimensions must be multiples of this.
pub const STRIDE: usize = 2;

/// Architecture descriptor, written as `unet2:base=<C>:embed=<D>`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub base_channels: usize,
    pub embed_dim: usize,
}

impl Default for Architecture {
    fn default() -> Self {
        Architecture {
            base_channels: 8,
            embed_dim: 32,
        }
    }
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "unet2:base={}:embed={}", self.base_channels, self.embed_dim)
    }
}

impl FromStr for Architecture {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut parts = s.split(':');
        if parts.next() != Some("unet2") {
            return Err(Error::Config(format!("unknown architecture `{s}`")));
        }
        let mut arch = Architecture::default();
        for part in parts {
            let (k, v) = part
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("malformed architecture field `{part}`")))?;
            let v: usize = v
                .parse()
                .map_err(|_| Error::Config(format!("architecture field `{part}` is not an integer")))?;
            match k {
                "base" => arch.base_channels = v,
                "embed" => arch.embed_dim = v,
                _ => return Err(Error::Config(format!("unknown architecture field `{k}`"))),
            }
        }
        if arch.base_channels == 0 || arch.embed_dim == 0 {
            return Err(Error::Config("architecture sizes must be positive".into()));
        }
        Ok(arch)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegmenterModel<F> {
    pub architecture: Architecture,
    pub seed: u64,
    enc1: Conv2d<F>,
    enc2: Conv2d<F>,
    lateral: Conv2d<F>,
    dec: Conv2d<F>,
    class_head: Conv2d<F>,
    embed_head: Conv2d<F>,
}

/// Intermediate activations kept for the backward pass.
pub struct ForwardCache<F> {
    input: Tensor<F>,
    e1: Tensor<F>,
    pooled: Tensor<F>,
    pool_arg: Vec<usize>,
    e2: Tensor<F>,
    skip_sum: Tensor<F>,
    pub decoder: Tensor<F>,
}

pub struct ForwardOutput<F> {
    pub logits: Tensor<F>,
    pub embeddings: Tensor<F>,
    pub cache: ForwardCache<F>,
}

/// Parameter gradients, laid out like [`SegmenterModel::params`].
#[derive(Clone, Debug)]
pub struct Gradients<F> {
    pub buffers: Vec<Vec<F>>,
}

impl<F: Scalar> Gradients<F> {
    pub fn zero_like(model: &SegmenterModel<F>) -> Self {
        Gradients {
            buffers: model.params().iter().map(|p| vec![F::zero(); p.len()]).collect(),
        }
    }

    pub fn scale(&mut self, s: F) {
        for b in &mut self.buffers {
            for v in b {
                *v *= s;
            }
        }
    }
}

impl<F: Scalar> SegmenterModel<F> {
    pub fn new(architecture: Architecture, seed: u64) -> Self {
        let mut rng = seeding::stream(seed, &[b"model-init"]);
        let c = architecture.base_channels;
        let d = architecture.embed_dim;
        SegmenterModel {
            architecture,
            seed,
            enc1: Conv2d::new(3, c, 3, &mut rng),
            enc2: Conv2d::new(c, 2 * c, 3, &mut rng),
            lateral: Conv2d::new(2 * c, c, 1, &mut rng),
            dec: Conv2d::new(c, c, 3, &mut rng),
            class_head: Conv2d::new(c, NUM_CLASSES, 1, &mut rng),
            embed_head: Conv2d::new(c, d, 1, &mut rng),
        }
    }

    fn layers(&self) -> [&Conv2d<F>; 6] {
        [
            &self.enc1,
            &self.enc2,
            &self.lateral,
            &self.dec,
            &self.class_head,
            &self.embed_head,
        ]
    }

    fn layers_mut(&mut self) -> [&mut Conv2d<F>; 6] {
        [
            &mut self.enc1,
            &mut self.enc2,
            &mut self.lateral,
            &mut self.dec,
            &mut self.class_head,
            &mut self.embed_head,
        ]
    }

    /// Weight and bias buffers of every layer, in a fixed order.
    pub fn params(&self) -> Vec<&Vec<F>> {
        self.layers()
            .into_iter()
            .flat_map(|l| [&l.weight, &l.bias])
            .collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Vec<F>> {
        self.layers_mut()
            .into_iter()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .collect()
    }

    pub fn num_params(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    /// Fails unless both sides are multiples of [`STRIDE`].
    pub fn check_input(&self, input: &Tensor<F>) -> Result<()> {
        if input.channels != 3 {
            return Err(Error::ContractViolation(format!(
                "expected 3 input channels, got {}",
                input.channels
            )));
        }
        let (h, w) = input.dims();
        if h == 0 || w == 0 || h % STRIDE != 0 || w % STRIDE != 0 {
            return Err(Error::Invalid(format!(
                "input {h}x{w} is not a multiple of the network stride {STRIDE}; pad the image (predict() pads reflectively)"
            )));
        }
        Ok(())
    }

    pub fn forward(&self, input: &Tensor<F>) -> Result<ForwardOutput<F>> {
        self.check_input(input)?;
        let mut e1 = self.enc1.forward(input);
        relu_inplace(&mut e1);
        let (pooled, pool_arg) = maxpool2(&e1);
        let mut e2 = self.enc2.forward(&pooled);
        relu_inplace(&mut e2);
        // 1x1 conv commutes with nearest upsampling; run it at half resolution.
        let lateral = upsample2(&self.lateral.forward(&e2));
        let mut skip_sum = e1.clone();
        for (s, &l) in skip_sum.data.iter_mut().zip(&lateral.data) {
            *s += l;
        }
        let mut decoder = self.dec.forward(&skip_sum);
        relu_inplace(&mut decoder);
        let logits = self.class_head.forward(&decoder);
        let embeddings = self.embed_head.forward(&decoder);
        Ok(ForwardOutput {
            logits,
            embeddings,
            cache: ForwardCache {
                input: input.clone(),
                e1,
                pooled,
                pool_arg,
                e2,
                skip_sum,
                decoder,
            },
        })
    }

    /// Backpropagates `dL/dlogits` and adds the parameter gradients to
    /// `grads`. The embedding head receives no gradient.
    pub fn backward(&self, cache: &ForwardCache<F>, grad_logits: &Tensor<F>, grads: &mut Gradients<F>) {
        let (h, w) = cache.input.dims();
        let [g_enc1_w, g_enc1_b, g_enc2_w, g_enc2_b, g_lat_w, g_lat_b, g_dec_w, g_dec_b, g_cls_w, g_cls_b, ..] =
            &mut grads.buffers[..]
        else {
            unreachable!("gradient layout matches params()")
        };
        let mut g_dec = self
            .class_head
            .backward(&cache.decoder, grad_logits, g_cls_w, g_cls_b, true);
        relu_backward(&cache.decoder, &mut g_dec);
        let g_skip = self.dec.backward(&cache.skip_sum, &g_dec, g_dec_w, g_dec_b, true);
        // skip_sum = e1 + up(lateral(e2))
        let g_lat_out = upsample2_backward(&g_skip);
        let mut g_e2 = self.lateral.backward(&cache.e2, &g_lat_out, g_lat_w, g_lat_b, true);
        relu_backward(&cache.e2, &mut g_e2);
        let g_pooled = self.enc2.backward(&cache.pooled, &g_e2, g_enc2_w, g_enc2_b, true);
        let mut g_e1 = maxpool2_backward(&g_pooled, &cache.pool_arg, h, w);
        for (g, &s) in g_e1.data.iter_mut().zip(&g_skip.data) {
            *g += s;
        }
        relu_backward(&cache.e1, &mut g_e1);
        self.enc1.backward(&cache.input, &g_e1, g_enc1_w, g_enc1_b, false);
    }

    /// Converts every parameter to another scalar type.
    pub fn cast<G: Scalar>(&self) -> SegmenterModel<G> {
        let conv = |c: &Conv2d<F>| Conv2d {
            in_channels: c.in_channels,
            out_channels: c.out_channels,
            kernel: c.kernel,
            weight: c.weight.iter().map(|&v| G::lit(v.as_f64())).collect(),
            bias: c.bias.iter().map(|&v| G::lit(v.as_f64())).collect(),
        };
        SegmenterModel {
            architecture: self.architecture,
            seed: self.seed,
            enc1: conv(&self.enc1),
            enc2: conv(&self.enc2),
            lateral: conv(&self.lateral),
            dec: conv(&self.dec),
            class_head: conv(&self.class_head),
            embed_head: conv(&self.embed_head),
        }
    }
}
