//! Style-based generator: a lifting MLP from the input space to one style
//! row per synthesis layer, then a learned constant refined by
//! style-modulated convolutions.

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use super::nn::{Builder, Conv1, Conv3, Dense};
use super::ops;
use super::Arch;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StyleArch {
    pub z_dim: usize,
    pub w_dim: usize,
    pub const_res: usize,
    pub const_channels: usize,
    /// `(resolution, channels)` per synthesis layer; one style row each.
    pub layers: Vec<(usize, usize)>,
}

impl Default for StyleArch {
    fn default() -> Self {
        Self {
            z_dim: 64,
            w_dim: 64,
            const_res: 4,
            const_channels: 32,
            layers: vec![(4, 32), (8, 32), (16, 32), (32, 16), (64, 16), (64, 8)],
        }
    }
}

impl StyleArch {
    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn image_size(&self) -> usize {
        self.layers.last().map_or(self.const_res, |l| l.0)
    }

    fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::validation("style generator needs at least one layer"));
        }
        let mut res = self.const_res;
        for &(r, _) in &self.layers {
            if r != res && r != 2 * res {
                return Err(Error::validation(format!(
                    "style layer resolution {r} must equal or double {res}"
                )));
            }
            res = r;
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct StyleBlock {
    upsample: bool,
    conv: Conv3,
    affine: Dense,
    channels: usize,
}

#[derive(Debug, Clone)]
pub struct StyleNet {
    arch: StyleArch,
    lift1: Dense,
    lift2: Dense,
    constant: Tensor,
    blocks: Vec<StyleBlock>,
    to_rgb: Conv1,
}

impl Arch for StyleArch {
    type Net = StyleNet;
    const KIND: &'static str = "style_generator";

    fn build(&self, b: &mut Builder) -> Result<StyleNet> {
        self.validate()?;
        let lift1 = Dense::new(b, "lift1", self.z_dim, self.w_dim, 1.0)?;
        let lift2 = Dense::new(b, "lift2", self.w_dim, self.w_dim, 1.0)?;
        let constant = b.param(
            "const",
            &[1, self.const_res, self.const_res, self.const_channels],
            1.0,
            0.0,
        )?;
        let mut blocks = Vec::with_capacity(self.layers.len());
        let (mut res, mut cin) = (self.const_res, self.const_channels);
        for (i, &(r, c)) in self.layers.iter().enumerate() {
            let block = b.scoped(&format!("layer{i}"), |b| {
                Ok(StyleBlock {
                    upsample: r != res,
                    conv: Conv3::new(b, "conv", cin, c, 1.0)?,
                    affine: Dense::new(b, "affine", self.w_dim, 2 * c, 0.25)?,
                    channels: c,
                })
            })?;
            blocks.push(block);
            res = r;
            cin = c;
        }
        let to_rgb = Conv1::new(b, "to_rgb", cin, 3, 1.0)?;
        Ok(StyleNet {
            arch: self.clone(),
            lift1,
            lift2,
            constant,
            blocks,
            to_rgb,
        })
    }
}

impl StyleNet {
    pub fn arch(&self) -> &StyleArch {
        &self.arch
    }

    /// `[B, z_dim]` → `[B, L, w_dim]`, the same row repeated per layer.
    pub fn lift(&self, z: &Tensor) -> Result<Tensor> {
        let (n, d) = z.dims2()?;
        if d != self.arch.z_dim {
            return Err(Error::shape(format!("latent has {d} dims, generator expects {}", self.arch.z_dim)));
        }
        let h = ops::pixel_norm(z, 1e-8)?;
        let h = ops::leaky_relu(&self.lift1.forward(&h)?, 0.2)?;
        let w = self.lift2.forward(&h)?;
        let l = self.arch.n_layers();
        Ok(w.unsqueeze(1)?.broadcast_as((n, l, self.arch.w_dim))?.contiguous()?)
    }

    /// `[B, L, w_dim]` → `[B, H, W, 3]` in `[0,1]`.
    pub fn synthesize(&self, w: &Tensor) -> Result<Tensor> {
        let (n, l, d) = w.dims3()?;
        if l != self.arch.n_layers() || d != self.arch.w_dim {
            return Err(Error::shape(format!(
                "style code is {l}x{d}, generator expects {}x{}",
                self.arch.n_layers(),
                self.arch.w_dim
            )));
        }
        let (_, r, _, c) = self.constant.dims4()?;
        let mut h = self.constant.broadcast_as((n, r, r, c))?.contiguous()?;
        for (i, block) in self.blocks.iter().enumerate() {
            if block.upsample {
                h = ops::upsample2(&h)?;
            }
            h = block.conv.forward(&h)?;
            let style = block.affine.forward(&w.narrow(1, i, 1)?.squeeze(1)?)?;
            let gamma = (style.narrow(1, 0, block.channels)? + 1.0)?;
            let beta = style.narrow(1, block.channels, block.channels)?;
            h = ops::scale_shift(&ops::instance_norm(&h, 1e-5)?, &gamma, &beta)?;
            h = ops::leaky_relu(&h, 0.2)?;
        }
        ops::sigmoid(&self.to_rgb.forward(&h)?)
    }

    pub fn generate(&self, z: &Tensor) -> Result<Tensor> {
        self.synthesize(&self.lift(z)?)
    }
}
