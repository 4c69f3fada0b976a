//! Fusion generator with gated attentional denormalization.
//!
//! At every pyramid level the normalized activation is modulated twice, once
//! by an attribute-conditioned affine map (per pixel, from the pyramid) and
//! once by an identity-conditioned affine map (per channel, from the
//! embedding). A sigmoid mask computed from the activation picks between the
//! two per pixel.

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use super::nn::{Builder, Conv1, Conv3, Dense};
use super::ops;
use super::Arch;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FusionArch {
    pub id_dim: usize,
    /// `(side, attribute channels)` per pyramid level, coarsest first.
    pub attr_levels: Vec<(usize, usize)>,
    /// Generator width per level.
    pub widths: Vec<usize>,
}

impl Default for FusionArch {
    fn default() -> Self {
        Self {
            id_dim: 64,
            attr_levels: vec![(8, 32), (16, 32), (32, 16), (64, 8)],
            widths: vec![32, 32, 16, 8],
        }
    }
}

impl FusionArch {
    pub fn image_size(&self) -> usize {
        self.attr_levels.last().map_or(0, |l| l.0)
    }
}

#[derive(Debug, Clone)]
struct AddBlock {
    channels: usize,
    attr_affine: Conv1,
    id_affine: Dense,
    mask: Conv1,
}

impl AddBlock {
    fn new(b: &mut Builder, id_dim: usize, attr_c: usize, c: usize) -> Result<Self> {
        Ok(Self {
            channels: c,
            attr_affine: Conv1::new(b, "attr_affine", attr_c, 2 * c, 0.5)?,
            id_affine: Dense::new(b, "id_affine", id_dim, 2 * c, 0.5)?,
            mask: Conv1::new(b, "mask", c, 1, 0.5)?,
        })
    }

    fn forward(&self, h: &Tensor, attr: &Tensor, id: &Tensor) -> Result<Tensor> {
        let c = self.channels;
        let hn = ops::instance_norm(h, 1e-5)?;
        let a = self.attr_affine.forward(attr)?;
        let a_out = (hn.mul(&(a.narrow(3, 0, c)? + 1.0)?)? + a.narrow(3, c, c)?)?;
        let i = self.id_affine.forward(id)?;
        let i_out = ops::scale_shift(&hn, &(i.narrow(1, 0, c)? + 1.0)?, &i.narrow(1, c, c)?)?;
        let m = ops::sigmoid(&self.mask.forward(&hn)?)?;
        let keep = (m.ones_like()? - &m)?;
        Ok((a_out.broadcast_mul(&keep)? + i_out.broadcast_mul(&m)?)?)
    }
}

#[derive(Debug, Clone)]
struct Level {
    entry: Option<Conv3>,
    add: AddBlock,
    conv: Conv3,
}

#[derive(Debug, Clone)]
pub struct FusionNet {
    arch: FusionArch,
    seed_fc: Dense,
    levels: Vec<Level>,
    to_rgb: Conv1,
}

impl Arch for FusionArch {
    type Net = FusionNet;
    const KIND: &'static str = "fusion_generator";

    fn build(&self, b: &mut Builder) -> Result<FusionNet> {
        if self.attr_levels.is_empty() || self.attr_levels.len() != self.widths.len() {
            return Err(Error::validation("fusion generator needs one width per pyramid level"));
        }
        for pair in self.attr_levels.windows(2) {
            if pair[1].0 != 2 * pair[0].0 {
                return Err(Error::validation("pyramid levels must double in size"));
            }
        }
        let (s0, _) = self.attr_levels[0];
        let seed_fc = Dense::new(b, "seed", self.id_dim, s0 * s0 * self.widths[0], 1.0)?;
        let mut levels = Vec::with_capacity(self.widths.len());
        for (k, (&(_, ac), &c)) in self.attr_levels.iter().zip(&self.widths).enumerate() {
            let level = b.scoped(&format!("level{k}"), |b| {
                Ok(Level {
                    entry: if k == 0 {
                        None
                    } else {
                        Some(Conv3::new(b, "entry", self.widths[k - 1], c, 1.0)?)
                    },
                    add: AddBlock::new(b, self.id_dim, ac, c)?,
                    conv: Conv3::new(b, "conv", c, c, 1.0)?,
                })
            })?;
            levels.push(level);
        }
        let to_rgb = Conv1::new(b, "to_rgb", *self.widths.last().unwrap(), 3, 1.0)?;
        Ok(FusionNet {
            arch: self.clone(),
            seed_fc,
            levels,
            to_rgb,
        })
    }
}

impl FusionNet {
    pub fn arch(&self) -> &FusionArch {
        &self.arch
    }

    /// `id: [B, id_dim]`, `attrs`: pyramid coarsest first → `[B,S,S,3]`.
    pub fn forward(&self, id: &Tensor, attrs: &[Tensor]) -> Result<Tensor> {
        let (n, d) = id.dims2()?;
        if d != self.arch.id_dim {
            return Err(Error::shape(format!("identity has {d} dims, generator expects {}", self.arch.id_dim)));
        }
        if attrs.len() != self.levels.len() {
            return Err(Error::shape(format!(
                "pyramid has {} levels, generator expects {}",
                attrs.len(),
                self.levels.len()
            )));
        }
        for (a, &(s, c)) in attrs.iter().zip(&self.arch.attr_levels) {
            if a.dims() != [n, s, s, c] {
                return Err(Error::shape(format!(
                    "pyramid level {:?} does not match expected {:?}",
                    a.dims(),
                    [n, s, s, c]
                )));
            }
        }
        let (s0, _) = self.arch.attr_levels[0];
        let mut h = self.seed_fc.forward(id)?.reshape((n, s0, s0, self.arch.widths[0]))?;
        for (level, a) in self.levels.iter().zip(attrs) {
            if let Some(entry) = &level.entry {
                h = ops::leaky_relu(&entry.forward(&ops::upsample2(&h)?)?, 0.2)?;
            }
            h = ops::leaky_relu(&level.add.forward(&h, a, id)?, 0.2)?;
            h = ops::leaky_relu(&level.conv.forward(&h)?, 0.2)?;
        }
        ops::sigmoid(&self.to_rgb.forward(&h)?)
    }
}
