//! U-Net attribute encoder. The decoder path emits one feature map per
//! level, coarsest first, which together form the attribute pyramid.

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use super::nn::{Builder, Conv3};
use super::ops;
use super::Arch;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttributeArch {
    pub image_size: usize,
    /// Encoder widths from full resolution down; `K = down.len()`.
    pub down: Vec<usize>,
    /// Decoder widths for levels `1..K`, coarse to fine.
    pub up: Vec<usize>,
}

impl Default for AttributeArch {
    fn default() -> Self {
        Self {
            image_size: 64,
            down: vec![8, 16, 32, 32],
            up: vec![32, 16, 8],
        }
    }
}

impl AttributeArch {
    pub fn depth(&self) -> usize {
        self.down.len()
    }

    /// `(side, channels)` per pyramid level, coarsest first.
    pub fn level_shapes(&self) -> Vec<(usize, usize)> {
        let k = self.depth();
        let coarsest = self.image_size >> (k - 1);
        std::iter::once(*self.down.last().unwrap())
            .chain(self.up.iter().copied())
            .enumerate()
            .map(|(i, c)| (coarsest << i, c))
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct AttributeNet {
    arch: AttributeArch,
    down: Vec<Conv3>,
    up: Vec<Conv3>,
}

impl Arch for AttributeArch {
    type Net = AttributeNet;
    const KIND: &'static str = "attribute_encoder";

    fn build(&self, b: &mut Builder) -> Result<AttributeNet> {
        let k = self.depth();
        if k == 0 || self.up.len() + 1 != k || !self.image_size.is_multiple_of(1 << (k - 1)) {
            return Err(Error::validation(format!(
                "attribute encoder needs {} decoder widths and an image size divisible by 2^{}",
                k.saturating_sub(1),
                k.saturating_sub(1)
            )));
        }
        let mut down = Vec::with_capacity(k);
        let mut cin = 3;
        for (i, &c) in self.down.iter().enumerate() {
            down.push(Conv3::new(b, &format!("down{i}"), cin, c, 1.0)?);
            cin = c;
        }
        let mut up = Vec::with_capacity(k - 1);
        for (i, &c) in self.up.iter().enumerate() {
            let skip = self.down[k - 2 - i];
            up.push(Conv3::new(b, &format!("up{i}"), cin + skip, c, 1.0)?);
            cin = c;
        }
        Ok(AttributeNet {
            arch: self.clone(),
            down,
            up,
        })
    }
}

impl AttributeNet {
    pub fn arch(&self) -> &AttributeArch {
        &self.arch
    }

    /// `[B,S,S,3]` → K maps, coarsest first.
    pub fn forward(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        let (_, h, w, c) = x.dims4()?;
        if h != self.arch.image_size || w != self.arch.image_size || c != 3 {
            return Err(Error::shape(format!(
                "attribute encoder expects {s}x{s}x3 input, got {h}x{w}x{c}",
                s = self.arch.image_size
            )));
        }
        let mut skips = Vec::with_capacity(self.down.len());
        let mut h = ((x * 2.0)? - 1.0)?;
        for (i, conv) in self.down.iter().enumerate() {
            if i > 0 {
                h = ops::avg_pool2(&h)?;
            }
            h = ops::leaky_relu(&conv.forward(&h)?, 0.2)?;
            skips.push(h.clone());
        }
        let mut levels = vec![h.clone()];
        let k = self.down.len();
        for (i, conv) in self.up.iter().enumerate() {
            let cat = Tensor::cat(&[&ops::upsample2(&h)?, &skips[k - 2 - i]], 3)?;
            h = ops::leaky_relu(&conv.forward(&cat)?, 0.2)?;
            levels.push(h.clone());
        }
        Ok(levels)
    }
}
