//! Face parser: a three-level U-Net on the half-resolution image with a
//! full-resolution refinement head that sees the input again.

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use super::nn::{Builder, Conv1, Conv3};
use super::ops;
use super::Arch;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParserArch {
    pub n_classes: usize,
    pub image_size: usize,
    pub widths: [usize; 3],
    pub head_width: usize,
}

impl Default for ParserArch {
    fn default() -> Self {
        Self {
            n_classes: 7,
            image_size: 64,
            widths: [16, 32, 32],
            head_width: 16,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ParserNet {
    arch: ParserArch,
    down: [Conv3; 3],
    up1: Conv3,
    up0: Conv3,
    head: Conv3,
    logits: Conv1,
}

impl Arch for ParserArch {
    type Net = ParserNet;
    const KIND: &'static str = "face_parser";

    fn build(&self, b: &mut Builder) -> Result<ParserNet> {
        if !self.image_size.is_multiple_of(8) {
            return Err(Error::validation("parser image size must be a multiple of 8"));
        }
        let [w0, w1, w2] = self.widths;
        Ok(ParserNet {
            arch: self.clone(),
            down: [
                Conv3::new(b, "down0", 3, w0, 1.0)?,
                Conv3::new(b, "down1", w0, w1, 1.0)?,
                Conv3::new(b, "down2", w1, w2, 1.0)?,
            ],
            up1: Conv3::new(b, "up1", w2 + w1, w1, 1.0)?,
            up0: Conv3::new(b, "up0", w1 + w0, w0, 1.0)?,
            head: Conv3::new(b, "head", w0 + 3, self.head_width, 1.0)?,
            logits: Conv1::new(b, "logits", self.head_width, self.n_classes, 1.0)?,
        })
    }
}

impl ParserNet {
    pub fn arch(&self) -> &ParserArch {
        &self.arch
    }

    /// `[B,H,W,3]` in `[0,1]` → `[B,H,W,n_classes]` logits.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (_, h, w, c) = x.dims4()?;
        if h != self.arch.image_size || w != self.arch.image_size || c != 3 {
            return Err(Error::shape(format!(
                "parser expects {s}x{s}x3 input, got {h}x{w}x{c}",
                s = self.arch.image_size
            )));
        }
        let act = |t: Tensor| ops::leaky_relu(&t, 0.2);
        let x = ((x * 2.0)? - 1.0)?;
        let half = ops::avg_pool2(&x)?;
        let d0 = act(self.down[0].forward(&half)?)?;
        let d1 = act(self.down[1].forward(&ops::avg_pool2(&d0)?)?)?;
        let d2 = act(self.down[2].forward(&ops::avg_pool2(&d1)?)?)?;
        let u1 = act(self.up1.forward(&Tensor::cat(&[&ops::upsample2(&d2)?, &d1], 3)?)?)?;
        let u0 = act(self.up0.forward(&Tensor::cat(&[&ops::upsample2(&u1)?, &d0], 3)?)?)?;
        let full = Tensor::cat(&[&ops::upsample2(&u0)?, &x], 3)?;
        let hd = act(self.head.forward(&full)?)?;
        self.logits.forward(&hd)
    }
}
