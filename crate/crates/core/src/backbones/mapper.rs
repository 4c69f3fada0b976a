//! Latent mapper: a residual CNN from an image to an input-space code.

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use super::identity::Trunk;
use super::nn::{Builder, Dense};
use super::ops;
use super::Arch;
use crate::error::Result;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MapperArch {
    pub image_size: usize,
    pub widths: Vec<usize>,
    pub hidden: usize,
    pub z_dim: usize,
    /// Init scale of the output layer; small values start near the mean code.
    pub head_gain: f64,
}

impl Default for MapperArch {
    fn default() -> Self {
        Self {
            image_size: 64,
            widths: vec![8, 16, 32, 32],
            hidden: 128,
            z_dim: 64,
            head_gain: 0.05,
        }
    }
}

#[derive(Debug, Clone)]
pub struct MapperNet {
    trunk: Trunk,
    fc1: Dense,
    head: Dense,
}

impl Arch for MapperArch {
    type Net = MapperNet;
    const KIND: &'static str = "mapper";

    fn build(&self, b: &mut Builder) -> Result<MapperNet> {
        let trunk = b.scoped("trunk", |b| Trunk::new(b, self.image_size, &self.widths, true))?;
        Ok(MapperNet {
            fc1: Dense::new(b, "fc1", trunk.out_dim(), self.hidden, 1.0)?,
            head: Dense::new(b, "head", self.hidden, self.z_dim, self.head_gain)?,
            trunk,
        })
    }
}

impl MapperNet {
    /// `[B,S,S,3]` → `[B, z_dim]` input-space codes.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let h = self.trunk.forward(x)?;
        let h = ops::leaky_relu(&self.fc1.forward(&h)?, 0.2)?;
        self.head.forward(&h)
    }
}
