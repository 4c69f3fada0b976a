//! Identity encoder and the shared downsampling trunk it is built on.

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use super::nn::{Builder, Conv3, Dense};
use super::ops;
use super::Arch;
use crate::error::{Error, Result};

/// Stack of `conv → lrelu → (residual) → pool` stages ending in a flat vector.
#[derive(Debug, Clone)]
pub struct Trunk {
    stages: Vec<(Conv3, Option<(Conv3, Conv3)>)>,
    image_size: usize,
    out_dim: usize,
}

impl Trunk {
    pub fn new(b: &mut Builder, image_size: usize, widths: &[usize], residual: bool) -> Result<Self> {
        if widths.is_empty() || !image_size.is_multiple_of(1 << widths.len()) {
            return Err(Error::validation(format!(
                "image size {image_size} is not divisible by 2^{}",
                widths.len()
            )));
        }
        let mut stages = Vec::new();
        let mut cin = 3;
        for (i, &c) in widths.iter().enumerate() {
            let conv = Conv3::new(b, &format!("conv{i}"), cin, c, 1.0)?;
            let res = if residual {
                Some((
                    Conv3::new(b, &format!("res{i}a"), c, c, 1.0)?,
                    Conv3::new(b, &format!("res{i}b"), c, c, 0.5)?,
                ))
            } else {
                None
            };
            stages.push((conv, res));
            cin = c;
        }
        let side = image_size >> widths.len();
        Ok(Self {
            stages,
            image_size,
            out_dim: side * side * cin,
        })
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    /// `[B,S,S,3]` in `[0,1]` → `[B, out_dim]`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (n, h, w, c) = x.dims4()?;
        if h != self.image_size || w != self.image_size || c != 3 {
            return Err(Error::shape(format!(
                "encoder expects {s}x{s}x3 input, got {h}x{w}x{c}",
                s = self.image_size
            )));
        }
        let mut h = ((x * 2.0)? - 1.0)?;
        for (conv, res) in &self.stages {
            h = ops::leaky_relu(&conv.forward(&h)?, 0.2)?;
            if let Some((a, b)) = res {
                let r = b.forward(&ops::leaky_relu(&a.forward(&h)?, 0.2)?)?;
                h = (h + r)?;
            }
            h = ops::avg_pool2(&h)?;
        }
        Ok(h.reshape((n, self.out_dim))?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IdentityArch {
    pub image_size: usize,
    pub widths: Vec<usize>,
    pub hidden: usize,
    pub embed_dim: usize,
    /// Size of the training-time classification head.
    pub n_identities: usize,
}

impl Default for IdentityArch {
    fn default() -> Self {
        Self {
            image_size: 64,
            widths: vec![8, 16, 32, 32],
            hidden: 128,
            embed_dim: 64,
            n_identities: 20,
        }
    }
}

#[derive(Debug, Clone)]
pub struct IdentityNet {
    arch: IdentityArch,
    trunk: Trunk,
    fc1: Dense,
    fc2: Dense,
    centers: Tensor,
}

impl Arch for IdentityArch {
    type Net = IdentityNet;
    const KIND: &'static str = "identity_encoder";

    fn build(&self, b: &mut Builder) -> Result<IdentityNet> {
        let trunk = b.scoped("trunk", |b| Trunk::new(b, self.image_size, &self.widths, false))?;
        let fc1 = Dense::new(b, "fc1", trunk.out_dim(), self.hidden, 1.0)?;
        let fc2 = Dense::new(b, "fc2", self.hidden, self.embed_dim, 1.0)?;
        let centers = b.param("centers", &[self.embed_dim, self.n_identities.max(1)], 1.0, 0.0)?;
        Ok(IdentityNet {
            arch: self.clone(),
            trunk,
            fc1,
            fc2,
            centers,
        })
    }
}

impl IdentityNet {
    pub fn arch(&self) -> &IdentityArch {
        &self.arch
    }

    /// Unit-norm embeddings `[B, embed_dim]`.
    pub fn embed(&self, x: &Tensor) -> Result<Tensor> {
        let h = self.trunk.forward(x)?;
        let h = ops::leaky_relu(&self.fc1.forward(&h)?, 0.2)?;
        ops::l2_normalize(&self.fc2.forward(&h)?, 1e-12)
    }

    /// Cosine between embeddings and normalized class centers, `[B, n_identities]`.
    pub fn class_cosines(&self, emb: &Tensor) -> Result<Tensor> {
        let c = ops::l2_normalize(&self.centers.t()?, 1e-12)?;
        Ok(emb.matmul(&c.t()?)?)
    }
}
