//! Multiscale patch discriminators: scale `m` sees the image average-pooled
//! `m` times.

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use super::nn::{Builder, Conv1, Conv3};
use super::ops;
use super::Arch;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiscriminatorArch {
    pub m_scales: usize,
    pub widths: Vec<usize>,
}

impl Default for DiscriminatorArch {
    fn default() -> Self {
        Self {
            m_scales: 2,
            widths: vec![16, 32, 32],
        }
    }
}

#[derive(Debug, Clone)]
struct PatchNet {
    convs: Vec<Conv3>,
    out: Conv1,
}

impl PatchNet {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = ((x * 2.0)? - 1.0)?;
        let last = self.convs.len() - 1;
        for (i, conv) in self.convs.iter().enumerate() {
            h = ops::leaky_relu(&conv.forward(&h)?, 0.2)?;
            if i < last {
                h = ops::avg_pool2(&h)?;
            }
        }
        self.out.forward(&h)
    }
}

#[derive(Debug, Clone)]
pub struct DiscriminatorNet {
    scales: Vec<PatchNet>,
}

impl Arch for DiscriminatorArch {
    type Net = DiscriminatorNet;
    const KIND: &'static str = "discriminators";

    fn build(&self, b: &mut Builder) -> Result<DiscriminatorNet> {
        if self.m_scales == 0 || self.widths.is_empty() {
            return Err(Error::validation("need at least one discriminator scale and layer"));
        }
        let scales = (0..self.m_scales)
            .map(|m| {
                b.scoped(&format!("scale{m}"), |b| {
                    let mut convs = Vec::new();
                    let mut cin = 3;
                    for (i, &c) in self.widths.iter().enumerate() {
                        convs.push(Conv3::new(b, &format!("conv{i}"), cin, c, 1.0)?);
                        cin = c;
                    }
                    Ok(PatchNet {
                        convs,
                        out: Conv1::new(b, "out", cin, 1, 1.0)?,
                    })
                })
            })
            .collect::<Result<_>>()?;
        Ok(DiscriminatorNet { scales })
    }
}

impl DiscriminatorNet {
    pub fn m_scales(&self) -> usize {
        self.scales.len()
    }

    /// The image seen by each scale: `inputs[m] = avg_pool(inputs[m-1])`.
    pub fn scale_inputs(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        let mut out = vec![x.clone()];
        for _ in 1..self.scales.len() {
            let prev = out.last().unwrap();
            out.push(ops::avg_pool2(prev)?);
        }
        Ok(out)
    }

    /// One patch score map `[B,h,w,1]` per scale.
    pub fn forward(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        self.scale_inputs(x)?
            .iter()
            .zip(&self.scales)
            .map(|(xi, net)| net.forward(xi))
            .collect()
    }
}
