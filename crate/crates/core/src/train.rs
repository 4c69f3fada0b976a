//! Shared training plumbing: loss logs, optimizers, batching, augmentation.

use std::path::Path;

use candle_core::{DType, Device, Tensor, Var};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbones::ops;
use crate::cli::fsutil::write_atomic;
use crate::error::{Error, Result};
use crate::image::Image;

pub const SMOOTHING_WINDOW: usize = 50;

/// Per-step loss values with fixed column names.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl TrainLog {
    pub fn new(columns: &[&str]) -> Self {
        Self {
            columns: columns.iter().map(|s| s.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    /// Appends a row; the step index is implied by the row number.
    pub fn push(&mut self, values: Vec<f64>) -> Result<()> {
        if values.len() != self.columns.len() {
            return Err(Error::shape(format!(
                "log row has {} values, expected {}",
                values.len(),
                self.columns.len()
            )));
        }
        self.rows.push(values);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn column(&self, name: &str) -> Option<Vec<f64>> {
        let i = self.columns.iter().position(|c| c == name)?;
        Some(self.rows.iter().map(|r| r[i]).collect())
    }

    /// Mean of the first and last `window` entries of a column.
    pub fn first_last_means(&self, name: &str, window: usize) -> Option<(f64, f64)> {
        let v = self.column(name)?;
        if v.is_empty() {
            return None;
        }
        let w = window.min(v.len()).max(1);
        let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
        Some((mean(&v[..w]), mean(&v[v.len() - w..])))
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("step");
        for c in &self.columns {
            s.push(',');
            s.push_str(c);
        }
        s.push('\n');
        for (i, row) in self.rows.iter().enumerate() {
            s.push_str(&i.to_string());
            for v in row {
                s.push(',');
                s.push_str(&format!("{v:e}"));
            }
            s.push('\n');
        }
        s
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_csv().as_bytes())
    }
}

/// Adam with decoupled weight decay switched off.
pub fn adam(vars: Vec<Var>, lr: f64, beta1: f64, beta2: f64) -> Result<AdamW> {
    Ok(AdamW::new(
        vars,
        ParamsAdamW {
            lr,
            beta1,
            beta2,
            eps: 1e-8,
            weight_decay: 0.0,
        },
    )?)
}

pub fn step(opt: &mut AdamW, loss: &Tensor) -> Result<()> {
    let grads = loss.backward()?;
    opt.step(&grads)?;
    Ok(())
}

/// Reads a scalar loss and aborts on NaN or infinity.
pub fn checked(loss: &Tensor, step: usize) -> Result<f64> {
    let v = ops::scalar(loss)?;
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFinite { step })
    }
}

/// Shuffled epochs over `n` indices, refilled as needed.
pub struct BatchSampler {
    order: Vec<usize>,
    pos: usize,
}

impl BatchSampler {
    pub fn new(n: usize) -> Self {
        Self {
            order: (0..n).collect(),
            pos: n,
        }
    }

    pub fn next(&mut self, batch: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
        let mut out = Vec::with_capacity(batch);
        if self.order.is_empty() {
            return out;
        }
        while out.len() < batch {
            if self.pos >= self.order.len() {
                self.order.shuffle(rng);
                self.pos = 0;
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

pub fn images_tensor(images: &[&Image]) -> Result<Tensor> {
    Image::batch_to_tensor(images, DType::F32, &Device::Cpu)
}

/// Photometric jitter: per-channel gain/offset, optional channel permutation,
/// optional 3×3 box blur, and additive noise. Geometry is untouched.
#[derive(Debug, Clone, Copy)]
pub struct Augment {
    pub gain: f32,
    pub offset: f32,
    pub permute_channels: bool,
    pub blur_prob: f32,
    pub noise: f32,
}

impl Augment {
    pub fn apply(&self, img: &Image, rng: &mut ChaCha8Rng) -> Image {
        let (h, w, c) = img.dims();
        let mut perm: Vec<usize> = (0..c).collect();
        if self.permute_channels {
            perm.shuffle(rng);
        }
        let gains: Vec<f32> = (0..c).map(|_| 1.0 + rng.random_range(-self.gain..=self.gain)).collect();
        let offs: Vec<f32> = (0..c)
            .map(|_| rng.random_range(-self.offset..=self.offset))
            .collect();
        let src = if rng.random::<f32>() < self.blur_prob {
            box_blur(img)
        } else {
            img.clone()
        };
        let noise = self.noise;
        Image::from_fn(h, w, c, |y, x, ch| {
            let n = if noise > 0.0 {
                rng.random_range(-noise..=noise)
            } else {
                0.0
            };
            (src.get(y, x, perm[ch]) * gains[ch] + offs[ch] + n).clamp(0.0, 1.0)
        })
    }
}

pub fn box_blur(img: &Image) -> Image {
    let (h, w, c) = img.dims();
    Image::from_fn(h, w, c, |y, x, ch| {
        let mut acc = 0.0;
        let mut n = 0.0;
        for dy in -1i32..=1 {
            for dx in -1i32..=1 {
                let yy = y as i32 + dy;
                let xx = x as i32 + dx;
                if yy >= 0 && xx >= 0 && (yy as usize) < h && (xx as usize) < w {
                    acc += img.get(yy as usize, xx as usize, ch);
                    n += 1.0;
                }
            }
        }
        acc / n
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn csv_has_step_column() {
        let mut log = TrainLog::new(&["total", "parse"]);
        log.push(vec![1.5, 0.5]).unwrap();
        log.push(vec![1.0, 0.25]).unwrap();
        let csv = log.to_csv();
        assert!(csv.starts_with("step,total,parse\n0,"));
        assert_eq!(csv.lines().count(), 3);
        assert!(log.push(vec![1.0]).is_err());
        assert_eq!(log.first_last_means("total", 1), Some((1.5, 1.0)));
    }

    #[test]
    fn sampler_covers_every_index_per_epoch() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut s = BatchSampler::new(10);
        let mut seen: Vec<usize> = s.next(5, &mut rng);
        seen.extend(s.next(5, &mut rng));
        seen.sort();
        assert_eq!(seen, (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn checked_rejects_nan() {
        let t = Tensor::new(f32::NAN, &Device::Cpu).unwrap();
        match checked(&t, 7) {
            Err(Error::NonFinite { step }) => assert_eq!(step, 7),
            other => panic!("{other:?}"),
        }
    }
}
