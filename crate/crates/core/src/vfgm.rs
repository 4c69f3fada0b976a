//! Virtual face generation: a mapper from a face to a generator code whose
//! synthesized face keeps the parsing layout of the input.

use candle_core::{DType, Device, Tensor, D};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbones::{ops, Component, LatentCode, LatentSpace, MapperArch, ParserArch, StyleArch};
use crate::corpus::FaceRecord;
use crate::error::{Error, Result};
use crate::image::{Image, ParsingMap};
use crate::pretrain::sample_latent;
use crate::train::{self, BatchSampler, TrainLog};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MapperConfig {
    pub lambda_reg: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub mean_latent_samples: usize,
    pub ohem_keep_fraction: f64,
    pub steps: usize,
}

impl Default for MapperConfig {
    fn default() -> Self {
        Self {
            lambda_reg: 30.0,
            learning_rate: 1e-4,
            batch_size: 16,
            adam_beta1: 0.0,
            adam_beta2: 0.99,
            mean_latent_samples: 4096,
            ohem_keep_fraction: 0.25,
            steps: 500,
        }
    }
}

impl MapperConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |k: &str, m: &str| Err(Error::Config { key: k.into(), message: m.into() });
        if self.lambda_reg.is_nan() || self.lambda_reg < 0.0 {
            return bad("lambda_reg", "must be non-negative");
        }
        if self.learning_rate.is_nan() || self.learning_rate <= 0.0 {
            return bad("learning_rate", "must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch_size", "must be positive");
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return bad("adam_beta1", "betas must lie in [0,1)");
        }
        if self.mean_latent_samples == 0 {
            return bad("mean_latent_samples", "must be at least 1");
        }
        if !(self.ohem_keep_fraction > 0.0 && self.ohem_keep_fraction <= 1.0) {
            return bad("ohem_keep_fraction", "must lie in (0,1]");
        }
        Ok(())
    }
}

/// Source of input-space latent samples.
pub trait LatentSampler {
    fn sample(&mut self) -> Vec<f32>;
}

/// Standard normal samples, the generator's training distribution.
pub struct GaussianSampler {
    dim: usize,
    rng: ChaCha8Rng,
}

impl GaussianSampler {
    pub fn new(dim: usize, seed: u64) -> Self {
        Self {
            dim,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }
}

impl LatentSampler for GaussianSampler {
    fn sample(&mut self) -> Vec<f32> {
        sample_latent(self.dim, &mut self.rng)
    }
}

/// Arithmetic mean of `n` samples.
pub fn mean_latent(sampler: &mut dyn LatentSampler, n: usize) -> Result<LatentCode> {
    if n == 0 {
        return Err(Error::validation("mean latent needs at least one sample"));
    }
    let mut acc: Vec<f64> = Vec::new();
    for _ in 0..n {
        let s = sampler.sample();
        if acc.is_empty() {
            acc = vec![0.0; s.len()];
        } else if s.len() != acc.len() {
            return Err(Error::shape("sampler changed dimension"));
        }
        for (a, v) in acc.iter_mut().zip(&s) {
            *a += *v as f64;
        }
    }
    LatentCode::input(acc.iter().map(|a| (a / n as f64) as f32).collect())
}

/// Class indices as a flat `u32` tensor, checked against `n_classes`.
pub fn target_tensor(maps: &[&ParsingMap], n_classes: usize) -> Result<Tensor> {
    for m in maps {
        m.validate_classes(n_classes)?;
    }
    let data: Vec<u32> = maps.iter().flat_map(|m| m.data().iter().map(|&c| c as u32)).collect();
    let n = data.len();
    Ok(Tensor::from_vec(data, n, &Device::Cpu)?)
}

/// Cross-entropy per pixel, then the mean over the hardest
/// `ceil(keep_fraction · N)` pixels (ties keep the lower pixel index).
pub fn ohem_parse_loss(logits: &Tensor, targets: &[&ParsingMap], keep_fraction: f64) -> Result<Tensor> {
    if !(keep_fraction > 0.0 && keep_fraction <= 1.0) {
        return Err(Error::validation(format!("keep fraction {keep_fraction} outside (0,1]")));
    }
    let (b, h, w, c) = logits.dims4()?;
    if targets.len() != b || targets.iter().any(|t| t.dims() != (h, w)) {
        return Err(Error::shape("parsing targets are not aligned with the logits"));
    }
    let t = target_tensor(targets, c)?;
    let flat = logits.reshape((b * h * w, c))?;
    let logp = candle_nn::ops::log_softmax(&flat, D::Minus1)?;
    let per_pixel = logp.gather(&t.unsqueeze(1)?, 1)?.squeeze(1)?.neg()?;
    let n = b * h * w;
    let k = ((keep_fraction * n as f64).ceil() as usize).clamp(1, n);
    if k == n {
        return Ok(per_pixel.mean_all()?);
    }
    let vals: Vec<f64> = per_pixel.to_dtype(DType::F64)?.to_vec1()?;
    let mut order: Vec<u32> = (0..n as u32).collect();
    order.sort_by(|&i, &j| vals[j as usize].total_cmp(&vals[i as usize]).then(i.cmp(&j)));
    order.truncate(k);
    let idx = Tensor::from_vec(order, k, &Device::Cpu)?;
    Ok(per_pixel.index_select(&idx, 0)?.mean_all()?)
}

/// `Σ (z − z̄)²` per code, averaged over the batch. `z: [B,D]`, `z_mean: [D]`.
pub fn latent_reg_loss(z: &Tensor, z_mean: &Tensor) -> Result<Tensor> {
    let d = z.broadcast_sub(&z_mean.to_dtype(z.dtype())?)?;
    Ok(d.sqr()?.sum(D::Minus1)?.mean_all()?)
}

pub fn latent_reg_loss_codes(z: &LatentCode, z_mean: &LatentCode) -> Result<f64> {
    if z.dim() != z_mean.dim() || z.rows() != z_mean.rows() {
        return Err(Error::shape("latent codes differ in shape"));
    }
    Ok(z.data()
        .iter()
        .zip(z_mean.data())
        .map(|(a, b)| {
            let d = *a as f64 - *b as f64;
            d * d
        })
        .sum())
}

pub fn mapper_objective(parse_loss: &Tensor, reg_loss: &Tensor, lambda_reg: f64) -> Result<Tensor> {
    Ok((parse_loss + (reg_loss * lambda_reg)?)?)
}

/// Trained mapper together with the mean code it was regularized towards.
#[derive(Debug)]
pub struct Vfgm {
    pub mapper: Component<MapperArch>,
    pub z_mean: LatentCode,
}

pub fn train_mapper(
    vfgm: &mut Vfgm,
    generator: &Component<StyleArch>,
    parser: &Component<ParserArch>,
    records: &[&FaceRecord],
    cfg: &MapperConfig,
    seed: u64,
) -> Result<TrainLog> {
    cfg.validate()?;
    let mut log = TrainLog::new(&["total", "parse", "reg"]);
    if cfg.steps == 0 || records.is_empty() {
        return Ok(log);
    }
    if vfgm.z_mean.space() != LatentSpace::Input || vfgm.z_mean.dim() != vfgm.mapper.arch().z_dim {
        return Err(Error::shape("mean latent does not match the mapper output"));
    }
    let z_mean = Tensor::from_vec(vfgm.z_mean.data().to_vec(), vfgm.z_mean.dim(), &Device::Cpu)?;
    let net = vfgm.mapper.trainable()?;
    let mut opt = train::adam(vfgm.mapper.store().vars(), cfg.learning_rate, cfg.adam_beta1, cfg.adam_beta2)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sampler = BatchSampler::new(records.len());
    for step in 0..cfg.steps {
        let idx = sampler.next(cfg.batch_size, &mut rng);
        let x = train::images_tensor(&idx.iter().map(|&i| &records[i].image).collect::<Vec<_>>())?;
        let maps: Vec<&ParsingMap> = idx.iter().map(|&i| &records[i].parsing).collect();
        let z = net.forward(&x)?;
        let xv = generator.net().generate(&z)?;
        let logits = parser.net().forward(&xv)?;
        let parse = ohem_parse_loss(&logits, &maps, cfg.ohem_keep_fraction)?;
        let reg = latent_reg_loss(&z, &z_mean)?;
        let total = mapper_objective(&parse, &reg, cfg.lambda_reg)?;
        let tv = train::checked(&total, step)?;
        log.push(vec![tv, ops::scalar(&parse)?, ops::scalar(&reg)?])?;
        train::step(&mut opt, &total)?;
    }
    Ok(log)
}

/// Mapper codes for a batch of images.
pub fn map_batch(mapper: &Component<MapperArch>, images: &[&Image]) -> Result<Vec<LatentCode>> {
    let z = mapper.net().forward(&train::images_tensor(images)?)?;
    LatentCode::batch_from_tensor(&z)
}

/// `X_v = synth_face(generator, mapper(X_i))`.
pub fn generate_virtual(mapper: &Component<MapperArch>, generator: &Component<StyleArch>, x_i: &Image) -> Result<Image> {
    Ok(generate_virtual_batch(mapper, generator, &[x_i])?.remove(0))
}

pub fn generate_virtual_batch(
    mapper: &Component<MapperArch>,
    generator: &Component<StyleArch>,
    images: &[&Image],
) -> Result<Vec<Image>> {
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.chunks(32) {
        for img in chunk {
            if img.dims() != (generator.arch().image_size(), generator.arch().image_size(), 3) {
                return Err(Error::shape(format!(
                    "input {:?} does not match generator resolution {}",
                    img.dims(),
                    generator.arch().image_size()
                )));
            }
        }
        let z = mapper.net().forward(&train::images_tensor(chunk)?)?;
        let x = generator.net().generate(&z)?;
        out.extend(Image::batch_from_tensor(&x)?.into_iter().map(Image::clamp_unit));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Constant(Vec<f32>);
    impl LatentSampler for Constant {
        fn sample(&mut self) -> Vec<f32> {
            self.0.clone()
        }
    }

    struct Alternating(Vec<f32>, Vec<f32>, bool);
    impl LatentSampler for Alternating {
        fn sample(&mut self) -> Vec<f32> {
            self.2 = !self.2;
            if self.2 {
                self.0.clone()
            } else {
                self.1.clone()
            }
        }
    }

    #[test]
    fn mean_of_degenerate_and_two_point_samplers() {
        let c = vec![0.25, -1.5, 3.0];
        assert_eq!(mean_latent(&mut Constant(c.clone()), 17).unwrap().data(), &c[..]);
        let a = vec![1.0, 2.0, -4.0];
        let b = vec![3.0, -2.0, 0.5];
        let m = mean_latent(&mut Alternating(a.clone(), b.clone(), false), 4096).unwrap();
        for i in 0..3 {
            assert!((m.data()[i] - (a[i] + b[i]) / 2.0).abs() < 1e-6);
        }
        assert!(mean_latent(&mut Constant(c), 0).is_err());
    }

    #[test]
    fn gaussian_mean_latent_is_near_zero_and_seeded() {
        let m1 = mean_latent(&mut GaussianSampler::new(64, 3), 4096).unwrap();
        let m2 = mean_latent(&mut GaussianSampler::new(64, 3), 4096).unwrap();
        assert_eq!(m1, m2);
        assert!(m1.data().iter().all(|v| v.abs() < 0.1));
    }

    #[test]
    fn reg_loss_examples() {
        let zm = LatentCode::input(vec![0.5, -0.25, 1.0]).unwrap();
        assert_eq!(latent_reg_loss_codes(&zm, &zm).unwrap(), 0.0);
        let z = LatentCode::input(vec![0.5, 0.75, 1.0]).unwrap();
        assert!((latent_reg_loss_codes(&z, &zm).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn objective_arithmetic() {
        let p = Tensor::new(1.0f64, &Device::Cpu).unwrap();
        let r = Tensor::new(0.1f64, &Device::Cpu).unwrap();
        let v = ops::scalar(&mapper_objective(&p, &r, 30.0).unwrap()).unwrap();
        assert!((v - 4.0).abs() < 1e-12);
        assert_eq!(ops::scalar(&mapper_objective(&p, &r, 0.0).unwrap()).unwrap(), 1.0);
        assert_eq!(MapperConfig::default().lambda_reg, 30.0);
    }

    #[test]
    fn ohem_rejects_bad_targets() {
        let logits = Tensor::zeros((1, 2, 2, 3), DType::F32, &Device::Cpu).unwrap();
        let bad = ParsingMap::new(2, 2, vec![0, 1, 2, 3]).unwrap();
        assert!(ohem_parse_loss(&logits, &[&bad], 0.5).is_err());
        let ok = ParsingMap::new(2, 2, vec![0, 1, 2, 0]).unwrap();
        assert!(ohem_parse_loss(&logits, &[&ok], 0.0).is_err());
        let v = ops::scalar(&ohem_parse_loss(&logits, &[&ok], 0.5).unwrap()).unwrap();
        assert!((v - 3f64.ln()).abs() < 1e-6);
    }
}
