//! Training for the networks every later stage treats as fixed: the face
//! parser, the identity encoders, and the style generator.
//!
//! The style generator is fitted by regression onto the renderer. A latent
//! `z` is squashed to renderer knobs (first six components drive geometry,
//! the next eleven drive attributes) and the generator learns to reproduce the
//! clean render. Style-mixed codes regress onto the render that takes
//! geometry from the coarse-row source and attributes from the band source.

use candle_core::{Device, Tensor, D};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::backbones::{Component, IdentityArch, ParserArch, StyleArch};
use crate::corpus::{FaceGeometry, FaceRecord, Renderer, Texture, ATTR_DIM, GEOMETRY_DIM};
use crate::diversity::mix_band;
use crate::error::{Error, Result};
use crate::image::{Image, ParsingMap};
use crate::train::{self, Augment, BatchSampler, TrainLog};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ParserTrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
}

impl Default for ParserTrainConfig {
    fn default() -> Self {
        Self {
            steps: 400,
            batch_size: 16,
            learning_rate: 2e-3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IdentityTrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub scale: f64,
    pub margin: f64,
}

impl Default for IdentityTrainConfig {
    fn default() -> Self {
        Self {
            steps: 400,
            batch_size: 32,
            learning_rate: 1e-3,
            scale: 16.0,
            margin: 0.2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorTrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Fraction of each batch that uses style-mixed codes.
    pub mix_fraction: f64,
}

impl Default for GeneratorTrainConfig {
    fn default() -> Self {
        Self {
            steps: 1200,
            batch_size: 16,
            learning_rate: 2e-3,
            mix_fraction: 0.5,
        }
    }
}

fn parse_targets(maps: &[&ParsingMap]) -> Result<Tensor> {
    let data: Vec<u32> = maps.iter().flat_map(|m| m.data().iter().map(|&c| c as u32)).collect();
    Ok(Tensor::from_vec(data.clone(), data.len(), &Device::Cpu)?)
}

/// Mean per-pixel cross-entropy of `[B,H,W,C]` logits.
pub fn pixel_cross_entropy(logits: &Tensor, targets: &Tensor) -> Result<Tensor> {
    let c = logits.dim(D::Minus1)?;
    let flat = logits.reshape(((), c))?;
    Ok(candle_nn::loss::cross_entropy(&flat, targets)?)
}

fn parser_augment() -> Augment {
    Augment {
        gain: 0.25,
        offset: 0.1,
        permute_channels: true,
        blur_prob: 0.5,
        noise: 0.03,
    }
}

pub fn train_parser(
    parser: &mut Component<ParserArch>,
    records: &[&FaceRecord],
    cfg: &ParserTrainConfig,
    seed: u64,
) -> Result<TrainLog> {
    let mut log = TrainLog::new(&["ce"]);
    if cfg.steps == 0 || records.is_empty() {
        return Ok(log);
    }
    let n_cls = parser.arch().n_classes;
    for r in records {
        r.parsing.validate_classes(n_cls)?;
    }
    let net = parser.trainable()?;
    let mut opt = train::adam(parser.store().vars(), cfg.learning_rate, 0.9, 0.999)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sampler = BatchSampler::new(records.len());
    let aug = parser_augment();
    for step in 0..cfg.steps {
        let idx = sampler.next(cfg.batch_size, &mut rng);
        let imgs: Vec<Image> = idx.iter().map(|&i| aug.apply(&records[i].image, &mut rng)).collect();
        let maps: Vec<&ParsingMap> = idx.iter().map(|&i| &records[i].parsing).collect();
        let x = train::images_tensor(&imgs.iter().collect::<Vec<_>>())?;
        let loss = pixel_cross_entropy(&net.forward(&x)?, &parse_targets(&maps)?)?;
        log.push(vec![train::checked(&loss, step)?])?;
        train::step(&mut opt, &loss)?;
    }
    Ok(log)
}

fn identity_augment() -> Augment {
    Augment {
        gain: 0.3,
        offset: 0.1,
        permute_channels: true,
        blur_prob: 0.5,
        noise: 0.04,
    }
}

/// Additive-margin softmax: `CE(s·(cos − m·onehot), label)`.
pub fn margin_softmax_loss(cosines: &Tensor, labels: &[u32], scale: f64, margin: f64) -> Result<Tensor> {
    let (n, k) = cosines.dims2()?;
    let mut onehot = vec![0f32; n * k];
    for (i, &l) in labels.iter().enumerate() {
        if l as usize >= k {
            return Err(Error::validation(format!("identity label {l} outside {k} classes")));
        }
        onehot[i * k + l as usize] = 1.0;
    }
    let onehot = Tensor::from_vec(onehot, (n, k), &Device::Cpu)?.to_dtype(cosines.dtype())?;
    let logits = ((cosines - (onehot * margin)?)? * scale)?;
    let t = Tensor::from_vec(labels.to_vec(), n, &Device::Cpu)?;
    Ok(candle_nn::loss::cross_entropy(&logits, &t)?)
}

/// Dense identity labels in order of first appearance.
pub fn identity_labels(records: &[&FaceRecord]) -> (Vec<u32>, usize) {
    let mut seen = std::collections::BTreeMap::new();
    let labels = records
        .iter()
        .map(|r| {
            let next = seen.len() as u32;
            *seen.entry(r.identity_id).or_insert(next)
        })
        .collect();
    (labels, seen.len())
}

pub fn train_identity(
    encoder: &mut Component<IdentityArch>,
    records: &[&FaceRecord],
    cfg: &IdentityTrainConfig,
    seed: u64,
) -> Result<TrainLog> {
    let mut log = TrainLog::new(&["loss", "accuracy"]);
    if cfg.steps == 0 || records.is_empty() {
        return Ok(log);
    }
    let (labels, n_ids) = identity_labels(records);
    if n_ids > encoder.arch().n_identities {
        return Err(Error::validation(format!(
            "corpus has {n_ids} identities, encoder head holds {}",
            encoder.arch().n_identities
        )));
    }
    let net = encoder.trainable()?;
    let mut opt = train::adam(encoder.store().vars(), cfg.learning_rate, 0.9, 0.999)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sampler = BatchSampler::new(records.len());
    let aug = identity_augment();
    for step in 0..cfg.steps {
        let idx = sampler.next(cfg.batch_size, &mut rng);
        let imgs: Vec<Image> = idx.iter().map(|&i| aug.apply(&records[i].image, &mut rng)).collect();
        let y: Vec<u32> = idx.iter().map(|&i| labels[i]).collect();
        let x = train::images_tensor(&imgs.iter().collect::<Vec<_>>())?;
        let cos = net.class_cosines(&net.embed(&x)?)?;
        let loss = margin_softmax_loss(&cos, &y, cfg.scale, cfg.margin)?;
        let pred: Vec<u32> = cos.argmax(1)?.to_vec1()?;
        let acc = pred.iter().zip(&y).filter(|(a, b)| a == b).count() as f64 / y.len() as f64;
        log.push(vec![train::checked(&loss, step)?, acc])?;
        train::step(&mut opt, &loss)?;
    }
    Ok(log)
}

/// Logistic squashing of a normalized latent component into `(0,1)`.
fn squash(v: f32) -> f32 {
    1.0 / (1.0 + (-1.702 * v).exp())
}

/// Renderer knobs reached by a latent code (direction only, since the
/// generator normalizes its input).
pub fn latent_to_knobs(z: &[f32]) -> Result<([f32; GEOMETRY_DIM], Vec<f32>)> {
    if z.len() < GEOMETRY_DIM + ATTR_DIM {
        return Err(Error::shape(format!(
            "latent needs at least {} dims to drive the renderer",
            GEOMETRY_DIM + ATTR_DIM
        )));
    }
    let rms = (z.iter().map(|v| v * v).sum::<f32>() / z.len() as f32 + 1e-8).sqrt();
    let mut geom = [0f32; GEOMETRY_DIM];
    for (k, g) in geom.iter_mut().enumerate() {
        *g = 0.05 + 0.9 * squash(z[k] / rms);
    }
    let attrs = (0..ATTR_DIM)
        .map(|j| squash(z[GEOMETRY_DIM + j] / rms).clamp(0.0, 1.0))
        .collect();
    Ok((geom, attrs))
}

/// Clean render of the face a latent code stands for.
pub fn latent_target(renderer: &Renderer, geometry_z: &[f32], attr_z: &[f32]) -> Result<(Image, ParsingMap)> {
    let (geom, _) = latent_to_knobs(geometry_z)?;
    let (_, attrs) = latent_to_knobs(attr_z)?;
    renderer.render(&FaceGeometry::from_knobs(geom), &attrs, Texture::Clean)
}

pub fn sample_latent(dim: usize, rng: &mut impl Rng) -> Vec<f32> {
    (0..dim).map(|_| StandardNormal.sample(rng)).collect()
}

pub fn train_generator(
    generator: &mut Component<StyleArch>,
    renderer: &Renderer,
    cfg: &GeneratorTrainConfig,
    seed: u64,
) -> Result<TrainLog> {
    let mut log = TrainLog::new(&["mse"]);
    if cfg.steps == 0 {
        return Ok(log);
    }
    let arch = generator.arch().clone();
    if renderer.size != arch.image_size() {
        return Err(Error::shape("generator resolution differs from the renderer"));
    }
    let (lo, hi) = mix_band(arch.n_layers());
    let l = arch.n_layers();
    let net = generator.trainable()?;
    let mut opt = train::adam(generator.store().vars(), cfg.learning_rate, 0.9, 0.999)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_mix = ((cfg.batch_size as f64) * cfg.mix_fraction).round() as usize;
    // Row selector: 1 inside the band.
    let band: Vec<f32> = (0..l).map(|i| if (lo..hi).contains(&i) { 1.0 } else { 0.0 }).collect();
    let band = Tensor::from_vec(band, (1, l, 1), &Device::Cpu)?;
    for step in 0..cfg.steps {
        let b = cfg.batch_size;
        let z1: Vec<Vec<f32>> = (0..b).map(|_| sample_latent(arch.z_dim, &mut rng)).collect();
        let z2: Vec<Vec<f32>> = (0..b).map(|_| sample_latent(arch.z_dim, &mut rng)).collect();
        let mut targets = Vec::with_capacity(b);
        for i in 0..b {
            let attr_src = if i < n_mix { &z2[i] } else { &z1[i] };
            targets.push(latent_target(renderer, &z1[i], attr_src)?.0);
        }
        let t1 = Tensor::from_vec(z1.concat(), (b, arch.z_dim), &Device::Cpu)?;
        let t2 = Tensor::from_vec(z2.concat(), (b, arch.z_dim), &Device::Cpu)?;
        let w1 = net.lift(&t1)?;
        let w2 = net.lift(&t2)?;
        let sel: Vec<f32> = (0..b).map(|i| if i < n_mix { 1.0 } else { 0.0 }).collect();
        let sel = Tensor::from_vec(sel, (b, 1, 1), &Device::Cpu)?.broadcast_mul(&band)?;
        let w = (w1.broadcast_mul(&(sel.ones_like()? - &sel)?)? + w2.broadcast_mul(&sel)?)?;
        let out = net.synthesize(&w)?;
        let y = train::images_tensor(&targets.iter().collect::<Vec<_>>())?;
        let loss = (out - y)?.sqr()?.mean_all()?;
        log.push(vec![train::checked(&loss, step)?])?;
        train::step(&mut opt, &loss)?;
    }
    Ok(log)
}

/// A second, differently shaped embedder trained only to score protected
/// faces, so verification numbers do not come from the network that
/// guided protection.
pub fn heldout_identity_arch() -> IdentityArch {
    IdentityArch {
        widths: vec![12, 24, 32, 48],
        hidden: 96,
        embed_dim: 48,
        ..IdentityArch::default()
    }
}

/// Cross-check helper: pixel accuracy of a parser on records.
pub fn parser_accuracy(parser: &Component<ParserArch>, records: &[&FaceRecord]) -> Result<f64> {
    let mut hit = 0usize;
    let mut total = 0usize;
    for chunk in records.chunks(32) {
        let x = train::images_tensor(&chunk.iter().map(|r| &r.image).collect::<Vec<_>>())?;
        let maps = crate::backbones::parse_batch(parser.net(), &x)?;
        for (m, r) in maps.iter().zip(chunk) {
            hit += m.data().iter().zip(r.parsing.data()).filter(|(a, b)| a == b).count();
            total += m.data().len();
        }
    }
    Ok(if total == 0 { 0.0 } else { hit as f64 / total as f64 })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbones::ops;

    #[test]
    fn margin_loss_matches_manual() {
        let cos = Tensor::new(&[[0.5f32, 0.1], [0.2, 0.9]], &Device::Cpu).unwrap();
        let l = ops::scalar(&margin_softmax_loss(&cos, &[0, 1], 10.0, 0.2).unwrap()).unwrap();
        let row = |t: f64, o: f64| -(t - (t.exp() + o.exp()).ln());
        let expect = 0.5 * (row(3.0, 1.0) + row(7.0, 2.0));
        assert!((l - expect).abs() < 1e-5, "{l} vs {expect}");
    }

    #[test]
    fn knobs_ignore_latent_scale() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let z = sample_latent(64, &mut rng);
        let z2: Vec<f32> = z.iter().map(|v| v * 0.01).collect();
        let (g1, a1) = latent_to_knobs(&z).unwrap();
        let (g2, a2) = latent_to_knobs(&z2).unwrap();
        for (a, b) in g1.iter().zip(&g2) {
            assert!((a - b).abs() < 1e-4);
        }
        for (a, b) in a1.iter().zip(&a2) {
            assert!((a - b).abs() < 1e-4);
        }
    }

    #[test]
    fn identity_labels_are_dense() {
        let renderer = Renderer::new(16, crate::corpus::LabelSet::Coarse7);
        let recs: Vec<FaceRecord> = [5u32, 9, 5]
            .iter()
            .map(|&id| crate::corpus::generate_synthetic_face(&renderer, id, &[0.5; ATTR_DIM], 0).unwrap())
            .collect();
        let refs: Vec<&FaceRecord> = recs.iter().collect();
        assert_eq!(identity_labels(&refs), (vec![0, 1, 0], 2));
    }
}
