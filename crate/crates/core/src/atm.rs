//! Appearance transfer: the disentangling network that regenerates a face
//! from the original identity and (blended) virtual-face attributes.

use candle_core::{DType, Device, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backbones::{
    embed_identity, encode_attributes, fuse_generate, ops, BackboneBundle, IdentityEmbedding,
};
use crate::corpus::FaceRecord;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::train::{self, BatchSampler, TrainLog};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DisenConfig {
    pub lambda_id: f64,
    pub lambda_attr: f64,
    pub lambda_vs: f64,
    pub lambda_re: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub m_scales: usize,
    pub steps: usize,
    pub use_vs_loss: bool,
    /// Probability that a step feeds the original face to the attribute
    /// encoder and trains reconstruction.
    pub p_rec: f64,
}

impl Default for DisenConfig {
    fn default() -> Self {
        Self {
            lambda_id: 10.0,
            lambda_attr: 20.0,
            lambda_vs: 10.0,
            lambda_re: 10.0,
            learning_rate: 4e-4,
            batch_size: 8,
            adam_beta1: 0.0,
            adam_beta2: 0.99,
            m_scales: 2,
            steps: 2000,
            use_vs_loss: true,
            p_rec: 0.2,
        }
    }
}

impl DisenConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |k: &str, m: &str| Err(Error::Config { key: k.into(), message: m.into() });
        for (k, v) in [
            ("lambda_id", self.lambda_id),
            ("lambda_attr", self.lambda_attr),
            ("lambda_vs", self.lambda_vs),
            ("lambda_re", self.lambda_re),
        ] {
            if v.is_nan() || v < 0.0 {
                return bad(k, "must be non-negative");
            }
        }
        if self.learning_rate.is_nan() || self.learning_rate <= 0.0 {
            return bad("learning_rate", "must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch_size", "must be positive");
        }
        if self.m_scales == 0 {
            return bad("m_scales", "must be at least 1");
        }
        if !(0.0..=1.0).contains(&self.p_rec) {
            return bad("p_rec", "must lie in [0,1]");
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return bad("adam_beta1", "betas must lie in [0,1)");
        }
        Ok(())
    }
}

fn check_scales(a: &[Tensor], b: &[Tensor]) -> Result<()> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::shape(format!(
            "score lists have {} and {} scales",
            a.len(),
            b.len()
        )));
    }
    Ok(())
}

/// `Σ_m [mean ReLU(1 − D_m(real)) + mean ReLU(1 + D_m(fake))]`.
pub fn hinge_d_loss(real: &[Tensor], fake: &[Tensor]) -> Result<Tensor> {
    check_scales(real, fake)?;
    let mut total: Option<Tensor> = None;
    for (r, f) in real.iter().zip(fake) {
        let lr = (r.ones_like()? - r)?.relu()?.mean_all()?;
        let lf = (f.ones_like()? + f)?.relu()?.mean_all()?;
        let term = (lr + lf)?;
        total = Some(match total {
            None => term,
            Some(t) => (t + term)?,
        });
    }
    Ok(total.expect("non-empty"))
}

/// `−Σ_m mean D_m(fake)`.
pub fn hinge_g_loss(fake: &[Tensor]) -> Result<Tensor> {
    let first = fake.first().ok_or_else(|| Error::shape("no discriminator scores"))?;
    let mut total = first.mean_all()?;
    for f in &fake[1..] {
        total = (total + f.mean_all()?)?;
    }
    Ok(total.neg()?)
}

/// `1 − cos(e1, e2)` per row, averaged over the batch. Inputs `[B, D]`.
pub fn identity_loss(e1: &Tensor, e2: &Tensor) -> Result<Tensor> {
    if e1.dims() != e2.dims() {
        return Err(Error::shape("embeddings differ in shape"));
    }
    let dot = (e1 * e2)?.sum(1)?;
    let n1 = e1.sqr()?.sum(1)?.sqrt()?;
    let n2 = e2.sqr()?.sum(1)?.sqrt()?;
    let cos = (dot / ((n1 * n2)? + 1e-12)?)?;
    Ok((cos.ones_like()? - cos)?.mean_all()?)
}

pub fn identity_loss_embeddings(e1: &IdentityEmbedding, e2: &IdentityEmbedding) -> f64 {
    1.0 - e1.cosine(e2)
}

fn half_sq_sum_per_sample(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.dims() != b.dims() {
        return Err(Error::shape(format!("{:?} vs {:?}", a.dims(), b.dims())));
    }
    let n = a.dims().first().copied().unwrap_or(1).max(1);
    Ok(((a - b)?.sqr()?.sum_all()? * (0.5 / n as f64))?)
}

/// `½ Σ_k ‖pA_k − pB_k‖²`, averaged over the batch.
pub fn attribute_loss(pa: &[Tensor], pb: &[Tensor]) -> Result<Tensor> {
    if pa.len() != pb.len() || pa.is_empty() {
        return Err(Error::shape(format!(
            "pyramids have {} and {} levels",
            pa.len(),
            pb.len()
        )));
    }
    let mut total = half_sq_sum_per_sample(&pa[0], &pb[0])?;
    for (a, b) in pa.iter().zip(pb).skip(1) {
        total = (total + half_sq_sum_per_sample(a, b)?)?;
    }
    Ok(total)
}

/// `½ Σ (X_p − X_v)²` over pixels and channels, averaged over the batch.
pub fn visual_content_loss(x_p: &Tensor, x_v: &Tensor) -> Result<Tensor> {
    half_sq_sum_per_sample(x_p, x_v)
}

/// `½ Σ (X_i − X_rec)²` over pixels and channels, averaged over the batch.
pub fn reconstruction_loss(x_i: &Tensor, x_rec: &Tensor) -> Result<Tensor> {
    half_sq_sum_per_sample(x_i, x_rec)
}

pub fn disen_objective(
    adv: &Tensor,
    id: &Tensor,
    attr: &Tensor,
    vs: &Tensor,
    re: &Tensor,
    cfg: &DisenConfig,
) -> Result<Tensor> {
    let mut t = (adv + (id * cfg.lambda_id)?)?;
    t = (t + (attr * cfg.lambda_attr)?)?;
    if cfg.use_vs_loss {
        t = (t + (vs * cfg.lambda_vs)?)?;
    }
    Ok((t + (re * cfg.lambda_re)?)?)
}

pub const DISEN_LOG_COLUMNS: [&str; 7] = ["adv_d", "adv_g", "id", "attr", "vs", "re", "total"];

/// Trains the attribute encoder, fusion generator and discriminators.
/// `virtual_faces[i]` is the frozen VFGM output for `records[i]`.
pub fn train_disennet(
    bundle: &mut BackboneBundle,
    records: &[&FaceRecord],
    virtual_faces: &[&Image],
    cfg: &DisenConfig,
    seed: u64,
) -> Result<TrainLog> {
    cfg.validate()?;
    let mut log = TrainLog::new(&DISEN_LOG_COLUMNS);
    if records.len() != virtual_faces.len() {
        return Err(Error::shape("need one virtual face per record"));
    }
    if cfg.steps == 0 || records.is_empty() {
        return Ok(log);
    }
    if bundle.discriminators.arch().m_scales != cfg.m_scales {
        return Err(Error::Config {
            key: "m_scales".into(),
            message: format!(
                "discriminators have {} scales",
                bundle.discriminators.arch().m_scales
            ),
        });
    }
    let enc = bundle.attribute_encoder.trainable()?;
    let gen = bundle.fusion_generator.trainable()?;
    let disc = bundle.discriminators.trainable()?;
    let e_id = bundle.identity_encoder.net();
    let d_frozen = bundle.discriminators.net();
    let mut g_vars = bundle.attribute_encoder.store().vars();
    g_vars.extend(bundle.fusion_generator.store().vars());
    let (b1, b2, lr) = (cfg.adam_beta1, cfg.adam_beta2, cfg.learning_rate);
    let mut opt_g = train::adam(g_vars, lr, b1, b2)?;
    let mut opt_d = train::adam(bundle.discriminators.store().vars(), lr, b1, b2)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sampler = BatchSampler::new(records.len());
    let zero = Tensor::new(0f32, &Device::Cpu)?;
    for step in 0..cfg.steps {
        let idx = sampler.next(cfg.batch_size, &mut rng);
        let rec = rng.random::<f64>() < cfg.p_rec;
        let x_i = train::images_tensor(&idx.iter().map(|&i| &records[i].image).collect::<Vec<_>>())?;
        let x_v = train::images_tensor(&idx.iter().map(|&i| virtual_faces[i]).collect::<Vec<_>>())?;
        let src = if rec { &x_i } else { &x_v };
        let z_id = e_id.embed(&x_i)?;
        let src_attrs = enc.forward(src)?;
        let x_p = gen.forward(&z_id, &src_attrs)?;

        let d_loss = hinge_d_loss(&disc.forward(&x_i)?, &disc.forward(&x_p.detach())?)?;
        let adv_d = train::checked(&d_loss, step)?;
        train::step(&mut opt_d, &d_loss)?;

        let adv = hinge_g_loss(&d_frozen.forward(&x_p)?)?;
        let id = identity_loss(&e_id.embed(&x_p)?, &z_id)?;
        let target: Vec<Tensor> = src_attrs.iter().map(Tensor::detach).collect();
        let attr = attribute_loss(&enc.forward(&x_p)?, &target)?;
        let vs = if rec || !cfg.use_vs_loss {
            zero.clone()
        } else {
            visual_content_loss(&x_p, &x_v)?
        };
        let re = if rec {
            reconstruction_loss(&x_i, &x_p)?
        } else {
            zero.clone()
        };
        let total = disen_objective(&adv, &id, &attr, &vs, &re, cfg)?;
        let tv = train::checked(&total, step)?;
        log.push(vec![
            adv_d,
            ops::scalar(&adv)?,
            ops::scalar(&id)?,
            ops::scalar(&attr)?,
            ops::scalar(&vs)?,
            ops::scalar(&re)?,
            tv,
        ])?;
        train::step(&mut opt_g, &total)?;
    }
    Ok(log)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ProtectionResult {
    #[serde(skip)]
    pub protected: Image,
    #[serde(skip)]
    pub virtual_used: Image,
    pub alpha: f64,
    pub id_similarity: f64,
    pub run_id: String,
}

fn protection_run_id(x_i: &Image, x_v: &Image, alpha: f64) -> String {
    let mut h = Sha256::new();
    for img in [x_i, x_v] {
        for v in img.data() {
            h.update(v.to_le_bytes());
        }
    }
    h.update(alpha.to_le_bytes());
    let d = h.finalize();
    d.iter().take(8).map(|b| format!("{b:02x}")).collect()
}

/// `X_p = G(E_id(X_i), α·E_attr(X_v) + (1−α)·E_attr(X_i))`.
pub fn protect(bundle: &BackboneBundle, x_i: &Image, x_v: &Image, alpha: f64) -> Result<ProtectionResult> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::validation(format!("alpha {alpha} outside [0,1]")));
    }
    x_i.ensure_same_dims(x_v)?;
    let id = embed_identity(&bundle.identity_encoder, x_i)?;
    let pv = encode_attributes(&bundle.attribute_encoder, x_v)?;
    let pi = encode_attributes(&bundle.attribute_encoder, x_i)?;
    let blended = pv.blend(&pi, alpha)?;
    let protected = fuse_generate(&bundle.fusion_generator, &id, &blended)?;
    let id_p = embed_identity(&bundle.identity_encoder, &protected)?;
    Ok(ProtectionResult {
        id_similarity: id.cosine(&id_p),
        run_id: protection_run_id(x_i, x_v, alpha),
        protected,
        virtual_used: x_v.clone(),
        alpha,
    })
}

/// Batched protection for evaluation; same math as [`protect`].
pub fn protect_batch(bundle: &BackboneBundle, x_i: &[&Image], x_v: &[&Image], alpha: f64) -> Result<Vec<Image>> {
    if x_i.len() != x_v.len() {
        return Err(Error::shape("need one virtual face per input"));
    }
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::validation(format!("alpha {alpha} outside [0,1]")));
    }
    let mut out = Vec::with_capacity(x_i.len());
    for (ci, cv) in x_i.chunks(32).zip(x_v.chunks(32)) {
        let ti = Image::batch_to_tensor(ci, DType::F32, &Device::Cpu)?;
        let tv = Image::batch_to_tensor(cv, DType::F32, &Device::Cpu)?;
        let id = bundle.identity_encoder.net().embed(&ti)?;
        let enc = bundle.attribute_encoder.net();
        let pi = enc.forward(&ti)?;
        let pv = enc.forward(&tv)?;
        let blended = pv
            .iter()
            .zip(&pi)
            .map(|(v, i)| Ok(((v * alpha)? + (i * (1.0 - alpha))?)?))
            .collect::<Result<Vec<_>>>()?;
        let xp = bundle.fusion_generator.net().forward(&id, &blended)?;
        out.extend(Image::batch_from_tensor(&xp)?.into_iter().map(Image::clamp_unit));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(v: &[f32], shape: &[usize]) -> Tensor {
        Tensor::from_vec(v.to_vec(), shape, &Device::Cpu).unwrap()
    }

    #[test]
    fn hinge_examples() {
        let ones = t(&[1.0; 4], &[1, 2, 2, 1]);
        let neg = t(&[-1.0; 4], &[1, 2, 2, 1]);
        let zeros = t(&[0.0; 4], &[1, 2, 2, 1]);
        let v = ops::scalar(&hinge_d_loss(&[ones.clone(), ones.clone()], &[neg.clone(), neg]).unwrap()).unwrap();
        assert_eq!(v, 0.0);
        let v = ops::scalar(&hinge_d_loss(std::slice::from_ref(&zeros), std::slice::from_ref(&zeros)).unwrap()).unwrap();
        assert_eq!(v, 2.0);
        assert_eq!(ops::scalar(&hinge_g_loss(&[zeros]).unwrap()).unwrap(), 0.0);
        assert_eq!(ops::scalar(&hinge_g_loss(&[ones]).unwrap()).unwrap(), -1.0);
        let a = t(&[0.5, 0.5], &[2]);
        let b = t(&[-0.25; 3], &[3]);
        assert_eq!(ops::scalar(&hinge_g_loss(&[a, b]).unwrap()).unwrap(), -0.25);
    }

    #[test]
    fn identity_loss_examples() {
        let e = t(&[0.6, 0.8], &[1, 2]);
        let o = t(&[-0.8, 0.6], &[1, 2]);
        let n = t(&[-0.6, -0.8], &[1, 2]);
        assert!(ops::scalar(&identity_loss(&e, &e).unwrap()).unwrap().abs() < 1e-6);
        assert!((ops::scalar(&identity_loss(&e, &o).unwrap()).unwrap() - 1.0).abs() < 1e-6);
        assert!((ops::scalar(&identity_loss(&e, &n).unwrap()).unwrap() - 2.0).abs() < 1e-6);
    }

    #[test]
    fn pixel_and_attribute_loss_examples() {
        let a = t(&[0.0; 12], &[1, 2, 2, 3]);
        let mut bv = vec![0.0; 12];
        bv[5] = 1.0;
        let b = t(&bv, &[1, 2, 2, 3]);
        assert_eq!(ops::scalar(&visual_content_loss(&a, &a).unwrap()).unwrap(), 0.0);
        assert_eq!(ops::scalar(&reconstruction_loss(&a, &b).unwrap()).unwrap(), 0.5);
        let d = 10;
        let p = t(&vec![0.0; d], &[1, 1, 1, d]);
        let q = t(&vec![1.0; d], &[1, 1, 1, d]);
        let v = ops::scalar(&attribute_loss(std::slice::from_ref(&p), &[q]).unwrap()).unwrap();
        assert_eq!(v, d as f64 / 2.0);
        assert!(attribute_loss(std::slice::from_ref(&p), &[p.clone(), p.clone()]).is_err());
    }

    #[test]
    fn objective_weights() {
        let one = Tensor::new(1.0f64, &Device::Cpu).unwrap();
        let cfg = DisenConfig::default();
        let v = ops::scalar(&disen_objective(&one, &one, &one, &one, &one, &cfg).unwrap()).unwrap();
        assert_eq!(v, 51.0);
        let no_vs = DisenConfig {
            use_vs_loss: false,
            ..cfg.clone()
        };
        let v = ops::scalar(&disen_objective(&one, &one, &one, &one, &one, &no_vs).unwrap()).unwrap();
        assert_eq!(v, 41.0);
        let zero = DisenConfig {
            lambda_id: 0.0,
            lambda_attr: 0.0,
            lambda_vs: 0.0,
            lambda_re: 0.0,
            ..cfg
        };
        let two = Tensor::new(2.0f64, &Device::Cpu).unwrap();
        let v = ops::scalar(&disen_objective(&two, &one, &one, &one, &one, &zero).unwrap()).unwrap();
        assert_eq!(v, 2.0);
    }
}
