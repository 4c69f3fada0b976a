//! Image similarity, parsing agreement, and verification metrics.

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::backbones::nn::{Builder, Conv3, VarStore};
use crate::backbones::{ops, Component, IdentityArch, IdentityEmbedding};
use crate::corpus::{Domain, VerificationPair};
use crate::error::{Error, Result};
use crate::image::{Image, ParsingMap};

fn diffs<'a>(a: &'a Image, b: &'a Image) -> Result<impl Iterator<Item = f64> + 'a> {
    a.ensure_same_dims(b)?;
    if a.data().is_empty() {
        return Err(Error::shape("empty images"));
    }
    Ok(a.data().iter().zip(b.data()).map(|(x, y)| *x as f64 - *y as f64))
}

pub fn mae(a: &Image, b: &Image) -> Result<f64> {
    let n = a.data().len() as f64;
    Ok(diffs(a, b)?.map(f64::abs).sum::<f64>() / n)
}

pub fn rmse(a: &Image, b: &Image) -> Result<f64> {
    let n = a.data().len() as f64;
    Ok((diffs(a, b)?.map(|d| d * d).sum::<f64>() / n).sqrt())
}

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

fn gaussian_kernel(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let k: Vec<f64> = (0..size)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

/// Valid-mode separable filtering of an `h×w` plane.
fn filter_valid(plane: &[f64], h: usize, w: usize, k: &[f64]) -> (Vec<f64>, usize, usize) {
    let n = k.len();
    let (oh, ow) = (h + 1 - n, w + 1 - n);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..n).map(|i| k[i] * plane[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..n).map(|i| k[i] * rows[(y + i) * ow + x]).sum();
        }
    }
    (out, oh, ow)
}

/// Mean SSIM over valid 11×11 Gaussian windows (σ = 1.5, data range 1),
/// averaged over channels. Images smaller than the window use the largest
/// odd window that fits, with σ scaled by the same ratio.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    a.ensure_same_dims(b)?;
    let (h, w, c) = a.dims();
    if h == 0 || w == 0 || c == 0 {
        return Err(Error::shape("empty images"));
    }
    let mut size = SSIM_WINDOW.min(h).min(w);
    if size % 2 == 0 {
        size -= 1;
    }
    let k = gaussian_kernel(size, SSIM_SIGMA * size as f64 / SSIM_WINDOW as f64);
    let c1 = (SSIM_K1 * 1.0f64).powi(2);
    let c2 = (SSIM_K2 * 1.0f64).powi(2);
    let mut total = 0.0;
    for ch in 0..c {
        let pa: Vec<f64> = (0..h * w).map(|i| a.data()[i * c + ch] as f64).collect();
        let pb: Vec<f64> = (0..h * w).map(|i| b.data()[i * c + ch] as f64).collect();
        let prod = |p: &[f64], q: &[f64]| p.iter().zip(q).map(|(x, y)| x * y).collect::<Vec<_>>();
        let (mu_a, oh, ow) = filter_valid(&pa, h, w, &k);
        let (mu_b, _, _) = filter_valid(&pb, h, w, &k);
        let (e_aa, _, _) = filter_valid(&prod(&pa, &pa), h, w, &k);
        let (e_bb, _, _) = filter_valid(&prod(&pb, &pb), h, w, &k);
        let (e_ab, _, _) = filter_valid(&prod(&pa, &pb), h, w, &k);
        let mut acc = 0.0;
        for i in 0..oh * ow {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = e_aa[i] - ma * ma;
            let vb = e_bb[i] - mb * mb;
            let cov = e_ab[i] - ma * mb;
            acc += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
        }
        total += acc / (oh * ow) as f64;
    }
    Ok(total / c as f64)
}

/// Fixed random convolutional features standing in for a learned
/// perceptual network.
pub struct PerceptualNet {
    layers: Vec<Conv3>,
    _store: VarStore,
}

pub const PERCEPTUAL_SEED: u64 = 0x1_9195;

impl PerceptualNet {
    pub fn new(seed: u64) -> Result<Self> {
        let mut store = VarStore::new(DType::F64);
        let widths = [(3, 16), (16, 32), (32, 32)];
        let layers = {
            let mut b = Builder::new(&mut store, seed, false);
            widths
                .iter()
                .enumerate()
                .map(|(i, &(ci, co))| Conv3::new(&mut b, &format!("conv{i}"), ci, co, 1.0))
                .collect::<Result<Vec<_>>>()?
        };
        Ok(Self { layers, _store: store })
    }

    /// Channel-normalized feature maps, one per layer.
    fn features(&self, img: &Image) -> Result<Vec<Tensor>> {
        let mut h = ((img.to_tensor(DType::F64, &Device::Cpu)? * 2.0)? - 1.0)?;
        let mut out = Vec::with_capacity(self.layers.len());
        for (i, conv) in self.layers.iter().enumerate() {
            if i > 0 && h.dim(1)? % 2 == 0 && h.dim(2)? % 2 == 0 {
                h = ops::avg_pool2(&h)?;
            }
            h = conv.forward(&h)?.relu()?;
            let norm = (h.sqr()?.sum_keepdim(3)? + 1e-10)?.sqrt()?;
            out.push(h.broadcast_div(&norm)?);
        }
        Ok(out)
    }

    /// Mean over layers of the spatially averaged squared feature distance.
    pub fn distance(&self, a: &Image, b: &Image) -> Result<f64> {
        a.ensure_same_dims(b)?;
        let fa = self.features(a)?;
        let fb = self.features(b)?;
        let mut total = 0.0;
        for (x, y) in fa.iter().zip(&fb) {
            let (_, h, w, _) = x.dims4()?;
            let d = (x - y)?.sqr()?.sum_all()?.to_scalar::<f64>()?;
            total += d / (h * w) as f64;
        }
        Ok(total / fa.len() as f64)
    }
}

pub fn perceptual_distance(a: &Image, b: &Image, net: &PerceptualNet) -> Result<f64> {
    net.distance(a, b)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityReport {
    pub lpips_proxy: f64,
    pub ssim: f64,
    pub mae: f64,
    pub rmse: f64,
    pub n_pairs: usize,
}

/// Means over pairs; checks `rmse ≥ mae` for each pair.
pub fn similarity_report(pairs: &[(&Image, &Image)], net: &PerceptualNet) -> Result<SimilarityReport> {
    if pairs.is_empty() {
        return Err(Error::validation("similarity report needs at least one pair"));
    }
    let (mut l, mut s, mut m, mut r) = (0.0, 0.0, 0.0, 0.0);
    for (i, (a, b)) in pairs.iter().enumerate() {
        let pm = mae(a, b)?;
        let pr = rmse(a, b)?;
        if pr + 1e-12 < pm {
            return Err(Error::validation(format!("pair {i}: rmse {pr} below mae {pm}")));
        }
        l += net.distance(a, b)?;
        s += ssim(a, b)?;
        m += pm;
        r += pr;
    }
    let n = pairs.len() as f64;
    Ok(SimilarityReport {
        lpips_proxy: l / n,
        ssim: s / n,
        mae: m / n,
        rmse: r / n,
        n_pairs: pairs.len(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParsingReport {
    pub pa: f64,
    pub mpa: f64,
    pub miou: f64,
    pub fwiou: f64,
}

/// Confusion-matrix scores with `reference` as ground truth. Classes absent
/// from both maps are skipped in the means.
pub fn parsing_similarity(reference: &ParsingMap, other: &ParsingMap, n_cls: usize) -> Result<ParsingReport> {
    if reference.dims() != other.dims() {
        return Err(Error::shape("parsing maps differ in size"));
    }
    reference.validate_classes(n_cls)?;
    other.validate_classes(n_cls)?;
    let mut conf = vec![0u64; n_cls * n_cls];
    for (&r, &o) in reference.data().iter().zip(other.data()) {
        conf[r as usize * n_cls + o as usize] += 1;
    }
    let total: u64 = conf.iter().sum();
    if total == 0 {
        return Err(Error::shape("empty parsing maps"));
    }
    let row = |c: usize| (0..n_cls).map(|j| conf[c * n_cls + j]).sum::<u64>();
    let col = |c: usize| (0..n_cls).map(|i| conf[i * n_cls + c]).sum::<u64>();
    let diag = |c: usize| conf[c * n_cls + c];
    let pa = (0..n_cls).map(diag).sum::<u64>() as f64 / total as f64;
    let (mut acc_sum, mut acc_n, mut iou_sum, mut iou_n, mut fw) = (0.0, 0usize, 0.0, 0usize, 0.0);
    for c in 0..n_cls {
        let (r, k, d) = (row(c), col(c), diag(c));
        if r > 0 {
            acc_sum += d as f64 / r as f64;
            acc_n += 1;
        }
        if r + k > 0 {
            let iou = d as f64 / (r + k - d) as f64;
            iou_sum += iou;
            iou_n += 1;
            fw += (r as f64 / total as f64) * iou;
        }
    }
    Ok(ParsingReport {
        pa,
        mpa: acc_sum / acc_n as f64,
        miou: iou_sum / iou_n as f64,
        fwiou: fw,
    })
}

pub fn mean_parsing_report(reports: &[ParsingReport]) -> Result<ParsingReport> {
    if reports.is_empty() {
        return Err(Error::validation("no parsing reports to average"));
    }
    let n = reports.len() as f64;
    let mean = |f: fn(&ParsingReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
    Ok(ParsingReport {
        pa: mean(|r| r.pa),
        mpa: mean(|r| r.mpa),
        miou: mean(|r| r.miou),
        fwiou: mean(|r| r.fwiou),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RocReport {
    pub domain: Domain,
    pub thresholds: Vec<f64>,
    pub tpr: Vec<f64>,
    pub fpr: Vec<f64>,
    pub auc: f64,
    pub n_same: usize,
    pub n_diff: usize,
}

impl RocReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("threshold,fpr,tpr\n");
        for ((t, f), p) in self.thresholds.iter().zip(&self.fpr).zip(&self.tpr) {
            s.push_str(&format!("{t:e},{f:e},{p:e}\n"));
        }
        s
    }
}

/// ROC over all distinct score thresholds (pair accepted when `score ≥ t`),
/// AUC by the trapezoid rule. The first point uses `max + 1` so the curve
/// starts at the origin.
pub fn roc_from_scores(scores: &[f64], same: &[bool], domain: Domain) -> Result<RocReport> {
    if scores.len() != same.len() {
        return Err(Error::shape("one label per score required"));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::validation("non-finite verification score"));
    }
    let p = same.iter().filter(|s| **s).count();
    let n = same.len() - p;
    if p == 0 || n == 0 {
        return Err(Error::validation("ROC needs both same- and different-identity pairs"));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&i, &j| scores[j].total_cmp(&scores[i]).then(i.cmp(&j)));
    let mut thresholds = vec![scores[order[0]] + 1.0];
    let mut tpr = vec![0.0];
    let mut fpr = vec![0.0];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut k = 0;
    while k < order.len() {
        let t = scores[order[k]];
        while k < order.len() && scores[order[k]] == t {
            if same[order[k]] {
                tp += 1;
            } else {
                fp += 1;
            }
            k += 1;
        }
        thresholds.push(t);
        tpr.push(tp as f64 / p as f64);
        fpr.push(fp as f64 / n as f64);
    }
    let auc = fpr
        .windows(2)
        .zip(tpr.windows(2))
        .map(|(f, t)| (f[1] - f[0]) * (t[1] + t[0]) / 2.0)
        .sum();
    Ok(RocReport {
        domain,
        thresholds,
        tpr,
        fpr,
        auc,
        n_same: p,
        n_diff: n,
    })
}

/// Batched identity embedding.
pub trait Embedder {
    fn embed_batch(&self, images: &[&Image]) -> Result<Vec<IdentityEmbedding>>;
}

impl Embedder for Component<IdentityArch> {
    fn embed_batch(&self, images: &[&Image]) -> Result<Vec<IdentityEmbedding>> {
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(64) {
            let x = Image::batch_to_tensor(chunk, DType::F32, &Device::Cpu)?;
            out.extend(IdentityEmbedding::batch_from_tensor(&self.net().embed(&x)?)?);
        }
        Ok(out)
    }
}

/// Originals and (optionally) their protected counterparts, index-aligned.
#[derive(Debug, Clone, Copy)]
pub struct PairImages<'a> {
    pub originals: &'a [Image],
    pub protected: Option<&'a [Image]>,
}

impl<'a> PairImages<'a> {
    fn side(&self, idx: usize, protected: bool) -> Result<&'a Image> {
        let pool = if protected {
            self.protected
                .ok_or_else(|| Error::validation("pair needs a protected image but none were supplied"))?
        } else {
            self.originals
        };
        pool.get(idx)
            .ok_or_else(|| Error::validation(format!("pair index {idx} outside {} images", pool.len())))
    }
}

/// Cosine score per pair, embedding each distinct image once.
pub fn pair_scores(pairs: &[VerificationPair], images: PairImages, embedder: &dyn Embedder) -> Result<Vec<f64>> {
    let mut keys: Vec<(usize, bool)> = pairs
        .iter()
        .flat_map(|p| [(p.a, p.a_protected()), (p.b, p.b_protected())])
        .collect();
    keys.sort();
    keys.dedup();
    let imgs = keys
        .iter()
        .map(|&(i, prot)| images.side(i, prot))
        .collect::<Result<Vec<_>>>()?;
    let embs = embedder.embed_batch(&imgs)?;
    let lookup = |k: (usize, bool)| &embs[keys.binary_search(&k).expect("key collected above")];
    Ok(pairs
        .iter()
        .map(|p| lookup((p.a, p.a_protected())).cosine(lookup((p.b, p.b_protected()))))
        .collect())
}

pub fn verification_roc(
    pairs: &[VerificationPair],
    images: PairImages,
    embedder: &dyn Embedder,
) -> Result<RocReport> {
    let domain = pairs.first().map(|p| p.domain).unwrap_or(Domain::Orig);
    if pairs.iter().any(|p| p.domain != domain) {
        return Err(Error::validation("ROC pairs mix domains"));
    }
    let scores = pair_scores(pairs, images, embedder)?;
    let same: Vec<bool> = pairs.iter().map(|p| p.same_identity).collect();
    roc_from_scores(&scores, &same, domain)
}

/// Fraction of same-identity pairs scoring at least `tau`.
pub fn match_rate_from_scores(scores: &[f64], same: &[bool], tau: f64) -> Result<f64> {
    if scores.len() != same.len() {
        return Err(Error::shape("one label per score required"));
    }
    let pos: Vec<f64> = scores.iter().zip(same).filter(|(_, s)| **s).map(|(v, _)| *v).collect();
    if pos.is_empty() {
        return Err(Error::validation("no same-identity pairs"));
    }
    Ok(pos.iter().filter(|v| **v >= tau).count() as f64 / pos.len() as f64)
}

pub fn threshold_match_rate(
    pairs: &[VerificationPair],
    images: PairImages,
    embedder: &dyn Embedder,
    tau: f64,
) -> Result<f64> {
    let scores = pair_scores(pairs, images, embedder)?;
    let same: Vec<bool> = pairs.iter().map(|p| p.same_identity).collect();
    match_rate_from_scores(&scores, &same, tau)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mae_rmse_examples() {
        let a = Image::filled(4, 4, 3, 0.2);
        let b = Image::filled(4, 4, 3, 0.7);
        assert_eq!(mae(&a, &a).unwrap(), 0.0);
        assert_eq!(rmse(&a, &a).unwrap(), 0.0);
        assert!((mae(&a, &b).unwrap() - 0.5).abs() < 1e-7);
        assert!((rmse(&a, &b).unwrap() - 0.5).abs() < 1e-7);
        assert!(mae(&a, &Image::filled(4, 5, 3, 0.0)).is_err());
    }

    #[test]
    fn ssim_of_constants_matches_closed_form() {
        let a = Image::filled(16, 16, 3, 0.2);
        let b = Image::filled(16, 16, 3, 0.8);
        let c1 = 0.01f64.powi(2);
        let (m1, m2) = (0.2f32 as f64, 0.8f32 as f64);
        let expect = (2.0 * m1 * m2 + c1) / (m1 * m1 + m2 * m2 + c1);
        assert!((ssim(&a, &b).unwrap() - expect).abs() < 1e-6);
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn parsing_examples() {
        let a = ParsingMap::new(2, 2, vec![0, 0, 1, 1]).unwrap();
        let b = ParsingMap::new(2, 2, vec![0, 1, 1, 1]).unwrap();
        let r = parsing_similarity(&a, &b, 2).unwrap();
        assert!((r.pa - 0.75).abs() < 1e-12);
        assert!((r.miou - 7.0 / 12.0).abs() < 1e-9);
        let same = parsing_similarity(&a, &a, 2).unwrap();
        assert_eq!((same.pa, same.mpa, same.miou, same.fwiou), (1.0, 1.0, 1.0, 1.0));
        let z = ParsingMap::filled(2, 2, 0);
        let o = ParsingMap::filled(2, 2, 1);
        let d = parsing_similarity(&z, &o, 2).unwrap();
        assert_eq!((d.pa, d.miou), (0.0, 0.0));
        assert!(parsing_similarity(&a, &ParsingMap::filled(2, 2, 2), 2).is_err());
    }

    #[test]
    fn roc_examples() {
        let scores = [0.9, 0.9, 0.1, 0.1];
        let same = [true, true, false, false];
        assert_eq!(roc_from_scores(&scores, &same, Domain::Orig).unwrap().auc, 1.0);
        let tied = roc_from_scores(&[0.5; 4], &same, Domain::Orig).unwrap();
        assert!((tied.auc - 0.5).abs() < 1e-12);
        let rate = match_rate_from_scores(&[0.9, 0.8, 0.5, 0.2], &[true; 4], 0.74).unwrap();
        assert_eq!(rate, 0.5);
        assert_eq!(match_rate_from_scores(&[0.3, -0.2], &[true, true], -1.0).unwrap(), 1.0);
        assert_eq!(match_rate_from_scores(&[1.0, 0.99], &[true, true], 1.0001).unwrap(), 0.0);
    }
}
