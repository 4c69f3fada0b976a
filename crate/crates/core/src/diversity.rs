//! Style mixing: swap a band of style rows for those of a random sample to
//! vary appearance while the coarse rows keep the geometry.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::atm::{protect, ProtectionResult};
use crate::backbones::{synth_face, BackboneBundle, Component, LatentCode, LatentSpace, StyleArch};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::pretrain::sample_latent;
use crate::vfgm::map_batch;

/// Band of rows replaced when mixing, scaled from rows 6..14 of an 18-row
/// style code: `[round(6L/18), round(14L/18))`.
pub fn mix_band(n_layers: usize) -> (usize, usize) {
    let lo = (6.0 * n_layers as f64 / 18.0).round() as usize;
    let hi = (14.0 * n_layers as f64 / 18.0).round() as usize;
    (lo, hi.max(lo))
}

pub fn lift_to_style(generator: &Component<StyleArch>, code: &LatentCode) -> Result<LatentCode> {
    match code.space() {
        LatentSpace::Style => Err(Error::validation("code is already in the style space")),
        LatentSpace::Input => {
            let w = generator.net().lift(&code.to_tensor()?)?;
            Ok(LatentCode::batch_from_tensor(&w)?.remove(0))
        }
    }
}

/// Rows `[lo, hi)` from `w_rand`, every other row from `w_src`.
pub fn style_mix(w_src: &LatentCode, w_rand: &LatentCode, range: (usize, usize)) -> Result<LatentCode> {
    let (lo, hi) = range;
    if w_src.space() != LatentSpace::Style || w_rand.space() != LatentSpace::Style {
        return Err(Error::validation("style mixing needs style-space codes"));
    }
    if w_src.rows() != w_rand.rows() || w_src.dim() != w_rand.dim() {
        return Err(Error::shape("style codes differ in shape"));
    }
    if lo > hi || hi > w_src.rows() {
        return Err(Error::validation(format!(
            "mixing range [{lo}, {hi}) is invalid for {} rows",
            w_src.rows()
        )));
    }
    let data = (0..w_src.rows())
        .flat_map(|r| {
            let src = if (lo..hi).contains(&r) { w_rand } else { w_src };
            src.row(r).to_vec()
        })
        .collect();
    LatentCode::style(w_src.rows(), w_src.dim(), data)
}

/// `n` protections of `x_i`, each from a virtual face whose mixing band comes
/// from a fresh random code.
pub fn diverse_protect(bundle: &BackboneBundle, x_i: &Image, n: usize, seed: u64) -> Result<Vec<ProtectionResult>> {
    let generator = &bundle.style_generator;
    let arch = generator.arch();
    let band = mix_band(arch.n_layers());
    let z = map_batch(&bundle.mapper, &[x_i])?.remove(0);
    let w_src = lift_to_style(generator, &z)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let z_rand = LatentCode::input(sample_latent(arch.z_dim, &mut rng))?;
        let w_rand = lift_to_style(generator, &z_rand)?;
        let mixed = style_mix(&w_src, &w_rand, band)?;
        let x_v = synth_face(generator, &mixed)?;
        out.push(protect(bundle, x_i, &x_v, 1.0)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn code(rows: usize, dim: usize, base: f32) -> LatentCode {
        LatentCode::style(rows, dim, (0..rows * dim).map(|i| base + i as f32).collect()).unwrap()
    }

    #[test]
    fn band_scales_proportionally() {
        assert_eq!(mix_band(18), (6, 14));
        assert_eq!(mix_band(6), (2, 5));
        assert_eq!(mix_band(14), (5, 11));
    }

    #[test]
    fn mixing_rows_exhaustively() {
        for l in 1..=8 {
            let a = code(l, 3, 0.0);
            let b = code(l, 3, 1000.0);
            for lo in 0..=l {
                for hi in lo..=l {
                    let m = style_mix(&a, &b, (lo, hi)).unwrap();
                    for r in 0..l {
                        let want = if (lo..hi).contains(&r) { b.row(r) } else { a.row(r) };
                        assert_eq!(m.row(r), want);
                    }
                    assert_eq!(style_mix(&m, &b, (lo, hi)).unwrap(), m);
                    assert_eq!(style_mix(&a, &a, (lo, hi)).unwrap(), a);
                }
            }
            assert_eq!(style_mix(&a, &b, (0, 0)).unwrap(), a);
            assert_eq!(style_mix(&a, &b, (0, l)).unwrap(), b);
            assert!(style_mix(&a, &b, (0, l + 1)).is_err());
        }
    }
}
