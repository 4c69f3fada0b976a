//! Background replacement: keep the protected head and neck, restore the
//! original background, and diffuse colour into pixels neither covers.

use crate::backbones::{parse_face, Component, ParserArch};
use crate::corpus::LabelSet;
use crate::error::{Error, Result};
use crate::image::{BinaryMask, Image, ParsingMap};

/// Anything that can segment the head-and-neck region of a face.
pub trait MaskModel {
    fn head_neck_mask(&self, image: &Image) -> Result<BinaryMask>;
}

pub fn mask_from_parsing(map: &ParsingMap, labels: LabelSet) -> BinaryMask {
    BinaryMask::from_fn(map.height(), map.width(), |y, x| labels.is_head_or_neck(map.get(y, x)))
}

fn label_set_for(n_classes: usize) -> Result<LabelSet> {
    [LabelSet::Coarse7, LabelSet::Fine19]
        .into_iter()
        .find(|l| l.n_classes() == n_classes)
        .ok_or_else(|| Error::validation(format!("no label set with {n_classes} classes")))
}

impl MaskModel for Component<ParserArch> {
    fn head_neck_mask(&self, image: &Image) -> Result<BinaryMask> {
        let labels = label_set_for(self.arch().n_classes)?;
        let (_, map) = parse_face(self, image)?;
        Ok(mask_from_parsing(&map, labels))
    }
}

/// Fixed parsing maps looked up by image content, for tests and for
/// records whose ground truth is known.
pub struct KnownParsing<'a> {
    pub entries: Vec<(&'a Image, &'a ParsingMap)>,
    pub labels: LabelSet,
}

impl MaskModel for KnownParsing<'_> {
    fn head_neck_mask(&self, image: &Image) -> Result<BinaryMask> {
        self.entries
            .iter()
            .find(|(img, _)| *img == image)
            .map(|(_, map)| mask_from_parsing(map, self.labels))
            .ok_or_else(|| Error::validation("no known parsing for this image"))
    }
}

pub fn head_neck_mask(model: &dyn MaskModel, image: &Image) -> Result<BinaryMask> {
    model.head_neck_mask(image)
}

/// `(m + 1) mod 2` per pixel.
pub fn complement(mask: &BinaryMask) -> BinaryMask {
    mask.map(|m| (m + 1) % 2)
}

/// The composite before inpainting, plus the mask of pixels left blank.
#[derive(Debug, Clone, PartialEq)]
pub struct Composite {
    pub image: Image,
    pub background: BinaryMask,
    pub head: BinaryMask,
    pub blank: BinaryMask,
}

/// `mask_b ⊙ X_i + mask_hn(X_p) ⊙ X_p` where
/// `mask_b = complement(hn_p) ⊙ complement(hn_i)`.
pub fn composite(x_i: &Image, x_p: &Image, hn_i: &BinaryMask, hn_p: &BinaryMask) -> Result<Composite> {
    x_i.ensure_same_dims(x_p)?;
    let dims = (x_i.height(), x_i.width());
    if hn_i.dims() != dims || hn_p.dims() != dims {
        return Err(Error::shape("masks do not match the image size"));
    }
    let background = complement(hn_p).and(&complement(hn_i))?;
    let (h, w, c) = x_i.dims();
    let image = Image::from_fn(h, w, c, |y, x, ch| {
        background.get(y, x) as f32 * x_i.get(y, x, ch) + hn_p.get(y, x) as f32 * x_p.get(y, x, ch)
    });
    let blank = BinaryMask::from_fn(h, w, |y, x| background.get(y, x) == 0 && hn_p.get(y, x) == 0);
    Ok(Composite {
        image,
        background,
        head: hn_p.clone(),
        blank,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct BackgroundResult {
    pub image: Image,
    pub composite: Composite,
}

pub fn replace_background(x_i: &Image, x_p: &Image, model: &dyn MaskModel) -> Result<BackgroundResult> {
    x_i.ensure_same_dims(x_p)?;
    let hn_p = model.head_neck_mask(x_p)?;
    let hn_i = model.head_neck_mask(x_i)?;
    let comp = composite(x_i, x_p, &hn_i, &hn_p)?;
    let image = inpaint(&comp.image, &comp.blank)?;
    Ok(BackgroundResult { image, composite: comp })
}

pub const INPAINT_TOLERANCE: f32 = 1e-4;
pub const INPAINT_MAX_ITERS: usize = 500;

fn neighbours(y: usize, x: usize, h: usize, w: usize) -> impl Iterator<Item = (usize, usize)> {
    let up = (y > 0).then(|| (y - 1, x));
    let down = (y + 1 < h).then(|| (y + 1, x));
    let left = (x > 0).then(|| (y, x - 1));
    let right = (x + 1 < w).then(|| (y, x + 1));
    [up, down, left, right].into_iter().flatten()
}

/// Jacobi diffusion: each blank pixel becomes the mean of its 4-neighbours,
/// starting from the mean of the known pixels bordering the hole.
pub fn inpaint(image: &Image, blank: &BinaryMask) -> Result<Image> {
    let (h, w, c) = image.dims();
    if blank.dims() != (h, w) {
        return Err(Error::shape("blank mask does not match the image size"));
    }
    let holes: Vec<(usize, usize)> = (0..h)
        .flat_map(|y| (0..w).map(move |x| (y, x)))
        .filter(|&(y, x)| blank.get(y, x) == 1)
        .collect();
    if holes.is_empty() || holes.len() == h * w {
        return Ok(image.clone());
    }
    let mut out = image.clone();
    for ch in 0..c {
        let (mut sum, mut n) = (0f64, 0usize);
        for y in 0..h {
            for x in 0..w {
                if blank.get(y, x) == 0 && neighbours(y, x, h, w).any(|(ny, nx)| blank.get(ny, nx) == 1) {
                    sum += image.get(y, x, ch) as f64;
                    n += 1;
                }
            }
        }
        let init = (sum / n as f64) as f32;
        for &(y, x) in &holes {
            out.set(y, x, ch, init);
        }
        for _ in 0..INPAINT_MAX_ITERS {
            let next: Vec<f32> = holes
                .iter()
                .map(|&(y, x)| {
                    let (s, k) = neighbours(y, x, h, w)
                        .fold((0f32, 0usize), |(s, k), (ny, nx)| (s + out.get(ny, nx, ch), k + 1));
                    s / k as f32
                })
                .collect();
            let mut delta = 0f32;
            for (&(y, x), v) in holes.iter().zip(next) {
                delta = delta.max((out.get(y, x, ch) - v).abs());
                out.set(y, x, ch, v);
            }
            if delta < INPAINT_TOLERANCE {
                break;
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn complement_examples() {
        let ones = BinaryMask::ones(3, 2);
        assert_eq!(complement(&ones), BinaryMask::zeros(3, 2));
        let checker = BinaryMask::from_fn(4, 4, |y, x| (y + x) % 2 == 0);
        let inv = complement(&checker);
        for y in 0..4 {
            for x in 0..4 {
                assert_eq!(inv.get(y, x), ((y + x) % 2) as u8);
            }
        }
        assert_eq!(complement(&inv), checker);
    }

    #[test]
    fn inpaint_examples() {
        let img = Image::from_fn(5, 5, 1, |y, x, _| (y * 5 + x) as f32 / 24.0);
        assert_eq!(inpaint(&img, &BinaryMask::zeros(5, 5)).unwrap(), img);
        let flat = Image::filled(3, 3, 3, 0.37);
        let mut hole = Image::filled(3, 3, 3, 0.37);
        hole.set(1, 1, 0, 0.9);
        let m = BinaryMask::from_fn(3, 3, |y, x| y == 1 && x == 1);
        let out = inpaint(&hole, &m).unwrap();
        for (a, b) in out.data().iter().zip(flat.data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn inpaint_respects_maximum_principle() {
        let img = Image::from_fn(6, 6, 1, |_, x, _| x as f32 / 5.0);
        let m = BinaryMask::from_fn(6, 6, |y, x| (2..4).contains(&y) && (2..4).contains(&x));
        let out = inpaint(&img, &m).unwrap();
        let boundary: Vec<f32> = [(1, 2), (1, 3), (4, 2), (4, 3), (2, 1), (3, 1), (2, 4), (3, 4)]
            .iter()
            .map(|&(y, x)| img.get(y, x, 0))
            .collect();
        let lo = boundary.iter().cloned().fold(f32::INFINITY, f32::min);
        let hi = boundary.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
        for y in 2..4 {
            for x in 2..4 {
                let v = out.get(y, x, 0);
                assert!(v >= lo - 1e-6 && v <= hi + 1e-6, "{v} outside [{lo}, {hi}]");
            }
        }
        for y in 0..6 {
            for x in 0..6 {
                if m.get(y, x) == 0 {
                    assert_eq!(out.get(y, x, 0).to_bits(), img.get(y, x, 0).to_bits());
                }
            }
        }
    }
}
