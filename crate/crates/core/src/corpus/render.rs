//! Procedural face renderer.
//!
//! Geometry knobs (face size, eye spacing and height, nose length, mouth
//! height) are a pure function of the identity; colours, hair volume,
//! lighting, and background texture are a pure function of the attribute
//! knobs. The per-render seed only drives background texture phase and
//! background noise, so parsing maps never depend on it.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::labels::{fine, LabelSet};
use crate::error::{Error, Result};
use crate::image::{Image, ParsingMap};

pub const GEOMETRY_DIM: usize = 6;
pub const ATTR_DIM: usize = 11;

/// Attribute knob indices.
pub mod attr {
    pub const SKIN_TONE: usize = 0;
    pub const SKIN_WARMTH: usize = 1;
    pub const HAIR_LIGHTNESS: usize = 2;
    pub const HAIR_HUE: usize = 3;
    pub const HAIR_VOLUME: usize = 4;
    pub const BG_HUE: usize = 5;
    pub const BG_LIGHTNESS: usize = 6;
    pub const BG_TEXTURE: usize = 7;
    pub const IRIS: usize = 8;
    pub const LIPS: usize = 9;
    pub const SHADING: usize = 10;
}

const HALTON_BASES: [u32; GEOMETRY_DIM] = [2, 3, 5, 7, 11, 13];
// Fixed per-axis rotations so identity 0 does not sit on the grid origin.
const HALTON_SHIFT: [f32; GEOMETRY_DIM] = [0.137, 0.611, 0.293, 0.871, 0.458, 0.724];

/// Identity geometry as six knobs in `[0,1]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FaceGeometry {
    pub knobs: [f32; GEOMETRY_DIM],
}

impl FaceGeometry {
    /// Low-discrepancy placement so nearby identity ids stay well separated.
    pub fn for_identity(identity_id: u64) -> Self {
        let mut knobs = [0f32; GEOMETRY_DIM];
        for (d, k) in knobs.iter_mut().enumerate() {
            let h = radical_inverse(identity_id + 1, HALTON_BASES[d]) + HALTON_SHIFT[d];
            *k = 0.05 + 0.9 * h.fract();
        }
        Self { knobs }
    }

    pub fn from_knobs(knobs: [f32; GEOMETRY_DIM]) -> Self {
        Self { knobs }
    }
}

fn radical_inverse(mut n: u64, base: u32) -> f32 {
    let b = base as u64;
    let mut inv = 1.0f64 / base as f64;
    let mut acc = 0.0f64;
    while n > 0 {
        acc += (n % b) as f64 * inv;
        n /= b;
        inv /= base as f64;
    }
    acc as f32
}

/// Background texture phase and noise; both influence colours only.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Texture {
    Clean,
    Seeded(u64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Renderer {
    pub size: usize,
    pub labels: LabelSet,
}

struct Layout {
    cx: f32,
    cy: f32,
    face_a: f32,
    face_b: f32,
    eye_dx: f32,
    eye_y: f32,
    nose_top: f32,
    nose_bottom: f32,
    mouth_y: f32,
    hair_a: f32,
    hair_b: f32,
    hair_bottom: f32,
    fringe_bottom: f32,
}

impl Layout {
    fn new(g: &FaceGeometry, hair_volume: f32) -> Self {
        let k = &g.knobs;
        let cx = 0.5;
        let cy = 0.5;
        let face_a = 0.24 + 0.10 * k[0];
        let face_b = 0.30 + 0.08 * k[1];
        let eye_dx = 0.09 + 0.07 * k[2];
        let eye_y = cy - (0.04 + 0.08 * k[3]);
        let mouth_y = cy + 0.12 + 0.09 * k[5];
        let nose_top = eye_y + 0.02;
        let nose_bottom = (nose_top + 0.07 + 0.09 * k[4]).min(mouth_y - 0.045);
        Self {
            cx,
            cy,
            face_a,
            face_b,
            eye_dx,
            eye_y,
            nose_top,
            nose_bottom,
            mouth_y,
            hair_a: face_a + 0.03 + 0.04 * hair_volume,
            hair_b: face_b + 0.03 + 0.03 * hair_volume,
            hair_bottom: cy + 0.05 + 0.15 * hair_volume,
            fringe_bottom: cy - face_b + 0.08 + 0.04 * hair_volume,
        }
    }

    fn fine_label(&self, u: f32, v: f32) -> u8 {
        let ell = |x0: f32, y0: f32, a: f32, b: f32| {
            let dx = (u - x0) / a;
            let dy = (v - y0) / b;
            dx * dx + dy * dy <= 1.0
        };
        let mut label = fine::BACKGROUND;
        if ell(self.cx, self.cy - 0.03, self.hair_a, self.hair_b) && v <= self.hair_bottom {
            label = fine::HAIR;
        }
        if (u - self.cx).abs() <= 0.6 * self.face_a && v >= self.cy + 0.1 {
            label = fine::NECK;
        }
        let ear_y = self.eye_y + 0.03;
        if ell(self.cx - self.face_a, ear_y, 0.035, 0.06) {
            label = fine::L_EAR;
        }
        if ell(self.cx + self.face_a, ear_y, 0.035, 0.06) {
            label = fine::R_EAR;
        }
        if !ell(self.cx, self.cy, self.face_a, self.face_b) {
            return label;
        }
        label = fine::SKIN;
        if v <= self.fringe_bottom {
            label = fine::HAIR;
        }
        let brow_y = self.eye_y - 0.05;
        if ell(self.cx - self.eye_dx, brow_y, 0.05, 0.012) {
            label = fine::L_BROW;
        }
        if ell(self.cx + self.eye_dx, brow_y, 0.05, 0.012) {
            label = fine::R_BROW;
        }
        if ell(self.cx - self.eye_dx, self.eye_y, 0.045, 0.025) {
            label = fine::L_EYE;
        }
        if ell(self.cx + self.eye_dx, self.eye_y, 0.045, 0.025) {
            label = fine::R_EYE;
        }
        if v >= self.nose_top && v <= self.nose_bottom {
            let t = (v - self.nose_top) / (self.nose_bottom - self.nose_top);
            if (u - self.cx).abs() <= 0.015 + 0.025 * t {
                label = fine::NOSE;
            }
        }
        if ell(self.cx, self.mouth_y, 0.09, 0.03) {
            let dv = v - self.mouth_y;
            label = if dv.abs() < 0.007 {
                fine::MOUTH
            } else if dv < 0.0 {
                fine::U_LIP
            } else {
                fine::L_LIP
            };
        }
        label
    }
}

type Rgb = [f32; 3];

fn lerp(a: Rgb, b: Rgb, t: f32) -> Rgb {
    [
        a[0] + (b[0] - a[0]) * t,
        a[1] + (b[1] - a[1]) * t,
        a[2] + (b[2] - a[2]) * t,
    ]
}

fn scale(c: Rgb, s: f32) -> Rgb {
    [c[0] * s, c[1] * s, c[2] * s]
}

fn palette(anchors: &[Rgb], t: f32) -> Rgb {
    let n = anchors.len() - 1;
    let x = t.clamp(0.0, 1.0) * n as f32;
    let i = (x.floor() as usize).min(n - 1);
    lerp(anchors[i], anchors[i + 1], x - i as f32)
}

fn hsv(h: f32, s: f32, v: f32) -> Rgb {
    let h6 = (h.fract() * 6.0).max(0.0);
    let i = h6.floor() as i32 % 6;
    let f = h6 - h6.floor();
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match i {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

struct Colors {
    skin: Rgb,
    hair: Rgb,
    bg: Rgb,
    iris: Rgb,
    lips: Rgb,
    shading: f32,
    tex_angle: f32,
    tex_freq: f32,
}

impl Colors {
    fn new(a: &[f32]) -> Self {
        let mut skin = lerp([0.96, 0.84, 0.74], [0.36, 0.22, 0.14], a[attr::SKIN_TONE]);
        let w = (a[attr::SKIN_WARMTH] - 0.5) * 0.12;
        skin[0] += w;
        skin[2] -= w;
        let hair = scale(
            palette(
                &[
                    [0.10, 0.07, 0.06],
                    [0.38, 0.22, 0.12],
                    [0.86, 0.72, 0.42],
                    [0.62, 0.22, 0.10],
                    [0.72, 0.72, 0.74],
                ],
                a[attr::HAIR_HUE],
            ),
            0.55 + 0.6 * a[attr::HAIR_LIGHTNESS],
        );
        let bg = hsv(a[attr::BG_HUE], 0.5, 0.3 + 0.6 * a[attr::BG_LIGHTNESS]);
        let iris = palette(
            &[[0.15, 0.30, 0.62], [0.32, 0.20, 0.10], [0.20, 0.46, 0.26]],
            a[attr::IRIS],
        );
        let lips = lerp([0.80, 0.40, 0.42], [0.50, 0.12, 0.18], a[attr::LIPS]);
        Self {
            skin,
            hair,
            bg,
            iris,
            lips,
            shading: a[attr::SHADING],
            tex_angle: std::f32::consts::PI * a[attr::BG_TEXTURE],
            tex_freq: 3.0 + 9.0 * a[attr::BG_TEXTURE],
        }
    }
}

impl Renderer {
    pub fn new(size: usize, labels: LabelSet) -> Self {
        Self { size, labels }
    }

    pub fn validate_attrs(attrs: &[f32]) -> Result<()> {
        if attrs.len() != ATTR_DIM {
            return Err(Error::validation(format!(
                "expected {ATTR_DIM} attribute knobs, got {}",
                attrs.len()
            )));
        }
        if let Some((i, v)) = attrs
            .iter()
            .enumerate()
            .find(|(_, v)| !(0.0..=1.0).contains(*v))
        {
            return Err(Error::validation(format!(
                "attribute knob {i} = {v} outside [0,1]"
            )));
        }
        Ok(())
    }

    /// Renders a face and its parsing map in this renderer's label set.
    pub fn render(
        &self,
        geometry: &FaceGeometry,
        attrs: &[f32],
        texture: Texture,
    ) -> Result<(Image, ParsingMap)> {
        Self::validate_attrs(attrs)?;
        let s = self.size;
        let layout = Layout::new(geometry, attrs[attr::HAIR_VOLUME]);
        let colors = Colors::new(attrs);
        let (phase, mut noise) = match texture {
            Texture::Clean => (0.0, None),
            Texture::Seeded(seed) => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7e57_u64);
                let phase = rng.random::<f32>() * std::f32::consts::TAU;
                (phase, Some(rng))
            }
        };
        let (sin_a, cos_a) = colors.tex_angle.sin_cos();
        let mut img = Image::filled(s, s, 3, 0.0);
        let mut map = ParsingMap::filled(s, s, 0);
        for y in 0..s {
            let v = (y as f32 + 0.5) / s as f32;
            for x in 0..s {
                let u = (x as f32 + 0.5) / s as f32;
                let fl = layout.fine_label(u, v);
                map.set(y, x, self.labels.from_fine(fl));
                let shade = 1.0 + 0.6 * (colors.shading - 0.5) * (u - 0.5);
                let rgb = match fl {
                    fine::BACKGROUND => {
                        let stripe = (std::f32::consts::TAU
                            * colors.tex_freq
                            * (u * cos_a + v * sin_a)
                            + phase)
                            .sin();
                        let mut c = [
                            colors.bg[0] + 0.1 * stripe,
                            colors.bg[1] + 0.1 * stripe,
                            colors.bg[2] + 0.1 * stripe,
                        ];
                        if let Some(rng) = noise.as_mut() {
                            for ch in &mut c {
                                *ch += (rng.random::<f32>() - 0.5) * 0.04;
                            }
                        }
                        c
                    }
                    fine::HAIR => colors.hair,
                    fine::L_BROW | fine::R_BROW => scale(colors.hair, 0.7),
                    fine::L_EYE | fine::R_EYE => {
                        let ex = if fl == fine::L_EYE {
                            layout.cx - layout.eye_dx
                        } else {
                            layout.cx + layout.eye_dx
                        };
                        let r = ((u - ex).powi(2) + (v - layout.eye_y).powi(2)).sqrt();
                        if r < 0.007 {
                            [0.03, 0.03, 0.03]
                        } else if r < 0.018 {
                            colors.iris
                        } else {
                            [0.93, 0.93, 0.90]
                        }
                    }
                    fine::NOSE => scale(colors.skin, 0.88 * shade),
                    fine::MOUTH => [0.25, 0.05, 0.08],
                    fine::U_LIP | fine::L_LIP => colors.lips,
                    fine::NECK => scale(colors.skin, 0.85 * shade),
                    fine::L_EAR | fine::R_EAR => scale(colors.skin, 0.95 * shade),
                    _ => scale(colors.skin, shade),
                };
                for (c, val) in rgb.iter().enumerate() {
                    img.set(y, x, c, val.clamp(0.0, 1.0));
                }
            }
        }
        Ok((img, map))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mid_attrs() -> Vec<f32> {
        vec![0.5; ATTR_DIM]
    }

    #[test]
    fn halton_geometry_is_in_range_and_distinct() {
        let gs: Vec<_> = (0..20).map(FaceGeometry::for_identity).collect();
        for g in &gs {
            assert!(g.knobs.iter().all(|k| (0.05..=0.95).contains(k)));
        }
        for i in 0..gs.len() {
            for j in i + 1..gs.len() {
                let d: f32 = gs[i]
                    .knobs
                    .iter()
                    .zip(&gs[j].knobs)
                    .map(|(a, b)| (a - b).powi(2))
                    .sum::<f32>()
                    .sqrt();
                assert!(d > 0.1, "identities {i} and {j} too close: {d}");
            }
        }
    }

    #[test]
    fn seed_never_changes_parsing() {
        let r = Renderer::new(64, LabelSet::Coarse7);
        let g = FaceGeometry::for_identity(3);
        let (a, pa) = r.render(&g, &mid_attrs(), Texture::Seeded(1)).unwrap();
        let (b, pb) = r.render(&g, &mid_attrs(), Texture::Seeded(2)).unwrap();
        assert_eq!(pa, pb);
        assert_ne!(a, b);
    }

    #[test]
    fn fine_labels_collapse_to_coarse() {
        let g = FaceGeometry::for_identity(5);
        let (_, fine_map) = Renderer::new(64, LabelSet::Fine19)
            .render(&g, &mid_attrs(), Texture::Clean)
            .unwrap();
        let (_, coarse_map) = Renderer::new(64, LabelSet::Coarse7)
            .render(&g, &mid_attrs(), Texture::Clean)
            .unwrap();
        for (f, c) in fine_map.data().iter().zip(coarse_map.data()) {
            assert_eq!(LabelSet::Coarse7.from_fine(*f), *c);
        }
        // every drawn region shows up
        let hist = coarse_map.histogram(7);
        assert!(hist.iter().all(|&n| n > 0), "{hist:?}");
    }

    #[test]
    fn rejects_out_of_range_attrs() {
        let r = Renderer::new(16, LabelSet::Coarse7);
        let mut a = mid_attrs();
        a[2] = 1.5;
        assert!(r
            .render(&FaceGeometry::for_identity(0), &a, Texture::Clean)
            .is_err());
        assert!(r
            .render(&FaceGeometry::for_identity(0), &a[..3], Texture::Clean)
            .is_err());
    }
}
