//! Trainable networks and the value types they exchange.

pub mod attributes;
pub mod checkpoint;
pub mod discriminator;
pub mod fusion;
pub mod identity;
mod kernels;
pub mod mapper;
pub mod nn;
pub mod ops;
pub mod parser;
pub mod style;

use std::path::Path;

use candle_core::{DType, Device, Tensor};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

pub use attributes::{AttributeArch, AttributeNet};
pub use discriminator::{DiscriminatorArch, DiscriminatorNet};
pub use fusion::{FusionArch, FusionNet};
pub use identity::{IdentityArch, IdentityNet};
pub use mapper::{MapperArch, MapperNet};
pub use nn::{Builder, VarStore};
pub use parser::{ParserArch, ParserNet};
pub use style::{StyleArch, StyleNet};

use crate::error::{Error, Result};
use crate::image::{Image, ParsingMap};

/// A network architecture: hyperparameters that fully determine the
/// parameter set.
pub trait Arch: Clone + PartialEq + Serialize + DeserializeOwned {
    type Net: Clone;
    const KIND: &'static str;
    fn build(&self, b: &mut Builder) -> Result<Self::Net>;
}

/// Parameters plus a detached (frozen) view of the network over them.
///
/// The frozen view shares storage with the variables, so optimizer updates
/// are visible through it without a rebuild.
pub struct Component<A: Arch> {
    arch: A,
    store: VarStore,
    frozen: A::Net,
}

impl<A: Arch> std::fmt::Debug for Component<A> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct(A::KIND)
            .field("parameters", &self.store.num_parameters())
            .finish()
    }
}

impl<A: Arch> Component<A> {
    pub fn init(arch: A, seed: u64) -> Result<Self> {
        Self::init_with_dtype(arch, seed, DType::F32)
    }

    pub fn init_with_dtype(arch: A, seed: u64, dtype: DType) -> Result<Self> {
        let mut store = VarStore::new(dtype);
        let frozen = arch.build(&mut Builder::new(&mut store, seed, false))?;
        Ok(Self { arch, store, frozen })
    }

    fn from_store(arch: A, mut store: VarStore) -> Result<Self> {
        let before = store.len();
        let frozen = arch.build(&mut Builder::new(&mut store, 0, false))?;
        if store.len() != before {
            return Err(Error::Checkpoint(format!(
                "{} checkpoint lacks {} parameters",
                A::KIND,
                store.len() - before
            )));
        }
        Ok(Self { arch, store, frozen })
    }

    pub fn arch(&self) -> &A {
        &self.arch
    }

    pub fn store(&self) -> &VarStore {
        &self.store
    }

    /// Eval-mode network; no gradients reach its parameters.
    pub fn net(&self) -> &A::Net {
        &self.frozen
    }

    /// Network whose parameters are tracked for backprop.
    pub fn trainable(&mut self) -> Result<A::Net> {
        self.arch.build(&mut Builder::new(&mut self.store, 0, true))
    }

    /// Independent copy with its own storage.
    pub fn deep_clone(&self) -> Result<Self> {
        let (_, store) = checkpoint::decode(&self.encode(serde_json::Value::Null)?, self.store.dtype())?;
        Self::from_store(self.arch.clone(), store)
    }

    pub fn to_dtype(&self, dtype: DType) -> Result<Self> {
        let (_, store) = checkpoint::decode(&self.encode(serde_json::Value::Null)?, dtype)?;
        Self::from_store(self.arch.clone(), store)
    }

    fn header(&self, meta: serde_json::Value) -> Result<checkpoint::Header> {
        Ok(checkpoint::Header {
            kind: A::KIND.to_string(),
            arch: serde_json::to_value(&self.arch)?,
            meta,
        })
    }

    pub fn encode(&self, meta: serde_json::Value) -> Result<Vec<u8>> {
        checkpoint::encode(&self.header(meta)?, &self.store)
    }

    pub fn save(&self, path: &Path, meta: serde_json::Value) -> Result<()> {
        checkpoint::save(path, &self.header(meta)?, &self.store)
    }

    pub fn load(path: &Path) -> Result<(Self, serde_json::Value)> {
        let (header, store) = checkpoint::load(path, DType::F32)?;
        if header.kind != A::KIND {
            return Err(Error::Checkpoint(format!(
                "{}: holds a `{}`, expected `{}`",
                path.display(),
                header.kind,
                A::KIND
            )));
        }
        let arch: A = serde_json::from_value(header.arch)?;
        Ok((Self::from_store(arch, store)?, header.meta))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LatentSpace {
    Input,
    Style,
}

/// A generator code: one row in the input space, or `L` rows in the style
/// space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentCode {
    space: LatentSpace,
    rows: usize,
    dim: usize,
    data: Vec<f32>,
}

impl LatentCode {
    pub fn input(data: Vec<f32>) -> Result<Self> {
        Self::new(LatentSpace::Input, 1, data.len(), data)
    }

    pub fn style(rows: usize, dim: usize, data: Vec<f32>) -> Result<Self> {
        Self::new(LatentSpace::Style, rows, dim, data)
    }

    fn new(space: LatentSpace, rows: usize, dim: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != rows * dim || rows == 0 || dim == 0 {
            return Err(Error::shape(format!(
                "latent code of {} values cannot be {rows}x{dim}",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::validation("latent code has non-finite entries"));
        }
        Ok(Self { space, rows, dim, data })
    }

    pub fn space(&self) -> LatentSpace {
        self.space
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    /// `[1, dim]` for input codes, `[1, rows, dim]` for style codes.
    pub fn to_tensor(&self) -> Result<Tensor> {
        let t = Tensor::from_vec(self.data.clone(), self.data.len(), &Device::Cpu)?;
        Ok(match self.space {
            LatentSpace::Input => t.reshape((1, self.dim))?,
            LatentSpace::Style => t.reshape((1, self.rows, self.dim))?,
        })
    }

    /// Splits a `[B, dim]` or `[B, rows, dim]` tensor into codes.
    pub fn batch_from_tensor(t: &Tensor) -> Result<Vec<Self>> {
        let t = t.to_dtype(DType::F32)?;
        match t.rank() {
            2 => {
                let (n, d) = t.dims2()?;
                let v: Vec<f32> = t.flatten_all()?.to_vec1()?;
                (0..n).map(|i| Self::input(v[i * d..(i + 1) * d].to_vec())).collect()
            }
            3 => {
                let (n, l, d) = t.dims3()?;
                let v: Vec<f32> = t.flatten_all()?.to_vec1()?;
                (0..n)
                    .map(|i| Self::style(l, d, v[i * l * d..(i + 1) * l * d].to_vec()))
                    .collect()
            }
            r => Err(Error::shape(format!("latent batch must be rank 2 or 3, got {r}"))),
        }
    }

    pub fn batch_to_tensor(codes: &[&LatentCode]) -> Result<Tensor> {
        let first = codes.first().ok_or_else(|| Error::shape("empty latent batch"))?;
        if codes.iter().any(|c| c.space != first.space || c.rows != first.rows || c.dim != first.dim) {
            return Err(Error::shape("latent batch mixes code shapes"));
        }
        let data: Vec<f32> = codes.iter().flat_map(|c| c.data.iter().copied()).collect();
        let t = Tensor::from_vec(data, codes.len() * first.rows * first.dim, &Device::Cpu)?;
        Ok(match first.space {
            LatentSpace::Input => t.reshape((codes.len(), first.dim))?,
            LatentSpace::Style => t.reshape((codes.len(), first.rows, first.dim))?,
        })
    }
}

/// Unit-norm identity feature.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdentityEmbedding {
    vec: Vec<f32>,
}

impl IdentityEmbedding {
    pub fn new(vec: Vec<f32>) -> Result<Self> {
        let n = vec.iter().map(|v| (*v as f64) * (*v as f64)).sum::<f64>().sqrt();
        if (n - 1.0).abs() > 1e-5 {
            return Err(Error::validation(format!("identity embedding has norm {n}")));
        }
        Ok(Self { vec })
    }

    /// Normalizes an arbitrary nonzero vector.
    pub fn normalized(vec: Vec<f32>) -> Result<Self> {
        let n = vec.iter().map(|v| (*v as f64) * (*v as f64)).sum::<f64>().sqrt();
        if n == 0.0 || !n.is_finite() {
            return Err(Error::validation("cannot normalize a zero or non-finite vector"));
        }
        Ok(Self {
            vec: vec.iter().map(|v| (*v as f64 / n) as f32).collect(),
        })
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.vec
    }

    pub fn dim(&self) -> usize {
        self.vec.len()
    }

    pub fn cosine(&self, other: &IdentityEmbedding) -> f64 {
        cosine(&self.vec, &other.vec)
    }

    pub fn batch_from_tensor(t: &Tensor) -> Result<Vec<Self>> {
        let (n, d) = t.dims2()?;
        let v: Vec<f32> = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1()?;
        (0..n).map(|i| Self::normalized(v[i * d..(i + 1) * d].to_vec())).collect()
    }

    pub fn to_tensor(&self) -> Result<Tensor> {
        Ok(Tensor::from_vec(self.vec.clone(), (1, self.vec.len()), &Device::Cpu)?)
    }
}

pub fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let (mut ab, mut aa, mut bb) = (0f64, 0f64, 0f64);
    for (x, y) in a.iter().zip(b) {
        let (x, y) = (*x as f64, *y as f64);
        ab += x * y;
        aa += x * x;
        bb += y * y;
    }
    if aa == 0.0 || bb == 0.0 {
        return 0.0;
    }
    (ab / (aa.sqrt() * bb.sqrt())).clamp(-1.0, 1.0)
}

/// Multi-level attribute features, coarsest first. Each level is a
/// `[B,h,w,c]` tensor; sides double from one level to the next.
#[derive(Debug, Clone)]
pub struct FeaturePyramid {
    levels: Vec<Tensor>,
}

impl FeaturePyramid {
    pub fn new(levels: Vec<Tensor>) -> Result<Self> {
        if levels.is_empty() {
            return Err(Error::shape("feature pyramid needs at least one level"));
        }
        let mut prev: Option<(usize, usize)> = None;
        for l in &levels {
            let (b, h, w, _) = l.dims4()?;
            if h != w {
                return Err(Error::shape(format!("pyramid level {h}x{w} is not square")));
            }
            if let Some((pb, ph)) = prev {
                if b != pb || h != 2 * ph {
                    return Err(Error::shape(format!(
                        "pyramid level of side {h} must double the previous side {ph}"
                    )));
                }
            }
            prev = Some((b, h));
        }
        Ok(Self { levels })
    }

    pub fn depth(&self) -> usize {
        self.levels.len()
    }

    pub fn levels(&self) -> &[Tensor] {
        &self.levels
    }

    pub fn into_levels(self) -> Vec<Tensor> {
        self.levels
    }

    pub fn level_dims(&self) -> Vec<Vec<usize>> {
        self.levels.iter().map(|l| l.dims().to_vec()).collect()
    }

    /// `α·self + (1−α)·other`, level by level.
    pub fn blend(&self, other: &FeaturePyramid, alpha: f64) -> Result<FeaturePyramid> {
        if self.level_dims() != other.level_dims() {
            return Err(Error::shape("cannot blend pyramids of different shapes"));
        }
        let levels = self
            .levels
            .iter()
            .zip(&other.levels)
            .map(|(a, b)| Ok(((a * alpha)? + (b * (1.0 - alpha))?)?))
            .collect::<Result<Vec<_>>>()?;
        Ok(FeaturePyramid { levels })
    }

    pub fn level_values(&self, k: usize) -> Result<Vec<f32>> {
        Ok(self.levels[k].to_dtype(DType::F32)?.flatten_all()?.to_vec1()?)
    }
}

/// Per-pixel class scores `[H, W, n_classes]`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Logits {
    pub height: usize,
    pub width: usize,
    pub n_classes: usize,
    pub data: Vec<f32>,
}

impl Logits {
    pub fn at(&self, y: usize, x: usize) -> &[f32] {
        let o = (y * self.width + x) * self.n_classes;
        &self.data[o..o + self.n_classes]
    }

    /// Argmax per pixel; ties go to the lowest class index.
    pub fn argmax(&self) -> Result<ParsingMap> {
        let data = self
            .data
            .chunks_exact(self.n_classes)
            .map(|px| {
                let mut best = 0usize;
                for (i, v) in px.iter().enumerate().skip(1) {
                    if *v > px[best] {
                        best = i;
                    }
                }
                best as u8
            })
            .collect();
        ParsingMap::new(self.height, self.width, data)
    }
}

pub fn synth_face(generator: &Component<StyleArch>, code: &LatentCode) -> Result<Image> {
    let net = generator.net();
    let arch = net.arch();
    let w = match code.space() {
        LatentSpace::Input => {
            if code.dim() != arch.z_dim {
                return Err(Error::shape(format!(
                    "input code has {} dims, generator expects {}",
                    code.dim(),
                    arch.z_dim
                )));
            }
            net.lift(&code.to_tensor()?)?
        }
        LatentSpace::Style => {
            if code.rows() != arch.n_layers() || code.dim() != arch.w_dim {
                return Err(Error::shape(format!(
                    "style code is {}x{}, generator expects {}x{}",
                    code.rows(),
                    code.dim(),
                    arch.n_layers(),
                    arch.w_dim
                )));
            }
            code.to_tensor()?
        }
    };
    let img = net.synthesize(&w)?;
    Ok(Image::batch_from_tensor(&img)?.remove(0).clamp_unit())
}

pub fn parse_face(parser: &Component<ParserArch>, image: &Image) -> Result<(Logits, ParsingMap)> {
    let net = parser.net();
    let t = net.forward(&image.to_tensor(DType::F32, &Device::Cpu)?)?;
    let (_, h, w, n) = t.dims4()?;
    let logits = Logits {
        height: h,
        width: w,
        n_classes: n,
        data: t.flatten_all()?.to_vec1()?,
    };
    let map = logits.argmax()?;
    Ok((logits, map))
}

/// Batched parsing of images already on a tensor.
pub fn parse_batch(parser: &ParserNet, images: &Tensor) -> Result<Vec<ParsingMap>> {
    let t = parser.forward(images)?;
    let (b, h, w, n) = t.dims4()?;
    let v: Vec<f32> = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1()?;
    let per = h * w * n;
    (0..b)
        .map(|i| {
            Logits {
                height: h,
                width: w,
                n_classes: n,
                data: v[i * per..(i + 1) * per].to_vec(),
            }
            .argmax()
        })
        .collect()
}

pub fn embed_identity(encoder: &Component<IdentityArch>, image: &Image) -> Result<IdentityEmbedding> {
    let e = encoder.net().embed(&image.to_tensor(DType::F32, &Device::Cpu)?)?;
    Ok(IdentityEmbedding::batch_from_tensor(&e)?.remove(0))
}

pub fn encode_attributes(encoder: &Component<AttributeArch>, image: &Image) -> Result<FeaturePyramid> {
    let x = image.to_tensor(encoder.store().dtype(), &Device::Cpu)?;
    FeaturePyramid::new(encoder.net().forward(&x)?)
}

pub fn fuse_generate(
    generator: &Component<FusionArch>,
    id: &IdentityEmbedding,
    attrs: &FeaturePyramid,
) -> Result<Image> {
    let dtype = generator.store().dtype();
    let idt = id.to_tensor()?.to_dtype(dtype)?;
    let levels: Vec<Tensor> = attrs
        .levels()
        .iter()
        .map(|l| l.to_dtype(dtype))
        .collect::<candle_core::Result<_>>()?;
    let img = generator.net().forward(&idt, &levels)?;
    Ok(Image::batch_from_tensor(&img)?.remove(0).clamp_unit())
}

pub fn discriminate(discriminators: &Component<DiscriminatorArch>, image: &Image) -> Result<Vec<Tensor>> {
    discriminators
        .net()
        .forward(&image.to_tensor(DType::F32, &Device::Cpu)?)
}

/// Every network the pipeline composes.
#[derive(Debug)]
pub struct BackboneBundle {
    pub style_generator: Component<StyleArch>,
    pub mapper: Component<MapperArch>,
    pub face_parser: Component<ParserArch>,
    pub identity_encoder: Component<IdentityArch>,
    pub attribute_encoder: Component<AttributeArch>,
    pub fusion_generator: Component<FusionArch>,
    pub discriminators: Component<DiscriminatorArch>,
}

impl BackboneBundle {
    /// Checks that the networks can be chained on `image_size` images.
    pub fn check_compatible(&self, image_size: usize) -> Result<()> {
        let mismatch = |what: &str, got: usize| {
            Err(Error::shape(format!("{what} is {got}, corpus images are {image_size}")))
        };
        if self.style_generator.arch().image_size() != image_size {
            return mismatch("style generator output", self.style_generator.arch().image_size());
        }
        if self.fusion_generator.arch().image_size() != image_size {
            return mismatch("fusion generator output", self.fusion_generator.arch().image_size());
        }
        for (what, s) in [
            ("parser input", self.face_parser.arch().image_size),
            ("identity encoder input", self.identity_encoder.arch().image_size),
            ("attribute encoder input", self.attribute_encoder.arch().image_size),
            ("mapper input", self.mapper.arch().image_size),
        ] {
            if s != image_size {
                return mismatch(what, s);
            }
        }
        if self.mapper.arch().z_dim != self.style_generator.arch().z_dim {
            return Err(Error::shape("mapper output does not match the generator input space"));
        }
        if self.identity_encoder.arch().embed_dim != self.fusion_generator.arch().id_dim {
            return Err(Error::shape("identity embedding does not match the fusion generator"));
        }
        if self.attribute_encoder.arch().level_shapes() != self.fusion_generator.arch().attr_levels {
            return Err(Error::shape("attribute pyramid does not match the fusion generator"));
        }
        Ok(())
    }
}
