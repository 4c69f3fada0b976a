//! Raster types exchanged between every stage: RGB images in `[0,1]`,
//! per-pixel class maps, and binary masks.

use std::path::Path;

use candle_core::{DType, Device, Tensor};

use crate::error::{Error, Result};

/// Row-major `H×W×C` raster of reals in `[0,1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f32>,
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != height * width * channels {
            return Err(Error::shape(format!(
                "image buffer holds {} values, {height}x{width}x{channels} needs {}",
                data.len(),
                height * width * channels
            )));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f32) -> Self {
        Self {
            height,
            width,
            channels,
            data: vec![value; height * width * channels],
        }
    }

    pub fn from_fn(
        height: usize,
        width: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f32,
    ) -> Self {
        let mut data = Vec::with_capacity(height * width * channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    data.push(f(y, x, c));
                }
            }
        }
        Self {
            height,
            width,
            channels,
            data,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f32 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, v: f32) {
        self.data[(y * self.width + x) * self.channels + c] = v;
    }

    pub fn pixel(&self, y: usize, x: usize) -> &[f32] {
        let i = (y * self.width + x) * self.channels;
        &self.data[i..i + self.channels]
    }

    pub fn ensure_same_dims(&self, other: &Image) -> Result<()> {
        if self.dims() != other.dims() {
            return Err(Error::shape(format!(
                "image dims {:?} vs {:?}",
                self.dims(),
                other.dims()
            )));
        }
        Ok(())
    }

    pub fn is_in_unit_range(&self) -> bool {
        self.data.iter().all(|v| (0.0..=1.0).contains(v))
    }

    pub fn clamp_unit(mut self) -> Self {
        for v in &mut self.data {
            *v = v.clamp(0.0, 1.0);
        }
        self
    }

    /// Stacks images into an NHWC tensor.
    pub fn batch_to_tensor(images: &[&Image], dtype: DType, device: &Device) -> Result<Tensor> {
        let first = images
            .first()
            .ok_or_else(|| Error::shape("cannot batch zero images"))?;
        let (h, w, c) = first.dims();
        let mut buf = Vec::with_capacity(images.len() * h * w * c);
        for img in images {
            first.ensure_same_dims(img)?;
            buf.extend_from_slice(&img.data);
        }
        let t = Tensor::from_vec(buf, (images.len(), h, w, c), device)?;
        Ok(t.to_dtype(dtype)?)
    }

    pub fn to_tensor(&self, dtype: DType, device: &Device) -> Result<Tensor> {
        Self::batch_to_tensor(&[self], dtype, device)
    }

    /// Splits an NHWC tensor back into images.
    pub fn batch_from_tensor(t: &Tensor) -> Result<Vec<Image>> {
        let (b, h, w, c) = t.dims4()?;
        let flat: Vec<f32> = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1()?;
        let n = h * w * c;
        Ok((0..b)
            .map(|i| Image {
                height: h,
                width: w,
                channels: c,
                data: flat[i * n..(i + 1) * n].to_vec(),
            })
            .collect())
    }

    /// 8-bit quantization with round-to-nearest, as stored on disk.
    pub fn to_rgb8(&self) -> Result<image::RgbImage> {
        if self.channels != 3 {
            return Err(Error::shape(format!(
                "8-bit export expects 3 channels, got {}",
                self.channels
            )));
        }
        let bytes: Vec<u8> = self.data.iter().map(|&v| quantize(v)).collect();
        image::RgbImage::from_raw(self.width as u32, self.height as u32, bytes)
            .ok_or_else(|| Error::shape("rgb buffer size"))
    }

    pub fn from_rgb8(img: &image::RgbImage) -> Self {
        let (w, h) = img.dimensions();
        Self {
            height: h as usize,
            width: w as usize,
            channels: 3,
            data: img.as_raw().iter().map(|&b| b as f32 / 255.0).collect(),
        }
    }

    /// Rounds through the 8-bit grid so in-memory values equal what a PNG round trip yields.
    pub fn quantized(&self) -> Self {
        let mut out = self.clone();
        for v in &mut out.data {
            *v = quantize(*v) as f32 / 255.0;
        }
        out
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let rgb = self.to_rgb8()?;
        let mut bytes = Vec::new();
        rgb.write_to(
            &mut std::io::Cursor::new(&mut bytes),
            image::ImageFormat::Png,
        )?;
        crate::cli::fsutil::write_atomic(path, &bytes)
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let dynimg = image::open(path).map_err(|e| Error::record(path, e.to_string()))?;
        Ok(Self::from_rgb8(&dynimg.to_rgb8()))
    }
}

#[inline]
fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Per-pixel semantic class indices.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ParsingMap {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl ParsingMap {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::shape(format!(
                "parsing buffer holds {} labels, {height}x{width} needs {}",
                data.len(),
                height * width
            )));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, class: u8) -> Self {
        Self {
            height,
            width,
            data: vec![class; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, class: u8) {
        self.data[y * self.width + x] = class;
    }

    pub fn max_class(&self) -> Option<u8> {
        self.data.iter().copied().max()
    }

    pub fn validate_classes(&self, n_classes: usize) -> Result<()> {
        match self.data.iter().position(|&c| c as usize >= n_classes) {
            Some(i) => Err(Error::validation(format!(
                "class {} at pixel {} outside [0, {n_classes})",
                self.data[i], i
            ))),
            None => Ok(()),
        }
    }

    pub fn histogram(&self, n_classes: usize) -> Vec<usize> {
        let mut h = vec![0; n_classes.max(self.max_class().map_or(0, |m| m as usize + 1))];
        for &c in &self.data {
            h[c as usize] += 1;
        }
        h
    }

    /// Class index is stored in the first channel; the other two mirror it.
    pub fn save_png(&self, path: &Path) -> Result<()> {
        let mut bytes = Vec::with_capacity(self.data.len() * 3);
        for &c in &self.data {
            bytes.extend_from_slice(&[c, c, c]);
        }
        let rgb = image::RgbImage::from_raw(self.width as u32, self.height as u32, bytes)
            .ok_or_else(|| Error::shape("parsing buffer size"))?;
        let mut out = Vec::new();
        rgb.write_to(&mut std::io::Cursor::new(&mut out), image::ImageFormat::Png)?;
        crate::cli::fsutil::write_atomic(path, &out)
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let dynimg = image::open(path).map_err(|e| Error::record(path, e.to_string()))?;
        let rgb = dynimg.to_rgb8();
        let (w, h) = rgb.dimensions();
        let data = rgb.pixels().map(|p| p.0[0]).collect();
        Ok(Self {
            height: h as usize,
            width: w as usize,
            data,
        })
    }
}

/// `H×W` grid of {0,1}.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl BinaryMask {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::shape("mask buffer size"));
        }
        if let Some(v) = data.iter().find(|&&v| v > 1) {
            return Err(Error::validation(format!("mask value {v} is not binary")));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![0; height * width],
        }
    }

    pub fn ones(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![1; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                data.push(f(y, x) as u8);
            }
        }
        Self {
            height,
            width,
            data,
        }
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.data[y * self.width + x]
    }

    pub fn count_ones(&self) -> usize {
        self.data.iter().map(|&v| v as usize).sum()
    }

    /// Elementwise product of two masks.
    pub fn and(&self, other: &BinaryMask) -> Result<BinaryMask> {
        if self.dims() != other.dims() {
            return Err(Error::shape("mask dims differ"));
        }
        Ok(BinaryMask {
            height: self.height,
            width: self.width,
            data: self.data.iter().zip(&other.data).map(|(a, b)| a * b).collect(),
        })
    }

    pub(crate) fn map(&self, f: impl Fn(u8) -> u8) -> BinaryMask {
        BinaryMask {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tensor_round_trip_preserves_layout() {
        let img = Image::from_fn(3, 4, 3, |y, x, c| (y * 100 + x * 10 + c) as f32 / 1000.0);
        let t = img.to_tensor(DType::F32, &Device::Cpu).unwrap();
        assert_eq!(t.dims(), &[1, 3, 4, 3]);
        let back = Image::batch_from_tensor(&t).unwrap();
        assert_eq!(back[0], img);
    }

    #[test]
    fn quantized_matches_png_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let img = Image::from_fn(5, 7, 3, |y, x, c| ((y * 7 + x) * 3 + c) as f32 / 105.0);
        let p = dir.path().join("a.png");
        img.save_png(&p).unwrap();
        assert_eq!(Image::load_png(&p).unwrap(), img.quantized());
    }

    #[test]
    fn parsing_png_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let map = ParsingMap::new(2, 3, vec![0, 1, 2, 6, 18, 3]).unwrap();
        let p = dir.path().join("m.png");
        map.save_png(&p).unwrap();
        assert_eq!(ParsingMap::load_png(&p).unwrap(), map);
        assert!(map.validate_classes(19).is_ok());
        assert!(map.validate_classes(7).is_err());
    }

    #[test]
    fn mask_rejects_non_binary() {
        assert!(BinaryMask::new(1, 2, vec![0, 2]).is_err());
    }
}
