use std::io::{Read, Write};
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use image::RgbImage;

use crate::error::{Error, Result};

/// Side length of the aligned face canvas.
pub const FACE_SIZE: usize = 128;

/// An RGB face in HWC layout with values in `[-1, 1]`.
///
/// Aligned faces are always 128x128; smaller square canvases exist for
/// compact model configurations and patches.
#[derive(Clone, Debug, PartialEq)]
pub struct FaceImage {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl FaceImage {
    /// A canonical 128x128x3 face.
    pub fn new(data: Vec<f32>) -> Result<Self> {
        Self::with_size(FACE_SIZE, FACE_SIZE, data)
    }

    pub fn with_size(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != height * width * 3 {
            return Err(Error::shape(
                format!("{height}x{width}x3 = {}", height * width * 3),
                data.len(),
            ));
        }
        if let Some(v) = data.iter().find(|v| !(-1.0..=1.0).contains(*v)) {
            return Err(Error::InvalidValue(format!("pixel value {v} outside [-1, 1]")));
        }
        Ok(Self { height, width, data })
    }

    pub fn filled(height: usize, width: usize, value: f32) -> Result<Self> {
        Self::with_size(height, width, vec![value; height * width * 3])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn is_canonical(&self) -> bool {
        self.height == FACE_SIZE && self.width == FACE_SIZE
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn get(&self, row: usize, col: usize, ch: usize) -> f32 {
        self.data[(row * self.width + col) * 3 + ch]
    }

    pub fn set(&mut self, row: usize, col: usize, ch: usize, value: f32) {
        self.data[(row * self.width + col) * 3 + ch] = value.clamp(-1.0, 1.0);
    }

    /// `pixel / 127.5 - 1`.
    pub fn from_rgb8(img: &RgbImage) -> Self {
        let data = img.as_raw().iter().map(|&p| p as f32 / 127.5 - 1.0).collect();
        Self {
            height: img.height() as usize,
            width: img.width() as usize,
            data,
        }
    }

    pub fn to_rgb8(&self) -> RgbImage {
        let raw = self
            .data
            .iter()
            .map(|v| ((v + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8)
            .collect();
        RgbImage::from_raw(self.width as u32, self.height as u32, raw).expect("buffer matches dims")
    }

    /// `1 x 3 x H x W` tensor.
    pub fn to_tensor(&self, dtype: DType) -> Result<Tensor> {
        Self::batch_to_tensor(std::slice::from_ref(self), dtype)
    }

    /// Stacks same-sized faces into an `N x 3 x H x W` tensor.
    pub fn batch_to_tensor(faces: &[FaceImage], dtype: DType) -> Result<Tensor> {
        let first = faces
            .first()
            .ok_or_else(|| Error::InvalidValue("empty face batch".into()))?;
        let (h, w) = (first.height, first.width);
        let mut data = Vec::with_capacity(faces.len() * h * w * 3);
        for f in faces {
            if (f.height, f.width) != (h, w) {
                return Err(Error::shape(format!("{h}x{w}"), format!("{}x{}", f.height, f.width)));
            }
            data.extend_from_slice(&f.data);
        }
        let t = Tensor::from_vec(data, (faces.len(), h, w, 3), &Device::Cpu)?
            .permute((0, 3, 1, 2))?
            .contiguous()?;
        Ok(t.to_dtype(dtype)?)
    }

    /// Splits an `N x 3 x H x W` tensor back into faces, clamping to `[-1, 1]`.
    pub fn from_tensor(t: &Tensor) -> Result<Vec<FaceImage>> {
        let (n, c, h, w) = t.dims4()?;
        if c != 3 {
            return Err(Error::shape("3 channels", c));
        }
        let hwc = t
            .to_dtype(DType::F32)?
            .permute((0, 2, 3, 1))?
            .contiguous()?
            .flatten_all()?
            .to_vec1::<f32>()?;
        Ok(hwc
            .chunks(h * w * 3)
            .take(n)
            .map(|chunk| FaceImage {
                height: h,
                width: w,
                data: chunk.iter().map(|v| v.clamp(-1.0, 1.0)).collect(),
            })
            .collect())
    }

    /// Box-filter reduction to `size x size`; `size` must divide both sides
    /// by the same factor.
    pub fn downscale(&self, size: usize) -> Result<Self> {
        if size == 0 || self.height % size != 0 || self.width != self.height {
            return Err(Error::shape(format!("square face divisible by {size}"), format!("{}x{}", self.height, self.width)));
        }
        let f = self.height / size;
        if f == 1 {
            return Ok(self.clone());
        }
        let norm = (f * f) as f32;
        let mut data = Vec::with_capacity(size * size * 3);
        for r in 0..size {
            for c in 0..size {
                for ch in 0..3 {
                    let mut s = 0.0;
                    for dr in 0..f {
                        for dc in 0..f {
                            s += self.get(r * f + dr, c * f + dc, ch);
                        }
                    }
                    data.push((s / norm).clamp(-1.0, 1.0));
                }
            }
        }
        Self::with_size(size, size, data)
    }

    /// Raw little-endian cache format: `u32 height, u32 width, f32 data...`.
    pub fn write_raw(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::with_capacity(8 + self.data.len() * 4);
        buf.extend_from_slice(&(self.height as u32).to_le_bytes());
        buf.extend_from_slice(&(self.width as u32).to_le_bytes());
        for v in &self.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        std::fs::File::create(path)?.write_all(&buf)?;
        Ok(())
    }

    pub fn read_raw(path: &Path) -> Result<Self> {
        let mut buf = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut buf)?;
        let corrupt = |reason: &str| Error::Corrupt {
            path: path.to_path_buf(),
            reason: reason.to_string(),
        };
        if buf.len() < 8 {
            return Err(corrupt("truncated header"));
        }
        let h = u32::from_le_bytes(buf[0..4].try_into().unwrap()) as usize;
        let w = u32::from_le_bytes(buf[4..8].try_into().unwrap()) as usize;
        if buf.len() != 8 + h * w * 12 {
            return Err(corrupt("payload size does not match header"));
        }
        let data = buf[8..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Self::with_size(h, w, data)
    }
}
