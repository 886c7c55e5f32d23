//! RGB images in CHW layout with values in `[0, 1]`, and PNG I/O.

use std::path::Path;

use base64::Engine;

use crate::error::{Error, Result};
use crate::numcore::Tensor;

/// Three-channel CHW image. Values are clamped to `[0, 1]` on the way in
/// and on the way out.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageTensor {
    width: usize,
    height: usize,
    data: Vec<f32>,
}

const LUMA: [f32; 3] = [0.299, 0.587, 0.114];

impl ImageTensor {
    pub fn new(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != 3 * width * height {
            return Err(Error::Image(format!(
                "{width}x{height} RGB needs {} values, got {}",
                3 * width * height,
                data.len()
            )));
        }
        if data.iter().any(|v| v.is_nan()) {
            return Err(Error::Image("NaN pixel".into()));
        }
        Ok(Self {
            width,
            height,
            data: data.into_iter().map(|v| v.clamp(0.0, 1.0)).collect(),
        })
    }

    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(3 * width * height);
        for c in 0..3 {
            for y in 0..height {
                for x in 0..width {
                    data.push(f(c, y, x).clamp(0.0, 1.0));
                }
            }
        }
        Self { width, height, data }
    }

    /// Accepts `[3, H, W]` or `[1, 3, H, W]`.
    pub fn from_tensor(t: &Tensor<f32>) -> Result<Self> {
        let s = t.shape();
        let (h, w) = match s {
            [3, h, w] | [1, 3, h, w] => (*h, *w),
            _ => return Err(Error::shape("image", format!("expected [3,H,W], got {s:?}"))),
        };
        Self::new(w, h, t.to_vec())
    }

    pub fn to_tensor(&self) -> Tensor<f32> {
        Tensor::new(&[3, self.height, self.width], self.data.clone()).expect("consistent size")
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    /// Rec. 601 luma per pixel, row-major.
    pub fn luma(&self) -> Vec<f32> {
        let n = self.width * self.height;
        (0..n)
            .map(|i| LUMA[0] * self.data[i] + LUMA[1] * self.data[n + i] + LUMA[2] * self.data[2 * n + i])
            .collect()
    }

    pub fn mean_luma(&self) -> f64 {
        let l = self.luma();
        l.iter().map(|&v| v as f64).sum::<f64>() / l.len().max(1) as f64
    }

    /// Central `width x height` window; the offset rounds down.
    pub fn center_crop(&self, width: usize, height: usize) -> Result<Self> {
        if width > self.width || height > self.height {
            return Err(Error::Image(format!(
                "cannot crop {}x{} to {width}x{height}",
                self.width, self.height
            )));
        }
        let (ox, oy) = ((self.width - width) / 2, (self.height - height) / 2);
        Ok(Self::from_fn(width, height, |c, y, x| self.get(c, y + oy, x + ox)))
    }

    pub fn to_rgb8(&self) -> Vec<u8> {
        let n = self.width * self.height;
        let mut out = Vec::with_capacity(3 * n);
        for i in 0..n {
            for c in 0..3 {
                out.push((self.data[c * n + i] * 255.0).round() as u8);
            }
        }
        out
    }

    pub fn from_rgb8(width: usize, height: usize, rgb: &[u8]) -> Result<Self> {
        let n = width * height;
        if rgb.len() != 3 * n {
            return Err(Error::Image("RGB buffer size mismatch".into()));
        }
        Ok(Self::from_fn(width, height, |c, y, x| rgb[(y * width + x) * 3 + c] as f32 / 255.0))
    }

    pub fn to_png_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        let buf = image::RgbImage::from_raw(self.width as u32, self.height as u32, self.to_rgb8())
            .ok_or_else(|| Error::Image("buffer size".into()))?;
        buf.write_to(&mut std::io::Cursor::new(&mut out), image::ImageFormat::Png)
            .map_err(|e| Error::Image(e.to_string()))?;
        Ok(out)
    }

    /// Any PNG colour type is converted to 8-bit RGB.
    pub fn from_png_bytes(bytes: &[u8]) -> Result<Self> {
        let img = image::load_from_memory_with_format(bytes, image::ImageFormat::Png)
            .map_err(|e| Error::Image(e.to_string()))?
            .to_rgb8();
        Self::from_rgb8(img.width() as usize, img.height() as usize, img.as_raw())
    }

    pub fn read_png(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_png_bytes(&bytes).map_err(|e| Error::Image(format!("{}: {e}", path.display())))
    }

    pub fn write_png(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_png_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn to_png_b64(&self) -> Result<String> {
        Ok(base64::engine::general_purpose::STANDARD.encode(self.to_png_bytes()?))
    }

    pub fn from_png_b64(s: &str) -> Result<Self> {
        let bytes = base64::engine::general_purpose::STANDARD
            .decode(s.trim())
            .map_err(|e| Error::Image(format!("invalid base64: {e}")))?;
        Self::from_png_bytes(&bytes)
    }

    /// Quantize through 8 bits, as a PNG round trip would.
    pub fn quantized(&self) -> Self {
        Self {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|v| (v * 255.0).round() / 255.0).collect(),
        }
    }
}
