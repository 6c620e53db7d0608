//! Normalized RGB images, file I/O, resizing and synthetic darkening.

use std::fs;
use std::path::Path;

use image::{ColorType, DynamicImage, ImageFormat, RgbImage};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ImageError {
    #[error("cannot read {path}: {source}")]
    Read {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("cannot decode {path}: {message}")]
    Decode { path: String, message: String },
    #[error("unsupported pixel format {format} in {path}; expected 8-bit RGB or grayscale")]
    UnsupportedFormat { path: String, format: String },
    #[error("cannot write {path}: {message}")]
    Write { path: String, message: String },
    #[error("invalid image: {0}")]
    Invalid(String),
}

/// An H×W RGB image with channel values in `[0, 1]`, stored row-major with
/// interleaved channels.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl ImageTensor {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self, ImageError> {
        if height == 0 || width == 0 {
            return Err(ImageError::Invalid(format!(
                "dimensions must be positive, got {height}x{width}"
            )));
        }
        if data.len() != height * width * 3 {
            return Err(ImageError::Invalid(format!(
                "expected {} values for {height}x{width}x3, got {}",
                height * width * 3,
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(ImageError::Invalid(format!("value {v} outside [0, 1]")));
        }
        Ok(Self { height, width, data })
    }

    /// Builds an image from a per-pixel function returning `[r, g, b]`.
    /// Values are clamped into `[0, 1]`.
    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> [f64; 3]) -> Self {
        assert!(height > 0 && width > 0, "image dimensions must be positive");
        let mut data = Vec::with_capacity(height * width * 3);
        for y in 0..height {
            for x in 0..width {
                data.extend(f(y, x).iter().map(|v| v.clamp(0.0, 1.0)));
            }
        }
        Self { height, width, data }
    }

    pub fn uniform(height: usize, width: usize, value: f64) -> Self {
        Self::from_fn(height, width, |_, _| [value; 3])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixel_count(&self) -> usize {
        self.height * self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn pixel(&self, y: usize, x: usize) -> [f64; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn pixels(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(3)
    }

    /// Per-pixel luminance, taken as the mean of the three channels. Gray
    /// pixels map to their channel value exactly.
    pub fn luminance(&self) -> Vec<f64> {
        self.pixels()
            .map(|p| p[0] + ((p[1] - p[0]) + (p[2] - p[0])) / 3.0)
            .collect()
    }

    pub fn mean_luminance(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    /// Mean of each channel over the whole image.
    pub fn channel_means(&self) -> [f64; 3] {
        let mut sums = [0.0; 3];
        for p in self.pixels() {
            for c in 0..3 {
                sums[c] += p[c];
            }
        }
        let n = self.pixel_count() as f64;
        sums.map(|s| s / n)
    }

    /// Channel-major `[3, H, W]` copy of the data, the layout the networks use.
    pub fn to_planar(&self) -> Vec<f64> {
        let n = self.pixel_count();
        let mut out = vec![0.0; 3 * n];
        for (i, p) in self.pixels().enumerate() {
            for c in 0..3 {
                out[c * n + i] = p[c];
            }
        }
        out
    }

    /// Applies `f` to every channel value, clamping the result into `[0, 1]`.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| f(v).clamp(0.0, 1.0)).collect(),
        }
    }

    /// Bytes identifying the image content, used as a cache key.
    pub fn content_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + self.data.len() * 8);
        out.extend((self.height as u64).to_le_bytes());
        out.extend((self.width as u64).to_le_bytes());
        for v in &self.data {
            out.extend(v.to_bits().to_le_bytes());
        }
        out
    }

    pub fn to_rgb8(&self) -> RgbImage {
        let bytes = self.data.iter().map(|&v| quantize(v)).collect();
        RgbImage::from_raw(self.width as u32, self.height as u32, bytes).expect("buffer length matches dimensions")
    }

    pub fn from_rgb8(img: &RgbImage) -> Self {
        let (w, h) = img.dimensions();
        Self {
            height: h as usize,
            width: w as usize,
            data: img.as_raw().iter().map(|&b| f64::from(b) / 255.0).collect(),
        }
    }
}

fn quantize(v: f64) -> u8 {
    (v * 255.0).round().clamp(0.0, 255.0) as u8
}

/// Reads an 8-bit PNG or binary PPM (P6). Grayscale is replicated to three
/// channels and any alpha channel is dropped.
pub fn load_image(path: &Path) -> Result<ImageTensor, ImageError> {
    let shown = path.display().to_string();
    let bytes = fs::read(path).map_err(|source| ImageError::Read {
        path: shown.clone(),
        source,
    })?;
    let format = match image::guess_format(&bytes) {
        Ok(f @ (ImageFormat::Png | ImageFormat::Pnm)) => f,
        Ok(other) => {
            return Err(ImageError::UnsupportedFormat {
                path: shown,
                format: format!("{other:?}"),
            })
        }
        Err(e) => {
            return Err(ImageError::Decode {
                path: shown,
                message: e.to_string(),
            })
        }
    };
    let decoded = image::load_from_memory_with_format(&bytes, format).map_err(|e| ImageError::Decode {
        path: shown.clone(),
        message: e.to_string(),
    })?;
    let rgb = match decoded.color() {
        ColorType::Rgb8 | ColorType::Rgba8 | ColorType::L8 | ColorType::La8 => decoded.to_rgb8(),
        other => {
            return Err(ImageError::UnsupportedFormat {
                path: shown,
                format: format!("{other:?}"),
            })
        }
    };
    Ok(ImageTensor::from_rgb8(&rgb))
}

/// Writes an 8-bit RGB PNG, quantizing each value as `round(v * 255)`.
pub fn save_image(img: &ImageTensor, path: &Path) -> Result<(), ImageError> {
    DynamicImage::ImageRgb8(img.to_rgb8())
        .save_with_format(path, ImageFormat::Png)
        .map_err(|e| ImageError::Write {
            path: path.display().to_string(),
            message: e.to_string(),
        })
}

/// Bilinear resize with half-pixel centers and edge clamping.
pub fn resize(img: &ImageTensor, height: usize, width: usize) -> ImageTensor {
    assert!(height > 0 && width > 0, "target dimensions must be positive");
    let sy = img.height as f64 / height as f64;
    let sx = img.width as f64 / width as f64;
    let taps = |dst: usize, scale: f64, len: usize| {
        let src = ((dst as f64 + 0.5) * scale - 0.5).max(0.0);
        let i0 = (src.floor() as usize).min(len - 1);
        let i1 = (i0 + 1).min(len - 1);
        let t = (src - i0 as f64).clamp(0.0, 1.0);
        (i0, i1, t)
    };
    ImageTensor::from_fn(height, width, |y, x| {
        let (y0, y1, ty) = taps(y, sy, img.height);
        let (x0, x1, tx) = taps(x, sx, img.width);
        let (a, b) = (img.pixel(y0, x0), img.pixel(y0, x1));
        let (c, d) = (img.pixel(y1, x0), img.pixel(y1, x1));
        let mut out = [0.0; 3];
        for ch in 0..3 {
            // Constant inputs stay exactly constant: every lerp of equal values is exact.
            let top = lerp(a[ch], b[ch], tx);
            let bottom = lerp(c[ch], d[ch], tx);
            out[ch] = lerp(top, bottom, ty);
        }
        out
    })
}

fn lerp(a: f64, b: f64, t: f64) -> f64 {
    if a == b {
        a
    } else {
        a + (b - a) * t
    }
}

/// Darkens an image as `scale * img^gamma`.
pub fn synth_darken(img: &ImageTensor, gamma: f64, scale: f64) -> ImageTensor {
    assert!(gamma > 0.0, "gamma must be positive");
    assert!(scale > 0.0 && scale <= 1.0, "scale must lie in (0, 1]");
    img.map(|v| scale * v.powf(gamma))
}
