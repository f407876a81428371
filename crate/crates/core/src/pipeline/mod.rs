//! Image I/O, degradation and quality metrics.

pub mod augment;
pub mod color;
pub mod jpeg;
pub mod metrics;
pub mod pnm;
pub mod resize;

use thiserror::Error;

use crate::tensor::{Element, Tensor};

pub use augment::{crop, crop_and_augment, Dihedral};
pub use color::{rgb_to_ycbcr, ycbcr_to_rgb};
pub use jpeg::{degrade, jpeg_like_compress, DegradeSpec, QuantTables};
pub use metrics::{psnr_y, ssim, PSNR_CAP_DB};
pub use pnm::{read_pgm, read_ppm, write_pgm, write_ppm};
pub use resize::bicubic_resize;

#[derive(Debug, Error)]
pub enum ImageError {
    #[error("parse error at byte {offset}: {msg}")]
    Parse { offset: usize, msg: String },
    #[error("invalid extents: {0}")]
    Extent(String),
    #[error("image extents differ: {0}x{1} vs {2}x{3}")]
    Mismatch(usize, usize, usize, usize),
    #[error("quality factor {0} outside 1..=100")]
    Quality(u32),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// 8-bit interleaved RGB raster.
#[derive(Clone, PartialEq, Eq)]
pub struct ImageU8 {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl std::fmt::Debug for ImageU8 {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "ImageU8({}x{})", self.height, self.width)
    }
}

impl ImageU8 {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self, ImageError> {
        if data.len() != height * width * 3 {
            return Err(ImageError::Extent(format!(
                "{height}x{width}x3 needs {} samples, got {}",
                height * width * 3,
                data.len()
            )));
        }
        Ok(ImageU8 { height, width, data })
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> [u8; 3]) -> Self {
        let mut data = Vec::with_capacity(height * width * 3);
        for y in 0..height {
            for x in 0..width {
                data.extend_from_slice(&f(y, x));
            }
        }
        ImageU8 { height, width, data }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn pixel(&self, y: usize, x: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    /// Channel planes as floats in `0..=255`.
    pub fn planes_f64(&self) -> [Vec<f64>; 3] {
        std::array::from_fn(|c| self.data.iter().skip(c).step_by(3).map(|&v| f64::from(v)).collect())
    }

    /// Rounds and clamps three float planes into an image.
    pub fn from_planes_f64(height: usize, width: usize, planes: &[Vec<f64>]) -> Self {
        let mut data = Vec::with_capacity(height * width * 3);
        for i in 0..height * width {
            for p in planes.iter().take(3) {
                data.push(to_u8(p[i]));
            }
        }
        ImageU8 { height, width, data }
    }

    /// `[1, 3, H, W]` tensor scaled to `[0, 1]`.
    pub fn to_tensor<T: Element>(&self) -> Tensor<T> {
        let planes = self.planes_f64();
        let data = planes
            .iter()
            .flat_map(|p| p.iter().map(|&v| T::from_f64_lossy(v / 255.0)))
            .collect();
        Tensor::new(vec![1, 3, self.height, self.width], data).expect("shape matches")
    }

    /// Inverse of [`ImageU8::to_tensor`] for the first batch item; values are
    /// scaled by 255, rounded and clamped.
    pub fn from_tensor<T: Element>(t: &Tensor<T>) -> Result<Self, ImageError> {
        let (c, h, w) = match *t.shape() {
            [_, c, h, w] => (c, h, w),
            ref s => return Err(ImageError::Extent(format!("expected NCHW tensor, got {s:?}"))),
        };
        if c != 3 {
            return Err(ImageError::Extent(format!("expected 3 channels, got {c}")));
        }
        let planes: Vec<Vec<f64>> = (0..3)
            .map(|k| t.data()[k * h * w..(k + 1) * h * w].iter().map(|v| v.as_f64() * 255.0).collect())
            .collect();
        Ok(Self::from_planes_f64(h, w, &planes))
    }
}

pub(crate) fn to_u8(v: f64) -> u8 {
    v.round().clamp(0.0, 255.0) as u8
}

/// 8-bit single-channel raster, used for heatmaps.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GrayU8 {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl GrayU8 {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self, ImageError> {
        if data.len() != height * width {
            return Err(ImageError::Extent(format!(
                "{height}x{width} needs {} samples, got {}",
                height * width,
                data.len()
            )));
        }
        Ok(GrayU8 { height, width, data })
    }

    /// Maps `values` linearly so that the maximum becomes 255.
    pub fn from_heatmap(height: usize, width: usize, values: &[f64]) -> Result<Self, ImageError> {
        let max = values.iter().copied().fold(0.0, f64::max);
        let scale = if max > 0.0 { 255.0 / max } else { 0.0 };
        Self::new(height, width, values.iter().map(|&v| to_u8(v * scale)).collect())
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }
}
