//! JPEG-style pixel-domain degradation.
//!
//! Runs the lossy part of a baseline JPEG encoder/decoder pair: YCbCr,
//! 4:2:0 chroma (2×2 mean down, nearest up), 8×8 orthonormal DCT-II and
//! quantization with IJG quality scaling. No bitstream is produced.

use std::sync::OnceLock;

use super::color::{image_from_ycbcr, ycbcr_planes};
use super::resize::bicubic_resize;
use super::{ImageError, ImageU8};

/// Annex K luminance table, row-major.
pub const BASE_LUMA: [u16; 64] = [
    16, 11, 10, 16, 24, 40, 51, 61, //
    12, 12, 14, 19, 26, 58, 60, 55, //
    14, 13, 16, 24, 40, 57, 69, 56, //
    14, 17, 22, 29, 51, 87, 80, 62, //
    18, 22, 37, 56, 68, 109, 103, 77, //
    24, 35, 55, 64, 81, 104, 113, 92, //
    49, 64, 78, 87, 103, 121, 120, 101, //
    72, 92, 95, 98, 112, 100, 103, 99,
];

/// Annex K chrominance table, row-major.
pub const BASE_CHROMA: [u16; 64] = [
    17, 18, 24, 47, 99, 99, 99, 99, //
    18, 21, 26, 66, 99, 99, 99, 99, //
    24, 26, 56, 99, 99, 99, 99, 99, //
    47, 66, 99, 99, 99, 99, 99, 99, //
    99, 99, 99, 99, 99, 99, 99, 99, //
    99, 99, 99, 99, 99, 99, 99, 99, //
    99, 99, 99, 99, 99, 99, 99, 99, //
    99, 99, 99, 99, 99, 99, 99, 99,
];

/// Quality-scaled quantization tables; every entry lies in `1..=255`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QuantTables {
    pub luma: [u16; 64],
    pub chroma: [u16; 64],
}

/// IJG scaling percentage: `5000 / qf` below 50, `200 - 2 qf` otherwise
/// (integer arithmetic).
pub fn quality_scale(qf: u32) -> Result<u32, ImageError> {
    if !(1..=100).contains(&qf) {
        return Err(ImageError::Quality(qf));
    }
    Ok(if qf < 50 { 5000 / qf } else { 200 - 2 * qf })
}

fn scale_table(base: &[u16; 64], s: u32) -> [u16; 64] {
    base.map(|q| ((u32::from(q) * s + 50) / 100).clamp(1, 255) as u16)
}

impl QuantTables {
    pub fn for_quality(qf: u32) -> Result<Self, ImageError> {
        let s = quality_scale(qf)?;
        Ok(QuantTables {
            luma: scale_table(&BASE_LUMA, s),
            chroma: scale_table(&BASE_CHROMA, s),
        })
    }

    /// All-ones tables: only rounding of DCT coefficients remains.
    pub fn unit() -> Self {
        QuantTables {
            luma: [1; 64],
            chroma: [1; 64],
        }
    }
}

fn dct_basis() -> &'static [[f64; 8]; 8] {
    static BASIS: OnceLock<[[f64; 8]; 8]> = OnceLock::new();
    BASIS.get_or_init(|| {
        std::array::from_fn(|u| {
            let alpha = if u == 0 { (1.0f64 / 8.0).sqrt() } else { 0.5 };
            std::array::from_fn(|i| alpha * (((2 * i + 1) * u) as f64 * std::f64::consts::PI / 16.0).cos())
        })
    })
}

/// Orthonormal 2D DCT-II of a row-major 8×8 block.
pub fn dct8x8(block: &[f64; 64]) -> [f64; 64] {
    let m = dct_basis();
    let mut tmp = [0.0; 64];
    for u in 0..8 {
        for j in 0..8 {
            tmp[u * 8 + j] = (0..8).map(|i| m[u][i] * block[i * 8 + j]).sum();
        }
    }
    let mut out = [0.0; 64];
    for u in 0..8 {
        for v in 0..8 {
            out[u * 8 + v] = (0..8).map(|j| tmp[u * 8 + j] * m[v][j]).sum();
        }
    }
    out
}

/// Inverse of [`dct8x8`].
pub fn idct8x8(coef: &[f64; 64]) -> [f64; 64] {
    let m = dct_basis();
    let mut tmp = [0.0; 64];
    for i in 0..8 {
        for v in 0..8 {
            tmp[i * 8 + v] = (0..8).map(|u| m[u][i] * coef[u * 8 + v]).sum();
        }
    }
    let mut out = [0.0; 64];
    for i in 0..8 {
        for j in 0..8 {
            out[i * 8 + j] = (0..8).map(|v| tmp[i * 8 + v] * m[v][j]).sum();
        }
    }
    out
}

/// Quantizes and dequantizes one block in place (values already level-shifted).
fn quantize_block(block: &mut [f64; 64], table: &[u16; 64]) {
    let coef = dct8x8(block);
    let q: [f64; 64] = std::array::from_fn(|k| {
        let step = f64::from(table[k]);
        // f64::round rounds half away from zero
        (coef[k] / step).round() * step
    });
    *block = idct8x8(&q);
}

/// Blockwise DCT quantization of one plane; borders are edge-replicated to
/// a multiple of 8 and cropped afterwards.
pub fn process_plane(plane: &[f64], h: usize, w: usize, table: &[u16; 64]) -> Vec<f64> {
    let mut out = vec![0.0; h * w];
    for by in (0..h).step_by(8) {
        for bx in (0..w).step_by(8) {
            let mut block: [f64; 64] = std::array::from_fn(|k| {
                let y = (by + k / 8).min(h - 1);
                let x = (bx + k % 8).min(w - 1);
                plane[y * w + x] - 128.0
            });
            quantize_block(&mut block, table);
            for k in 0..64 {
                let (y, x) = (by + k / 8, bx + k % 8);
                if y < h && x < w {
                    out[y * w + x] = block[k] + 128.0;
                }
            }
        }
    }
    out
}

fn subsample(plane: &[f64], h: usize, w: usize) -> (Vec<f64>, usize, usize) {
    let (sh, sw) = (h.div_ceil(2), w.div_ceil(2));
    let at = |y: usize, x: usize| plane[y.min(h - 1) * w + x.min(w - 1)];
    let sub = (0..sh * sw)
        .map(|k| {
            let (y, x) = (2 * (k / sw), 2 * (k % sw));
            (at(y, x) + at(y, x + 1) + at(y + 1, x) + at(y + 1, x + 1)) / 4.0
        })
        .collect();
    (sub, sh, sw)
}

fn upsample_nearest(sub: &[f64], sw: usize, h: usize, w: usize) -> Vec<f64> {
    (0..h * w).map(|k| sub[(k / w / 2) * sw + (k % w) / 2]).collect()
}

/// Degrades `img` with explicit quantization tables.
pub fn compress_with_tables(img: &ImageU8, tables: &QuantTables) -> ImageU8 {
    let (h, w) = (img.height(), img.width());
    if h == 0 || w == 0 {
        return img.clone();
    }
    let [y, cb, cr] = ycbcr_planes(img);
    let y = process_plane(&y, h, w, &tables.luma);
    let chroma = |p: Vec<f64>| {
        let (sub, sh, sw) = subsample(&p, h, w);
        let sub = process_plane(&sub, sh, sw, &tables.chroma);
        upsample_nearest(&sub, sw, h, w)
    };
    image_from_ycbcr(h, w, &[y, chroma(cb), chroma(cr)])
}

/// JPEG-style degradation at quality factor `qf` (1..=100).
pub fn jpeg_like_compress(img: &ImageU8, qf: u32) -> Result<ImageU8, ImageError> {
    Ok(compress_with_tables(img, &QuantTables::for_quality(qf)?))
}

/// Degradation protocol: bicubic downscale by `scale`, then compression at `qf`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DegradeSpec {
    pub scale: usize,
    pub qf: u32,
}

/// Quality factors used by the training protocol.
pub const PROTOCOL_QF: [u32; 3] = [10, 20, 30];

impl DegradeSpec {
    pub fn new(scale: usize, qf: u32) -> Result<Self, ImageError> {
        quality_scale(qf)?;
        if scale == 0 {
            return Err(ImageError::Extent("scale must be positive".into()));
        }
        if !PROTOCOL_QF.contains(&qf) {
            log::warn!("quality factor {qf} is outside the 10/20/30 protocol");
        }
        Ok(DegradeSpec { scale, qf })
    }
}

impl Default for DegradeSpec {
    fn default() -> Self {
        DegradeSpec { scale: 4, qf: 10 }
    }
}

/// Produces the compressed low-resolution counterpart of `hr`.
pub fn degrade(hr: &ImageU8, spec: &DegradeSpec) -> Result<ImageU8, ImageError> {
    let (h, w) = (hr.height() / spec.scale, hr.width() / spec.scale);
    let lr = bicubic_resize(hr, h, w)?;
    jpeg_like_compress(&lr, spec.qf)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quality_fifty_keeps_base_tables() {
        let t = QuantTables::for_quality(50).unwrap();
        assert_eq!(t.luma, BASE_LUMA);
        assert_eq!(t.chroma, BASE_CHROMA);
    }

    #[test]
    fn quality_extremes() {
        assert!(QuantTables::for_quality(100).unwrap().luma.iter().all(|&q| q == 1));
        assert!(QuantTables::for_quality(1).unwrap().luma.iter().all(|&q| (1..=255).contains(&q)));
        assert!(matches!(QuantTables::for_quality(0), Err(ImageError::Quality(0))));
        assert!(matches!(QuantTables::for_quality(101), Err(ImageError::Quality(101))));
        // qf 10: s = 500, q' = floor((16*500+50)/100) = 80
        assert_eq!(QuantTables::for_quality(10).unwrap().luma[0], 80);
    }

    #[test]
    fn tables_monotone_in_quality() {
        let mut prev = QuantTables::for_quality(1).unwrap();
        for qf in 2..=100 {
            let t = QuantTables::for_quality(qf).unwrap();
            for k in 0..64 {
                assert!(t.luma[k] <= prev.luma[k] && t.chroma[k] <= prev.chroma[k], "qf {qf}");
            }
            prev = t;
        }
    }

    #[test]
    fn constant_block_has_only_dc() {
        let block = [37.0; 64];
        let c = dct8x8(&block);
        assert!((c[0] - 37.0 * 8.0).abs() < 1e-12);
        assert!(c[1..].iter().all(|v| v.abs() < 1e-12));
        let back = idct8x8(&c);
        assert!(back.iter().all(|v| (v - 37.0).abs() < 1e-12));
    }

    #[test]
    fn unit_tables_round_only() {
        // 2×2-constant pixels make the chroma mean exact, isolating DCT rounding.
        let img = ImageU8::from_fn(19, 13, |y, x| {
            let (y, x) = (y / 2, x / 2);
            [((y * 37 + x * 11) % 256) as u8, ((x * 53 + 7) % 256) as u8, ((y * x * 3) % 256) as u8]
        });
        let out = compress_with_tables(&img, &QuantTables::unit());
        let worst = img
            .data()
            .iter()
            .zip(out.data())
            .map(|(a, b)| (i32::from(*a) - i32::from(*b)).abs())
            .max()
            .unwrap();
        assert!(worst <= 1, "worst {worst}");
    }

    #[test]
    fn deterministic_and_shape_preserving() {
        let img = ImageU8::from_fn(21, 30, |y, x| [(x * 8) as u8, (y * 12) as u8, ((x + y) * 4) as u8]);
        let a = jpeg_like_compress(&img, 10).unwrap();
        let b = jpeg_like_compress(&img, 10).unwrap();
        assert_eq!(a, b);
        assert_eq!((a.height(), a.width()), (21, 30));
        let lr = degrade(&img, &DegradeSpec::new(4, 20).unwrap()).unwrap();
        assert_eq!((lr.height(), lr.width()), (5, 7));
    }
}
