//! PSNR and SSIM on the luma plane.

use super::color::y_plane;
use super::{ImageError, ImageU8};

/// Reported PSNR for identical images.
pub const PSNR_CAP_DB: f64 = 100.0;

/// Header of metric report files.
pub const METRICS_CSV_HEADER: &str = "file,psnr_y_db,ssim";

fn same_extent(a: &ImageU8, b: &ImageU8) -> Result<(), ImageError> {
    if a.height() != b.height() || a.width() != b.width() {
        return Err(ImageError::Mismatch(a.height(), a.width(), b.height(), b.width()));
    }
    Ok(())
}

/// PSNR from a mean squared error on the 0..255 scale.
pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse <= 0.0 {
        PSNR_CAP_DB
    } else {
        (10.0 * (255.0f64 * 255.0 / mse).log10()).min(PSNR_CAP_DB)
    }
}

pub fn mse_y(a: &ImageU8, b: &ImageU8) -> Result<f64, ImageError> {
    same_extent(a, b)?;
    let (ya, yb) = (y_plane(a), y_plane(b));
    let n = ya.len().max(1) as f64;
    Ok(ya.iter().zip(&yb).map(|(p, q)| (p - q) * (p - q)).sum::<f64>() / n)
}

pub fn psnr_y(a: &ImageU8, b: &ImageU8) -> Result<f64, ImageError> {
    Ok(psnr_from_mse(mse_y(a, b)?))
}

const WIN: usize = 11;
const SIGMA: f64 = 1.5;
const K1: f64 = 0.01;
const K2: f64 = 0.03;
const L: f64 = 255.0;

fn gaussian_window() -> [f64; WIN] {
    let c = (WIN / 2) as f64;
    let raw: [f64; WIN] = std::array::from_fn(|i| (-((i as f64 - c).powi(2)) / (2.0 * SIGMA * SIGMA)).exp());
    let s: f64 = raw.iter().sum();
    raw.map(|v| v / s)
}

/// Separable valid-mode filtering with the 11-tap Gaussian.
fn filter_valid(p: &[f64], h: usize, w: usize, g: &[f64; WIN]) -> Vec<f64> {
    let (oh, ow) = (h - WIN + 1, w - WIN + 1);
    let mut tmp = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            tmp[y * ow + x] = (0..WIN).map(|k| g[k] * p[y * w + x + k]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..WIN).map(|k| g[k] * tmp[(y + k) * ow + x]).sum();
        }
    }
    out
}

/// Single-scale SSIM over two luma planes of extent `h × w`.
pub fn ssim_planes(a: &[f64], b: &[f64], h: usize, w: usize) -> Result<f64, ImageError> {
    if h < WIN || w < WIN {
        return Err(ImageError::Extent(format!("SSIM needs at least {WIN}x{WIN}, got {h}x{w}")));
    }
    let g = gaussian_window();
    let prod = |p: &[f64], q: &[f64]| p.iter().zip(q).map(|(x, y)| x * y).collect::<Vec<_>>();
    let mu_a = filter_valid(a, h, w, &g);
    let mu_b = filter_valid(b, h, w, &g);
    let aa = filter_valid(&prod(a, a), h, w, &g);
    let bb = filter_valid(&prod(b, b), h, w, &g);
    let ab = filter_valid(&prod(a, b), h, w, &g);
    let (c1, c2) = ((K1 * L).powi(2), (K2 * L).powi(2));
    let n = mu_a.len() as f64;
    let total: f64 = (0..mu_a.len())
        .map(|i| {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = aa[i] - ma * ma;
            let vb = bb[i] - mb * mb;
            let cov = ab[i] - ma * mb;
            ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2))
        })
        .sum();
    Ok(total / n)
}

/// SSIM on the Y plane (11×11 Gaussian, σ = 1.5, valid positions).
pub fn ssim(a: &ImageU8, b: &ImageU8) -> Result<f64, ImageError> {
    same_extent(a, b)?;
    ssim_planes(&y_plane(a), &y_plane(b), a.height(), a.width())
}

pub fn metrics_csv_row(file: &str, psnr: f64, ssim: f64) -> String {
    format!("{file},{psnr:.2},{ssim:.4}")
}
