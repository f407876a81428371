//! Full-range BT.601 (JFIF) colour conversion.

use super::ImageU8;

pub fn rgb_to_ycbcr(r: f64, g: f64, b: f64) -> (f64, f64, f64) {
    let y = 0.299 * r + 0.587 * g + 0.114 * b;
    let cb = 128.0 - 0.168_736 * r - 0.331_264 * g + 0.5 * b;
    let cr = 128.0 + 0.5 * r - 0.418_688 * g - 0.081_312 * b;
    (y, cb, cr)
}

pub fn ycbcr_to_rgb(y: f64, cb: f64, cr: f64) -> (f64, f64, f64) {
    let r = y + 1.402 * (cr - 128.0);
    let g = y - 0.344_136 * (cb - 128.0) - 0.714_136 * (cr - 128.0);
    let b = y + 1.772 * (cb - 128.0);
    (r, g, b)
}

/// Luma plane as floats (unrounded).
pub fn y_plane(img: &ImageU8) -> Vec<f64> {
    img.data()
        .chunks(3)
        .map(|p| rgb_to_ycbcr(f64::from(p[0]), f64::from(p[1]), f64::from(p[2])).0)
        .collect()
}

/// `[Y, Cb, Cr]` planes as floats.
pub fn ycbcr_planes(img: &ImageU8) -> [Vec<f64>; 3] {
    let mut planes: [Vec<f64>; 3] = Default::default();
    for p in img.data().chunks(3) {
        let (y, cb, cr) = rgb_to_ycbcr(f64::from(p[0]), f64::from(p[1]), f64::from(p[2]));
        planes[0].push(y);
        planes[1].push(cb);
        planes[2].push(cr);
    }
    planes
}

/// Rounds and clamps `[Y, Cb, Cr]` planes back to an RGB image.
pub fn image_from_ycbcr(height: usize, width: usize, planes: &[Vec<f64>; 3]) -> ImageU8 {
    let mut rgb: [Vec<f64>; 3] = Default::default();
    for i in 0..height * width {
        let (r, g, b) = ycbcr_to_rgb(planes[0][i], planes[1][i], planes[2][i]);
        rgb[0].push(r);
        rgb[1].push(g);
        rgb[2].push(b);
    }
    ImageU8::from_planes_f64(height, width, &rgb)
}

/// Per-pixel conversion with 8-bit quantization of the YCbCr samples.
pub fn rgb_image_to_ycbcr_u8(img: &ImageU8) -> ImageU8 {
    let planes = ycbcr_planes(img);
    ImageU8::from_planes_f64(img.height(), img.width(), &planes)
}

pub fn ycbcr_u8_to_rgb_image(img: &ImageU8) -> ImageU8 {
    let planes = img.planes_f64();
    image_from_ycbcr(img.height(), img.width(), &planes)
}
