//! Separable cubic interpolation (Keys kernel, `a = -0.5`).

use crate::pipeline::{ImageError, ImageU8};

pub const CUBIC_A: f64 = -0.5;

/// Keys cubic convolution kernel.
pub fn cubic_kernel(x: f64) -> f64 {
    let a = CUBIC_A;
    let x = x.abs();
    if x <= 1.0 {
        ((a + 2.0) * x - (a + 3.0)) * x * x + 1.0
    } else if x < 2.0 {
        ((a * x - 5.0 * a) * x + 8.0 * a) * x - 4.0 * a
    } else {
        0.0
    }
}

/// Four `(source index, weight)` taps per output sample.
pub type CubicTaps = [(usize, f64); 4];

/// Taps for resampling a line of `in_len` samples to `out_len`, with
/// half-pixel centres and source indices clamped to the edges.
pub fn cubic_taps(in_len: usize, out_len: usize) -> Vec<CubicTaps> {
    let scale = in_len as f64 / out_len as f64;
    let last = in_len as isize - 1;
    (0..out_len)
        .map(|o| {
            let src = (o as f64 + 0.5) * scale - 0.5;
            let base = src.floor();
            let t = src - base;
            let base = base as isize;
            let weights = [cubic_kernel(t + 1.0), cubic_kernel(t), cubic_kernel(1.0 - t), cubic_kernel(2.0 - t)];
            std::array::from_fn(|i| ((base - 1 + i as isize).clamp(0, last) as usize, weights[i]))
        })
        .collect()
}

/// Resamples one `h × w` plane.
pub fn resize_plane(src: &[f64], h: usize, w: usize, out_h: usize, out_w: usize) -> Vec<f64> {
    let tx = cubic_taps(w, out_w);
    let ty = cubic_taps(h, out_h);
    let mut tmp = vec![0.0; h * out_w];
    for y in 0..h {
        let row = &src[y * w..(y + 1) * w];
        for (ox, taps) in tx.iter().enumerate() {
            tmp[y * out_w + ox] = taps.iter().map(|&(i, wt)| wt * row[i]).sum();
        }
    }
    let mut out = vec![0.0; out_h * out_w];
    for (oy, taps) in ty.iter().enumerate() {
        for ox in 0..out_w {
            out[oy * out_w + ox] = taps.iter().map(|&(i, wt)| wt * tmp[i * out_w + ox]).sum();
        }
    }
    out
}

/// Bicubic resize of an RGB image; the float result is rounded and clamped.
pub fn bicubic_resize(img: &ImageU8, out_h: usize, out_w: usize) -> Result<ImageU8, ImageError> {
    if out_h == 0 || out_w == 0 {
        return Err(ImageError::Extent(format!("target extents {out_h}x{out_w} must be positive")));
    }
    let planes = img.planes_f64();
    let resized: Vec<Vec<f64>> = planes
        .iter()
        .map(|p| resize_plane(p, img.height(), img.width(), out_h, out_w))
        .collect();
    Ok(ImageU8::from_planes_f64(out_h, out_w, &resized))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kernel_values() {
        assert_eq!(cubic_kernel(0.0), 1.0);
        assert_eq!(cubic_kernel(1.0), 0.0);
        assert_eq!(cubic_kernel(2.0), 0.0);
        assert!((cubic_kernel(0.5) - 0.5625).abs() < 1e-15);
        assert!((cubic_kernel(1.5) + 0.0625).abs() < 1e-15);
    }

    #[test]
    fn weights_partition_unity() {
        for (i, o) in [(7, 3), (64, 16), (16, 64), (5, 5), (9, 4), (3, 11)] {
            for taps in cubic_taps(i, o) {
                let s: f64 = taps.iter().map(|t| t.1).sum();
                assert!((s - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn ramp_half_scale_direct_sum() {
        // Sample points 0.5 and 2.5; taps at floor-1..floor+2 clamped to [0,3].
        let ramp = [0.0, 1.0, 2.0, 3.0];
        let out = resize_plane(&ramp, 1, 4, 1, 2);
        let w_near = 0.5625;
        let w_far = -0.0625;
        let at_half = w_far * ramp[0] + w_near * ramp[0] + w_near * ramp[1] + w_far * ramp[2];
        let at_two_half = w_far * ramp[1] + w_near * ramp[2] + w_near * ramp[3] + w_far * ramp[3];
        assert!((out[0] - at_half).abs() < 1e-14);
        assert!((out[1] - at_two_half).abs() < 1e-14);
        assert!((out[0] - 0.4375).abs() < 1e-14);
        assert!((out[1] - 2.5625).abs() < 1e-14);
    }

    #[test]
    fn constant_and_identity() {
        let img = ImageU8::from_fn(9, 7, |_, _| [77, 140, 3]);
        let r = bicubic_resize(&img, 4, 13).unwrap();
        assert!(r.data().chunks(3).all(|p| p == [77, 140, 3]));

        let img = ImageU8::from_fn(6, 5, |y, x| [(y * 40 + x) as u8, (x * 50) as u8, 255 - (y * 7) as u8]);
        assert_eq!(bicubic_resize(&img, 6, 5).unwrap(), img);
        assert!(bicubic_resize(&img, 0, 5).is_err());
    }
}
