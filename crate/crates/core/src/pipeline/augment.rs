//! Seeded training crops with dihedral augmentation.

use rand::Rng;

use super::{ImageError, ImageU8};
use crate::rng::named_rng;

/// The eight symmetries of the square.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Dihedral {
    Identity,
    Rot90,
    Rot180,
    Rot270,
    FlipH,
    FlipV,
    Transpose,
    AntiTranspose,
}

impl Dihedral {
    pub const ALL: [Dihedral; 8] = [
        Dihedral::Identity,
        Dihedral::Rot90,
        Dihedral::Rot180,
        Dihedral::Rot270,
        Dihedral::FlipH,
        Dihedral::FlipV,
        Dihedral::Transpose,
        Dihedral::AntiTranspose,
    ];

    pub fn apply(self, img: &ImageU8) -> ImageU8 {
        let (h, w) = (img.height(), img.width());
        let swaps = matches!(
            self,
            Dihedral::Rot90 | Dihedral::Rot270 | Dihedral::Transpose | Dihedral::AntiTranspose
        );
        let (oh, ow) = if swaps { (w, h) } else { (h, w) };
        ImageU8::from_fn(oh, ow, |y, x| {
            // source coordinate for output (y, x); rotations are clockwise
            let (sy, sx) = match self {
                Dihedral::Identity => (y, x),
                Dihedral::Rot90 => (h - 1 - x, y),
                Dihedral::Rot180 => (h - 1 - y, w - 1 - x),
                Dihedral::Rot270 => (x, w - 1 - y),
                Dihedral::FlipH => (y, w - 1 - x),
                Dihedral::FlipV => (h - 1 - y, x),
                Dihedral::Transpose => (x, y),
                Dihedral::AntiTranspose => (h - 1 - x, w - 1 - y),
            };
            img.pixel(sy, sx)
        })
    }
}

pub fn crop(img: &ImageU8, top: usize, left: usize, h: usize, w: usize) -> Result<ImageU8, ImageError> {
    if top + h > img.height() || left + w > img.width() {
        return Err(ImageError::Extent(format!(
            "crop {h}x{w} at ({top},{left}) exceeds {}x{}",
            img.height(),
            img.width()
        )));
    }
    Ok(ImageU8::from_fn(h, w, |y, x| img.pixel(top + y, left + x)))
}

/// Seeded `size × size` crop followed by one of the eight dihedral transforms.
pub fn crop_and_augment(img: &ImageU8, size: usize, seed: u64) -> Result<ImageU8, ImageError> {
    if size == 0 || size > img.height() || size > img.width() {
        return Err(ImageError::Extent(format!(
            "crop size {size} does not fit {}x{}",
            img.height(),
            img.width()
        )));
    }
    let mut rng = named_rng(seed, "crop_and_augment");
    let top = rng.random_range(0..=img.height() - size);
    let left = rng.random_range(0..=img.width() - size);
    let t = Dihedral::ALL[rng.random_range(0..Dihedral::ALL.len())];
    Ok(t.apply(&crop(img, top, left, size, size)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    fn sample() -> ImageU8 {
        ImageU8::from_fn(5, 7, |y, x| [(y * 7 + x) as u8, y as u8, x as u8])
    }

    #[test]
    fn eight_distinct_transforms() {
        let img = sample();
        let outs: HashSet<Vec<u8>> = Dihedral::ALL.iter().map(|t| t.apply(&img).data().to_vec()).collect();
        assert_eq!(outs.len(), 8);
    }

    #[test]
    fn involutions_and_rotation_order() {
        let img = sample();
        let f = Dihedral::FlipH;
        assert_eq!(f.apply(&f.apply(&img)), img);
        let r = Dihedral::Rot90;
        let four = r.apply(&r.apply(&r.apply(&r.apply(&img))));
        assert_eq!(four, img);
        assert_eq!(Dihedral::Rot270.apply(&r.apply(&img)), img);
    }

    #[test]
    fn seeded_crop_is_deterministic() {
        let img = ImageU8::from_fn(40, 40, |y, x| [(y * 6) as u8, (x * 6) as u8, 9]);
        let a = crop_and_augment(&img, 16, 7).unwrap();
        assert_eq!(a, crop_and_augment(&img, 16, 7).unwrap());
        assert_eq!((a.height(), a.width()), (16, 16));
        assert!(crop_and_augment(&img, 41, 7).is_err());
    }
}
