use mambacsr::pipeline::jpeg::{compress_with_tables, dct8x8, idct8x8, quality_scale, PROTOCOL_QF};
use mambacsr::pipeline::pnm::read_ppm_file;
use mambacsr::pipeline::{
    bicubic_resize, crop, crop_and_augment, degrade, jpeg_like_compress, psnr_y, read_pgm, read_ppm, ssim, write_pgm,
    write_ppm, DegradeSpec, Dihedral, ImageU8, QuantTables, PSNR_CAP_DB,
};
use mambacsr::pipeline::GrayU8;
use proptest::prelude::*;

const IMAGES: [&str; 3] = ["discs", "rings", "tiles"];

fn fixture(name: &str) -> ImageU8 {
    read_ppm_file(format!("{}/tests/data/{name}.ppm", env!("CARGO_MANIFEST_DIR"))).unwrap()
}

fn image() -> impl Strategy<Value = ImageU8> {
    (1usize..12, 1usize..12).prop_flat_map(|(h, w)| {
        proptest::collection::vec(any::<u8>(), h * w * 3).prop_map(move |d| ImageU8::new(h, w, d).unwrap())
    })
}

proptest! {
    #[test]
    fn ppm_roundtrip_is_bit_identical(img in image()) {
        let bytes = write_ppm(&img);
        prop_assert_eq!(read_ppm(&bytes).unwrap(), img.clone());
        prop_assert_eq!(write_ppm(&read_ppm(&bytes).unwrap()), bytes);
    }

    #[test]
    fn pgm_roundtrip_is_bit_identical(h in 1usize..10, w in 1usize..10, seed in any::<u64>()) {
        let data = (0..h * w).map(|i| (seed.wrapping_mul(i as u64 + 1) >> 7) as u8).collect();
        let g = GrayU8::new(h, w, data).unwrap();
        prop_assert_eq!(read_pgm(&write_pgm(&g)).unwrap(), g);
    }

    #[test]
    fn dihedral_group_laws(img in image()) {
        for t in Dihedral::ALL {
            let out = t.apply(&img);
            prop_assert_eq!(out.height() * out.width(), img.height() * img.width());
            let mut a = img.data().to_vec();
            let mut b = out.data().to_vec();
            a.sort_unstable();
            b.sort_unstable();
            prop_assert_eq!(a, b);
        }
        let r = |i: &ImageU8| Dihedral::Rot90.apply(i);
        prop_assert_eq!(r(&r(&r(&r(&img)))), img.clone());
        prop_assert_eq!(Dihedral::FlipH.apply(&Dihedral::FlipH.apply(&img)), img.clone());
        prop_assert_eq!(Dihedral::Transpose.apply(&Dihedral::Transpose.apply(&img)), img.clone());
        prop_assert_eq!(r(&r(&img)), Dihedral::Rot180.apply(&img));
    }

    #[test]
    fn quant_tables_are_monotone_in_quality(q in 1u32..100) {
        let (a, b) = (QuantTables::for_quality(q).unwrap(), QuantTables::for_quality(q + 1).unwrap());
        for i in 0..64 {
            prop_assert!(a.luma[i] >= b.luma[i] && a.chroma[i] >= b.chroma[i]);
            prop_assert!((1..=255).contains(&a.luma[i]));
        }
    }

    #[test]
    fn dct_is_invertible(block in proptest::array::uniform32(-128.0f64..128.0)) {
        let mut full = [0.0; 64];
        full[..32].copy_from_slice(&block);
        full[32..].copy_from_slice(&block);
        let back = idct8x8(&dct8x8(&full));
        for (a, b) in full.iter().zip(&back) {
            prop_assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn degrade_shrinks_by_scale(h in 4usize..40, w in 4usize..40, scale in prop_oneof![Just(2usize), Just(4)]) {
        let img = ImageU8::from_fn(h, w, |y, x| [(y * 5) as u8, (x * 7) as u8, ((x + y) * 3) as u8]);
        let spec = DegradeSpec::new(scale, 20).unwrap();
        let lr = degrade(&img, &spec).unwrap_or_else(|e| panic!("{h}x{w}: {e}"));
        prop_assert_eq!((lr.height(), lr.width()), (h / scale, w / scale));
    }
}

#[test]
fn psnr_is_monotone_in_quality_on_fixtures() {
    for name in IMAGES {
        let hr = fixture(name);
        assert_eq!((hr.height(), hr.width()), (128, 128));
        let lr = bicubic_resize(&hr, 32, 32).unwrap();
        let psnr: Vec<f64> = PROTOCOL_QF.iter().map(|&q| psnr_y(&jpeg_like_compress(&lr, q).unwrap(), &lr).unwrap()).collect();
        assert!(psnr.windows(2).all(|w| w[0] <= w[1]), "{name}: {psnr:?}");
        assert!(psnr[2] < PSNR_CAP_DB);
    }
}

#[test]
fn ijg_quality_scaling() {
    assert_eq!(quality_scale(10).unwrap(), 500);
    assert_eq!(quality_scale(50).unwrap(), 100);
    assert_eq!(quality_scale(100).unwrap(), 0);
    assert!(quality_scale(0).is_err() && quality_scale(101).is_err());
    let t = QuantTables::for_quality(100).unwrap();
    assert!(t.luma.iter().chain(&t.chroma).all(|&q| q == 1));
    assert_eq!(QuantTables::for_quality(10).unwrap().luma[0], 80);
}

#[test]
fn unit_tables_nearly_preserve_the_image() {
    let img = fixture("rings");
    let out = compress_with_tables(&img, &QuantTables::unit());
    assert!(psnr_y(&out, &img).unwrap() > 40.0);
}

#[test]
fn identical_images_score_perfectly() {
    let img = fixture("tiles");
    assert_eq!(psnr_y(&img, &img).unwrap(), PSNR_CAP_DB);
    assert!((ssim(&img, &img).unwrap() - 1.0).abs() < 1e-12);
    let other = fixture("discs");
    assert!(ssim(&img, &other).unwrap() < 1.0);
    assert!(psnr_y(&img, &crop(&img, 0, 0, 8, 8).unwrap()).is_err());
}

#[test]
fn crops_are_seeded() {
    let img = fixture("discs");
    let a = crop_and_augment(&img, 48, 9).unwrap();
    assert_eq!(a, crop_and_augment(&img, 48, 9).unwrap());
    assert_eq!((a.height(), a.width()), (48, 48));
    assert!(crop_and_augment(&img, 129, 9).is_err());
}
