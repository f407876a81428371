//! Binary PPM (P6) and PGM (P5) with maxval 255.

use std::path::Path;

use super::{GrayU8, ImageError, ImageU8};

struct Header {
    width: usize,
    height: usize,
    data_start: usize,
}

fn parse_header(bytes: &[u8], magic: &[u8; 2]) -> Result<Header, ImageError> {
    if bytes.len() < 2 || &bytes[..2] != magic {
        return Err(ImageError::Parse {
            offset: 0,
            msg: format!("expected magic {:?}", std::str::from_utf8(magic).unwrap_or("?")),
        });
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for (k, field) in fields.iter_mut().enumerate() {
        // whitespace and '#' comments between fields
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                _ => break,
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        if start == pos {
            return Err(ImageError::Parse {
                offset: pos,
                msg: format!("expected {}", ["width", "height", "maxval"][k]),
            });
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| ImageError::Parse {
                offset: start,
                msg: "number out of range".into(),
            })?;
    }
    if fields[2] != 255 {
        return Err(ImageError::Parse {
            offset: pos,
            msg: format!("maxval {} unsupported (need 255)", fields[2]),
        });
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(ImageError::Parse {
            offset: pos,
            msg: "expected single whitespace before raster".into(),
        });
    }
    Ok(Header {
        width: fields[0],
        height: fields[1],
        data_start: pos + 1,
    })
}

fn raster(bytes: &[u8], h: &Header, channels: usize) -> Result<Vec<u8>, ImageError> {
    let need = h.width * h.height * channels;
    let avail = bytes.len() - h.data_start;
    if avail < need {
        return Err(ImageError::Parse {
            offset: bytes.len(),
            msg: format!("raster truncated: need {need} bytes, have {avail}"),
        });
    }
    Ok(bytes[h.data_start..h.data_start + need].to_vec())
}

pub fn read_ppm(bytes: &[u8]) -> Result<ImageU8, ImageError> {
    let h = parse_header(bytes, b"P6")?;
    ImageU8::new(h.height, h.width, raster(bytes, &h, 3)?)
}

pub fn write_ppm(img: &ImageU8) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", img.width(), img.height()).into_bytes();
    out.extend_from_slice(img.data());
    out
}

pub fn read_pgm(bytes: &[u8]) -> Result<GrayU8, ImageError> {
    let h = parse_header(bytes, b"P5")?;
    GrayU8::new(h.height, h.width, raster(bytes, &h, 1)?)
}

pub fn write_pgm(img: &GrayU8) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", img.width(), img.height()).into_bytes();
    out.extend_from_slice(img.data());
    out
}

pub fn read_ppm_file(path: impl AsRef<Path>) -> Result<ImageU8, ImageError> {
    read_ppm(&std::fs::read(path)?)
}

pub fn read_pgm_file(path: impl AsRef<Path>) -> Result<GrayU8, ImageError> {
    read_pgm(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn white_pixel_file_size() {
        let img = ImageU8::new(1, 1, vec![255, 255, 255]).unwrap();
        let bytes = write_ppm(&img);
        // 11-byte header plus one RGB sample
        assert_eq!(bytes.len(), 14);
        assert_eq!(&bytes[..11], b"P6\n1 1\n255\n");
        assert_eq!(read_ppm(&bytes).unwrap(), img);
    }

    #[test]
    fn accepts_comments_and_whitespace() {
        let mut bytes = b"P6 # made by hand\n2\t1 255\n".to_vec();
        bytes.extend_from_slice(&[1, 2, 3, 4, 5, 6]);
        let img = read_ppm(&bytes).unwrap();
        assert_eq!((img.height(), img.width()), (1, 2));
        assert_eq!(img.pixel(0, 1), [4, 5, 6]);
    }

    #[test]
    fn error_paths_name_offsets() {
        match read_ppm(b"P3\n1 1\n255\n000") {
            Err(ImageError::Parse { offset: 0, .. }) => {}
            other => panic!("unexpected {other:?}"),
        }
        match read_ppm(b"P6\n1 x\n255\n") {
            Err(ImageError::Parse { offset: 5, .. }) => {}
            other => panic!("unexpected {other:?}"),
        }
        assert!(matches!(read_ppm(b"P6\n2 2\n255\n\0\0"), Err(ImageError::Parse { .. })));
        assert!(matches!(read_ppm(b"P6\n1 1\n65535\n\0\0\0"), Err(ImageError::Parse { .. })));
        assert!(matches!(read_pgm(b"P6\n1 1\n255\n\0"), Err(ImageError::Parse { offset: 0, .. })));
    }

    #[test]
    fn pgm_roundtrip() {
        let g = GrayU8::new(2, 3, vec![0, 10, 20, 30, 40, 250]).unwrap();
        let bytes = write_pgm(&g);
        assert!(bytes.starts_with(b"P5\n3 2\n255\n"));
        assert_eq!(read_pgm(&bytes).unwrap(), g);
    }
}
