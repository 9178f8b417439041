//! Binary PGM (P5) grayscale images, 8- or 16-bit.

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::patch_geom::RasterImage;

fn skip_space_and_comments(data: &[u8], mut pos: usize) -> usize {
    loop {
        while pos < data.len() && data[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < data.len() && data[pos] == b'#' {
            while pos < data.len() && data[pos] != b'\n' {
                pos += 1;
            }
        } else {
            return pos;
        }
    }
}

fn header_number(data: &[u8], pos: &mut usize, what: &str) -> Result<usize> {
    *pos = skip_space_and_comments(data, *pos);
    let start = *pos;
    while *pos < data.len() && data[*pos].is_ascii_digit() {
        *pos += 1;
    }
    std::str::from_utf8(&data[start..*pos])
        .ok()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::Image(format!("bad or missing {what} in PGM header")))
}

pub fn decode(data: &[u8]) -> Result<RasterImage> {
    if data.len() < 2 || &data[..2] != b"P5" {
        return Err(Error::Image("not a binary PGM (missing P5 magic)".into()));
    }
    let mut pos = 2;
    let width = header_number(data, &mut pos, "width")?;
    let height = header_number(data, &mut pos, "height")?;
    let maxval = header_number(data, &mut pos, "maxval")?;
    if maxval == 0 || maxval > 65535 {
        return Err(Error::Image(format!("maxval {maxval} outside 1..=65535")));
    }
    if pos >= data.len() || !data[pos].is_ascii_whitespace() {
        return Err(Error::Image("missing whitespace after maxval".into()));
    }
    pos += 1;

    let bytes_per = if maxval < 256 { 1 } else { 2 };
    let expected = width * height * bytes_per;
    let raster = &data[pos..];
    if raster.len() < expected {
        return Err(Error::Image(format!(
            "truncated raster: {} bytes, expected {expected}",
            raster.len()
        )));
    }
    let pixels = if bytes_per == 1 {
        raster[..expected].iter().map(|&b| b as u16).collect()
    } else {
        raster[..expected]
            .chunks_exact(2)
            .map(|c| u16::from_be_bytes([c[0], c[1]]))
            .collect()
    };
    RasterImage::new(width, height, maxval as u16, pixels)
}

pub fn encode(image: &RasterImage) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n{}\n", image.width, image.height, image.maxval).into_bytes();
    if image.maxval < 256 {
        out.extend(image.pixels.iter().map(|&p| p as u8));
    } else {
        for p in &image.pixels {
            out.extend_from_slice(&p.to_be_bytes());
        }
    }
    out
}

pub fn read_pgm(path: &Path) -> Result<RasterImage> {
    let data = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&data).map_err(|e| match e {
        Error::Image(msg) => Error::Image(format!("{}: {msg}", path.display())),
        other => other,
    })
}

pub fn write_pgm(image: &RasterImage, path: &Path) -> Result<()> {
    let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&encode(image)).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_with_comment() {
        let mut data = b"P5\n# made by hand\n3 2\n255\n".to_vec();
        data.extend([0u8, 1, 2, 3, 4, 255]);
        let img = decode(&data).unwrap();
        assert_eq!((img.width, img.height, img.maxval), (3, 2, 255));
        assert_eq!(img.get(2, 1), 255);
    }

    #[test]
    fn sixteen_bit_round_trip() {
        let img = RasterImage::new(2, 2, 4095, vec![0, 4095, 300, 7]).unwrap();
        assert_eq!(decode(&encode(&img)).unwrap(), img);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(decode(b"P2\n1 1\n255\n0").is_err());
        assert!(decode(b"P5\n4 4\n255\n\x00").is_err());
        assert!(decode(b"P5\n1 1\n0\n\x00").is_err());
    }
}
