//! 8-bit binary netpbm images: PGM (P5, single channel) and PPM (P6, RGB).
//! Bytes map to [0,1] by division with 255; writes round to nearest.

use std::path::Path;

use crate::tensor::Tensor;

use super::{atomic_write, PersistError};

/// Planar pixel buffer `[channels, height, width]` with values in [0,1].
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<f64>,
}

impl Image {
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(
            vec![self.channels, self.height, self.width],
            self.pixels.clone(),
        )
        .expect("consistent buffer")
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self, PersistError> {
        match t.shape() {
            [c, h, w] if *c == 1 || *c == 3 => Ok(Self {
                channels: *c,
                height: *h,
                width: *w,
                pixels: t.values().to_vec(),
            }),
            other => Err(PersistError::ImageFormat(format!(
                "expected [1|3, H, W] tensor, got {other:?}"
            ))),
        }
    }
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn write_image(path: impl AsRef<Path>, image: &Image) -> Result<(), PersistError> {
    let (format, samples) = match image.channels {
        1 => ("P5", 1usize),
        3 => ("P6", 3usize),
        c => {
            return Err(PersistError::ImageFormat(format!(
                "cannot encode {c}-channel image (PGM is 1, PPM is 3)"
            )))
        }
    };
    let plane = image.height * image.width;
    if image.pixels.len() != image.channels * plane {
        return Err(PersistError::ImageFormat(format!(
            "pixel buffer length {} does not match {}x{}x{}",
            image.pixels.len(),
            image.channels,
            image.height,
            image.width
        )));
    }
    let mut out = format!("{format}\n{} {}\n255\n", image.width, image.height).into_bytes();
    for i in 0..plane {
        for c in 0..samples {
            out.push(quantize(image.pixels[c * plane + i]));
        }
    }
    atomic_write(path.as_ref(), &out)
}

pub fn read_image(path: impl AsRef<Path>) -> Result<Image, PersistError> {
    let bytes = std::fs::read(path)?;
    parse_netpbm(&bytes)
}

fn parse_netpbm(bytes: &[u8]) -> Result<Image, PersistError> {
    if bytes.len() < 2 {
        return Err(PersistError::ImageFormat("file too short".into()));
    }
    let channels = match &bytes[0..2] {
        b"P5" => 1usize,
        b"P6" => 3usize,
        other => {
            return Err(PersistError::ImageFormat(format!(
                "unsupported netpbm type {:?} (P5/P6 only)",
                String::from_utf8_lossy(other)
            )))
        }
    };

    // Header tokens: width, height, maxval, separated by whitespace with
    // optional `#` comments, followed by exactly one whitespace byte.
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in fields.iter_mut() {
        // Skip whitespace and comments.
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                break;
            }
        }
        let start = pos;
        while pos < bytes.len() && bytes[pos].is_ascii_digit() {
            pos += 1;
        }
        if start == pos {
            return Err(PersistError::ImageFormat("malformed header field".into()));
        }
        let text = std::str::from_utf8(&bytes[start..pos])
            .map_err(|_| PersistError::ImageFormat("non-UTF8 header".into()))?;
        *field = text
            .parse()
            .map_err(|_| PersistError::ImageFormat(format!("bad header number `{text}`")))?;
    }
    let [width, height, maxval] = fields;
    if maxval != 255 {
        return Err(PersistError::ImageFormat(format!(
            "only maxval 255 supported, got {maxval}"
        )));
    }
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(PersistError::ImageFormat(
            "missing whitespace before pixel data".into(),
        ));
    }
    pos += 1;

    let plane = width * height;
    let needed = plane * channels;
    let data = &bytes[pos..];
    if data.len() < needed {
        return Err(PersistError::Truncated {
            needed: pos + needed,
            got: bytes.len(),
        });
    }
    // Interleaved on disk, planar in memory.
    let mut pixels = vec![0.0; needed];
    for i in 0..plane {
        for c in 0..channels {
            pixels[c * plane + i] = data[i * channels + c] as f64 / 255.0;
        }
    }
    Ok(Image {
        channels,
        height,
        width,
        pixels,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pgm_byte_mapping() {
        let bytes = b"P5\n2 2\n255\n".iter().chain([0u8, 255, 128, 64].iter());
        let bytes: Vec<u8> = bytes.copied().collect();
        let img = parse_netpbm(&bytes).unwrap();
        assert_eq!(img.channels, 1);
        assert_eq!(img.pixels[0], 0.0);
        assert_eq!(img.pixels[1], 1.0);
        assert!((img.pixels[2] - 128.0 / 255.0).abs() < 1e-15);
        assert!((img.pixels[3] - 64.0 / 255.0).abs() < 1e-15);
    }

    #[test]
    fn header_comments_are_skipped() {
        let mut bytes = b"P5\n# made by hand\n2 1\n255\n".to_vec();
        bytes.extend_from_slice(&[10, 20]);
        let img = parse_netpbm(&bytes).unwrap();
        assert_eq!(img.width, 2);
        assert_eq!(img.height, 1);
    }

    #[test]
    fn malformed_header_is_rejected() {
        assert!(parse_netpbm(b"P4\n1 1\n255\n\x00").is_err());
        assert!(parse_netpbm(b"P5\nx 1\n255\n\x00").is_err());
        assert!(parse_netpbm(b"P5\n1 1\n65535\n\x00\x00").is_err());
        // Truncated payload.
        assert!(matches!(
            parse_netpbm(b"P5\n2 2\n255\n\x00\x01").unwrap_err(),
            PersistError::Truncated { .. }
        ));
    }
}
