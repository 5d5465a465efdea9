//! Binary PPM (P6) and PGM (P5) images, 8-bit.

use std::path::Path;

use crate::error::{Error, Result};

fn encode_header(magic: &str, w: usize, h: usize) -> Vec<u8> {
    format!("{magic}\n{w} {h}\n255\n").into_bytes()
}

pub fn encode_ppm(w: usize, h: usize, rgb: &[u8]) -> Result<Vec<u8>> {
    if rgb.len() != w * h * 3 {
        return Err(Error::Format(format!("ppm: {} bytes for {w}x{h}", rgb.len())));
    }
    let mut out = encode_header("P6", w, h);
    out.extend_from_slice(rgb);
    Ok(out)
}

pub fn encode_pgm(w: usize, h: usize, gray: &[u8]) -> Result<Vec<u8>> {
    if gray.len() != w * h {
        return Err(Error::Format(format!("pgm: {} bytes for {w}x{h}", gray.len())));
    }
    let mut out = encode_header("P5", w, h);
    out.extend_from_slice(gray);
    Ok(out)
}

pub struct PnmImage {
    pub width: usize,
    pub height: usize,
    /// Interleaved RGB for P6, single plane for P5.
    pub data: Vec<u8>,
    pub channels: usize,
}

/// Parse P5/P6 with whitespace and `#` comments between header tokens.
pub fn decode(bytes: &[u8]) -> Result<PnmImage> {
    if bytes.len() < 2 {
        return Err(Error::Format("pnm: truncated header".into()));
    }
    let channels = match &bytes[0..2] {
        b"P6" => 3,
        b"P5" => 1,
        _ => return Err(Error::Format("pnm: unsupported magic".into())),
    };
    let mut pos = 2usize;
    let next_token = |pos: &mut usize| -> Result<usize> {
        loop {
            while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
                *pos += 1;
            }
            if *pos < bytes.len() && bytes[*pos] == b'#' {
                while *pos < bytes.len() && bytes[*pos] != b'\n' {
                    *pos += 1;
                }
                continue;
            }
            break;
        }
        let start = *pos;
        while *pos < bytes.len() && bytes[*pos].is_ascii_digit() {
            *pos += 1;
        }
        if start == *pos {
            return Err(Error::Format("pnm: expected integer token".into()));
        }
        std::str::from_utf8(&bytes[start..*pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Format("pnm: bad integer".into()))
    };
    let width = next_token(&mut pos)?;
    let height = next_token(&mut pos)?;
    let maxval = next_token(&mut pos)?;
    if maxval != 255 {
        return Err(Error::Format(format!("pnm: maxval {maxval} unsupported")));
    }
    // Exactly one whitespace byte separates the header from pixel data.
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(Error::Format("pnm: missing header terminator".into()));
    }
    pos += 1;
    let need = width * height * channels;
    if bytes.len() - pos != need {
        return Err(Error::Format(format!(
            "pnm: {} data bytes, expected {need}",
            bytes.len() - pos
        )));
    }
    Ok(PnmImage { width, height, data: bytes[pos..].to_vec(), channels })
}

pub fn write_file(path: impl AsRef<Path>, bytes: &[u8]) -> Result<()> {
    let path = path.as_ref();
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io_at(dir, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| Error::io_at(path, e))
}

pub fn read_file(path: impl AsRef<Path>) -> Result<PnmImage> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io_at(path, e))?;
    decode(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ppm_roundtrip() {
        let rgb: Vec<u8> = (0..2 * 3 * 3).map(|i| (i * 7) as u8).collect();
        let bytes = encode_ppm(3, 2, &rgb).unwrap();
        let img = decode(&bytes).unwrap();
        assert_eq!((img.width, img.height, img.channels), (3, 2, 3));
        assert_eq!(img.data, rgb);
    }

    #[test]
    fn pgm_roundtrip_with_comment() {
        let gray = vec![0u8, 128, 255, 64];
        let mut bytes = b"P5\n# generated\n2 2\n255\n".to_vec();
        bytes.extend_from_slice(&gray);
        let img = decode(&bytes).unwrap();
        assert_eq!((img.width, img.height, img.channels), (2, 2, 1));
        assert_eq!(img.data, gray);
    }

    #[test]
    fn bad_inputs_rejected() {
        assert!(decode(b"P4\n1 1\n255\nx").is_err());
        assert!(decode(b"P5\n2 2\n255\nab").is_err()); // short data
        assert!(encode_ppm(2, 2, &[0u8; 5]).is_err());
    }
}
