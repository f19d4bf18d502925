//! IDX containers (MNIST, FashionMNIST), optionally gzip-compressed.

use std::borrow::Cow;
use std::io::Read;

use flate2::read::GzDecoder;

use crate::error::{Error, Result};

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;

/// Cap on decompressed size; a full MNIST image file is ~47 MB.
const MAX_INFLATED: u64 = 1 << 30;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IdxImages {
    pub count: usize,
    pub rows: usize,
    pub cols: usize,
    /// Row-major pixels, `count · rows · cols` bytes.
    pub pixels: Vec<u8>,
}

/// Returns the bytes unchanged unless they start with the gzip signature.
pub fn inflate(bytes: &[u8]) -> Result<Cow<'_, [u8]>> {
    if !bytes.starts_with(&[0x1f, 0x8b]) {
        return Ok(Cow::Borrowed(bytes));
    }
    let mut out = Vec::new();
    GzDecoder::new(bytes)
        .take(MAX_INFLATED)
        .read_to_end(&mut out)
        .map_err(Error::Gzip)?;
    Ok(Cow::Owned(out))
}

fn header(bytes: &[u8], magic: u32, dims: usize) -> Result<Vec<usize>> {
    let need = 4 * (dims + 1);
    if bytes.len() >= 4 {
        let found = u32::from_be_bytes(bytes[..4].try_into().unwrap());
        if found != magic {
            return Err(Error::BadMagic { expected: magic, found });
        }
    }
    if bytes.len() < need {
        return Err(Error::Truncated {
            expected: need,
            actual: bytes.len(),
        });
    }
    let word = |i: usize| u32::from_be_bytes(bytes[4 * i..4 * i + 4].try_into().unwrap());
    Ok((1..=dims).map(|i| word(i) as usize).collect())
}

fn body<'a>(bytes: &'a [u8], offset: usize, dims: &[usize]) -> Result<&'a [u8]> {
    let len = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .and_then(|n| n.checked_add(offset))
        .ok_or(Error::Truncated {
            expected: usize::MAX,
            actual: bytes.len(),
        })?;
    if bytes.len() < len {
        return Err(Error::Truncated {
            expected: len,
            actual: bytes.len(),
        });
    }
    if bytes.len() > len {
        return Err(Error::TrailingBytes {
            expected: len,
            actual: bytes.len(),
        });
    }
    Ok(&bytes[offset..])
}

/// Parses an image file (magic `0x00000803`, big-endian count, rows, cols).
pub fn parse_idx_images(bytes: &[u8]) -> Result<IdxImages> {
    let bytes = inflate(bytes)?;
    let dims = header(&bytes, IMAGES_MAGIC, 3)?;
    let pixels = body(&bytes, 16, &dims)?.to_vec();
    Ok(IdxImages {
        count: dims[0],
        rows: dims[1],
        cols: dims[2],
        pixels,
    })
}

/// Parses a label file (magic `0x00000801`, big-endian count).
pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<u8>> {
    let bytes = inflate(bytes)?;
    let dims = header(&bytes, LABELS_MAGIC, 1)?;
    Ok(body(&bytes, 8, &dims)?.to_vec())
}

pub fn encode_idx_images(images: &IdxImages) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + images.pixels.len());
    for w in [IMAGES_MAGIC, images.count as u32, images.rows as u32, images.cols as u32] {
        out.extend_from_slice(&w.to_be_bytes());
    }
    out.extend_from_slice(&images.pixels);
    out
}

pub fn encode_idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

#[cfg(test)]
mod tests {
    use std::io::Write;

    use flate2::write::GzEncoder;
    use flate2::Compression;

    use super::*;

    fn sample() -> IdxImages {
        IdxImages {
            count: 2,
            rows: 2,
            cols: 3,
            pixels: (0..12).collect(),
        }
    }

    #[test]
    fn round_trip_plain_and_gzip() {
        let raw = encode_idx_images(&sample());
        assert_eq!(parse_idx_images(&raw).unwrap(), sample());
        let mut gz = GzEncoder::new(Vec::new(), Compression::fast());
        gz.write_all(&raw).unwrap();
        assert_eq!(parse_idx_images(&gz.finish().unwrap()).unwrap(), sample());
        assert_eq!(parse_idx_labels(&encode_idx_labels(&[3, 1, 4])).unwrap(), vec![3, 1, 4]);
    }

    #[test]
    fn bad_magic() {
        let raw = encode_idx_labels(&[1]);
        assert!(matches!(
            parse_idx_images(&raw),
            Err(Error::BadMagic { expected: IMAGES_MAGIC, found: LABELS_MAGIC })
        ));
    }

    #[test]
    fn truncation_reports_byte_counts() {
        let raw = encode_idx_images(&sample());
        match parse_idx_images(&raw[..20]) {
            Err(Error::Truncated { expected: 28, actual: 20 }) => {}
            other => panic!("unexpected {other:?}"),
        }
        assert!(matches!(parse_idx_labels(&[0, 0, 8]), Err(Error::Truncated { expected: 8, actual: 3 })));
    }

    #[test]
    fn huge_header_does_not_allocate() {
        let mut raw = IMAGES_MAGIC.to_be_bytes().to_vec();
        for _ in 0..3 {
            raw.extend_from_slice(&u32::MAX.to_be_bytes());
        }
        assert!(matches!(parse_idx_images(&raw), Err(Error::Truncated { .. })));
    }

    #[test]
    fn trailing_bytes_rejected() {
        let mut raw = encode_idx_labels(&[1, 2]);
        raw.push(0);
        assert!(matches!(parse_idx_labels(&raw), Err(Error::TrailingBytes { expected: 10, actual: 11 })));
    }
}
