//! CIFAR-10 binary batches: records of one label byte followed by 3072
//! pixel bytes (red, green, blue planes of 32×32).

use crate::error::{Error, Result};

pub const RECORD_BYTES: usize = 1 + PIXELS_PER_IMAGE;
pub const PIXELS_PER_IMAGE: usize = 3 * 32 * 32;

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct CifarRecords {
    pub labels: Vec<u8>,
    /// `labels.len() · 3072` bytes in `(C, H, W)` order per record.
    pub pixels: Vec<u8>,
}

pub fn parse_cifar(bytes: &[u8]) -> Result<CifarRecords> {
    if bytes.len() % RECORD_BYTES != 0 {
        return Err(Error::CifarRecordSize(bytes.len()));
    }
    let n = bytes.len() / RECORD_BYTES;
    let mut out = CifarRecords {
        labels: Vec::with_capacity(n),
        pixels: Vec::with_capacity(n * PIXELS_PER_IMAGE),
    };
    for (record, chunk) in bytes.chunks_exact(RECORD_BYTES).enumerate() {
        let label = chunk[0];
        if label > 9 {
            return Err(Error::CifarLabel { record, label });
        }
        out.labels.push(label);
        out.pixels.extend_from_slice(&chunk[1..]);
    }
    Ok(out)
}

pub fn encode_cifar(records: &CifarRecords) -> Vec<u8> {
    let mut out = Vec::with_capacity(records.labels.len() * RECORD_BYTES);
    for (label, px) in records.labels.iter().zip(records.pixels.chunks_exact(PIXELS_PER_IMAGE)) {
        out.push(*label);
        out.extend_from_slice(px);
    }
    out
}
