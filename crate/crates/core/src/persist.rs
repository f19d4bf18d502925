//! Model and threshold files.
//!
//! A model file is `CSCD`, a little-endian `u16` format version, a `u32`
//! length and the UTF-8 spec text, then every parameter tensor in canonical
//! order (component, trunk layers before classifier layers, layer index,
//! parameter name) as a `u8` rank, `u32` dims and little-endian `f32` data,
//! and finally a CRC32 of everything before it.

use std::path::Path;

use crate::cascade::{CascadeModel, CascadeSpec, Threshold, ThresholdVector};
use crate::error::{Error, Result};
use crate::nn::{layout, LayerParams, LayerSpec, ParamSet};
use crate::tensor::Tensor;

pub const MODEL_MAGIC: [u8; 4] = *b"CSCD";
pub const FORMAT_VERSION: u16 = 1;

pub fn encode_model(model: &CascadeModel) -> Vec<u8> {
    let spec = model.spec.to_text();
    let mut out = Vec::new();
    out.extend_from_slice(&MODEL_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(spec.len() as u32).to_le_bytes());
    out.extend_from_slice(spec.as_bytes());
    for (trunk, cls) in model.trunk.iter().zip(&model.classifiers) {
        for p in trunk.tensors().chain(cls.tensors()) {
            out.push(p.value.rank() as u8);
            for &d in p.value.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in p.value.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or(Error::Truncated {
            expected: self.pos.saturating_add(n),
            actual: self.bytes.len(),
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

pub fn decode_model(bytes: &[u8]) -> Result<CascadeModel> {
    if bytes.len() < 10 {
        return Err(Error::Truncated {
            expected: 10,
            actual: bytes.len(),
        });
    }
    let magic: [u8; 4] = bytes[..4].try_into().unwrap();
    if magic != MODEL_MAGIC {
        return Err(Error::ModelMagic(magic));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != FORMAT_VERSION {
        return Err(Error::ModelVersion {
            found: version,
            supported: FORMAT_VERSION,
        });
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().unwrap());
    let computed = crc32fast::hash(body);
    if stored != computed {
        return Err(Error::Crc { stored, computed });
    }

    let mut r = Reader { bytes: body, pos: 6 };
    let spec_len = r.u32()? as usize;
    let text = std::str::from_utf8(r.take(spec_len)?)
        .map_err(|e| Error::InvalidSpec(format!("spec text is not UTF-8: {e}")))?;
    let spec = CascadeSpec::parse(text)?;
    spec.validate()?;

    let mut read_set = |layers: &[LayerSpec], what: &str| -> Result<ParamSet> {
        let mut out = Vec::with_capacity(layers.len());
        for (i, layer) in layers.iter().enumerate() {
            let mut tensors = Vec::new();
            for (name, _, shape) in layout(layer) {
                let rank = r.take(1)?[0] as usize;
                let dims = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
                if dims != shape {
                    return Err(Error::Misaligned(format!(
                        "{what} layer {i} ({}) `{name}`: spec implies {shape:?}, file has {dims:?}",
                        layer.name()
                    )));
                }
                let numel: usize = shape.iter().product();
                let raw = r.take(numel * 4)?;
                let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
                tensors.push(Tensor::new(shape, data)?);
            }
            out.push(LayerParams::from_tensors(layer, tensors)?);
        }
        Ok(ParamSet { layers: out })
    };
    let mut trunk = Vec::new();
    let mut classifiers = Vec::new();
    for (m, comp) in spec.components.iter().enumerate() {
        trunk.push(read_set(&comp.trunk, &format!("component {m} trunk"))?);
        classifiers.push(read_set(&comp.classifier, &format!("component {m} classifier"))?);
    }
    if r.pos != body.len() {
        return Err(Error::Misaligned(format!(
            "{} bytes left after the last tensor",
            body.len() - r.pos
        )));
    }
    Ok(CascadeModel {
        spec,
        trunk,
        classifiers,
    })
}

pub fn save_model(model: &CascadeModel, path: &Path) -> Result<()> {
    std::fs::write(path, encode_model(model)).map_err(|e| Error::io(path, e))
}

pub fn load_model(path: &Path) -> Result<CascadeModel> {
    decode_model(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
}

/// One line per component: a decimal value printed with round-trip
/// precision, or `DISABLED`.
pub fn format_thresholds(t: &ThresholdVector) -> String {
    t.as_slice().iter().map(|t| format!("{t}\n")).collect()
}

pub fn parse_thresholds(text: &str) -> Result<ThresholdVector> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let t = if line == "DISABLED" {
            Threshold::Disabled
        } else {
            let v: f64 = line
                .parse()
                .map_err(|_| Error::InvalidThresholds(format!("line {}: `{line}` is neither a number nor DISABLED", n + 1)))?;
            Threshold::Value(v)
        };
        out.push(t);
    }
    ThresholdVector::new(out)
}

pub fn save_thresholds(t: &ThresholdVector, path: &Path) -> Result<()> {
    std::fs::write(path, format_thresholds(t)).map_err(|e| Error::io(path, e))
}

pub fn load_thresholds(path: &Path) -> Result<ThresholdVector> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_thresholds(&text)
}
