//! PSGW weight files.
//!
//! Layout (little-endian): magic `PSGW`, version u8, variant code u8, bands
//! u32, parameter count u32, then per parameter a u16 name length, the UTF-8
//! name, u8 ndim, ndim × u32 dims and the f64 values.

use super::blueprint::GeneratorBlueprint;
use super::{GeneratorVariant, ModelError, Result};
use crate::io::write_atomic;
use crate::neural::{ComputeGraph, ParameterStore, Tensor};
use std::path::Path;

pub const PSGW_MAGIC: &[u8; 4] = b"PSGW";
const VERSION: u8 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct WeightsFile {
    pub variant: GeneratorVariant,
    pub bands: usize,
    pub store: ParameterStore,
}

impl WeightsFile {
    pub fn from_generator(variant: GeneratorVariant, bands: usize, generator: &ComputeGraph) -> Self {
        Self {
            variant,
            bands,
            store: generator.params.clone(),
        }
    }

    /// Rebuilds the generator graph these weights belong to. Width and batch
    /// norm use are read off the stored parameters.
    pub fn to_generator(&self, expected: GeneratorVariant) -> Result<ComputeGraph> {
        if self.variant != expected {
            return Err(ModelError::VariantMismatch {
                expected,
                found: self.variant,
            });
        }
        let head = "dec.d5.weight";
        let width = self
            .store
            .get(head)
            .map_err(|_| ModelError::WeightShapeMismatch {
                name: head.into(),
                detail: "missing".into(),
            })?
            .dims()[1];
        let use_bn = self.store.names().any(|n| n.ends_with(".gamma"));
        let mut graph = GeneratorBlueprint::new(self.variant, self.bands)
            .with_width(width)
            .with_bn(use_bn)
            .build(0);
        if let Some(extra) = self.store.names().find(|n| !graph.params.contains(n)) {
            return Err(ModelError::WeightShapeMismatch {
                name: extra.into(),
                detail: format!("not part of the {} graph", self.variant),
            });
        }
        let names: Vec<String> = graph.params.names().map(str::to_owned).collect();
        for name in names {
            let value = self.store.get(&name).map_err(|_| ModelError::WeightShapeMismatch {
                name: name.clone(),
                detail: "missing".into(),
            })?;
            graph
                .params
                .set(&name, value.clone())
                .map_err(|e| ModelError::WeightShapeMismatch {
                    name: name.clone(),
                    detail: e.to_string(),
                })?;
        }
        Ok(graph)
    }
}

pub fn encode_weights(file: &WeightsFile) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(PSGW_MAGIC);
    out.push(VERSION);
    out.push(file.variant.code());
    out.extend_from_slice(&(file.bands as u32).to_le_bytes());
    out.extend_from_slice(&(file.store.len() as u32).to_le_bytes());
    for (name, p) in file.store.iter() {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        let dims = p.value.dims();
        out.push(dims.len() as u8);
        for d in dims {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in p.value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| ModelError::Malformed(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

pub fn decode_weights(bytes: &[u8]) -> Result<WeightsFile> {
    if bytes.len() < 4 || &bytes[..4] != PSGW_MAGIC {
        return Err(ModelError::BadMagic {
            found: bytes[..bytes.len().min(4)].to_vec(),
        });
    }
    let mut r = Reader { bytes, pos: 4 };
    let version = r.u8()?;
    if version != VERSION {
        return Err(ModelError::Malformed(format!("unsupported version {version}")));
    }
    let code = r.u8()?;
    let variant = GeneratorVariant::from_code(code)
        .ok_or_else(|| ModelError::Malformed(format!("unknown variant code {code}")))?;
    let bands = r.u32()? as usize;
    let count = r.u32()?;
    let mut store = ParameterStore::new();
    for _ in 0..count {
        let len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| ModelError::Malformed("parameter name is not UTF-8".into()))?
            .to_owned();
        let ndim = r.u8()? as usize;
        if ndim == 0 || ndim > 4 {
            return Err(ModelError::Malformed(format!("{name}: {ndim} dimensions")));
        }
        let mut dims = [1usize; 4];
        for d in &mut dims[4 - ndim..] {
            *d = r.u32()? as usize;
        }
        let n = dims
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .filter(|&n| n.checked_mul(8).is_some_and(|b| b <= bytes.len()))
            .ok_or_else(|| ModelError::Malformed(format!("{name}: dims {dims:?} exceed the file")))?;
        let data: Vec<f64> = r
            .take(n * 8)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let value = Tensor::new(dims, data).map_err(|e| ModelError::Malformed(format!("{name}: {e}")))?;
        if store.contains(&name) {
            return Err(ModelError::Malformed(format!("duplicate parameter {name}")));
        }
        store.insert(name, value);
    }
    if r.pos != bytes.len() {
        return Err(ModelError::Malformed(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(WeightsFile { variant, bands, store })
}

pub fn save_weights(path: &Path, file: &WeightsFile) -> Result<()> {
    write_atomic(path, &encode_weights(file)).map_err(|source| ModelError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn load_weights(path: &Path) -> Result<WeightsFile> {
    let bytes = std::fs::read(path).map_err(|source| ModelError::Io {
        path: path.display().to_string(),
        source,
    })?;
    decode_weights(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(variant: GeneratorVariant, bn: bool) -> (ComputeGraph, WeightsFile) {
        let g = GeneratorBlueprint::new(variant, 3).with_width(2).with_bn(bn).build(9);
        let f = WeightsFile::from_generator(variant, 3, &g);
        (g, f)
    }

    #[test]
    fn round_trip_is_bit_exact() {
        for v in GeneratorVariant::ALL {
            for bn in [false, true] {
                let (g, f) = sample(v, bn);
                let bytes = encode_weights(&f);
                let back = decode_weights(&bytes).unwrap();
                assert_eq!(back.store.fingerprint(), g.params.fingerprint());
                assert_eq!(encode_weights(&back), bytes);
                let rebuilt = back.to_generator(v).unwrap();
                assert_eq!(rebuilt.params.fingerprint(), g.params.fingerprint());
                assert_eq!(rebuilt.batchnorm_count(), g.batchnorm_count());
            }
        }
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("g.psgw");
        let (_, f) = sample(GeneratorVariant::FuPsgan, false);
        save_weights(&path, &f).unwrap();
        assert_eq!(load_weights(&path).unwrap(), f);
    }

    #[test]
    fn header_layout() {
        let f = WeightsFile {
            variant: GeneratorVariant::StPsgan,
            bands: 4,
            store: ParameterStore::new(),
        };
        let bytes = encode_weights(&f);
        assert_eq!(bytes, [b'P', b'S', b'G', b'W', 1, 2, 4, 0, 0, 0, 0, 0, 0, 0]);
        let back = decode_weights(&bytes).unwrap();
        assert!(back.store.is_empty());
        assert_eq!(back.variant, GeneratorVariant::StPsgan);
    }

    #[test]
    fn variant_mismatch() {
        let (_, f) = sample(GeneratorVariant::Psgan, false);
        let back = decode_weights(&encode_weights(&f)).unwrap();
        assert!(matches!(
            back.to_generator(GeneratorVariant::StPsgan),
            Err(ModelError::VariantMismatch {
                expected: GeneratorVariant::StPsgan,
                found: GeneratorVariant::Psgan
            })
        ));
    }

    #[test]
    fn corrupt_files() {
        let (_, f) = sample(GeneratorVariant::Psgan, false);
        let bytes = encode_weights(&f);
        assert!(matches!(decode_weights(b"MSRF\x01"), Err(ModelError::BadMagic { .. })));
        assert!(matches!(decode_weights(b"PS"), Err(ModelError::BadMagic { .. })));
        assert!(matches!(
            decode_weights(&bytes[..bytes.len() - 3]),
            Err(ModelError::Malformed(_))
        ));
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(matches!(decode_weights(&extra), Err(ModelError::Malformed(_))));
        let mut version = bytes.clone();
        version[4] = 2;
        assert!(matches!(decode_weights(&version), Err(ModelError::Malformed(_))));
        let mut code = bytes;
        code[5] = 7;
        assert!(matches!(decode_weights(&code), Err(ModelError::Malformed(_))));
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let (_, mut f) = sample(GeneratorVariant::Psgan, false);
        f.store.insert("pan.c1.weight", Tensor::zeros([1, 1, 3, 3]));
        assert!(matches!(
            f.to_generator(GeneratorVariant::Psgan),
            Err(ModelError::WeightShapeMismatch { .. })
        ));
        let (_, mut f) = sample(GeneratorVariant::Psgan, false);
        f.store.insert("stray.weight", Tensor::zeros([1, 1, 1, 1]));
        assert!(matches!(
            f.to_generator(GeneratorVariant::Psgan),
            Err(ModelError::WeightShapeMismatch { .. })
        ));
    }
}
