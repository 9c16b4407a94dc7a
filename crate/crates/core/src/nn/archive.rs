//! EGSW named-tensor archive.
//!
//! Little-endian layout: `b"EGSW"`, `u32` format version, `u32` tensor count,
//! then per tensor `u32` name length, UTF-8 name, `u32` rank, `rank` x `u32`
//! dims and the row-major f32 payload. No padding.

use std::collections::HashSet;

use super::{checked_numel, NnError, Tensor};

pub const MAGIC: &[u8; 4] = b"EGSW";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Default)]
pub struct WeightArchive {
    pub format_version: u32,
    entries: Vec<(String, Tensor)>,
}

impl WeightArchive {
    pub fn new() -> Self {
        Self {
            format_version: FORMAT_VERSION,
            entries: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<(), NnError> {
        let name = name.into();
        if self.get(&name).is_some() {
            return Err(NnError::DuplicateWeight(name));
        }
        self.entries.push((name, tensor));
        Ok(())
    }

    pub fn entries(&self) -> &[(String, Tensor)] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.entries
            .iter_mut()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let payload: usize = self
            .entries
            .iter()
            .map(|(n, t)| 8 + n.len() + 4 * t.rank() + 4 * t.numel())
            .sum();
        let mut out = Vec::with_capacity(12 + payload);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&self.format_version.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, t) in &self.entries {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &d in t.dims() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, NnError> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(4)?;
        if magic != MAGIC {
            return Err(NnError::Parse {
                offset: 0,
                reason: "bad magic, expected EGSW".into(),
            });
        }
        let version_at = r.pos;
        let format_version = r.u32()?;
        if format_version != FORMAT_VERSION {
            return Err(NnError::Parse {
                offset: version_at,
                reason: format!("unsupported format version {format_version}"),
            });
        }
        let count = r.u32()? as usize;
        let mut seen = HashSet::new();
        let mut entries = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let name_at = r.pos;
            let name_len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| NnError::Parse {
                    offset: name_at + 4,
                    reason: "tensor name is not UTF-8".into(),
                })?
                .to_owned();
            if !seen.insert(name.clone()) {
                return Err(NnError::DuplicateWeight(name));
            }
            let rank = r.u32()? as usize;
            let dims_at = r.pos;
            let mut dims = Vec::with_capacity(rank.min(16));
            for _ in 0..rank {
                dims.push(r.u32()? as usize);
            }
            let numel = checked_numel(&dims)
                .and_then(|n| n.checked_mul(4).map(|_| n))
                .ok_or_else(|| NnError::Parse {
                    offset: dims_at,
                    reason: format!("dims {dims:?} overflow"),
                })?;
            let payload = r.take(numel.checked_mul(4).expect("checked above"))?;
            let data = payload
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect();
            entries.push((name, Tensor::new(dims, data)?));
        }
        if r.pos != bytes.len() {
            return Err(NnError::Parse {
                offset: r.pos,
                reason: format!("{} trailing bytes", bytes.len() - r.pos),
            });
        }
        Ok(Self {
            format_version,
            entries,
        })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], NnError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(NnError::Parse {
                offset: self.pos,
                reason: format!(
                    "truncated: need {n} bytes, {} left",
                    self.bytes.len() - self.pos
                ),
            }),
        }
    }

    fn u32(&mut self) -> Result<u32, NnError> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn empty_archive_is_header_only() {
        let a = WeightArchive::new();
        let bytes = a.to_bytes();
        assert_eq!(bytes, b"EGSW\x01\x00\x00\x00\x00\x00\x00\x00");
        assert_eq!(WeightArchive::from_bytes(&bytes).unwrap(), a);
    }

    #[test]
    fn single_tensor_layout() {
        let mut a = WeightArchive::new();
        a.push("w", Tensor::new(vec![2, 3], (0..6).map(|v| v as f32).collect()).unwrap())
            .unwrap();
        let bytes = a.to_bytes();
        let mut expected = b"EGSW".to_vec();
        for v in [1u32, 1, 1] {
            expected.extend_from_slice(&v.to_le_bytes());
        }
        expected.push(b'w');
        for v in [2u32, 2, 3] {
            expected.extend_from_slice(&v.to_le_bytes());
        }
        for v in 0..6 {
            expected.extend_from_slice(&(v as f32).to_le_bytes());
        }
        assert_eq!(bytes, expected);
        assert_eq!(bytes.len(), 12 + 4 + 1 + 4 + 8 + 24);
        assert_eq!(WeightArchive::from_bytes(&bytes).unwrap(), a);
    }

    #[test]
    fn corrupt_magic_reports_offset_zero() {
        let mut bytes = WeightArchive::new().to_bytes();
        bytes[0] = b'X';
        assert!(matches!(
            WeightArchive::from_bytes(&bytes),
            Err(NnError::Parse { offset: 0, .. })
        ));
    }

    #[test]
    fn truncation_and_overflow() {
        let mut a = WeightArchive::new();
        a.push("abc", Tensor::zeros(vec![4])).unwrap();
        let bytes = a.to_bytes();
        let cut = &bytes[..bytes.len() - 3];
        assert!(matches!(
            WeightArchive::from_bytes(cut),
            Err(NnError::Parse { offset: 27, .. })
        ));
        let mut huge = b"EGSW".to_vec();
        for v in [1u32, 1, 1] {
            huge.extend_from_slice(&v.to_le_bytes());
        }
        huge.push(b'x');
        for v in [3u32, u32::MAX, u32::MAX, u32::MAX] {
            huge.extend_from_slice(&v.to_le_bytes());
        }
        assert!(matches!(
            WeightArchive::from_bytes(&huge),
            Err(NnError::Parse { offset: 21, .. })
        ));
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut a = WeightArchive::new();
        a.push("x", Tensor::zeros(vec![1])).unwrap();
        assert!(a.push("x", Tensor::zeros(vec![1])).is_err());
        let mut bytes = a.to_bytes();
        bytes[8] = 2;
        bytes.extend_from_within(12..12 + 4 + 1 + 4 + 4 + 4);
        assert_eq!(
            WeightArchive::from_bytes(&bytes),
            Err(NnError::DuplicateWeight("x".into()))
        );
    }

    proptest! {
        #[test]
        fn round_trip(tensors in prop::collection::vec(
            (prop::collection::vec(1usize..4, 0..3), any::<u32>()), 0..5)) {
            let mut a = WeightArchive::new();
            for (i, (dims, seed)) in tensors.iter().enumerate() {
                let n: usize = dims.iter().product();
                let data = (0..n).map(|k| f32::from_bits(seed.wrapping_add(k as u32) & 0x7f7f_ffff)).collect();
                a.push(format!("t{i}.é"), Tensor::new(dims.clone(), data).unwrap()).unwrap();
            }
            let bytes = a.to_bytes();
            let b = WeightArchive::from_bytes(&bytes).unwrap();
            prop_assert_eq!(b.to_bytes(), bytes);
            prop_assert_eq!(b, a);
        }
    }
}
