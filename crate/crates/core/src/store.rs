//! `SEMC` checkpoint files and the QKV → VVV weight surgery.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "SEMC" | u32 version | u32 entry count
//! entry*: u16 name len | name | u8 rank | u32 extent * rank | u64 offset
//! u32 metadata count
//! meta*:  u32 key len | key | u32 value len | value
//! payload: f32 data, entries back to back in table order
//! ```
//!
//! Offsets are byte offsets from the start of the payload.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::{Tensor, MAX_RANK};

pub const MAGIC: [u8; 4] = *b"SEMC";
pub const VERSION: u32 = 1;

/// Named tensors plus string metadata. Iteration order is sorted by name,
/// which makes serialization deterministic.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub tensors: BTreeMap<String, Tensor>,
    pub metadata: BTreeMap<String, String>,
}

impl Checkpoint {
    pub fn new(tensors: BTreeMap<String, Tensor>, metadata: BTreeMap<String, String>) -> Self {
        Self { tensors, metadata }
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::MissingTensor(name.to_string()))
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.tensors.insert(name.into(), tensor);
    }

    pub fn meta(&self, key: &str) -> Option<&str> {
        self.metadata.get(key).map(String::as_str)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&len_u32(self.tensors.len(), "entry count")?.to_le_bytes());
        let mut offset = 0u64;
        for (name, t) in &self.tensors {
            let name_len = u16::try_from(name.len())
                .map_err(|_| Error::Malformed(format!("tensor name too long: {name}")))?;
            out.extend_from_slice(&name_len.to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(t.rank() as u8);
            for &d in t.shape() {
                out.extend_from_slice(&len_u32(d, "extent")?.to_le_bytes());
            }
            out.extend_from_slice(&offset.to_le_bytes());
            offset += 4 * t.len() as u64;
        }
        out.extend_from_slice(&len_u32(self.metadata.len(), "metadata count")?.to_le_bytes());
        for (k, v) in &self.metadata {
            for s in [k, v] {
                out.extend_from_slice(&len_u32(s.len(), "metadata string")?.to_le_bytes());
                out.extend_from_slice(s.as_bytes());
            }
        }
        out.reserve(offset as usize);
        for t in self.tensors.values() {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4, "magic")? != MAGIC {
            return Err(Error::BadMagic);
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(Error::Version(version));
        }
        let count = r.u32("entry count")? as usize;
        let mut entries = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let name_len = r.u16("name length")? as usize;
            let name = String::from_utf8(r.take(name_len, "name")?.to_vec())
                .map_err(|_| Error::Malformed("tensor name is not UTF-8".into()))?;
            let rank = r.u8("rank")? as usize;
            if rank == 0 || rank > MAX_RANK {
                return Err(Error::Malformed(format!("tensor `{name}` has rank {rank}")));
            }
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u32("extent")? as usize);
            }
            let offset = r.u64("offset")?;
            entries.push((name, shape, offset));
        }
        let meta_count = r.u32("metadata count")? as usize;
        let mut metadata = BTreeMap::new();
        for _ in 0..meta_count {
            let key = r.string("metadata key")?;
            let value = r.string("metadata value")?;
            metadata.insert(key, value);
        }
        let payload = &bytes[r.pos..];

        let mut spans: Vec<(u64, u64)> = Vec::with_capacity(entries.len());
        let mut tensors = BTreeMap::new();
        for (name, shape, offset) in entries {
            let n: usize = shape.iter().product();
            let end = offset
                .checked_add(4 * n as u64)
                .ok_or_else(|| Error::Malformed(format!("offset overflow for `{name}`")))?;
            if end > payload.len() as u64 {
                return Err(Error::Truncated(format!(
                    "payload for `{name}` ends at byte {end}, payload has {}",
                    payload.len()
                )));
            }
            spans.push((offset, end));
            let raw = &payload[offset as usize..end as usize];
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            let t = Tensor::new(shape, data)
                .map_err(|e| Error::Malformed(format!("tensor `{name}`: {e}")))?;
            if tensors.insert(name.clone(), t).is_some() {
                return Err(Error::Malformed(format!("duplicate tensor name `{name}`")));
            }
        }
        spans.sort_unstable();
        if spans.windows(2).any(|w| w[1].0 < w[0].1) {
            return Err(Error::Malformed("overlapping tensor payloads".into()));
        }
        Ok(Self { tensors, metadata })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let bytes = self.to_bytes()?;
        let mut f = fs::File::create(path)?;
        f.write_all(&bytes)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

fn len_u32(n: usize, what: &str) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::Malformed(format!("{what} {n} exceeds u32")))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Truncated(format!("header ends inside {what}")));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        let b = self.take(2, what)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        let b = self.take(8, what)?;
        let mut a = [0u8; 8];
        a.copy_from_slice(b);
        Ok(u64::from_le_bytes(a))
    }

    fn string(&mut self, what: &str) -> Result<String> {
        let n = self.u32(what)? as usize;
        String::from_utf8(self.take(n, what)?.to_vec())
            .map_err(|_| Error::Malformed(format!("{what} is not UTF-8")))
    }
}

/// Save `params` with `meta` to `path`.
pub fn save_checkpoint(
    params: &BTreeMap<String, Tensor>,
    meta: &BTreeMap<String, String>,
    path: impl AsRef<Path>,
) -> Result<()> {
    Checkpoint::new(params.clone(), meta.clone()).save(path)
}

/// Load tensors and metadata from `path`.
pub fn load_checkpoint(
    path: impl AsRef<Path>,
) -> Result<(BTreeMap<String, Tensor>, BTreeMap<String, String>)> {
    let c = Checkpoint::load(path)?;
    Ok((c.tensors, c.metadata))
}

/// Name of a vision attention tensor, e.g. `vision.block2.layer3.qkv.v.weight`.
/// Blocks and layers are 1-based.
pub fn vision_param(block: usize, layer: usize, path: &str, leaf: &str) -> String {
    format!("vision.block{block}.layer{layer}.{path}.{leaf}")
}

/// Projections the V-V path reuses from the QKV path.
pub const SURGERY_PROJECTIONS: [&str; 2] = ["v", "out"];
const SURGERY_LEAVES: [&str; 2] = ["weight", "bias"];

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SurgeryReport {
    pub copied_pairs: Vec<(String, String)>,
    /// Checksum over every tensor outside the VVV name set, before surgery.
    pub checksum_before: u64,
    /// Same checksum after surgery; equal to `checksum_before`.
    pub checksum_after: u64,
}

fn is_vvv_name(name: &str) -> bool {
    name.starts_with("vision.block") && name.contains(".vvv.")
}

/// FNV-1a over names and raw f32 bytes of every non-VVV tensor.
pub fn untouched_checksum(ckpt: &Checkpoint) -> u64 {
    const OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
    const PRIME: u64 = 0x0000_0100_0000_01b3;
    let mut h = OFFSET;
    let mut feed = |bytes: &[u8]| {
        for &b in bytes {
            h ^= b as u64;
            h = h.wrapping_mul(PRIME);
        }
    };
    for (name, t) in ckpt.tensors.iter().filter(|(n, _)| !is_vvv_name(n)) {
        feed(name.as_bytes());
        for v in t.data() {
            feed(&v.to_le_bytes());
        }
    }
    h
}

/// Lists the `(block, layer)` pairs that carry a QKV attention, by scanning
/// for `vision.block{j}.layer{i}.qkv.q.weight`.
pub fn attention_layers(ckpt: &Checkpoint) -> Vec<(usize, usize)> {
    let mut out: Vec<(usize, usize)> = ckpt
        .tensors
        .keys()
        .filter_map(|name| {
            let rest = name.strip_prefix("vision.block")?;
            let (block, rest) = rest.split_once(".layer")?;
            let (layer, rest) = rest.split_once('.')?;
            (rest == "qkv.q.weight").then_some(())?;
            Some((block.parse().ok()?, layer.parse().ok()?))
        })
        .collect();
    out.sort_unstable();
    out
}

/// Builds the V-V branch by copying each layer's value and output
/// projections from the QKV path. `expected_layers` lists every
/// `(block, layer)` that must be present; pass `None` to use whatever QKV
/// layers the checkpoint has.
pub fn surgery_copy_qkv_to_vvv(
    ckpt: &Checkpoint,
    expected_layers: Option<&[(usize, usize)]>,
) -> Result<(Checkpoint, SurgeryReport)> {
    let layers = match expected_layers {
        Some(l) => l.to_vec(),
        None => attention_layers(ckpt),
    };
    if layers.is_empty() {
        return Err(Error::MissingTensor(
            "no vision.block*.layer*.qkv.* tensors found".into(),
        ));
    }
    let checksum_before = untouched_checksum(ckpt);
    let mut out = ckpt.clone();
    let mut copied_pairs = Vec::new();
    for &(block, layer) in &layers {
        for proj in SURGERY_PROJECTIONS {
            for leaf in SURGERY_LEAVES {
                let src = vision_param(block, layer, &format!("qkv.{proj}"), leaf);
                let dst = vision_param(block, layer, &format!("vvv.{proj}"), leaf);
                let tensor = ckpt.tensors.get(&src).ok_or_else(|| Error::SurgerySource {
                    block,
                    layer,
                    name: src.clone(),
                })?;
                out.tensors.insert(dst.clone(), tensor.clone());
                copied_pairs.push((src, dst));
            }
        }
    }
    let checksum_after = untouched_checksum(&out);
    Ok((
        out,
        SurgeryReport {
            copied_pairs,
            checksum_before,
            checksum_after,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let mut c = Checkpoint::default();
        c.insert(
            "a",
            Tensor::new(vec![2, 2], vec![1.0, -0.0, f32::MIN_POSITIVE, 3.5]).unwrap(),
        );
        c.insert("b.c", Tensor::from_vec(vec![7.0]));
        c.metadata.insert("k".into(), "v=1".into());
        c
    }

    fn backbone(blocks: usize, layers: usize) -> Checkpoint {
        let mut c = Checkpoint::default();
        let mut x = 0.0f32;
        for j in 1..=blocks {
            for i in 1..=layers {
                for proj in ["q", "k", "v", "out"] {
                    x += 1.0;
                    c.insert(
                        vision_param(j, i, &format!("qkv.{proj}"), "weight"),
                        Tensor::full(&[2, 2], x),
                    );
                    c.insert(
                        vision_param(j, i, &format!("qkv.{proj}"), "bias"),
                        Tensor::full(&[2], -x),
                    );
                }
            }
        }
        c.insert("vision.patch.weight", Tensor::full(&[4, 2], 0.25));
        c
    }

    #[test]
    fn roundtrip_and_determinism() {
        let c = sample();
        let bytes = c.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back.tensors.len(), 2);
        for (k, t) in &c.tensors {
            let b = &back.tensors[k];
            assert_eq!(t.shape(), b.shape());
            let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(t), bits(b));
        }
        assert_eq!(back.metadata, c.metadata);
        assert_eq!(bytes, sample().to_bytes().unwrap());
    }

    #[test]
    fn empty_checkpoint_is_valid() {
        let bytes = Checkpoint::default().to_bytes().unwrap();
        assert_eq!(bytes.len(), 16);
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert!(back.tensors.is_empty() && back.metadata.is_empty());
    }

    #[test]
    fn load_errors_are_distinct() {
        let mut bytes = sample().to_bytes().unwrap();
        let err = Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).unwrap_err();
        assert!(matches!(err, Error::Truncated(_)));
        assert!(err.to_string().contains("truncated"));
        let err = Checkpoint::from_bytes(&bytes[..10]).unwrap_err();
        assert!(matches!(err, Error::Truncated(_)));

        bytes[4] = 2;
        assert!(matches!(
            Checkpoint::from_bytes(&bytes).unwrap_err(),
            Error::Version(2)
        ));
        bytes[0] = b'X';
        let err = Checkpoint::from_bytes(&bytes).unwrap_err();
        assert!(matches!(err, Error::BadMagic));
        assert!(err.to_string().contains("bad magic"));
    }

    #[test]
    fn header_layout_is_bit_exact() {
        let mut c = Checkpoint::default();
        c.insert("w", Tensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap());
        c.metadata.insert("m".into(), "x".into());
        let b = c.to_bytes().unwrap();
        let mut expected = Vec::new();
        expected.extend_from_slice(b"SEMC");
        expected.extend_from_slice(&1u32.to_le_bytes());
        expected.extend_from_slice(&1u32.to_le_bytes());
        expected.extend_from_slice(&1u16.to_le_bytes());
        expected.push(b'w');
        expected.push(2);
        expected.extend_from_slice(&1u32.to_le_bytes());
        expected.extend_from_slice(&2u32.to_le_bytes());
        expected.extend_from_slice(&0u64.to_le_bytes());
        expected.extend_from_slice(&1u32.to_le_bytes());
        expected.extend_from_slice(&1u32.to_le_bytes());
        expected.push(b'm');
        expected.extend_from_slice(&1u32.to_le_bytes());
        expected.push(b'x');
        expected.extend_from_slice(&1.0f32.to_le_bytes());
        expected.extend_from_slice(&2.0f32.to_le_bytes());
        assert_eq!(b, expected);
    }

    #[test]
    fn file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.semc");
        let c = sample();
        save_checkpoint(&c.tensors, &c.metadata, &path).unwrap();
        let (t, m) = load_checkpoint(&path).unwrap();
        assert_eq!(t, c.tensors);
        assert_eq!(m, c.metadata);
    }

    #[test]
    fn surgery_copies_value_and_output_projections() {
        let c = backbone(2, 3);
        let (after, report) = surgery_copy_qkv_to_vvv(&c, None).unwrap();
        assert_eq!(report.copied_pairs.len(), 2 * 3 * 4);
        for (src, dst) in &report.copied_pairs {
            assert_eq!(after.tensors[src], after.tensors[dst]);
        }
        assert_eq!(report.checksum_before, report.checksum_after);
        assert!(after
            .tensors
            .contains_key("vision.block2.layer3.vvv.out.bias"));
        assert!(!after
            .tensors
            .contains_key("vision.block1.layer1.vvv.q.weight"));

        let (twice, _) = surgery_copy_qkv_to_vvv(&after, None).unwrap();
        assert_eq!(twice.to_bytes().unwrap(), after.to_bytes().unwrap());
    }

    #[test]
    fn surgery_missing_source_names_block() {
        let mut c = backbone(2, 2);
        c.tensors.remove("vision.block2.layer1.qkv.out.weight");
        let err = surgery_copy_qkv_to_vvv(&c, None).unwrap_err();
        match &err {
            Error::SurgerySource { block, layer, .. } => assert_eq!((*block, *layer), (2, 1)),
            other => panic!("unexpected {other:?}"),
        }
        assert!(err.to_string().contains("block 2"));

        let mut c = backbone(1, 1);
        c.tensors.remove("vision.block1.layer1.qkv.q.weight");
        assert!(surgery_copy_qkv_to_vvv(&c, Some(&[(1, 1)])).is_ok());
        let err = surgery_copy_qkv_to_vvv(&c, Some(&[(1, 1), (1, 2)])).unwrap_err();
        assert!(matches!(
            err,
            Error::SurgerySource {
                block: 1,
                layer: 2,
                ..
            }
        ));
    }

    #[test]
    fn attention_layer_scan() {
        let c = backbone(4, 3);
        let layers = attention_layers(&c);
        assert_eq!(layers.len(), 12);
        assert_eq!(layers[0], (1, 1));
        assert_eq!(layers[11], (4, 3));
    }
}
