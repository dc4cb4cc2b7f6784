//! The `PRL1` tensor container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "PRL1" | version: u32 = 1 | entry_count: u32
//! per entry: name_len: u16 | name (UTF-8) | dtype: u8 (0 = f32) | rank: u8
//!            | extents: u64 x rank | payload: f32 x prod(extents), row-major
//! ```

use std::collections::HashSet;
use std::path::Path;

use nalgebra::DMatrix;

use crate::error::{PearlError, Result};

pub const MAGIC: &[u8; 4] = b"PRL1";
pub const VERSION: u32 = 1;
pub const DTYPE_F32: u8 = 0;

#[derive(Debug, Clone, PartialEq)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl TensorEntry {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let name = name.into();
        let expected = element_count(&shape)
            .ok_or_else(|| PearlError::Format(format!("entry `{name}`: extents overflow")))?;
        if expected != data.len() {
            return Err(PearlError::Format(format!(
                "entry `{name}`: shape {shape:?} needs {expected} values, payload has {}",
                data.len()
            )));
        }
        Ok(Self { name, shape, data })
    }

    pub fn scalar(name: impl Into<String>, value: f32) -> Self {
        Self {
            name: name.into(),
            shape: Vec::new(),
            data: vec![value],
        }
    }

    /// Builds a rank-2 entry from a matrix, narrowing to f32.
    pub fn from_matrix(name: impl Into<String>, m: &DMatrix<f64>) -> Self {
        let mut data = Vec::with_capacity(m.len());
        for r in 0..m.nrows() {
            data.extend(m.row(r).iter().map(|&v| v as f32));
        }
        Self {
            name: name.into(),
            shape: vec![m.nrows(), m.ncols()],
            data,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Interprets a rank-2 entry as a matrix.
    pub fn to_matrix(&self) -> Result<DMatrix<f64>> {
        match self.shape.as_slice() {
            &[rows, cols] => Ok(DMatrix::from_row_iterator(
                rows,
                cols,
                self.data.iter().map(|&v| v as f64),
            )),
            other => Err(PearlError::Load(format!(
                "entry `{}` must be rank 2, got shape {other:?}",
                self.name
            ))),
        }
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|&v| v as f64).collect()
    }
}

fn element_count(shape: &[usize]) -> Option<usize> {
    shape.iter().try_fold(1usize, |acc, &e| acc.checked_mul(e))
}

/// Ordered collection of uniquely named f32 tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TensorContainer {
    entries: Vec<TensorEntry>,
}

impl TensorContainer {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_entries(entries: Vec<TensorEntry>) -> Result<Self> {
        let mut c = Self::new();
        for e in entries {
            c.push(e)?;
        }
        Ok(c)
    }

    /// Appends an entry; names must be unique.
    pub fn push(&mut self, entry: TensorEntry) -> Result<()> {
        if self.get(&entry.name).is_some() {
            return Err(PearlError::Format(format!(
                "duplicate entry name `{}`",
                entry.name
            )));
        }
        self.entries.push(entry);
        Ok(())
    }

    pub fn entries(&self) -> &[TensorEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&TensorEntry> {
        self.entries.iter().find(|e| e.name == name)
    }

    pub fn require(&self, name: &str) -> Result<&TensorEntry> {
        self.get(name)
            .ok_or_else(|| PearlError::Load(format!("missing tensor entry `{name}`")))
    }

    /// Names of entries holding NaN or infinite values. Such containers are
    /// readable, but the pipeline refuses to consume the flagged entries.
    pub fn non_finite_entries(&self) -> Vec<&str> {
        self.entries
            .iter()
            .filter(|e| !e.is_finite())
            .map(|e| e.name.as_str())
            .collect()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        write_container(self)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        read_container(bytes)
    }

    pub fn read_file(path: impl AsRef<Path>) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        read_container(&bytes)
    }

    pub fn write_file(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, write_container(self)?)?;
        Ok(())
    }
}

/// Serializes a container. Output is a pure function of the entries.
pub fn write_container(c: &TensorContainer) -> Result<Vec<u8>> {
    let payload: usize = c.entries.iter().map(|e| e.data.len() * 4).sum();
    let mut out = Vec::with_capacity(12 + payload + 64 * c.entries.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let count = u32::try_from(c.entries.len())
        .map_err(|_| PearlError::Serialization("too many entries".into()))?;
    out.extend_from_slice(&count.to_le_bytes());

    let mut seen = HashSet::new();
    for e in &c.entries {
        if !seen.insert(e.name.as_str()) {
            return Err(PearlError::Serialization(format!(
                "duplicate entry name `{}`",
                e.name
            )));
        }
        if let Some(i) = e.data.iter().position(|v| !v.is_finite()) {
            return Err(PearlError::Serialization(format!(
                "entry `{}` holds a non-finite value at flat index {i}",
                e.name
            )));
        }
        if element_count(&e.shape) != Some(e.data.len()) {
            return Err(PearlError::Serialization(format!(
                "entry `{}`: shape {:?} does not match payload length {}",
                e.name,
                e.shape,
                e.data.len()
            )));
        }
        let name_len = u16::try_from(e.name.len()).map_err(|_| {
            PearlError::Serialization(format!("entry name too long ({} bytes)", e.name.len()))
        })?;
        let rank = u8::try_from(e.shape.len()).map_err(|_| {
            PearlError::Serialization(format!("entry `{}`: rank above 255", e.name))
        })?;
        out.extend_from_slice(&name_len.to_le_bytes());
        out.extend_from_slice(e.name.as_bytes());
        out.push(DTYPE_F32);
        out.push(rank);
        for &extent in &e.shape {
            out.extend_from_slice(&(extent as u64).to_le_bytes());
        }
        for v in &e.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&end| end <= self.bytes.len())
            .ok_or_else(|| {
                PearlError::Format(format!(
                    "truncated input while reading {what} at byte {}",
                    self.pos
                ))
            })?;
        let slice = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(slice)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

/// Decodes `PRL1` bytes. Non-finite payload values are accepted; see
/// [`TensorContainer::non_finite_entries`].
pub fn read_container(bytes: &[u8]) -> Result<TensorContainer> {
    let mut cur = Cursor { bytes, pos: 0 };
    if cur.take(4, "magic")? != MAGIC {
        return Err(PearlError::Format("missing PRL1 magic".into()));
    }
    let version = cur.u32("version")?;
    if version != VERSION {
        return Err(PearlError::Format(format!(
            "unsupported container version {version}"
        )));
    }
    let count = cur.u32("entry count")? as usize;
    let mut container = TensorContainer::new();
    for idx in 0..count {
        let name_len = cur.u16("name length")? as usize;
        let name = std::str::from_utf8(cur.take(name_len, "entry name")?)
            .map_err(|_| PearlError::Format(format!("entry {idx}: name is not valid UTF-8")))?
            .to_owned();
        let dtype = cur.u8("dtype")?;
        if dtype != DTYPE_F32 {
            return Err(PearlError::Format(format!(
                "entry `{name}`: unknown dtype code {dtype}"
            )));
        }
        let rank = cur.u8("rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            let extent = cur.u64("extent")?;
            shape.push(usize::try_from(extent).map_err(|_| {
                PearlError::Format(format!("entry `{name}`: extent {extent} too large"))
            })?);
        }
        let n = element_count(&shape)
            .and_then(|n| n.checked_mul(4).map(|_| n))
            .ok_or_else(|| PearlError::Format(format!("entry `{name}`: extents overflow")))?;
        let raw = cur.take(n * 4, "payload")?;
        let data = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        container.push(TensorEntry { name, shape, data })?;
    }
    if cur.pos != bytes.len() {
        return Err(PearlError::Format(format!(
            "{} trailing bytes after the last entry: shape/payload mismatch",
            bytes.len() - cur.pos
        )));
    }
    Ok(container)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn one_by_two_by_two() -> Vec<u8> {
        let mut b = Vec::new();
        b.extend_from_slice(b"PRL1");
        b.extend_from_slice(&1u32.to_le_bytes());
        b.extend_from_slice(&1u32.to_le_bytes());
        b.extend_from_slice(&1u16.to_le_bytes());
        b.push(b'x');
        b.push(0);
        b.push(2);
        b.extend_from_slice(&2u64.to_le_bytes());
        b.extend_from_slice(&2u64.to_le_bytes());
        for v in [1.0f32, 2.0, 3.0, 4.0] {
            b.extend_from_slice(&v.to_le_bytes());
        }
        b
    }

    #[test]
    fn decodes_hand_built_layout() {
        let bytes = one_by_two_by_two();
        let c = read_container(&bytes).unwrap();
        let e = c.get("x").unwrap();
        assert_eq!(e.shape, vec![2, 2]);
        assert_eq!(e.data, vec![1.0, 2.0, 3.0, 4.0]);
        assert_eq!(write_container(&c).unwrap(), bytes);
    }

    #[test]
    fn empty_container_is_twelve_bytes() {
        let bytes = write_container(&TensorContainer::new()).unwrap();
        assert_eq!(bytes.len(), 12);
        assert_eq!(&bytes[..4], b"PRL1");
        assert_eq!(&bytes[4..8], &[1, 0, 0, 0]);
        assert_eq!(&bytes[8..], &[0, 0, 0, 0]);
    }

    #[test]
    fn scalar_one_encodes_as_ieee() {
        let c = TensorContainer::from_entries(vec![TensorEntry::scalar("s", 1.0)]).unwrap();
        let bytes = write_container(&c).unwrap();
        assert_eq!(&bytes[bytes.len() - 4..], &[0x00, 0x00, 0x80, 0x3F]);
        assert_eq!(bytes, write_container(&c).unwrap());
    }

    #[test]
    fn rejects_truncation_at_every_cut() {
        let bytes = one_by_two_by_two();
        for cut in 0..bytes.len() {
            assert!(
                matches!(read_container(&bytes[..cut]), Err(PearlError::Format(_))),
                "cut at {cut}"
            );
        }
    }

    #[test]
    fn rejects_trailing_bytes() {
        let mut bytes = one_by_two_by_two();
        bytes.push(0);
        assert!(matches!(read_container(&bytes), Err(PearlError::Format(_))));
    }

    #[test]
    fn rejects_unknown_dtype_and_bad_magic() {
        let mut bytes = one_by_two_by_two();
        bytes[4 + 4 + 4 + 2 + 1] = 7;
        let err = read_container(&bytes).unwrap_err();
        assert!(err.to_string().contains("dtype"));

        let mut bytes = one_by_two_by_two();
        bytes[0] = b'X';
        assert!(read_container(&bytes).is_err());
    }

    #[test]
    fn rejects_duplicate_names_on_read() {
        let e = TensorEntry::scalar("a", 2.0);
        let mut bytes = write_container(
            &TensorContainer::from_entries(vec![e.clone(), TensorEntry::scalar("b", 1.0)])
                .unwrap(),
        )
        .unwrap();
        // Rename "b" to "a" in place.
        let pos = bytes.iter().rposition(|&b| b == b'b').unwrap();
        bytes[pos] = b'a';
        let err = read_container(&bytes).unwrap_err();
        assert!(err.to_string().contains("duplicate"));
        assert!(TensorContainer::from_entries(vec![e.clone(), e]).is_err());
    }

    #[test]
    fn nan_rejected_on_write_but_flagged_on_read() {
        let c = TensorContainer::from_entries(vec![TensorEntry::scalar("n", f32::NAN)]).unwrap();
        assert!(matches!(
            write_container(&c),
            Err(PearlError::Serialization(_))
        ));

        let mut bytes = write_container(
            &TensorContainer::from_entries(vec![TensorEntry::scalar("n", 0.0)]).unwrap(),
        )
        .unwrap();
        let n = bytes.len();
        bytes[n - 4..].copy_from_slice(&f32::NAN.to_le_bytes());
        let c = read_container(&bytes).unwrap();
        assert_eq!(c.non_finite_entries(), vec!["n"]);
    }

    #[test]
    fn shape_mismatch_rejected_at_construction() {
        assert!(TensorEntry::new("x", vec![2, 3], vec![0.0; 5]).is_err());
        assert!(TensorEntry::new("x", vec![0, 3], vec![]).is_ok());
    }

    fn arb_entry() -> impl Strategy<Value = TensorEntry> {
        (
            "[a-zA-Z0-9_.]{0,12}",
            prop::collection::vec(0usize..4, 0..4),
        )
            .prop_flat_map(|(name, shape)| {
                let n: usize = shape.iter().product();
                (
                    Just(name),
                    Just(shape),
                    prop::collection::vec(
                        prop::num::f32::NORMAL | prop::num::f32::ZERO | prop::num::f32::SUBNORMAL,
                        n,
                    ),
                )
            })
            .prop_map(|(name, shape, data)| TensorEntry { name, shape, data })
    }

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(entries in prop::collection::vec(arb_entry(), 0..6)) {
            let mut c = TensorContainer::new();
            for e in entries {
                let _ = c.push(e);
            }
            let bytes = write_container(&c).unwrap();
            let back = read_container(&bytes).unwrap();
            prop_assert_eq!(back.len(), c.len());
            for (a, b) in c.entries().iter().zip(back.entries()) {
                prop_assert_eq!(&a.name, &b.name);
                prop_assert_eq!(&a.shape, &b.shape);
                let ab: Vec<u32> = a.data.iter().map(|v| v.to_bits()).collect();
                let bb: Vec<u32> = b.data.iter().map(|v| v.to_bits()).collect();
                prop_assert_eq!(ab, bb);
            }
            prop_assert_eq!(write_container(&back).unwrap(), bytes);
        }
    }
}
