//! Named parameter collections and the SKDT1 flat archive.
//!
//! Archive layout (all integers little-endian):
//!
//! ```text
//! "SKDT1"                       5 magic bytes
//! repeated until end of input:
//!   u32   name length in bytes
//!   [u8]  UTF-8 name
//!   u32   rank
//!   u64 × rank   extents
//!   f64 × product(extents)   raw values
//! ```
//!
//! Entries are written in the set's iteration order (sorted by name).

use std::collections::BTreeMap;
use std::io::{Read, Write};

use sha2::{Digest, Sha256};

use super::Array;
use crate::error::{invalid, shape_err, Error, Result};

pub const ARCHIVE_MAGIC: &[u8; 5] = b"SKDT1";

/// Name → array map with deterministic (lexicographic) iteration order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    entries: BTreeMap<String, Array>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Array) -> Option<Array> {
        self.entries.insert(name.into(), value)
    }

    pub fn get(&self, name: &str) -> Option<&Array> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Array> {
        self.entries.get_mut(name)
    }

    pub fn require(&self, name: &str) -> Result<&Array> {
        self.get(name).ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn remove(&mut self, name: &str) -> Option<Array> {
        self.entries.remove(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Array)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Array)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    /// Number of named entries.
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total scalar count across all entries.
    pub fn num_elements(&self) -> usize {
        self.entries.values().map(Array::len).sum()
    }

    pub fn zeros_like(&self) -> ParamSet {
        ParamSet {
            entries: self
                .entries
                .iter()
                .map(|(k, v)| (k.clone(), Array::zeros(v.shape())))
                .collect(),
        }
    }

    /// Euclidean norm of all entries viewed as one flat vector.
    pub fn global_norm(&self) -> f64 {
        self.entries
            .values()
            .flat_map(|a| a.data().iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    /// Flattened inner product over matching names.
    pub fn dot(&self, other: &ParamSet) -> Result<f64> {
        self.check_congruent(other)?;
        let mut acc = 0.0;
        for (a, b) in self.entries.values().zip(other.entries.values()) {
            acc += a.dot(b)?;
        }
        Ok(acc)
    }

    /// `self += c * other`; both sets must hold the same names and shapes.
    pub fn add_scaled(&mut self, other: &ParamSet, c: f64) -> Result<()> {
        self.check_congruent(other)?;
        for (a, b) in self.entries.values_mut().zip(other.entries.values()) {
            a.add_scaled(b, c)?;
        }
        Ok(())
    }

    pub fn scale(&mut self, c: f64) {
        for a in self.entries.values_mut() {
            for v in a.data_mut() {
                *v *= c;
            }
        }
    }

    pub fn check_congruent(&self, other: &ParamSet) -> Result<()> {
        if self.entries.len() != other.entries.len() {
            return Err(shape_err(
                "param_set",
                format!("{} entries vs {}", self.entries.len(), other.entries.len()),
            ));
        }
        for ((ka, va), (kb, vb)) in self.entries.iter().zip(&other.entries) {
            if ka != kb || va.shape() != vb.shape() {
                return Err(shape_err(
                    "param_set",
                    format!("`{ka}` {:?} vs `{kb}` {:?}", va.shape(), vb.shape()),
                ));
            }
        }
        Ok(())
    }

    /// SHA-256 over the archive bytes of the entries whose names satisfy `keep`.
    pub fn digest(&self, keep: impl Fn(&str) -> bool) -> String {
        let mut hasher = Sha256::new();
        for (name, value) in self.iter().filter(|(n, _)| keep(n)) {
            let mut buf = Vec::new();
            write_entry(&mut buf, name, value).expect("writing to a Vec cannot fail");
            hasher.update(&buf);
        }
        hasher
            .finalize()
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    pub fn write_archive<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(ARCHIVE_MAGIC)?;
        for (name, value) in self.iter() {
            write_entry(&mut w, name, value)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn to_archive_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write_archive(&mut buf)
            .expect("writing to a Vec cannot fail");
        buf
    }

    pub fn read_archive<R: Read>(mut r: R) -> Result<ParamSet> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        Self::from_archive_bytes(&bytes)
    }

    pub fn from_archive_bytes(bytes: &[u8]) -> Result<ParamSet> {
        let mut cur = Cursor { bytes, pos: 0 };
        if cur.take(ARCHIVE_MAGIC.len())? != ARCHIVE_MAGIC {
            return Err(Error::Archive("missing SKDT1 magic".into()));
        }
        let mut set = ParamSet::new();
        while cur.pos < bytes.len() {
            let name_len = cur.u32()? as usize;
            let name = std::str::from_utf8(cur.take(name_len)?)
                .map_err(|e| Error::Archive(format!("entry name is not UTF-8: {e}")))?
                .to_string();
            let rank = cur.u32()? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(usize::try_from(cur.u64()?).map_err(|_| {
                    Error::Archive(format!("extent overflow in `{name}`"))
                })?);
            }
            let n = shape
                .iter()
                .try_fold(1usize, |acc, &e| acc.checked_mul(e))
                .ok_or_else(|| Error::Archive(format!("element count overflow in `{name}`")))?;
            let raw = cur.take(n.checked_mul(8).ok_or_else(|| {
                Error::Archive(format!("element count overflow in `{name}`"))
            })?)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
                .collect();
            if set.insert(name.clone(), Array::new(shape, data)?).is_some() {
                return Err(Error::Archive(format!("duplicate entry `{name}`")));
            }
        }
        Ok(set)
    }
}

impl FromIterator<(String, Array)> for ParamSet {
    fn from_iter<I: IntoIterator<Item = (String, Array)>>(iter: I) -> Self {
        ParamSet {
            entries: iter.into_iter().collect(),
        }
    }
}

fn write_entry<W: Write>(w: &mut W, name: &str, value: &Array) -> Result<()> {
    let name_len = u32::try_from(name.len()).map_err(|_| invalid("parameter name too long"))?;
    w.write_all(&name_len.to_le_bytes())?;
    w.write_all(name.as_bytes())?;
    w.write_all(&(value.rank() as u32).to_le_bytes())?;
    for &e in value.shape() {
        w.write_all(&(e as u64).to_le_bytes())?;
    }
    for v in value.data() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Archive(format!("truncated at byte {}", self.pos)))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}
