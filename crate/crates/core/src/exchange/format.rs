//! Byte layout of `.nnex` files.
//!
//! ```text
//! "NNEX"  u32 version
//! u32 len, UTF-8 metadata: "key=value\n" lines sorted by key
//! u32 node count, per node:
//!     str op, u32 attr count, (str key, str value)*,
//!     u32 input count, str*, u32 output count, str*
//! u32 initializer count, per tensor:
//!     str name, u8 dtype (1 = f32), u32 rank, u64 dim*,
//!     u64 payload bytes, payload (little-endian)
//! ```
//! Strings are a `u32` byte length followed by UTF-8. All integers are little-endian.

use std::collections::BTreeMap;
use std::io::{self, Write};

use crate::error::FormatError;

pub const MAGIC: &[u8; 4] = b"NNEX";
pub const VERSION: u32 = 1;
pub const DTYPE_F32: u8 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct NodeRecord {
    pub op: String,
    /// Kept in the order written; the exporter writes them sorted by key.
    pub attributes: Vec<(String, String)>,
    pub inputs: Vec<String>,
    pub outputs: Vec<String>,
}

impl NodeRecord {
    pub fn attr(&self, key: &str) -> Option<&str> {
        self.attributes.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Initializer {
    pub name: String,
    pub dims: Vec<u64>,
    pub data: Vec<f32>,
}

/// A decoded exchange file, independent of whether its ops are understood.
#[derive(Debug, Clone, PartialEq)]
pub struct ExchangeFile {
    pub version: u32,
    pub metadata: BTreeMap<String, String>,
    pub nodes: Vec<NodeRecord>,
    pub initializers: Vec<Initializer>,
}

fn put_u32(w: &mut impl Write, v: usize) -> io::Result<()> {
    w.write_all(&u32::try_from(v).expect("count fits in u32").to_le_bytes())
}

fn put_str(w: &mut impl Write, s: &str) -> io::Result<()> {
    put_u32(w, s.len())?;
    w.write_all(s.as_bytes())
}

fn put_strs(w: &mut impl Write, items: &[String]) -> io::Result<()> {
    put_u32(w, items.len())?;
    items.iter().try_for_each(|s| put_str(w, s))
}

impl ExchangeFile {
    pub fn write_to(&self, w: &mut impl Write) -> io::Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&self.version.to_le_bytes())?;
        let meta: String = self.metadata.iter().map(|(k, v)| format!("{k}={v}\n")).collect();
        put_str(w, &meta)?;

        put_u32(w, self.nodes.len())?;
        for n in &self.nodes {
            put_str(w, &n.op)?;
            put_u32(w, n.attributes.len())?;
            for (k, v) in &n.attributes {
                put_str(w, k)?;
                put_str(w, v)?;
            }
            put_strs(w, &n.inputs)?;
            put_strs(w, &n.outputs)?;
        }

        put_u32(w, self.initializers.len())?;
        for t in &self.initializers {
            put_str(w, &t.name)?;
            w.write_all(&[DTYPE_F32])?;
            put_u32(w, t.dims.len())?;
            for d in &t.dims {
                w.write_all(&d.to_le_bytes())?;
            }
            w.write_all(&(t.data.len() as u64 * 4).to_le_bytes())?;
            let mut buf = Vec::with_capacity(t.data.len() * 4);
            for v in &t.data {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            w.write_all(&buf)?;
        }
        Ok(())
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write_to(&mut out).expect("writing to a Vec cannot fail");
        out
    }

    pub fn encoded_len(&self) -> u64 {
        let mut counter = Counter(0);
        self.write_to(&mut counter).expect("counting cannot fail");
        counter.0
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, FormatError> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4, "magic").map_err(|_| FormatError::BadMagic)? != MAGIC {
            return Err(FormatError::BadMagic);
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(FormatError::UnknownVersion(version));
        }

        let meta_text = r.string("metadata")?;
        let mut metadata = BTreeMap::new();
        for line in meta_text.lines() {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| FormatError::Metadata(format!("line without '=': {line:?}")))?;
            if metadata.insert(k.to_string(), v.to_string()).is_some() {
                return Err(FormatError::Metadata(format!("duplicate key {k}")));
            }
        }

        let node_count = r.u32("node count")?;
        let mut nodes = Vec::new();
        for _ in 0..node_count {
            let op = r.string("node op")?;
            let attr_count = r.u32("attribute count")?;
            let mut attributes = Vec::new();
            for _ in 0..attr_count {
                attributes.push((r.string("attribute key")?, r.string("attribute value")?));
            }
            let inputs = r.strings("node inputs")?;
            let outputs = r.strings("node outputs")?;
            nodes.push(NodeRecord {
                op,
                attributes,
                inputs,
                outputs,
            });
        }

        let init_count = r.u32("initializer count")?;
        let mut initializers = Vec::new();
        for _ in 0..init_count {
            let name = r.string("initializer name")?;
            let code = r.take(1, "dtype")?[0];
            if code != DTYPE_F32 {
                return Err(FormatError::BadDtype { name, code });
            }
            let rank = r.u32("rank")?;
            let mut dims = Vec::new();
            for _ in 0..rank {
                dims.push(r.u64("dims")?);
            }
            let declared = r.u64("payload length")?;
            let expected = dims
                .iter()
                .try_fold(4u64, |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| FormatError::PayloadMismatch {
                    name: name.clone(),
                    declared,
                    expected: u64::MAX,
                })?;
            if declared != expected {
                return Err(FormatError::PayloadMismatch {
                    name,
                    declared,
                    expected,
                });
            }
            let len = usize::try_from(declared).map_err(|_| FormatError::Truncated { what: "payload" })?;
            let raw = r.take(len, "payload")?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            initializers.push(Initializer { name, dims, data });
        }
        if r.pos != bytes.len() {
            return Err(FormatError::TrailingBytes(bytes.len() - r.pos));
        }
        Ok(ExchangeFile {
            version,
            metadata,
            nodes,
            initializers,
        })
    }
}

struct Counter(u64);

impl Write for Counter {
    fn write(&mut self, buf: &[u8]) -> io::Result<usize> {
        self.0 += buf.len() as u64;
        Ok(buf.len())
    }

    fn flush(&mut self) -> io::Result<()> {
        Ok(())
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8], FormatError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or(FormatError::Truncated { what })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &'static str) -> Result<u32, FormatError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &'static str) -> Result<u64, FormatError> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self, what: &'static str) -> Result<String, FormatError> {
        let len = self.u32(what)? as usize;
        let raw = self.take(len, what)?;
        String::from_utf8(raw.to_vec()).map_err(|_| FormatError::BadUtf8 { what })
    }

    fn strings(&mut self, what: &'static str) -> Result<Vec<String>, FormatError> {
        let n = self.u32(what)?;
        (0..n).map(|_| self.string(what)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> ExchangeFile {
        ExchangeFile {
            version: VERSION,
            metadata: [("b".to_string(), "2".to_string()), ("a".to_string(), "x=y".to_string())].into(),
            nodes: vec![NodeRecord {
                op: "Linear".into(),
                attributes: vec![],
                inputs: vec!["input".into(), "fc.weight".into()],
                outputs: vec!["fc".into()],
            }],
            initializers: vec![Initializer {
                name: "fc.weight".into(),
                dims: vec![2, 3],
                data: vec![1.0, -2.0, 0.5, 0.0, 3.25, f32::MIN_POSITIVE],
            }],
        }
    }

    #[test]
    fn round_trip_and_length() {
        let f = sample();
        let bytes = f.encode();
        assert_eq!(ExchangeFile::decode(&bytes).unwrap(), f);
        assert_eq!(f.encoded_len(), bytes.len() as u64);
        assert_eq!(&bytes[..4], b"NNEX");
        assert_eq!(&bytes[4..8], &[1, 0, 0, 0]);
        // Metadata is written sorted, and values may contain '='.
        let meta_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        assert_eq!(&bytes[12..12 + meta_len], b"a=x=y\nb=2\n");
    }

    #[test]
    fn every_truncation_is_an_error() {
        let bytes = sample().encode();
        for cut in 0..bytes.len() {
            assert!(ExchangeFile::decode(&bytes[..cut]).is_err(), "prefix {cut} decoded");
        }
        let mut extra = bytes.clone();
        extra.push(0);
        assert_eq!(ExchangeFile::decode(&extra), Err(FormatError::TrailingBytes(1)));
    }

    #[test]
    fn header_errors() {
        let mut bytes = sample().encode();
        bytes[0] = b'X';
        assert_eq!(ExchangeFile::decode(&bytes), Err(FormatError::BadMagic));
        let mut bytes = sample().encode();
        bytes[4] = 2;
        assert_eq!(ExchangeFile::decode(&bytes), Err(FormatError::UnknownVersion(2)));
    }

    #[test]
    fn payload_length_must_match_shape() {
        let mut f = sample();
        f.initializers[0].dims = vec![7];
        let err = ExchangeFile::decode(&f.encode()).unwrap_err();
        assert!(matches!(
            err,
            FormatError::PayloadMismatch {
                declared: 24,
                expected: 28,
                ..
            }
        ));
    }
}
