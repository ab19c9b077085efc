//! `TEF1` binary containers.
//!
//! Version 1 holds feature bundles:
//!
//! ```text
//! "TEF1" | u32 version=1 | u32 D | u32 C | u64 count
//! per record: u32 id_len | id (UTF-8) | D x f32 global | C*D x f32 local
//! ```
//!
//! Version 2 holds named `f64` matrices behind a UTF-8 JSON header and is
//! used for checkpoints, where reloads must be bit-exact:
//!
//! ```text
//! "TEF1" | u32 version=2 | u32 header_len | header | u64 count
//! per section: u32 name_len | name | u32 rows | u32 cols | rows*cols x f64
//! ```
//!
//! All integers and floats are little-endian.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::autodiff::Matrix;
use crate::encoders::FeatureBundle;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"TEF1";
pub const EMBEDDING_VERSION: u32 = 1;
pub const SECTIONS_VERSION: u32 = 2;

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::CorruptRecord(format!("truncated while reading {what}")))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self, what: &str) -> Result<String> {
        let len = self.u32(what)? as usize;
        let bytes = self.take(len, what)?;
        String::from_utf8(bytes.to_vec()).map_err(|_| Error::CorruptRecord(format!("{what} is not UTF-8")))
    }

    fn f32s(&mut self, n: usize, what: &str) -> Result<Vec<f64>> {
        let bytes = self.take(n.checked_mul(4).ok_or_else(|| Error::CorruptRecord(what.into()))?, what)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect())
    }

    fn f64s(&mut self, n: usize, what: &str) -> Result<Vec<f64>> {
        let bytes = self.take(n.checked_mul(8).ok_or_else(|| Error::CorruptRecord(what.into()))?, what)?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }

    fn done(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(Error::CorruptRecord(format!(
                "{} trailing bytes",
                self.buf.len() - self.pos
            )));
        }
        Ok(())
    }
}

fn header(buf: &[u8], expected: u32) -> Result<Reader<'_>> {
    if buf.len() < 4 || &buf[..4] != MAGIC {
        return Err(Error::BadMagic);
    }
    let mut r = Reader { buf, pos: 4 };
    let version = r.u32("version")?;
    if version != expected {
        return Err(Error::VersionMismatch {
            expected,
            found: version,
        });
    }
    Ok(r)
}

fn put_u32(out: &mut Vec<u8>, v: usize, what: &str) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::CorruptRecord(format!("{what} exceeds u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

/// Serializes feature bundles; all must share `D` and `C`. Values are stored
/// as `f32`.
pub fn encode_embeddings(bundles: &BTreeMap<String, FeatureBundle>) -> Result<Vec<u8>> {
    let (d, c) = bundles
        .values()
        .next()
        .map_or((0, 0), |b| (b.dim(), b.local_count()));
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&EMBEDDING_VERSION.to_le_bytes());
    put_u32(&mut out, d, "D")?;
    put_u32(&mut out, c, "C")?;
    out.extend_from_slice(&(bundles.len() as u64).to_le_bytes());
    for (id, b) in bundles {
        if b.dim() != d || b.local_count() != c {
            return Err(Error::dims(
                "encode_embeddings",
                format!("{id}: {}x{} vs {c}x{d}", b.local_count(), b.dim()),
            ));
        }
        put_u32(&mut out, id.len(), "id length")?;
        out.extend_from_slice(id.as_bytes());
        for v in b.global.data().iter().chain(b.local.data()) {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_embeddings(buf: &[u8]) -> Result<BTreeMap<String, FeatureBundle>> {
    let mut r = header(buf, EMBEDDING_VERSION)?;
    let d = r.u32("D")? as usize;
    let c = r.u32("C")? as usize;
    let count = r.u64("record count")?;
    let mut map = BTreeMap::new();
    for i in 0..count {
        let id = r.string(&format!("record {i} id"))?;
        let global = r.f32s(d, &format!("record {i} global"))?;
        let local = r.f32s(c * d, &format!("record {i} local"))?;
        let bundle = FeatureBundle::new(Matrix::from_raw(1, d, global), Matrix::from_raw(c, d, local))
            .map_err(|e| Error::CorruptRecord(format!("record {i}: {e}")))?;
        if map.insert(id.clone(), bundle).is_some() {
            return Err(Error::CorruptRecord(format!("duplicate id {id}")));
        }
    }
    r.done()?;
    Ok(map)
}

pub fn write_embedding_file(path: impl AsRef<Path>, bundles: &BTreeMap<String, FeatureBundle>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_embeddings(bundles)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_embedding_file(path: impl AsRef<Path>) -> Result<BTreeMap<String, FeatureBundle>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_embeddings(&bytes)
}

/// Serializes named `f64` matrices behind a text header.
pub fn encode_sections(header_text: &str, sections: &[(String, Matrix)]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&SECTIONS_VERSION.to_le_bytes());
    put_u32(&mut out, header_text.len(), "header")?;
    out.extend_from_slice(header_text.as_bytes());
    out.extend_from_slice(&(sections.len() as u64).to_le_bytes());
    for (name, m) in sections {
        put_u32(&mut out, name.len(), "section name")?;
        out.extend_from_slice(name.as_bytes());
        put_u32(&mut out, m.rows(), "rows")?;
        put_u32(&mut out, m.cols(), "cols")?;
        for v in m.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_sections(buf: &[u8]) -> Result<(String, Vec<(String, Matrix)>)> {
    let mut r = header(buf, SECTIONS_VERSION)?;
    let head = r.string("header")?;
    let count = r.u64("section count")?;
    let mut sections = Vec::new();
    for i in 0..count {
        let name = r.string(&format!("section {i} name"))?;
        let rows = r.u32(&format!("section {name} rows"))? as usize;
        let cols = r.u32(&format!("section {name} cols"))? as usize;
        let data = r.f64s(rows * cols, &format!("section {name} data"))?;
        let m = Matrix::from_vec(rows, cols, data)
            .map_err(|e| Error::CorruptRecord(format!("section {name}: {e}")))?;
        sections.push((name, m));
    }
    r.done()?;
    Ok((head, sections))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoders::{EncoderConfig, SyntheticEncoder};

    fn sample() -> BTreeMap<String, FeatureBundle> {
        let e = SyntheticEncoder::new(EncoderConfig {
            dim: 8,
            local_count: 2,
            seed: 4,
            plant_structure: true,
        })
        .unwrap();
        ["a", "bb", "ccc"]
            .iter()
            .map(|id| (id.to_string(), e.encode_image(id)))
            .collect()
    }

    #[test]
    fn embedding_layout_is_exact() {
        let mut m = BTreeMap::new();
        m.insert(
            "x".to_string(),
            FeatureBundle::new(Matrix::row_vector(&[1.0, -2.0]), Matrix::from_rows(&[vec![0.5, 0.25]]).unwrap())
                .unwrap(),
        );
        let bytes = encode_embeddings(&m).unwrap();
        let mut expect = b"TEF1".to_vec();
        expect.extend(1u32.to_le_bytes());
        expect.extend(2u32.to_le_bytes());
        expect.extend(1u32.to_le_bytes());
        expect.extend(1u64.to_le_bytes());
        expect.extend(1u32.to_le_bytes());
        expect.push(b'x');
        for v in [1.0f32, -2.0, 0.5, 0.25] {
            expect.extend(v.to_le_bytes());
        }
        assert_eq!(bytes, expect);
    }

    #[test]
    fn embedding_round_trip() {
        let m = sample();
        let back = decode_embeddings(&encode_embeddings(&m).unwrap()).unwrap();
        let rounded: BTreeMap<_, _> = m
            .iter()
            .map(|(k, b)| {
                (
                    k.clone(),
                    FeatureBundle {
                        global: b.global.to_f32_precision(),
                        local: b.local.to_f32_precision(),
                    },
                )
            })
            .collect();
        assert_eq!(back, rounded);
        // f32-representable values survive bit for bit
        let again = decode_embeddings(&encode_embeddings(&back).unwrap()).unwrap();
        assert_eq!(again, back);
    }

    #[test]
    fn embedding_errors() {
        let bytes = encode_embeddings(&sample()).unwrap();
        assert!(matches!(
            decode_embeddings(&bytes[..bytes.len() - 3]),
            Err(Error::CorruptRecord(_))
        ));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_embeddings(&bad), Err(Error::BadMagic)));
        let mut v2 = bytes.clone();
        v2[4] = 9;
        assert!(matches!(
            decode_embeddings(&v2),
            Err(Error::VersionMismatch { expected: 1, found: 9 })
        ));
        let mut extra = bytes;
        extra.push(0);
        assert!(matches!(decode_embeddings(&extra), Err(Error::CorruptRecord(_))));
    }

    #[test]
    fn sections_round_trip_bit_exact() {
        let s = vec![
            ("w".to_string(), Matrix::from_rows(&[vec![0.1, 1.0 / 3.0], vec![-2.5e-300, 7.0]]).unwrap()),
            ("b".to_string(), Matrix::row_vector(&[std::f64::consts::PI])),
        ];
        let bytes = encode_sections("{\"k\":1}", &s).unwrap();
        let (h, back) = decode_sections(&bytes).unwrap();
        assert_eq!(h, "{\"k\":1}");
        assert_eq!(back, s);
        assert!(matches!(decode_embeddings(&bytes), Err(Error::VersionMismatch { .. })));
        assert!(matches!(
            decode_sections(&bytes[..bytes.len() - 1]),
            Err(Error::CorruptRecord(_))
        ));
    }
}
