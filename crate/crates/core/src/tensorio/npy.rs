//! Reader and writer for the NPY v1.0 subset used as the on-disk tensor format.
//!
//! Reads little-endian `<f4` / `<f8`, C-order arrays. Writes `<f8` only, with
//! the same header layout `numpy.save` produces (dict repr, spare growth
//! space, space padding to a 64-byte boundary, trailing newline).

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{GeoError, Result};

const MAGIC: &[u8; 6] = b"\x93NUMPY";
const PREFIX_LEN: usize = 10;
const ALIGN: usize = 64;
/// Spare header room numpy reserves so the leading axis can grow in place.
const GROWTH_AXIS_MAX_DIGITS: usize = 21;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    fn descr(self) -> &'static str {
        match self {
            Dtype::F32 => "<f4",
            Dtype::F64 => "<f8",
        }
    }

    fn size(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

/// Parsed NPY header.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NpyHeader {
    pub dtype: Dtype,
    pub shape: Vec<usize>,
    /// Offset of the first data byte.
    pub data_offset: usize,
}

/// A decoded array of any rank, widened to f64.
#[derive(Debug, Clone, PartialEq)]
pub struct NpyArray {
    pub shape: Vec<usize>,
    pub dtype: Dtype,
    pub data: Vec<f64>,
}

fn format_err(path: &Path, reason: impl Into<String>) -> GeoError {
    GeoError::Format {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

fn unsupported(path: &Path, reason: impl Into<String>) -> GeoError {
    GeoError::UnsupportedTensor {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

/// Values that can appear in the header dictionary.
#[derive(Debug, Clone, PartialEq)]
enum Literal {
    Str(String),
    Bool(bool),
    Tuple(Vec<usize>),
}

/// Minimal parser for the python-literal dict numpy writes into the header.
struct HeaderParser<'a> {
    src: &'a [u8],
    pos: usize,
}

impl<'a> HeaderParser<'a> {
    fn skip_ws(&mut self) {
        while self.pos < self.src.len() && self.src[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
    }

    fn peek(&mut self) -> Option<u8> {
        self.skip_ws();
        self.src.get(self.pos).copied()
    }

    fn expect(&mut self, c: u8) -> Result<(), String> {
        match self.peek() {
            Some(found) if found == c => {
                self.pos += 1;
                Ok(())
            }
            Some(found) => Err(format!(
                "expected '{}' at byte {}, found '{}'",
                c as char, self.pos, found as char
            )),
            None => Err(format!("expected '{}', found end of header", c as char)),
        }
    }

    fn string(&mut self) -> Result<String, String> {
        let quote = match self.peek() {
            Some(q @ (b'\'' | b'"')) => q,
            _ => return Err(format!("expected string at byte {}", self.pos)),
        };
        self.pos += 1;
        let start = self.pos;
        while self.pos < self.src.len() && self.src[self.pos] != quote {
            self.pos += 1;
        }
        if self.pos >= self.src.len() {
            return Err("unterminated string".into());
        }
        let s = std::str::from_utf8(&self.src[start..self.pos])
            .map_err(|_| "non-utf8 string".to_string())?
            .to_owned();
        self.pos += 1;
        Ok(s)
    }

    fn word(&mut self) -> &'a str {
        self.skip_ws();
        let start = self.pos;
        while self.pos < self.src.len() && self.src[self.pos].is_ascii_alphanumeric() {
            self.pos += 1;
        }
        std::str::from_utf8(&self.src[start..self.pos]).unwrap_or("")
    }

    fn tuple(&mut self) -> Result<Vec<usize>, String> {
        self.expect(b'(')?;
        let mut dims = Vec::new();
        loop {
            match self.peek() {
                Some(b')') => {
                    self.pos += 1;
                    return Ok(dims);
                }
                Some(c) if c.is_ascii_digit() => {
                    let w = self.word();
                    let d = w
                        .trim_end_matches('L')
                        .parse::<usize>()
                        .map_err(|_| format!("bad dimension '{w}'"))?;
                    dims.push(d);
                    match self.peek() {
                        Some(b',') => self.pos += 1,
                        Some(b')') => {}
                        _ => return Err("malformed shape tuple".into()),
                    }
                }
                _ => return Err("malformed shape tuple".into()),
            }
        }
    }

    fn value(&mut self) -> Result<Literal, String> {
        match self.peek() {
            Some(b'\'' | b'"') => self.string().map(Literal::Str),
            Some(b'(') => self.tuple().map(Literal::Tuple),
            Some(_) => match self.word() {
                "True" => Ok(Literal::Bool(true)),
                "False" => Ok(Literal::Bool(false)),
                other => Err(format!("unexpected literal '{other}'")),
            },
            None => Err("unexpected end of header".into()),
        }
    }

    fn dict(&mut self) -> Result<Vec<(String, Literal)>, String> {
        self.expect(b'{')?;
        let mut entries = Vec::new();
        loop {
            if self.peek() == Some(b'}') {
                self.pos += 1;
                break;
            }
            let key = self.string()?;
            self.expect(b':')?;
            let value = self.value()?;
            entries.push((key, value));
            match self.peek() {
                Some(b',') => self.pos += 1,
                Some(b'}') => {}
                _ => return Err("expected ',' or '}' in header dict".into()),
            }
        }
        self.skip_ws();
        if self.pos != self.src.len() {
            return Err("trailing bytes after header dict".into());
        }
        Ok(entries)
    }
}

/// Parse the fixed prefix and header dictionary of an NPY byte buffer.
pub fn parse_header(bytes: &[u8], path: &Path) -> Result<NpyHeader> {
    if bytes.len() < PREFIX_LEN || &bytes[..6] != MAGIC {
        return Err(format_err(path, "missing \\x93NUMPY magic"));
    }
    match (bytes[6], bytes[7]) {
        (1, 0) => {}
        (2 | 3, 0) => {
            return Err(unsupported(
                path,
                format!("NPY version {}.0 (only 1.0 supported)", bytes[6]),
            ))
        }
        (major, minor) => {
            return Err(format_err(path, format!("unknown version {major}.{minor}")))
        }
    }
    let header_len = u16::from_le_bytes([bytes[8], bytes[9]]) as usize;
    let data_offset = PREFIX_LEN + header_len;
    if bytes.len() < data_offset {
        return Err(format_err(path, "truncated header"));
    }
    let header = &bytes[PREFIX_LEN..data_offset];
    if header.last() != Some(&b'\n') {
        return Err(format_err(path, "header not terminated by newline"));
    }
    let mut parser = HeaderParser {
        src: header,
        pos: 0,
    };
    let entries = parser.dict().map_err(|r| format_err(path, r))?;

    let mut descr = None;
    let mut fortran = None;
    let mut shape = None;
    for (key, value) in entries {
        match (key.as_str(), value) {
            ("descr", Literal::Str(s)) => descr = Some(s),
            ("fortran_order", Literal::Bool(b)) => fortran = Some(b),
            ("shape", Literal::Tuple(t)) => shape = Some(t),
            (k, v) => return Err(format_err(path, format!("unexpected header entry {k}: {v:?}"))),
        }
    }
    let descr = descr.ok_or_else(|| format_err(path, "header lacks 'descr'"))?;
    let fortran = fortran.ok_or_else(|| format_err(path, "header lacks 'fortran_order'"))?;
    let shape = shape.ok_or_else(|| format_err(path, "header lacks 'shape'"))?;

    let dtype = match descr.as_str() {
        "<f4" => Dtype::F32,
        "<f8" => Dtype::F64,
        other => return Err(unsupported(path, format!("dtype '{other}'"))),
    };
    if fortran {
        return Err(unsupported(path, "fortran-ordered arrays"));
    }
    Ok(NpyHeader {
        dtype,
        shape,
        data_offset,
    })
}

/// Read only the header of an NPY file.
pub fn read_header(path: &Path) -> Result<NpyHeader> {
    let bytes = fs::read(path).map_err(|e| GeoError::io(path, e))?;
    parse_header(&bytes, path)
}

/// Decode an entire NPY file. Rejects zero-size and 0-d arrays and any
/// non-finite entry.
pub fn read_npy(path: &Path) -> Result<NpyArray> {
    let bytes = fs::read(path).map_err(|e| GeoError::io(path, e))?;
    decode(&bytes, path)
}

pub fn decode(bytes: &[u8], path: &Path) -> Result<NpyArray> {
    let header = parse_header(bytes, path)?;
    if header.shape.is_empty() {
        return Err(unsupported(path, "0-d arrays"));
    }
    let count: usize = header.shape.iter().product();
    if count == 0 {
        return Err(unsupported(path, "zero-size array"));
    }
    let payload = &bytes[header.data_offset..];
    let expected = count * header.dtype.size();
    if payload.len() != expected {
        return Err(format_err(
            path,
            format!("payload holds {} bytes, shape needs {expected}", payload.len()),
        ));
    }
    let data: Vec<f64> = match header.dtype {
        Dtype::F64 => payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect(),
        Dtype::F32 => payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect(),
    };
    if let Some(index) = data.iter().position(|v| !v.is_finite()) {
        return Err(GeoError::NonFiniteData {
            path: path.to_path_buf(),
            index,
        });
    }
    Ok(NpyArray {
        shape: header.shape,
        dtype: header.dtype,
        data,
    })
}

fn shape_repr(shape: &[usize]) -> String {
    match shape {
        [single] => format!("({single},)"),
        dims => {
            let parts: Vec<String> = dims.iter().map(|d| d.to_string()).collect();
            format!("({})", parts.join(", "))
        }
    }
}

/// Encode a C-order little-endian `<f8` array.
pub fn encode_f64(shape: &[usize], data: &[f64]) -> Vec<u8> {
    debug_assert_eq!(shape.iter().product::<usize>(), data.len());
    let mut header = format!(
        "{{'descr': '{}', 'fortran_order': False, 'shape': {}, }}",
        Dtype::F64.descr(),
        shape_repr(shape)
    );
    if let Some(first) = shape.first() {
        let digits = first.to_string().len();
        header.push_str(&" ".repeat(GROWTH_AXIS_MAX_DIGITS.saturating_sub(digits)));
    }
    let hlen = header.len() + 1;
    let padlen = ALIGN - ((PREFIX_LEN + hlen) % ALIGN);
    header.push_str(&" ".repeat(padlen));
    header.push('\n');

    let mut out = Vec::with_capacity(PREFIX_LEN + header.len() + data.len() * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&[1, 0]);
    out.extend_from_slice(&(header.len() as u16).to_le_bytes());
    out.extend_from_slice(header.as_bytes());
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

/// Write bytes through a sibling temporary file so readers never observe a
/// partially written tensor.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let file_name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    let tmp = path.with_file_name(format!(".{file_name}.tmp"));
    let mut f = fs::File::create(&tmp).map_err(|e| GeoError::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| GeoError::io(&tmp, e))?;
    f.sync_all().map_err(|e| GeoError::io(&tmp, e))?;
    drop(f);
    fs::rename(&tmp, path).map_err(|e| GeoError::io(path, e))
}

pub fn write_npy_f64(path: &Path, shape: &[usize], data: &[f64]) -> Result<()> {
    if shape.is_empty() || shape.contains(&0) {
        return Err(unsupported(path, "zero-size array"));
    }
    write_atomic(path, &encode_f64(shape, data))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn p() -> &'static Path {
        Path::new("mem.npy")
    }

    #[test]
    fn header_alignment() {
        for shape in [vec![1], vec![3, 1], vec![123456, 7], vec![2, 2, 2]] {
            let n: usize = shape.iter().product();
            let bytes = encode_f64(&shape, &vec![0.0; n]);
            let h = parse_header(&bytes, p()).unwrap();
            assert_eq!(h.data_offset % ALIGN, 0);
            assert_eq!(h.shape, shape);
            assert_eq!(bytes[h.data_offset - 1], b'\n');
        }
    }

    #[test]
    fn rejects_bad_magic() {
        let mut bytes = encode_f64(&[2], &[1.0, 2.0]);
        bytes[1] = b'X';
        assert!(matches!(decode(&bytes, p()), Err(GeoError::Format { .. })));
    }

    #[test]
    fn rejects_version_two() {
        let mut bytes = encode_f64(&[2], &[1.0, 2.0]);
        bytes[6] = 2;
        assert!(matches!(
            decode(&bytes, p()),
            Err(GeoError::UnsupportedTensor { .. })
        ));
    }

    #[test]
    fn rejects_truncated_payload() {
        let bytes = encode_f64(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let cut = &bytes[..bytes.len() - 3];
        assert!(matches!(decode(cut, p()), Err(GeoError::Format { .. })));
    }

    #[test]
    fn rejects_non_finite() {
        let bytes = encode_f64(&[3], &[1.0, f64::NAN, 3.0]);
        match decode(&bytes, p()) {
            Err(GeoError::NonFiniteData { index, .. }) => assert_eq!(index, 1),
            other => panic!("unexpected {other:?}"),
        }
        let bytes = encode_f64(&[1], &[f64::INFINITY]);
        assert!(matches!(decode(&bytes, p()), Err(GeoError::NonFiniteData { .. })));
    }

    #[test]
    fn rejects_unsupported_descr_and_order() {
        let make = |dict: &str| {
            let mut header = dict.to_string();
            let pad = ALIGN - ((PREFIX_LEN + header.len() + 1) % ALIGN);
            header.push_str(&" ".repeat(pad));
            header.push('\n');
            let mut out = MAGIC.to_vec();
            out.extend_from_slice(&[1, 0]);
            out.extend_from_slice(&(header.len() as u16).to_le_bytes());
            out.extend_from_slice(header.as_bytes());
            out.extend_from_slice(&[0u8; 16]);
            out
        };
        let be = make("{'descr': '>f8', 'fortran_order': False, 'shape': (2,), }");
        assert!(matches!(decode(&be, p()), Err(GeoError::UnsupportedTensor { .. })));
        let int = make("{'descr': '<i8', 'fortran_order': False, 'shape': (2,), }");
        assert!(matches!(decode(&int, p()), Err(GeoError::UnsupportedTensor { .. })));
        let f = make("{'descr': '<f8', 'fortran_order': True, 'shape': (2,), }");
        assert!(matches!(decode(&f, p()), Err(GeoError::UnsupportedTensor { .. })));
        let zero = make("{'descr': '<f8', 'fortran_order': False, 'shape': (0, 2), }");
        assert!(matches!(decode(&zero, p()), Err(GeoError::UnsupportedTensor { .. })));
        let scalar = make("{'descr': '<f8', 'fortran_order': False, 'shape': (), }");
        assert!(matches!(decode(&scalar, p()), Err(GeoError::UnsupportedTensor { .. })));
        let garbled = make("{'descr': '<f8', 'fortran_order': Maybe, 'shape': (2,), }");
        assert!(matches!(decode(&garbled, p()), Err(GeoError::Format { .. })));
        // key order and quoting style are not significant
        let reordered = make("{\"shape\": (2,), \"fortran_order\": False, \"descr\": \"<f8\"}");
        assert_eq!(decode(&reordered, p()).unwrap().shape, vec![2]);
    }
}
