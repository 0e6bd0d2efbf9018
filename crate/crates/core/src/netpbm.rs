//! Binary Netpbm (P5/P6) reading and writing.
//!
//! Only the binary variants are supported. 16-bit samples are big-endian.
//! Files written here use a minimal header (`P6\n<w> <h>\n<maxval>\n`) so
//! that `write(read(bytes)) == bytes` for everything this crate produces.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::grid::Grid;

pub type Rgb = [u8; 3];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Format {
    /// P5, maxval 255.
    Gray8,
    /// P5, maxval 65535.
    Gray16,
    /// P6, maxval 255.
    Rgb8,
}

impl Format {
    fn magic(self) -> &'static str {
        match self {
            Format::Gray8 | Format::Gray16 => "P5",
            Format::Rgb8 => "P6",
        }
    }

    fn channels(self) -> usize {
        match self {
            Format::Rgb8 => 3,
            _ => 1,
        }
    }

    fn bytes_per_sample(self) -> usize {
        match self {
            Format::Gray16 => 2,
            _ => 1,
        }
    }

    fn maxval(self) -> u32 {
        match self {
            Format::Gray16 => 65535,
            _ => 255,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImageFile {
    pub format: Format,
    pub width: usize,
    pub height: usize,
    pub payload: Vec<u8>,
}

impl ImageFile {
    pub fn maxval(&self) -> u32 {
        self.format.maxval()
    }

    pub fn expected_payload_len(format: Format, width: usize, height: usize) -> usize {
        width * height * format.channels() * format.bytes_per_sample()
    }

    pub fn from_rgb(img: &Grid<Rgb>) -> Self {
        let payload = img.as_slice().iter().flat_map(|p| p.iter().copied()).collect();
        Self { format: Format::Rgb8, width: img.width(), height: img.height(), payload }
    }

    pub fn from_gray8(img: &Grid<u8>) -> Self {
        Self {
            format: Format::Gray8,
            width: img.width(),
            height: img.height(),
            payload: img.as_slice().to_vec(),
        }
    }

    pub fn from_gray16(img: &Grid<u16>) -> Self {
        let payload = img.as_slice().iter().flat_map(|v| v.to_be_bytes()).collect();
        Self { format: Format::Gray16, width: img.width(), height: img.height(), payload }
    }

    pub fn to_rgb(&self) -> Result<Grid<Rgb>> {
        self.expect(Format::Rgb8)?;
        let px = self.payload.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect();
        Grid::from_vec(self.width, self.height, px)
    }

    pub fn to_gray8(&self) -> Result<Grid<u8>> {
        self.expect(Format::Gray8)?;
        Grid::from_vec(self.width, self.height, self.payload.clone())
    }

    pub fn to_gray16(&self) -> Result<Grid<u16>> {
        self.expect(Format::Gray16)?;
        let px = self.payload.chunks_exact(2).map(|c| u16::from_be_bytes([c[0], c[1]])).collect();
        Grid::from_vec(self.width, self.height, px)
    }

    fn expect(&self, format: Format) -> Result<()> {
        if self.format != format {
            return Err(Error::arg(format!("expected {format:?} image, found {:?}", self.format)));
        }
        Ok(())
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out =
            format!("{}\n{} {}\n{}\n", self.format.magic(), self.width, self.height, self.maxval())
                .into_bytes();
        out.extend_from_slice(&self.payload);
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut cur = HeaderCursor { bytes, pos: 0 };
        let magic = match bytes.get(..2) {
            Some(b"P5") => "P5",
            Some(b"P6") => "P6",
            _ => return Err(Error::Parse { offset: 0, message: "bad magic, expected P5 or P6".into() }),
        };
        cur.pos = 2;
        let (width, _) = cur.number("width")?;
        let (height, _) = cur.number("height")?;
        let (maxval, maxval_offset) = cur.number("maxval")?;
        let format = match (magic, maxval) {
            ("P5", 255) => Format::Gray8,
            ("P5", 65535) => Format::Gray16,
            ("P6", 255) => Format::Rgb8,
            _ => {
                return Err(Error::Parse {
                    offset: maxval_offset,
                    message: format!("unsupported maxval {maxval} for {magic}"),
                })
            }
        };
        // exactly one whitespace byte separates the header from the raster
        match bytes.get(cur.pos) {
            Some(b) if b.is_ascii_whitespace() => cur.pos += 1,
            _ => {
                return Err(Error::Parse {
                    offset: cur.pos,
                    message: "expected whitespace after maxval".into(),
                })
            }
        }
        let (width, height) = (width as usize, height as usize);
        let expected = Self::expected_payload_len(format, width, height);
        let payload = &bytes[cur.pos..];
        if payload.len() < expected {
            return Err(Error::Truncated { expected, actual: payload.len() });
        }
        Ok(Self { format, width, height, payload: payload[..expected].to_vec() })
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        write_atomic(path, &self.encode())
    }
}

struct HeaderCursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl HeaderCursor<'_> {
    fn skip_separators(&mut self) {
        while let Some(&b) = self.bytes.get(self.pos) {
            if b.is_ascii_whitespace() {
                self.pos += 1;
            } else if b == b'#' {
                while let Some(&c) = self.bytes.get(self.pos) {
                    self.pos += 1;
                    if c == b'\n' || c == b'\r' {
                        break;
                    }
                }
            } else {
                break;
            }
        }
    }

    fn number(&mut self, what: &str) -> Result<(u32, usize)> {
        let before = self.pos;
        self.skip_separators();
        if self.pos == before {
            return Err(Error::Parse { offset: self.pos, message: format!("expected whitespace before {what}") });
        }
        let start = self.pos;
        while self.bytes.get(self.pos).is_some_and(u8::is_ascii_digit) {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(Error::Parse { offset: start, message: format!("expected {what}") });
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .map(|v| (v, start))
            .ok_or_else(|| Error::Parse { offset: start, message: format!("{what} out of range") })
    }
}

/// Writes `bytes` to a sibling temp file and renames it over `path`, so a
/// failed write never leaves a partially written target behind.
pub fn write_atomic(path: impl AsRef<Path>, bytes: &[u8]) -> Result<()> {
    let path = path.as_ref();
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::arg(format!("{} has no file name", path.display())))?;
    let tmp = path.with_file_name(format!(".{}.tmp", file_name.to_string_lossy()));
    let result = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    result.map_err(|e| {
        let _ = fs::remove_file(&tmp);
        Error::io(path, e)
    })
}

pub fn read_rgb(path: impl AsRef<Path>) -> Result<Grid<Rgb>> {
    ImageFile::read(path)?.to_rgb()
}

pub fn write_rgb(path: impl AsRef<Path>, img: &Grid<Rgb>) -> Result<()> {
    ImageFile::from_rgb(img).write(path)
}

pub fn read_gray8(path: impl AsRef<Path>) -> Result<Grid<u8>> {
    ImageFile::read(path)?.to_gray8()
}

pub fn write_gray8(path: impl AsRef<Path>, img: &Grid<u8>) -> Result<()> {
    ImageFile::from_gray8(img).write(path)
}

pub fn read_gray16(path: impl AsRef<Path>) -> Result<Grid<u16>> {
    ImageFile::read(path)?.to_gray16()
}

pub fn write_gray16(path: impl AsRef<Path>, img: &Grid<u16>) -> Result<()> {
    ImageFile::from_gray16(img).write(path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn minimal_p6() {
        let mut bytes = b"P6 2 2 255\n".to_vec();
        bytes.extend(0..12u8);
        let img = ImageFile::decode(&bytes).unwrap().to_rgb().unwrap();
        assert_eq!(img.dims(), (2, 2));
        assert_eq!(*img.get(1, 1), [9, 10, 11]);
    }

    #[test]
    fn comments_in_header() {
        let mut bytes = b"P5\n# made by hand\n3 1\n# another\n255\n".to_vec();
        bytes.extend([1, 2, 3]);
        let img = ImageFile::decode(&bytes).unwrap().to_gray8().unwrap();
        assert_eq!(img.as_slice(), &[1, 2, 3]);
    }

    #[test]
    fn sixteen_bit_is_big_endian() {
        let g = Grid::from_vec(2, 1, vec![0x0102u16, 0xfffe]).unwrap();
        let f = ImageFile::from_gray16(&g);
        assert_eq!(f.payload, vec![1, 2, 0xff, 0xfe]);
        assert!(f.encode().starts_with(b"P5\n2 1\n65535\n"));
    }

    #[test]
    fn truncated_payload_reports_lengths() {
        let mut bytes = b"P6\n2 2\n255\n".to_vec();
        bytes.extend([0u8; 11]);
        match ImageFile::decode(&bytes) {
            Err(Error::Truncated { expected: 12, actual: 11 }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn bad_magic_and_maxval() {
        assert!(matches!(ImageFile::decode(b"P3\n1 1\n255\n000"), Err(Error::Parse { offset: 0, .. })));
        match ImageFile::decode(b"P6\n1 1\n1023\n\0\0\0\0\0\0") {
            Err(Error::Parse { offset, .. }) => assert_eq!(offset, 7),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn file_round_trip_64() {
        let dir = tempfile::tempdir().unwrap();
        let img = Grid::from_fn(64, 64, |x, y| [x as u8, y as u8, (x * y) as u8]);
        let path = dir.path().join("a.ppm");
        write_rgb(&path, &img).unwrap();
        let bytes = fs::read(&path).unwrap();
        assert_eq!(read_rgb(&path).unwrap(), img);
        assert_eq!(ImageFile::decode(&bytes).unwrap().encode(), bytes);
    }

    proptest! {
        #[test]
        fn encode_decode_identity(w in 0usize..9, h in 0usize..9, seed in any::<u64>()) {
            let g = Grid::from_fn(w, h, |x, y| (seed.wrapping_mul(31 + x as u64 * 7 + y as u64) >> 40) as u16);
            let f = ImageFile::from_gray16(&g);
            let bytes = f.encode();
            prop_assert_eq!(ImageFile::decode(&bytes).unwrap(), f);
        }
    }
}
