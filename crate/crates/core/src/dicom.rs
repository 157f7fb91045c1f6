//! Minimal DICOM Part 10 reader: extracts uncompressed monochrome pixel data
//! and bit depth. Compressed transfer syntaxes are rejected.

use crate::error::{Error, Result};
use crate::imaging::RawImage;

const IMPLICIT_LE: &str = "1.2.840.10008.1.2";
const EXPLICIT_LE: &str = "1.2.840.10008.1.2.1";

const TAG_TRANSFER_SYNTAX: (u16, u16) = (0x0002, 0x0010);
const TAG_SAMPLES: (u16, u16) = (0x0028, 0x0002);
const TAG_PHOTOMETRIC: (u16, u16) = (0x0028, 0x0004);
const TAG_ROWS: (u16, u16) = (0x0028, 0x0010);
const TAG_COLUMNS: (u16, u16) = (0x0028, 0x0011);
const TAG_BITS_ALLOCATED: (u16, u16) = (0x0028, 0x0100);
const TAG_BITS_STORED: (u16, u16) = (0x0028, 0x0101);
const TAG_PIXEL_REPRESENTATION: (u16, u16) = (0x0028, 0x0103);
const TAG_PIXEL_DATA: (u16, u16) = (0x7FE0, 0x0010);
const TAG_ITEM: (u16, u16) = (0xFFFE, 0xE000);
const TAG_ITEM_END: (u16, u16) = (0xFFFE, 0xE00D);
const TAG_SEQ_END: (u16, u16) = (0xFFFE, 0xE0DD);
const UNDEFINED: u32 = 0xFFFF_FFFF;

pub fn is_dicom(bytes: &[u8]) -> bool {
    bytes.len() >= 132 && &bytes[128..132] == b"DICM"
}

fn err(msg: impl Into<String>) -> Error {
    Error::Decode(format!("DICOM: {}", msg.into()))
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    explicit: bool,
}

struct Element<'a> {
    tag: (u16, u16),
    vr: Option<[u8; 2]>,
    len: u32,
    value: &'a [u8],
}

fn long_length_vr(vr: &[u8; 2]) -> bool {
    matches!(
        vr,
        b"OB" | b"OW" | b"OF" | b"OD" | b"OL" | b"OV" | b"SQ" | b"UT" | b"UN" | b"UC" | b"UR" | b"SV" | b"UV"
    )
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| err("truncated file"))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn at_end(&self) -> bool {
        self.pos >= self.buf.len()
    }

    fn peek_group(&self) -> Option<u16> {
        self.buf
            .get(self.pos..self.pos + 2)
            .map(|b| u16::from_le_bytes(b.try_into().unwrap()))
    }

    /// Reads one element header; undefined-length values are not consumed.
    fn header(&mut self) -> Result<((u16, u16), Option<[u8; 2]>, u32)> {
        let tag = (self.u16()?, self.u16()?);
        if tag.0 == 0xFFFE {
            // Item and delimiter tags never carry a VR.
            return Ok((tag, None, self.u32()?));
        }
        if self.explicit {
            let vr: [u8; 2] = self.take(2)?.try_into().unwrap();
            let len = if long_length_vr(&vr) {
                self.take(2)?;
                self.u32()?
            } else {
                self.u16()? as u32
            };
            Ok((tag, Some(vr), len))
        } else {
            Ok((tag, None, self.u32()?))
        }
    }

    fn element(&mut self) -> Result<Element<'a>> {
        let (tag, vr, len) = self.header()?;
        if len == UNDEFINED {
            if tag == TAG_PIXEL_DATA {
                return Err(err("encapsulated (compressed) pixel data is not supported"));
            }
            self.skip_undefined_sequence()?;
            return Ok(Element {
                tag,
                vr,
                len,
                value: &[],
            });
        }
        let value = self.take(len as usize)?;
        Ok(Element { tag, vr, len, value })
    }

    fn skip_undefined_sequence(&mut self) -> Result<()> {
        loop {
            let (tag, _, len) = self.header()?;
            match tag {
                TAG_SEQ_END => return Ok(()),
                TAG_ITEM if len == UNDEFINED => self.skip_undefined_item()?,
                TAG_ITEM => {
                    self.take(len as usize)?;
                }
                other => return Err(err(format!("unexpected tag {other:04X?} in sequence"))),
            }
        }
    }

    fn skip_undefined_item(&mut self) -> Result<()> {
        loop {
            if self.at_end() {
                return Err(err("unterminated sequence item"));
            }
            let save = self.pos;
            let (tag, _, _) = self.header()?;
            if tag == TAG_ITEM_END {
                return Ok(());
            }
            self.pos = save;
            self.element()?;
        }
    }
}

fn read_us(e: &Element) -> Result<u16> {
    e.value
        .get(..2)
        .map(|b| u16::from_le_bytes(b.try_into().unwrap()))
        .ok_or_else(|| err(format!("element {:04X?} too short", e.tag)))
}

fn read_str(e: &Element) -> String {
    String::from_utf8_lossy(e.value)
        .trim_end_matches(['\0', ' '])
        .to_string()
}

pub fn decode(bytes: &[u8]) -> Result<RawImage> {
    if !is_dicom(bytes) {
        return Err(err("missing DICM preamble"));
    }
    let mut r = Reader {
        buf: bytes,
        pos: 132,
        explicit: true,
    };

    let mut transfer_syntax = None;
    while r.peek_group() == Some(0x0002) {
        let e = r.element()?;
        if e.tag == TAG_TRANSFER_SYNTAX {
            transfer_syntax = Some(read_str(&e));
        }
    }
    r.explicit = match transfer_syntax.as_deref() {
        Some(EXPLICIT_LE) | None => true,
        Some(IMPLICIT_LE) => false,
        Some(other) => return Err(err(format!("unsupported transfer syntax {other}"))),
    };

    let (mut rows, mut cols, mut alloc, mut stored) = (None, None, None, None);
    let mut samples = 1;
    let mut signed = false;
    let mut monochrome1 = false;
    let mut pixels = None;
    while !r.at_end() {
        let e = r.element()?;
        match e.tag {
            TAG_ROWS => rows = Some(read_us(&e)? as usize),
            TAG_COLUMNS => cols = Some(read_us(&e)? as usize),
            TAG_BITS_ALLOCATED => alloc = Some(read_us(&e)?),
            TAG_BITS_STORED => stored = Some(read_us(&e)?),
            TAG_SAMPLES => samples = read_us(&e)?,
            TAG_PIXEL_REPRESENTATION => signed = read_us(&e)? == 1,
            TAG_PHOTOMETRIC => monochrome1 = read_str(&e) == "MONOCHROME1",
            TAG_PIXEL_DATA => {
                let _ = (e.vr, e.len);
                pixels = Some(e.value);
                break;
            }
            _ => {}
        }
    }

    let rows = rows.ok_or_else(|| err("missing Rows"))?;
    let cols = cols.ok_or_else(|| err("missing Columns"))?;
    let alloc = alloc.ok_or_else(|| err("missing BitsAllocated"))?;
    let stored = stored.unwrap_or(alloc);
    let data = pixels.ok_or_else(|| err("missing PixelData"))?;
    if samples != 1 {
        return Err(err("only single-sample (grayscale) images are supported"));
    }
    if signed {
        return Err(err("signed pixel representation is not supported"));
    }
    let n = rows * cols;
    let mut values: Vec<u16> = match alloc {
        8 => {
            if data.len() < n {
                return Err(err("truncated pixel data"));
            }
            data[..n].iter().map(|&b| b as u16).collect()
        }
        16 => {
            if data.len() < 2 * n {
                return Err(err("truncated pixel data"));
            }
            data[..2 * n]
                .chunks_exact(2)
                .map(|c| u16::from_le_bytes([c[0], c[1]]))
                .collect()
        }
        other => return Err(err(format!("unsupported BitsAllocated {other}"))),
    };
    let bit_depth = if stored <= 8 { 8 } else { 16 };
    let mask: u16 = if stored >= 16 { u16::MAX } else { (1u16 << stored) - 1 };
    let max = if bit_depth == 8 { 255 } else { u16::MAX };
    for v in &mut values {
        *v &= mask;
        if monochrome1 {
            *v = mask.min(max) - *v;
        }
    }
    RawImage::new(cols, rows, bit_depth, values)
}

/// Writes a minimal explicit-VR little-endian DICOM file holding `img`.
/// Intended for fixtures and interchange tests.
pub fn encode_minimal(img: &RawImage) -> Vec<u8> {
    fn short(out: &mut Vec<u8>, tag: (u16, u16), vr: &[u8; 2], value: &[u8]) {
        out.extend_from_slice(&tag.0.to_le_bytes());
        out.extend_from_slice(&tag.1.to_le_bytes());
        out.extend_from_slice(vr);
        out.extend_from_slice(&(value.len() as u16).to_le_bytes());
        out.extend_from_slice(value);
    }
    fn long(out: &mut Vec<u8>, tag: (u16, u16), vr: &[u8; 2], value: &[u8]) {
        out.extend_from_slice(&tag.0.to_le_bytes());
        out.extend_from_slice(&tag.1.to_le_bytes());
        out.extend_from_slice(vr);
        out.extend_from_slice(&[0, 0]);
        out.extend_from_slice(&(value.len() as u32).to_le_bytes());
        out.extend_from_slice(value);
    }
    let mut out = vec![0u8; 128];
    out.extend_from_slice(b"DICM");
    let mut ts = EXPLICIT_LE.as_bytes().to_vec();
    ts.push(0);
    short(&mut out, TAG_TRANSFER_SYNTAX, b"UI", &ts);
    short(&mut out, TAG_SAMPLES, b"US", &1u16.to_le_bytes());
    short(&mut out, TAG_PHOTOMETRIC, b"CS", b"MONOCHROME2 ");
    short(&mut out, TAG_ROWS, b"US", &(img.height() as u16).to_le_bytes());
    short(&mut out, TAG_COLUMNS, b"US", &(img.width() as u16).to_le_bytes());
    let alloc: u16 = if img.bit_depth() == 8 { 8 } else { 16 };
    short(&mut out, TAG_BITS_ALLOCATED, b"US", &alloc.to_le_bytes());
    short(&mut out, TAG_BITS_STORED, b"US", &alloc.to_le_bytes());
    short(&mut out, TAG_PIXEL_REPRESENTATION, b"US", &0u16.to_le_bytes());
    let mut pixels = Vec::new();
    if alloc == 8 {
        pixels.extend(img.pixels().iter().map(|&v| v as u8));
        if pixels.len() % 2 == 1 {
            pixels.push(0);
        }
        long(&mut out, TAG_PIXEL_DATA, b"OB", &pixels);
    } else {
        for v in img.pixels() {
            pixels.extend_from_slice(&v.to_le_bytes());
        }
        long(&mut out, TAG_PIXEL_DATA, b"OW", &pixels);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn explicit_round_trip_8_and_16_bit() {
        let a = RawImage::new(3, 3, 8, (0..9).map(|v| v * 20).collect()).unwrap();
        assert_eq!(decode(&encode_minimal(&a)).unwrap(), a);
        let b = RawImage::new(2, 3, 16, vec![0, 1, 4095, 30000, 65535, 7]).unwrap();
        assert_eq!(decode(&encode_minimal(&b)).unwrap(), b);
    }

    #[test]
    fn implicit_vr_with_sequence_is_parsed() {
        let mut out = vec![0u8; 128];
        out.extend_from_slice(b"DICM");
        // Meta group: transfer syntax = implicit little endian.
        let ts = b"1.2.840.10008.1.2\0";
        out.extend_from_slice(&[0x02, 0x00, 0x10, 0x00, b'U', b'I']);
        out.extend_from_slice(&(ts.len() as u16).to_le_bytes());
        out.extend_from_slice(ts);
        let elem = |out: &mut Vec<u8>, g: u16, e: u16, v: &[u8]| {
            out.extend_from_slice(&g.to_le_bytes());
            out.extend_from_slice(&e.to_le_bytes());
            out.extend_from_slice(&(v.len() as u32).to_le_bytes());
            out.extend_from_slice(v);
        };
        // An undefined-length sequence with one undefined-length item.
        out.extend_from_slice(&[0x08, 0x00, 0x15, 0x11]);
        out.extend_from_slice(&UNDEFINED.to_le_bytes());
        out.extend_from_slice(&[0xFE, 0xFF, 0x00, 0xE0]);
        out.extend_from_slice(&UNDEFINED.to_le_bytes());
        elem(&mut out, 0x0008, 0x1150, b"1.2.3\0");
        out.extend_from_slice(&[0xFE, 0xFF, 0x0D, 0xE0, 0, 0, 0, 0]);
        out.extend_from_slice(&[0xFE, 0xFF, 0xDD, 0xE0, 0, 0, 0, 0]);
        elem(&mut out, 0x0028, 0x0004, b"MONOCHROME1 ");
        elem(&mut out, 0x0028, 0x0010, &2u16.to_le_bytes());
        elem(&mut out, 0x0028, 0x0011, &2u16.to_le_bytes());
        elem(&mut out, 0x0028, 0x0100, &16u16.to_le_bytes());
        elem(&mut out, 0x0028, 0x0101, &12u16.to_le_bytes());
        let px: Vec<u8> = [0u16, 100, 4095, 0xF00F]
            .iter()
            .flat_map(|v| v.to_le_bytes())
            .collect();
        elem(&mut out, 0x7FE0, 0x0010, &px);
        let img = decode(&out).unwrap();
        assert_eq!(img.bit_depth(), 16);
        // 12 stored bits, MONOCHROME1 inverted against 4095.
        assert_eq!(img.pixels(), &[4095, 3995, 0, 4095 - 0x00F]);
    }

    #[test]
    fn compressed_syntax_and_truncation_are_rejected() {
        let a = RawImage::new(4, 4, 8, vec![1; 16]).unwrap();
        let bytes = encode_minimal(&a);
        assert!(decode(&bytes[..bytes.len() - 3]).is_err());

        let mut jpeg = bytes.clone();
        let needle = EXPLICIT_LE.as_bytes();
        let pos = jpeg.windows(needle.len()).position(|w| w == needle).unwrap();
        // Same length: 1.2.840.10008.1.2.1 -> 1.2.840.10008.1.2.5 (RLE).
        jpeg[pos + needle.len() - 1] = b'5';
        assert!(matches!(decode(&jpeg), Err(Error::Decode(m)) if m.contains("transfer syntax")));
    }
}
