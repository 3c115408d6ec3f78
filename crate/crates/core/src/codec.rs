//! Binary sample files and dataset manifests.
//!
//! A sample file is a 16-byte little-endian header followed by the payload:
//!
//! | offset | size | field                                                  |
//! |-------:|-----:|--------------------------------------------------------|
//! | 0      | 4    | magic `SIFA`                                           |
//! | 4      | 2    | version: low byte format version (1), high byte flags  |
//! | 6      | 2    | dtype code (1 = f32)                                   |
//! | 8      | 4    | height                                                 |
//! | 12     | 4    | width                                                  |
//!
//! Flag bit 0 marks a trailing mask payload, bits 1-2 carry the domain tag.
//! The image payload is row-major f32, the optional mask row-major u8.
//!
//! Manifests list one `<path>,<domain>,<split>` record per line.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use crate::{DomainTag, Error, Image, LabelMask, Result, Sample};

pub const MAGIC: [u8; 4] = *b"SIFA";
pub const FORMAT_VERSION: u8 = 1;
pub const DTYPE_F32: u16 = 1;
pub const HEADER_LEN: usize = 16;

const FLAG_MASK: u8 = 0b001;
const FLAG_DOMAIN_SHIFT: u8 = 1;
const FLAG_KNOWN: u8 = 0b111;

pub fn encode_sample(sample: &Sample) -> Vec<u8> {
    let image = &sample.image;
    let (h, w) = (image.height(), image.width());
    let mut flags = (image.domain().code() & 0b11) << FLAG_DOMAIN_SHIFT;
    if sample.mask.is_some() {
        flags |= FLAG_MASK;
    }
    let mask_len = if sample.mask.is_some() { h * w } else { 0 };
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * h * w + mask_len);
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&u16::from_le_bytes([FORMAT_VERSION, flags]).to_le_bytes());
    out.extend_from_slice(&DTYPE_F32.to_le_bytes());
    out.extend_from_slice(&(h as u32).to_le_bytes());
    out.extend_from_slice(&(w as u32).to_le_bytes());
    for v in image.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    if let Some(mask) = &sample.mask {
        out.extend_from_slice(mask.data());
    }
    out
}

/// Parses a sample file; mask labels must lie in `0..classes`.
pub fn decode_sample(bytes: &[u8], classes: usize) -> Result<Sample> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::format(bytes.len(), "file ends inside the 16-byte header"));
    }
    if bytes[0..4] != MAGIC {
        return Err(Error::format(0, "bad magic, expected `SIFA`"));
    }
    if bytes[4] != FORMAT_VERSION {
        return Err(Error::format(4, format!("unsupported format version {}", bytes[4])));
    }
    let flags = bytes[5];
    if flags & !FLAG_KNOWN != 0 {
        return Err(Error::format(5, format!("unknown flag bits {flags:#010b}")));
    }
    let dtype = u16::from_le_bytes([bytes[6], bytes[7]]);
    if dtype != DTYPE_F32 {
        return Err(Error::format(6, format!("unsupported dtype code {dtype}")));
    }
    let h = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let w = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
    if h == 0 {
        return Err(Error::format(8, "height is zero"));
    }
    if w == 0 {
        return Err(Error::format(12, "width is zero"));
    }
    let has_mask = flags & FLAG_MASK != 0;
    let domain = DomainTag::from_code((flags >> FLAG_DOMAIN_SHIFT) & 0b11).expect("two-bit domain code");

    let row_bytes = w * (4 + has_mask as usize);
    let expected = h * row_bytes;
    let actual = bytes.len() - HEADER_LEN;
    if actual != expected {
        if actual.is_multiple_of(row_bytes) {
            return Err(Error::Consistency(format!(
                "header declares {h}x{w} but the payload holds {}x{w}",
                actual / row_bytes
            )));
        }
        return Err(if actual < expected {
            Error::format(bytes.len(), format!("payload truncated, expected {expected} bytes"))
        } else {
            Error::format(HEADER_LEN + expected, "trailing bytes after payload")
        });
    }

    let image_end = HEADER_LEN + 4 * h * w;
    let data = bytes[HEADER_LEN..image_end]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let image = Image::new(h, w, data, domain)?;
    let mask = if has_mask {
        let labels = &bytes[image_end..];
        if let Some(i) = labels.iter().position(|&l| l as usize >= classes) {
            return Err(Error::format(image_end + i, format!("label {} exceeds class count {classes}", labels[i])));
        }
        Some(LabelMask::new(h, w, classes, labels.to_vec())?)
    } else {
        None
    };
    Sample::new(image, mask)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(Error::invalid(format!("unknown split `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestRecord {
    /// Path relative to the manifest's directory.
    pub path: String,
    pub domain: DomainTag,
    pub split: Split,
}

impl ManifestRecord {
    pub fn to_line(&self) -> String {
        format!("{},{},{}", self.path, self.domain, self.split)
    }
}

pub fn format_manifest(records: &[ManifestRecord]) -> String {
    let mut out = String::new();
    for r in records {
        out.push_str(&r.to_line());
        out.push('\n');
    }
    out
}

/// Parses manifest text; blank lines and `#` comments are skipped.
pub fn parse_manifest(text: &str) -> Result<Vec<ManifestRecord>> {
    let mut records = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        let bad = |why: &str| Error::invalid(format!("manifest line {}: {why}", lineno + 1));
        if fields.len() != 3 || fields[0].is_empty() {
            return Err(bad("expected `<path>,<domain>,<split>`"));
        }
        records.push(ManifestRecord {
            path: fields[0].to_string(),
            domain: fields[1].parse().map_err(|_| bad("unknown domain"))?,
            split: fields[2].parse().map_err(|_| bad("unknown split"))?,
        });
    }
    Ok(records)
}
