//! Netpbm-family readers and writers.
//!
//! * `P5` PGM, maxval up to 65535 (16-bit samples big-endian), mapped to
//!   `[0, 1]` by dividing by maxval.
//! * `Pf` grayscale PFM, `f32` samples, rows stored bottom-up; a negative
//!   scale means little-endian.
//!
//! Writes go to a temporary file in the destination directory and are
//! renamed into place, so a failed write never leaves a partial file.

use crate::error::{Error, Result};
use crate::image::{Image2D, Tissue, TissueLabelMap};
use std::io::Write;
use std::path::Path;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PgmDepth {
    Eight,
    Sixteen,
}

impl PgmDepth {
    fn maxval(self) -> u16 {
        match self {
            PgmDepth::Eight => 255,
            PgmDepth::Sixteen => 65535,
        }
    }
}

/// Writes `bytes` to `path` via a sibling temp file and an atomic rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}

struct HeaderReader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> HeaderReader<'a> {
    fn skip_space_and_comments(&mut self) {
        while self.pos < self.buf.len() {
            match self.buf[self.pos] {
                b'#' => {
                    while self.pos < self.buf.len() && self.buf[self.pos] != b'\n' {
                        self.pos += 1;
                    }
                }
                c if c.is_ascii_whitespace() => self.pos += 1,
                _ => break,
            }
        }
    }

    fn token(&mut self, what: &str) -> Result<&'a str> {
        self.skip_space_and_comments();
        let start = self.pos;
        while self.pos < self.buf.len() && !self.buf[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(Error::MalformedHeader(format!("missing {what}")));
        }
        std::str::from_utf8(&self.buf[start..self.pos])
            .map_err(|_| Error::MalformedHeader(format!("non-ascii {what}")))
    }

    fn number<T: std::str::FromStr>(&mut self, what: &str) -> Result<T> {
        let tok = self.token(what)?;
        tok.parse()
            .map_err(|_| Error::MalformedHeader(format!("bad {what} {tok:?}")))
    }

    /// Consumes the single whitespace byte that terminates a netpbm header.
    fn end_of_header(&mut self) -> Result<usize> {
        match self.buf.get(self.pos) {
            Some(c) if c.is_ascii_whitespace() => Ok(self.pos + 1),
            _ => Err(Error::MalformedHeader("header not terminated".into())),
        }
    }
}

fn magic(bytes: &[u8]) -> String {
    String::from_utf8_lossy(&bytes[..bytes.len().min(2)]).into_owned()
}

fn dims(w: usize, h: usize) -> Result<()> {
    if w == 0 || h == 0 {
        return Err(Error::MalformedHeader(format!("zero dimension {w}x{h}")));
    }
    Ok(())
}

/// Raw PGM samples and maxval.
fn decode_pgm_raw(bytes: &[u8]) -> Result<(usize, usize, u16, Vec<u16>)> {
    if !bytes.starts_with(b"P5") {
        return Err(Error::UnsupportedMagic(magic(bytes)));
    }
    let mut r = HeaderReader { buf: bytes, pos: 2 };
    let w: usize = r.number("width")?;
    let h: usize = r.number("height")?;
    let maxval: u32 = r.number("maxval")?;
    dims(w, h)?;
    if maxval == 0 || maxval > 65535 {
        return Err(Error::MalformedHeader(format!("maxval {maxval} out of range")));
    }
    let start = r.end_of_header()?;
    let bps = if maxval < 256 { 1 } else { 2 };
    let expected = w * h * bps;
    let payload = &bytes[start..];
    if payload.len() < expected {
        return Err(Error::TruncatedPayload {
            expected,
            found: payload.len(),
        });
    }
    let samples = if bps == 1 {
        payload[..expected].iter().map(|&b| b as u16).collect()
    } else {
        payload[..expected]
            .chunks_exact(2)
            .map(|c| u16::from_be_bytes([c[0], c[1]]))
            .collect()
    };
    Ok((w, h, maxval as u16, samples))
}

pub fn decode_pgm(bytes: &[u8]) -> Result<Image2D> {
    let (w, h, maxval, samples) = decode_pgm_raw(bytes)?;
    let scale = 1.0 / maxval as f64;
    Image2D::new(w, h, samples.iter().map(|&s| (s as f64 * scale) as f32).collect())
}

pub fn encode_pgm(img: &Image2D, depth: PgmDepth) -> Vec<u8> {
    let maxval = depth.maxval();
    let mut out = format!("P5\n{} {}\n{}\n", img.width(), img.height(), maxval).into_bytes();
    for &p in img.pixels() {
        let q = (p.clamp(0.0, 1.0) as f64 * maxval as f64).round() as u16;
        match depth {
            PgmDepth::Eight => out.push(q as u8),
            PgmDepth::Sixteen => out.extend_from_slice(&q.to_be_bytes()),
        }
    }
    out
}

pub fn decode_pfm(bytes: &[u8]) -> Result<Image2D> {
    if !bytes.starts_with(b"Pf") {
        return Err(Error::UnsupportedMagic(magic(bytes)));
    }
    let mut r = HeaderReader { buf: bytes, pos: 2 };
    let w: usize = r.number("width")?;
    let h: usize = r.number("height")?;
    let scale: f64 = r.number("scale")?;
    dims(w, h)?;
    if scale == 0.0 || !scale.is_finite() {
        return Err(Error::MalformedHeader(format!("bad scale {scale}")));
    }
    let little = scale < 0.0;
    let start = r.end_of_header()?;
    let expected = w * h * 4;
    let payload = &bytes[start..];
    if payload.len() < expected {
        return Err(Error::TruncatedPayload {
            expected,
            found: payload.len(),
        });
    }
    let mut pixels = vec![0f32; w * h];
    for (i, c) in payload[..expected].chunks_exact(4).enumerate() {
        let raw = [c[0], c[1], c[2], c[3]];
        let v = if little {
            f32::from_le_bytes(raw)
        } else {
            f32::from_be_bytes(raw)
        };
        let (row, col) = (i / w, i % w);
        pixels[(h - 1 - row) * w + col] = v;
    }
    Image2D::new(w, h, pixels)
}

/// Little-endian PFM (scale `-1.0`).
pub fn encode_pfm(img: &Image2D) -> Vec<u8> {
    let (w, h) = img.dims();
    let mut out = format!("Pf\n{w} {h}\n-1.0\n").into_bytes();
    out.reserve(w * h * 4);
    for row in (0..h).rev() {
        for col in 0..w {
            out.extend_from_slice(&img.get(col, row).to_le_bytes());
        }
    }
    out
}

/// Loads a `P5` or `Pf` file, dispatching on the magic bytes.
pub fn load_image(path: &Path) -> Result<Image2D> {
    let bytes = std::fs::read(path)?;
    decode_image(&bytes)
}

pub fn decode_image(bytes: &[u8]) -> Result<Image2D> {
    match bytes.get(..2) {
        Some(b"P5") => decode_pgm(bytes),
        Some(b"Pf") => decode_pfm(bytes),
        _ => Err(Error::UnsupportedMagic(magic(bytes))),
    }
}

/// Saves by extension: `.pfm` as float, `.pgm` as 16-bit PGM.
pub fn save_image(img: &Image2D, path: &Path) -> Result<()> {
    let ext = path
        .extension()
        .and_then(|e| e.to_str())
        .map(str::to_ascii_lowercase);
    let bytes = match ext.as_deref() {
        Some("pfm") => encode_pfm(img),
        Some("pgm") => encode_pgm(img, PgmDepth::Sixteen),
        other => {
            return Err(Error::Invalid(format!(
                "unsupported output extension {other:?} for {}",
                path.display()
            )))
        }
    };
    write_atomic(path, &bytes)
}

pub fn save_pgm(img: &Image2D, path: &Path, depth: PgmDepth) -> Result<()> {
    write_atomic(path, &encode_pgm(img, depth))
}

pub fn encode_labels(labels: &TissueLabelMap) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", labels.width(), labels.height()).into_bytes();
    out.extend(labels.labels().iter().map(|&t| t as u8));
    out
}

/// Label maps are PGMs whose raw sample values are tissue codes 0..=3.
pub fn decode_labels(bytes: &[u8]) -> Result<TissueLabelMap> {
    let (w, h, _, samples) = decode_pgm_raw(bytes)?;
    let labels = samples
        .iter()
        .map(|&s| {
            Tissue::from_code(s)
                .ok_or_else(|| Error::Invalid(format!("label value {s} is not a tissue code")))
        })
        .collect::<Result<Vec<_>>>()?;
    TissueLabelMap::new(w, h, labels)
}

pub fn save_labels(labels: &TissueLabelMap, path: &Path) -> Result<()> {
    write_atomic(path, &encode_labels(labels))
}

pub fn load_labels(path: &Path) -> Result<TissueLabelMap> {
    decode_labels(&std::fs::read(path)?)
}
