//! File formats: little-endian binary primitives, PGM images, raw float32
//! blobs with sidecars, and CSV tables.
//!
//! All writers are deterministic; [`atomic_write`] goes through a temp file
//! plus rename so partially written artifacts never appear under their final
//! name.

use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::Array2;

use crate::error::{Error, Result};

/// Growable little-endian byte writer.
#[derive(Default)]
pub struct ByteWriter {
    buf: Vec<u8>,
}

impl ByteWriter {
    pub fn new() -> Self {
        ByteWriter { buf: Vec::new() }
    }

    pub fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    pub fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn bytes(&mut self, v: &[u8]) {
        self.buf.extend_from_slice(v);
    }

    pub fn into_inner(self) -> Vec<u8> {
        self.buf
    }
}

/// Cursor-based little-endian reader with bounds checking.
pub struct ByteReader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        ByteReader { buf, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Parse(format!(
                "unexpected end of data at offset {} (wanted {n} bytes)",
                self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn bytes(&mut self, n: usize) -> Result<&'a [u8]> {
        self.take(n)
    }

    pub fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }
}

/// Writes `bytes` to `path` via a temp file in the same directory + rename.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    fs::create_dir_all(dir)?;
    let tmp = path.with_extension(format!(
        "{}.tmp",
        path.extension().and_then(|e| e.to_str()).unwrap_or("out")
    ));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Writes a binary 8- or 16-bit PGM (P5). 16-bit samples are big-endian per
/// the format. Values must already be scaled into `0..=maxval`.
pub fn write_pgm(path: &Path, pixels: &Array2<u16>, maxval: u16) -> Result<()> {
    let (h, w) = pixels.dim();
    let mut buf = Vec::new();
    buf.extend_from_slice(format!("P5\n{w} {h}\n{maxval}\n").as_bytes());
    if maxval > 255 {
        for &p in pixels.iter() {
            buf.extend_from_slice(&p.to_be_bytes());
        }
    } else {
        for &p in pixels.iter() {
            buf.push(p as u8);
        }
    }
    atomic_write(path, &buf)
}

/// Reads a binary PGM (P5), 8- or 16-bit, returning intensities in `[0, 1]`.
pub fn read_pgm(path: &Path) -> Result<Array2<f64>> {
    let data = fs::read(path)?;
    let mut pos = 0;
    let mut fields: Vec<usize> = Vec::new();
    // Header: "P5", then width, height, maxval; '#' starts a comment.
    if data.len() < 2 || &data[0..2] != b"P5" {
        return Err(Error::Parse("not a binary PGM (missing P5 magic)".into()));
    }
    pos += 2;
    while fields.len() < 3 {
        while pos < data.len() && (data[pos].is_ascii_whitespace()) {
            pos += 1;
        }
        if pos < data.len() && data[pos] == b'#' {
            while pos < data.len() && data[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < data.len() && data[pos].is_ascii_digit() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Parse("malformed PGM header".into()));
        }
        let v: usize = std::str::from_utf8(&data[start..pos])
            .map_err(|_| Error::Parse("malformed PGM header".into()))?
            .parse()
            .map_err(|_| Error::Parse("malformed PGM header".into()))?;
        fields.push(v);
    }
    // Single whitespace byte separates header from samples.
    pos += 1;
    let (w, h, maxval) = (fields[0], fields[1], fields[2]);
    if maxval == 0 || maxval > 65535 {
        return Err(Error::Parse(format!("unsupported PGM maxval {maxval}")));
    }
    let wide = maxval > 255;
    let needed = w * h * if wide { 2 } else { 1 };
    if data.len() < pos + needed {
        return Err(Error::Parse("PGM sample data truncated".into()));
    }
    let mut img = Array2::zeros((h, w));
    for i in 0..h {
        for j in 0..w {
            let raw = if wide {
                let o = pos + 2 * (i * w + j);
                u16::from_be_bytes([data[o], data[o + 1]]) as f64
            } else {
                data[pos + i * w + j] as f64
            };
            img[[i, j]] = raw / maxval as f64;
        }
    }
    Ok(img)
}

/// Writes an `n x d` matrix as little-endian float32, row-major, plus a
/// JSON sidecar `<path>.json` describing the shape.
pub fn write_f32_raw(path: &Path, rows: &Array2<f64>) -> Result<()> {
    let mut buf = Vec::with_capacity(rows.len() * 4);
    for &v in rows.iter() {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    atomic_write(path, &buf)?;
    let sidecar = format!(
        "{{\"rows\": {}, \"cols\": {}, \"dtype\": \"float32\", \"byte_order\": \"little\", \"layout\": \"row-major\"}}\n",
        rows.nrows(),
        rows.ncols()
    );
    atomic_write(&sidecar_path(path), sidecar.as_bytes())
}

/// Sidecar path for a raw blob: `<path>.json`.
pub fn sidecar_path(path: &Path) -> std::path::PathBuf {
    let mut os = path.as_os_str().to_os_string();
    os.push(".json");
    std::path::PathBuf::from(os)
}

/// Reads a little-endian float32 raw blob with known shape.
pub fn read_f32_raw(path: &Path, rows: usize, cols: usize) -> Result<Array2<f64>> {
    let data = fs::read(path)?;
    if data.len() != rows * cols * 4 {
        return Err(Error::Parse(format!(
            "raw f32 blob has {} bytes, expected {}",
            data.len(),
            rows * cols * 4
        )));
    }
    let mut out = Array2::zeros((rows, cols));
    for i in 0..rows {
        for j in 0..cols {
            let o = 4 * (i * cols + j);
            out[[i, j]] = f32::from_le_bytes([data[o], data[o + 1], data[o + 2], data[o + 3]]) as f64;
        }
    }
    Ok(out)
}

/// Writes a CSV with a header row; every value is formatted with the shortest
/// round-trip `f64` representation.
pub fn write_csv(path: &Path, header: &[&str], rows: &[Vec<f64>]) -> Result<()> {
    let mut s = String::new();
    s.push_str(&header.join(","));
    s.push('\n');
    for row in rows {
        let cells: Vec<String> = row.iter().map(|v| format!("{v}")).collect();
        s.push_str(&cells.join(","));
        s.push('\n');
    }
    atomic_write(path, s.as_bytes())
}

/// Reads a numeric CSV, skipping the header row.
pub fn read_csv(path: &Path) -> Result<Vec<Vec<f64>>> {
    let text = fs::read_to_string(path)?;
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if i == 0 || line.trim().is_empty() {
            continue;
        }
        let row: Result<Vec<f64>> = line
            .split(',')
            .map(|c| {
                c.trim()
                    .parse::<f64>()
                    .map_err(|_| Error::Parse(format!("bad number '{c}' on line {}", i + 1)))
            })
            .collect();
        rows.push(row?);
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn byte_writer_reader_round_trip() {
        let mut w = ByteWriter::new();
        w.u8(7);
        w.u32(123456);
        w.u64(u64::MAX - 3);
        w.f64(-0.1234567890123);
        w.bytes(b"tail");
        let buf = w.into_inner();
        let mut r = ByteReader::new(&buf);
        assert_eq!(r.u8().unwrap(), 7);
        assert_eq!(r.u32().unwrap(), 123456);
        assert_eq!(r.u64().unwrap(), u64::MAX - 3);
        assert_eq!(r.f64().unwrap(), -0.1234567890123);
        assert_eq!(r.bytes(4).unwrap(), b"tail");
        assert_eq!(r.remaining(), 0);
        assert!(r.u8().is_err());
    }

    #[test]
    fn pgm_16bit_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("img.pgm");
        let img = Array2::from_shape_fn((3, 5), |(i, j)| (i * 5 + j) as u16 * 4000);
        write_pgm(&path, &img, 65535).unwrap();
        let back = read_pgm(&path).unwrap();
        for (a, b) in back.iter().zip(img.iter()) {
            assert!((a - *b as f64 / 65535.0).abs() < 1e-12);
        }
    }

    #[test]
    fn f32_raw_round_trip_and_sidecar() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("samples.f32");
        let m = Array2::from_shape_fn((4, 3), |(i, j)| i as f64 * 0.25 - j as f64 * 0.5);
        write_f32_raw(&path, &m).unwrap();
        let back = read_f32_raw(&path, 4, 3).unwrap();
        for (a, b) in back.iter().zip(m.iter()) {
            assert!((a - b).abs() < 1e-6);
        }
        let sidecar = fs::read_to_string(sidecar_path(&path)).unwrap();
        assert!(sidecar.contains("\"rows\": 4"));
        assert!(sidecar.contains("\"cols\": 3"));
    }

    #[test]
    fn csv_round_trip_preserves_full_precision() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.csv");
        let rows = vec![vec![0.1 + 0.2, -1e-17], vec![std::f64::consts::PI, 42.0]];
        write_csv(&path, &["a", "b"], &rows).unwrap();
        let back = read_csv(&path).unwrap();
        assert_eq!(back, rows);
    }
}
