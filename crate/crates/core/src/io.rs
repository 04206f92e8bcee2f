//! File formats: IQF1 waveform files, ACW1 weight containers, and
//! key=value metadata sidecars.
//!
//! IQF1 layout: 8-byte magic `ACWAVEIQ`, u32 version (=1), u32 reserved,
//! f64 sample rate, u64 sample count, then interleaved little-endian
//! f32 (I, Q) pairs.
//!
//! ACW1 layout: a text header of `key=value` lines (first line `ACW1`,
//! closed by `end_header`) describing the model and the array table,
//! followed by the raw little-endian array payloads in header order.

use crate::error::{Error, Result};
use crate::signal::Waveform;
use num_complex::Complex64;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

const IQF1_MAGIC: &[u8; 8] = b"ACWAVEIQ";
const IQF1_VERSION: u32 = 1;

/// Storage width for ACW1 array payloads.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

impl Precision {
    pub fn as_str(&self) -> &'static str {
        match self {
            Precision::F32 => "f32",
            Precision::F64 => "f64",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "f32" => Ok(Precision::F32),
            "f64" => Ok(Precision::F64),
            other => Err(Error::config(format!("unknown precision '{other}'"))),
        }
    }
}

/// Write a waveform to an IQF1 file. Samples are quantized to f32.
pub fn write_iqf1(path: &Path, w: &Waveform) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    out.write_all(IQF1_MAGIC)?;
    out.write_all(&IQF1_VERSION.to_le_bytes())?;
    out.write_all(&0u32.to_le_bytes())?;
    out.write_all(&w.sample_rate_hz.to_le_bytes())?;
    out.write_all(&(w.len() as u64).to_le_bytes())?;
    for s in &w.samples {
        out.write_all(&(s.re as f32).to_le_bytes())?;
        out.write_all(&(s.im as f32).to_le_bytes())?;
    }
    out.flush()?;
    Ok(())
}

/// Read an IQF1 file, rejecting bad magic or version.
pub fn read_iqf1(path: &Path) -> Result<Waveform> {
    let pstr = path.display().to_string();
    let mut rd = BufReader::new(File::open(path)?);

    let mut magic = [0u8; 8];
    rd.read_exact(&mut magic)
        .map_err(|_| Error::format(&pstr, "file too short for IQF1 header"))?;
    if &magic != IQF1_MAGIC {
        return Err(Error::format(&pstr, "bad magic (not an IQF1 file)"));
    }
    let version = read_u32(&mut rd, &pstr)?;
    if version != IQF1_VERSION {
        return Err(Error::format(&pstr, format!("unsupported IQF1 version {version}")));
    }
    let _reserved = read_u32(&mut rd, &pstr)?;
    let sample_rate = f64::from_le_bytes(read_n::<8>(&mut rd, &pstr)?);
    let count = u64::from_le_bytes(read_n::<8>(&mut rd, &pstr)?) as usize;

    let mut samples = Vec::with_capacity(count);
    for _ in 0..count {
        let i = f32::from_le_bytes(read_n::<4>(&mut rd, &pstr)?);
        let q = f32::from_le_bytes(read_n::<4>(&mut rd, &pstr)?);
        samples.push(Complex64::new(f64::from(i), f64::from(q)));
    }
    Waveform::new(samples, sample_rate, path.file_stem().and_then(|s| s.to_str()).unwrap_or("iqf1"))
}

fn read_u32(rd: &mut impl Read, path: &str) -> Result<u32> {
    Ok(u32::from_le_bytes(read_n::<4>(rd, path)?))
}

fn read_n<const N: usize>(rd: &mut impl Read, path: &str) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    rd.read_exact(&mut buf)
        .map_err(|_| Error::format(path, "truncated file"))?;
    Ok(buf)
}

/// A named 2-D array inside an ACW1 container. Values are held as f64
/// in memory; the on-disk width follows the container precision.
#[derive(Debug, Clone, PartialEq)]
pub struct NamedArray {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

/// ACW1 weight container: ordered header keys plus named arrays.
#[derive(Debug, Clone, PartialEq)]
pub struct Acw1 {
    pub header: Vec<(String, String)>,
    pub precision: Precision,
    pub arrays: Vec<NamedArray>,
}

impl Acw1 {
    pub fn get(&self, key: &str) -> Option<&str> {
        self.header.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn require(&self, key: &str) -> Result<&str> {
        self.get(key)
            .ok_or_else(|| Error::config(format!("ACW1 header missing key '{key}'")))
    }
}

/// Write an ACW1 container.
pub fn write_acw1(path: &Path, acw: &Acw1) -> Result<()> {
    for arr in &acw.arrays {
        if arr.data.len() != arr.rows * arr.cols {
            return Err(Error::config(format!(
                "array '{}' has {} values for shape {}x{}",
                arr.name,
                arr.data.len(),
                arr.rows,
                arr.cols
            )));
        }
    }
    let mut out = BufWriter::new(File::create(path)?);
    writeln!(out, "ACW1")?;
    writeln!(out, "precision={}", acw.precision.as_str())?;
    for (k, v) in &acw.header {
        writeln!(out, "{k}={v}")?;
    }
    writeln!(out, "arrays={}", acw.arrays.len())?;
    for (idx, arr) in acw.arrays.iter().enumerate() {
        writeln!(out, "array.{idx}={}:{}x{}", arr.name, arr.rows, arr.cols)?;
    }
    writeln!(out, "end_header")?;
    for arr in &acw.arrays {
        match acw.precision {
            Precision::F32 => {
                for v in &arr.data {
                    out.write_all(&(*v as f32).to_le_bytes())?;
                }
            }
            Precision::F64 => {
                for v in &arr.data {
                    out.write_all(&v.to_le_bytes())?;
                }
            }
        }
    }
    out.flush()?;
    Ok(())
}

/// Read an ACW1 container, validating the array table.
pub fn read_acw1(path: &Path) -> Result<Acw1> {
    let pstr = path.display().to_string();
    let mut rd = BufReader::new(File::open(path)?);

    let mut header_bytes = Vec::new();
    loop {
        let mut byte = [0u8; 1];
        rd.read_exact(&mut byte)
            .map_err(|_| Error::format(&pstr, "truncated ACW1 header"))?;
        header_bytes.push(byte[0]);
        if header_bytes.ends_with(b"end_header\n") {
            break;
        }
        if header_bytes.len() > 1 << 20 {
            return Err(Error::format(&pstr, "ACW1 header exceeds 1 MiB"));
        }
    }
    let text = String::from_utf8(header_bytes)
        .map_err(|_| Error::format(&pstr, "ACW1 header is not UTF-8"))?;
    let mut lines = text.lines();
    if lines.next() != Some("ACW1") {
        return Err(Error::format(&pstr, "bad magic (not an ACW1 file)"));
    }

    let mut precision = None;
    let mut header = Vec::new();
    let mut table: Vec<(String, usize, usize)> = Vec::new();
    let mut declared = None;
    for line in lines {
        if line == "end_header" {
            break;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::format(&pstr, format!("malformed header line '{line}'")))?;
        if k == "precision" {
            precision = Some(Precision::parse(v)?);
        } else if k == "arrays" {
            declared = Some(
                v.parse::<usize>()
                    .map_err(|_| Error::format(&pstr, "bad arrays count"))?,
            );
        } else if let Some(idx) = k.strip_prefix("array.") {
            let i: usize = idx
                .parse()
                .map_err(|_| Error::format(&pstr, format!("bad array index '{idx}'")))?;
            if i != table.len() {
                return Err(Error::format(&pstr, "array table out of order"));
            }
            let (name, shape) = v
                .split_once(':')
                .ok_or_else(|| Error::format(&pstr, format!("malformed array entry '{v}'")))?;
            let (r, c) = shape
                .split_once('x')
                .ok_or_else(|| Error::format(&pstr, format!("malformed shape '{shape}'")))?;
            let rows = r.parse().map_err(|_| Error::format(&pstr, "bad rows"))?;
            let cols = c.parse().map_err(|_| Error::format(&pstr, "bad cols"))?;
            table.push((name.to_string(), rows, cols));
        } else {
            header.push((k.to_string(), v.to_string()));
        }
    }
    let precision = precision.ok_or_else(|| Error::format(&pstr, "missing precision"))?;
    if declared != Some(table.len()) {
        return Err(Error::format(&pstr, "array count disagrees with table"));
    }

    let mut arrays = Vec::with_capacity(table.len());
    for (name, rows, cols) in table {
        let count = rows * cols;
        let mut data = Vec::with_capacity(count);
        match precision {
            Precision::F32 => {
                for _ in 0..count {
                    data.push(f64::from(f32::from_le_bytes(read_n::<4>(&mut rd, &pstr)?)));
                }
            }
            Precision::F64 => {
                for _ in 0..count {
                    data.push(f64::from_le_bytes(read_n::<8>(&mut rd, &pstr)?));
                }
            }
        }
        arrays.push(NamedArray { name, rows, cols, data });
    }
    Ok(Acw1 {
        header,
        precision,
        arrays,
    })
}

/// Write an ordered key=value sidecar (dataset.meta, resolved configs).
pub fn write_kv(path: &Path, pairs: &[(String, String)]) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    for (k, v) in pairs {
        writeln!(out, "{k}={v}")?;
    }
    out.flush()?;
    Ok(())
}

/// Read a key=value sidecar, skipping blank lines and `#` comments.
pub fn read_kv(path: &Path) -> Result<Vec<(String, String)>> {
    let pstr = path.display().to_string();
    let text = std::fs::read_to_string(path)?;
    let mut pairs = Vec::new();
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::format(&pstr, format!("malformed line '{line}'")))?;
        pairs.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(pairs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::path::PathBuf;

    fn tmp(name: &str) -> PathBuf {
        let mut p = std::env::temp_dir();
        p.push(format!("aclstm_io_test_{}_{name}", std::process::id()));
        p
    }

    fn sample_wave(n: usize) -> Waveform {
        let samples = (0..n)
            .map(|i| Complex64::new((i as f64 * 0.3).sin() as f32 as f64, (i as f64 * 0.7).cos() as f32 as f64))
            .collect();
        Waveform::new(samples, 800e6, "t").unwrap()
    }

    #[test]
    fn iqf1_round_trip_is_bit_exact_in_f32() {
        let w = sample_wave(100);
        let path = tmp("rt.iqf1");
        write_iqf1(&path, &w).unwrap();
        let back = read_iqf1(&path).unwrap();
        assert_eq!(back.len(), 100);
        assert_eq!(back.sample_rate_hz, 800e6);
        for (a, b) in w.samples.iter().zip(back.samples.iter()) {
            // source values were already f32-representable
            assert_eq!(a, b);
        }
        std::fs::remove_file(path).ok();
    }

    #[test]
    fn iqf1_rejects_bad_magic() {
        let path = tmp("bad_magic.iqf1");
        std::fs::write(&path, b"NOTMAGIC________________________").unwrap();
        let err = read_iqf1(&path).unwrap_err();
        assert!(format!("{err}").contains("bad magic"), "{err}");
        std::fs::remove_file(path).ok();
    }

    #[test]
    fn iqf1_rejects_bad_version() {
        let w = sample_wave(4);
        let path = tmp("bad_version.iqf1");
        write_iqf1(&path, &w).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[8] = 9; // version field
        std::fs::write(&path, bytes).unwrap();
        let err = read_iqf1(&path).unwrap_err();
        assert!(format!("{err}").contains("version"), "{err}");
        std::fs::remove_file(path).ok();
    }

    #[test]
    fn acw1_round_trip_both_precisions() {
        for precision in [Precision::F64, Precision::F32] {
            let acw = Acw1 {
                header: vec![("model".into(), "lstm".into()), ("seed".into(), "42".into())],
                precision,
                arrays: vec![
                    NamedArray {
                        name: "w".into(),
                        rows: 2,
                        cols: 3,
                        data: vec![1.0, -0.5, 0.25, 2.0, 0.125, -4.0],
                    },
                    NamedArray {
                        name: "b".into(),
                        rows: 2,
                        cols: 1,
                        data: vec![0.5, -1.5],
                    },
                ],
            };
            let path = tmp(&format!("wt_{}.acw1", precision.as_str()));
            write_acw1(&path, &acw).unwrap();
            let back = read_acw1(&path).unwrap();
            assert_eq!(back, acw); // chosen values are exactly f32-representable
            std::fs::remove_file(path).ok();
        }
    }

    #[test]
    fn acw1_rejects_bad_magic() {
        let path = tmp("bad.acw1");
        std::fs::write(&path, b"NOPE\nend_header\n").unwrap();
        assert!(read_acw1(&path).is_err());
        std::fs::remove_file(path).ok();
    }

    #[test]
    fn kv_round_trip_skips_comments() {
        let path = tmp("meta.kv");
        std::fs::write(&path, "# comment\n\na=1\nb = two \n").unwrap();
        let pairs = read_kv(&path).unwrap();
        assert_eq!(pairs, vec![("a".into(), "1".into()), ("b".into(), "two".into())]);
        std::fs::remove_file(path).ok();
    }
}
