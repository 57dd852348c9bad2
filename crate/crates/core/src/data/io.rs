//! `.ptxt` and `.ptbin` point cloud files.
//!
//! Text: a header line `PTPA-TEXT 1 <N> <C_in>`, then one line per point
//! `x y z f1 .. fC label`. Binary (little-endian): `"PTPA"`, `u32` version,
//! `u32` N, `u32` C_in, then per point 3 `f64` coordinates, C_in `f64`
//! features and an `i32` label.

use std::fmt::Write as _;
use std::path::Path;

use super::PointCloud;
use crate::Error;

pub const PTBIN_MAGIC: &[u8; 4] = b"PTPA";
const VERSION: u32 = 1;
const TEXT_HEADER: &str = "PTPA-TEXT";

pub fn write_ptbin(cloud: &PointCloud) -> Vec<u8> {
    let n = cloud.len();
    let mut out = Vec::with_capacity(16 + n * (28 + 8 * cloud.feature_dim));
    out.extend_from_slice(PTBIN_MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(n as u32).to_le_bytes());
    out.extend_from_slice(&(cloud.feature_dim as u32).to_le_bytes());
    for i in 0..n {
        for v in cloud.coords[i] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for v in cloud.feature_row(i) {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&(cloud.labels[i] as i32).to_le_bytes());
    }
    out
}

fn truncated(offset: usize, needed: usize) -> Error {
    Error::Data(format!("truncated point cloud at byte {offset}: needed {needed} more bytes"))
}

pub fn read_ptbin(bytes: &[u8]) -> Result<PointCloud, Error> {
    if bytes.len() < 4 || &bytes[..4] != PTBIN_MAGIC {
        return Err(Error::Data("bad magic at byte 0: expected \"PTPA\"".into()));
    }
    if bytes.len() < 16 {
        return Err(truncated(bytes.len(), 16 - bytes.len()));
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes"));
    let version = u32_at(4);
    if version != VERSION {
        return Err(Error::Data(format!("unsupported version {version} at byte 4")));
    }
    let n = u32_at(8) as usize;
    let c = u32_at(12) as usize;
    let record = 3 * 8 + c * 8 + 4;
    let need = n.checked_mul(record).and_then(|b| b.checked_add(16)).ok_or_else(|| truncated(16, usize::MAX))?;
    if bytes.len() < need {
        let whole = 16 + (bytes.len() - 16) / record * record;
        return Err(truncated(whole, need - whole));
    }
    if bytes.len() > need {
        return Err(Error::Data(format!("trailing bytes after last point at byte {need}")));
    }
    let f64_at = |o: usize| f64::from_le_bytes(bytes[o..o + 8].try_into().expect("8 bytes"));
    let mut coords = Vec::with_capacity(n);
    let mut features = Vec::with_capacity(n * c);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let o = 16 + i * record;
        coords.push([f64_at(o), f64_at(o + 8), f64_at(o + 16)]);
        features.extend((0..c).map(|j| f64_at(o + 24 + 8 * j)));
        let l = o + 24 + 8 * c;
        labels.push(i64::from(i32::from_le_bytes(bytes[l..l + 4].try_into().expect("4 bytes"))));
    }
    PointCloud::new(coords, features, c, labels)
}

pub fn write_ptxt(cloud: &PointCloud) -> String {
    let mut s = format!("{TEXT_HEADER} {VERSION} {} {}\n", cloud.len(), cloud.feature_dim);
    for i in 0..cloud.len() {
        let [x, y, z] = cloud.coords[i];
        // shortest representation that round-trips exactly
        write!(s, "{x:?} {y:?} {z:?}").expect("write to String");
        for v in cloud.feature_row(i) {
            write!(s, " {v:?}").expect("write to String");
        }
        writeln!(s, " {}", cloud.labels[i]).expect("write to String");
    }
    s
}

pub fn read_ptxt(text: &str) -> Result<PointCloud, Error> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (_, header) = lines.next().ok_or_else(|| Error::Data("empty text point cloud".into()))?;
    let h: Vec<&str> = header.split_whitespace().collect();
    if h.len() != 4 || h[0] != TEXT_HEADER {
        return Err(Error::Data(format!("line 1: expected header \"{TEXT_HEADER} 1 <N> <C_in>\"")));
    }
    if h[1] != "1" {
        return Err(Error::Data(format!("line 1: unsupported version {}", h[1])));
    }
    let parse_usize = |s: &str| s.parse::<usize>().map_err(|_| Error::Data(format!("line 1: bad count {s:?}")));
    let n = parse_usize(h[2])?;
    let c = parse_usize(h[3])?;
    let mut coords = Vec::with_capacity(n);
    let mut features = Vec::with_capacity(n * c);
    let mut labels = Vec::with_capacity(n);
    for (ln, line) in lines {
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 4 + c {
            return Err(Error::Data(format!("line {}: expected {} fields, found {}", ln + 1, 4 + c, fields.len())));
        }
        let num = |s: &str| s.parse::<f64>().map_err(|_| Error::Data(format!("line {}: bad number {s:?}", ln + 1)));
        coords.push([num(fields[0])?, num(fields[1])?, num(fields[2])?]);
        for f in &fields[3..3 + c] {
            features.push(num(f)?);
        }
        let label = fields[3 + c];
        labels.push(label.parse::<i64>().map_err(|_| Error::Data(format!("line {}: bad label {label:?}", ln + 1)))?);
    }
    if coords.len() != n {
        return Err(Error::Data(format!("header declares {n} points but file has {}", coords.len())));
    }
    PointCloud::new(coords, features, c, labels)
}

/// Read by extension: `.ptxt` or `.ptbin`.
pub fn read_cloud(path: &Path) -> Result<PointCloud, Error> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let ctx = |e: Error| Error::Data(format!("{}: {e}", path.display()));
    match path.extension().and_then(|e| e.to_str()) {
        Some("ptxt") => read_ptxt(&String::from_utf8_lossy(&bytes)).map_err(ctx),
        Some("ptbin") => read_ptbin(&bytes).map_err(ctx),
        _ => Err(Error::Data(format!("{}: expected a .ptxt or .ptbin file", path.display()))),
    }
}

pub fn write_cloud(path: &Path, cloud: &PointCloud) -> Result<(), Error> {
    let bytes = match path.extension().and_then(|e| e.to_str()) {
        Some("ptxt") => write_ptxt(cloud).into_bytes(),
        Some("ptbin") => write_ptbin(cloud),
        _ => return Err(Error::Data(format!("{}: expected a .ptxt or .ptbin file", path.display()))),
    };
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}
