//! On-disk formats: the `BLT0` tensor container, name-to-file manifests and
//! binary PGM images.
//!
//! A `BLT0` file is the magic `b"BLT0"`, a little-endian `u32` rank, `rank`
//! little-endian `u32` dimensions, then the values as little-endian `f32`.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"BLT0";

pub fn encode_tensor(t: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + 4 * t.rank() + 4 * t.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in t.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

pub fn decode_tensor(bytes: &[u8], path: &Path) -> Result<Tensor> {
    let corrupt = |reason: &str| Error::CorruptTensorFile { path: path.to_path_buf(), reason: reason.to_string() };
    if bytes.len() < 8 || &bytes[..4] != MAGIC {
        return Err(corrupt("bad magic"));
    }
    let word = |i: usize| -> Option<u32> {
        bytes.get(i..i + 4).map(|b| u32::from_le_bytes(b.try_into().expect("4 bytes")))
    };
    let rank = word(4).ok_or_else(|| corrupt("truncated header"))? as usize;
    if rank == 0 {
        return Err(corrupt("rank 0"));
    }
    let mut shape = Vec::with_capacity(rank);
    for r in 0..rank {
        let d = word(8 + 4 * r).ok_or_else(|| corrupt("truncated dimensions"))? as usize;
        if d == 0 {
            return Err(corrupt("zero dimension"));
        }
        shape.push(d);
    }
    let start = 8 + 4 * rank;
    let n: usize = shape.iter().product();
    let body = &bytes[start..];
    if body.len() != 4 * n {
        return Err(corrupt(&format!("expected {} payload bytes, found {}", 4 * n, body.len())));
    }
    let data: Vec<f64> = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
        .collect();
    Tensor::new(&shape, data).map_err(|_| corrupt("non-finite value"))
}

/// Writes `bytes` to `path` through a temporary sibling and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn save_tensor(t: &Tensor, path: &Path) -> Result<()> {
    write_atomic(path, &encode_tensor(t))
}

pub fn load_tensor(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::CorruptTensorFile { path: path.to_path_buf(), reason: "missing".into() },
        _ => Error::io(path, e),
    })?;
    decode_tensor(&bytes, path)
}

/// File name used for a parameter inside an archive directory.
fn file_name_for(name: &str) -> String {
    let safe: String = name.chars().map(|c| if c.is_ascii_alphanumeric() || c == '.' || c == '_' { c } else { '_' }).collect();
    format!("{safe}.blt0")
}

pub const ARCHIVE_MANIFEST: &str = "manifest.txt";

/// Saves every tensor of `store` into `dir` plus a `name<TAB>file` manifest.
pub fn save_archive(store: &ParamStore, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut manifest = String::new();
    for (name, t) in store.iter() {
        let file = file_name_for(name);
        save_tensor(t, &dir.join(&file))?;
        manifest.push_str(&format!("{name}\t{file}\n"));
    }
    write_atomic(&dir.join(ARCHIVE_MANIFEST), manifest.as_bytes())
}

/// Parses tab-separated manifest lines, skipping blanks and `#` comments.
pub fn read_manifest_lines(path: &Path) -> Result<Vec<Vec<String>>> {
    let text = fs::read_to_string(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::ManifestMissing(path.to_path_buf()),
        _ => Error::io(path, e),
    })?;
    Ok(text
        .lines()
        .map(str::trim_end)
        .filter(|l| !l.trim().is_empty() && !l.starts_with('#'))
        .map(|l| l.split('\t').map(str::to_string).collect())
        .collect())
}

pub fn load_archive(dir: &Path) -> Result<ParamStore> {
    let manifest = dir.join(ARCHIVE_MANIFEST);
    let mut store = ParamStore::new();
    for fields in read_manifest_lines(&manifest)? {
        let [name, file] = fields.as_slice() else {
            return Err(Error::CorruptTensorFile { path: manifest.clone(), reason: format!("bad manifest line {fields:?}") });
        };
        store.insert(name.clone(), load_tensor(&dir.join(file))?);
    }
    Ok(store)
}

/// Binary greyscale PGM (`P5`, maxval 255).
pub fn encode_pgm(width: usize, height: usize, pixels: &[u8]) -> Vec<u8> {
    assert_eq!(pixels.len(), width * height, "pgm pixel count");
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    out
}

pub fn write_pgm(path: &Path, width: usize, height: usize, pixels: &[u8]) -> Result<()> {
    write_atomic(path, &encode_pgm(width, height, pixels))
}

/// Reads a `P5` PGM with maxval <= 255; returns `(width, height, pixels)`.
pub fn read_pgm(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |r: &str| Error::CorruptTensorFile { path: PathBuf::from(path), reason: format!("pgm: {r}") };
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header"));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    pos += 1;
    if fields[0] != "P5" {
        return Err(bad("not P5"));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| bad("bad number"));
    let (w, h, maxval) = (num(&fields[1])?, num(&fields[2])?, num(&fields[3])?);
    if maxval > 255 {
        return Err(bad("16-bit pgm unsupported"));
    }
    let pixels = bytes.get(pos..pos + w * h).ok_or_else(|| bad("truncated pixels"))?.to_vec();
    Ok((w, h, pixels))
}
