//! Directory checkpoints: a key=value manifest plus one raw little-endian
//! float32 file per array (row-major, shape recorded in the manifest).
//!
//! The manifest ends with `hash=<sha256>` over every other manifest line and
//! every array's bytes; loading recomputes and compares it.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const FORMAT: &str = "q2t-checkpoint-v1";
const MANIFEST: &str = "manifest.txt";

#[derive(Clone, Debug, PartialEq)]
pub struct NamedArray {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Clone, Debug, Default)]
pub struct Checkpoint {
    pub meta: BTreeMap<String, String>,
    pub arrays: BTreeMap<String, NamedArray>,
    pub hash: String,
}

impl Checkpoint {
    pub fn meta(&self, key: &str) -> Result<&str> {
        self.meta
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| Error::Integrity(format!("manifest lacks {key}")))
    }

    pub fn meta_parse<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        self.meta(key)?
            .parse()
            .map_err(|_| Error::Integrity(format!("manifest value for {key} does not parse")))
    }

    pub fn array(&self, name: &str, shape: &[usize]) -> Result<&NamedArray> {
        let a = self
            .arrays
            .get(name)
            .ok_or_else(|| Error::Integrity(format!("missing array {name}")))?;
        if a.shape != shape {
            return Err(Error::Shape(format!(
                "array {name} has shape {:?}, expected {shape:?}",
                a.shape
            )));
        }
        Ok(a)
    }
}

fn shape_str(shape: &[usize]) -> String {
    shape.iter().map(usize::to_string).collect::<Vec<_>>().join("x")
}

fn digest(meta_lines: &[String], arrays: &BTreeMap<String, NamedArray>) -> String {
    let mut h = Sha256::new();
    for line in meta_lines {
        h.update(line.as_bytes());
        h.update(b"\n");
    }
    for a in arrays.values() {
        h.update(a.name.as_bytes());
        h.update(shape_str(&a.shape).as_bytes());
        for v in &a.data {
            h.update(v.to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}

/// Writes a checkpoint and returns its content hash.
pub fn write(dir: &Path, meta: &[(String, String)], arrays: Vec<NamedArray>) -> Result<String> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let arrays: BTreeMap<String, NamedArray> =
        arrays.into_iter().map(|a| (a.name.clone(), a)).collect();
    let mut lines = vec![format!("format={FORMAT}")];
    lines.extend(meta.iter().map(|(k, v)| format!("{k}={v}")));
    for a in arrays.values() {
        lines.push(format!("array.{}={}", a.name, shape_str(&a.shape)));
    }
    let hash = digest(&lines, &arrays);
    for a in arrays.values() {
        let path = dir.join(format!("{}.f32", a.name));
        let bytes: Vec<u8> = a.data.iter().flat_map(|v| v.to_le_bytes()).collect();
        fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
    }
    let mut body = lines.join("\n");
    body.push_str(&format!("\nhash={hash}\n"));
    let path = dir.join(MANIFEST);
    fs::write(&path, body).map_err(|e| Error::io(&path, e))?;
    Ok(hash)
}

/// Reads and verifies a checkpoint directory.
pub fn read(dir: &Path) -> Result<Checkpoint> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let mut lines = Vec::new();
    let mut meta = BTreeMap::new();
    let mut shapes = Vec::new();
    let mut stored_hash = None;
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Integrity(format!("bad manifest line {line:?}")))?;
        if k == "hash" {
            stored_hash = Some(v.to_string());
            continue;
        }
        lines.push(line.to_string());
        if let Some(name) = k.strip_prefix("array.") {
            let shape = v
                .split('x')
                .map(|d| d.parse::<usize>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|_| Error::Integrity(format!("bad shape {v:?} for {name}")))?;
            shapes.push((name.to_string(), shape));
        } else if k != "format" {
            meta.insert(k.to_string(), v.to_string());
        } else if v != FORMAT {
            return Err(Error::Integrity(format!("unknown checkpoint format {v}")));
        }
    }
    let stored_hash = stored_hash.ok_or_else(|| Error::Integrity("manifest has no hash".into()))?;
    let mut arrays = BTreeMap::new();
    for (name, shape) in shapes {
        let apath = dir.join(format!("{name}.f32"));
        let bytes = fs::read(&apath).map_err(|e| Error::io(&apath, e))?;
        let expected: usize = shape.iter().product();
        if bytes.len() != expected * 4 {
            return Err(Error::Integrity(format!(
                "{name}: {} bytes on disk, shape needs {}",
                bytes.len(),
                expected * 4
            )));
        }
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        arrays.insert(name.clone(), NamedArray { name, shape, data });
    }
    let actual = digest(&lines, &arrays);
    if actual != stored_hash {
        return Err(Error::Integrity(format!(
            "content hash {actual} does not match manifest {stored_hash}"
        )));
    }
    Ok(Checkpoint {
        meta,
        arrays,
        hash: actual,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_tamper_detection() {
        let dir = tempfile::tempdir().unwrap();
        let arr = NamedArray {
            name: "w".into(),
            shape: vec![2, 3],
            data: vec![1.0, -2.5, 3.0, 0.0, f32::MIN_POSITIVE, 7.25],
        };
        let hash = write(dir.path(), &[("kind".into(), "test".into())], vec![arr.clone()]).unwrap();
        let ck = read(dir.path()).unwrap();
        assert_eq!(ck.hash, hash);
        assert_eq!(ck.arrays["w"], arr);
        assert_eq!(ck.meta("kind").unwrap(), "test");

        let manifest = dir.path().join(MANIFEST);
        let text = fs::read_to_string(&manifest).unwrap();
        let tampered = text.replace(&hash, &"0".repeat(64));
        fs::write(&manifest, tampered).unwrap();
        assert!(matches!(read(dir.path()), Err(Error::Integrity(_))));

        fs::write(&manifest, text).unwrap();
        let mut bytes = fs::read(dir.path().join("w.f32")).unwrap();
        bytes[0] ^= 1;
        fs::write(dir.path().join("w.f32"), bytes).unwrap();
        assert!(matches!(read(dir.path()), Err(Error::Integrity(_))));
    }
}
