//! Deterministic run artifacts: CSV tables, run directories and the manifest.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Environment variable naming the default output root.
pub const OUTPUT_ROOT_VAR: &str = "DECOFORCE_OUT";

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Cell {
    Float(f64),
    Int(i64),
}

impl From<f64> for Cell {
    fn from(v: f64) -> Self {
        Cell::Float(v)
    }
}

impl From<i64> for Cell {
    fn from(v: i64) -> Self {
        Cell::Int(v)
    }
}

impl From<usize> for Cell {
    fn from(v: usize) -> Self {
        Cell::Int(v as i64)
    }
}

impl From<i8> for Cell {
    fn from(v: i8) -> Self {
        Cell::Int(v as i64)
    }
}

/// 17 significant digits, so every value round-trips.
pub fn format_float(v: f64) -> String {
    format!("{v:.16e}")
}

/// A table with a fixed header.
#[derive(Clone, Debug, Default)]
pub struct CsvTable {
    pub header: Vec<String>,
    pub rows: Vec<Vec<Cell>>,
}

impl CsvTable {
    pub fn new(header: &[&str]) -> Self {
        CsvTable {
            header: header.iter().map(|s| s.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<Cell>) {
        debug_assert_eq!(row.len(), self.header.len());
        self.rows.push(row);
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Values of the named column as floats.
    pub fn column(&self, name: &str) -> Option<Vec<f64>> {
        let k = self.header.iter().position(|h| h == name)?;
        Some(
            self.rows
                .iter()
                .map(|r| match r[k] {
                    Cell::Float(v) => v,
                    Cell::Int(v) => v as f64,
                })
                .collect(),
        )
    }

    pub fn to_csv(&self) -> String {
        let mut s = self.header.join(",");
        s.push('\n');
        for row in &self.rows {
            for (k, c) in row.iter().enumerate() {
                if k > 0 {
                    s.push(',');
                }
                match c {
                    Cell::Float(v) => s.push_str(&format_float(*v)),
                    Cell::Int(v) => {
                        let _ = write!(s, "{v}");
                    }
                }
            }
            s.push('\n');
        }
        s
    }
}

/// Lowercase hex SHA-256 of `bytes`.
pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().fold(String::new(), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

/// Creates `root/name`, or `root/name-1`, `root/name-2`, … if taken.
pub fn create_run_dir(root: &Path, name: &str) -> Result<PathBuf> {
    fs::create_dir_all(root)?;
    for k in 0.. {
        let candidate = if k == 0 {
            root.join(name)
        } else {
            root.join(format!("{name}-{k}"))
        };
        match fs::create_dir(&candidate) {
            Ok(()) => return Ok(candidate),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => continue,
            Err(e) => return Err(e.into()),
        }
    }
    unreachable!()
}

/// Default output root: `$DECOFORCE_OUT` or `./runs`.
pub fn default_output_root() -> PathBuf {
    std::env::var_os(OUTPUT_ROOT_VAR)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("runs"))
}

#[derive(Clone, Debug, Serialize)]
pub struct Manifest {
    pub name: String,
    pub experiment: String,
    pub solvers: Vec<String>,
    pub config_hash: String,
    pub seeds: Vec<u64>,
    pub version: String,
    pub passed: bool,
    pub artifacts: Vec<String>,
}

/// Writes `files` into `dir` followed by `manifest.json` listing them.
pub fn write_artifacts(dir: &Path, files: &[(String, String)], mut manifest: Manifest) -> Result<Vec<PathBuf>> {
    let mut written = Vec::with_capacity(files.len() + 1);
    for (name, body) in files {
        if name.contains('/') || name.contains('\\') {
            return Err(Error::Internal(format!("artifact name `{name}` is not a plain file name")));
        }
        let path = dir.join(name);
        fs::write(&path, body)?;
        written.push(path);
    }
    manifest.artifacts = files.iter().map(|(n, _)| n.clone()).collect();
    let path = dir.join("manifest.json");
    fs::write(&path, serde_json::to_string_pretty(&manifest)? + "\n")?;
    written.push(path);
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn floats_round_trip_through_csv() {
        let mut t = CsvTable::new(&["t", "sector", "value"]);
        let v = 0.1 + 0.2;
        t.push(vec![1.0.into(), (-1i8).into(), v.into()]);
        let csv = t.to_csv();
        assert!(csv.starts_with("t,sector,value\n"));
        let field = csv.lines().nth(1).unwrap().split(',').nth(2).unwrap();
        assert_eq!(field.parse::<f64>().unwrap().to_bits(), v.to_bits());
        assert!(csv.contains(",-1,"));
        assert_eq!(t.column("sector").unwrap(), vec![-1.0]);
        assert!(t.column("nope").is_none());
    }

    #[test]
    fn run_dirs_never_collide() {
        let root = tempfile::tempdir().unwrap();
        let a = create_run_dir(root.path(), "demo").unwrap();
        let b = create_run_dir(root.path(), "demo").unwrap();
        let c = create_run_dir(root.path(), "demo").unwrap();
        assert_eq!(a.file_name().unwrap(), "demo");
        assert_eq!(b.file_name().unwrap(), "demo-1");
        assert_eq!(c.file_name().unwrap(), "demo-2");
    }

    #[test]
    fn manifest_lists_artifacts() {
        let dir = tempfile::tempdir().unwrap();
        let m = Manifest {
            name: "x".into(),
            experiment: "none".into(),
            solvers: vec!["lindblad".into()],
            config_hash: sha256_hex(b"abc"),
            seeds: vec![0],
            version: "0".into(),
            passed: true,
            artifacts: vec![],
        };
        assert_eq!(
            m.config_hash,
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
        write_artifacts(dir.path(), &[("a.csv".into(), "t\n".into())], m).unwrap();
        let text = fs::read_to_string(dir.path().join("manifest.json")).unwrap();
        let v: serde_json::Value = serde_json::from_str(&text).unwrap();
        assert_eq!(v["artifacts"][0], "a.csv");
    }
}
