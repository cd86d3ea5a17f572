use std::collections::HashSet;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::NUM_TARGETS;

/// Target value marking an unlabeled (test) row.
pub const SENTINEL_TARGET: f64 = -1.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
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
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Data(format!("unknown split {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestRow {
    pub id: String,
    pub split: Split,
    /// Feature file path, relative to the manifest's directory unless absolute.
    pub path: String,
    pub target: [f64; NUM_TARGETS],
}

impl ManifestRow {
    pub fn is_labeled(&self) -> bool {
        !self.target.iter().all(|&t| t == SENTINEL_TARGET)
    }
}

#[derive(Clone, Debug)]
pub struct Manifest {
    pub rows: Vec<ManifestRow>,
    base_dir: PathBuf,
}

#[derive(Debug, Serialize, Deserialize)]
struct CsvRow {
    id: String,
    split: String,
    path: String,
    adm: f64,
    amu: f64,
    det: f64,
    emp: f64,
    exc: f64,
    joy: f64,
}

pub const MANIFEST_HEADER: [&str; 9] = ["id", "split", "path", "adm", "amu", "det", "emp", "exc", "joy"];

impl Manifest {
    pub fn new(rows: Vec<ManifestRow>, base_dir: impl Into<PathBuf>) -> Result<Self> {
        let m = Manifest {
            rows,
            base_dir: base_dir.into(),
        };
        m.validate()?;
        Ok(m)
    }

    fn validate(&self) -> Result<()> {
        let mut ids = HashSet::new();
        let mut paths = HashSet::new();
        for row in &self.rows {
            if !ids.insert(row.id.as_str()) {
                return Err(Error::Data(format!("duplicate id {:?} in manifest", row.id)));
            }
            if !paths.insert(row.path.as_str()) {
                return Err(Error::Data(format!(
                    "feature file {:?} listed twice (overlapping splits)",
                    row.path
                )));
            }
            if row.is_labeled() {
                if let Some(t) = row.target.iter().find(|t| !(0.0..=1.0).contains(*t)) {
                    return Err(Error::Data(format!("target {t} of {:?} outside [0, 1]", row.id)));
                }
            } else if row.split != Split::Test {
                return Err(Error::Data(format!("unlabeled row {:?} outside the test split", row.id)));
            }
        }
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let mut reader = csv::Reader::from_path(path).map_err(|e| match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(path, io),
            other => Error::Data(format!("{}: {other:?}", path.display())),
        })?;
        let header: Vec<String> = reader.headers()?.iter().map(str::to_string).collect();
        if header != MANIFEST_HEADER {
            return Err(Error::Data(format!(
                "manifest header must be {}, got {}",
                MANIFEST_HEADER.join(","),
                header.join(",")
            )));
        }
        let mut rows = Vec::new();
        for rec in reader.deserialize::<CsvRow>() {
            let r = rec?;
            rows.push(ManifestRow {
                id: r.id,
                split: r.split.parse()?,
                path: r.path,
                target: [r.adm, r.amu, r.det, r.emp, r.exc, r.joy],
            });
        }
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Manifest::new(rows, base)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        for row in &self.rows {
            let [adm, amu, det, emp, exc, joy] = row.target;
            w.serialize(CsvRow {
                id: row.id.clone(),
                split: row.split.to_string(),
                path: row.path.clone(),
                adm,
                amu,
                det,
                emp,
                exc,
                joy,
            })?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn split(&self, split: Split) -> Vec<&ManifestRow> {
        self.rows.iter().filter(|r| r.split == split).collect()
    }

    pub fn resolve(&self, row: &ManifestRow) -> PathBuf {
        let p = Path::new(&row.path);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(id: &str, split: Split, path: &str) -> ManifestRow {
        ManifestRow {
            id: id.into(),
            split,
            path: path.into(),
            target: [0.5; 6],
        }
    }

    #[test]
    fn rejects_duplicates_and_overlaps() {
        assert!(Manifest::new(vec![row("a", Split::Train, "a"), row("a", Split::Val, "b")], ".").is_err());
        assert!(Manifest::new(vec![row("a", Split::Train, "x"), row("b", Split::Val, "x")], ".").is_err());
        assert!(Manifest::new(vec![row("a", Split::Train, "x"), row("b", Split::Val, "y")], ".").is_ok());
    }

    #[test]
    fn sentinel_only_on_test() {
        let mut r = row("a", Split::Test, "a");
        r.target = [SENTINEL_TARGET; 6];
        assert!(!r.is_labeled());
        assert!(Manifest::new(vec![r.clone()], ".").is_ok());
        r.split = Split::Val;
        assert!(Manifest::new(vec![r], ".").is_err());
        let mut r = row("b", Split::Train, "b");
        r.target[3] = 1.5;
        assert!(Manifest::new(vec![r], ".").is_err());
    }

    #[test]
    fn csv_round_trip_and_header_check() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("manifest.csv");
        let m = Manifest::new(vec![row("a", Split::Train, "f/a.emif"), row("b", Split::Test, "f/b.emif")], dir.path()).unwrap();
        m.write(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("id,split,path,adm,amu,det,emp,exc,joy\n"));
        let back = Manifest::read(&path).unwrap();
        assert_eq!(back.rows, m.rows);
        assert_eq!(back.resolve(&back.rows[0]), dir.path().join("f/a.emif"));

        std::fs::write(&path, "id,split,path\nx,train,p\n").unwrap();
        assert!(Manifest::read(&path).is_err());
    }
}
