use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::align::Landmarks5;
use super::label::{age_to_group, AgeGroup};
use crate::error::{Error, Result};

/// One manifest row: an image, its subject, age and landmarks.
#[derive(Clone, Debug, PartialEq)]
pub struct ManifestEntry {
    pub path: PathBuf,
    pub identity: String,
    pub age: i64,
    pub landmarks: Landmarks5,
}

impl ManifestEntry {
    pub fn group(&self) -> Result<AgeGroup> {
        age_to_group(self.age)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct Row {
    path: String,
    identity: String,
    age: i64,
    lx1: f64,
    ly1: f64,
    lx2: f64,
    ly2: f64,
    lx3: f64,
    ly3: f64,
    lx4: f64,
    ly4: f64,
    lx5: f64,
    ly5: f64,
}

impl TryFrom<Row> for ManifestEntry {
    type Error = Error;
    fn try_from(r: Row) -> Result<Self> {
        if r.identity.trim().is_empty() {
            return Err(Error::InvalidValue("empty identity".into()));
        }
        let landmarks = Landmarks5::new([(r.lx1, r.ly1), (r.lx2, r.ly2), (r.lx3, r.ly3), (r.lx4, r.ly4), (r.lx5, r.ly5)])?;
        Ok(ManifestEntry {
            path: PathBuf::from(r.path),
            identity: r.identity,
            age: r.age,
            landmarks,
        })
    }
}

/// Parses every row, keeping per-row failures so callers can report and skip them.
/// Fails outright only when the file or its header cannot be read.
pub fn read_manifest(path: &Path) -> Result<Vec<(usize, Result<ManifestEntry>)>> {
    let mut reader = csv::Reader::from_path(path)?;
    let headers = reader.headers()?.clone();
    let expected = ["path", "identity", "age", "lx1", "ly1", "lx2", "ly2", "lx3", "ly3", "lx4", "ly4", "lx5", "ly5"];
    if headers.iter().collect::<Vec<_>>() != expected {
        return Err(Error::InvalidValue(format!(
            "manifest header must be `{}`, found `{}`",
            expected.join(","),
            headers.iter().collect::<Vec<_>>().join(",")
        )));
    }
    Ok(reader
        .deserialize::<Row>()
        .enumerate()
        .map(|(i, row)| (i + 1, row.map_err(Error::from).and_then(ManifestEntry::try_from)))
        .collect())
}

pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for e in entries {
        let p = e.landmarks.points();
        w.serialize(Row {
            path: e.path.to_string_lossy().into_owned(),
            identity: e.identity.clone(),
            age: e.age,
            lx1: p[0].0,
            ly1: p[0].1,
            lx2: p[1].0,
            ly2: p[1].1,
            lx3: p[2].0,
            ly3: p[2].1,
            lx4: p[3].0,
            ly4: p[3].1,
            lx5: p[4].0,
            ly5: p[4].1,
        })?;
    }
    w.flush()?;
    Ok(())
}
