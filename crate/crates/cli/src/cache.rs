//! On-disk layout written by `prepare` and read by the other commands.
//!
//! ```text
//! <dir>/faces/<n>.face   aligned 128x128 faces (raw f32)
//! <dir>/index.csv        file,identity,age,group
//! <dir>/folds.csv        fold_index,identity
//! ```

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use glca_core::datapipe::read_fold_file;
use glca_core::{AgeGroup, FaceImage};
use serde::{Deserialize, Serialize};

pub const INDEX: &str = "index.csv";
pub const FOLDS: &str = "folds.csv";
pub const FACES: &str = "faces";

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct IndexRow {
    pub file: String,
    pub identity: String,
    pub age: i64,
    pub group: usize,
}

#[derive(Clone, Debug)]
pub struct CachedFace {
    pub identity: String,
    pub group: AgeGroup,
    pub face: FaceImage,
}

pub struct Cache {
    pub faces: Vec<CachedFace>,
    pub folds: BTreeMap<String, usize>,
}

impl Cache {
    /// Loads every cached face, box-downscaled to `size`.
    pub fn open(dir: &Path, size: usize) -> Result<Self> {
        let index = dir.join(INDEX);
        if !index.exists() {
            bail!(
                "no prepared cache at {} (missing {INDEX}); run `glca prepare` first",
                dir.display()
            );
        }
        let mut reader = csv::Reader::from_path(&index).with_context(|| format!("reading {}", index.display()))?;
        let mut faces = Vec::new();
        for row in reader.deserialize() {
            let row: IndexRow = row.with_context(|| format!("bad row in {}", index.display()))?;
            let path = dir.join(FACES).join(&row.file);
            let face = FaceImage::read_raw(&path)
                .and_then(|f| f.downscale(size))
                .with_context(|| format!("loading {}", path.display()))?;
            faces.push(CachedFace { identity: row.identity, group: AgeGroup::new(row.group)?, face });
        }
        let folds = read_fold_file(&dir.join(FOLDS)).with_context(|| format!("reading {}", dir.join(FOLDS).display()))?;
        Ok(Self { faces, folds })
    }

    /// Faces whose identity is (`held_out = true`) or is not in `fold`.
    /// With no fold selected every face is returned.
    pub fn select(&self, fold: Option<usize>, held_out: bool) -> Vec<&CachedFace> {
        self.faces
            .iter()
            .filter(|f| match fold {
                None => true,
                Some(k) => (self.folds.get(&f.identity) == Some(&k)) == held_out,
            })
            .collect()
    }
}
