use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::manifest::ManifestEntry;
use crate::error::{Error, Result};

/// One cross-validation fold: the identities it owns and their entry indices.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Fold {
    pub index: usize,
    pub identities: Vec<String>,
    pub entries: Vec<usize>,
}

/// Identity-disjoint k-fold split. Identities are shuffled with `seed` and
/// dealt round-robin, so fold sizes differ by at most one identity.
pub fn split_folds(manifest: &[ManifestEntry], k: usize, seed: u64) -> Result<Vec<Fold>> {
    if k < 2 {
        return Err(Error::InvalidValue(format!("need at least 2 folds, got {k}")));
    }
    if manifest.is_empty() {
        return Err(Error::InvalidValue("empty manifest".into()));
    }
    let mut by_identity: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, e) in manifest.iter().enumerate() {
        by_identity.entry(e.identity.as_str()).or_default().push(i);
    }
    if by_identity.len() < k {
        return Err(Error::TooFewIdentities {
            identities: by_identity.len(),
            folds: k,
        });
    }
    let mut ids: Vec<&str> = by_identity.keys().copied().collect();
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));

    let mut folds: Vec<Fold> = (0..k)
        .map(|index| Fold {
            index,
            identities: Vec::new(),
            entries: Vec::new(),
        })
        .collect();
    for (i, id) in ids.into_iter().enumerate() {
        let fold = &mut folds[i % k];
        fold.identities.push(id.to_string());
        fold.entries.extend(&by_identity[id]);
    }
    for f in &mut folds {
        f.identities.sort();
        f.entries.sort_unstable();
    }
    Ok(folds)
}

/// One `fold_index,identity` line per identity.
pub fn write_fold_file(path: &Path, folds: &[Fold]) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for f in folds {
        for id in &f.identities {
            writeln!(out, "{},{}", f.index, id)?;
        }
    }
    out.flush()?;
    Ok(())
}

/// Reads a fold file back into an identity -> fold index map.
pub fn read_fold_file(path: &Path) -> Result<BTreeMap<String, usize>> {
    let text = std::fs::read_to_string(path)?;
    let mut map = BTreeMap::new();
    for (n, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let (idx, id) = line.split_once(',').ok_or_else(|| Error::Corrupt {
            path: path.to_path_buf(),
            reason: format!("line {} is not `fold_index,identity`", n + 1),
        })?;
        let idx: usize = idx.trim().parse().map_err(|_| Error::Corrupt {
            path: path.to_path_buf(),
            reason: format!("line {}: bad fold index `{idx}`", n + 1),
        })?;
        map.insert(id.to_string(), idx);
    }
    Ok(map)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datapipe::Landmarks5;

    fn manifest(identities: usize, per_identity: usize) -> Vec<ManifestEntry> {
        (0..identities * per_identity)
            .map(|i| ManifestEntry {
                path: format!("img{i}.png").into(),
                identity: format!("id{:02}", i % identities),
                age: 14 + (i % 49) as i64,
                landmarks: Landmarks5::canonical(),
            })
            .collect()
    }

    #[test]
    fn ten_identities_five_folds() {
        let folds = split_folds(&manifest(10, 1), 5, 1).unwrap();
        assert_eq!(folds.len(), 5);
        assert!(folds.iter().all(|f| f.identities.len() == 2));
    }

    #[test]
    fn deterministic_given_seed() {
        let m = manifest(13, 3);
        assert_eq!(split_folds(&m, 5, 42).unwrap(), split_folds(&m, 5, 42).unwrap());
    }

    #[test]
    fn partition_is_exact_and_identity_disjoint() {
        let m = manifest(25, 4);
        let folds = split_folds(&m, 5, 7).unwrap();
        let mut seen = vec![0usize; m.len()];
        for f in &folds {
            for &e in &f.entries {
                seen[e] += 1;
            }
        }
        assert_eq!(seen.iter().sum::<usize>(), 100);
        assert!(seen.iter().all(|&c| c == 1));
        for (i, a) in folds.iter().enumerate() {
            for b in &folds[i + 1..] {
                assert!(a.identities.iter().all(|id| !b.identities.contains(id)));
                assert!(a.entries.iter().all(|e| !b.entries.contains(e)));
            }
            for &e in &a.entries {
                assert!(a.identities.contains(&m[e].identity));
            }
        }
    }

    #[test]
    fn errors() {
        assert!(matches!(
            split_folds(&manifest(3, 2), 5, 0),
            Err(Error::TooFewIdentities { identities: 3, folds: 5 })
        ));
        assert!(split_folds(&manifest(3, 2), 1, 0).is_err());
        assert!(split_folds(&[], 2, 0).is_err());
    }

    #[test]
    fn fold_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("folds.txt");
        let folds = split_folds(&manifest(10, 2), 5, 3).unwrap();
        write_fold_file(&path, &folds).unwrap();
        let map = read_fold_file(&path).unwrap();
        assert_eq!(map.len(), 10);
        for f in &folds {
            for id in &f.identities {
                assert_eq!(map[id], f.index);
            }
        }
    }
}
