//! Synthetic faces for smoke tests and the overfit experiment.
//!
//! Faces are drawn analytically on canonical 128x128 coordinates: identity
//! sets skin tone, background, mouth width and a cheek texture; the age group
//! darkens the skin, grays the hair band and adds forehead/eye lines.

use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::datapipe::{write_manifest, AgeGroup, FaceImage, Landmarks5, ManifestEntry, Similarity, CANONICAL_TEMPLATE, FACE_SIZE};
use crate::error::Result;

#[derive(Clone, Debug, PartialEq)]
pub struct ToyIdentity {
    pub name: String,
    skin: [f64; 3],
    background: [f64; 3],
    mouth_width: f64,
    texture_freq: f64,
    texture_phase: f64,
}

impl ToyIdentity {
    pub fn from_seed(name: &str, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self {
            name: name.to_string(),
            skin: [rng.gen_range(0.2..0.6), rng.gen_range(0.0..0.35), rng.gen_range(-0.3..0.1)],
            background: [rng.gen_range(-0.9..-0.2), rng.gen_range(-0.9..-0.2), rng.gen_range(-0.9..-0.2)],
            mouth_width: rng.gen_range(8.0..16.0),
            texture_freq: rng.gen_range(0.1..0.3),
            texture_phase: rng.gen_range(0.0..std::f64::consts::TAU),
        }
    }

    /// Pixel in `[-1, 1]` at canonical coordinates `(u, v)`.
    pub fn pixel(&self, group: AgeGroup, u: f64, v: f64) -> [f64; 3] {
        let age = group.index() as f64;
        let blob = |cu: f64, cv: f64, su: f64, sv: f64| (-((u - cu) / su).powi(2) / 2.0 - ((v - cv) / sv).powi(2) / 2.0).exp();
        let face = blob(64.0, 70.0, 30.0, 40.0);
        let eyes = blob(44.0, 48.0, 5.0, 3.5) + blob(84.0, 48.0, 5.0, 3.5);
        let mouth = blob(64.0, 96.0, self.mouth_width, 3.0);
        let hair = blob(64.0, 18.0, 40.0, 10.0);
        let cheeks = (self.texture_freq * (u + v) + self.texture_phase).sin() * 0.06 * (blob(46.0, 78.0, 8.0, 8.0) + blob(82.0, 78.0, 8.0, 8.0));
        let lines = ((v * 1.2).sin() * 0.5 + 0.5) * 0.08 * age * (blob(64.0, 30.0, 30.0, 6.0) + 0.5 * eyes.min(1.0));
        let darken = 1.0 - 0.04 * age;
        let mut out = [0.0; 3];
        for ch in 0..3 {
            let skin = self.skin[ch] * darken + cheeks - lines;
            let gray = -0.6 + 0.15 * age;
            let mut p = self.background[ch] * (1.0 - face) + skin * face;
            p = p * (1.0 - hair) + gray * hair;
            p -= 0.9 * eyes;
            p -= 0.5 * mouth * if ch == 0 { 0.3 } else { 1.0 };
            out[ch] = p.clamp(-1.0, 1.0);
        }
        out
    }

    /// Aligned face on a `size x size` canvas.
    pub fn face(&self, group: AgeGroup, size: usize) -> FaceImage {
        let scale = FACE_SIZE as f64 / size as f64;
        let mut data = Vec::with_capacity(size * size * 3);
        for r in 0..size {
            for c in 0..size {
                let p = self.pixel(group, (c as f64 + 0.5) * scale - 0.5, (r as f64 + 0.5) * scale - 0.5);
                data.extend(p.map(|v| v as f32));
            }
        }
        FaceImage::with_size(size, size, data).expect("pixels are clamped")
    }
}

/// Labeled synthetic faces.
#[derive(Clone, Debug)]
pub struct ToyCorpus {
    pub faces: Vec<FaceImage>,
    pub groups: Vec<AgeGroup>,
    pub identities: Vec<String>,
}

/// `count` faces of distinct identities; face `k` is in group `k mod 4`.
pub fn toy_corpus(count: usize, size: usize, seed: u64) -> ToyCorpus {
    let mut corpus = ToyCorpus { faces: Vec::new(), groups: Vec::new(), identities: Vec::new() };
    for k in 0..count {
        let id = ToyIdentity::from_seed(&format!("toy{k:03}"), seed.wrapping_mul(1000).wrapping_add(k as u64));
        let g = AgeGroup::ALL[k % AgeGroup::ALL.len()];
        corpus.faces.push(id.face(g, size));
        corpus.groups.push(g);
        corpus.identities.push(id.name.clone());
    }
    corpus
}

/// Writes `identities x faces_per_identity` raw PNGs under `dir` with random
/// pose, plus `manifest.csv`. Groups cycle so every group is populated.
/// Returns the manifest path.
pub fn write_toy_corpus(dir: &Path, identities: usize, faces_per_identity: usize, seed: u64) -> Result<PathBuf> {
    std::fs::create_dir_all(dir.join("images"))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut entries = Vec::new();
    let raw = 160u32;
    for i in 0..identities {
        let id = ToyIdentity::from_seed(&format!("subject{i:03}"), rng.gen());
        for j in 0..faces_per_identity {
            let g = AgeGroup::ALL[(i + j) % AgeGroup::ALL.len()];
            let (lo, hi) = g.span();
            let age = rng.gen_range(lo..=hi);
            // canvas -> raw pixel
            let to_raw = Similarity::from_parts(
                rng.gen_range(1.0..1.15),
                rng.gen_range(-8f64..8.0).to_radians(),
                rng.gen_range(5.0..20.0),
                rng.gen_range(5.0..20.0),
            );
            let to_canvas = to_raw.inverse();
            let img = RgbImage::from_fn(raw, raw, |x, y| {
                let (u, v) = to_canvas.apply((x as f64, y as f64));
                let p = id.pixel(g, u, v);
                Rgb(p.map(|c| ((c + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8))
            });
            let rel = format!("images/{}_{j}.png", id.name);
            img.save(dir.join(&rel))?;
            entries.push(ManifestEntry {
                path: rel.into(),
                identity: id.name.clone(),
                age,
                landmarks: Landmarks5::new(CANONICAL_TEMPLATE.map(|p| to_raw.apply(p)))?,
            });
        }
    }
    let manifest = dir.join("manifest.csv");
    write_manifest(&manifest, &entries)?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datapipe::{align_and_crop, read_manifest};

    #[test]
    fn corpus_covers_groups_and_is_seeded() {
        let a = toy_corpus(8, 32, 1);
        let b = toy_corpus(8, 32, 1);
        assert_eq!(a.faces, b.faces);
        for g in AgeGroup::ALL {
            assert_eq!(a.groups.iter().filter(|x| **x == g).count(), 2);
        }
        assert_ne!(toy_corpus(8, 32, 2).faces, a.faces);
    }

    #[test]
    fn age_changes_the_face() {
        let id = ToyIdentity::from_seed("x", 3);
        let young = id.face(AgeGroup::new(0).unwrap(), 32);
        let old = id.face(AgeGroup::new(3).unwrap(), 32);
        let diff: f32 = young.data().iter().zip(old.data()).map(|(a, b)| (a - b).abs()).sum::<f32>() / young.data().len() as f32;
        assert!(diff > 0.05, "{diff}");
    }

    #[test]
    fn written_corpus_aligns_back_to_the_analytic_face() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = write_toy_corpus(dir.path(), 2, 3, 7).unwrap();
        let rows = read_manifest(&manifest).unwrap();
        assert_eq!(rows.len(), 6);
        let (_, first) = &rows[0];
        let e = first.as_ref().unwrap();
        let img = image::open(dir.path().join(&e.path)).unwrap().to_rgb8();
        let aligned = align_and_crop(&img, &e.landmarks).unwrap();
        // the center of the face is far from the black fill
        let c = aligned.get(70, 64, 1);
        assert!(c > -0.9);
    }
}
