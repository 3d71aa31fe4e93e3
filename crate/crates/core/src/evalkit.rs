//! Rank-1 identity recognition, age accuracy, global-only ablation and
//! synthesis grids.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use candle_core::DType;
use image::{ImageFormat, RgbImage};
use serde::{Deserialize, Serialize};

use crate::datapipe::{AgeGroup, FaceImage, PatchSpec};
use crate::error::{Error, Result};
use crate::generator::Generator;
use crate::perceptors::Perceptor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    #[default]
    Cosine,
    Euclidean,
}

impl Metric {
    /// Larger is more similar.
    pub fn similarity(self, a: &[f32], b: &[f32]) -> f64 {
        match self {
            Metric::Cosine => {
                let (mut dot, mut na, mut nb) = (0.0f64, 0.0f64, 0.0f64);
                for (x, y) in a.iter().zip(b) {
                    let (x, y) = (*x as f64, *y as f64);
                    dot += x * y;
                    na += x * x;
                    nb += y * y;
                }
                if na == 0.0 || nb == 0.0 {
                    0.0
                } else {
                    dot / (na.sqrt() * nb.sqrt())
                }
            }
            Metric::Euclidean => -a.iter().zip(b).map(|(x, y)| (*x as f64 - *y as f64).powi(2)).sum::<f64>().sqrt(),
        }
    }
}

/// Real faces of distinct identities.
#[derive(Clone, Debug)]
pub struct GallerySet {
    entries: Vec<(String, FaceImage)>,
}

impl GallerySet {
    pub fn new(entries: Vec<(String, FaceImage)>) -> Result<Self> {
        let mut seen = BTreeSet::new();
        for (id, _) in &entries {
            if !seen.insert(id.as_str()) {
                return Err(Error::InvalidValue(format!("identity {id} appears twice in the gallery")));
            }
        }
        Ok(Self { entries })
    }

    pub fn entries(&self) -> &[(String, FaceImage)] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// A face to be matched, with its source identity and target age group.
#[derive(Clone, Debug)]
pub struct Probe {
    pub identity: String,
    pub target: AgeGroup,
    pub face: FaceImage,
}

/// Feature-space counterpart of [`Probe`].
#[derive(Clone, Debug)]
pub struct ProbeFeatures {
    pub identity: String,
    pub target: AgeGroup,
    pub features: Vec<f32>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ClusterStats {
    pub correct: usize,
    pub total: usize,
    /// Probes whose identity has no gallery face; counted as misses.
    pub unmatched: usize,
    pub rate: f64,
}

impl ClusterStats {
    fn add(&mut self, hit: bool, unmatched: bool) {
        self.total += 1;
        self.correct += hit as usize;
        self.unmatched += unmatched as usize;
        self.rate = self.correct as f64 / self.total as f64;
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RecognitionReport {
    /// Keyed `Aged{g}` by target group.
    pub clusters: BTreeMap<String, ClusterStats>,
    pub overall: ClusterStats,
}

pub fn cluster_name(g: AgeGroup) -> String {
    format!("Aged{}", g.index())
}

/// Index of the most similar gallery row; ties go to the lowest index.
pub fn best_match(gallery: &[Vec<f32>], probe: &[f32], metric: Metric) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, g) in gallery.iter().enumerate() {
        let s = metric.similarity(g, probe);
        if best.map_or(true, |(_, b)| s > b) {
            best = Some((i, s));
        }
    }
    best.map(|(i, _)| i)
}

/// Rank-1 matching on precomputed features.
pub fn rank1_from_features(gallery: &[(String, Vec<f32>)], probes: &[ProbeFeatures], metric: Metric) -> Result<RecognitionReport> {
    if probes.is_empty() {
        return Err(Error::InvalidValue("probe set is empty".into()));
    }
    if gallery.is_empty() {
        return Err(Error::InvalidValue("gallery is empty".into()));
    }
    let ids: BTreeSet<&str> = gallery.iter().map(|(id, _)| id.as_str()).collect();
    let feats: Vec<Vec<f32>> = gallery.iter().map(|(_, f)| f.clone()).collect();
    let mut report = RecognitionReport::default();
    for p in probes {
        let unmatched = !ids.contains(p.identity.as_str());
        let hit = best_match(&feats, &p.features, metric).is_some_and(|i| gallery[i].0 == p.identity);
        report.clusters.entry(cluster_name(p.target)).or_default().add(hit, unmatched);
        report.overall.add(hit, unmatched);
    }
    Ok(report)
}

/// `fc` identity features, one row per face.
pub fn identity_vectors(faces: &[FaceImage], backend: &dyn Perceptor) -> Result<Vec<Vec<f32>>> {
    let mut out = Vec::with_capacity(faces.len());
    for chunk in faces.chunks(32) {
        let fc = backend.identity_features(&FaceImage::batch_to_tensor(chunk, DType::F32)?)?.fc;
        out.extend(fc.to_dtype(DType::F32)?.to_vec2::<f32>()?);
    }
    Ok(out)
}

/// Matches each probe to the gallery by the backend's identity features.
pub fn rank1_recognition(gallery: &GallerySet, probes: &[Probe], backend: &dyn Perceptor, metric: Metric) -> Result<RecognitionReport> {
    let g_faces: Vec<FaceImage> = gallery.entries.iter().map(|(_, f)| f.clone()).collect();
    let g_feats = identity_vectors(&g_faces, backend)?;
    let p_faces: Vec<FaceImage> = probes.iter().map(|p| p.face.clone()).collect();
    let p_feats = identity_vectors(&p_faces, backend)?;
    let gallery: Vec<(String, Vec<f32>)> = gallery.entries.iter().map(|(id, _)| id.clone()).zip(g_feats).collect();
    let probes: Vec<ProbeFeatures> = probes
        .iter()
        .zip(p_feats)
        .map(|(p, features)| ProbeFeatures { identity: p.identity.clone(), target: p.target, features })
        .collect();
    rank1_from_features(&gallery, &probes, metric)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    /// Sample standard deviation; 0 for a single fold.
    pub std: f64,
    pub folds: usize,
}

pub fn mean_std(values: &[f64]) -> MeanStd {
    let n = values.len();
    if n == 0 {
        return MeanStd::default();
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let std = if n > 1 {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
    } else {
        0.0
    };
    MeanStd { mean, std, folds: n }
}

/// Per-cluster mean and std of rates across fold reports.
pub fn aggregate_folds(reports: &[RecognitionReport]) -> BTreeMap<String, MeanStd> {
    let mut rates: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for r in reports {
        for (k, c) in &r.clusters {
            rates.entry(k.clone()).or_default().push(c.rate);
        }
    }
    rates.into_iter().map(|(k, v)| (k, mean_std(&v))).collect()
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AgeAccuracy {
    /// Keyed by target group index.
    pub per_group: BTreeMap<usize, ClusterStats>,
    pub overall: ClusterStats,
}

/// Fraction of faces whose argmax age logit equals the target.
pub fn age_accuracy(probes: &[(FaceImage, AgeGroup)], backend: &dyn Perceptor) -> Result<AgeAccuracy> {
    let mut acc = AgeAccuracy::default();
    for chunk in probes.chunks(32) {
        let faces: Vec<FaceImage> = chunk.iter().map(|(f, _)| f.clone()).collect();
        let logits = backend.age_logits(&FaceImage::batch_to_tensor(&faces, DType::F32)?)?;
        for (row, (_, target)) in logits.to_dtype(DType::F64)?.to_vec2::<f64>()?.iter().zip(chunk) {
            let pred = argmax(row);
            let hit = pred == target.index();
            acc.per_group.entry(target.index()).or_default().add(hit, false);
            acc.overall.add(hit, false);
        }
    }
    Ok(acc)
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

/// Full and global-only syntheses of one face, with their per-pixel
/// channel-mean absolute difference (`H x W`, row-major).
#[derive(Clone, Debug)]
pub struct AblationPair {
    pub full: FaceImage,
    pub global_only: FaceImage,
    pub diff: Vec<f32>,
}

pub fn ablation_compare(generator: &Generator, x: &FaceImage, target: AgeGroup) -> Result<AblationPair> {
    let full = generator.generate(x, target)?;
    let global_only = generator.generate_ablated(x, target)?;
    let diff = full
        .data()
        .chunks(3)
        .zip(global_only.data().chunks(3))
        .map(|(a, b)| a.iter().zip(b).map(|(p, q)| (p - q).abs()).sum::<f32>() / 3.0)
        .collect();
    Ok(AblationPair { full, global_only, diff })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RegionStats {
    pub inside_mean: f64,
    pub outside_mean: f64,
    pub inside_pixels: usize,
    pub outside_pixels: usize,
}

/// Mean of a difference map inside the union of the patches and outside it.
pub fn region_statistics(diff: &[f32], side: usize, patches: &[PatchSpec]) -> Result<RegionStats> {
    if diff.len() != side * side {
        return Err(Error::shape(side * side, diff.len()));
    }
    let (mut si, mut so, mut ni, mut no) = (0.0, 0.0, 0, 0);
    for r in 0..side {
        for c in 0..side {
            let v = diff[r * side + c] as f64;
            if patches.iter().any(|p| p.contains(r, c)) {
                si += v;
                ni += 1;
            } else {
                so += v;
                no += 1;
            }
        }
    }
    let avg = |s: f64, n: usize| if n == 0 { 0.0 } else { s / n as f64 };
    Ok(RegionStats {
        inside_mean: avg(si, ni),
        outside_mean: avg(so, no),
        inside_pixels: ni,
        outside_pixels: no,
    })
}

/// Tiles rows of faces into one image; short rows are padded with black.
pub fn grid_image(rows: &[Vec<FaceImage>]) -> Result<RgbImage> {
    let first = rows
        .iter()
        .flat_map(|r| r.first())
        .next()
        .ok_or_else(|| Error::InvalidValue("grid needs at least one face".into()))?;
    let (th, tw) = (first.height(), first.width());
    let cols = rows.iter().map(Vec::len).max().unwrap_or(0);
    let mut out = RgbImage::new((cols * tw) as u32, (rows.len() * th) as u32);
    for (ri, row) in rows.iter().enumerate() {
        for (ci, face) in row.iter().enumerate() {
            if face.height() != th || face.width() != tw {
                return Err(Error::shape(format!("{th}x{tw} tiles"), format!("{}x{}", face.height(), face.width())));
            }
            let tile = face.to_rgb8();
            image::imageops::replace(&mut out, &tile, (ci * tw) as i64, (ri * th) as i64);
        }
    }
    Ok(out)
}

/// Writes a PNG whose rows are each input followed by its syntheses.
pub fn emit_grid(generator: &Generator, rows: &[(FaceImage, Vec<AgeGroup>)], path: &Path) -> Result<RgbImage> {
    if rows.is_empty() {
        return Err(Error::InvalidValue("no inputs for the grid".into()));
    }
    let mut tiles = Vec::with_capacity(rows.len());
    for (x, targets) in rows {
        let pairs: Vec<(FaceImage, AgeGroup)> = targets.iter().map(|t| (x.clone(), *t)).collect();
        let mut row = vec![x.clone()];
        row.extend(generator.generate_many(&pairs, 8)?);
        tiles.push(row);
    }
    let img = grid_image(&tiles)?;
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)?;
    }
    img.save_with_format(path, ImageFormat::Png)?;
    Ok(img)
}

/// Fold-level results for one direction (progression or regression).
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DirectionReport {
    pub folds: Vec<RecognitionReport>,
    pub summary: BTreeMap<String, MeanStd>,
}

impl DirectionReport {
    pub fn from_folds(folds: Vec<RecognitionReport>) -> Self {
        let summary = aggregate_folds(&folds);
        Self { folds, summary }
    }
}

/// Everything `evaluate` writes.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub metric: Metric,
    pub progression: DirectionReport,
    pub regression: DirectionReport,
    /// Gallery matched against itself; 1.0 for any sane backend.
    pub self_match_rate: f64,
    pub age_accuracy: AgeAccuracy,
    pub ablation: Option<RegionStats>,
}

impl EvaluationReport {
    /// Plain-text table: progression clusters Aged1..3, regression Aged2..0,
    /// rates in percent as mean ± std.
    pub fn to_table(&self) -> String {
        let cell = |d: &DirectionReport, k: &str| match d.summary.get(k) {
            Some(m) => format!("{:.2} ± {:.2}", 100.0 * m.mean, 100.0 * m.std),
            None => "-".to_string(),
        };
        let mut s = String::new();
        s.push_str("Rank-1 recognition (%)\n");
        s.push_str(&format!("{:<12}{:>16}{:>16}{:>16}\n", "", "Aged1", "Aged2", "Aged3"));
        s.push_str(&format!(
            "{:<12}{:>16}{:>16}{:>16}\n",
            "Progression",
            cell(&self.progression, "Aged1"),
            cell(&self.progression, "Aged2"),
            cell(&self.progression, "Aged3")
        ));
        s.push_str(&format!("{:<12}{:>16}{:>16}{:>16}\n", "", "Aged2", "Aged1", "Aged0"));
        s.push_str(&format!(
            "{:<12}{:>16}{:>16}{:>16}\n",
            "Regression",
            cell(&self.regression, "Aged2"),
            cell(&self.regression, "Aged1"),
            cell(&self.regression, "Aged0")
        ));
        s
    }

    /// Writes `report.json` and `report.txt` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("report.json"), serde_json::to_string_pretty(self)?)?;
        std::fs::write(dir.join("report.txt"), self.to_table())?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::generator::GeneratorArch;
    use crate::perceptors::ConvPerceptor;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn g(i: usize) -> AgeGroup {
        AgeGroup::new(i).unwrap()
    }

    fn basis(i: usize, n: usize) -> Vec<f32> {
        (0..n).map(|k| if k == i { 1.0 } else { 0.0 }).collect()
    }

    fn orthogonal_gallery() -> Vec<(String, Vec<f32>)> {
        (0..3).map(|i| (format!("id{i}"), basis(i, 3))).collect()
    }

    #[test]
    fn constructed_feature_cases() {
        let gallery = orthogonal_gallery();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let noisy: Vec<ProbeFeatures> = gallery
            .iter()
            .map(|(id, f)| ProbeFeatures {
                identity: id.clone(),
                target: g(1),
                features: f.iter().map(|v| v + 0.01 * rng.sample::<f32, _>(rand_distr::StandardNormal)).collect(),
            })
            .collect();
        assert_eq!(rank1_from_features(&gallery, &noisy, Metric::Cosine).unwrap().overall.rate, 1.0);

        let wrong: Vec<ProbeFeatures> = (0..3)
            .map(|i| ProbeFeatures { identity: format!("id{i}"), target: g(2), features: basis((i + 1) % 3, 3) })
            .collect();
        let r = rank1_from_features(&gallery, &wrong, Metric::Cosine).unwrap();
        assert_eq!(r.overall.rate, 0.0);
        assert_eq!(r.clusters["Aged2"].total, 3);
    }

    #[test]
    fn unmatched_probes_count_as_misses() {
        let probes = vec![
            ProbeFeatures { identity: "id0".into(), target: g(1), features: basis(0, 3) },
            ProbeFeatures { identity: "ghost".into(), target: g(1), features: basis(1, 3) },
        ];
        let r = rank1_from_features(&orthogonal_gallery(), &probes, Metric::Cosine).unwrap();
        assert_eq!((r.overall.correct, r.overall.total, r.overall.unmatched), (1, 2, 1));
        assert_eq!(r.overall.rate, 0.5);
        assert!(rank1_from_features(&orthogonal_gallery(), &[], Metric::Cosine).is_err());
    }

    #[test]
    fn ties_go_to_lowest_gallery_index() {
        let gallery = vec![vec![1.0, 0.0], vec![1.0, 0.0], vec![0.0, 1.0]];
        assert_eq!(best_match(&gallery, &[2.0, 0.0], Metric::Cosine), Some(0));
        assert_eq!(best_match(&gallery, &[1.0, 0.0], Metric::Euclidean), Some(0));
    }

    #[test]
    fn duplicate_gallery_identity_rejected() {
        let f = FaceImage::filled(8, 8, 0.0).unwrap();
        assert!(GallerySet::new(vec![("a".into(), f.clone()), ("a".into(), f)]).is_err());
    }

    fn brute_force(gallery: &[(String, Vec<f32>)], probes: &[ProbeFeatures]) -> (usize, usize) {
        let mut correct = 0;
        for p in probes {
            let mut best_i = 0;
            let mut best = f64::NEG_INFINITY;
            for (i, (_, f)) in gallery.iter().enumerate() {
                let dot: f64 = f.iter().zip(&p.features).map(|(a, b)| *a as f64 * *b as f64).sum();
                let na: f64 = f.iter().map(|a| (*a as f64).powi(2)).sum::<f64>().sqrt();
                let nb: f64 = p.features.iter().map(|a| (*a as f64).powi(2)).sum::<f64>().sqrt();
                let s = dot / (na * nb);
                if s > best {
                    best = s;
                    best_i = i;
                }
            }
            correct += (gallery[best_i].0 == p.identity) as usize;
        }
        (correct, probes.len())
    }

    fn random_instance(seed: u64) -> (Vec<(String, Vec<f32>)>, Vec<ProbeFeatures>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let gallery: Vec<(String, Vec<f32>)> = (0..10)
            .map(|i| (format!("id{i}"), (0..6).map(|_| rng.gen_range(-1.0f32..1.0)).collect()))
            .collect();
        let probes = (0..30)
            .map(|_| {
                let i = rng.gen_range(0..10);
                ProbeFeatures {
                    identity: format!("id{i}"),
                    target: g(rng.gen_range(0..4)),
                    features: gallery[i].1.iter().map(|v| v + rng.gen_range(-0.8f32..0.8)).collect(),
                }
            })
            .collect();
        (gallery, probes)
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn matches_brute_force(seed in 0u64..10_000) {
            let (gallery, probes) = random_instance(seed);
            let r = rank1_from_features(&gallery, &probes, Metric::Cosine).unwrap();
            let (c, t) = brute_force(&gallery, &probes);
            prop_assert_eq!((r.overall.correct, r.overall.total), (c, t));
            prop_assert_eq!(r.overall.rate, c as f64 / t as f64);
            let per_cluster: usize = r.clusters.values().map(|s| s.total).sum();
            prop_assert_eq!(per_cluster, probes.len());
        }

        #[test]
        fn invariant_to_order_and_scale(seed in 0u64..10_000, scale in 0.01f32..100.0) {
            let (mut gallery, mut probes) = random_instance(seed);
            let base = rank1_from_features(&gallery, &probes, Metric::Cosine).unwrap();
            gallery.reverse();
            probes.reverse();
            prop_assert_eq!(&rank1_from_features(&gallery, &probes, Metric::Cosine).unwrap(), &base);
            for (_, f) in &mut gallery {
                f.iter_mut().for_each(|v| *v *= scale);
            }
            for p in &mut probes {
                p.features.iter_mut().for_each(|v| *v *= scale);
            }
            prop_assert_eq!(&rank1_from_features(&gallery, &probes, Metric::Cosine).unwrap(), &base);
        }
    }

    #[test]
    fn self_match_through_backend() {
        let backend = ConvPerceptor::fixture(2, 32).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let entries: Vec<(String, FaceImage)> = (0..4)
            .map(|i| (format!("p{i}"), FaceImage::with_size(32, 32, (0..32 * 32 * 3).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()))
            .collect();
        let gallery = GallerySet::new(entries.clone()).unwrap();
        let probes: Vec<Probe> = entries.into_iter().map(|(identity, face)| Probe { identity, target: g(0), face }).collect();
        let r = rank1_recognition(&gallery, &probes, &backend, Metric::Cosine).unwrap();
        assert_eq!(r.overall.rate, 1.0);
    }

    #[test]
    fn age_accuracy_self_consistency() {
        let backend = ConvPerceptor::fixture(3, 32).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let faces: Vec<FaceImage> = (0..12)
            .map(|_| FaceImage::with_size(32, 32, (0..32 * 32 * 3).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap())
            .collect();
        let logits = backend.age_logits(&FaceImage::batch_to_tensor(&faces, DType::F32).unwrap()).unwrap();
        let labeled: Vec<(FaceImage, AgeGroup)> = faces
            .into_iter()
            .zip(logits.to_dtype(DType::F64).unwrap().to_vec2::<f64>().unwrap())
            .map(|(f, row)| (f, g(argmax(&row))))
            .collect();
        let acc = age_accuracy(&labeled, &backend).unwrap();
        assert_eq!(acc.overall.rate, 1.0);
        assert_eq!(acc.overall.total, 12);
    }

    fn compact_generator(zero: bool, seed: u64) -> Generator {
        let mut arch = GeneratorArch::compact(32).unwrap();
        arch.zero_init_output = zero;
        Generator::new(arch, DType::F32, seed).unwrap()
    }

    fn rand_face(seed: u64) -> FaceImage {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        FaceImage::with_size(32, 32, (0..32 * 32 * 3).map(|_| rng.gen_range(-0.9..0.9)).collect()).unwrap()
    }

    #[test]
    fn ablation_with_zero_output_is_identity() {
        let gen = compact_generator(true, 0);
        let x = rand_face(4);
        let pair = ablation_compare(&gen, &x, g(2)).unwrap();
        assert_eq!(pair.full, x);
        assert_eq!(pair.global_only, x);
        assert!(pair.diff.iter().all(|v| *v == 0.0));
        assert_eq!((pair.full.height(), pair.full.width()), (32, 32));
    }

    #[test]
    fn ablation_difference_is_reported_by_region() {
        let gen = compact_generator(false, 1);
        let pair = ablation_compare(&gen, &rand_face(5), g(1)).unwrap();
        let stats = region_statistics(&pair.diff, 32, &gen.arch().patches).unwrap();
        assert!(stats.inside_mean > 0.0);
        assert_eq!(stats.inside_pixels + stats.outside_pixels, 32 * 32);
    }

    #[test]
    fn grid_layout_and_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let gen = compact_generator(false, 2);
        let rows = vec![(rand_face(6), vec![g(1), g(2), g(3)]), (rand_face(7), vec![g(0), g(1), g(2)])];
        let path = dir.path().join("grid.png");
        let img = emit_grid(&gen, &rows, &path).unwrap();
        assert_eq!(img.dimensions(), (4 * 32, 2 * 32));
        let decoded = image::open(&path).unwrap().to_rgb8();
        assert_eq!(decoded, img);
        // first tile is the input, within 8-bit quantization
        let tile = image::imageops::crop_imm(&decoded, 0, 0, 32, 32).to_image();
        let back = FaceImage::from_rgb8(&tile);
        let worst = back.data().iter().zip(rows[0].0.data()).map(|(a, b)| (a - b).abs()).fold(0.0f32, f32::max);
        assert!(worst <= 1.0 / 127.5 + 1e-6, "{worst}");

        let again = dir.path().join("again.png");
        emit_grid(&gen, &rows, &again).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&again).unwrap());
        assert!(emit_grid(&gen, &[], &again).is_err());
    }

    #[test]
    fn standard_grid_dimensions() {
        let rows = vec![vec![FaceImage::filled(128, 128, 0.0).unwrap(); 4]; 2];
        assert_eq!(grid_image(&rows).unwrap().dimensions(), (512, 256));
    }

    #[test]
    fn table_lists_both_directions() {
        let mut report = EvaluationReport::default();
        let mut fold = RecognitionReport::default();
        fold.clusters.insert("Aged1".into(), ClusterStats { correct: 9, total: 10, unmatched: 0, rate: 0.9 });
        report.progression = DirectionReport::from_folds(vec![fold.clone(), fold]);
        let t = report.to_table();
        assert!(t.contains("Progression"));
        assert!(t.contains("90.00 ± 0.00"));
        assert!(t.contains("Aged0"));
        let m = mean_std(&[0.9, 0.8, 1.0]);
        assert!((m.mean - 0.9).abs() < 1e-12 && (m.std - 0.1).abs() < 1e-12);
    }
}
