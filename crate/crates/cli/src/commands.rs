use std::collections::BTreeSet;
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use glca_core::datapipe::{align_file, read_manifest, split_folds, write_fold_file};
use glca_core::evalkit::{self, DirectionReport, EvaluationReport, GallerySet, Metric, Probe, RegionStats};
use glca_core::perceptors::{pretrain_fixture_age_classifier, PretrainConfig};
use glca_core::trainer::{load_checkpoint, save_checkpoint, Backends, TrainingSet};
use glca_core::{AgeGroup, ConvPerceptor, Error, FaceImage, Generator, Perceptor, TrainConfig, TrainState, NUM_AGE_GROUPS};
use serde::Serialize;

use crate::cache::{Cache, CachedFace, IndexRow, FACES, FOLDS, INDEX};
use crate::{Common, Direction, MetricArg, Preset};

/// Bad invocation; exit code 1.
#[derive(Debug)]
pub struct Usage(pub String);

impl fmt::Display for Usage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

/// 1 usage, 3 runtime abort, 2 anything else (data).
pub fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.downcast_ref::<Usage>().is_some() {
            return 1;
        }
        match cause.downcast_ref::<Error>() {
            Some(Error::Config(_)) => return 1,
            Some(Error::NonFinite { .. } | Error::TrainingFailure(_)) => return 3,
            _ => {}
        }
    }
    2
}

fn write_snapshot<T: Serialize>(out: &Path, value: &T) -> Result<()> {
    std::fs::create_dir_all(out)?;
    let text = toml::to_string(value).context("serializing resolved config")?;
    std::fs::write(out.join("resolved.toml"), text)?;
    Ok(())
}

pub fn resolve_train_config(common: &Common) -> Result<TrainConfig> {
    let base = match &common.config {
        Some(path) => TrainConfig::from_file(path)?,
        None => TrainConfig::default(),
    };
    let mut overrides = Vec::new();
    if let Some(p) = common.weights {
        let name = match p {
            Preset::Morph => "morph",
            Preset::Cacd => "cacd",
        };
        overrides.push(("weights".to_string(), name.to_string()));
    }
    if let Some(seed) = common.seed {
        overrides.push(("seed".to_string(), seed.to_string()));
    }
    for kv in &common.overrides {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Usage(format!("--set expects KEY=VALUE, got `{kv}`")))?;
        overrides.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(base.with_overrides(&overrides)?.resolved()?)
}

#[derive(Serialize)]
struct PrepareSnapshot {
    command: &'static str,
    manifest: PathBuf,
    image_root: PathBuf,
    folds: usize,
    seed: u64,
}

#[derive(Serialize)]
struct PrepareSummary {
    rows: usize,
    cached: usize,
    skipped: Vec<String>,
    per_group: [usize; NUM_AGE_GROUPS],
    identities: usize,
}

pub fn prepare(common: &Common, manifest: Option<PathBuf>, folds: usize) -> Result<()> {
    let manifest = match (manifest, &common.data_root) {
        (Some(m), _) => m,
        (None, Some(root)) => root.join("manifest.csv"),
        (None, None) => return Err(Usage("no manifest: pass --manifest or set GLCA_DATA_ROOT".into()).into()),
    };
    let image_root = match &common.data_root {
        Some(root) => root.clone(),
        None => manifest.parent().map(Path::to_path_buf).unwrap_or_default(),
    };
    let seed = common.seed.unwrap_or(0);
    let out = &common.out;
    write_snapshot(out, &PrepareSnapshot { command: "prepare", manifest: manifest.clone(), image_root: image_root.clone(), folds, seed })?;

    let rows = read_manifest(&manifest).with_context(|| format!("reading manifest {}", manifest.display()))?;
    let faces_dir = out.join(FACES);
    std::fs::create_dir_all(&faces_dir)?;
    let mut index = csv::Writer::from_path(out.join(INDEX))?;
    let mut accepted = Vec::new();
    let mut summary = PrepareSummary { rows: rows.len(), cached: 0, skipped: Vec::new(), per_group: [0; NUM_AGE_GROUPS], identities: 0 };
    for (row_no, entry) in rows {
        let result = entry.and_then(|e| {
            let group = e.group()?;
            let face = align_file(&image_root.join(&e.path), &e.landmarks)?;
            Ok((e, group, face))
        });
        match result {
            Ok((e, group, face)) => {
                let file = format!("{:06}.face", summary.cached);
                face.write_raw(&faces_dir.join(&file))?;
                index.serialize(IndexRow { file, identity: e.identity.clone(), age: e.age, group: group.index() })?;
                summary.per_group[group.index()] += 1;
                summary.cached += 1;
                accepted.push(e);
            }
            Err(err) => {
                let msg = format!("row {row_no}: {err}");
                eprintln!("skipped {msg}");
                summary.skipped.push(msg);
            }
        }
    }
    index.flush()?;
    summary.identities = accepted.iter().map(|e| e.identity.as_str()).collect::<BTreeSet<_>>().len();
    std::fs::write(out.join("prepare.json"), serde_json::to_string_pretty(&summary)?)?;
    println!("cached {} of {} rows ({} skipped)", summary.cached, summary.rows, summary.skipped.len());
    for (g, n) in summary.per_group.iter().enumerate() {
        println!("  group {g}: {n}");
    }
    if summary.skipped.len() * 10 > summary.rows {
        bail!("{} of {} manifest rows failed (more than 10%)", summary.skipped.len(), summary.rows);
    }
    let split = split_folds(&accepted, folds, seed)?;
    write_fold_file(&out.join(FOLDS), &split)?;
    println!("{} identities in {folds} folds", summary.identities);
    Ok(())
}

fn load_backend(path: &Path, size: usize) -> Result<ConvPerceptor> {
    let backend = ConvPerceptor::load(path)?;
    let d = backend.descriptor();
    if d.input_size != size {
        bail!("backend {} expects {}x{} faces, model uses {size}x{size}", path.display(), d.input_size, d.input_size);
    }
    Ok(backend)
}

fn checkpoint_path(dir: &Path, iter: u64) -> PathBuf {
    dir.join(format!("ckpt_{iter:08}.ckpt"))
}

fn latest_checkpoint(dir: &Path) -> Result<Option<PathBuf>> {
    if !dir.exists() {
        return Ok(None);
    }
    let mut found: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "ckpt"))
        .collect();
    found.sort();
    Ok(found.pop())
}

/// Keeps the log lines up to and including iteration `upto`.
fn truncate_log(path: &Path, upto: u64) -> Result<()> {
    if !path.exists() {
        return Ok(());
    }
    let mut kept = Vec::new();
    for line in BufReader::new(File::open(path)?).lines() {
        let line = line?;
        let v: serde_json::Value = serde_json::from_str(&line).with_context(|| format!("bad line in {}", path.display()))?;
        if v["iteration"].as_u64().is_some_and(|i| i <= upto) {
            kept.push(line);
        }
    }
    let mut text = kept.join("\n");
    if !text.is_empty() {
        text.push('\n');
    }
    std::fs::write(path, text)?;
    Ok(())
}

fn same_run(a: &TrainConfig, b: &TrainConfig) -> bool {
    let strip = |c: &TrainConfig| TrainConfig { max_iters: 0, checkpoint_every: 0, ..c.clone() };
    strip(a) == strip(b)
}

pub fn train(common: &Common, cache_dir: &Path, backend_path: &Path, resume: bool) -> Result<()> {
    let cfg = resolve_train_config(common)?;
    let out = &common.out;
    std::fs::create_dir_all(out)?;
    std::fs::write(out.join("resolved.toml"), cfg.to_text()?)?;
    let backend = load_backend(backend_path, cfg.image_size)?;
    let cache = Cache::open(cache_dir, cfg.image_size)?;
    let train: Vec<&CachedFace> = cache.select(cfg.test_fold, false);
    let set = TrainingSet::new(train.iter().map(|f| f.face.clone()).collect(), train.iter().map(|f| f.group).collect())
        .context("building the training set")?;
    let ckpt_dir = out.join("checkpoints");
    let log_path = out.join("metrics.jsonl");
    let mut state = match (resume, latest_checkpoint(&ckpt_dir)?) {
        (true, Some(path)) => {
            let st = load_checkpoint(&path)?;
            if !same_run(st.config(), &cfg) {
                return Err(Usage(format!("config differs from the run stored in {}", path.display())).into());
            }
            truncate_log(&log_path, st.iteration())?;
            println!("resuming from {} at iteration {}", path.display(), st.iteration());
            st
        }
        (true, None) => bail!("--resume given but no checkpoint in {}", ckpt_dir.display()),
        (false, _) => {
            File::create(&log_path)?;
            TrainState::new(cfg.clone())?
        }
    };
    let mut log = BufWriter::new(std::fs::OpenOptions::new().append(true).open(&log_path)?);
    println!("training on {} faces {:?} for {} iterations", set.len(), set.group_counts(), cfg.max_iters);
    let backends = Backends::shared(&backend);
    let mut saved_at = None;
    while state.iteration() < cfg.max_iters {
        let rec = state.train_step(&set, backends);
        let rec = match rec {
            Ok(r) => r,
            Err(err) => {
                log.flush()?;
                return Err(err.into());
            }
        };
        writeln!(log, "{}", rec.to_json_line()?)?;
        if cfg.checkpoint_every > 0 && rec.iteration % cfg.checkpoint_every == 0 {
            log.flush()?;
            save_checkpoint(&state, &checkpoint_path(&ckpt_dir, rec.iteration))?;
            saved_at = Some(rec.iteration);
        }
        if rec.iteration % 100 == 0 {
            println!("iter {} total {:.4}", rec.iteration, rec.generator.total);
        }
    }
    log.flush()?;
    if saved_at != Some(state.iteration()) {
        save_checkpoint(&state, &checkpoint_path(&ckpt_dir, state.iteration()))?;
    }
    println!("done at iteration {}", state.iteration());
    Ok(())
}

#[derive(Serialize)]
struct SynthSnapshot<'a> {
    command: &'static str,
    checkpoint: &'a Path,
    cache: &'a Path,
    direction: Direction,
    limit: usize,
}

fn targets_for(direction: Direction, g: AgeGroup) -> Vec<AgeGroup> {
    match direction {
        Direction::Progression => g.older(),
        Direction::Regression => g.younger(),
        Direction::All => g.others(),
    }
}

fn direction_name(d: Direction) -> &'static str {
    match d {
        Direction::Progression => "progression",
        Direction::Regression => "regression",
        Direction::All => "all",
    }
}

pub fn synthesize(common: &Common, checkpoint: &Path, cache_dir: &Path, direction: Direction, limit: usize) -> Result<()> {
    let out = &common.out;
    write_snapshot(out, &SynthSnapshot { command: "synthesize", checkpoint, cache: cache_dir, direction, limit })?;
    let state = load_checkpoint(checkpoint)?;
    let gen = state.generator();
    let cache = Cache::open(cache_dir, gen.arch().image_size)?;
    let inputs: Vec<&CachedFace> = cache.select(state.config().test_fold, true).into_iter().take(limit).collect();
    if inputs.is_empty() {
        bail!("no input faces in {}", cache_dir.display());
    }
    let mut rows = Vec::new();
    for (i, f) in inputs.iter().enumerate() {
        let targets = targets_for(direction, f.group);
        if targets.is_empty() {
            eprintln!("warning: face {i} ({}, group {}) has no {} targets; skipped", f.identity, f.group, direction_name(direction));
            continue;
        }
        rows.push((f.face.clone(), targets));
    }
    if rows.is_empty() {
        bail!("no face has an admissible target for {}", direction_name(direction));
    }
    let path = out.join(format!("grid_{}.png", direction_name(direction)));
    let img = evalkit::emit_grid(gen, &rows, &path)?;
    println!("wrote {} ({}x{}, {} rows)", path.display(), img.width(), img.height(), rows.len());
    Ok(())
}

#[derive(Serialize)]
struct EvalSnapshot<'a> {
    command: &'static str,
    checkpoint: &'a Path,
    cache: &'a Path,
    backend: &'a Path,
    fold: Option<usize>,
    metric: Metric,
}

/// Gallery: first face of each identity in `source`. Probes: every
/// `source` face of a gallery identity, synthesized to each target.
fn direction_sets(gen: &Generator, faces: &[&CachedFace], source: AgeGroup, direction: Direction) -> Result<(GallerySet, Vec<Probe>)> {
    let mut seen = BTreeSet::new();
    let mut gallery = Vec::new();
    let mut pairs = Vec::new();
    let mut owners = Vec::new();
    for f in faces.iter().filter(|f| f.group == source) {
        if seen.insert(f.identity.clone()) {
            gallery.push((f.identity.clone(), f.face.clone()));
        }
        for t in targets_for(direction, source) {
            pairs.push((f.face.clone(), t));
            owners.push(f.identity.clone());
        }
    }
    let synth = gen.generate_many(&pairs, 16)?;
    let probes = synth
        .into_iter()
        .zip(pairs)
        .zip(owners)
        .map(|((face, (_, target)), identity)| Probe { identity, target, face })
        .collect();
    Ok((GallerySet::new(gallery)?, probes))
}

pub fn evaluate(common: &Common, checkpoint: &Path, cache_dir: &Path, backend_path: &Path, fold: Option<usize>, metric: MetricArg) -> Result<()> {
    let metric = match metric {
        MetricArg::Cosine => Metric::Cosine,
        MetricArg::Euclidean => Metric::Euclidean,
    };
    let state = load_checkpoint(checkpoint)?;
    let fold = fold.or(state.config().test_fold);
    let out = &common.out;
    write_snapshot(out, &EvalSnapshot { command: "evaluate", checkpoint, cache: cache_dir, backend: backend_path, fold, metric })?;
    let gen = state.generator();
    let size = gen.arch().image_size;
    let backend = load_backend(backend_path, size)?;
    let cache = Cache::open(cache_dir, size)?;
    let faces = cache.select(fold, true);

    let young = AgeGroup::new(0)?;
    let old = AgeGroup::new(NUM_AGE_GROUPS - 1)?;
    let (prog_gallery, prog_probes) = direction_sets(gen, &faces, young, Direction::Progression)?;
    let (reg_gallery, reg_probes) = direction_sets(gen, &faces, old, Direction::Regression)?;
    if prog_probes.is_empty() && reg_probes.is_empty() {
        bail!("probe set is empty: the selected faces contain no group-{} or group-{} source faces", young.index(), old.index());
    }
    let mut report = EvaluationReport { metric, ..Default::default() };
    if !prog_probes.is_empty() {
        report.progression = DirectionReport::from_folds(vec![evalkit::rank1_recognition(&prog_gallery, &prog_probes, &backend, metric)?]);
    }
    if !reg_probes.is_empty() {
        report.regression = DirectionReport::from_folds(vec![evalkit::rank1_recognition(&reg_gallery, &reg_probes, &backend, metric)?]);
    }
    let sanity = if prog_gallery.is_empty() { &reg_gallery } else { &prog_gallery };
    let untouched: Vec<Probe> = sanity
        .entries()
        .iter()
        .map(|(identity, face)| Probe { identity: identity.clone(), target: young, face: face.clone() })
        .collect();
    report.self_match_rate = evalkit::rank1_recognition(sanity, &untouched, &backend, metric)?.overall.rate;

    let labeled: Vec<(FaceImage, AgeGroup)> = prog_probes.iter().chain(&reg_probes).map(|p| (p.face.clone(), p.target)).collect();
    report.age_accuracy = evalkit::age_accuracy(&labeled, &backend)?;

    let sources: Vec<(&FaceImage, AgeGroup)> = faces
        .iter()
        .filter(|f| f.group == young || f.group == old)
        .take(16)
        .map(|f| (&f.face, if f.group == young { old } else { young }))
        .collect();
    let mut stats = RegionStats::default();
    for (x, t) in &sources {
        let pair = evalkit::ablation_compare(gen, x, *t)?;
        let s = evalkit::region_statistics(&pair.diff, size, &gen.arch().patches)?;
        stats.inside_mean += s.inside_mean / sources.len() as f64;
        stats.outside_mean += s.outside_mean / sources.len() as f64;
        stats.inside_pixels = s.inside_pixels;
        stats.outside_pixels = s.outside_pixels;
    }
    report.ablation = (!sources.is_empty()).then_some(stats);
    report.write(out)?;
    print!("{}", report.to_table());
    println!("self-match rank-1 {:.4}, synthesis age accuracy {:.4}", report.self_match_rate, report.age_accuracy.overall.rate);
    Ok(())
}

#[derive(Serialize)]
struct FixtureSnapshot<'a> {
    command: &'static str,
    cache: Option<&'a Path>,
    size: usize,
    seed: u64,
    name: &'a str,
}

pub fn fixture(common: &Common, cache_dir: Option<&Path>, size: usize, name: &str) -> Result<()> {
    let seed = common.seed.unwrap_or(0);
    let out = &common.out;
    write_snapshot(out, &FixtureSnapshot { command: "fixture", cache: cache_dir, size, seed, name })?;
    let backend = match cache_dir {
        Some(dir) => {
            let cache = Cache::open(dir, size)?;
            let faces: Vec<FaceImage> = cache.faces.iter().map(|f| f.face.clone()).collect();
            let groups: Vec<AgeGroup> = cache.faces.iter().map(|f| f.group).collect();
            let cfg = PretrainConfig { seed, ..PretrainConfig::default() };
            let p = pretrain_fixture_age_classifier(&faces, &groups, &cfg)?;
            let acc = glca_core::perceptors::classification_accuracy(&p, &faces, &groups)?;
            println!("age classifier training accuracy {acc:.3}");
            p
        }
        None => ConvPerceptor::fixture(seed, size)?,
    };
    let path = out.join(name);
    backend.save(&path)?;
    println!("wrote {} ({})", path.display(), backend.digest()?);
    Ok(())
}
