//! End-to-end acceptance checks. Runs as a plain binary so every criterion
//! prints its own PASS/FAIL line; exits nonzero if any criterion fails.
//!
//! `cargo test --test acceptance -- 4 6` runs only criteria 4 and 6.

use std::time::{Duration, Instant};

use candle_core::{DType, Device, Tensor};
use glca_core::datapipe::{concat_label, extract_patches};
use glca_core::discriminator::{adv_loss_discriminator, adv_loss_discriminator_from_scores, Conditioned};
use glca_core::evalkit::{self, rank1_from_features, Metric, ProbeFeatures};
use glca_core::losses::{self, total_generator_loss, LossComponents};
use glca_core::perceptors::{pretrain_fixture_age_classifier, PretrainConfig};
use glca_core::toy::toy_corpus;
use glca_core::trainer::{load_checkpoint, save_checkpoint, ArchKind, Backends, TrainingSet};
use glca_core::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn e<E: std::fmt::Display>(err: E) -> String {
    err.to_string()
}

fn g(i: usize) -> AgeGroup {
    AgeGroup::new(i).unwrap()
}

fn rand_face(rng: &mut ChaCha8Rng, size: usize, amp: f32) -> FaceImage {
    FaceImage::with_size(size, size, (0..size * size * 3).map(|_| rng.gen_range(-amp..amp)).collect()).unwrap()
}

fn residual_identity() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let started = Instant::now();
    let reduced = Generator::new(GeneratorArch::compact(128).map_err(e)?, DType::F32, 7).map_err(e)?;
    for k in 0..100 {
        let x = rand_face(&mut rng, 128, 1.0);
        let l = g(rng.gen_range(0..4));
        let y = reduced.generate(&x, l).map_err(e)?;
        ensure(y == x, format!("pair {k}: output differs from input"))?;
    }
    let reduced_time = started.elapsed();
    let started = Instant::now();
    let full = Generator::new(GeneratorArch::standard(), DType::F32, 7).map_err(e)?;
    for k in 0..3 {
        let x = rand_face(&mut rng, 128, 1.0);
        ensure(full.generate(&x, g(k)).map_err(e)? == x, format!("standard arch pair {k} differs"))?;
    }
    let total = reduced_time + started.elapsed();
    ensure(total < Duration::from_secs(60), format!("took {total:?}"))?;
    Ok(format!(
        "100 pairs bit-exact on reduced-width 128x128 ({reduced_time:.1?}), 3 pairs on the full-width network, total {total:.1?}"
    ))
}

fn shape_conformance() -> Outcome {
    let gen = Generator::new(GeneratorArch::standard(), DType::F32, 3).map_err(e)?;
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = rand_face(&mut rng, 128, 0.9);
    let labels = [g(1)];
    let xt = x.to_tensor(DType::F32).map_err(e)?;
    let global = gen.global_forward(&concat_label(&xt, &labels).map_err(e)?).map_err(e)?;
    ensure(global.dims() == [1, 64, 128, 128], format!("global {:?}", global.dims()))?;
    let patches = extract_patches(&x, &gen.arch().patches).map_err(e)?;
    for (i, p) in patches.iter().enumerate() {
        let spec = &gen.arch().patches[i];
        let pl = concat_label(&p.to_tensor(DType::F32).map_err(e)?, &labels).map_err(e)?;
        let canvas = gen.local_forward(i, &pl).map_err(e)?;
        ensure(canvas.dims() == [1, 64, 128, 128], format!("local {i} {:?}", canvas.dims()))?;
        let v = canvas.abs().map_err(e)?.sum(1).map_err(e)?.squeeze(0).map_err(e)?.to_vec2::<f32>().map_err(e)?;
        for (r, row) in v.iter().enumerate() {
            for (c, val) in row.iter().enumerate() {
                ensure(spec.contains(r, c) || *val == 0.0, format!("local {i} nonzero at ({r}, {c})"))?;
            }
        }
    }
    let y = gen.forward(&xt, &labels).map_err(e)?;
    ensure(y.dims() == [1, 3, 128, 128], format!("output {:?}", y.dims()))?;
    Ok("global 128x128x64, local canvases 128x128x64 with zero support outside patches, output 128x128x3".into())
}

fn loss_analytics() -> Outcome {
    let d = Device::Cpu;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = rand_face(&mut rng, 128, 0.4).to_tensor(DType::F64).map_err(e)?;
    let shifted = (&x + 0.5).map_err(e)?;
    let pixel = losses::pixel_loss(&x, &shifted).map_err(e)?.to_scalar::<f64>().map_err(e)?;
    ensure((pixel - 0.25).abs() <= 1e-6, format!("pixel {pixel}"))?;

    let uniform = Tensor::zeros((5, 4), DType::F64, &d).map_err(e)?;
    let age = losses::age_loss_from_logits(&uniform, &[g(0), g(1), g(2), g(3), g(1)]).map_err(e)?.to_scalar::<f64>().map_err(e)?;
    ensure((age - 4f64.ln()).abs() <= 1e-6, format!("age {age}"))?;

    let half = Tensor::full(0.5f64, (3, 4), &d).map_err(e)?;
    let mask = Tensor::ones(3, DType::F64, &d).map_err(e)?;
    let adv = adv_loss_discriminator_from_scores(&half, &half, &mask, &half).map_err(e)?.to_scalar::<f64>().map_err(e)?;
    ensure((adv - 12.0 * 2f64.ln()).abs() <= 1e-6, format!("adv {adv}"))?;

    let ones = LossComponents { adv: 1.0, identity: 1.0, age: 1.0, pixel: 1.0 };
    let morph = total_generator_loss(&ones, &LossWeights::morph(), true).map_err(e)?.total;
    let cacd = total_generator_loss(&ones, &LossWeights::cacd(), true).map_err(e)?.total;
    ensure((morph - 31.005).abs() <= 1e-9, format!("morph total {morph}"))?;
    ensure((cacd - 42.01).abs() <= 1e-9, format!("cacd total {cacd}"))?;
    Ok(format!("pixel {pixel}, age {age:.9}, adv {adv:.9}, totals {morph} / {cacd}"))
}

/// Central differences on sampled coordinates of every parameter tensor.
fn fd_check(store: &nn::ParamStore, loss: &dyn Fn() -> Tensor, per_tensor: usize, seed: u64) -> Result<(usize, usize), String> {
    let grads = loss().backward().map_err(e)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let h = 1e-5;
    let (mut ok, mut total) = (0, 0);
    for (_, var) in store.iter() {
        let shape = var.shape().clone();
        let base = var.as_tensor().flatten_all().map_err(e)?.to_vec1::<f64>().map_err(e)?;
        let analytic = match grads.get(var) {
            Some(t) => t.flatten_all().map_err(e)?.to_vec1::<f64>().map_err(e)?,
            None => vec![0.0; base.len()],
        };
        for _ in 0..per_tensor {
            let i = rng.gen_range(0..base.len());
            let eval = |delta: f64| -> Result<f64, String> {
                let mut v = base.clone();
                v[i] += delta;
                var.set(&Tensor::from_vec(v, shape.clone(), &Device::Cpu).map_err(e)?).map_err(e)?;
                loss().to_scalar::<f64>().map_err(e)
            };
            let numeric = (eval(h)? - eval(-h)?) / (2.0 * h);
            var.set(&Tensor::from_vec(base.clone(), shape.clone(), &Device::Cpu).map_err(e)?).map_err(e)?;
            let a = analytic[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-7);
            total += 1;
            ok += (rel <= 1e-3) as usize;
        }
    }
    Ok((ok, total))
}

fn gradient_correctness() -> Outcome {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut arch = GeneratorArch::compact(32).map_err(e)?;
    arch.zero_init_output = false;
    let gen = Generator::new(arch, DType::F64, 5).map_err(e)?;
    let x = FaceImage::batch_to_tensor(&[rand_face(&mut rng, 32, 0.5), rand_face(&mut rng, 32, 0.5)], DType::F64).map_err(e)?;
    let w = Tensor::randn(0f64, 1.0, (2, 3, 32, 32), &Device::Cpu).map_err(e)?;
    let labels = [g(0), g(3)];
    let g_loss = || gen.residual(&x, &labels).unwrap().mul(&w).unwrap().sum_all().unwrap();
    let (g_ok, g_total) = fd_check(gen.params(), &g_loss, 3, 6)?;

    let disc = Discriminator::new(DiscriminatorArch::compact(32), DType::F64, 8).map_err(e)?;
    let real = FaceImage::batch_to_tensor(&[rand_face(&mut rng, 32, 1.0), rand_face(&mut rng, 32, 1.0)], DType::F64).map_err(e)?;
    let fake = FaceImage::batch_to_tensor(&[rand_face(&mut rng, 32, 1.0), rand_face(&mut rng, 32, 1.0)], DType::F64).map_err(e)?;
    let targets = [g(1), g(2)];
    let truth = [g(0), g(3)];
    let d_loss = || {
        adv_loss_discriminator(
            &disc,
            Conditioned { images: &real, labels: &targets, true_groups: &targets },
            Conditioned { images: &x, labels: &targets, true_groups: &truth },
            Conditioned { images: &fake, labels: &targets, true_groups: &targets },
        )
        .unwrap()
    };
    let (d_ok, d_total) = fd_check(disc.params(), &d_loss, 3, 9)?;

    let frac_g = g_ok as f64 / g_total as f64;
    let frac_d = d_ok as f64 / d_total as f64;
    let elapsed = started.elapsed();
    ensure(frac_g >= 0.95 && frac_d >= 0.95, format!("generator {g_ok}/{g_total}, discriminator {d_ok}/{d_total} within 1e-3"))?;
    ensure(elapsed < Duration::from_secs(300), format!("took {elapsed:?}"))?;
    Ok(format!(
        "generator {g_ok}/{g_total}, discriminator {d_ok}/{d_total} coordinates within 1e-3 relative error ({elapsed:.1?})"
    ))
}

fn small_config() -> TrainConfig {
    TrainConfig {
        arch: ArchKind::Compact,
        image_size: 32,
        batch_size: 4,
        zero_init_output: false,
        test_fold: None,
        ..TrainConfig::default()
    }
}

fn schedule_law() -> Outcome {
    let corpus = toy_corpus(8, 32, 10);
    let set = TrainingSet::new(corpus.faces, corpus.groups).map_err(e)?;
    let backend = ConvPerceptor::fixture(0, 32).map_err(e)?;
    let mut st = TrainState::new(small_config()).map_err(e)?;
    let (mut d_updates, mut pixel) = (0, 0);
    for _ in 0..100 {
        let d_before = st.discriminator().params().digest().map_err(e)?;
        let rec = st.train_step(&set, Backends::shared(&backend)).map_err(e)?;
        let d_changed = d_before != st.discriminator().params().digest().map_err(e)?;
        ensure(d_changed == rec.d_updated, format!("iteration {}: discriminator changed = {d_changed}", rec.iteration))?;
        d_updates += rec.d_updated as usize;
        pixel += rec.generator.pixel_active as usize;
    }
    ensure((d_updates, pixel) == (50, 20), format!("{d_updates} discriminator updates, {pixel} pixel-active steps"))?;

    for _ in 0..5 {
        let plan = st.sample(&set);
        let g0 = st.generator().params().digest().map_err(e)?;
        st.update_discriminator(&set, &plan).map_err(e)?;
        ensure(g0 == st.generator().params().digest().map_err(e)?, "generator changed during discriminator update")?;
        let d0 = st.discriminator().params().digest().map_err(e)?;
        st.update_generator(&set, &plan, Backends::shared(&backend), true).map_err(e)?;
        ensure(d0 == st.discriminator().params().digest().map_err(e)?, "discriminator changed during generator update")?;
    }
    Ok("100 iterations: 50 discriminator updates, 20 pixel-active steps; frozen-side hashes held".into())
}

fn toy_overfit() -> Outcome {
    let started = Instant::now();
    let size = 32;
    // classifier trained on other toy identities, then frozen
    let pool = toy_corpus(160, size, 99);
    let backend = pretrain_fixture_age_classifier(&pool.faces, &pool.groups, &PretrainConfig::default()).map_err(e)?;

    let corpus = toy_corpus(8, size, 10);
    let set = TrainingSet::new(corpus.faces.clone(), corpus.groups.clone()).map_err(e)?;
    let cfg = TrainConfig { max_iters: 2000, ..small_config() };
    let mut st = TrainState::new(cfg.clone()).map_err(e)?;
    let mut first = None;
    let mut last = f64::NAN;
    for _ in 0..cfg.max_iters {
        let rec = st.train_step(&set, Backends::shared(&backend)).map_err(e)?;
        if rec.generator.pixel_active {
            first.get_or_insert(rec.generator.components.pixel);
            last = rec.generator.components.pixel;
        }
    }
    let first = first.ok_or("no pixel-active step")?;
    let drop = 1.0 - last / first;

    let mut probes = Vec::new();
    for (x, src) in corpus.faces.iter().zip(&corpus.groups) {
        for t in src.others() {
            probes.push((st.generator().generate(x, t).map_err(e)?, t));
        }
    }
    let acc = evalkit::age_accuracy(&probes, &backend).map_err(e)?.overall.rate;
    let elapsed = started.elapsed();
    let summary = format!(
        "pixel {first:.5} -> {last:.5} (drop {:.1}%), synthesis age accuracy {acc:.3} over {} probes, {elapsed:.0?}",
        100.0 * drop,
        probes.len()
    );
    ensure(drop >= 0.8 && acc > 0.4 && elapsed < Duration::from_secs(900), summary.clone())?;
    Ok(summary)
}

fn determinism_and_resume() -> Outcome {
    let dir = tempfile::tempdir().map_err(e)?;
    let corpus = toy_corpus(8, 32, 11);
    let set = TrainingSet::new(corpus.faces, corpus.groups).map_err(e)?;
    let backend = ConvPerceptor::fixture(1, 32).map_err(e)?;
    let b = Backends::shared(&backend);
    let run = |n: usize, st: &mut TrainState| -> Result<Vec<String>, String> {
        (0..n).map(|_| st.train_step(&set, b).and_then(|r| r.to_json_line()).map_err(e)).collect()
    };
    let mut a = TrainState::new(small_config()).map_err(e)?;
    let log_a = run(20, &mut a)?;
    let mut bb = TrainState::new(small_config()).map_err(e)?;
    let log_b = run(20, &mut bb)?;
    ensure(log_a == log_b, "two seeded runs produced different logs")?;

    let mut c = TrainState::new(small_config()).map_err(e)?;
    let mut log_c = run(12, &mut c)?;
    let path = dir.path().join("resume.ckpt");
    save_checkpoint(&c, &path).map_err(e)?;
    drop(c);
    let mut resumed = load_checkpoint(&path).map_err(e)?;
    log_c.extend(run(8, &mut resumed)?);
    ensure(log_c == log_a, "resumed trajectory diverged from the uninterrupted run")?;
    ensure(
        resumed.generator().params().digest().map_err(e)? == a.generator().params().digest().map_err(e)?,
        "final generator parameters differ",
    )?;
    Ok("identical 20-step logs across runs; resume at 12 matches uninterrupted run".into())
}

fn evaluation_oracle() -> Outcome {
    let basis = |i: usize| -> Vec<f32> { (0..3).map(|k| (k == i) as u8 as f32).collect() };
    let gallery: Vec<(String, Vec<f32>)> = (0..3).map(|i| (format!("id{i}"), basis(i))).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let noisy: Vec<ProbeFeatures> = (0..3)
        .map(|i| ProbeFeatures {
            identity: format!("id{i}"),
            target: g(1),
            features: basis(i).iter().map(|v| v + 0.01 * rng.sample::<f32, _>(rand_distr::StandardNormal)).collect(),
        })
        .collect();
    let right = rank1_from_features(&gallery, &noisy, Metric::Cosine).map_err(e)?.overall.rate;
    ensure(right == 1.0, format!("noisy self probes rate {right}"))?;
    let wrong: Vec<ProbeFeatures> = (0..3)
        .map(|i| ProbeFeatures { identity: format!("id{i}"), target: g(1), features: basis((i + 1) % 3) })
        .collect();
    let wrong_rate = rank1_from_features(&gallery, &wrong, Metric::Cosine).map_err(e)?.overall.rate;
    ensure(wrong_rate == 0.0, format!("wrong-identity probes rate {wrong_rate}"))?;

    for inst in 0..20 {
        let gallery: Vec<(String, Vec<f32>)> = (0..10)
            .map(|i| (format!("id{i}"), (0..8).map(|_| rng.gen_range(-1.0f32..1.0)).collect()))
            .collect();
        let probes: Vec<ProbeFeatures> = (0..25)
            .map(|_| {
                let i = rng.gen_range(0..10);
                ProbeFeatures {
                    identity: format!("id{i}"),
                    target: g(rng.gen_range(0..4)),
                    features: gallery[i].1.iter().map(|v| v + rng.gen_range(-0.9f32..0.9)).collect(),
                }
            })
            .collect();
        let report = rank1_from_features(&gallery, &probes, Metric::Cosine).map_err(e)?;
        let mut correct = 0;
        for p in &probes {
            let cos = |a: &[f32]| {
                let dot: f64 = a.iter().zip(&p.features).map(|(x, y)| *x as f64 * *y as f64).sum();
                let na = a.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
                let nb = p.features.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
                dot / (na * nb)
            };
            let mut best = 0;
            for j in 1..gallery.len() {
                if cos(&gallery[j].1) > cos(&gallery[best].1) {
                    best = j;
                }
            }
            correct += (gallery[best].0 == p.identity) as usize;
        }
        ensure(
            report.overall.correct == correct && report.overall.rate == correct as f64 / probes.len() as f64,
            format!("instance {inst}: harness {} vs brute force {correct}", report.overall.correct),
        )?;
    }
    Ok("orthogonal gallery gives 1.0 / 0.0; 20 random 10-identity instances match brute force".into())
}

fn ablation_plumbing() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let mut arch = GeneratorArch::compact(32).map_err(e)?;
    arch.zero_init_output = false;
    let gen = Generator::new(arch, DType::F32, 14).map_err(e)?;
    let x = rand_face(&mut rng, 32, 0.8);
    let full = gen.generate(&x, g(2)).map_err(e)?;
    let global_only = gen.generate_ablated(&x, g(2)).map_err(e)?;
    ensure(full != global_only, "ablation had no effect with random local weights")?;
    let before = evalkit::ablation_compare(&gen, &x, g(2)).map_err(e)?;
    let stats = evalkit::region_statistics(&before.diff, 32, &gen.arch().patches).map_err(e)?;

    for (name, var) in gen.params().iter() {
        if name.starts_with("local.") {
            var.set(&var.zeros_like().map_err(e)?).map_err(e)?;
        }
    }
    let full = gen.generate(&x, g(2)).map_err(e)?;
    let global_only = gen.generate_ablated(&x, g(2)).map_err(e)?;
    ensure(full == global_only, "outputs differ with zeroed local branches")?;
    Ok(format!(
        "differs with random locals (mean |diff| inside patches {:.4}, outside {:.4}); equal with zeroed locals",
        stats.inside_mean, stats.outside_mean
    ))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 9] = [
        ("residual identity", residual_identity),
        ("shape conformance", shape_conformance),
        ("loss analytics", loss_analytics),
        ("gradient correctness", gradient_correctness),
        ("schedule law", schedule_law),
        ("toy overfit", toy_overfit),
        ("determinism and resume", determinism_and_resume),
        ("evaluation harness oracle", evaluation_oracle),
        ("ablation plumbing", ablation_plumbing),
    ];
    let wanted: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let n = i + 1;
        if !wanted.is_empty() && !wanted.contains(&n) {
            continue;
        }
        match check() {
            Ok(detail) => println!("PASS {n} {name}: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL {n} {name}: {detail}");
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
