//! Alternating generator/discriminator optimization, batch sampling,
//! metrics records and checkpoints.

mod checkpoint;
mod config;

use candle_core::{DType, Tensor};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datapipe::{AgeGroup, FaceImage, NUM_AGE_GROUPS};
use crate::discriminator::{adv_loss_discriminator, adv_loss_generator, Conditioned, Discriminator};
use crate::error::{Error, Result};
use crate::generator::Generator;
use crate::losses::{age_loss, compose_tensor, identity_loss, pixel_loss, scalar, total_generator_loss, LossComponents, LossReport};
use crate::optim::Adam;
use crate::perceptors::Perceptor;

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_VERSION};
pub use config::{ArchKind, TrainConfig};

/// Faces with their true age groups, indexed by group.
#[derive(Clone, Debug)]
pub struct TrainingSet {
    faces: Vec<FaceImage>,
    groups: Vec<AgeGroup>,
    by_group: [Vec<usize>; NUM_AGE_GROUPS],
}

impl TrainingSet {
    /// Fails unless every age group has at least one face.
    pub fn new(faces: Vec<FaceImage>, groups: Vec<AgeGroup>) -> Result<Self> {
        if faces.len() != groups.len() {
            return Err(Error::shape(format!("{} groups", faces.len()), groups.len()));
        }
        let mut by_group: [Vec<usize>; NUM_AGE_GROUPS] = Default::default();
        for (i, g) in groups.iter().enumerate() {
            by_group[g.index()].push(i);
        }
        if let Some(empty) = by_group.iter().position(|v| v.is_empty()) {
            return Err(Error::InvalidValue(format!("age group {empty} has no training faces")));
        }
        if let Some(f) = faces.iter().find(|f| f.height() != faces[0].height() || f.width() != faces[0].width()) {
            return Err(Error::shape(
                format!("{}x{}", faces[0].height(), faces[0].width()),
                format!("{}x{}", f.height(), f.width()),
            ));
        }
        Ok(Self { faces, groups, by_group })
    }

    pub fn len(&self) -> usize {
        self.faces.len()
    }

    pub fn is_empty(&self) -> bool {
        self.faces.is_empty()
    }

    pub fn faces(&self) -> &[FaceImage] {
        &self.faces
    }

    pub fn groups(&self) -> &[AgeGroup] {
        &self.groups
    }

    pub fn group_counts(&self) -> [usize; NUM_AGE_GROUPS] {
        std::array::from_fn(|g| self.by_group[g].len())
    }

    pub fn image_size(&self) -> usize {
        self.faces[0].height()
    }
}

/// Indices into a [`TrainingSet`] for one step.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchPlan {
    pub inputs: Vec<usize>,
    pub true_groups: Vec<AgeGroup>,
    pub targets: Vec<AgeGroup>,
    /// Faces of the target group used as real samples.
    pub reals: Vec<usize>,
}

/// Inputs uniform over the set; each target uniform over the other groups;
/// each real face uniform over the target group.
pub fn sample_training_batch<R: Rng>(set: &TrainingSet, batch_size: usize, rng: &mut R) -> BatchPlan {
    let mut plan = BatchPlan {
        inputs: Vec::with_capacity(batch_size),
        true_groups: Vec::with_capacity(batch_size),
        targets: Vec::with_capacity(batch_size),
        reals: Vec::with_capacity(batch_size),
    };
    for _ in 0..batch_size {
        let i = rng.gen_range(0..set.len());
        let g = set.groups[i];
        let target = *g.others().choose(rng).expect("at least two groups");
        let real = *set.by_group[target.index()].choose(rng).expect("validated non-empty");
        plan.inputs.push(i);
        plan.true_groups.push(g);
        plan.targets.push(target);
        plan.reals.push(real);
    }
    plan
}

/// One metrics-log line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub iteration: u64,
    #[serde(flatten)]
    pub generator: LossReport,
    pub d_updated: bool,
    pub d_loss: Option<f64>,
}

impl StepRecord {
    pub fn to_json_line(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }
}

/// Frozen networks used by the generator objective.
#[derive(Clone, Copy)]
pub struct Backends<'a> {
    pub identity: &'a dyn Perceptor,
    pub age: &'a dyn Perceptor,
}

impl<'a> Backends<'a> {
    pub fn shared(p: &'a dyn Perceptor) -> Self {
        Self { identity: p, age: p }
    }
}

struct StepTensors {
    x: Tensor,
    real: Tensor,
    plan: BatchPlan,
}

/// Everything needed to continue training.
pub struct TrainState {
    config: TrainConfig,
    generator: Generator,
    discriminator: Discriminator,
    g_opt: Adam,
    d_opt: Adam,
    iteration: u64,
    rng: ChaCha8Rng,
}

impl TrainState {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let generator = Generator::new(config.generator_arch()?, DType::F32, config.seed)?;
        let discriminator = Discriminator::new(config.discriminator_arch(), DType::F32, config.seed.wrapping_add(1))?;
        Self::from_parts(config, generator, discriminator)
    }

    pub(crate) fn from_parts(config: TrainConfig, generator: Generator, discriminator: Discriminator) -> Result<Self> {
        let g_opt = Adam::new(config.adam(), generator.params())?;
        let d_opt = Adam::new(config.adam(), discriminator.params())?;
        let rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(2));
        Ok(Self {
            config,
            generator,
            discriminator,
            g_opt,
            d_opt,
            iteration: 0,
            rng,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn generator(&self) -> &Generator {
        &self.generator
    }

    pub fn discriminator(&self) -> &Discriminator {
        &self.discriminator
    }

    /// Completed generator iterations.
    pub fn iteration(&self) -> u64 {
        self.iteration
    }

    pub fn sample(&mut self, set: &TrainingSet) -> BatchPlan {
        sample_training_batch(set, self.config.batch_size, &mut self.rng)
    }

    fn tensors(&self, set: &TrainingSet, plan: BatchPlan) -> Result<StepTensors> {
        let s = self.generator.arch().image_size;
        if set.image_size() != s {
            return Err(Error::shape(format!("{s}x{s} faces"), format!("{0}x{0}", set.image_size())));
        }
        let pick = |idx: &[usize]| -> Vec<FaceImage> { idx.iter().map(|&i| set.faces[i].clone()).collect() };
        Ok(StepTensors {
            x: FaceImage::batch_to_tensor(&pick(&plan.inputs), DType::F32)?,
            real: FaceImage::batch_to_tensor(&pick(&plan.reals), DType::F32)?,
            plan,
        })
    }

    /// One discriminator update; the generator is left untouched.
    pub fn update_discriminator(&mut self, set: &TrainingSet, plan: &BatchPlan) -> Result<f64> {
        let t = self.tensors(set, plan.clone())?;
        self.discriminator_phase(&t)
    }

    fn discriminator_phase(&mut self, t: &StepTensors) -> Result<f64> {
        let p = &t.plan;
        let fake = self.generator.forward(&t.x, &p.targets)?.detach();
        let loss = adv_loss_discriminator(
            &self.discriminator,
            Conditioned { images: &t.real, labels: &p.targets, true_groups: &p.targets },
            Conditioned { images: &t.x, labels: &p.targets, true_groups: &p.true_groups },
            Conditioned { images: &fake, labels: &p.targets, true_groups: &p.targets },
        )?;
        let value = scalar(&loss)?;
        if !value.is_finite() {
            return Err(Error::NonFinite {
                iteration: self.iteration + 1,
                components: format!("{{\"d_loss\":{value}}}"),
            });
        }
        let grads = loss.backward()?;
        self.d_opt.step(self.discriminator.params(), &grads)?;
        Ok(value)
    }

    /// One generator update; the discriminator is left untouched.
    pub fn update_generator(&mut self, set: &TrainingSet, plan: &BatchPlan, backends: Backends<'_>, pixel_active: bool) -> Result<LossReport> {
        let t = self.tensors(set, plan.clone())?;
        self.generator_phase(&t, backends, pixel_active)
    }

    fn generator_phase(&mut self, t: &StepTensors, backends: Backends<'_>, pixel_active: bool) -> Result<LossReport> {
        let targets = &t.plan.targets;
        let fake = self.generator.forward(&t.x, targets)?;
        let adv = adv_loss_generator(&self.discriminator, &fake, targets)?;
        let id = identity_loss(&t.x, &fake, backends.identity)?;
        let age = age_loss(&fake, targets, backends.age)?;
        let pixel = pixel_loss(&t.x, &fake)?;
        let components = LossComponents {
            adv: scalar(&adv)?,
            identity: scalar(&id)?,
            age: scalar(&age)?,
            pixel: scalar(&pixel)?,
        };
        let weights = self.config.loss_weights()?;
        let report = total_generator_loss(&components, &weights, pixel_active)?;
        if !components.all_finite() || !report.total.is_finite() {
            return Err(Error::NonFinite {
                iteration: self.iteration + 1,
                components: serde_json::to_string(&report)?,
            });
        }
        let total = compose_tensor(&adv, &id.to_dtype(adv.dtype())?, &age.to_dtype(adv.dtype())?, pixel_active.then_some(&pixel), &weights)?;
        let grads = total.backward()?;
        self.g_opt.step(self.generator.params(), &grads)?;
        Ok(report)
    }

    /// Samples a batch and runs one scheduled iteration: a discriminator
    /// update on every `d_every`-th iteration, then a generator update
    /// (pixel term on every `pixel_every`-th). Iterations count from 1.
    pub fn train_step(&mut self, set: &TrainingSet, backends: Backends<'_>) -> Result<StepRecord> {
        let plan = self.sample(set);
        let t = self.tensors(set, plan)?;
        let iter = self.iteration + 1;
        let d_loss = if self.config.d_active(iter) {
            Some(self.discriminator_phase(&t)?)
        } else {
            None
        };
        let report = self.generator_phase(&t, backends, self.config.pixel_active(iter))?;
        self.iteration = iter;
        Ok(StepRecord {
            iteration: iter,
            generator: report,
            d_updated: d_loss.is_some(),
            d_loss,
        })
    }
}
