//! Frozen identity / age networks behind a pluggable interface.
//!
//! [`ConvPerceptor`] is the built-in backend: a five-convolution network
//! whose weights come either from a seeded initialization (the fixture), from
//! [`pretrain_fixture_age_classifier`], or from a weight file.

use std::collections::BTreeMap;
use std::path::Path;

use candle_core::{DType, Tensor, D};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::container;
use crate::datapipe::{AgeGroup, FaceImage, FACE_SIZE, NUM_AGE_GROUPS};
use crate::error::{Error, Result};
use crate::losses::age_loss_from_logits;
use crate::nn::{leaky_relu, Conv2d, ConvSpec, Init, Linear, ParamStore};
use crate::optim::{Adam, AdamConfig};

const MAGIC: &[u8; 8] = b"GLCAPERC";
const FORMAT_VERSION: u32 = 1;

/// Shape and range contract of a backend.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerceptorDescriptor {
    pub name: String,
    pub version: String,
    /// Side of the square input face.
    pub input_size: usize,
    /// Length of the fc identity vector.
    #[serde(rename = "F")]
    pub fc_dim: usize,
    /// `(h_p, w_p, c_p)` of the pooling map.
    pub pool_shape: [usize; 3],
    #[serde(rename = "M")]
    pub num_classes: usize,
    /// Value range the network expects; faces arrive in `[-1, 1]`.
    pub input_range: [f32; 2],
    pub conv_widths: Vec<usize>,
    pub conv_strides: Vec<usize>,
}

impl PerceptorDescriptor {
    pub fn fixture(input_size: usize) -> Result<Self> {
        let conv_widths = vec![16, 32, 32, 64, 64];
        let conv_strides = vec![1, 2, 2, 2, 2];
        let side = conv_strides.iter().fold(input_size, |s, st| (s - 1) / st + 1);
        if side < 2 {
            return Err(Error::Backend(format!("input size {input_size} is too small for the fixture network")));
        }
        Ok(Self {
            name: "fixture".into(),
            version: "1".into(),
            input_size,
            fc_dim: 64,
            pool_shape: [side / 2, side / 2, *conv_widths.last().unwrap()],
            num_classes: NUM_AGE_GROUPS,
            input_range: [-1.0, 1.0],
            conv_widths,
            conv_strides,
        })
    }

    fn validate(&self) -> Result<()> {
        if self.conv_widths.is_empty() || self.conv_widths.len() != self.conv_strides.len() {
            return Err(Error::Backend("conv widths and strides must be non-empty and equal length".into()));
        }
        if self.num_classes != NUM_AGE_GROUPS {
            return Err(Error::Backend(format!(
                "backend has M = {}, expected {NUM_AGE_GROUPS}",
                self.num_classes
            )));
        }
        let side = self.conv_strides.iter().fold(self.input_size, |s, st| (s - 1) / st + 1);
        let expect = [side / 2, side / 2, *self.conv_widths.last().unwrap()];
        if self.pool_shape != expect || side < 2 {
            return Err(Error::Backend(format!(
                "pool shape {:?} inconsistent with architecture (expected {expect:?})",
                self.pool_shape
            )));
        }
        Ok(())
    }
}

/// `fc_vector` (`N x F`) and `pool_map` (`N x c_p x h_p x w_p`).
#[derive(Clone, Debug)]
pub struct IdentityFeatures {
    pub fc: Tensor,
    pub pool: Tensor,
}

/// A frozen feature extractor. Outputs are differentiable with respect to
/// the input faces; backend parameters never receive gradients.
pub trait Perceptor: Send + Sync {
    fn descriptor(&self) -> &PerceptorDescriptor;

    /// Faces are `N x 3 x S x S` in `[-1, 1]`.
    fn identity_features(&self, faces: &Tensor) -> Result<IdentityFeatures>;

    /// Pre-softmax age scores, `N x M`.
    fn age_logits(&self, faces: &Tensor) -> Result<Tensor>;

    /// Hash of the frozen parameters.
    fn digest(&self) -> Result<String>;
}

#[derive(Clone, Debug)]
struct Net {
    convs: Vec<Conv2d>,
    fc: Linear,
    head: Linear,
}

impl Net {
    fn build(store: &mut ParamStore, rng: &mut ChaCha8Rng, desc: &PerceptorDescriptor) -> Result<Self> {
        let mut cin = 3;
        let mut convs = Vec::new();
        for (i, (&w, &s)) in desc.conv_widths.iter().zip(&desc.conv_strides).enumerate() {
            convs.push(Conv2d::new(
                store,
                rng,
                &format!("conv{i}"),
                ConvSpec {
                    cin,
                    cout: w,
                    kernel: 3,
                    stride: s,
                    padding: 1,
                    bias: true,
                    init: Init::Orthogonal { gain: 1.0 },
                },
            )?);
            cin = w;
        }
        let fc = Linear::new(store, rng, "fc", cin, desc.fc_dim)?;
        let head = Linear::new(store, rng, "age_head", desc.fc_dim, desc.num_classes)?;
        Ok(Self { convs, fc, head })
    }

    fn from_tensors(desc: &PerceptorDescriptor, t: &BTreeMap<String, Tensor>) -> Result<Self> {
        let get = |k: &str| -> Result<Tensor> {
            t.get(k)
                .map(|v| v.detach())
                .ok_or_else(|| Error::Backend(format!("weight file is missing tensor {k}")))
        };
        let convs = desc
            .conv_strides
            .iter()
            .enumerate()
            .map(|(i, &s)| Ok(Conv2d::from_parts(get(&format!("conv{i}.weight"))?, Some(get(&format!("conv{i}.bias"))?), s, 1)))
            .collect::<Result<_>>()?;
        Ok(Self {
            convs,
            fc: Linear::from_parts(get("fc.weight")?, get("fc.bias")?),
            head: Linear::from_parts(get("age_head.weight")?, get("age_head.bias")?),
        })
    }

    /// Returns `(fc, pool, logits)`.
    fn forward(&self, desc: &PerceptorDescriptor, faces: &Tensor) -> Result<(Tensor, Tensor, Tensor)> {
        let dims = faces.dims();
        let s = desc.input_size;
        if dims.len() != 4 || dims[1] != 3 || dims[2] != s || dims[3] != s {
            return Err(Error::shape(format!("N x 3 x {s} x {s}"), format!("{dims:?}")));
        }
        let [lo, hi] = desc.input_range;
        let scale = (hi - lo) as f64 / 2.0;
        let mut h = faces.affine(scale, lo as f64 + scale)?;
        for conv in &self.convs {
            h = leaky_relu(&conv.forward(&h)?, 0.2)?;
        }
        let pool = h.avg_pool2d(2)?;
        let pooled = pool.mean(D::Minus1)?.mean(D::Minus1)?;
        let fc = self.fc.forward(&pooled)?;
        let logits = self.head.forward(&fc)?;
        Ok((fc, pool, logits))
    }
}

/// The built-in backend.
#[derive(Clone, Debug)]
pub struct ConvPerceptor {
    desc: PerceptorDescriptor,
    weights: BTreeMap<String, Tensor>,
    net: Net,
}

impl ConvPerceptor {
    /// Seeded, untrained fixture network.
    pub fn fixture(seed: u64, input_size: usize) -> Result<Self> {
        let desc = PerceptorDescriptor::fixture(input_size)?;
        let mut store = ParamStore::new(DType::F32);
        Net::build(&mut store, &mut ChaCha8Rng::seed_from_u64(seed), &desc)?;
        Self::from_weights(desc, store.snapshot()?)
    }

    /// Standard fixture for 128x128 faces.
    pub fn fixture_default(seed: u64) -> Result<Self> {
        Self::fixture(seed, FACE_SIZE)
    }

    pub fn from_weights(desc: PerceptorDescriptor, weights: BTreeMap<String, Tensor>) -> Result<Self> {
        desc.validate()?;
        let weights: BTreeMap<String, Tensor> = weights
            .into_iter()
            .map(|(k, v)| Ok((k, v.detach().to_dtype(DType::F32)?)))
            .collect::<Result<_>>()?;
        let net = Net::from_tensors(&desc, &weights)?;
        Ok(Self { desc, weights, net })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        container::write(path, MAGIC, FORMAT_VERSION, &serde_json::to_value(&self.desc)?, &self.weights)
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::Backend(format!(
                "backend file {} not found; generate one with `glca fixture`",
                path.display()
            )));
        }
        let c = container::read(path, MAGIC, FORMAT_VERSION)?;
        let desc: PerceptorDescriptor = serde_json::from_value(c.header)
            .map_err(|e| Error::Backend(format!("invalid descriptor header: {e}")))?;
        Self::from_weights(desc, c.tensors)
    }

    fn run(&self, faces: &Tensor) -> Result<(Tensor, Tensor, Tensor)> {
        self.net.forward(&self.desc, &faces.to_dtype(DType::F32)?)
    }
}

impl Perceptor for ConvPerceptor {
    fn descriptor(&self) -> &PerceptorDescriptor {
        &self.desc
    }

    fn identity_features(&self, faces: &Tensor) -> Result<IdentityFeatures> {
        let (fc, pool, _) = self.run(faces)?;
        Ok(IdentityFeatures { fc, pool })
    }

    fn age_logits(&self, faces: &Tensor) -> Result<Tensor> {
        Ok(self.run(faces)?.2)
    }

    fn digest(&self) -> Result<String> {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        for (k, t) in &self.weights {
            h.update(k.as_bytes());
            for v in t.flatten_all()?.to_vec1::<f32>()? {
                h.update(v.to_le_bytes());
            }
        }
        Ok(crate::nn::hex(&h.finalize()))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    pub target_accuracy: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 60,
            batch_size: 20,
            lr: 1e-3,
            seed: 0,
            target_accuracy: 0.95,
        }
    }
}

/// Argmax accuracy of `backend` on labeled faces.
pub fn classification_accuracy(backend: &dyn Perceptor, faces: &[FaceImage], groups: &[AgeGroup]) -> Result<f64> {
    let mut correct = 0usize;
    for (chunk, labels) in faces.chunks(50).zip(groups.chunks(50)) {
        let logits = backend.age_logits(&FaceImage::batch_to_tensor(chunk, DType::F32)?)?;
        let pred = logits.argmax(D::Minus1)?.to_vec1::<u32>()?;
        correct += pred.iter().zip(labels).filter(|(p, g)| **p as usize == g.index()).count();
    }
    Ok(correct as f64 / faces.len() as f64)
}

/// Trains the fixture network as an age classifier on labeled faces and
/// freezes it. Fails when the training-set accuracy stays below the target.
pub fn pretrain_fixture_age_classifier(faces: &[FaceImage], groups: &[AgeGroup], cfg: &PretrainConfig) -> Result<ConvPerceptor> {
    if faces.is_empty() || faces.len() != groups.len() {
        return Err(Error::InvalidValue("need one group label per face".into()));
    }
    let mut classes: Vec<AgeGroup> = groups.to_vec();
    classes.sort();
    classes.dedup();
    if classes.len() < 2 {
        return Err(Error::TrainingFailure(format!(
            "age classifier needs at least 2 classes, dataset has {}",
            classes.len()
        )));
    }
    let size = faces[0].height();
    let desc = PerceptorDescriptor::fixture(size)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut store = ParamStore::new(DType::F32);
    let net = Net::build(&mut store, &mut rng, &desc)?;
    let mut opt = Adam::new(
        AdamConfig {
            lr: cfg.lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        },
        &store,
    )?;
    let mut order: Vec<usize> = (0..faces.len()).collect();
    let mut last_loss = f64::NAN;
    let mut accuracy = 0.0;
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for idx in order.chunks(cfg.batch_size.max(1)) {
            let batch: Vec<FaceImage> = idx.iter().map(|&i| faces[i].clone()).collect();
            let targets: Vec<AgeGroup> = idx.iter().map(|&i| groups[i]).collect();
            let (_, _, logits) = net.forward(&desc, &FaceImage::batch_to_tensor(&batch, DType::F32)?)?;
            let loss = age_loss_from_logits(&logits, &targets)?;
            last_loss = loss.to_scalar::<f32>()? as f64;
            opt.step(&store, &loss.backward()?)?;
        }
        let frozen = ConvPerceptor::from_weights(desc.clone(), store.snapshot()?)?;
        accuracy = classification_accuracy(&frozen, faces, groups)?;
        if accuracy >= cfg.target_accuracy {
            return Ok(frozen);
        }
    }
    Err(Error::TrainingFailure(format!(
        "age classifier reached {:.3} training accuracy after {} epochs (target {:.2}); last batch loss {last_loss:.4}",
        accuracy, cfg.epochs, cfg.target_accuracy
    )))
}
