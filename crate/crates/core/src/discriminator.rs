//! Age-conditioned quadrant discriminator.
//!
//! The face is split into its four 2x2 quadrants (top-left, top-right,
//! bottom-left, bottom-right). Each quadrant gets the broadcast label and is
//! scored by one shared network.

use candle_core::{DType, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datapipe::{concat_label, AgeGroup, FaceImage, FACE_SIZE, NUM_AGE_GROUPS};
use crate::error::{Error, Result};
use crate::nn::{leaky_relu, Conv2d, ConvSpec, Init, Linear, ParamStore};

/// Probabilities are floored at this value before taking logs.
pub const LOG_FLOOR: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiscriminatorArch {
    pub image_size: usize,
    pub num_classes: usize,
    /// Output widths of the stride-2 3x3 convolutions.
    pub widths: Vec<usize>,
}

impl DiscriminatorArch {
    pub fn standard() -> Self {
        Self {
            image_size: FACE_SIZE,
            num_classes: NUM_AGE_GROUPS,
            widths: vec![64, 128, 256, 512],
        }
    }

    pub fn compact(canvas: usize) -> Self {
        Self {
            image_size: canvas,
            widths: vec![8, 16, 32, 64],
            ..Self::standard()
        }
    }

    pub fn quadrant_size(&self) -> usize {
        self.image_size / 2
    }

    /// Spatial side of the last feature map.
    pub fn final_side(&self) -> usize {
        self.widths.iter().fold(self.quadrant_size(), |s, _| (s - 1) / 2 + 1)
    }
}

/// Splits `N x C x H x W` into its four quadrants.
pub fn quadrant_split_tensor(img: &Tensor) -> Result<[Tensor; 4]> {
    let (_, _, h, w) = img.dims4()?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::shape("even height and width", format!("{h}x{w}")));
    }
    let (qh, qw) = (h / 2, w / 2);
    let q = |r: usize, c: usize| -> Result<Tensor> { Ok(img.narrow(2, r * qh, qh)?.narrow(3, c * qw, qw)?) };
    Ok([q(0, 0)?, q(0, 1)?, q(1, 0)?, q(1, 1)?])
}

/// Host-side quadrants of a face.
pub fn quadrant_split(img: &FaceImage) -> Result<[FaceImage; 4]> {
    let (h, w) = (img.height(), img.width());
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::shape("even height and width", format!("{h}x{w}")));
    }
    let (qh, qw) = (h / 2, w / 2);
    let q = |qr: usize, qc: usize| -> Result<FaceImage> {
        let mut data = Vec::with_capacity(qh * qw * 3);
        for r in qr * qh..(qr + 1) * qh {
            let start = (r * w + qc * qw) * 3;
            data.extend_from_slice(&img.data()[start..start + qw * 3]);
        }
        FaceImage::with_size(qh, qw, data)
    };
    Ok([q(0, 0)?, q(0, 1)?, q(1, 0)?, q(1, 1)?])
}

/// Inverse of [`quadrant_split`].
pub fn quadrant_join(quads: &[FaceImage; 4]) -> Result<FaceImage> {
    let (qh, qw) = (quads[0].height(), quads[0].width());
    if quads.iter().any(|q| (q.height(), q.width()) != (qh, qw)) {
        return Err(Error::shape(format!("{qh}x{qw} quadrants"), "mixed sizes"));
    }
    let w = 2 * qw;
    let mut data = vec![0.0f32; 4 * qh * qw * 3];
    for (i, q) in quads.iter().enumerate() {
        let (qr, qc) = (i / 2, i % 2);
        for r in 0..qh {
            let dst = ((qr * qh + r) * w + qc * qw) * 3;
            data[dst..dst + qw * 3].copy_from_slice(&q.data()[r * qw * 3..(r + 1) * qw * 3]);
        }
    }
    FaceImage::with_size(2 * qh, w, data)
}

#[derive(Clone, Debug)]
pub struct Discriminator {
    arch: DiscriminatorArch,
    store: ParamStore,
    convs: Vec<Conv2d>,
    head: Linear,
}

impl Discriminator {
    pub fn new(arch: DiscriminatorArch, dtype: DType, seed: u64) -> Result<Self> {
        if arch.image_size % 2 != 0 || arch.widths.is_empty() {
            return Err(Error::InvalidValue(format!("bad discriminator architecture {arch:?}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new(dtype);
        let mut cin = 3 + arch.num_classes;
        let mut convs = Vec::new();
        for (i, &cout) in arch.widths.iter().enumerate() {
            convs.push(Conv2d::new(
                &mut store,
                &mut rng,
                &format!("scorer.conv{i}"),
                ConvSpec {
                    cin,
                    cout,
                    kernel: 3,
                    stride: 2,
                    padding: 1,
                    bias: true,
                    init: Init::Orthogonal { gain: 1.0 },
                },
            )?);
            cin = cout;
        }
        let side = arch.final_side();
        let head = Linear::new(&mut store, &mut rng, "scorer.head", cin * side * side, 1)?;
        Ok(Self {
            arch,
            store,
            convs,
            head,
        })
    }

    pub fn arch(&self) -> &DiscriminatorArch {
        &self.arch
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype()
    }

    /// Scores labeled quadrants, `K x (3+M) x q x q` to `K` logits.
    fn score_quadrants(&self, q: &Tensor) -> Result<Tensor> {
        let mut h = q.clone();
        for conv in &self.convs {
            h = leaky_relu(&conv.forward(&h)?, 0.2)?;
        }
        let k = h.dims()[0];
        Ok(self.head.forward(&h.reshape((k, ()))?)?.squeeze(1)?)
    }

    /// Pre-sigmoid quadrant scores, `N x 4` in TL, TR, BL, BR order.
    pub fn logits(&self, img: &Tensor, labels: &[AgeGroup]) -> Result<Tensor> {
        let s = self.arch.image_size;
        let dims = img.dims();
        if dims.len() != 4 || dims[1] != 3 || dims[2] != s || dims[3] != s {
            return Err(Error::shape(format!("N x 3 x {s} x {s}"), format!("{dims:?}")));
        }
        let n = dims[0];
        if labels.len() != n {
            return Err(Error::shape(format!("{n} labels"), labels.len()));
        }
        let img = img.to_dtype(self.dtype())?;
        let quads = quadrant_split_tensor(&img)?;
        let stacked = Tensor::cat(&quads, 0)?;
        let repeated: Vec<AgeGroup> = (0..4).flat_map(|_| labels.iter().copied()).collect();
        let scores = self.score_quadrants(&concat_label(&stacked, &repeated)?)?;
        Ok(scores.reshape((4, n))?.t()?.contiguous()?)
    }

    /// Quadrant probabilities `D(img, l)`, `N x 4`.
    pub fn scores(&self, img: &Tensor, labels: &[AgeGroup]) -> Result<Tensor> {
        Ok(candle_nn::ops::sigmoid(&self.logits(img, labels)?)?)
    }

    pub fn discriminate(&self, img: &FaceImage, label: AgeGroup) -> Result<[f64; 4]> {
        let s = self
            .scores(&img.to_tensor(self.dtype())?, &[label])?
            .to_dtype(DType::F64)?
            .squeeze(0)?
            .to_vec1::<f64>()?;
        Ok([s[0], s[1], s[2], s[3]])
    }
}

fn neg_log(p: &Tensor) -> Result<Tensor> {
    Ok(p.maximum(LOG_FLOOR)?.log()?.neg()?)
}

/// Discriminator objective from quadrant scores (each `N x 4`):
/// mean over samples of the quadrant sums of `-log D(real)`,
/// `-log(1 - D(input))` and `-log(1 - D(fake))`.
///
/// `input_mask` (length N, 1 = use, 0 = skip) drops input faces whose true
/// group equals the conditioning label; that term is averaged over the kept
/// samples.
pub fn adv_loss_discriminator_from_scores(
    real: &Tensor,
    input_neg: &Tensor,
    input_mask: &Tensor,
    fake: &Tensor,
) -> Result<Tensor> {
    let real_term = neg_log(real)?.sum(1)?.mean(0)?;
    let fake_term = neg_log(&fake.affine(-1.0, 1.0)?)?.sum(1)?.mean(0)?;
    let mask = input_mask.to_dtype(input_neg.dtype())?;
    let kept = mask.sum_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
    let per_sample = neg_log(&input_neg.affine(-1.0, 1.0)?)?.sum(1)?;
    let input_term = if kept > 0.0 {
        ((per_sample * mask)?.sum_all()? / kept)?
    } else {
        real_term.zeros_like()?
    };
    Ok(((real_term + input_term)? + fake_term)?)
}

/// Non-saturating generator objective: mean over samples of the quadrant sum
/// of `-log D(G(x, l), l)`.
pub fn adv_loss_generator_from_scores(fake: &Tensor) -> Result<Tensor> {
    Ok(neg_log(fake)?.sum(1)?.mean(0)?)
}

/// A labeled face batch: images `N x 3 x S x S`, the label each one is
/// scored under, and each image's true age group.
pub struct Conditioned<'a> {
    pub images: &'a Tensor,
    pub labels: &'a [AgeGroup],
    pub true_groups: &'a [AgeGroup],
}

/// Full discriminator objective. `fake.images` must already be detached from
/// the generator.
pub fn adv_loss_discriminator(
    disc: &Discriminator,
    real: Conditioned<'_>,
    input_neg: Conditioned<'_>,
    fake: Conditioned<'_>,
) -> Result<Tensor> {
    if real.labels != real.true_groups {
        return Err(Error::Contract(
            "real faces must belong to the age group they are conditioned on".into(),
        ));
    }
    let mask: Vec<f32> = input_neg
        .labels
        .iter()
        .zip(input_neg.true_groups)
        .map(|(l, t)| if l == t { 0.0 } else { 1.0 })
        .collect();
    let mask = Tensor::from_vec(mask, input_neg.labels.len(), input_neg.images.device())?;
    adv_loss_discriminator_from_scores(
        &disc.scores(real.images, real.labels)?,
        &disc.scores(input_neg.images, input_neg.labels)?,
        &mask,
        &disc.scores(fake.images, fake.labels)?,
    )
}

pub fn adv_loss_generator(disc: &Discriminator, fake: &Tensor, labels: &[AgeGroup]) -> Result<Tensor> {
    adv_loss_generator_from_scores(&disc.scores(fake, labels)?)
}
