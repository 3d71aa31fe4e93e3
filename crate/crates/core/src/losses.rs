//! Identity, age and pixel losses and their weighted composition.

use candle_core::{DType, Tensor, D};
use serde::{Deserialize, Serialize};

use crate::datapipe::AgeGroup;
use crate::error::{Error, Result};
use crate::perceptors::{IdentityFeatures, Perceptor};

/// Below this squared norm the value is still exact but the gradient stays finite.
const NORM_FLOOR: f64 = 1e-12;

/// Per-sample Euclidean norm over all non-batch dims.
///
/// Computed as `s / sqrt(max(s, floor))` with `s` the sum of squares: equal to
/// `sqrt(s)` whenever `s > floor`, exactly 0 at 0, and differentiable there.
fn sample_norms(diff: &Tensor) -> Result<Tensor> {
    let n = diff.dims()[0];
    let s = diff.reshape((n, ()))?.sqr()?.sum(1)?;
    Ok((&s / s.maximum(NORM_FLOOR)?.sqrt()?)?)
}

/// `||fc(x) - fc(gx)||_2 + ||pool(x) - pool(gx)||_F`, batch mean.
pub fn identity_loss_from_features(fx: &IdentityFeatures, fgx: &IdentityFeatures) -> Result<Tensor> {
    if fx.fc.dims() != fgx.fc.dims() || fx.pool.dims() != fgx.pool.dims() {
        return Err(Error::shape(format!("{:?}", fx.fc.dims()), format!("{:?}", fgx.fc.dims())));
    }
    let fc = sample_norms(&(&fx.fc - &fgx.fc)?)?;
    let pool = sample_norms(&(&fx.pool - &fgx.pool)?)?;
    Ok((fc + pool)?.mean(0)?)
}

pub fn identity_loss(x: &Tensor, gx: &Tensor, backend: &dyn Perceptor) -> Result<Tensor> {
    let fx = backend.identity_features(x)?;
    let fgx = backend.identity_features(gx)?;
    identity_loss_from_features(&fx, &fgx)
}

/// Mean cross-entropy of `logits` (`N x M`) against target groups.
pub fn age_loss_from_logits(logits: &Tensor, targets: &[AgeGroup]) -> Result<Tensor> {
    let (n, m) = logits.dims2()?;
    if n != targets.len() {
        return Err(Error::shape(format!("{n} targets"), targets.len()));
    }
    if let Some(bad) = targets.iter().find(|t| t.index() >= m) {
        return Err(Error::InvalidValue(format!("target {} >= number of classes {m}", bad.index())));
    }
    let idx: Vec<u32> = targets.iter().map(|t| t.index() as u32).collect();
    let idx = Tensor::from_vec(idx, (n, 1), logits.device())?;
    let logp = candle_nn::ops::log_softmax(logits, D::Minus1)?;
    Ok(logp.gather(&idx, 1)?.neg()?.mean_all()?)
}

pub fn age_loss(faces: &Tensor, targets: &[AgeGroup], backend: &dyn Perceptor) -> Result<Tensor> {
    age_loss_from_logits(&backend.age_logits(faces)?, targets)
}

/// `||x - gx||^2 / (C H W)` per sample, batch mean.
pub fn pixel_loss(x: &Tensor, gx: &Tensor) -> Result<Tensor> {
    if x.dims() != gx.dims() {
        return Err(Error::shape(format!("{:?}", x.dims()), format!("{:?}", gx.dims())));
    }
    Ok((x - gx)?.sqr()?.mean_all()?)
}

/// Trade-offs for the adversarial, identity, age and pixel terms.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub adv: f64,
    pub identity: f64,
    pub age: f64,
    pub pixel: f64,
}

impl LossWeights {
    pub fn new(adv: f64, identity: f64, age: f64, pixel: f64) -> Result<Self> {
        let w = Self { adv, identity, age, pixel };
        w.validate()?;
        Ok(w)
    }

    /// Morph setting.
    pub fn morph() -> Self {
        Self {
            adv: 1.0,
            identity: 0.005,
            age: 20.0,
            pixel: 10.0,
        }
    }

    /// CACD setting.
    pub fn cacd() -> Self {
        Self {
            adv: 2.0,
            identity: 0.01,
            age: 25.0,
            pixel: 15.0,
        }
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "morph" => Some(Self::morph()),
            "cacd" => Some(Self::cacd()),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("adv", self.adv), ("identity", self.identity), ("age", self.age), ("pixel", self.pixel)] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::InvalidValue(format!("loss weight {name} = {v} must be finite and >= 0")));
            }
        }
        Ok(())
    }
}

/// Scalar values of the generator loss terms for one step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossComponents {
    pub adv: f64,
    pub identity: f64,
    pub age: f64,
    pub pixel: f64,
}

impl LossComponents {
    pub fn all_finite(&self) -> bool {
        [self.adv, self.identity, self.age, self.pixel].iter().all(|v| v.is_finite())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub components: LossComponents,
    pub total: f64,
    pub pixel_active: bool,
}

/// Weighted sum of the components; the pixel term counts only when active.
pub fn total_generator_loss(c: &LossComponents, w: &LossWeights, pixel_active: bool) -> Result<LossReport> {
    w.validate()?;
    let mut total = w.adv * c.adv + w.identity * c.identity + w.age * c.age;
    if pixel_active {
        total += w.pixel * c.pixel;
    }
    Ok(LossReport {
        components: *c,
        total,
        pixel_active,
    })
}

/// Same composition on tensors, for backpropagation.
pub fn compose_tensor(adv: &Tensor, identity: &Tensor, age: &Tensor, pixel: Option<&Tensor>, w: &LossWeights) -> Result<Tensor> {
    let mut total = ((adv * w.adv)? + (identity * w.identity)?)?;
    total = (total + (age * w.age)?)?;
    if let Some(p) = pixel {
        total = (total + (p * w.pixel)?)?;
    }
    Ok(total)
}

pub(crate) fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}
