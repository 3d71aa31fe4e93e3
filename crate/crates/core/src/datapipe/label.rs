use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::concat_label_channels;

/// Number of age bins.
pub const NUM_AGE_GROUPS: usize = 4;

/// Inclusive upper bound of each bin; the lower bound of bin 0 is 14.
const GROUP_UPPER: [i64; NUM_AGE_GROUPS] = [30, 40, 50, 62];
const MIN_AGE: i64 = 14;

/// Age bin index: 0 = 14-30, 1 = 31-40, 2 = 41-50, 3 = 51-62.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub struct AgeGroup(u8);

impl AgeGroup {
    pub const ALL: [AgeGroup; NUM_AGE_GROUPS] = [AgeGroup(0), AgeGroup(1), AgeGroup(2), AgeGroup(3)];

    pub fn new(index: usize) -> Result<Self> {
        if index < NUM_AGE_GROUPS {
            Ok(Self(index as u8))
        } else {
            Err(Error::InvalidValue(format!(
                "age group {index} out of range 0..{NUM_AGE_GROUPS}"
            )))
        }
    }

    pub fn index(self) -> usize {
        self.0 as usize
    }

    pub fn one_hot(self) -> [f32; NUM_AGE_GROUPS] {
        let mut v = [0.0; NUM_AGE_GROUPS];
        v[self.index()] = 1.0;
        v
    }

    /// Age range covered by the bin, inclusive.
    pub fn span(self) -> (i64, i64) {
        let lo = if self.0 == 0 { MIN_AGE } else { GROUP_UPPER[self.index() - 1] + 1 };
        (lo, GROUP_UPPER[self.index()])
    }

    /// Groups strictly older than `self`, ascending.
    pub fn older(self) -> Vec<AgeGroup> {
        Self::ALL.into_iter().filter(|g| *g > self).collect()
    }

    /// Groups strictly younger than `self`, from oldest to youngest.
    pub fn younger(self) -> Vec<AgeGroup> {
        Self::ALL.into_iter().rev().filter(|g| *g < self).collect()
    }

    /// Every group other than `self`, ascending.
    pub fn others(self) -> Vec<AgeGroup> {
        Self::ALL.into_iter().filter(|g| *g != self).collect()
    }
}

impl TryFrom<u8> for AgeGroup {
    type Error = Error;
    fn try_from(v: u8) -> Result<Self> {
        Self::new(v as usize)
    }
}

impl From<AgeGroup> for u8 {
    fn from(g: AgeGroup) -> u8 {
        g.0
    }
}

impl std::fmt::Display for AgeGroup {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let (lo, hi) = self.span();
        write!(f, "{}({lo}-{hi})", self.0)
    }
}

pub fn age_to_group(age_years: i64) -> Result<AgeGroup> {
    if age_years < MIN_AGE {
        return Err(Error::AgeOutOfRange(age_years));
    }
    GROUP_UPPER
        .iter()
        .position(|&hi| age_years <= hi)
        .map(|i| AgeGroup(i as u8))
        .ok_or(Error::AgeOutOfRange(age_years))
}

/// `N x M` one-hot matrix.
pub fn labels_tensor(groups: &[AgeGroup], dtype: DType) -> Result<Tensor> {
    let data: Vec<f32> = groups.iter().flat_map(|g| g.one_hot()).collect();
    Ok(Tensor::from_vec(data, (groups.len(), NUM_AGE_GROUPS), &Device::Cpu)?.to_dtype(dtype)?)
}

/// Broadcasts each sample's one-hot label as M constant channels appended
/// to an `N x C x H x W` tensor.
pub fn concat_label(t: &Tensor, groups: &[AgeGroup]) -> Result<Tensor> {
    concat_label_channels(t, &labels_tensor(groups, t.dtype())?)
}
