//! Parameter storage and the handful of layers the networks are built from.

use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, Var, D};
use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Named learnable tensors of one network, in a stable (sorted) order.
#[derive(Clone, Debug)]
pub struct ParamStore {
    dtype: DType,
    vars: BTreeMap<String, Var>,
}

impl ParamStore {
    pub fn new(dtype: DType) -> Self {
        Self {
            dtype,
            vars: BTreeMap::new(),
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    /// Registers a parameter and returns a tensor handle sharing its storage.
    pub fn add(&mut self, name: &str, init: Tensor) -> Result<Tensor> {
        if self.vars.contains_key(name) {
            return Err(Error::InvalidValue(format!("duplicate parameter {name}")));
        }
        let var = Var::from_tensor(&init.to_dtype(self.dtype)?)?;
        let handle = var.as_tensor().clone();
        self.vars.insert(name.to_string(), var);
        Ok(handle)
    }

    pub fn var(&self, name: &str) -> Result<&Var> {
        self.vars
            .get(name)
            .ok_or_else(|| Error::InvalidValue(format!("unknown parameter {name}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.vars.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn num_elements(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }

    /// Overwrites every parameter with the same-named tensor from `source`.
    pub fn load_from(&self, source: &BTreeMap<String, Tensor>) -> Result<()> {
        if source.len() != self.vars.len() {
            return Err(Error::InvalidValue(format!(
                "parameter count mismatch: expected {}, got {}",
                self.vars.len(),
                source.len()
            )));
        }
        for (name, var) in &self.vars {
            let t = source
                .get(name)
                .ok_or_else(|| Error::InvalidValue(format!("missing parameter {name}")))?;
            if t.dims() != var.dims() {
                return Err(Error::shape(
                    format!("{name} {:?}", var.dims()),
                    format!("{:?}", t.dims()),
                ));
            }
            var.set(&t.to_dtype(self.dtype)?)?;
        }
        Ok(())
    }

    /// Deep copy of the current values.
    pub fn snapshot(&self) -> Result<BTreeMap<String, Tensor>> {
        self.vars
            .iter()
            .map(|(k, v)| Ok((k.clone(), v.as_tensor().copy()?)))
            .collect()
    }

    /// SHA-256 over names, shapes and values.
    pub fn digest(&self) -> Result<String> {
        let mut hasher = Sha256::new();
        for (name, var) in &self.vars {
            hasher.update(name.as_bytes());
            for d in var.dims() {
                hasher.update((*d as u64).to_le_bytes());
            }
            for v in var.as_tensor().flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()? {
                hasher.update(v.to_le_bytes());
            }
        }
        Ok(hex(&hasher.finalize()))
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    Orthogonal { gain: f64 },
    Zeros,
}

/// Orthogonal initialization of a tensor viewed as `dims[0] x prod(dims[1..])`.
pub fn orthogonal<R: Rng>(rng: &mut R, dims: &[usize], gain: f64) -> Result<Tensor> {
    let rows = dims[0];
    let cols: usize = dims[1..].iter().product();
    let (n, m) = (rows.max(cols), rows.min(cols));
    let gauss = DMatrix::<f64>::from_fn(n, m, |_, _| rng.sample(StandardNormal));
    let qr = gauss.qr();
    let mut q = qr.q();
    let r = qr.r();
    for j in 0..m {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    // q is n x m with orthonormal columns; orient it as rows x cols.
    let w = if rows >= cols { q } else { q.transpose() };
    let data: Vec<f64> = (0..rows)
        .flat_map(|i| (0..cols).map(move |j| (i, j)))
        .map(|(i, j)| gain * w[(i, j)])
        .collect();
    Ok(Tensor::from_vec(data, dims, &Device::Cpu)?)
}

fn init_tensor<R: Rng>(rng: &mut R, dims: &[usize], init: Init) -> Result<Tensor> {
    match init {
        Init::Orthogonal { gain } => orthogonal(rng, dims, gain),
        Init::Zeros => Ok(Tensor::zeros(dims, DType::F64, &Device::Cpu)?),
    }
}

/// Plain 2-D convolution with optional bias.
#[derive(Clone, Debug)]
pub struct Conv2d {
    weight: Tensor,
    bias: Option<Tensor>,
    stride: usize,
    padding: usize,
}

pub struct ConvSpec {
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub bias: bool,
    pub init: Init,
}

impl Conv2d {
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, name: &str, spec: ConvSpec) -> Result<Self> {
        let dims = [spec.cout, spec.cin, spec.kernel, spec.kernel];
        let weight = store.add(&format!("{name}.weight"), init_tensor(rng, &dims, spec.init)?)?;
        let bias = if spec.bias {
            Some(store.add(
                &format!("{name}.bias"),
                Tensor::zeros(spec.cout, DType::F64, &Device::Cpu)?,
            )?)
        } else {
            None
        };
        Ok(Self {
            weight,
            bias,
            stride: spec.stride,
            padding: spec.padding,
        })
    }

    /// Wraps existing tensors, e.g. frozen copies.
    pub fn from_parts(weight: Tensor, bias: Option<Tensor>, stride: usize, padding: usize) -> Self {
        Self {
            weight,
            bias,
            stride,
            padding,
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.conv2d(&self.weight, self.padding, self.stride, 1, 1)?;
        add_channel_bias(y, self.bias.as_ref())
    }

    pub fn out_channels(&self) -> usize {
        self.weight.dims()[0]
    }
}

/// Fractionally-strided convolution. Weight layout is `(cin, cout, k, k)`.
#[derive(Clone, Debug)]
pub struct ConvTranspose2d {
    weight: Tensor,
    stride: usize,
    padding: usize,
}

impl ConvTranspose2d {
    /// Kernel 4, stride 2, padding 1: doubles the spatial size exactly.
    pub fn upsample2<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        cin: usize,
        cout: usize,
    ) -> Result<Self> {
        let weight = store.add(
            &format!("{name}.weight"),
            orthogonal(rng, &[cin, cout, 4, 4], 1.0)?,
        )?;
        Ok(Self {
            weight,
            stride: 2,
            padding: 1,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(x.conv_transpose2d(&self.weight, self.padding, 0, self.stride, 1)?)
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    weight: Tensor,
    bias: Tensor,
}

impl Linear {
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, name: &str, din: usize, dout: usize) -> Result<Self> {
        let weight = store.add(&format!("{name}.weight"), orthogonal(rng, &[dout, din], 1.0)?)?;
        let bias = store.add(&format!("{name}.bias"), Tensor::zeros(dout, DType::F64, &Device::Cpu)?)?;
        Ok(Self { weight, bias })
    }

    pub fn from_parts(weight: Tensor, bias: Tensor) -> Self {
        Self { weight, bias }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(x.matmul(&self.weight.t()?)?.broadcast_add(&self.bias)?)
    }
}

fn add_channel_bias(y: Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
    match bias {
        Some(b) => Ok(y.broadcast_add(&b.reshape((1, b.dims()[0], 1, 1))?)?),
        None => Ok(y),
    }
}

/// Per-sample, per-channel normalization over the spatial dimensions.
pub fn instance_norm(x: &Tensor) -> Result<Tensor> {
    const EPS: f64 = 1e-5;
    let (n, c, h, w) = x.dims4()?;
    let flat = x.reshape((n, c, h * w))?;
    let mean = flat.mean_keepdim(D::Minus1)?;
    let centered = flat.broadcast_sub(&mean)?;
    let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
    let out = centered.broadcast_div(&(var + EPS)?.sqrt()?)?;
    Ok(out.reshape((n, c, h, w))?)
}

pub fn leaky_relu(x: &Tensor, slope: f64) -> Result<Tensor> {
    Ok(x.maximum(&(x * slope)?)?)
}

/// Appends `labels` (N x M one-hot rows) as M spatially constant channels.
pub fn concat_label_channels(x: &Tensor, labels: &Tensor) -> Result<Tensor> {
    let (n, _, h, w) = x.dims4()?;
    let (ln, m) = labels.dims2()?;
    if ln != n {
        return Err(Error::shape(format!("{n} labels"), ln));
    }
    let planes = labels
        .to_dtype(x.dtype())?
        .reshape((n, m, 1, 1))?
        .broadcast_as((n, m, h, w))?
        .contiguous()?;
    Ok(Tensor::cat(&[x, &planes], 1)?)
}
