//! Global-plus-local residual generator.
//!
//! The global branch sees the whole labeled face; three local branches see
//! labeled eyes / snout / forehead crops and scatter their features back onto
//! zero canvases. The four feature maps are concatenated and decoded into a
//! bounded residual that is added to the input.

use candle_core::{DType, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datapipe::{concat_label, AgeGroup, FaceImage, PatchSpec, FACE_SIZE, NUM_AGE_GROUPS};
use crate::error::{Error, Result};
use crate::nn::{instance_norm, leaky_relu, Conv2d, ConvSpec, ConvTranspose2d, Init, ParamStore};

const LEAKY_SLOPE: f64 = 0.2;

/// Channel widths, kernel sizes and patch geometry of a generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorArch {
    pub image_size: usize,
    pub num_classes: usize,
    /// Global encoder widths; strides are (1, 2, 2).
    pub global_widths: [usize; 3],
    pub global_res_blocks: usize,
    /// Widths of the two x2 upsamplers; the second is the feature width.
    pub global_up_widths: [usize; 2],
    /// Local encoder widths; strides are (1, 2).
    pub local_widths: [usize; 2],
    pub local_res_blocks: usize,
    /// Channels of every branch output (global and local canvases).
    pub feature_channels: usize,
    /// Widths of the first two stride-1 decoder convolutions; the third emits 3.
    pub decoder_widths: [usize; 2],
    pub first_kernel: usize,
    pub patches: [PatchSpec; 3],
    /// Bias on the residual output layer.
    pub output_bias: bool,
    /// Zero the residual output layer so a fresh generator is the identity.
    pub zero_init_output: bool,
}

impl GeneratorArch {
    /// Full-size 128x128 configuration.
    pub fn standard() -> Self {
        Self {
            image_size: FACE_SIZE,
            num_classes: NUM_AGE_GROUPS,
            global_widths: [64, 128, 256],
            global_res_blocks: 4,
            global_up_widths: [128, 64],
            local_widths: [32, 64],
            local_res_blocks: 2,
            feature_channels: 64,
            decoder_widths: [128, 64],
            first_kernel: 7,
            patches: PatchSpec::defaults(),
            output_bias: true,
            zero_init_output: true,
        }
    }

    /// Same topology with 1/8 of the channel widths, on a `canvas`-sized face.
    pub fn compact(canvas: usize) -> Result<Self> {
        Ok(Self {
            image_size: canvas,
            global_widths: [8, 16, 32],
            global_up_widths: [16, 8],
            local_widths: [8, 8],
            feature_channels: 8,
            decoder_widths: [16, 8],
            patches: PatchSpec::defaults_for_canvas(canvas)?,
            ..Self::standard()
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_size % 4 != 0 || self.image_size == 0 {
            return Err(Error::InvalidValue(format!(
                "image size {} must be a positive multiple of 4",
                self.image_size
            )));
        }
        if self.global_up_widths[1] != self.feature_channels {
            return Err(Error::InvalidValue(format!(
                "last global upsampler width {} must equal feature channels {}",
                self.global_up_widths[1], self.feature_channels
            )));
        }
        if self.first_kernel % 2 == 0 {
            return Err(Error::InvalidValue("first kernel must be odd".into()));
        }
        for p in &self.patches {
            p.validate(self.image_size)?;
        }
        Ok(())
    }

    /// Prefix of the parameter names belonging to local branch `i`.
    pub fn local_prefix(&self, i: usize) -> String {
        format!("local.{}.", self.patches[i].name)
    }
}

/// Pre-activation residual block: `x + conv(relu(IN(conv(relu(IN(x))))))`.
#[derive(Clone, Debug)]
struct ResBlock {
    conv_a: Conv2d,
    conv_b: Conv2d,
}

impl ResBlock {
    fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, ch: usize) -> Result<Self> {
        let spec = || ConvSpec {
            cin: ch,
            cout: ch,
            kernel: 3,
            stride: 1,
            padding: 1,
            bias: false,
            init: Init::Orthogonal { gain: 1.0 },
        };
        Ok(Self {
            conv_a: Conv2d::new(store, rng, &format!("{name}.conv_a"), spec())?,
            conv_b: Conv2d::new(store, rng, &format!("{name}.conv_b"), spec())?,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let h = self.conv_a.forward(&instance_norm(x)?.relu()?)?;
        let h = self.conv_b.forward(&instance_norm(&h)?.relu()?)?;
        Ok((x + h)?)
    }
}

/// Conv without bias, followed by instance norm in the forward pass.
fn norm_conv(
    store: &mut ParamStore,
    rng: &mut ChaCha8Rng,
    name: &str,
    cin: usize,
    cout: usize,
    kernel: usize,
    stride: usize,
) -> Result<Conv2d> {
    Conv2d::new(
        store,
        rng,
        name,
        ConvSpec {
            cin,
            cout,
            kernel,
            stride,
            padding: kernel / 2,
            bias: false,
            init: Init::Orthogonal { gain: 1.0 },
        },
    )
}

#[derive(Clone, Debug)]
struct GlobalNet {
    encoder: Vec<Conv2d>,
    blocks: Vec<ResBlock>,
    up: Vec<ConvTranspose2d>,
}

impl GlobalNet {
    fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, arch: &GeneratorArch) -> Result<Self> {
        let cin = 3 + arch.num_classes;
        let [w0, w1, w2] = arch.global_widths;
        let encoder = vec![
            norm_conv(store, rng, "global.enc0", cin, w0, arch.first_kernel, 1)?,
            norm_conv(store, rng, "global.enc1", w0, w1, 3, 2)?,
            norm_conv(store, rng, "global.enc2", w1, w2, 3, 2)?,
        ];
        let blocks = (0..arch.global_res_blocks)
            .map(|i| ResBlock::new(store, rng, &format!("global.res{i}"), w2))
            .collect::<Result<_>>()?;
        let [u0, u1] = arch.global_up_widths;
        let up = vec![
            ConvTranspose2d::upsample2(store, rng, "global.up0", w2, u0)?,
            ConvTranspose2d::upsample2(store, rng, "global.up1", u0, u1)?,
        ];
        Ok(Self { encoder, blocks, up })
    }

    fn forward(&self, xl: &Tensor) -> Result<Tensor> {
        let mut h = xl.clone();
        for conv in &self.encoder {
            h = leaky_relu(&instance_norm(&conv.forward(&h)?)?, LEAKY_SLOPE)?;
        }
        for block in &self.blocks {
            h = block.forward(&h)?;
        }
        for up in &self.up {
            h = instance_norm(&up.forward(&h)?)?.relu()?;
        }
        Ok(h)
    }
}

#[derive(Clone, Debug)]
struct LocalNet {
    spec: PatchSpec,
    encoder: Vec<Conv2d>,
    blocks: Vec<ResBlock>,
    up: ConvTranspose2d,
}

impl LocalNet {
    fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, arch: &GeneratorArch, i: usize) -> Result<Self> {
        let prefix = format!("local.{}", arch.patches[i].name);
        let cin = 3 + arch.num_classes;
        let [w0, w1] = arch.local_widths;
        let encoder = vec![
            norm_conv(store, rng, &format!("{prefix}.enc0"), cin, w0, arch.first_kernel, 1)?,
            norm_conv(store, rng, &format!("{prefix}.enc1"), w0, w1, 3, 2)?,
        ];
        let blocks = (0..arch.local_res_blocks)
            .map(|b| ResBlock::new(store, rng, &format!("{prefix}.res{b}"), w1))
            .collect::<Result<_>>()?;
        let up = ConvTranspose2d::upsample2(store, rng, &format!("{prefix}.up0"), w1, arch.feature_channels)?;
        Ok(Self {
            spec: arch.patches[i].clone(),
            encoder,
            blocks,
            up,
        })
    }

    /// Patch-resolution features, `N x F x h x w`.
    fn forward_patch(&self, pl: &Tensor) -> Result<Tensor> {
        let mut h = pl.clone();
        for conv in &self.encoder {
            h = leaky_relu(&instance_norm(&conv.forward(&h)?)?, LEAKY_SLOPE)?;
        }
        for block in &self.blocks {
            h = block.forward(&h)?;
        }
        Ok(instance_norm(&self.up.forward(&h)?)?.relu()?)
    }
}

#[derive(Clone, Debug)]
struct FusionDecoder {
    convs: Vec<Conv2d>,
    out: Conv2d,
}

impl FusionDecoder {
    fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, arch: &GeneratorArch) -> Result<Self> {
        let fused = 4 * arch.feature_channels;
        let [d0, d1] = arch.decoder_widths;
        let convs = vec![
            norm_conv(store, rng, "decoder.conv0", fused, d0, 3, 1)?,
            norm_conv(store, rng, "decoder.conv1", d0, d1, 3, 1)?,
        ];
        let out = Conv2d::new(
            store,
            rng,
            "decoder.out",
            ConvSpec {
                cin: d1,
                cout: 3,
                kernel: 3,
                stride: 1,
                padding: 1,
                bias: arch.output_bias,
                init: if arch.zero_init_output {
                    Init::Zeros
                } else {
                    Init::Orthogonal { gain: 1.0 }
                },
            },
        )?;
        Ok(Self { convs, out })
    }

    fn forward(&self, fused: &Tensor) -> Result<Tensor> {
        let mut h = fused.clone();
        for conv in &self.convs {
            h = instance_norm(&conv.forward(&h)?)?.relu()?;
        }
        Ok(self.out.forward(&h)?.tanh()?)
    }
}

/// The generator network together with its parameters.
#[derive(Clone, Debug)]
pub struct Generator {
    arch: GeneratorArch,
    store: ParamStore,
    global: GlobalNet,
    locals: Vec<LocalNet>,
    decoder: FusionDecoder,
}

impl Generator {
    pub fn new(arch: GeneratorArch, dtype: DType, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new(dtype);
        let global = GlobalNet::new(&mut store, &mut rng, &arch)?;
        let locals = (0..3)
            .map(|i| LocalNet::new(&mut store, &mut rng, &arch, i))
            .collect::<Result<_>>()?;
        let decoder = FusionDecoder::new(&mut store, &mut rng, &arch)?;
        Ok(Self {
            arch,
            store,
            global,
            locals,
            decoder,
        })
    }

    pub fn arch(&self) -> &GeneratorArch {
        &self.arch
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype()
    }

    fn check_input(&self, t: &Tensor, channels: usize, h: usize, w: usize) -> Result<()> {
        let dims = t.dims();
        if dims.len() != 4 || dims[1] != channels || dims[2] != h || dims[3] != w {
            return Err(Error::shape(format!("N x {channels} x {h} x {w}"), format!("{dims:?}")));
        }
        Ok(())
    }

    /// `N x (3+M) x S x S` labeled face to `N x F x S x S` features.
    pub fn global_forward(&self, xl: &Tensor) -> Result<Tensor> {
        let s = self.arch.image_size;
        self.check_input(xl, 3 + self.arch.num_classes, s, s)?;
        self.global.forward(&xl.to_dtype(self.dtype())?)
    }

    /// Local branch `i` on its labeled patch, scattered onto a zero
    /// `N x F x S x S` canvas at the patch rectangle.
    pub fn local_forward(&self, i: usize, pl: &Tensor) -> Result<Tensor> {
        let net = self
            .locals
            .get(i)
            .ok_or_else(|| Error::InvalidValue(format!("no local branch {i}")))?;
        let spec = &net.spec;
        self.check_input(pl, 3 + self.arch.num_classes, spec.height, spec.width)?;
        let feat = net.forward_patch(&pl.to_dtype(self.dtype())?)?;
        let s = self.arch.image_size;
        let canvas = feat
            .pad_with_zeros(2, spec.row, s - spec.row - spec.height)?
            .pad_with_zeros(3, spec.col, s - spec.col - spec.width)?;
        Ok(canvas)
    }

    /// Concatenates the four feature maps and decodes the residual in `[-1, 1]`.
    pub fn fuse_and_decode(&self, global: &Tensor, locals: [&Tensor; 3]) -> Result<Tensor> {
        let s = self.arch.image_size;
        let f = self.arch.feature_channels;
        self.check_input(global, f, s, s)?;
        for l in locals {
            self.check_input(l, f, s, s)?;
        }
        let fused = Tensor::cat(&[global, locals[0], locals[1], locals[2]], 1)?;
        self.decoder.forward(&fused)
    }

    fn crop(&self, x: &Tensor, spec: &PatchSpec) -> Result<Tensor> {
        Ok(x.narrow(2, spec.row, spec.height)?.narrow(3, spec.col, spec.width)?)
    }

    /// Residual for a batch of faces `x` (`N x 3 x S x S`) and target groups.
    pub fn residual(&self, x: &Tensor, targets: &[AgeGroup]) -> Result<Tensor> {
        self.residual_inner(x, targets, false)
    }

    fn residual_inner(&self, x: &Tensor, targets: &[AgeGroup], global_only: bool) -> Result<Tensor> {
        let s = self.arch.image_size;
        self.check_input(x, 3, s, s)?;
        if x.dims()[0] != targets.len() {
            return Err(Error::shape(format!("{} labels", x.dims()[0]), targets.len()));
        }
        let x = x.to_dtype(self.dtype())?;
        let g = self.global_forward(&concat_label(&x, targets)?)?;
        let locals = if global_only {
            let zeros = g.zeros_like()?;
            [zeros.clone(), zeros.clone(), zeros]
        } else {
            let mut out = Vec::with_capacity(3);
            for (i, net) in self.locals.iter().enumerate() {
                let pl = concat_label(&self.crop(&x, &net.spec)?, targets)?;
                out.push(self.local_forward(i, &pl)?);
            }
            [out[0].clone(), out[1].clone(), out[2].clone()]
        };
        self.fuse_and_decode(&g, [&locals[0], &locals[1], &locals[2]])
    }

    /// `clamp(x + residual(x, l), -1, 1)` on an `N x 3 x S x S` batch.
    pub fn forward(&self, x: &Tensor, targets: &[AgeGroup]) -> Result<Tensor> {
        let x = x.to_dtype(self.dtype())?;
        let r = self.residual_inner(&x, targets, false)?;
        Ok((x + r)?.clamp(-1.0, 1.0)?)
    }

    /// As [`Generator::forward`] with every local canvas replaced by zeros.
    pub fn forward_ablated(&self, x: &Tensor, targets: &[AgeGroup]) -> Result<Tensor> {
        let x = x.to_dtype(self.dtype())?;
        let r = self.residual_inner(&x, targets, true)?;
        Ok((x + r)?.clamp(-1.0, 1.0)?)
    }

    pub fn generate(&self, x: &FaceImage, target: AgeGroup) -> Result<FaceImage> {
        let out = self.forward(&x.to_tensor(self.dtype())?, &[target])?;
        Ok(FaceImage::from_tensor(&out)?.remove(0))
    }

    pub fn generate_ablated(&self, x: &FaceImage, target: AgeGroup) -> Result<FaceImage> {
        let out = self.forward_ablated(&x.to_tensor(self.dtype())?, &[target])?;
        Ok(FaceImage::from_tensor(&out)?.remove(0))
    }

    /// Batched synthesis of `(face, target)` pairs, `chunk` at a time.
    pub fn generate_many(&self, pairs: &[(FaceImage, AgeGroup)], chunk: usize) -> Result<Vec<FaceImage>> {
        let mut out = Vec::with_capacity(pairs.len());
        for part in pairs.chunks(chunk.max(1)) {
            let faces: Vec<FaceImage> = part.iter().map(|(f, _)| f.clone()).collect();
            let targets: Vec<AgeGroup> = part.iter().map(|(_, g)| *g).collect();
            let x = FaceImage::batch_to_tensor(&faces, self.dtype())?;
            out.extend(FaceImage::from_tensor(&self.forward(&x, &targets)?)?);
        }
        Ok(out)
    }
}
