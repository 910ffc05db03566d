//! The decomposition network: a skip-connected convolutional autoencoder
//! that regresses shading, with albedo obtained by division and clipping.
//!
//! Every encoder and decoder level is a block of two
//! convolution → batchnorm → ReLU layers: a 1×1 projection to
//! `proj_channels`, then a `kernel_size`² convolution to `conv_channels`.
//! Levels are separated by 2×2 max pooling (down) and 2× bilinear
//! upsampling (up); each decoder level concatenates the matching encoder
//! output to its input.

mod io;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::tensor::conv::{conv1x1, conv2d};
use crate::tensor::layers::{batchnorm, maxpool2, upsample_bilinear2};
use crate::tensor::ops::{add_scalar, clip01, concat_channels, div, relu, softplus};
use crate::tensor::{BatchNormMode, BatchNormState, Real, Tensor, TensorError, Var, DIV_FLOOR};

pub use io::{decode_weights, encode_weights, load_weights, save_weights, WeightsError, FORMAT_VERSION, MAGIC};

/// Head bias giving an initial shading of `softplus(b) = 1`.
const HEAD_BIAS_INIT: f64 = 0.541_324_854_612_918_1;

#[derive(Debug, thiserror::Error)]
pub enum NetError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("input of {height}x{width} is not divisible by {multiple} (2^levels)")]
    Indivisible {
        height: usize,
        width: usize,
        multiple: usize,
    },
    #[error("invalid network configuration: {0}")]
    Config(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetConfig {
    pub levels: usize,
    pub proj_channels: usize,
    pub conv_channels: usize,
    pub kernel_size: usize,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            levels: 4,
            proj_channels: 32,
            conv_channels: 64,
            kernel_size: 5,
        }
    }
}

impl NetConfig {
    pub fn validate(&self) -> Result<(), NetError> {
        if self.levels == 0 || self.levels > 12 {
            return Err(NetError::Config(format!(
                "levels must be in 1..=12, got {}",
                self.levels
            )));
        }
        if self.proj_channels == 0 || self.conv_channels == 0 {
            return Err(NetError::Config("channel counts must be positive".into()));
        }
        if self.kernel_size % 2 == 0 || self.kernel_size > 31 {
            return Err(NetError::Config(format!(
                "kernel size must be odd and at most 31, got {}",
                self.kernel_size
            )));
        }
        Ok(())
    }

    /// Required divisor of input height and width.
    pub fn size_multiple(&self) -> usize {
        1 << self.levels
    }

    /// Learnable scalars of one block taking `input` channels.
    pub fn block_param_count(&self, input: usize) -> usize {
        let (p, c, k) = (self.proj_channels, self.conv_channels, self.kernel_size);
        input * p + p + 2 * p + p * c * k * k + c + 2 * c
    }

    pub fn param_count(&self) -> usize {
        let c = self.conv_channels;
        let encoder = self.block_param_count(3) + (self.levels - 1) * self.block_param_count(c);
        let bottleneck = self.block_param_count(c);
        let decoder = self.levels * self.block_param_count(2 * c);
        encoder + bottleneck + decoder + 3 * c + 3
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvParams<T: Real = f32> {
    /// `[O, C, K, K]`
    pub kernel: Tensor<T>,
    /// `[O]`
    pub bias: Tensor<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NormParams<T: Real = f32> {
    pub scale: Tensor<T>,
    pub shift: Tensor<T>,
    pub state: BatchNormState<T>,
}

/// conv1x1 → BN → ReLU → convKxK → BN → ReLU
#[derive(Debug, Clone, PartialEq)]
pub struct Block<T: Real = f32> {
    pub proj: ConvParams<T>,
    pub proj_norm: NormParams<T>,
    pub conv: ConvParams<T>,
    pub conv_norm: NormParams<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkWeights<T: Real = f32> {
    pub config: NetConfig,
    pub format_version: u32,
    /// One block per level, finest first.
    pub encoder: Vec<Block<T>>,
    pub bottleneck: Block<T>,
    /// One block per level, finest first; block `l` consumes the upsampled
    /// coarser output concatenated with encoder output `l`.
    pub decoder: Vec<Block<T>>,
    /// 1×1 projection to the three shading channels.
    pub head: ConvParams<T>,
}

fn uniform_tensor<T: Real>(shape: &[usize], bound: f64, rng: &mut ChaCha8Rng) -> Tensor<T> {
    Tensor::from_fn(shape, |_| T::from_f64(rng.random_range(-bound..=bound)))
}

fn init_conv<T: Real>(out: usize, input: usize, k: usize, rng: &mut ChaCha8Rng) -> ConvParams<T> {
    let fan_in = (input * k * k) as f64;
    ConvParams {
        kernel: uniform_tensor(&[out, input, k, k], (6.0 / fan_in).sqrt(), rng),
        bias: uniform_tensor(&[out], 1.0 / fan_in.sqrt(), rng),
    }
}

fn init_norm<T: Real>(channels: usize) -> NormParams<T> {
    NormParams {
        scale: Tensor::ones(&[channels]),
        shift: Tensor::zeros(&[channels]),
        state: BatchNormState::new(channels),
    }
}

fn init_block<T: Real>(cfg: &NetConfig, input: usize, rng: &mut ChaCha8Rng) -> Block<T> {
    Block {
        proj: init_conv(cfg.proj_channels, input, 1, rng),
        proj_norm: init_norm(cfg.proj_channels),
        conv: init_conv(cfg.conv_channels, cfg.proj_channels, cfg.kernel_size, rng),
        conv_norm: init_norm(cfg.conv_channels),
    }
}

/// Deterministic initialization: fan-in scaled uniform kernels, unit BN
/// scale and zero shift. The head starts out predicting unit shading.
pub fn build<T: Real>(config: NetConfig, seed: u64) -> Result<NetworkWeights<T>, NetError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let c = config.conv_channels;
    let encoder = (0..config.levels)
        .map(|l| init_block(&config, if l == 0 { 3 } else { c }, &mut rng))
        .collect();
    let bottleneck = init_block(&config, c, &mut rng);
    let decoder = (0..config.levels)
        .map(|_| init_block(&config, 2 * c, &mut rng))
        .collect();
    let head = ConvParams {
        kernel: uniform_tensor(&[3, c, 1, 1], 0.1 / (c as f64).sqrt(), &mut rng),
        bias: Tensor::full(&[3], T::from_f64(HEAD_BIAS_INIT)),
    };
    Ok(NetworkWeights {
        config,
        format_version: FORMAT_VERSION,
        encoder,
        bottleneck,
        decoder,
        head,
    })
}

impl<T: Real> Block<T> {
    fn tensors(&self) -> [&Tensor<T>; 8] {
        [
            &self.proj.kernel,
            &self.proj.bias,
            &self.proj_norm.scale,
            &self.proj_norm.shift,
            &self.conv.kernel,
            &self.conv.bias,
            &self.conv_norm.scale,
            &self.conv_norm.shift,
        ]
    }

    fn tensors_mut(&mut self) -> [&mut Tensor<T>; 8] {
        [
            &mut self.proj.kernel,
            &mut self.proj.bias,
            &mut self.proj_norm.scale,
            &mut self.proj_norm.shift,
            &mut self.conv.kernel,
            &mut self.conv.bias,
            &mut self.conv_norm.scale,
            &mut self.conv_norm.shift,
        ]
    }

    fn cast<U: Real>(&self) -> Block<U> {
        let conv = |c: &ConvParams<T>| ConvParams {
            kernel: c.kernel.cast(),
            bias: c.bias.cast(),
        };
        let norm = |n: &NormParams<T>| NormParams {
            scale: n.scale.cast(),
            shift: n.shift.cast(),
            state: n.state.cast(),
        };
        Block {
            proj: conv(&self.proj),
            proj_norm: norm(&self.proj_norm),
            conv: conv(&self.conv),
            conv_norm: norm(&self.conv_norm),
        }
    }
}

impl<T: Real> NetworkWeights<T> {
    fn blocks(&self) -> impl Iterator<Item = &Block<T>> {
        self.encoder
            .iter()
            .chain(std::iter::once(&self.bottleneck))
            .chain(self.decoder.iter())
    }

    fn blocks_mut(&mut self) -> impl Iterator<Item = &mut Block<T>> {
        self.encoder
            .iter_mut()
            .chain(std::iter::once(&mut self.bottleneck))
            .chain(self.decoder.iter_mut())
    }

    /// Learnable tensors in canonical order: encoder blocks, bottleneck,
    /// decoder blocks (each: projection kernel, bias, BN scale, shift, then
    /// the same for the wide convolution), head kernel, head bias.
    pub fn params(&self) -> Vec<&Tensor<T>> {
        let mut out: Vec<&Tensor<T>> = self.blocks().flat_map(|b| b.tensors()).collect();
        out.push(&self.head.kernel);
        out.push(&self.head.bias);
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let Self {
            encoder,
            bottleneck,
            decoder,
            head,
            ..
        } = self;
        let mut out: Vec<&mut Tensor<T>> = Vec::new();
        for b in encoder
            .iter_mut()
            .chain(std::iter::once(bottleneck))
            .chain(decoder.iter_mut())
        {
            out.extend(b.tensors_mut());
        }
        out.push(&mut head.kernel);
        out.push(&mut head.bias);
        out
    }

    /// Batchnorm states in canonical block order (projection, then wide conv).
    pub fn norm_states(&self) -> Vec<&BatchNormState<T>> {
        self.blocks()
            .flat_map(|b| [&b.proj_norm.state, &b.conv_norm.state])
            .collect()
    }

    pub fn norm_states_mut(&mut self) -> Vec<&mut BatchNormState<T>> {
        let mut out = Vec::new();
        for b in self.blocks_mut() {
            out.push(&mut b.proj_norm.state);
            out.push(&mut b.conv_norm.state);
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|t| t.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.params().iter().all(|t| t.all_finite())
            && self
                .norm_states()
                .iter()
                .all(|s| s.running_mean.iter().chain(&s.running_var).all(|v| v.is_finite()))
    }

    pub fn cast<U: Real>(&self) -> NetworkWeights<U> {
        NetworkWeights {
            config: self.config,
            format_version: self.format_version,
            encoder: self.encoder.iter().map(Block::cast).collect(),
            bottleneck: self.bottleneck.cast(),
            decoder: self.decoder.iter().map(Block::cast).collect(),
            head: ConvParams {
                kernel: self.head.kernel.cast(),
                bias: self.head.bias.cast(),
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics, running-stat updates, parameter gradients tracked.
    Train,
    /// Running statistics, no parameter gradients.
    Infer,
}

/// Output of one forward pass.
pub struct Forward<T: Real> {
    pub albedo: Var<T>,
    pub shading: Var<T>,
    /// Parameter leaves in [`NetworkWeights::params`] order; they carry
    /// gradients after `backward` in [`Mode::Train`].
    pub params: Vec<Var<T>>,
}

struct Cursor<'a, T: Real> {
    params: &'a [Var<T>],
    states: Vec<&'a mut BatchNormState<T>>,
    next_param: usize,
    next_state: usize,
}

impl<T: Real> Cursor<'_, T> {
    fn take(&mut self) -> &Var<T> {
        let p = &self.params[self.next_param];
        self.next_param += 1;
        p
    }

    fn layer(&mut self, x: &Var<T>) -> Result<Var<T>, TensorError> {
        let k = self.take().clone();
        let b = self.take().clone();
        let scale = self.take().clone();
        let shift = self.take().clone();
        let y = conv2d(x, &k, &b)?;
        let state = &mut *self.states[self.next_state];
        self.next_state += 1;
        Ok(relu(&batchnorm(&y, &scale, &shift, state)?))
    }

    fn block(&mut self, x: &Var<T>) -> Result<Var<T>, TensorError> {
        let y = self.layer(x)?;
        self.layer(&y)
    }
}

/// Runs the network on an NCHW batch of images in `[0, 1]`.
///
/// Shading is `softplus(head) + DIV_FLOOR`, strictly positive and unbounded
/// above; albedo is `clip01(I / S)`.
pub fn forward<T: Real>(weights: &mut NetworkWeights<T>, input: &Var<T>, mode: Mode) -> Result<Forward<T>, NetError> {
    let (_, c, h, w) = input.value().dims4("forward")?;
    if c != 3 {
        return Err(TensorError::Invalid {
            op: "forward",
            msg: format!("expected 3 input channels, got {c}"),
        }
        .into());
    }
    let multiple = weights.config.size_multiple();
    if h % multiple != 0 || w % multiple != 0 || h == 0 || w == 0 {
        return Err(NetError::Indivisible {
            height: h,
            width: w,
            multiple,
        });
    }
    let bn_mode = match mode {
        Mode::Train => BatchNormMode::Training,
        Mode::Infer => BatchNormMode::Inference,
    };
    let params: Vec<Var<T>> = weights
        .params()
        .into_iter()
        .map(|t| match mode {
            Mode::Train => Var::leaf(t.clone()),
            Mode::Infer => Var::constant(t.clone()),
        })
        .collect();
    let levels = weights.config.levels;
    let mut states = weights.norm_states_mut();
    for s in states.iter_mut() {
        s.mode = bn_mode;
    }
    let mut cur = Cursor {
        params: &params,
        states,
        next_param: 0,
        next_state: 0,
    };

    let mut x = input.clone();
    let mut skips = Vec::with_capacity(levels);
    for _ in 0..levels {
        let e = cur.block(&x)?;
        x = maxpool2(&e)?;
        skips.push(e);
    }
    x = cur.block(&x)?;
    // decoder blocks are stored finest first but consumed coarsest first
    let dec_start = cur.next_param;
    let dec_state_start = cur.next_state;
    for level in (0..levels).rev() {
        cur.next_param = dec_start + level * 8;
        cur.next_state = dec_state_start + level * 2;
        let up = upsample_bilinear2(&x)?;
        x = cur.block(&concat_channels(&up, &skips[level])?)?;
    }
    cur.next_param = dec_start + levels * 8;
    let hk = cur.take().clone();
    let hb = cur.take().clone();
    let raw = conv1x1(&x, &hk, &hb)?;
    let shading = add_scalar(&softplus(&raw), DIV_FLOOR);
    let albedo = clip01(&div(input, &shading)?);
    Ok(Forward {
        albedo,
        shading,
        params,
    })
}

/// Single-image (or batch) inference without touching the weights.
pub fn infer<T: Real>(weights: &NetworkWeights<T>, images: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>), NetError> {
    let mut scratch = weights.clone();
    let out = forward(&mut scratch, &Var::constant(images.clone()), Mode::Infer)?;
    Ok((out.albedo.value().clone(), out.shading.value().clone()))
}

fn reflect(i: usize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let j = i % period;
    if j < n {
        j
    } else {
        period - j
    }
}

/// Inference on one `[3, H, W]` image of any size: reflection-pads up to the
/// next multiple of `2^levels`, then crops the outputs back to `H x W`.
pub fn infer_image(weights: &NetworkWeights<f32>, image: &Tensor<f32>) -> Result<(Tensor<f32>, Tensor<f32>), NetError> {
    let (c, h, w) = match *image.shape() {
        [3, h, w] if h > 0 && w > 0 => (3, h, w),
        _ => {
            return Err(NetError::Tensor(TensorError::ShapeMismatch {
                op: "infer_image",
                expected: vec![3, 0, 0],
                got: image.shape().to_vec(),
            }))
        }
    };
    let m = weights.config.size_multiple();
    let (ph, pw) = (h.div_ceil(m) * m, w.div_ceil(m) * m);
    let d = image.data();
    let padded = Tensor::from_fn(&[1, c, ph, pw], |i| {
        let (k, y, x) = (i / (ph * pw), i / pw % ph, i % pw);
        d[(k * h + reflect(y, h)) * w + reflect(x, w)]
    });
    let (a, s) = infer(weights, &padded)?;
    let crop = |t: &Tensor<f32>| {
        let td = t.data();
        Tensor::from_fn(&[c, h, w], |i| {
            let (k, y, x) = (i / (h * w), i / w % h, i % w);
            td[(k * ph + y) * pw + x]
        })
    };
    Ok((crop(&a), crop(&s)))
}
