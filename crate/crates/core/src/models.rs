//! Encoder, classifier head and decoder networks.
//!
//! All three are built from an [`ArchProfile`]. The full-scale profile is
//! three stride-2 conv stages of widths 64/256/1024 on 128×128 inputs, a
//! 256-wide code and a 16×16×1024 decoder seed. The desk profile keeps the
//! same topology at 32×32.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{BatchNormState, Graph, Mode, Var};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Width of the two hidden dense layers in the classifier head.
pub const HEAD_WIDTH: usize = 256;
/// Dropout rate after the decoder's reshape.
pub const DECODER_DROPOUT: f64 = 0.5;
const KERNEL: usize = 3;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchProfile {
    pub image_size: usize,
    pub channels: Vec<usize>,
    pub code_dim: usize,
    pub decoder_seed_hw: usize,
    pub class_count: usize,
}

impl ArchProfile {
    pub fn full_scale() -> Self {
        ArchProfile {
            image_size: 128,
            channels: vec![64, 256, 1024],
            code_dim: 256,
            decoder_seed_hw: 16,
            class_count: 4,
        }
    }

    pub fn desk() -> Self {
        ArchProfile {
            image_size: 32,
            channels: vec![16, 32, 64],
            code_dim: 32,
            decoder_seed_hw: 4,
            class_count: 4,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(format!("invalid profile: {msg}")));
        if self.image_size < 32 || !self.image_size.is_power_of_two() {
            return fail(format!(
                "image_size {} must be a power of two >= 32",
                self.image_size
            ));
        }
        if self.decoder_seed_hw == 0
            || self.decoder_seed_hw >= self.image_size
            || self.image_size % self.decoder_seed_hw != 0
            || !(self.image_size / self.decoder_seed_hw).is_power_of_two()
        {
            return fail(format!(
                "decoder_seed_hw {} must divide image_size {} by a power of two",
                self.decoder_seed_hw, self.image_size
            ));
        }
        let stages = (self.image_size / self.decoder_seed_hw).trailing_zeros() as usize;
        if self.channels.len() != stages {
            return fail(format!(
                "{} encoder channels given but log2({}/{}) = {} stages required",
                self.channels.len(),
                self.image_size,
                self.decoder_seed_hw,
                stages
            ));
        }
        if self.channels.contains(&0) {
            return fail("channel widths must be positive".into());
        }
        if self.code_dim == 0 {
            return fail("code_dim must be positive".into());
        }
        if self.class_count < 2 {
            return fail(format!("class_count {} must be >= 2", self.class_count));
        }
        Ok(())
    }

    pub fn stages(&self) -> usize {
        self.channels.len()
    }

    pub fn image_shape(&self) -> [usize; 3] {
        [1, self.image_size, self.image_size]
    }

    /// Output widths of the decoder convolutions: the encoder widths in
    /// reverse, then the first width again, then the single output channel.
    pub fn decoder_channels(&self) -> Vec<usize> {
        let mut out: Vec<usize> = self.channels.iter().rev().copied().collect();
        out.push(self.channels[0]);
        out.push(1);
        out
    }

    pub fn decoder_seed_len(&self) -> usize {
        self.decoder_seed_hw * self.decoder_seed_hw * self.channels[self.channels.len() - 1]
    }

    /// Human-readable list of differing fields.
    pub fn diff(&self, other: &ArchProfile) -> String {
        let mut parts = Vec::new();
        if self.image_size != other.image_size {
            parts.push(format!("image_size {} != {}", self.image_size, other.image_size));
        }
        if self.channels != other.channels {
            parts.push(format!("channels {:?} != {:?}", self.channels, other.channels));
        }
        if self.code_dim != other.code_dim {
            parts.push(format!("code_dim {} != {}", self.code_dim, other.code_dim));
        }
        if self.decoder_seed_hw != other.decoder_seed_hw {
            parts.push(format!(
                "decoder_seed_hw {} != {}",
                self.decoder_seed_hw, other.decoder_seed_hw
            ));
        }
        if self.class_count != other.class_count {
            parts.push(format!("class_count {} != {}", self.class_count, other.class_count));
        }
        parts.join("; ")
    }
}

/// Parameter ownership shared by all networks.
pub trait Module<T: Real> {
    /// Trainable tensors in a fixed order.
    fn params(&self) -> Vec<&Tensor<T>>;
    fn params_mut(&mut self) -> Vec<&mut Tensor<T>>;
    /// Every persistent tensor (parameters plus running statistics) by name.
    fn state_dict(&self) -> Vec<(String, Tensor<T>)>;
    fn load_state_dict(&mut self, entries: &BTreeMap<String, Tensor<T>>) -> Result<()>;

    /// Places the parameters into `g`, trainable or constant.
    fn bind(&self, g: &mut Graph<T>, trainable: bool) -> Vec<Var> {
        self.params()
            .into_iter()
            .map(|p| g.leaf(p.clone(), trainable))
            .collect()
    }

    fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }
}

fn uniform<T: Real, R: Rng + ?Sized>(rng: &mut R, shape: Vec<usize>, limit: f64) -> Tensor<T> {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| T::lit(rng.random_range(-limit..limit)))
        .collect();
    Tensor::new(shape, data).expect("shape from product")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Init {
    /// He-uniform, for layers feeding a ReLU.
    He,
    /// Xavier-uniform, for layers feeding softmax or sigmoid.
    Xavier,
}

impl Init {
    fn limit(self, fan_in: usize, fan_out: usize) -> f64 {
        match self {
            Init::He => (6.0 / fan_in as f64).sqrt(),
            Init::Xavier => (6.0 / (fan_in + fan_out) as f64).sqrt(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Linear<T: Real = f32> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Real> Linear<T> {
    fn new<R: Rng + ?Sized>(rng: &mut R, inputs: usize, outputs: usize, init: Init) -> Self {
        Linear {
            weight: uniform(rng, vec![outputs, inputs], init.limit(inputs, outputs)),
            bias: Tensor::zeros([outputs]),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Conv<T: Real = f32> {
    pub kernel: Tensor<T>,
    pub bias: Tensor<T>,
    pub stride: usize,
}

impl<T: Real> Conv<T> {
    fn new<R: Rng + ?Sized>(rng: &mut R, c_in: usize, c_out: usize, stride: usize, init: Init) -> Self {
        let area = KERNEL * KERNEL;
        Conv {
            kernel: uniform(
                rng,
                vec![c_out, c_in, KERNEL, KERNEL],
                init.limit(c_in * area, c_out * area),
            ),
            bias: Tensor::zeros([c_out]),
            stride,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BatchNorm<T: Real = f32> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    pub state: BatchNormState<T>,
}

impl<T: Real> BatchNorm<T> {
    fn new(features: usize) -> Self {
        BatchNorm {
            gamma: Tensor::full([features], T::one()),
            beta: Tensor::zeros([features]),
            state: BatchNormState::new(features),
        }
    }
}

fn put<T: Real>(out: &mut Vec<(String, Tensor<T>)>, name: String, t: &Tensor<T>) {
    out.push((name, t.clone()));
}

fn take<T: Real>(
    entries: &BTreeMap<String, Tensor<T>>,
    name: &str,
    dst: &mut Tensor<T>,
) -> Result<()> {
    let src = entries
        .get(name)
        .ok_or_else(|| Error::Data(format!("missing tensor '{name}'")))?;
    if src.shape() != dst.shape() {
        return Err(Error::ProfileMismatch(format!(
            "tensor '{name}' has shape {:?}, expected {:?}",
            src.shape(),
            dst.shape()
        )));
    }
    *dst = src.clone();
    Ok(())
}

fn take_vec<T: Real>(
    entries: &BTreeMap<String, Tensor<T>>,
    name: &str,
    dst: &mut Vec<T>,
) -> Result<()> {
    let mut t = Tensor::vector(dst.clone());
    take(entries, name, &mut t)?;
    *dst = t.into_data();
    Ok(())
}

fn check_image<T: Real>(g: &Graph<T>, x: Var, size: usize) -> Result<()> {
    let s = g.value(x).shape();
    let ok = match s {
        [1, h, w] => *h == size && *w == size,
        [_, 1, h, w] => *h == size && *w == size,
        _ => false,
    };
    if ok {
        Ok(())
    } else {
        Err(Error::shape("image", s, &[1, size, size]))
    }
}

/// Stride-2 conv stack followed by a dense projection to the code.
#[derive(Clone, Debug, PartialEq)]
pub struct Encoder<T: Real = f32> {
    pub convs: Vec<Conv<T>>,
    pub fc: Linear<T>,
    image_size: usize,
}

impl<T: Real> Encoder<T> {
    pub fn new<R: Rng + ?Sized>(profile: &ArchProfile, rng: &mut R) -> Self {
        let mut convs = Vec::new();
        let mut c_in = 1;
        for &c in &profile.channels {
            convs.push(Conv::new(rng, c_in, c, 2, Init::He));
            c_in = c;
        }
        let flat = profile.decoder_seed_len();
        Encoder {
            convs,
            fc: Linear::new(rng, flat, profile.code_dim, Init::He),
            image_size: profile.image_size,
        }
    }

    pub fn code_dim(&self) -> usize {
        self.fc.bias.len()
    }

    /// Image `[1,H,W]` or batch `[N,1,H,W]` to code `[D]` or `[N,D]`.
    pub fn forward(&self, g: &mut Graph<T>, pv: &[Var], x: Var) -> Result<Var> {
        check_image(g, x, self.image_size)?;
        let batched = g.value(x).rank() == 4;
        let mut h = x;
        for (i, conv) in self.convs.iter().enumerate() {
            h = g.conv2d(h, pv[2 * i], pv[2 * i + 1], conv.stride)?;
            h = g.relu(h);
        }
        let shape = g.value(h).shape().to_vec();
        h = if batched {
            g.reshape(h, &[shape[0], shape[1..].iter().product()])?
        } else {
            g.reshape(h, &[shape.iter().product()])?
        };
        let n = self.convs.len();
        h = g.dense(h, pv[2 * n], pv[2 * n + 1])?;
        Ok(g.relu(h))
    }
}

impl<T: Real> Module<T> for Encoder<T> {
    fn params(&self) -> Vec<&Tensor<T>> {
        let mut out = Vec::new();
        for c in &self.convs {
            out.push(&c.kernel);
            out.push(&c.bias);
        }
        out.push(&self.fc.weight);
        out.push(&self.fc.bias);
        out
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = Vec::new();
        for c in &mut self.convs {
            out.push(&mut c.kernel);
            out.push(&mut c.bias);
        }
        out.push(&mut self.fc.weight);
        out.push(&mut self.fc.bias);
        out
    }

    fn state_dict(&self) -> Vec<(String, Tensor<T>)> {
        let mut out = Vec::new();
        for (i, c) in self.convs.iter().enumerate() {
            put(&mut out, format!("conv{i}.kernel"), &c.kernel);
            put(&mut out, format!("conv{i}.bias"), &c.bias);
        }
        put(&mut out, "fc.weight".into(), &self.fc.weight);
        put(&mut out, "fc.bias".into(), &self.fc.bias);
        out
    }

    fn load_state_dict(&mut self, entries: &BTreeMap<String, Tensor<T>>) -> Result<()> {
        for (i, c) in self.convs.iter_mut().enumerate() {
            take(entries, &format!("conv{i}.kernel"), &mut c.kernel)?;
            take(entries, &format!("conv{i}.bias"), &mut c.bias)?;
        }
        take(entries, "fc.weight", &mut self.fc.weight)?;
        take(entries, "fc.bias", &mut self.fc.bias)
    }
}

/// Dense–BatchNorm–Dense–BatchNorm–Dense–Softmax.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierHead<T: Real = f32> {
    pub fc1: Linear<T>,
    pub bn1: BatchNorm<T>,
    pub fc2: Linear<T>,
    pub bn2: BatchNorm<T>,
    pub out: Linear<T>,
}

impl<T: Real> ClassifierHead<T> {
    pub fn new<R: Rng + ?Sized>(code_dim: usize, class_count: usize, rng: &mut R) -> Self {
        ClassifierHead {
            fc1: Linear::new(rng, code_dim, HEAD_WIDTH, Init::He),
            bn1: BatchNorm::new(HEAD_WIDTH),
            fc2: Linear::new(rng, HEAD_WIDTH, HEAD_WIDTH, Init::He),
            bn2: BatchNorm::new(HEAD_WIDTH),
            out: Linear::new(rng, HEAD_WIDTH, class_count, Init::Xavier),
        }
    }

    pub fn class_count(&self) -> usize {
        self.out.bias.len()
    }

    pub fn code_dim(&self) -> usize {
        self.fc1.weight.shape()[1]
    }

    /// Code `[D]` or `[N,D]` to class probabilities. Train mode updates the
    /// batch-norm running statistics.
    pub fn forward(&mut self, g: &mut Graph<T>, pv: &[Var], code: Var, mode: Mode) -> Result<Var> {
        let mut h = g.dense(code, pv[0], pv[1])?;
        h = g.batchnorm(h, pv[2], pv[3], &mut self.bn1.state, mode)?;
        h = g.relu(h);
        h = g.dense(h, pv[4], pv[5])?;
        h = g.batchnorm(h, pv[6], pv[7], &mut self.bn2.state, mode)?;
        h = g.relu(h);
        h = g.dense(h, pv[8], pv[9])?;
        g.softmax(h)
    }

    /// Replaces the batch-norm running statistics with the full-batch
    /// statistics of `codes` `[N,D]`.
    pub fn recalibrate(&mut self, codes: &Tensor<T>) -> Result<()> {
        let saved = (self.bn1.state.momentum, self.bn2.state.momentum);
        self.bn1.state.momentum = T::one();
        self.bn2.state.momentum = T::one();
        let mut g = Graph::new();
        let pv = self.bind(&mut g, false);
        let cv = g.input(codes.clone());
        let out = self.forward(&mut g, &pv, cv, Mode::Train);
        self.bn1.state.momentum = saved.0;
        self.bn2.state.momentum = saved.1;
        out.map(|_| ())
    }
}

impl<T: Real> Module<T> for ClassifierHead<T> {
    fn params(&self) -> Vec<&Tensor<T>> {
        vec![
            &self.fc1.weight,
            &self.fc1.bias,
            &self.bn1.gamma,
            &self.bn1.beta,
            &self.fc2.weight,
            &self.fc2.bias,
            &self.bn2.gamma,
            &self.bn2.beta,
            &self.out.weight,
            &self.out.bias,
        ]
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        vec![
            &mut self.fc1.weight,
            &mut self.fc1.bias,
            &mut self.bn1.gamma,
            &mut self.bn1.beta,
            &mut self.fc2.weight,
            &mut self.fc2.bias,
            &mut self.bn2.gamma,
            &mut self.bn2.beta,
            &mut self.out.weight,
            &mut self.out.bias,
        ]
    }

    fn state_dict(&self) -> Vec<(String, Tensor<T>)> {
        let mut out = Vec::new();
        put(&mut out, "fc1.weight".into(), &self.fc1.weight);
        put(&mut out, "fc1.bias".into(), &self.fc1.bias);
        for (name, bn) in [("bn1", &self.bn1), ("bn2", &self.bn2)] {
            put(&mut out, format!("{name}.gamma"), &bn.gamma);
            put(&mut out, format!("{name}.beta"), &bn.beta);
            out.push((
                format!("{name}.running_mean"),
                Tensor::vector(bn.state.running_mean.clone()),
            ));
            out.push((
                format!("{name}.running_var"),
                Tensor::vector(bn.state.running_var.clone()),
            ));
        }
        put(&mut out, "fc2.weight".into(), &self.fc2.weight);
        put(&mut out, "fc2.bias".into(), &self.fc2.bias);
        put(&mut out, "out.weight".into(), &self.out.weight);
        put(&mut out, "out.bias".into(), &self.out.bias);
        out
    }

    fn load_state_dict(&mut self, entries: &BTreeMap<String, Tensor<T>>) -> Result<()> {
        take(entries, "fc1.weight", &mut self.fc1.weight)?;
        take(entries, "fc1.bias", &mut self.fc1.bias)?;
        for (name, bn) in [("bn1", &mut self.bn1), ("bn2", &mut self.bn2)] {
            take(entries, &format!("{name}.gamma"), &mut bn.gamma)?;
            take(entries, &format!("{name}.beta"), &mut bn.beta)?;
            take_vec(entries, &format!("{name}.running_mean"), &mut bn.state.running_mean)?;
            take_vec(entries, &format!("{name}.running_var"), &mut bn.state.running_var)?;
        }
        take(entries, "fc2.weight", &mut self.fc2.weight)?;
        take(entries, "fc2.bias", &mut self.fc2.bias)?;
        take(entries, "out.weight", &mut self.out.weight)?;
        take(entries, "out.bias", &mut self.out.bias)
    }
}

/// Dense seed, reshape, dropout, then 3×3 convs; the first `stages` convs are
/// each followed by ×2 upsampling, the rest run at full resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct Decoder<T: Real = f32> {
    pub fc: Linear<T>,
    pub convs: Vec<Conv<T>>,
    pub dropout: f64,
    upsample_count: usize,
    seed_hw: usize,
    seed_channels: usize,
}

impl<T: Real> Decoder<T> {
    pub fn new<R: Rng + ?Sized>(profile: &ArchProfile, rng: &mut R) -> Self {
        let seed_channels = profile.channels[profile.channels.len() - 1];
        let fc = Linear::new(rng, 2 * profile.code_dim, profile.decoder_seed_len(), Init::He);
        let widths = profile.decoder_channels();
        let mut convs = Vec::new();
        let mut c_in = seed_channels;
        for (i, &c) in widths.iter().enumerate() {
            let init = if i + 1 == widths.len() {
                Init::Xavier
            } else {
                Init::He
            };
            convs.push(Conv::new(rng, c_in, c, 1, init));
            c_in = c;
        }
        Decoder {
            fc,
            convs,
            dropout: DECODER_DROPOUT,
            upsample_count: profile.stages(),
            seed_hw: profile.decoder_seed_hw,
            seed_channels,
        }
    }

    pub fn latent_dim(&self) -> usize {
        self.fc.weight.shape()[1]
    }

    pub fn forward<R: Rng + ?Sized>(
        &self,
        g: &mut Graph<T>,
        pv: &[Var],
        z: Var,
        mode: Mode,
        rng: &mut R,
    ) -> Result<Var> {
        let zs = g.value(z).shape().to_vec();
        let width = *zs.last().unwrap_or(&0);
        if width != self.latent_dim() || zs.len() > 2 {
            return Err(Error::shape("decode", &zs, &[self.latent_dim()]));
        }
        let mut h = g.dense(z, pv[0], pv[1])?;
        h = g.relu(h);
        let (s, c) = (self.seed_hw, self.seed_channels);
        h = if zs.len() == 2 {
            g.reshape(h, &[zs[0], c, s, s])?
        } else {
            g.reshape(h, &[c, s, s])?
        };
        h = g.dropout(h, self.dropout, rng, mode)?;
        let last = self.convs.len() - 1;
        for (i, conv) in self.convs.iter().enumerate() {
            h = g.conv2d(h, pv[2 + 2 * i], pv[3 + 2 * i], conv.stride)?;
            h = if i == last { g.sigmoid(h) } else { g.relu(h) };
            if i < self.upsample_count {
                h = g.upsample2x(h)?;
            }
        }
        Ok(h)
    }
}

impl<T: Real> Module<T> for Decoder<T> {
    fn params(&self) -> Vec<&Tensor<T>> {
        let mut out = vec![&self.fc.weight, &self.fc.bias];
        for c in &self.convs {
            out.push(&c.kernel);
            out.push(&c.bias);
        }
        out
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = vec![&mut self.fc.weight, &mut self.fc.bias];
        for c in &mut self.convs {
            out.push(&mut c.kernel);
            out.push(&mut c.bias);
        }
        out
    }

    fn state_dict(&self) -> Vec<(String, Tensor<T>)> {
        let mut out = Vec::new();
        put(&mut out, "fc.weight".into(), &self.fc.weight);
        put(&mut out, "fc.bias".into(), &self.fc.bias);
        for (i, c) in self.convs.iter().enumerate() {
            put(&mut out, format!("conv{i}.kernel"), &c.kernel);
            put(&mut out, format!("conv{i}.bias"), &c.bias);
        }
        out
    }

    fn load_state_dict(&mut self, entries: &BTreeMap<String, Tensor<T>>) -> Result<()> {
        take(entries, "fc.weight", &mut self.fc.weight)?;
        take(entries, "fc.bias", &mut self.fc.bias)?;
        for (i, c) in self.convs.iter_mut().enumerate() {
            take(entries, &format!("conv{i}.kernel"), &mut c.kernel)?;
            take(entries, &format!("conv{i}.bias"), &mut c.bias)?;
        }
        Ok(())
    }
}

/// Specified code `c`, unspecified code `r`, and their concatenation `z`.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentCode<T: Real = f32> {
    pub c: Tensor<T>,
    pub r: Tensor<T>,
    pub z: Tensor<T>,
}

impl<T: Real> LatentCode<T> {
    pub fn new(c: Tensor<T>, r: Tensor<T>) -> Result<Self> {
        if c.rank() != 1 || r.rank() != 1 {
            return Err(Error::shape("latent code", c.shape(), r.shape()));
        }
        let mut z = c.data().to_vec();
        z.extend_from_slice(r.data());
        Ok(LatentCode {
            c,
            r,
            z: Tensor::vector(z),
        })
    }
}

/// The five networks of the two-step pipeline.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelSet<T: Real = f32> {
    pub profile: ArchProfile,
    pub encoder_c: Encoder<T>,
    pub classifier: ClassifierHead<T>,
    pub encoder_r: Encoder<T>,
    pub adversary: ClassifierHead<T>,
    pub decoder: Decoder<T>,
}

pub const NETWORK_NAMES: [&str; 5] = ["encoder_c", "classifier", "encoder_r", "adversary", "decoder"];

impl<T: Real> ModelSet<T> {
    pub fn state_dict(&self) -> Vec<(String, Tensor<T>)> {
        let nets: [Vec<(String, Tensor<T>)>; 5] = [
            self.encoder_c.state_dict(),
            self.classifier.state_dict(),
            self.encoder_r.state_dict(),
            self.adversary.state_dict(),
            self.decoder.state_dict(),
        ];
        NETWORK_NAMES
            .iter()
            .zip(nets)
            .flat_map(|(net, entries)| {
                entries
                    .into_iter()
                    .map(move |(name, t)| (format!("{net}.{name}"), t))
            })
            .collect()
    }

    pub fn load_state_dict(&mut self, entries: &BTreeMap<String, Tensor<T>>) -> Result<()> {
        let scoped = |net: &str| -> BTreeMap<String, Tensor<T>> {
            let prefix = format!("{net}.");
            entries
                .iter()
                .filter_map(|(k, v)| k.strip_prefix(&prefix).map(|s| (s.to_string(), v.clone())))
                .collect()
        };
        self.encoder_c.load_state_dict(&scoped("encoder_c"))?;
        self.classifier.load_state_dict(&scoped("classifier"))?;
        self.encoder_r.load_state_dict(&scoped("encoder_r"))?;
        self.adversary.load_state_dict(&scoped("adversary"))?;
        self.decoder.load_state_dict(&scoped("decoder"))
    }

    /// Parameter counts per network, in [`NETWORK_NAMES`] order.
    pub fn param_counts(&self) -> [usize; 5] {
        [
            self.encoder_c.param_count(),
            self.classifier.param_count(),
            self.encoder_r.param_count(),
            self.adversary.param_count(),
            self.decoder.param_count(),
        ]
    }
}

/// Builds all five networks. Parameters are a pure function of the profile
/// and the random stream.
pub fn build_models<T: Real, R: Rng + ?Sized>(profile: &ArchProfile, rng: &mut R) -> Result<ModelSet<T>> {
    profile.validate()?;
    let encoder_c = Encoder::new(profile, rng);
    let classifier = ClassifierHead::new(profile.code_dim, profile.class_count, rng);
    let encoder_r = Encoder::new(profile, rng);
    let adversary = ClassifierHead::new(profile.code_dim, profile.class_count, rng);
    let decoder = Decoder::new(profile, rng);
    Ok(ModelSet {
        profile: profile.clone(),
        encoder_c,
        classifier,
        encoder_r,
        adversary,
        decoder,
    })
}

/// Code for one image `[1,H,W]` or a batch `[N,1,H,W]`.
pub fn encode<T: Real>(encoder: &Encoder<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let pv = encoder.bind(&mut g, false);
    let xv = g.input(x.clone());
    let out = encoder.forward(&mut g, &pv, xv)?;
    Ok(g.value(out).clone())
}

/// Class probabilities for one code `[D]` or a batch `[N,D]`.
pub fn classify<T: Real>(head: &mut ClassifierHead<T>, code: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
    let width = code.shape().last().copied().unwrap_or(0);
    if width != head.code_dim() || code.rank() > 2 {
        return Err(Error::shape("classify", code.shape(), &[head.code_dim()]));
    }
    let mut g = Graph::new();
    let pv = head.bind(&mut g, false);
    let cv = g.input(code.clone());
    let out = head.forward(&mut g, &pv, cv, mode)?;
    Ok(g.value(out).clone())
}

/// Image for one latent `[2D]` or a batch `[N,2D]`. Eval mode never touches `rng`.
pub fn decode<T: Real, R: Rng + ?Sized>(
    decoder: &Decoder<T>,
    z: &Tensor<T>,
    mode: Mode,
    rng: &mut R,
) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let pv = decoder.bind(&mut g, false);
    let zv = g.input(z.clone());
    let out = decoder.forward(&mut g, &pv, zv, mode, rng)?;
    Ok(g.value(out).clone())
}
