//! Learnable tensors and batch-norm statistics of the dual-decoder U-Net.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::NetworkConfig;
use crate::rng::stream_rng;

/// What a named tensor holds. Running statistics are state, not parameters.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TensorRole {
    Weight,
    Bias,
    Scale,
    Offset,
    RunningMean,
    RunningVar,
}

impl TensorRole {
    pub fn is_learnable(self) -> bool {
        !matches!(self, Self::RunningMean | Self::RunningVar)
    }
}

#[derive(Debug)]
pub struct TensorRef<'a> {
    pub name: String,
    pub role: TensorRole,
    pub shape: Vec<usize>,
    pub data: &'a [f64],
}

#[derive(Debug)]
pub struct TensorMut<'a> {
    pub name: String,
    pub role: TensorRole,
    pub shape: Vec<usize>,
    pub data: &'a mut [f64],
}

trait Visit {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<TensorRef<'a>>);
    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<TensorMut<'a>>);
}

/// Convolution weights, laid out `[out][in][ky][kx]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv2d {
    pub out_ch: usize,
    pub in_ch: usize,
    pub kernel: usize,
    pub weight: Vec<f64>,
    pub bias: Option<Vec<f64>>,
}

impl Conv2d {
    /// Truncated normal (±2σ) with σ = gain / √fan_in.
    fn init(in_ch: usize, out_ch: usize, kernel: usize, bias: bool, gain: f64, rng: &mut impl Rng) -> Self {
        let fan_in = (in_ch * kernel * kernel) as f64;
        let std = gain / fan_in.sqrt();
        let normal = Normal::new(0.0, std).expect("positive std");
        let weight = (0..out_ch * in_ch * kernel * kernel)
            .map(|_| loop {
                let v: f64 = normal.sample(rng);
                if v.abs() <= 2.0 * std {
                    break v;
                }
            })
            .collect();
        Self {
            out_ch,
            in_ch,
            kernel,
            weight,
            bias: bias.then(|| vec![0.0; out_ch]),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            weight: vec![0.0; self.weight.len()],
            bias: self.bias.as_ref().map(|b| vec![0.0; b.len()]),
            ..*self
        }
    }

    fn shape(&self) -> Vec<usize> {
        vec![self.out_ch, self.in_ch, self.kernel, self.kernel]
    }
}

impl Visit for Conv2d {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<TensorRef<'a>>) {
        out.push(TensorRef {
            name: format!("{prefix}.weight"),
            role: TensorRole::Weight,
            shape: self.shape(),
            data: &self.weight,
        });
        if let Some(b) = &self.bias {
            out.push(TensorRef {
                name: format!("{prefix}.bias"),
                role: TensorRole::Bias,
                shape: vec![self.out_ch],
                data: b,
            });
        }
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<TensorMut<'a>>) {
        let shape = self.shape();
        out.push(TensorMut {
            name: format!("{prefix}.weight"),
            role: TensorRole::Weight,
            shape,
            data: &mut self.weight,
        });
        if let Some(b) = &mut self.bias {
            out.push(TensorMut {
                name: format!("{prefix}.bias"),
                role: TensorRole::Bias,
                shape: vec![self.out_ch],
                data: b,
            });
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BatchNorm {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
}

impl BatchNorm {
    pub fn new(c: usize) -> Self {
        Self {
            gamma: vec![1.0; c],
            beta: vec![0.0; c],
            running_mean: vec![0.0; c],
            running_var: vec![1.0; c],
        }
    }

    pub fn zeros_like(&self) -> Self {
        let c = self.gamma.len();
        Self {
            gamma: vec![0.0; c],
            beta: vec![0.0; c],
            running_mean: vec![0.0; c],
            running_var: vec![0.0; c],
        }
    }

    /// `running ← momentum·running + (1 − momentum)·batch`.
    pub fn update_running(&mut self, mean: &[f64], var: &[f64], momentum: f64) {
        for (r, &m) in self.running_mean.iter_mut().zip(mean) {
            *r = momentum * *r + (1.0 - momentum) * m;
        }
        for (r, &v) in self.running_var.iter_mut().zip(var) {
            *r = momentum * *r + (1.0 - momentum) * v;
        }
    }
}

impl Visit for BatchNorm {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<TensorRef<'a>>) {
        let c = self.gamma.len();
        for (suffix, role, data) in [
            ("gamma", TensorRole::Scale, &self.gamma),
            ("beta", TensorRole::Offset, &self.beta),
            ("running_mean", TensorRole::RunningMean, &self.running_mean),
            ("running_var", TensorRole::RunningVar, &self.running_var),
        ] {
            out.push(TensorRef {
                name: format!("{prefix}.{suffix}"),
                role,
                shape: vec![c],
                data,
            });
        }
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<TensorMut<'a>>) {
        let c = self.gamma.len();
        for (suffix, role, data) in [
            ("gamma", TensorRole::Scale, &mut self.gamma),
            ("beta", TensorRole::Offset, &mut self.beta),
            ("running_mean", TensorRole::RunningMean, &mut self.running_mean),
            ("running_var", TensorRole::RunningVar, &mut self.running_var),
        ] {
            out.push(TensorMut {
                name: format!("{prefix}.{suffix}"),
                role,
                shape: vec![c],
                data,
            });
        }
    }
}

/// Convolution followed by batch normalization (and ReLU at run time).
/// The convolution has no bias: the normalization would cancel it.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvBn {
    pub conv: Conv2d,
    pub bn: BatchNorm,
}

impl ConvBn {
    fn init(in_ch: usize, out_ch: usize, kernel: usize, rng: &mut impl Rng) -> Self {
        Self {
            conv: Conv2d::init(in_ch, out_ch, kernel, false, std::f64::consts::SQRT_2, rng),
            bn: BatchNorm::new(out_ch),
        }
    }

    fn zeros_like(&self) -> Self {
        Self {
            conv: self.conv.zeros_like(),
            bn: self.bn.zeros_like(),
        }
    }
}

impl Visit for ConvBn {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<TensorRef<'a>>) {
        self.conv.visit(prefix, out);
        self.bn.visit(&format!("{prefix}.bn"), out);
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<TensorMut<'a>>) {
        self.conv.visit_mut(prefix, out);
        self.bn.visit_mut(&format!("{prefix}.bn"), out);
    }
}

/// Two successive conv → BN → ReLU stages with the same filter count.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvBlock {
    pub first: ConvBn,
    pub second: ConvBn,
}

impl ConvBlock {
    pub fn init(in_ch: usize, filters: usize, kernel: usize, rng: &mut impl Rng) -> Self {
        Self {
            first: ConvBn::init(in_ch, filters, kernel, rng),
            second: ConvBn::init(filters, filters, kernel, rng),
        }
    }

    pub fn filters(&self) -> usize {
        self.second.conv.out_ch
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            first: self.first.zeros_like(),
            second: self.second.zeros_like(),
        }
    }
}

impl Visit for ConvBlock {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<TensorRef<'a>>) {
        self.first.visit(&format!("{prefix}.conv1"), out);
        self.second.visit(&format!("{prefix}.conv2"), out);
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<TensorMut<'a>>) {
        self.first.visit_mut(&format!("{prefix}.conv1"), out);
        self.second.visit_mut(&format!("{prefix}.conv2"), out);
    }
}

/// Upsample ×2 → 2×2 conv → BN → ReLU, concatenate the skip, then a conv block.
#[derive(Clone, Debug, PartialEq)]
pub struct UpBlock {
    pub up: ConvBn,
    pub block: ConvBlock,
}

impl UpBlock {
    pub fn init(in_ch: usize, skip_ch: usize, filters: usize, kernel: usize, rng: &mut impl Rng) -> Self {
        Self {
            up: ConvBn::init(in_ch, filters, 2, rng),
            block: ConvBlock::init(filters + skip_ch, filters, kernel, rng),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            up: self.up.zeros_like(),
            block: self.block.zeros_like(),
        }
    }
}

impl Visit for UpBlock {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<TensorRef<'a>>) {
        self.up.visit(&format!("{prefix}.upconv"), out);
        self.block.visit(prefix, out);
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<TensorMut<'a>>) {
        self.up.visit_mut(&format!("{prefix}.upconv"), out);
        self.block.visit_mut(prefix, out);
    }
}

/// One expansive path. `ups[0]` consumes the bottleneck.
#[derive(Clone, Debug, PartialEq)]
pub struct Decoder {
    pub ups: Vec<UpBlock>,
    /// 1×1 convolution to (background, foreground).
    pub head: Conv2d,
}

impl Decoder {
    fn init(cfg: &NetworkConfig, rng: &mut impl Rng) -> Self {
        let ups = (0..cfg.depth)
            .rev()
            .map(|level| UpBlock::init(cfg.filters_at(level + 1), cfg.filters_at(level), cfg.filters_at(level), cfg.kernel, rng))
            .collect();
        Self {
            ups,
            head: Conv2d::init(cfg.base_filters, 2, 1, true, 1.0, rng),
        }
    }

    fn zeros_like(&self) -> Self {
        Self {
            ups: self.ups.iter().map(UpBlock::zeros_like).collect(),
            head: self.head.zeros_like(),
        }
    }
}

impl Visit for Decoder {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<TensorRef<'a>>) {
        for (j, u) in self.ups.iter().enumerate() {
            u.visit(&format!("{prefix}.up{j}"), out);
        }
        self.head.visit(&format!("{prefix}.head"), out);
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<TensorMut<'a>>) {
        for (j, u) in self.ups.iter_mut().enumerate() {
            u.visit_mut(&format!("{prefix}.up{j}"), out);
        }
        self.head.visit_mut(&format!("{prefix}.head"), out);
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NetworkParams {
    pub config: NetworkConfig,
    pub encoder: Vec<ConvBlock>,
    pub bottleneck: ConvBlock,
    pub gland: Decoder,
    pub contour: Decoder,
}

impl NetworkParams {
    /// Fresh parameters; deterministic in `seed`.
    pub fn init(config: &NetworkConfig, seed: u64) -> Self {
        let mut rng = stream_rng(&[seed, 0x1417]);
        let mut in_ch = config.channels_in;
        let mut encoder = Vec::with_capacity(config.depth);
        for level in 0..config.depth {
            encoder.push(ConvBlock::init(in_ch, config.filters_at(level), config.kernel, &mut rng));
            in_ch = config.filters_at(level);
        }
        let bottleneck = ConvBlock::init(in_ch, config.filters_at(config.depth), config.kernel, &mut rng);
        let gland = Decoder::init(config, &mut rng);
        let contour = Decoder::init(config, &mut rng);
        Self {
            config: config.clone(),
            encoder,
            bottleneck,
            gland,
            contour,
        }
    }

    /// Same structure with every tensor zeroed.
    pub fn zeros_like(&self) -> Self {
        Self {
            config: self.config.clone(),
            encoder: self.encoder.iter().map(ConvBlock::zeros_like).collect(),
            bottleneck: self.bottleneck.zeros_like(),
            gland: self.gland.zeros_like(),
            contour: self.contour.zeros_like(),
        }
    }

    /// Every tensor (learnable and running statistics) in a fixed order.
    pub fn tensors(&self) -> Vec<TensorRef<'_>> {
        let mut out = Vec::new();
        for (i, b) in self.encoder.iter().enumerate() {
            b.visit(&format!("encoder{i}"), &mut out);
        }
        self.bottleneck.visit("bottleneck", &mut out);
        self.gland.visit("gland", &mut out);
        self.contour.visit("contour", &mut out);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<TensorMut<'_>> {
        let mut out = Vec::new();
        for (i, b) in self.encoder.iter_mut().enumerate() {
            b.visit_mut(&format!("encoder{i}"), &mut out);
        }
        self.bottleneck.visit_mut("bottleneck", &mut out);
        self.gland.visit_mut("gland", &mut out);
        self.contour.visit_mut("contour", &mut out);
        out
    }

    pub fn learnable(&self) -> Vec<TensorRef<'_>> {
        self.tensors().into_iter().filter(|t| t.role.is_learnable()).collect()
    }

    pub fn learnable_mut(&mut self) -> Vec<TensorMut<'_>> {
        self.tensors_mut().into_iter().filter(|t| t.role.is_learnable()).collect()
    }

    pub fn num_learnable(&self) -> usize {
        self.learnable().iter().map(|t| t.data.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.data.iter().all(|v| v.is_finite()))
    }
}

/// Gradients of the loss, one per learnable tensor, in [`NetworkParams`] layout.
/// Running-statistic slots exist structurally but are never written.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients(pub NetworkParams);

impl Gradients {
    pub fn zeros_for(params: &NetworkParams) -> Self {
        Self(params.zeros_like())
    }

    pub fn tensors(&self) -> Vec<TensorRef<'_>> {
        self.0.learnable()
    }

    pub fn is_zero(&self) -> bool {
        self.tensors().iter().all(|t| t.data.iter().all(|&v| v == 0.0))
    }
}
