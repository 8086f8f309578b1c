use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};

/// Convolution parameters; `weight` is `[out, in, k, k]` row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Conv2d {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Conv2d {
    pub fn zeros(in_channels: usize, out_channels: usize, kernel: usize, stride: usize) -> Self {
        Self {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding: kernel / 2,
            weight: vec![0.0; out_channels * in_channels * kernel * kernel],
            bias: vec![0.0; out_channels],
        }
    }

    /// He-normal weights scaled by `gain`, zero bias.
    pub fn random(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        gain: f64,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let mut conv = Self::zeros(in_channels, out_channels, kernel, stride);
        let fan_in = (in_channels * kernel * kernel) as f64;
        let normal = Normal::new(0.0, gain * (2.0 / fan_in).sqrt()).expect("valid std");
        for w in &mut conv.weight {
            *w = normal.sample(rng);
        }
        conv
    }

    pub fn parameter_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    fn bind(&self, tape: &mut Tape) -> (Var, Var) {
        let w = tape.leaf(Tensor::new(
            vec![self.out_channels, self.in_channels, self.kernel, self.kernel],
            self.weight.clone(),
        ));
        let b = tape.leaf(Tensor::new(vec![self.out_channels], self.bias.clone()));
        (w, b)
    }
}

fn flatten(layers: &[Conv2d]) -> Vec<f64> {
    layers
        .iter()
        .flat_map(|l| l.weight.iter().chain(&l.bias).copied())
        .collect()
}

fn unflatten(layers: &mut [Conv2d], params: &[f64]) {
    let total: usize = layers.iter().map(Conv2d::parameter_count).sum();
    assert_eq!(params.len(), total, "parameter vector length");
    let mut rest = params;
    for l in layers {
        let (w, tail) = rest.split_at(l.weight.len());
        l.weight.copy_from_slice(w);
        let (b, tail) = tail.split_at(l.bias.len());
        l.bias.copy_from_slice(b);
        rest = tail;
    }
}

/// Parameter leaves of a network recorded on a tape, in flat order.
#[derive(Debug, Clone)]
pub struct Bound {
    params: Vec<(Var, Var)>,
}

impl Bound {
    /// Flattened gradient in the same order as `parameters()`.
    pub fn gradient(&self, grads: &crate::autodiff::Gradients) -> Vec<f64> {
        self.params
            .iter()
            .flat_map(|&(w, b)| {
                let mut g = grads.of(w);
                g.extend(grads.of(b));
                g
            })
            .collect()
    }
}

/// How a generator starts out.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum GeneratorInit {
    /// Output layer zeroed, so the generator is exactly the identity map.
    Identity,
    /// He-normal everywhere, output layer scaled by `output_gain`.
    Random { output_gain: f64 },
}

/// Residual image-to-image network: `clamp01(x + f(x))`, where `f` is a
/// stack of 3x3 convolutions with leaky ReLU between them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Generator {
    pub layers: Vec<Conv2d>,
    pub slope: f64,
}

impl Generator {
    /// `depth` hidden layers of width `hidden` (at least one).
    pub fn new(hidden: usize, depth: usize, init: GeneratorInit, rng: &mut ChaCha8Rng) -> Self {
        let depth = depth.max(1);
        let mut layers = Vec::with_capacity(depth + 1);
        layers.push(Conv2d::random(3, hidden, 3, 1, 1.0, rng));
        for _ in 1..depth {
            layers.push(Conv2d::random(hidden, hidden, 3, 1, 1.0, rng));
        }
        layers.push(match init {
            GeneratorInit::Identity => Conv2d::zeros(hidden, 3, 3, 1),
            GeneratorInit::Random { output_gain } => Conv2d::random(hidden, 3, 3, 1, output_gain, rng),
        });
        Self { layers, slope: 0.2 }
    }

    pub fn parameters(&self) -> Vec<f64> {
        flatten(&self.layers)
    }

    pub fn set_parameters(&mut self, params: &[f64]) {
        unflatten(&mut self.layers, params);
    }

    pub fn parameter_count(&self) -> usize {
        self.layers.iter().map(Conv2d::parameter_count).sum()
    }

    pub fn bind(&self, tape: &mut Tape) -> Bound {
        Bound {
            params: self.layers.iter().map(|l| l.bind(tape)).collect(),
        }
    }

    pub fn forward(&self, tape: &mut Tape, bound: &Bound, x: Var) -> Var {
        let mut h = x;
        let last = self.layers.len() - 1;
        for (i, (layer, &(w, b))) in self.layers.iter().zip(&bound.params).enumerate() {
            h = tape.conv2d(h, w, b, layer.stride, layer.padding);
            if i < last {
                h = tape.leaky_relu(h, self.slope);
            }
        }
        let sum = tape.add(x, h);
        tape.clamp01(sum)
    }

    /// Inference without keeping a tape around.
    pub fn apply(&self, batch: Tensor) -> Tensor {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape);
        let x = tape.leaf(batch);
        let y = self.forward(&mut tape, &bound, x);
        tape.value(y).clone()
    }
}

/// Patch discriminator producing a map of logits; `D(x) = sigmoid(logit)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Discriminator {
    pub layers: Vec<Conv2d>,
    pub slope: f64,
}

impl Discriminator {
    /// `downsamplings` stride-2 layers doubling width from `hidden`, then a
    /// stride-1 projection to one channel.
    pub fn new(hidden: usize, downsamplings: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut layers = Vec::new();
        let mut channels = 3;
        let mut width = hidden;
        for _ in 0..downsamplings.max(1) {
            layers.push(Conv2d::random(channels, width, 3, 2, 1.0, rng));
            channels = width;
            width *= 2;
        }
        layers.push(Conv2d::random(channels, 1, 3, 1, 1.0, rng));
        Self { layers, slope: 0.2 }
    }

    /// A single 1x1 layer; handy for hand-built discriminators.
    pub fn pointwise(weights: [f64; 3], bias: f64) -> Self {
        let mut conv = Conv2d::zeros(3, 1, 1, 1);
        conv.weight.copy_from_slice(&weights);
        conv.bias[0] = bias;
        Self {
            layers: vec![conv],
            slope: 0.2,
        }
    }

    pub fn parameters(&self) -> Vec<f64> {
        flatten(&self.layers)
    }

    pub fn set_parameters(&mut self, params: &[f64]) {
        unflatten(&mut self.layers, params);
    }

    pub fn parameter_count(&self) -> usize {
        self.layers.iter().map(Conv2d::parameter_count).sum()
    }

    pub fn bind(&self, tape: &mut Tape) -> Bound {
        Bound {
            params: self.layers.iter().map(|l| l.bind(tape)).collect(),
        }
    }

    /// Logit map `[n, 1, h', w']`.
    pub fn forward(&self, tape: &mut Tape, bound: &Bound, x: Var) -> Var {
        let mut h = x;
        let last = self.layers.len() - 1;
        for (i, (layer, &(w, b))) in self.layers.iter().zip(&bound.params).enumerate() {
            h = tape.conv2d(h, w, b, layer.stride, layer.padding);
            if i < last {
                h = tape.leaky_relu(h, self.slope);
            }
        }
        h
    }

    pub fn logits(&self, batch: Tensor) -> Tensor {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape);
        let x = tape.leaf(batch);
        let y = self.forward(&mut tape, &bound, x);
        tape.value(y).clone()
    }
}

/// Network sizes. None of these are fixed by the method itself.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    pub gen_hidden: usize,
    pub gen_depth: usize,
    pub disc_hidden: usize,
    pub disc_downsamplings: usize,
    pub init: GeneratorInit,
}

impl Default for Architecture {
    fn default() -> Self {
        Self {
            gen_hidden: 16,
            gen_depth: 3,
            disc_hidden: 16,
            disc_downsamplings: 3,
            init: GeneratorInit::Random { output_gain: 0.5 },
        }
    }
}

/// Both generators and both discriminators of the unpaired translator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TranslatorPair {
    pub gen_photo_to_ori: Generator,
    pub gen_ori_to_photo: Generator,
    pub disc_ori: Discriminator,
    pub disc_photo: Discriminator,
    pub step: u64,
}

impl TranslatorPair {
    pub fn new(arch: &Architecture, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self {
            gen_photo_to_ori: Generator::new(arch.gen_hidden, arch.gen_depth, arch.init, &mut rng),
            gen_ori_to_photo: Generator::new(arch.gen_hidden, arch.gen_depth, arch.init, &mut rng),
            disc_ori: Discriminator::new(arch.disc_hidden, arch.disc_downsamplings, &mut rng),
            disc_photo: Discriminator::new(arch.disc_hidden, arch.disc_downsamplings, &mut rng),
            step: 0,
        }
    }

    pub fn parameter_count(&self) -> usize {
        self.gen_photo_to_ori.parameter_count()
            + self.gen_ori_to_photo.parameter_count()
            + self.disc_ori.parameter_count()
            + self.disc_photo.parameter_count()
    }

    /// All parameters: `gen_photo_to_ori`, `gen_ori_to_photo`, `disc_ori`,
    /// `disc_photo`, concatenated.
    pub fn parameters(&self) -> Vec<f64> {
        let mut p = self.gen_photo_to_ori.parameters();
        p.extend(self.gen_ori_to_photo.parameters());
        p.extend(self.disc_ori.parameters());
        p.extend(self.disc_photo.parameters());
        p
    }

    pub fn set_parameters(&mut self, params: &[f64]) {
        let mut offset = 0;
        let mut take = |n: usize| {
            let s = &params[offset..offset + n];
            offset += n;
            s
        };
        let n = self.gen_photo_to_ori.parameter_count();
        self.gen_photo_to_ori.set_parameters(take(n));
        let n = self.gen_ori_to_photo.parameter_count();
        self.gen_ori_to_photo.set_parameters(take(n));
        let n = self.disc_ori.parameter_count();
        self.disc_ori.set_parameters(take(n));
        let n = self.disc_photo.parameter_count();
        self.disc_photo.set_parameters(take(n));
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_generator_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let g = Generator::new(4, 2, GeneratorInit::Identity, &mut rng);
        let x = Tensor::new(vec![1, 3, 4, 4], (0..48).map(|i| i as f64 / 47.0).collect());
        assert_eq!(g.apply(x.clone()), x);
    }

    #[test]
    fn generator_output_stays_in_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let g = Generator::new(4, 2, GeneratorInit::Random { output_gain: 5.0 }, &mut rng);
        let x = Tensor::new(vec![2, 3, 6, 6], (0..216).map(|i| (i % 7) as f64 / 6.0).collect());
        let y = g.apply(x);
        assert_eq!(y.shape, vec![2, 3, 6, 6]);
        assert!(y.data.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn discriminator_downsamples() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let d = Discriminator::new(4, 2, &mut rng);
        let y = d.logits(Tensor::zeros(vec![1, 3, 32, 32]));
        assert_eq!(y.shape, vec![1, 1, 8, 8]);
    }

    #[test]
    fn parameter_roundtrip() {
        let mut pair = TranslatorPair::new(&Architecture::default(), 5);
        let mut p = pair.parameters();
        assert_eq!(p.len(), pair.parameter_count());
        p[0] += 1.0;
        *p.last_mut().unwrap() -= 1.0;
        pair.set_parameters(&p);
        assert_eq!(pair.parameters(), p);
    }

    #[test]
    fn same_seed_same_weights() {
        let arch = Architecture::default();
        assert_eq!(TranslatorPair::new(&arch, 9), TranslatorPair::new(&arch, 9));
        assert_ne!(TranslatorPair::new(&arch, 9), TranslatorPair::new(&arch, 10));
    }
}
