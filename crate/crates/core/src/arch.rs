//! The boundary-aware encoder/decoder network.
//!
//! One shared encoder feeds two decoders. The boundary decoder predicts a
//! 2-class surface map at every decoder scale; the segmentation decoder
//! multiplies each upsampled feature map by `1 + p_b` (the boundary-class
//! probability at that scale, broadcast over channels) before the skip
//! concatenation. Scale 0 is the full patch resolution and all output lists
//! run fine to coarse.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{BoundConv, BoundNorm, ConvGeometry, ConvParams, InstanceNormParams, LEAKY_RELU_SLOPE};
use crate::tape::{Tape, Var};
use crate::tensor::{Real, Tensor};
#[cfg(test)]
use crate::tensor::Shape;

/// Channels of the boundary map: background surface vs. organ surface.
pub const BOUNDARY_CHANNELS: usize = 2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkConfig {
    /// Resolution levels of the encoder (`L`); there are `L - 1` decoder scales.
    pub levels: usize,
    #[serde(default = "default_base_channels")]
    pub base_channels: usize,
    #[serde(default = "default_channel_cap")]
    pub channel_cap: usize,
    pub num_classes: usize,
    pub patch_dims: [usize; 3],
    /// `false` builds the no-boundary ablation: a single decoder, no attention.
    #[serde(default = "default_true")]
    pub boundary_attention: bool,
}

fn default_base_channels() -> usize {
    32
}

fn default_channel_cap() -> usize {
    320
}

fn default_true() -> bool {
    true
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        if self.levels < 2 {
            return Err(Error::config(format!("levels must be >= 2, got {}", self.levels)));
        }
        if self.base_channels == 0 || self.channel_cap == 0 {
            return Err(Error::config("channel counts must be positive"));
        }
        if !(2..=256).contains(&self.num_classes) {
            return Err(Error::config(format!(
                "num_classes must be in [2, 256], got {}",
                self.num_classes
            )));
        }
        let f = self.downsampling_factor();
        if self.patch_dims.iter().any(|&d| d == 0 || d % f != 0) {
            return Err(Error::config(format!(
                "patch dims {:?} must be positive multiples of {f}",
                self.patch_dims
            )));
        }
        Ok(())
    }

    /// `2^(L-1)`.
    pub fn downsampling_factor(&self) -> usize {
        1 << (self.levels - 1)
    }

    /// Number of supervised decoder scales.
    pub fn scales(&self) -> usize {
        self.levels - 1
    }

    /// Encoder width at every level: `min(base · 2^l, cap)`.
    pub fn widths(&self) -> Vec<usize> {
        (0..self.levels)
            .map(|l| (self.base_channels << l).min(self.channel_cap))
            .collect()
    }
}

/// How the segmentation decoder uses the boundary probability.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Attention {
    /// Multiply by `1 + p_b` with the predicted boundary probability.
    Learned,
    /// Multiply by `1 + p` with a constant injected probability.
    Fixed(f64),
    /// Skip the multiplication.
    Disabled,
}

/// `(1 + p) ⊙ feat`, with the single-channel `p` broadcast over channels.
pub fn enhance<T: Real>(tape: &mut Tape<T>, feat: Var, prob: Var) -> Result<Var> {
    let fs = tape.shape(feat);
    let ps = tape.shape(prob);
    if ps.channels() != 1 || ps.batch() != fs.batch() || ps.spatial() != fs.spatial() {
        return Err(Error::shape(format!("enhance: feature {fs} vs boundary probability {ps}")));
    }
    let gate = tape.add_scalar(prob, T::one());
    tape.mul(feat, gate)
}

/// conv3 → instance norm → leaky ReLU.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvBlock<T = f32> {
    pub conv: ConvParams<T>,
    pub norm: InstanceNormParams<T>,
}

impl<T: Real> ConvBlock<T> {
    fn new(c_out: usize, c_in: usize, geometry: ConvGeometry, rng: &mut ChaCha8Rng) -> Self {
        ConvBlock {
            conv: ConvParams::he_normal(c_out, c_in, geometry, rng),
            norm: InstanceNormParams::new(c_out),
        }
    }

    fn cast<U: Real>(&self) -> ConvBlock<U> {
        ConvBlock {
            conv: self.conv.cast(),
            norm: self.norm.cast(),
        }
    }
}

/// One encoder resolution level. Every level but the first starts with a
/// stride-2 convolution that halves the grid and changes the width.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderLevel<T = f32> {
    pub down: Option<ConvBlock<T>>,
    pub convs: [ConvBlock<T>; 2],
}

/// One decoder scale: upsample, (attention), concat skip, two convs, head.
#[derive(Clone, Debug, PartialEq)]
pub struct DecoderBlock<T = f32> {
    pub up: ConvParams<T>,
    pub convs: [ConvBlock<T>; 2],
    pub head: ConvParams<T>,
}

impl<T: Real> DecoderBlock<T> {
    fn new(c_below: usize, c: usize, head_channels: usize, rng: &mut ChaCha8Rng) -> Self {
        DecoderBlock {
            up: ConvParams::he_normal_transposed(c_below, c, rng),
            convs: [
                ConvBlock::new(c, 2 * c, ConvGeometry::k3(1), rng),
                ConvBlock::new(c, c, ConvGeometry::k3(1), rng),
            ],
            head: ConvParams::he_normal(head_channels, c, ConvGeometry::pointwise(), rng),
        }
    }

    fn cast<U: Real>(&self) -> DecoderBlock<U> {
        DecoderBlock {
            up: self.up.cast(),
            convs: [self.convs[0].cast(), self.convs[1].cast()],
            head: self.head.cast(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BaNet<T = f32> {
    pub config: NetworkConfig,
    pub encoder: Vec<EncoderLevel<T>>,
    /// Indexed by scale; `None` in the ablation.
    pub boundary_decoder: Option<Vec<DecoderBlock<T>>>,
    /// Indexed by scale.
    pub seg_decoder: Vec<DecoderBlock<T>>,
}

/// Tape handles produced by a training forward pass.
#[derive(Clone, Debug)]
pub struct ForwardOutput {
    /// `K`-channel probabilities, fine to coarse.
    pub seg_probs: Vec<Var>,
    /// 2-channel boundary probabilities, fine to coarse; empty in the ablation.
    pub boundary_probs: Vec<Var>,
    /// Upsampled segmentation features entering each fusion, fine to coarse.
    pub upsampled: Vec<Var>,
    /// The same features after the attention step.
    pub enhanced: Vec<Var>,
}

impl<T: Real> BaNet<T> {
    /// Deterministic He initialization per `seed`.
    pub fn build(config: &NetworkConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let widths = config.widths();
        let mut encoder = Vec::with_capacity(config.levels);
        for (l, &c) in widths.iter().enumerate() {
            let (down, c_in) = if l == 0 {
                (None, 1)
            } else {
                (Some(ConvBlock::new(c, widths[l - 1], ConvGeometry::k3(2), &mut rng)), c)
            };
            let convs = [
                ConvBlock::new(c, c_in, ConvGeometry::k3(1), &mut rng),
                ConvBlock::new(c, c, ConvGeometry::k3(1), &mut rng),
            ];
            encoder.push(EncoderLevel { down, convs });
        }
        let decoder = |head: usize, rng: &mut ChaCha8Rng| -> Vec<DecoderBlock<T>> {
            (0..config.scales())
                .map(|s| DecoderBlock::new(widths[s + 1], widths[s], head, rng))
                .collect()
        };
        let boundary_decoder = config
            .boundary_attention
            .then(|| decoder(BOUNDARY_CHANNELS, &mut rng));
        let seg_decoder = decoder(config.num_classes, &mut rng);
        Ok(BaNet {
            config: config.clone(),
            encoder,
            boundary_decoder,
            seg_decoder,
        })
    }

    pub fn cast<U: Real>(&self) -> BaNet<U> {
        BaNet {
            config: self.config.clone(),
            encoder: self
                .encoder
                .iter()
                .map(|e| EncoderLevel {
                    down: e.down.as_ref().map(ConvBlock::cast),
                    convs: [e.convs[0].cast(), e.convs[1].cast()],
                })
                .collect(),
            boundary_decoder: self
                .boundary_decoder
                .as_ref()
                .map(|d| d.iter().map(DecoderBlock::cast).collect()),
            seg_decoder: self.seg_decoder.iter().map(DecoderBlock::cast).collect(),
        }
    }

    /// Every parameter tensor with a stable name, in binding order.
    pub fn parameters(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        self.visit(&mut |name, t| out.push((name, t)));
        out
    }

    pub fn parameters_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut names = Vec::new();
        self.visit(&mut |name, _| names.push(name));
        names.into_iter().zip(self.tensors_mut()).collect()
    }

    pub fn num_params(&self) -> usize {
        self.parameters().iter().map(|(_, t)| t.len()).sum()
    }

    fn visit<'a>(&'a self, f: &mut dyn FnMut(String, &'a Tensor<T>)) {
        let block = |prefix: String, b: &'a ConvBlock<T>, f: &mut dyn FnMut(String, &'a Tensor<T>)| {
            f(format!("{prefix}.conv.weight"), &b.conv.weight);
            f(format!("{prefix}.conv.bias"), &b.conv.bias);
            f(format!("{prefix}.norm.gamma"), &b.norm.gamma);
            f(format!("{prefix}.norm.beta"), &b.norm.beta);
        };
        for (l, e) in self.encoder.iter().enumerate() {
            if let Some(d) = &e.down {
                block(format!("encoder.{l}.down"), d, f);
            }
            for (i, c) in e.convs.iter().enumerate() {
                block(format!("encoder.{l}.conv{i}"), c, f);
            }
        }
        let decoders = self
            .boundary_decoder
            .iter()
            .map(|d| ("boundary", d))
            .chain([("seg", &self.seg_decoder)]);
        for (name, dec) in decoders {
            for (s, d) in dec.iter().enumerate() {
                f(format!("{name}.{s}.up.weight"), &d.up.weight);
                f(format!("{name}.{s}.up.bias"), &d.up.bias);
                for (i, c) in d.convs.iter().enumerate() {
                    block(format!("{name}.{s}.conv{i}"), c, f);
                }
                f(format!("{name}.{s}.head.weight"), &d.head.weight);
                f(format!("{name}.{s}.head.bias"), &d.head.bias);
            }
        }
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        fn block<T>(b: &mut ConvBlock<T>) -> [&mut Tensor<T>; 4] {
            [&mut b.conv.weight, &mut b.conv.bias, &mut b.norm.gamma, &mut b.norm.beta]
        }
        let mut out = Vec::new();
        for e in &mut self.encoder {
            if let Some(d) = &mut e.down {
                out.extend(block(d));
            }
            for c in &mut e.convs {
                out.extend(block(c));
            }
        }
        let decoders = self.boundary_decoder.iter_mut().chain([&mut self.seg_decoder]);
        for dec in decoders {
            for d in dec.iter_mut() {
                out.push(&mut d.up.weight);
                out.push(&mut d.up.bias);
                for c in &mut d.convs {
                    out.extend(block(c));
                }
                out.push(&mut d.head.weight);
                out.push(&mut d.head.bias);
            }
        }
        out
    }

    /// Records every parameter as a gradient-tracking leaf.
    pub fn bind(&self, tape: &mut Tape<T>) -> Vec<Var> {
        self.parameters()
            .into_iter()
            .map(|(_, t)| tape.leaf(t.clone()))
            .collect()
    }

    /// Binds the parameters and runs the training forward pass.
    /// Returns the outputs and the parameter leaves in [`Self::parameters`] order.
    pub fn forward_train(&self, tape: &mut Tape<T>, x: &Tensor<T>, attention: Attention) -> Result<(ForwardOutput, Vec<Var>)> {
        let params = self.bind(tape);
        let out = self.forward_train_with(tape, &params, x, attention)?;
        Ok((out, params))
    }

    /// Training forward pass over caller-supplied parameter handles, which
    /// must follow [`Self::parameters`] order.
    pub fn forward_train_with(&self, tape: &mut Tape<T>, params: &[Var], x: &Tensor<T>, attention: Attention) -> Result<ForwardOutput> {
        self.run(tape, params, x, attention, false)
    }

    /// Full-resolution segmentation probabilities only. The boundary decoder
    /// still runs because its output gates the segmentation path.
    pub fn forward_infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let params: Vec<Var> = self
            .parameters()
            .into_iter()
            .map(|(_, t)| tape.constant(t.clone()))
            .collect();
        let out = self.run(&mut tape, &params, x, Attention::Learned, true)?;
        Ok(tape.value(out.seg_probs[0]).clone())
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        let s = x.shape();
        let f = self.config.downsampling_factor();
        if s.channels() != 1 || s.batch() == 0 || s.spatial().iter().any(|&d| d == 0 || d % f != 0) {
            return Err(Error::shape(format!(
                "network input {s}: expected (N, 1, D, H, W) with spatial dims divisible by {f}"
            )));
        }
        Ok(())
    }

    fn run(&self, tape: &mut Tape<T>, params: &[Var], x: &Tensor<T>, attention: Attention, infer: bool) -> Result<ForwardOutput> {
        self.check_input(x)?;
        let expected = self.parameters().len();
        if params.len() != expected {
            return Err(Error::shape(format!("{} parameter handles for {expected} parameters", params.len())));
        }
        let mut it = params.iter().copied();
        let bound = BoundNet::bind(self, &mut it);
        let slope = T::of(LEAKY_RELU_SLOPE);

        let block = |tape: &mut Tape<T>, b: &BoundBlock, x: Var| -> Result<Var> {
            let y = b.conv.apply(tape, x)?;
            let y = b.norm.apply(tape, y)?;
            Ok(tape.leaky_relu(y, slope))
        };

        let mut h = tape.constant(x.clone());
        let mut skips = Vec::with_capacity(self.config.levels);
        for level in &bound.encoder {
            if let Some(d) = &level.down {
                h = block(tape, d, h)?;
            }
            for c in &level.convs {
                h = block(tape, c, h)?;
            }
            skips.push(h);
        }
        let bottom = h;
        let scales = self.config.scales();

        let decode_step = |tape: &mut Tape<T>, d: &BoundDecoder, below: Var, s: usize, gate: Option<Var>| -> Result<(Var, Var, Var)> {
            let up = d.up.apply(tape, below)?;
            let fused = match gate {
                Some(p) => enhance(tape, up, p)?,
                None => up,
            };
            let mut y = tape.concat_channels(fused, skips[s])?;
            for c in &d.convs {
                y = block(tape, c, y)?;
            }
            Ok((up, fused, y))
        };

        let mut boundary_probs = vec![None; scales];
        if let Some(dec) = &bound.boundary_decoder {
            let mut below = bottom;
            for s in (0..scales).rev() {
                let (_, _, y) = decode_step(tape, &dec[s], below, s, None)?;
                let logits = dec[s].head.apply(tape, y)?;
                boundary_probs[s] = Some(tape.softmax_channels(logits)?);
                below = y;
            }
        }

        let mut seg_probs = vec![None; scales];
        let mut upsampled = vec![None; scales];
        let mut enhanced = vec![None; scales];
        let mut below = bottom;
        for s in (0..scales).rev() {
            let d = &bound.seg_decoder[s];
            let gate = match attention {
                Attention::Disabled => None,
                Attention::Learned => match boundary_probs[s] {
                    Some(p) => Some(tape.slice_channels(p, 1, 1)?),
                    None => None,
                },
                Attention::Fixed(p) => {
                    let shape = tape.shape(skips[s]).with_channels(1);
                    Some(tape.constant(Tensor::full(shape, T::of(p))))
                }
            };
            let (up, fused, y) = decode_step(tape, d, below, s, gate)?;
            upsampled[s] = Some(up);
            enhanced[s] = Some(fused);
            if !infer || s == 0 {
                let logits = d.head.apply(tape, y)?;
                seg_probs[s] = Some(tape.softmax_channels(logits)?);
            }
            below = y;
        }

        Ok(ForwardOutput {
            seg_probs: seg_probs.into_iter().flatten().collect(),
            boundary_probs: boundary_probs.into_iter().flatten().collect(),
            upsampled: upsampled.into_iter().flatten().collect(),
            enhanced: enhanced.into_iter().flatten().collect(),
        })
    }
}

struct BoundBlock {
    conv: BoundConv,
    norm: BoundNorm,
}

struct BoundLevel {
    down: Option<BoundBlock>,
    convs: Vec<BoundBlock>,
}

struct BoundDecoder {
    up: BoundConv,
    convs: Vec<BoundBlock>,
    head: BoundConv,
}

struct BoundNet {
    encoder: Vec<BoundLevel>,
    boundary_decoder: Option<Vec<BoundDecoder>>,
    seg_decoder: Vec<BoundDecoder>,
}

impl BoundNet {
    /// Consumes handles in exactly the order of `BaNet::visit`.
    fn bind<T: Real>(net: &BaNet<T>, it: &mut impl Iterator<Item = Var>) -> Self {
        let mut next = || it.next().expect("parameter count checked");
        let conv = |p: &ConvParams<T>, next: &mut dyn FnMut() -> Var| BoundConv {
            weight: next(),
            bias: next(),
            geometry: p.geometry,
            transposed: p.transposed,
        };
        let block = |b: &ConvBlock<T>, next: &mut dyn FnMut() -> Var| BoundBlock {
            conv: BoundConv {
                weight: next(),
                bias: next(),
                geometry: b.conv.geometry,
                transposed: false,
            },
            norm: BoundNorm {
                gamma: next(),
                beta: next(),
                eps: b.norm.eps,
            },
        };
        let encoder = net
            .encoder
            .iter()
            .map(|e| BoundLevel {
                down: e.down.as_ref().map(|d| block(d, &mut next)),
                convs: e.convs.iter().map(|c| block(c, &mut next)).collect(),
            })
            .collect();
        let decoder = |dec: &[DecoderBlock<T>], next: &mut dyn FnMut() -> Var| -> Vec<BoundDecoder> {
            dec.iter()
                .map(|d| BoundDecoder {
                    up: conv(&d.up, next),
                    convs: d.convs.iter().map(|c| block(c, next)).collect(),
                    head: conv(&d.head, next),
                })
                .collect()
        };
        let boundary_decoder = net.boundary_decoder.as_ref().map(|d| decoder(d, &mut next));
        let seg_decoder = decoder(&net.seg_decoder, &mut next);
        BoundNet {
            encoder,
            boundary_decoder,
            seg_decoder,
        }
    }
}
