//! U-Net and Sharp U-Net construction, forward pass and parameter accounting.
//!
//! The encoder has five levels of two 3x3 conv + ReLU layers, with a 2x2 max
//! pool after each of the first four. The decoder mirrors it: four levels of
//! 2x2 up-convolution, fusion with the matching encoder map, and two 3x3
//! conv + ReLU layers, followed by a 1x1 head. Sharp U-Net differs from the
//! plain network only in the skip path, where encoder features go through a
//! frozen depthwise Laplacian before being concatenated.

mod checkpoint;
mod sharp;

pub use checkpoint::{load_checkpoint, load_checkpoint_expecting, save_checkpoint, CheckpointMeta};
pub use sharp::{sharp_block, sharpen_image, SharpKernel, SharpenMode};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::ops::Padding;
use crate::tensor::{ConvWeights, Shape, Tensor};

/// Encoder widths used by the reference U-Net.
pub const DEFAULT_WIDTHS: [usize; 5] = [32, 64, 128, 256, 512];
/// Uniformly widened variant.
pub const WIDE_WIDTHS: [usize; 5] = [35, 70, 140, 280, 560];

/// Number of 2x2 poolings; inputs must be divisible by `2^POOLS`.
const POOLS: u32 = 4;

/// How encoder features reach the decoder.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Connection {
    /// Plain skip connection.
    Plain,
    /// Frozen depthwise Laplacian before fusion.
    Sharp,
}

impl std::str::FromStr for Connection {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "plain" => Ok(Connection::Plain),
            "sharp" => Ok(Connection::Sharp),
            other => Err(Error::Config(format!(
                "unknown connection `{other}`, expected plain or sharp"
            ))),
        }
    }
}

impl std::fmt::Display for Connection {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Connection::Plain => "plain",
            Connection::Sharp => "sharp",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub in_channels: usize,
    /// 1 selects a sigmoid head, 2 or more a softmax head.
    pub num_classes: usize,
    pub widths: [usize; 5],
    pub connection: Connection,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            in_channels: 3,
            num_classes: 1,
            widths: DEFAULT_WIDTHS,
            connection: Connection::Plain,
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerKind {
    Conv3x3,
    UpConv2x2,
    Conv1x1,
}

/// Static description of one parameterized layer.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerSpec {
    pub name: String,
    pub kind: LayerKind,
    pub in_ch: usize,
    pub out_ch: usize,
}

impl LayerSpec {
    fn new(name: String, kind: LayerKind, in_ch: usize, out_ch: usize) -> Self {
        LayerSpec {
            name,
            kind,
            in_ch,
            out_ch,
        }
    }

    /// Kernel shape in the layout the corresponding op expects.
    pub fn kernel_shape(&self) -> Shape {
        match self.kind {
            LayerKind::Conv3x3 => Shape::new(self.out_ch, self.in_ch, 3, 3),
            LayerKind::UpConv2x2 => Shape::new(self.in_ch, self.out_ch, 2, 2),
            LayerKind::Conv1x1 => Shape::new(self.out_ch, self.in_ch, 1, 1),
        }
    }

    pub fn param_count(&self) -> usize {
        self.kernel_shape().numel() + self.out_ch
    }

    fn fan_in(&self) -> usize {
        let k = self.kernel_shape();
        self.in_ch * k.h * k.w
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 {
            return Err(Error::Config("in_channels must be >= 1".into()));
        }
        if self.num_classes == 0 {
            return Err(Error::Config("num_classes must be >= 1".into()));
        }
        if self.widths.contains(&0) {
            return Err(Error::Config(format!(
                "widths must be strictly positive, got {:?}",
                self.widths
            )));
        }
        Ok(())
    }

    /// Every parameterized layer in forward order.
    pub fn layer_specs(&self) -> Vec<LayerSpec> {
        let w = self.widths;
        let mut specs = Vec::with_capacity(23);
        let mut prev = self.in_channels;
        for (level, &width) in w.iter().enumerate() {
            let l = level + 1;
            specs.push(LayerSpec::new(
                format!("enc{l}.conv1"),
                LayerKind::Conv3x3,
                prev,
                width,
            ));
            specs.push(LayerSpec::new(
                format!("enc{l}.conv2"),
                LayerKind::Conv3x3,
                width,
                width,
            ));
            prev = width;
        }
        for (i, level) in (0..4).rev().enumerate() {
            let d = i + 1;
            let width = w[level];
            specs.push(LayerSpec::new(
                format!("dec{d}.up"),
                LayerKind::UpConv2x2,
                prev,
                width,
            ));
            specs.push(LayerSpec::new(
                format!("dec{d}.conv1"),
                LayerKind::Conv3x3,
                2 * width,
                width,
            ));
            specs.push(LayerSpec::new(
                format!("dec{d}.conv2"),
                LayerKind::Conv3x3,
                width,
                width,
            ));
            prev = width;
        }
        specs.push(LayerSpec::new(
            "head".into(),
            LayerKind::Conv1x1,
            prev,
            self.num_classes,
        ));
        specs
    }

    /// Trainable element count, computed from shapes alone.
    pub fn param_count(&self) -> usize {
        self.layer_specs().iter().map(LayerSpec::param_count).sum()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    pub spec: LayerSpec,
    pub weights: ConvWeights<f32>,
}

/// Instantiated network: one [`Layer`] per [`LayerSpec`], in forward order.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    config: ModelConfig,
    layers: Vec<Layer>,
}

/// Nodes of interest recorded by [`Model::forward_on_tape`].
#[derive(Clone, Debug)]
pub struct ForwardTrace {
    pub logits: Var,
    /// Concatenated (upsampled, skip) maps, deepest first.
    pub fusions: [Var; 4],
}

/// He-normal kernels, zero biases, drawn from a generator seeded by
/// `config.seed`. Initial values do not depend on the connection kind.
pub fn build_model(config: &ModelConfig) -> Result<Model> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let layers = config
        .layer_specs()
        .into_iter()
        .map(|spec| {
            let std = (2.0 / spec.fan_in() as f64).sqrt() as f32;
            let normal = Normal::new(0.0f32, std).expect("positive std");
            let shape = spec.kernel_shape();
            let data: Vec<f32> = (0..shape.numel())
                .map(|_| normal.sample(&mut rng))
                .collect();
            let kernel = Tensor::from_vec(shape, data)?;
            let bias = vec![0.0; spec.out_ch];
            let weights = match spec.kind {
                LayerKind::UpConv2x2 => ConvWeights::new_transposed(kernel, bias)?,
                _ => ConvWeights::new(kernel, bias)?,
            };
            Ok(Layer { spec, weights })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Model {
        config: config.clone(),
        layers,
    })
}

impl Model {
    /// Reassembles a model from stored weights, checking every shape.
    pub fn from_weights(config: ModelConfig, weights: Vec<ConvWeights<f32>>) -> Result<Self> {
        config.validate()?;
        let specs = config.layer_specs();
        if specs.len() != weights.len() {
            return Err(Error::ConfigMismatch(format!(
                "expected {} layers, got {}",
                specs.len(),
                weights.len()
            )));
        }
        let layers = specs
            .into_iter()
            .zip(weights)
            .map(|(spec, weights)| {
                if weights.kernel.shape() != spec.kernel_shape()
                    || weights.bias.len() != spec.out_ch
                {
                    return Err(Error::ConfigMismatch(format!(
                        "layer {} expects kernel {} and {} biases, got {} and {}",
                        spec.name,
                        spec.kernel_shape(),
                        spec.out_ch,
                        weights.kernel.shape(),
                        weights.bias.len()
                    )));
                }
                Ok(Layer { spec, weights })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Model { config, layers })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn connection(&self) -> Connection {
        self.config.connection
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    /// Sum of all trainable element counts. The sharp kernel is a constant
    /// and is not part of the count.
    pub fn count_params(&self) -> usize {
        self.layers.iter().map(|l| l.weights.numel()).sum()
    }

    /// The depthwise kernel applied on skip paths, if any.
    pub fn skip_kernel(&self) -> Option<[[f32; 3]; 3]> {
        match self.config.connection {
            Connection::Plain => None,
            Connection::Sharp => Some(SharpKernel::weights()),
        }
    }

    /// Flat mutable views of every parameter tensor: kernel then bias for
    /// each layer, in forward order.
    pub fn param_slices_mut(&mut self) -> Vec<&mut [f32]> {
        self.layers
            .iter_mut()
            .flat_map(|l| {
                let ConvWeights { kernel, bias } = &mut l.weights;
                [kernel.data_mut(), bias.as_mut_slice()]
            })
            .collect()
    }

    pub fn check_input(&self, shape: Shape) -> Result<()> {
        if shape.c != self.config.in_channels {
            return Err(Error::shape(format!(
                "model expects {} input channels, got batch {shape}",
                self.config.in_channels
            )));
        }
        let m = 1usize << POOLS;
        if !shape.h.is_multiple_of(m) || !shape.w.is_multiple_of(m) {
            return Err(Error::shape(format!(
                "input rows and cols must be divisible by {m} (four 2x2 poolings), got {}x{}",
                shape.h, shape.w
            )));
        }
        Ok(())
    }

    /// Records the full network on `tape` and returns the logits node plus
    /// the four fusion nodes.
    pub fn forward_on_tape<'p>(
        &'p self,
        tape: &mut Tape<'p, f32>,
        input: Var,
    ) -> Result<ForwardTrace> {
        self.check_input(tape.value(input).shape())?;
        let mut layers = self.layers.iter();
        let mut next = |tape: &mut Tape<'p, f32>| {
            let layer = layers.next().expect("layer list matches the architecture");
            (layer.spec.kind, tape.param(&layer.weights))
        };
        let conv_relu = |tape: &mut Tape<'p, f32>, x: Var, p| -> Result<Var> {
            let y = tape.conv2d(x, p, 1, Padding::Same)?;
            Ok(tape.relu(y))
        };

        let mut skips = Vec::with_capacity(4);
        let mut x = input;
        for level in 0..5 {
            let (_, p1) = next(tape);
            x = conv_relu(tape, x, p1)?;
            let (_, p2) = next(tape);
            x = conv_relu(tape, x, p2)?;
            if level < 4 {
                skips.push(x);
                x = tape.maxpool2x2(x)?;
            }
        }

        let mut fusions = Vec::with_capacity(4);
        for skip in skips.into_iter().rev() {
            let (_, up) = next(tape);
            let upsampled = tape.transposed_conv2d(x, up)?;
            let skip = match self.config.connection {
                Connection::Plain => skip,
                Connection::Sharp => tape.depthwise3x3(skip, SharpKernel::weights()),
            };
            let (su, ss) = (tape.value(upsampled).shape(), tape.value(skip).shape());
            if (su.n, su.h, su.w) != (ss.n, ss.h, ss.w) {
                return Err(Error::shape(format!(
                    "fusion mismatch: decoder {su} vs encoder {ss}"
                )));
            }
            let fused = tape.concat_channels(upsampled, skip)?;
            fusions.push(fused);
            let (_, p1) = next(tape);
            x = conv_relu(tape, fused, p1)?;
            let (_, p2) = next(tape);
            x = conv_relu(tape, x, p2)?;
        }
        let (kind, head) = next(tape);
        debug_assert_eq!(kind, LayerKind::Conv1x1);
        let logits = tape.conv2d(x, head, 1, Padding::Same)?;
        Ok(ForwardTrace {
            logits,
            fusions: fusions.try_into().expect("four decoder levels"),
        })
    }

    /// Inference-only forward pass returning logits `(n, num_classes, h, w)`.
    pub fn forward(&self, batch: &Tensor<f32>) -> Result<Tensor<f32>> {
        self.check_input(batch.shape())?;
        let mut tape = Tape::new();
        let x = tape.leaf(batch.clone());
        let trace = self.forward_on_tape(&mut tape, x)?;
        Ok(tape.value(trace.logits).clone())
    }

    /// Per-pixel class probabilities: sigmoid for a single-class head,
    /// channel softmax otherwise.
    pub fn predict_probs(&self, batch: &Tensor<f32>) -> Result<Tensor<f32>> {
        let logits = self.forward(batch)?;
        Ok(if self.config.num_classes == 1 {
            crate::ops::sigmoid(&logits)
        } else {
            crate::ops::softmax_channels(&logits)
        })
    }
}

/// Convenience wrapper for [`Model::count_params`].
pub fn count_params(model: &Model) -> usize {
    model.count_params()
}
