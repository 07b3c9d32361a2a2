//! Minimal neural-network engine with exact backpropagation.
//!
//! Supports the three model families used by the trainers: a shallow MLP,
//! a deeper MLP, and a small two-stage convolutional network. Parameters
//! live in one flat `f64` vector so that gradients, clipping, and
//! aggregation all operate on plain slices.

mod engine;
pub mod checkpoint;

pub use engine::{forward, loss_and_grad, statistics_pass, surrogate_and_grad, GroupSurrogate};

use ndarray::{Array2, Array4};
use rand::distr::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fairness::FairnessSpec;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Sigmoid,
    Softmax,
    Identity,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerSpec {
    Dense {
        input: usize,
        output: usize,
        activation: Activation,
    },
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        activation: Activation,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputShape {
    Flat(usize),
    Image {
        channels: usize,
        height: usize,
        width: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchitectureSpec {
    pub input: InputShape,
    pub layers: Vec<LayerSpec>,
}

/// Per-layer slice offsets into the flat parameter vector.
#[derive(Debug, Clone, Copy)]
pub(crate) struct LayerOffsets {
    pub w_start: usize,
    pub w_len: usize,
    pub b_start: usize,
    pub b_len: usize,
}

/// Shape of the data flowing between layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum DataShape {
    Flat(usize),
    Image {
        channels: usize,
        height: usize,
        width: usize,
    },
}

impl DataShape {
    pub fn flat_len(&self) -> usize {
        match *self {
            DataShape::Flat(d) => d,
            DataShape::Image {
                channels,
                height,
                width,
            } => channels * height * width,
        }
    }
}

impl ArchitectureSpec {
    /// One hidden layer of 10 ReLU units and a sigmoid output.
    pub fn shallow_mlp(input_dim: usize) -> Self {
        ArchitectureSpec {
            input: InputShape::Flat(input_dim),
            layers: vec![
                LayerSpec::Dense {
                    input: input_dim,
                    output: 10,
                    activation: Activation::Relu,
                },
                LayerSpec::Dense {
                    input: 10,
                    output: 1,
                    activation: Activation::Sigmoid,
                },
            ],
        }
    }

    /// Hidden layers of 16, 8, and 8 ReLU units and a sigmoid output.
    pub fn deep_mlp(input_dim: usize) -> Self {
        let dims = [(input_dim, 16), (16, 8), (8, 8)];
        let mut layers: Vec<LayerSpec> = dims
            .iter()
            .map(|&(i, o)| LayerSpec::Dense {
                input: i,
                output: o,
                activation: Activation::Relu,
            })
            .collect();
        layers.push(LayerSpec::Dense {
            input: 8,
            output: 1,
            activation: Activation::Sigmoid,
        });
        ArchitectureSpec {
            input: InputShape::Flat(input_dim),
            layers,
        }
    }

    /// Two 5x5 stride-2 convolutions (32 and 64 filters), a dense ReLU layer
    /// of 100 units, and a 10-way softmax head. Input is 28x28.
    pub fn small_cnn(in_channels: usize) -> Self {
        // 28 -> (28-5)/2+1 = 12 -> (12-5)/2+1 = 4; flatten = 64*4*4 = 1024.
        ArchitectureSpec {
            input: InputShape::Image {
                channels: in_channels,
                height: 28,
                width: 28,
            },
            layers: vec![
                LayerSpec::Conv2d {
                    in_channels,
                    out_channels: 32,
                    kernel: 5,
                    stride: 2,
                    activation: Activation::Relu,
                },
                LayerSpec::Conv2d {
                    in_channels: 32,
                    out_channels: 64,
                    kernel: 5,
                    stride: 2,
                    activation: Activation::Relu,
                },
                LayerSpec::Dense {
                    input: 1024,
                    output: 100,
                    activation: Activation::Relu,
                },
                LayerSpec::Dense {
                    input: 100,
                    output: 10,
                    activation: Activation::Softmax,
                },
            ],
        }
    }

    /// Shapes seen by each layer, starting with the input shape.
    /// Errors if consecutive layers are incompatible.
    pub(crate) fn data_shapes(&self) -> Result<Vec<DataShape>> {
        let mut shapes = Vec::with_capacity(self.layers.len() + 1);
        let mut current = match self.input {
            InputShape::Flat(d) => DataShape::Flat(d),
            InputShape::Image {
                channels,
                height,
                width,
            } => DataShape::Image {
                channels,
                height,
                width,
            },
        };
        shapes.push(current);
        for (idx, layer) in self.layers.iter().enumerate() {
            current = match *layer {
                LayerSpec::Dense { input, output, .. } => {
                    if current.flat_len() != input {
                        return Err(Error::InvalidArchitecture(format!(
                            "layer {idx}: dense expects input {input}, got {}",
                            current.flat_len()
                        )));
                    }
                    if output == 0 {
                        return Err(Error::InvalidArchitecture(format!(
                            "layer {idx}: dense output must be positive"
                        )));
                    }
                    DataShape::Flat(output)
                }
                LayerSpec::Conv2d {
                    in_channels,
                    out_channels,
                    kernel,
                    stride,
                    ..
                } => {
                    let (c, h, w) = match current {
                        DataShape::Image {
                            channels,
                            height,
                            width,
                        } => (channels, height, width),
                        DataShape::Flat(_) => {
                            return Err(Error::InvalidArchitecture(format!(
                                "layer {idx}: conv2d requires image input"
                            )))
                        }
                    };
                    if c != in_channels {
                        return Err(Error::InvalidArchitecture(format!(
                            "layer {idx}: conv2d expects {in_channels} channels, got {c}"
                        )));
                    }
                    if kernel == 0 || stride == 0 || out_channels == 0 {
                        return Err(Error::InvalidArchitecture(format!(
                            "layer {idx}: conv2d kernel/stride/channels must be positive"
                        )));
                    }
                    if h < kernel || w < kernel {
                        return Err(Error::InvalidArchitecture(format!(
                            "layer {idx}: {h}x{w} input smaller than {kernel}x{kernel} kernel"
                        )));
                    }
                    DataShape::Image {
                        channels: out_channels,
                        height: (h - kernel) / stride + 1,
                        width: (w - kernel) / stride + 1,
                    }
                }
            };
            shapes.push(current);
        }
        Ok(shapes)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::InvalidArchitecture("no layers".into()));
        }
        let shapes = self.data_shapes()?;
        let out = shapes.last().unwrap().flat_len();
        for (idx, layer) in self.layers.iter().enumerate() {
            let act = layer_activation(layer);
            let last = idx == self.layers.len() - 1;
            match act {
                Activation::Softmax if !last => {
                    return Err(Error::InvalidArchitecture(format!(
                        "layer {idx}: softmax only allowed on the final layer"
                    )))
                }
                _ => {}
            }
        }
        match layer_activation(self.layers.last().unwrap()) {
            Activation::Sigmoid if out == 1 => Ok(()),
            Activation::Softmax if out >= 2 => Ok(()),
            Activation::Sigmoid => Err(Error::InvalidArchitecture(
                "sigmoid head requires a single output unit".into(),
            )),
            other => Err(Error::InvalidArchitecture(format!(
                "final activation must be sigmoid (binary) or softmax (multi-class), got {other:?}"
            ))),
        }
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| match *l {
                LayerSpec::Dense { input, output, .. } => input * output + output,
                LayerSpec::Conv2d {
                    in_channels,
                    out_channels,
                    kernel,
                    ..
                } => out_channels * in_channels * kernel * kernel + out_channels,
            })
            .sum()
    }

    /// Number of output units of the final layer.
    pub fn output_dim(&self) -> usize {
        match *self.layers.last().expect("validated arch") {
            LayerSpec::Dense { output, .. } => output,
            LayerSpec::Conv2d { .. } => unreachable!("validated arch ends with dense"),
        }
    }

    pub fn is_binary(&self) -> bool {
        self.output_dim() == 1
    }

    pub(crate) fn layer_offsets(&self) -> Vec<LayerOffsets> {
        let mut offsets = Vec::with_capacity(self.layers.len());
        let mut at = 0usize;
        for layer in &self.layers {
            let (w_len, b_len) = match *layer {
                LayerSpec::Dense { input, output, .. } => (input * output, output),
                LayerSpec::Conv2d {
                    in_channels,
                    out_channels,
                    kernel,
                    ..
                } => (out_channels * in_channels * kernel * kernel, out_channels),
            };
            offsets.push(LayerOffsets {
                w_start: at,
                w_len,
                b_start: at + w_len,
                b_len,
            });
            at += w_len + b_len;
        }
        offsets
    }
}

pub(crate) fn layer_activation(layer: &LayerSpec) -> Activation {
    match *layer {
        LayerSpec::Dense { activation, .. } => activation,
        LayerSpec::Conv2d { activation, .. } => activation,
    }
}

/// Model parameters: a flat weight vector plus its architecture.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub arch: ArchitectureSpec,
    pub weights: Vec<f64>,
}

impl ModelParams {
    pub fn param_count(&self) -> usize {
        self.weights.len()
    }
}

/// Deterministic fan-based uniform initialization: weights drawn from
/// U[-s, s] with s = sqrt(6 / (fan_in + fan_out)), biases zero.
pub fn init_params(arch: &ArchitectureSpec, seed: u64) -> Result<ModelParams> {
    arch.validate()?;
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut weights = vec![0.0; arch.param_count()];
    let offsets = arch.layer_offsets();
    for (layer, off) in arch.layers.iter().zip(&offsets) {
        let (fan_in, fan_out) = match *layer {
            LayerSpec::Dense { input, output, .. } => (input, output),
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
                ..
            } => (in_channels * kernel * kernel, out_channels * kernel * kernel),
        };
        let s = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let dist = Uniform::new_inclusive(-s, s)
            .map_err(|e| Error::InvalidArchitecture(format!("init range: {e}")))?;
        for w in &mut weights[off.w_start..off.w_start + off.w_len] {
            *w = dist.sample(&mut rng);
        }
        // biases stay zero
    }
    Ok(ModelParams {
        arch: arch.clone(),
        weights,
    })
}

/// A batch of examples: features plus integer labels and group ids.
#[derive(Debug, Clone)]
pub struct Batch {
    pub features: Features,
    pub labels: Vec<u32>,
    pub groups: Vec<u32>,
}

#[derive(Debug, Clone)]
pub enum Features {
    /// (n, input_dim)
    Tabular(Array2<f64>),
    /// (n, channels, height, width)
    Images(Array4<f64>),
}

impl Batch {
    pub fn len(&self) -> usize {
        match &self.features {
            Features::Tabular(x) => x.nrows(),
            Features::Images(x) => x.shape()[0],
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn validate(&self, arch: &ArchitectureSpec) -> Result<()> {
        let n = self.len();
        if self.labels.len() != n || self.groups.len() != n {
            return Err(Error::DimensionMismatch(format!(
                "batch features={n}, labels={}, groups={}",
                self.labels.len(),
                self.groups.len()
            )));
        }
        match (&self.features, arch.input) {
            (Features::Tabular(x), InputShape::Flat(d)) => {
                if x.ncols() != d {
                    return Err(Error::DimensionMismatch(format!(
                        "batch has {} features, model expects {d}",
                        x.ncols()
                    )));
                }
            }
            (Features::Images(x), InputShape::Image { channels, height, width }) => {
                let s = x.shape();
                if s[1] != channels || s[2] != height || s[3] != width {
                    return Err(Error::DimensionMismatch(format!(
                        "batch images {:?}, model expects ({channels},{height},{width})",
                        &s[1..]
                    )));
                }
            }
            _ => {
                return Err(Error::DimensionMismatch(
                    "feature kind does not match model input shape".into(),
                ))
            }
        }
        let classes = if arch.is_binary() { 2 } else { arch.output_dim() as u32 as usize };
        if let Some(&l) = self.labels.iter().find(|&&l| l as usize >= classes) {
            return Err(Error::DimensionMismatch(format!(
                "label {l} out of range for {classes} classes"
            )));
        }
        Ok(())
    }

    /// Gather a row subset, preserving order.
    pub fn select(&self, rows: &[usize]) -> Batch {
        let features = match &self.features {
            Features::Tabular(x) => {
                let mut out = Array2::zeros((rows.len(), x.ncols()));
                for (i, &r) in rows.iter().enumerate() {
                    out.row_mut(i).assign(&x.row(r));
                }
                Features::Tabular(out)
            }
            Features::Images(x) => {
                let s = x.shape();
                let mut out = Array4::zeros((rows.len(), s[1], s[2], s[3]));
                for (i, &r) in rows.iter().enumerate() {
                    out.index_axis_mut(ndarray::Axis(0), i)
                        .assign(&x.index_axis(ndarray::Axis(0), r));
                }
                Features::Images(out)
            }
        };
        Batch {
            features,
            labels: rows.iter().map(|&r| self.labels[r]).collect(),
            groups: rows.iter().map(|&r| self.groups[r]).collect(),
        }
    }
}

/// Rows of the fairness conditioning subset d' for `spec`, i.e. all rows for
/// accuracy parity and the positive-label rows for FNR parity.
pub fn conditioning_rows(batch: &Batch, spec: &FairnessSpec) -> Vec<usize> {
    (0..batch.len())
        .filter(|&i| match spec.subset_rule() {
            crate::fairness::SubsetRule::All => true,
            crate::fairness::SubsetRule::PositivesOnly => batch.labels[i] == 1,
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shallow_mlp_parameter_count() {
        // 13*10 + 10 + 10*1 + 1 = 151
        let arch = ArchitectureSpec::shallow_mlp(13);
        assert_eq!(arch.param_count(), 151);
    }

    #[test]
    fn deep_mlp_parameter_count_formula() {
        for d in [5usize, 13, 104] {
            let arch = ArchitectureSpec::deep_mlp(d);
            let expect = 16 * d + 16 + 16 * 8 + 8 + 8 * 8 + 8 + 8 + 1;
            assert_eq!(arch.param_count(), expect);
        }
    }

    #[test]
    fn cnn_shapes_and_count() {
        let arch = ArchitectureSpec::small_cnn(3);
        arch.validate().unwrap();
        let shapes = arch.data_shapes().unwrap();
        assert_eq!(
            shapes[2],
            DataShape::Image {
                channels: 64,
                height: 4,
                width: 4
            }
        );
        let expect = 32 * 3 * 25 + 32 + 64 * 32 * 25 + 64 + 1024 * 100 + 100 + 100 * 10 + 10;
        assert_eq!(arch.param_count(), expect);
    }

    #[test]
    fn init_is_deterministic_and_biases_zero() {
        let arch = ArchitectureSpec::shallow_mlp(13);
        let a = init_params(&arch, 7).unwrap();
        let b = init_params(&arch, 7).unwrap();
        assert_eq!(a.weights, b.weights);
        let c = init_params(&arch, 8).unwrap();
        assert_ne!(a.weights, c.weights);
        // biases of first layer at offset 130..140
        let off = arch.layer_offsets();
        for &bias in &a.weights[off[0].b_start..off[0].b_start + off[0].b_len] {
            assert_eq!(bias, 0.0);
        }
        let s = (6.0 / 23.0f64).sqrt();
        for &w in &a.weights[..130] {
            assert!(w.abs() <= s);
        }
    }

    #[test]
    fn invalid_architectures_rejected() {
        let arch = ArchitectureSpec {
            input: InputShape::Flat(4),
            layers: vec![LayerSpec::Dense {
                input: 5,
                output: 1,
                activation: Activation::Sigmoid,
            }],
        };
        assert!(arch.validate().is_err());

        let arch = ArchitectureSpec {
            input: InputShape::Flat(4),
            layers: vec![LayerSpec::Dense {
                input: 4,
                output: 3,
                activation: Activation::Relu,
            }],
        };
        assert!(arch.validate().is_err(), "relu head rejected");

        let arch = ArchitectureSpec {
            input: InputShape::Flat(4),
            layers: vec![LayerSpec::Conv2d {
                in_channels: 1,
                out_channels: 2,
                kernel: 3,
                stride: 1,
                activation: Activation::Relu,
            }],
        };
        assert!(arch.validate().is_err(), "conv on flat input rejected");
    }
}
