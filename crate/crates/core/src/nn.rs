//! Layer primitives and block composition.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::float::Float;
use crate::graph::{BnState, Graph, Mode, Var};
use crate::kernels::ConvGeometry;
use crate::params::{BufferId, ParamId, ParamStore};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// One layer in a [`BlockSpec`].
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerDesc {
    Conv {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        bias: bool,
    },
    BatchNorm {
        channels: usize,
    },
    Relu,
    MaxPool {
        kernel: usize,
        stride: usize,
    },
    GlobalAvgPool,
    Linear {
        in_features: usize,
        out_features: usize,
        bias: bool,
    },
}

/// Ordered layer descriptors. Shapes exclude the batch axis: `[C, H, W]` for
/// feature maps, `[F]` for vectors.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockSpec {
    pub layers: Vec<LayerDesc>,
}

impl LayerDesc {
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        match *self {
            LayerDesc::Conv { in_channels, out_channels, kernel, stride, padding, .. } => {
                let [c, h, w] = spatial(input, "conv")?;
                if c != in_channels {
                    return Err(Error::config(format!("conv expects {in_channels} input channels, got {c}")));
                }
                let oh = ConvGeometry::out_extent(h, kernel, stride, padding);
                let ow = ConvGeometry::out_extent(w, kernel, stride, padding);
                match (oh, ow) {
                    (Some(oh), Some(ow)) => Ok(vec![out_channels, oh, ow]),
                    _ => Err(Error::config(format!("conv k={kernel} s={stride} p={padding} on {h}x{w} leaves no output"))),
                }
            }
            LayerDesc::BatchNorm { channels } => {
                if input.first() != Some(&channels) || (input.len() != 1 && input.len() != 3) {
                    return Err(Error::config(format!("batch_norm over {channels} channels on input {input:?}")));
                }
                Ok(input.to_vec())
            }
            LayerDesc::Relu => Ok(input.to_vec()),
            LayerDesc::MaxPool { kernel, stride } => {
                let [c, h, w] = spatial(input, "max_pool")?;
                if kernel == 0 || stride == 0 || h < kernel || w < kernel {
                    return Err(Error::config(format!("max_pool k={kernel} on {h}x{w}")));
                }
                Ok(vec![c, (h - kernel) / stride + 1, (w - kernel) / stride + 1])
            }
            LayerDesc::GlobalAvgPool => {
                let [c, _, _] = spatial(input, "global_avg_pool")?;
                Ok(vec![c])
            }
            LayerDesc::Linear { in_features, out_features, .. } => {
                if input != [in_features] {
                    return Err(Error::config(format!("linear expects [{in_features}], got {input:?}")));
                }
                Ok(vec![out_features])
            }
        }
    }
}

fn spatial(input: &[usize], what: &str) -> Result<[usize; 3]> {
    match *input {
        [c, h, w] => Ok([c, h, w]),
        _ => Err(Error::config(format!("{what} needs a [C, H, W] input, got {input:?}"))),
    }
}

impl BlockSpec {
    pub fn new(layers: Vec<LayerDesc>) -> Self {
        BlockSpec { layers }
    }

    /// Output shape for a per-sample input shape; every intermediate extent
    /// must be positive.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        self.layers.iter().try_fold(input.to_vec(), |shape, l| l.output_shape(&shape))
    }

    /// `conv(k=3, pad=1) -> bn -> relu` followed by an optional 2x2 max pool.
    pub fn conv_bn_relu(in_channels: usize, out_channels: usize, pool: bool) -> Vec<LayerDesc> {
        let mut v = vec![
            LayerDesc::Conv { in_channels, out_channels, kernel: 3, stride: 1, padding: 1, bias: false },
            LayerDesc::BatchNorm { channels: out_channels },
            LayerDesc::Relu,
        ];
        if pool {
            v.push(LayerDesc::MaxPool { kernel: 2, stride: 2 });
        }
        v
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormConfig {
    pub eps: f64,
    /// Weight kept on the old running statistic per update.
    pub momentum: f64,
}

impl Default for NormConfig {
    fn default() -> Self {
        NormConfig { eps: 1e-5, momentum: 0.9 }
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub stride: usize,
    pub padding: usize,
}

#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: BufferId,
    pub running_var: BufferId,
    pub norm: NormConfig,
}

#[derive(Clone, Debug)]
pub struct Linear {
    /// `in x out`
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

#[derive(Clone, Debug)]
pub enum Layer {
    Conv(Conv2d),
    BatchNorm(BatchNorm),
    Relu,
    MaxPool { kernel: usize, stride: usize },
    GlobalAvgPool,
    Linear(Linear),
}

/// He-normal weights: zero mean, std `sqrt(2 / fan_in)`.
fn he_normal<F: Float>(shape: &[usize], fan_in: usize, rng: &mut Rng) -> Tensor<F> {
    let std = (2.0 / fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| F::cast(rng.normal() * std)).collect();
    Tensor::from_parts(shape.to_vec(), data)
}

impl BatchNorm {
    pub fn build<F: Float>(prefix: &str, channels: usize, norm: NormConfig, store: &mut ParamStore<F>) -> Result<Self> {
        Ok(BatchNorm {
            gamma: store.add_param(format!("{prefix}.gamma"), Tensor::ones(&[channels]))?,
            beta: store.add_param(format!("{prefix}.beta"), Tensor::zeros(&[channels]))?,
            running_mean: store.add_buffer(format!("{prefix}.running_mean"), Tensor::zeros(&[channels]))?,
            running_var: store.add_buffer(format!("{prefix}.running_var"), Tensor::ones(&[channels]))?,
            norm,
        })
    }

    pub fn forward<F: Float>(&self, g: &mut Graph<F>, store: &ParamStore<F>, x: Var, mode: Mode) -> Result<Var> {
        let gamma = g.param(store, self.gamma)?;
        let beta = g.param(store, self.beta)?;
        let state = BnState {
            running_mean: store.buffer(self.running_mean),
            running_var: store.buffer(self.running_var),
            ids: (self.running_mean, self.running_var),
            eps: F::cast(self.norm.eps),
            momentum: F::cast(self.norm.momentum),
        };
        g.batch_norm(x, gamma, beta, state, mode)
    }
}

impl Layer {
    /// Registers parameters under `prefix` and initialises them from a stream
    /// keyed by each parameter's full name.
    pub fn build<F: Float>(desc: &LayerDesc, prefix: &str, norm: NormConfig, store: &mut ParamStore<F>, rng: &Rng) -> Result<Self> {
        Ok(match *desc {
            LayerDesc::Conv { in_channels, out_channels, kernel, stride, padding, bias } => {
                let name = format!("{prefix}.weight");
                let shape = [out_channels, in_channels, kernel, kernel];
                let w = he_normal(&shape, in_channels * kernel * kernel, &mut rng.derive_named(&name));
                let weight = store.add_param(name, w)?;
                let bias = if bias { Some(store.add_param(format!("{prefix}.bias"), Tensor::zeros(&[out_channels]))?) } else { None };
                Layer::Conv(Conv2d { weight, bias, stride, padding })
            }
            LayerDesc::BatchNorm { channels } => Layer::BatchNorm(BatchNorm::build(prefix, channels, norm, store)?),
            LayerDesc::Relu => Layer::Relu,
            LayerDesc::MaxPool { kernel, stride } => Layer::MaxPool { kernel, stride },
            LayerDesc::GlobalAvgPool => Layer::GlobalAvgPool,
            LayerDesc::Linear { in_features, out_features, bias } => {
                let name = format!("{prefix}.weight");
                let w = he_normal(&[in_features, out_features], in_features, &mut rng.derive_named(&name));
                let weight = store.add_param(name, w)?;
                let bias = if bias { Some(store.add_param(format!("{prefix}.bias"), Tensor::zeros(&[out_features]))?) } else { None };
                Layer::Linear(Linear { weight, bias })
            }
        })
    }

    pub fn forward<F: Float>(&self, g: &mut Graph<F>, store: &ParamStore<F>, x: Var, mode: Mode) -> Result<Var> {
        match self {
            Layer::Conv(c) => {
                let w = g.param(store, c.weight)?;
                let b = c.bias.map(|b| g.param(store, b)).transpose()?;
                g.conv2d(x, w, b, c.stride, c.padding)
            }
            Layer::BatchNorm(bn) => bn.forward(g, store, x, mode),
            Layer::Relu => g.relu(x),
            Layer::MaxPool { kernel, stride } => g.max_pool2d(x, *kernel, *stride),
            Layer::GlobalAvgPool => g.global_avg_pool(x),
            Layer::Linear(l) => {
                let w = g.param(store, l.weight)?;
                let y = g.matmul(x, w)?;
                match l.bias {
                    Some(b) => {
                        let b = g.param(store, b)?;
                        g.add(y, b)
                    }
                    None => Ok(y),
                }
            }
        }
    }
}

/// A sequential stack of layers instantiated from a [`BlockSpec`].
#[derive(Clone, Debug)]
pub struct Stack {
    pub layers: Vec<Layer>,
}

impl Stack {
    pub fn build<F: Float>(spec: &BlockSpec, prefix: &str, norm: NormConfig, store: &mut ParamStore<F>, rng: &Rng) -> Result<Self> {
        let layers = spec
            .layers
            .iter()
            .enumerate()
            .map(|(i, d)| Layer::build(d, &format!("{prefix}.{i}"), norm, store, rng))
            .collect::<Result<_>>()?;
        Ok(Stack { layers })
    }

    pub fn forward<F: Float>(&self, g: &mut Graph<F>, store: &ParamStore<F>, x: Var, mode: Mode) -> Result<Var> {
        self.layers.iter().try_fold(x, |h, l| l.forward(g, store, h, mode))
    }
}
