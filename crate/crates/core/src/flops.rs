//! Analytic FLOP counts from layer shapes. A multiply-add counts as two
//! FLOPs; a training step is costed as three forward passes (forward plus
//! the two backward products).

use crate::error::Result;
use crate::model::{ArchSpec, Layout};
use crate::nn::{BlockSpec, LayerDesc};

pub const TRAIN_STEP_FACTOR: u64 = 3;

pub fn layer_flops(layer: &LayerDesc, input: &[usize]) -> Result<u64> {
    let out = layer.output_shape(input)?;
    let numel = |s: &[usize]| s.iter().product::<usize>() as u64;
    Ok(match *layer {
        LayerDesc::Conv { in_channels, kernel, bias, .. } => {
            let spatial = numel(&out[1..]);
            let macs = (in_channels * kernel * kernel) as u64 * out[0] as u64 * spatial;
            2 * macs + if bias { numel(&out) } else { 0 }
        }
        LayerDesc::BatchNorm { .. } => 2 * numel(input),
        LayerDesc::Relu => numel(input),
        LayerDesc::MaxPool { kernel, .. } => numel(&out) * (kernel * kernel) as u64,
        LayerDesc::GlobalAvgPool => numel(input),
        LayerDesc::Linear { in_features, out_features, bias } => {
            2 * (in_features * out_features) as u64 + if bias { out_features as u64 } else { 0 }
        }
    })
}

pub fn block_flops(block: &BlockSpec, input: &[usize]) -> Result<u64> {
    let mut shape = input.to_vec();
    let mut total = 0;
    for l in &block.layers {
        total += layer_flops(l, &shape)?;
        shape = l.output_shape(&shape)?;
    }
    Ok(total)
}

/// Per-sample forward cost of a model with the given layout.
pub fn forward_flops(arch: &ArchSpec, layout: Layout) -> Result<u64> {
    let trunk = block_flops(&arch.trunk, &arch.input)?;
    let feat = arch.trunk_output()?;
    let branch = block_flops(&arch.branch, &feat)?;
    let k = layout.branches as u64;
    let trunks = if layout.shared_trunk { 1 } else { k };
    let mut total = trunks * trunk + k * branch;
    if layout.gated {
        let f = feat[0] as u64;
        let pool = feat.iter().product::<usize>() as u64;
        // pool + fc + bn + relu + softmax
        total += pool + 2 * f * k + 2 * k + k + 3 * k;
    }
    if k > 1 {
        // gate-weighted sum of branch logits
        total += 2 * k * arch.num_classes as u64;
    }
    Ok(total)
}

/// Per-sample cost of one training step.
pub fn train_step_flops(arch: &ArchSpec, layout: Layout) -> Result<u64> {
    Ok(TRAIN_STEP_FACTOR * forward_flops(arch, layout)?)
}
