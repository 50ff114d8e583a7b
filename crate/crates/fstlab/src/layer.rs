//! Layer zoo: dense, relu, 3x3 same-padding conv, 2x2 max pool, flatten.
//!
//! Images are laid out NHWC. Every layer implements an explicit backward
//! pass; gradients are exact, which the finite-difference tests verify.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum ParamKind {
    Weight,
    Bias,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "camelCase", deny_unknown_fields)]
pub enum LayerSpec {
    #[serde(rename_all = "camelCase")]
    Dense {
        input: usize,
        output: usize,
        #[serde(default = "default_true")]
        bias: bool,
    },
    Relu,
    /// 3x3 kernel, stride 1, zero same-padding.
    #[serde(rename_all = "camelCase")]
    Conv2d { in_channels: usize, out_channels: usize },
    MaxPool2x2,
    Flatten,
}

fn default_true() -> bool {
    true
}

impl LayerSpec {
    /// Per-sample output shape given the per-sample input shape.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        match self {
            LayerSpec::Dense { input: w_in, output, .. } => {
                if input != [*w_in] {
                    return Err(Error::config(format!(
                        "dense({w_in}->{output}) got input shape {input:?}"
                    )));
                }
                Ok(vec![*output])
            }
            LayerSpec::Relu => Ok(input.to_vec()),
            LayerSpec::Conv2d { in_channels, out_channels } => {
                if input.len() != 3 || input[2] != *in_channels {
                    return Err(Error::config(format!(
                        "conv2d({in_channels}->{out_channels}) wants [h,w,{in_channels}], got {input:?}"
                    )));
                }
                Ok(vec![input[0], input[1], *out_channels])
            }
            LayerSpec::MaxPool2x2 => {
                if input.len() != 3 || input[0] % 2 != 0 || input[1] % 2 != 0 {
                    return Err(Error::config(format!(
                        "maxPool2x2 wants [h,w,c] with even h and w, got {input:?}"
                    )));
                }
                Ok(vec![input[0] / 2, input[1] / 2, input[2]])
            }
            LayerSpec::Flatten => Ok(vec![input.iter().product()]),
        }
    }

    /// Shapes of this layer's parameters, in registry order.
    pub fn param_shapes(&self) -> Vec<(ParamKind, Vec<usize>)> {
        match self {
            LayerSpec::Dense { input, output, bias } => {
                let mut v = vec![(ParamKind::Weight, vec![*input, *output])];
                if *bias {
                    v.push((ParamKind::Bias, vec![*output]));
                }
                v
            }
            LayerSpec::Conv2d { in_channels, out_channels } => vec![
                (ParamKind::Weight, vec![3, 3, *in_channels, *out_channels]),
                (ParamKind::Bias, vec![*out_channels]),
            ],
            _ => vec![],
        }
    }

    /// Fan-in for Kaiming-style initialization, for layers with weights.
    pub fn fan_in(&self) -> Option<usize> {
        match self {
            LayerSpec::Dense { input, .. } => Some(*input),
            LayerSpec::Conv2d { in_channels, .. } => Some(9 * in_channels),
            _ => None,
        }
    }

    pub fn describe(&self) -> String {
        match self {
            LayerSpec::Dense { input, output, bias } => {
                format!("dense({input}->{output}{})", if *bias { "" } else { ", no bias" })
            }
            LayerSpec::Relu => "relu".into(),
            LayerSpec::Conv2d { in_channels, out_channels } => {
                format!("conv2d({in_channels}->{out_channels})")
            }
            LayerSpec::MaxPool2x2 => "maxPool2x2".into(),
            LayerSpec::Flatten => "flatten".into(),
        }
    }
}

/// Activations a layer must remember to run its backward pass.
#[derive(Debug, Clone)]
pub(crate) struct LayerCache {
    pub input: Tensor,
    /// Max pool only: winning flat index inside each sample slab, one per
    /// output element.
    pub pool_argmax: Option<Vec<usize>>,
}

/// Run one layer forward. With `keep_cache` the returned cache supports
/// [`backward_layer`]; without it only the output is produced.
pub(crate) fn forward_layer(
    spec: &LayerSpec,
    params: &[Tensor],
    input: &Tensor,
    keep_cache: bool,
) -> Result<(Tensor, Option<LayerCache>)> {
    let sample_shape = &input.shape()[1..];
    spec.output_shape(sample_shape).map_err(|e| match e {
        Error::Config { message } => Error::input(format!("batch does not fit layer: {message}")),
        other => other,
    })?;
    let (output, argmax) = match spec {
        LayerSpec::Dense { bias, .. } => {
            let mut out = input.matmul(&params[0]);
            if *bias {
                let b = params[1].data();
                let width = b.len();
                for row in 0..out.shape()[0] {
                    let start = row * width;
                    for (o, &bv) in out.data_mut()[start..start + width].iter_mut().zip(b) {
                        *o += bv;
                    }
                }
            }
            (out, None)
        }
        LayerSpec::Relu => {
            let mut out = input.clone();
            for x in out.data_mut() {
                if *x < 0.0 {
                    *x = 0.0;
                }
            }
            (out, None)
        }
        LayerSpec::Conv2d { in_channels, out_channels } => {
            (conv2d_forward(input, &params[0], &params[1], *in_channels, *out_channels), None)
        }
        LayerSpec::MaxPool2x2 => {
            let (out, argmax) = maxpool_forward(input);
            (out, Some(argmax))
        }
        LayerSpec::Flatten => {
            let batch = input.shape()[0];
            let width: usize = sample_shape.iter().product();
            (input.reshape(&[batch, width])?, None)
        }
    };
    let cache = keep_cache.then(|| LayerCache { input: input.clone(), pool_argmax: argmax });
    Ok((output, cache))
}

/// Gradients of one layer: (parameter gradients in registry order, input gradient).
pub(crate) fn backward_layer(
    spec: &LayerSpec,
    params: &[Tensor],
    cache: &LayerCache,
    d_out: &Tensor,
) -> (Vec<Tensor>, Tensor) {
    match spec {
        LayerSpec::Dense { bias, .. } => {
            let d_weight = cache.input.matmul_tn(d_out);
            let d_input = d_out.matmul_nt(&params[0]);
            let mut grads = vec![d_weight];
            if *bias {
                let width = d_out.shape()[1];
                let mut d_bias = Tensor::zeros(&[width]);
                for row in 0..d_out.shape()[0] {
                    for (g, &d) in d_bias.data_mut().iter_mut().zip(d_out.row(row)) {
                        *g += d;
                    }
                }
                grads.push(d_bias);
            }
            (grads, d_input)
        }
        LayerSpec::Relu => {
            // Subgradient at the kink: derivative taken as 0 at exactly 0.
            let mut d_in = d_out.clone();
            for (d, &x) in d_in.data_mut().iter_mut().zip(cache.input.data()) {
                if x <= 0.0 {
                    *d = 0.0;
                }
            }
            (vec![], d_in)
        }
        LayerSpec::Conv2d { in_channels, out_channels } => {
            conv2d_backward(&cache.input, &params[0], d_out, *in_channels, *out_channels)
        }
        LayerSpec::MaxPool2x2 => {
            let argmax = cache.pool_argmax.as_ref().expect("pool cache");
            let mut d_in = Tensor::zeros(cache.input.shape());
            let slab = cache.input.len() / cache.input.shape()[0];
            let out_per_sample = d_out.len() / d_out.shape()[0];
            for b in 0..d_out.shape()[0] {
                for o in 0..out_per_sample {
                    let win = argmax[b * out_per_sample + o];
                    d_in.data_mut()[b * slab + win] += d_out.data()[b * out_per_sample + o];
                }
            }
            (vec![], d_in)
        }
        LayerSpec::Flatten => {
            let d_in = d_out.reshape(cache.input.shape()).expect("flatten backward shape");
            (vec![], d_in)
        }
    }
}

fn conv2d_forward(input: &Tensor, weight: &Tensor, bias: &Tensor, cin: usize, cout: usize) -> Tensor {
    let (b, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    let mut out = Tensor::zeros(&[b, h, w, cout]);
    let inp = input.data();
    let wt = weight.data();
    let bz = bias.data();
    let od = out.data_mut();
    for s in 0..b {
        for y in 0..h {
            for x in 0..w {
                let o_base = ((s * h + y) * w + x) * cout;
                od[o_base..o_base + cout].copy_from_slice(bz);
                for dy in 0..3usize {
                    let iy = (y + dy).wrapping_sub(1);
                    if iy >= h {
                        continue;
                    }
                    for dx in 0..3usize {
                        let ix = (x + dx).wrapping_sub(1);
                        if ix >= w {
                            continue;
                        }
                        let i_base = ((s * h + iy) * w + ix) * cin;
                        let w_base = (dy * 3 + dx) * cin * cout;
                        for ci in 0..cin {
                            let v = inp[i_base + ci];
                            let w_row = &wt[w_base + ci * cout..w_base + (ci + 1) * cout];
                            for (o, &wv) in od[o_base..o_base + cout].iter_mut().zip(w_row) {
                                *o += v * wv;
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

fn conv2d_backward(
    input: &Tensor,
    weight: &Tensor,
    d_out: &Tensor,
    cin: usize,
    cout: usize,
) -> (Vec<Tensor>, Tensor) {
    let (b, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    let mut d_weight = Tensor::zeros(weight.shape());
    let mut d_bias = Tensor::zeros(&[cout]);
    let mut d_input = Tensor::zeros(input.shape());
    let inp = input.data();
    let wt = weight.data();
    let dod = d_out.data();
    for s in 0..b {
        for y in 0..h {
            for x in 0..w {
                let o_base = ((s * h + y) * w + x) * cout;
                let g = &dod[o_base..o_base + cout];
                for (db, &gv) in d_bias.data_mut().iter_mut().zip(g) {
                    *db += gv;
                }
                for dy in 0..3usize {
                    let iy = (y + dy).wrapping_sub(1);
                    if iy >= h {
                        continue;
                    }
                    for dx in 0..3usize {
                        let ix = (x + dx).wrapping_sub(1);
                        if ix >= w {
                            continue;
                        }
                        let i_base = ((s * h + iy) * w + ix) * cin;
                        let w_base = (dy * 3 + dx) * cin * cout;
                        for ci in 0..cin {
                            let v = inp[i_base + ci];
                            let w_row = &wt[w_base + ci * cout..w_base + (ci + 1) * cout];
                            let dw_row =
                                &mut d_weight.data_mut()[w_base + ci * cout..w_base + (ci + 1) * cout];
                            let mut acc = 0.0;
                            for ((dw, &wv), &gv) in dw_row.iter_mut().zip(w_row).zip(g) {
                                *dw += v * gv;
                                acc += wv * gv;
                            }
                            d_input.data_mut()[i_base + ci] += acc;
                        }
                    }
                }
            }
        }
    }
    (vec![d_weight, d_bias], d_input)
}

fn maxpool_forward(input: &Tensor) -> (Tensor, Vec<usize>) {
    let (b, h, w, c) = (input.shape()[0], input.shape()[1], input.shape()[2], input.shape()[3]);
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Tensor::zeros(&[b, oh, ow, c]);
    let mut argmax = vec![0usize; b * oh * ow * c];
    let inp = input.data();
    let slab = h * w * c;
    for s in 0..b {
        for oy in 0..oh {
            for ox in 0..ow {
                for ch in 0..c {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_idx = 0usize;
                    // Ties resolve to the first cell in scan order.
                    for dy in 0..2usize {
                        for dx in 0..2usize {
                            let idx = ((2 * oy + dy) * w + (2 * ox + dx)) * c + ch;
                            let v = inp[s * slab + idx];
                            if v > best {
                                best = v;
                                best_idx = idx;
                            }
                        }
                    }
                    let o_idx = ((s * oh + oy) * ow + ox) * c + ch;
                    out.data_mut()[o_idx] = best;
                    argmax[o_idx] = best_idx;
                }
            }
        }
    }
    (out, argmax)
}
