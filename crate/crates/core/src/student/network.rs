use std::ops::Range;

use rand::Rng;

use super::arch::{Architecture, CONV_LAYERS};
use super::layers::{
    concat_forward, conv2d_backward, conv2d_forward, fc_backward, fc_forward, maxpool2_backward,
    maxpool2_forward, relu_backward, relu_forward, resize_backward, resize_forward,
};
use super::{Real, Tensor};
use crate::error::{Error, Result};
use crate::imagery::{ChannelStack, SoftMask};

#[derive(Clone, Debug, PartialEq)]
pub struct ConvLayer<T = f32> {
    /// `[c_out, c_in, k, k]`
    pub weight: Tensor<T>,
    /// `[c_out]`
    pub bias: Tensor<T>,
}

/// All student weights plus the descriptor they were built for. Gradients
/// use the same type.
#[derive(Clone, Debug, PartialEq)]
pub struct NetworkParams<T = f32> {
    pub arch: Architecture,
    pub conv: Vec<ConvLayer<T>>,
    /// `[out_len, fc_inputs]`
    pub fc_weight: Tensor<T>,
    /// `[out_len]`
    pub fc_bias: Tensor<T>,
}

impl<T: Real> NetworkParams<T> {
    pub fn zeros(arch: &Architecture) -> Result<Self> {
        arch.validate()?;
        let mut tensors = Self::expected_dims(arch).into_iter().map(|d| Tensor::zeros(&d));
        let mut next = || tensors.next().expect("one tensor per expected extent");
        let conv = (0..CONV_LAYERS)
            .map(|_| ConvLayer {
                weight: next(),
                bias: next(),
            })
            .collect();
        Ok(Self {
            arch: arch.clone(),
            conv,
            fc_weight: next(),
            fc_bias: next(),
        })
    }

    /// Weights uniform in `±sqrt(6 / (fan_in + fan_out))`, biases zero.
    pub fn init<R: Rng>(arch: &Architecture, rng: &mut R) -> Result<Self> {
        let mut p = Self::zeros(arch)?;
        let kk = arch.kernel * arch.kernel;
        for (l, layer) in p.conv.iter_mut().enumerate() {
            let (i, o) = arch.conv_io(l);
            glorot(layer.weight.data_mut(), i * kk, o * kk, rng);
        }
        glorot(p.fc_weight.data_mut(), arch.fc_inputs(), arch.output_len(), rng);
        Ok(p)
    }

    pub fn tensor_names(&self) -> Vec<String> {
        let mut names = Vec::with_capacity(2 * CONV_LAYERS + 2);
        for l in 1..=CONV_LAYERS {
            names.push(format!("conv{l}.weight"));
            names.push(format!("conv{l}.bias"));
        }
        names.push("fc.weight".into());
        names.push("fc.bias".into());
        names
    }

    /// Tensors in canonical order, paired with their names.
    pub fn tensors(&self) -> Vec<(String, &Tensor<T>)> {
        let refs = self
            .conv
            .iter()
            .flat_map(|c| [&c.weight, &c.bias])
            .chain([&self.fc_weight, &self.fc_bias]);
        self.tensor_names().into_iter().zip(refs).collect()
    }

    /// Mutable tensors in the order of [`NetworkParams::tensors`].
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        self.conv
            .iter_mut()
            .flat_map(|c| [&mut c.weight, &mut c.bias])
            .chain([&mut self.fc_weight, &mut self.fc_bias])
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn cast<U: Real>(&self) -> NetworkParams<U> {
        NetworkParams {
            arch: self.arch.clone(),
            conv: self
                .conv
                .iter()
                .map(|c| ConvLayer {
                    weight: c.weight.cast(),
                    bias: c.bias.cast(),
                })
                .collect(),
            fc_weight: self.fc_weight.cast(),
            fc_bias: self.fc_bias.cast(),
        }
    }

    /// Tensor extents implied by a descriptor, in canonical order.
    pub fn expected_dims(arch: &Architecture) -> Vec<Vec<usize>> {
        let k = arch.kernel;
        let mut dims = Vec::with_capacity(2 * CONV_LAYERS + 2);
        for l in 0..CONV_LAYERS {
            let (i, o) = arch.conv_io(l);
            dims.push(vec![o, i, k, k]);
            dims.push(vec![o]);
        }
        dims.push(vec![arch.output_len(), arch.fc_inputs()]);
        dims.push(vec![arch.output_len()]);
        dims
    }

    /// Checks every tensor shape against the descriptor.
    pub fn validate(&self) -> Result<()> {
        self.arch.validate()?;
        if self.conv.len() != CONV_LAYERS {
            return Err(Error::Config(format!(
                "expected {CONV_LAYERS} conv layers, found {}",
                self.conv.len()
            )));
        }
        for ((name, a), b) in self.tensors().into_iter().zip(Self::expected_dims(&self.arch)) {
            if a.dims() != b {
                return Err(Error::Config(format!(
                    "{name} has extents {:?}, descriptor needs {b:?}",
                    a.dims()
                )));
            }
        }
        Ok(())
    }

    pub fn first_non_finite(&self) -> Option<(String, usize)> {
        self.tensors()
            .into_iter()
            .find_map(|(n, t)| t.first_non_finite().map(|i| (n, i)))
    }
}

fn glorot<T: Real, R: Rng>(w: &mut [T], fan_in: usize, fan_out: usize, rng: &mut R) {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    for v in w {
        *v = T::lift(rng.random_range(-a..a));
    }
}

/// Cached activations of one forward pass over a batch.
#[derive(Clone, Debug)]
pub struct Activations<T = f32> {
    pub batch: usize,
    pub input: Vec<T>,
    /// Post-ReLU outputs of the seven conv layers.
    pub conv: Vec<Vec<T>>,
    pub pooled: [Vec<T>; 2],
    argmax: [Vec<u32>; 2],
    /// FC input: `[conv7, input resized, conv4 resized]` per example.
    pub features: Vec<T>,
    /// `[batch, out_len]`, unbounded.
    pub output: Vec<T>,
}

/// Column ranges of the FC input holding conv7 and the resized skip
/// features; the resized input in between needs no gradient.
fn trainable_feature_ranges(arch: &Architecture) -> [Range<usize>; 2] {
    let o2 = arch.output_len();
    let c7 = arch.widths[CONV_LAYERS - 1] * o2;
    let skip_start = c7 + arch.in_channels * o2;
    [0..c7, skip_start..arch.fc_inputs()]
}

pub fn forward<T: Real>(params: &NetworkParams<T>, input: &Tensor<T>) -> Result<Activations<T>> {
    let arch = &params.arch;
    params.validate()?;
    let s = arch.input_size;
    let dims = input.dims();
    if dims.len() != 4 || dims[0] == 0 || dims[1..] != [arch.in_channels, s, s] {
        return Err(Error::Config(format!(
            "input extents {dims:?} do not match the network input [N, {}, {s}, {s}]",
            arch.in_channels
        )));
    }
    let n = dims[0];
    let k = arch.kernel;
    let side = |l| arch.conv_side(l);
    let conv_len = |l: usize| arch.widths[l] * side(l) * side(l);
    let in_len = arch.in_channels * s * s;
    let pool_len = [
        arch.widths[1] * (s / 2) * (s / 2),
        arch.widths[3] * (s / 4) * (s / 4),
    ];
    let mut acts = Activations {
        batch: n,
        input: input.data().to_vec(),
        conv: (0..CONV_LAYERS).map(|l| vec![T::zero(); n * conv_len(l)]).collect(),
        pooled: [vec![T::zero(); n * pool_len[0]], vec![T::zero(); n * pool_len[1]]],
        argmax: [vec![0; n * pool_len[0]], vec![0; n * pool_len[1]]],
        features: vec![T::zero(); n * arch.fc_inputs()],
        output: vec![T::zero(); n * arch.output_len()],
    };
    let o = arch.output_side();
    for b in 0..n {
        for l in 0..CONV_LAYERS {
            let (c_in, c_out) = arch.conv_io(l);
            let sl = side(l);
            let (prev, cur) = acts.conv.split_at_mut(l);
            let src: &[T] = match l {
                0 => &acts.input[b * in_len..(b + 1) * in_len],
                2 => &acts.pooled[0][b * pool_len[0]..(b + 1) * pool_len[0]],
                4 => &acts.pooled[1][b * pool_len[1]..(b + 1) * pool_len[1]],
                _ => &prev[l - 1][b * conv_len(l - 1)..(b + 1) * conv_len(l - 1)],
            };
            let dst = &mut cur[0][b * conv_len(l)..(b + 1) * conv_len(l)];
            let layer = &params.conv[l];
            conv2d_forward(src, c_in, sl, sl, layer.weight.data(), layer.bias.data(), c_out, k, dst);
            relu_forward(dst);
            if l == 1 || l == 3 {
                let p = l / 2;
                maxpool2_forward(
                    dst,
                    c_out,
                    sl,
                    sl,
                    &mut acts.pooled[p][b * pool_len[p]..(b + 1) * pool_len[p]],
                    &mut acts.argmax[p][b * pool_len[p]..(b + 1) * pool_len[p]],
                );
            }
        }
        let mut input_small = vec![T::zero(); arch.in_channels * o * o];
        resize_forward(
            &acts.input[b * in_len..(b + 1) * in_len],
            arch.in_channels,
            s,
            s,
            o,
            o,
            &mut input_small,
        );
        let mut skip_small = vec![T::zero(); arch.skip_channels() * o * o];
        let skip = arch.skip_from - 1;
        resize_forward(
            &acts.conv[skip][b * conv_len(skip)..(b + 1) * conv_len(skip)],
            arch.skip_channels(),
            s / 2,
            s / 2,
            o,
            o,
            &mut skip_small,
        );
        let last = &acts.conv[CONV_LAYERS - 1][b * conv_len(CONV_LAYERS - 1)..(b + 1) * conv_len(CONV_LAYERS - 1)];
        let f = arch.fc_inputs();
        concat_forward(&[last, &input_small, &skip_small], &mut acts.features[b * f..(b + 1) * f]);
    }
    fc_forward(
        params.fc_weight.data(),
        params.fc_bias.data(),
        arch.fc_inputs(),
        arch.output_len(),
        &acts.features,
        &mut acts.output,
    );
    Ok(acts)
}

/// Exact gradients of the loss with respect to every parameter, given the
/// gradient of the loss with respect to the network output.
pub fn backward<T: Real>(
    params: &NetworkParams<T>,
    acts: &Activations<T>,
    grad_output: &[T],
) -> Result<NetworkParams<T>> {
    let mut grads = NetworkParams::<T>::zeros(&params.arch)?;
    backward_into(params, acts, grad_output, &mut grads)?;
    Ok(grads)
}

/// Same as [`backward`], writing into a caller-owned buffer so training
/// loops do not fault in a fresh 200 MB weight gradient every step.
/// Previous contents of `grads` are overwritten.
pub fn backward_into<T: Real>(
    params: &NetworkParams<T>,
    acts: &Activations<T>,
    grad_output: &[T],
    grads: &mut NetworkParams<T>,
) -> Result<()> {
    let arch = &params.arch;
    let n = acts.batch;
    if grad_output.len() != n * arch.output_len() {
        return Err(Error::argument(format!(
            "output gradient has {} values, expected {}",
            grad_output.len(),
            n * arch.output_len()
        )));
    }
    if grads.arch != *arch {
        return Err(Error::argument("gradient buffer has a different architecture"));
    }
    for t in grads.tensors_mut() {
        t.fill(T::zero());
    }
    let f = arch.fc_inputs();
    let ranges = trainable_feature_ranges(arch);
    let mut gfeat = vec![T::zero(); n * f];
    fc_backward(
        params.fc_weight.data(),
        f,
        arch.output_len(),
        &acts.features,
        grad_output,
        grads.fc_weight.data_mut(),
        grads.fc_bias.data_mut(),
        Some((&mut gfeat, &ranges)),
    );

    let s = arch.input_size;
    let o = arch.output_side();
    let k = arch.kernel;
    let side = |l| arch.conv_side(l);
    let conv_len = |l: usize| arch.widths[l] * side(l) * side(l);
    let in_len = arch.in_channels * s * s;
    let pool_len = [
        arch.widths[1] * (s / 2) * (s / 2),
        arch.widths[3] * (s / 4) * (s / 4),
    ];
    for b in 0..n {
        let fb = &gfeat[b * f..(b + 1) * f];
        let mut g = fb[ranges[0].clone()].to_vec();
        for l in (0..CONV_LAYERS).rev() {
            let (c_in, c_out) = arch.conv_io(l);
            let sl = side(l);
            relu_backward(&acts.conv[l][b * conv_len(l)..(b + 1) * conv_len(l)], &mut g);
            let src: &[T] = match l {
                0 => &acts.input[b * in_len..(b + 1) * in_len],
                2 => &acts.pooled[0][b * pool_len[0]..(b + 1) * pool_len[0]],
                4 => &acts.pooled[1][b * pool_len[1]..(b + 1) * pool_len[1]],
                _ => &acts.conv[l - 1][b * conv_len(l - 1)..(b + 1) * conv_len(l - 1)],
            };
            let mut gin = if l > 0 { vec![T::zero(); c_in * sl * sl] } else { Vec::new() };
            let layer = &mut grads.conv[l];
            conv2d_backward(
                src,
                c_in,
                sl,
                sl,
                params.conv[l].weight.data(),
                c_out,
                k,
                &g,
                layer.weight.data_mut(),
                layer.bias.data_mut(),
                if l > 0 { Some(&mut gin) } else { None },
            );
            g = match l {
                0 => break,
                2 | 4 => {
                    let p = l / 2 - 1;
                    let mut below = vec![T::zero(); conv_len(l - 1)];
                    maxpool2_backward(
                        &gin,
                        &acts.argmax[p][b * pool_len[p]..(b + 1) * pool_len[p]],
                        &mut below,
                    );
                    if l == arch.skip_from {
                        resize_backward(
                            &fb[ranges[1].clone()],
                            arch.skip_channels(),
                            s / 2,
                            s / 2,
                            o,
                            o,
                            &mut below,
                        );
                    }
                    below
                }
                _ => gin,
            };
        }
    }
    Ok(())
}

/// Mean over the batch of the per-example sum of squared differences.
pub fn loss<T: Real>(output: &[T], targets: &[T], batch: usize) -> f64 {
    let s: f64 = output
        .iter()
        .zip(targets)
        .map(|(&y, &t)| {
            let d = y.as_f64() - t.as_f64();
            d * d
        })
        .sum();
    s / batch as f64
}

pub fn loss_grad<T: Real>(output: &[T], targets: &[T], batch: usize) -> Vec<T> {
    let c = T::lift(2.0 / batch as f64);
    output.iter().zip(targets).map(|(&y, &t)| c * (y - t)).collect()
}

/// Loss and parameter gradients for one batch. `targets` are in `[0, 1]`.
pub fn loss_and_grad<T: Real>(
    params: &NetworkParams<T>,
    input: &Tensor<T>,
    targets: &[T],
) -> Result<(f64, NetworkParams<T>)> {
    let acts = forward(params, input)?;
    if targets.len() != acts.output.len() {
        return Err(Error::argument(format!(
            "{} targets for {} outputs",
            targets.len(),
            acts.output.len()
        )));
    }
    let l = loss(&acts.output, targets, acts.batch);
    let g = loss_grad(&acts.output, targets, acts.batch);
    Ok((l, backward(params, &acts, &g)?))
}

/// Stacks channel planes into a `[N, C, S, S]` tensor.
pub fn input_tensor<T: Real>(stacks: &[&ChannelStack], arch: &Architecture) -> Result<Tensor<T>> {
    let s = arch.input_size;
    let mut data = Vec::with_capacity(stacks.len() * arch.in_channels * s * s);
    for st in stacks {
        if st.width() != s || st.height() != s || st.data().len() != arch.in_channels * s * s {
            return Err(Error::Config(format!(
                "channel stack {}x{} does not match the network input {s}x{s}",
                st.width(),
                st.height()
            )));
        }
        data.extend(st.data().iter().map(|&v| T::lift(v as f64)));
    }
    Tensor::from_vec(&[stacks.len(), arch.in_channels, s, s], data)
}

/// Targets rescaled to `[0, 1]`, concatenated over the batch.
pub fn target_tensor<T: Real>(masks: &[&SoftMask], arch: &Architecture) -> Result<Vec<T>> {
    let o = arch.output_side();
    let mut out = Vec::with_capacity(masks.len() * o * o);
    for m in masks {
        if m.width() != o || m.height() != o {
            return Err(Error::Config(format!(
                "target mask {}x{} does not match the network output {o}x{o}",
                m.width(),
                m.height()
            )));
        }
        out.extend(m.data().iter().map(|&v| T::lift(v as f64 / 255.0)));
    }
    Ok(out)
}

/// Predicted soft masks, clamped to `[0, 1]` and scaled to `0..=255`.
pub fn infer_batch(params: &NetworkParams<f32>, stacks: &[&ChannelStack]) -> Result<Vec<SoftMask>> {
    let input = input_tensor::<f32>(stacks, &params.arch)?;
    let acts = forward(params, &input)?;
    let o = params.arch.output_side();
    acts.output
        .chunks_exact(o * o)
        .map(|y| SoftMask::from_unit(o, o, y))
        .collect()
}

pub fn infer(params: &NetworkParams<f32>, stack: &ChannelStack) -> Result<SoftMask> {
    Ok(infer_batch(params, &[stack])?.remove(0))
}
