//! Batched forward and backward passes.
//!
//! Convolution activations are kept channel-major over the batch,
//! `[channels][batch][side][side]`, so each convolution is one GEMM between
//! its `[filters][C·k·k]` weights and the batch's im2col matrix
//! `[C·k·k][batch·out_side²]`.

use super::arch::{ConvSpec, LayerParams, NetworkParams};
use super::scalar::{gemm, MatRef, Scalar};
use super::tensor::Tensor;
use super::NnError;

/// Deliberate backward-pass corruption, used to show that gradient checking
/// catches wrong derivatives. Layer indices count convolutions first.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GradientFault {
    /// Negate the weight gradient of a layer.
    FlipWeightGrad(usize),
    /// Negate the gradient a layer passes to its input.
    FlipInputGrad(usize),
}

/// Inputs for a batch of `n` samples: maps `[n][side²]` and extra features
/// `[n][extra]`.
#[derive(Debug, Clone, Copy)]
pub struct BatchInput<'a, T> {
    pub maps: &'a [T],
    pub extra: &'a [T],
    pub n: usize,
}

struct ConvCache<T> {
    cols: Vec<T>,
    /// Post-ReLU output, `[filters][n·out²]`.
    out: Vec<T>,
}

struct DenseCache<T> {
    /// Layer input, `[n][in]`.
    input: Vec<T>,
    /// Layer output (post-ReLU except for the last layer), `[n][out]`.
    out: Vec<T>,
}

pub(crate) struct ForwardPass<T> {
    conv: Vec<ConvCache<T>>,
    dense: Vec<DenseCache<T>>,
    n: usize,
}

impl<T: Scalar> ForwardPass<T> {
    /// Network outputs, `[n][outputs]`.
    pub fn output(&self) -> &[T] {
        &self.dense.last().expect("at least one dense layer").out
    }
}

fn relu_inplace<T: Scalar>(v: &mut [T]) {
    for x in v {
        if *x < T::zero() {
            *x = T::zero();
        }
    }
}

/// Output positions `o` whose input `o·stride + offset` lies in `[0, side)`.
fn valid_range(offset: isize, stride: usize, side: usize, out_side: usize) -> (usize, usize) {
    let s = stride as isize;
    let lo = if offset >= 0 { 0 } else { (-offset + s - 1) / s };
    let hi = ((side as isize - offset + s - 1) / s).clamp(0, out_side as isize);
    (lo as usize, (hi as usize).max(lo as usize))
}

/// im2col for a channel-major batch. Output rows are `(c, ky, kx)`, columns
/// `(sample, oy, ox)`.
fn im2col<T: Scalar>(input: &[T], channels: usize, n: usize, side: usize, spec: &ConvSpec, out_side: usize) -> Vec<T> {
    let k = spec.kernel;
    let pad = spec.padding() as isize;
    let stride = spec.stride;
    let plane = out_side * out_side;
    let cols_n = n * plane;
    let mut cols = vec![T::zero(); channels * k * k * cols_n];
    for c in 0..channels {
        for ky in 0..k {
            let (oy0, oy1) = valid_range(ky as isize - pad, stride, side, out_side);
            for kx in 0..k {
                let (ox0, ox1) = valid_range(kx as isize - pad, stride, side, out_side);
                let row = (c * k + ky) * k + kx;
                let dst_row = &mut cols[row * cols_n..(row + 1) * cols_n];
                for b in 0..n {
                    let src = &input[(c * n + b) * side * side..(c * n + b + 1) * side * side];
                    let dst = &mut dst_row[b * plane..(b + 1) * plane];
                    for oy in oy0..oy1 {
                        let iy = oy * stride + ky - pad as usize;
                        let src_line = &src[iy * side..(iy + 1) * side];
                        let dst_line = &mut dst[oy * out_side..(oy + 1) * out_side];
                        for ox in ox0..ox1 {
                            dst_line[ox] = src_line[ox * stride + kx - pad as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatter-adds column gradients back onto the input.
fn col2im<T: Scalar>(cols: &[T], channels: usize, n: usize, side: usize, spec: &ConvSpec, out_side: usize) -> Vec<T> {
    let k = spec.kernel;
    let pad = spec.padding() as isize;
    let stride = spec.stride;
    let plane = out_side * out_side;
    let cols_n = n * plane;
    let mut grad = vec![T::zero(); channels * n * side * side];
    for c in 0..channels {
        for ky in 0..k {
            let (oy0, oy1) = valid_range(ky as isize - pad, stride, side, out_side);
            for kx in 0..k {
                let (ox0, ox1) = valid_range(kx as isize - pad, stride, side, out_side);
                let row = (c * k + ky) * k + kx;
                let src_row = &cols[row * cols_n..(row + 1) * cols_n];
                for b in 0..n {
                    let dst = &mut grad[(c * n + b) * side * side..(c * n + b + 1) * side * side];
                    let src = &src_row[b * plane..(b + 1) * plane];
                    for oy in oy0..oy1 {
                        let iy = oy * stride + ky - pad as usize;
                        let dst_line = &mut dst[iy * side..(iy + 1) * side];
                        let src_line = &src[oy * out_side..(oy + 1) * out_side];
                        for ox in ox0..ox1 {
                            dst_line[ox * stride + kx - pad as usize] += src_line[ox];
                        }
                    }
                }
            }
        }
    }
    grad
}

fn add_row_bias<T: Scalar>(z: &mut [T], bias: &[T], row_len: usize) {
    for (row, &b) in z.chunks_exact_mut(row_len).zip(bias) {
        for v in row {
            *v += b;
        }
    }
}

pub(crate) fn check_input<T: Scalar>(params: &NetworkParams<T>, input: &BatchInput<'_, T>) -> Result<(), NnError> {
    let arch = params.architecture();
    if input.maps.len() != input.n * arch.input_cells() {
        return Err(NnError::Shape {
            layer: "input".into(),
            detail: format!(
                "{} map values for {} samples of {} cells",
                input.maps.len(),
                input.n,
                arch.input_cells()
            ),
        });
    }
    if input.extra.len() != input.n * arch.extra_features {
        return Err(NnError::Shape {
            layer: "input".into(),
            detail: format!(
                "{} extra features for {} samples of {}",
                input.extra.len(),
                input.n,
                arch.extra_features
            ),
        });
    }
    Ok(())
}

pub(crate) fn forward_pass<T: Scalar>(params: &NetworkParams<T>, input: &BatchInput<'_, T>) -> Result<ForwardPass<T>, NnError> {
    check_input(params, input)?;
    let arch = params.architecture();
    let n = input.n;
    let layers = params.layers();

    // Single input channel: [n][side²] is already channel-major.
    let mut act: Vec<T> = input.maps.to_vec();
    let mut conv_caches = Vec::with_capacity(arch.conv.len());
    for ((spec, (channels, side, out_side)), layer) in
        arch.conv.iter().zip(arch.conv_geometry()).zip(layers)
    {
        let cols = im2col(&act, channels, n, side, spec, out_side);
        let kk = channels * spec.kernel * spec.kernel;
        let cols_n = n * out_side * out_side;
        let mut out = vec![T::zero(); spec.filters * cols_n];
        gemm(
            MatRef::row_major(layer.weights.data(), spec.filters, kk),
            MatRef::row_major(&cols, kk, cols_n),
            T::zero(),
            &mut out,
        );
        add_row_bias(&mut out, layer.bias.data(), cols_n);
        relu_inplace(&mut out);
        act = out.clone();
        conv_caches.push(ConvCache { cols, out });
    }

    // Flatten per sample as (channel, y, x), then append extra features.
    let flat = arch.flat_features();
    let extra = arch.extra_features;
    let width = flat + extra;
    let mut x = vec![T::zero(); n * width];
    if arch.conv.is_empty() {
        for b in 0..n {
            x[b * width..b * width + flat].copy_from_slice(&act[b * flat..(b + 1) * flat]);
        }
    } else {
        let channels = arch.conv.last().unwrap().filters;
        let plane = flat / channels;
        for c in 0..channels {
            for b in 0..n {
                let src = &act[(c * n + b) * plane..(c * n + b + 1) * plane];
                x[b * width + c * plane..b * width + (c + 1) * plane].copy_from_slice(src);
            }
        }
    }
    for b in 0..n {
        x[b * width + flat..(b + 1) * width].copy_from_slice(&input.extra[b * extra..(b + 1) * extra]);
    }

    let dense_layers = &layers[arch.conv.len()..];
    let mut dense_caches = Vec::with_capacity(dense_layers.len());
    let mut in_width = width;
    for (i, (layer, &out_width)) in dense_layers.iter().zip(&arch.dense).enumerate() {
        let mut out = vec![T::zero(); n * out_width];
        for row in out.chunks_exact_mut(out_width) {
            row.copy_from_slice(layer.bias.data());
        }
        gemm(
            MatRef::row_major(&x, n, in_width),
            MatRef::row_major(layer.weights.data(), in_width, out_width),
            T::one(),
            &mut out,
        );
        if i + 1 < dense_layers.len() {
            relu_inplace(&mut out);
        }
        let next = out.clone();
        dense_caches.push(DenseCache { input: x, out });
        x = next;
        in_width = out_width;
    }

    Ok(ForwardPass {
        conv: conv_caches,
        dense: dense_caches,
        n,
    })
}

/// Gradients for every layer, same shapes as the parameters.
pub(crate) type Gradients<T> = Vec<LayerParams<T>>;

pub(crate) fn zero_gradients<T: Scalar>(params: &NetworkParams<T>) -> Gradients<T> {
    params
        .layers()
        .iter()
        .map(|l| LayerParams {
            weights: Tensor::zeros(l.weights.shape()),
            bias: Tensor::zeros(l.bias.shape()),
        })
        .collect()
}

fn flip<T: Scalar>(v: &mut [T]) {
    for x in v {
        *x = -*x;
    }
}

/// Backpropagates `d_output` (`[n][outputs]`, the loss gradient w.r.t. the
/// network outputs) and returns parameter gradients.
pub(crate) fn backward_pass<T: Scalar>(
    params: &NetworkParams<T>,
    pass: &ForwardPass<T>,
    d_output: Vec<T>,
    fault: Option<GradientFault>,
) -> Gradients<T> {
    let arch = params.architecture();
    let layers = params.layers();
    let n = pass.n;
    let n_conv = arch.conv.len();
    let mut grads = zero_gradients(params);

    let flat = arch.flat_features();
    let mut in_widths: Vec<usize> = vec![flat + arch.extra_features];
    in_widths.extend(arch.dense.iter().copied());

    let mut delta = d_output;
    for i in (0..arch.dense.len()).rev() {
        let layer_index = n_conv + i;
        let cache = &pass.dense[i];
        let (in_w, out_w) = (in_widths[i], arch.dense[i]);
        if i + 1 < arch.dense.len() {
            for (d, &a) in delta.iter_mut().zip(&cache.out) {
                if a <= T::zero() {
                    *d = T::zero();
                }
            }
        }
        let g = &mut grads[layer_index];
        gemm(
            MatRef::transposed(&cache.input, in_w, n),
            MatRef::row_major(&delta, n, out_w),
            T::zero(),
            g.weights.data_mut(),
        );
        let gb = g.bias.data_mut();
        for row in delta.chunks_exact(out_w) {
            for (b, &d) in gb.iter_mut().zip(row) {
                *b += d;
            }
        }
        if fault == Some(GradientFault::FlipWeightGrad(layer_index)) {
            flip(g.weights.data_mut());
        }
        if i == 0 && n_conv == 0 {
            break;
        }
        let mut d_in = vec![T::zero(); n * in_w];
        gemm(
            MatRef::row_major(&delta, n, out_w),
            MatRef::transposed(layers[layer_index].weights.data(), out_w, in_w),
            T::zero(),
            &mut d_in,
        );
        if fault == Some(GradientFault::FlipInputGrad(layer_index)) {
            flip(&mut d_in);
        }
        delta = d_in;
    }
    if n_conv == 0 {
        return grads;
    }

    // Un-flatten the dense input gradient (dropping the extra features).
    let width = flat + arch.extra_features;
    let geometry = arch.conv_geometry();
    let channels = arch.conv[n_conv - 1].filters;
    let plane = flat / channels;
    let mut d_act = vec![T::zero(); channels * n * plane];
    for c in 0..channels {
        for b in 0..n {
            d_act[(c * n + b) * plane..(c * n + b + 1) * plane]
                .copy_from_slice(&delta[b * width + c * plane..b * width + (c + 1) * plane]);
        }
    }

    for l in (0..n_conv).rev() {
        let spec = &arch.conv[l];
        let (in_channels, side, out_side) = geometry[l];
        let cache = &pass.conv[l];
        let cols_n = n * out_side * out_side;
        let kk = in_channels * spec.kernel * spec.kernel;
        for (d, &a) in d_act.iter_mut().zip(&cache.out) {
            if a <= T::zero() {
                *d = T::zero();
            }
        }
        let g = &mut grads[l];
        gemm(
            MatRef::row_major(&d_act, spec.filters, cols_n),
            MatRef::transposed(&cache.cols, cols_n, kk),
            T::zero(),
            g.weights.data_mut(),
        );
        for (b, row) in g.bias.data_mut().iter_mut().zip(d_act.chunks_exact(cols_n)) {
            *b = row.iter().copied().sum();
        }
        if fault == Some(GradientFault::FlipWeightGrad(l)) {
            flip(g.weights.data_mut());
        }
        if l == 0 {
            break;
        }
        let mut d_cols = vec![T::zero(); kk * cols_n];
        gemm(
            MatRef::transposed(layers[l].weights.data(), kk, spec.filters),
            MatRef::row_major(&d_act, spec.filters, cols_n),
            T::zero(),
            &mut d_cols,
        );
        let mut d_in = col2im(&d_cols, in_channels, n, side, spec, out_side);
        if fault == Some(GradientFault::FlipInputGrad(l)) {
            flip(&mut d_in);
        }
        d_act = d_in;
    }
    grads
}

/// Sum of squared residuals over a batch and its gradient w.r.t. the outputs,
/// scaled so the loss is `Σ e² / normalizer`.
pub(crate) fn squared_error_grad<T: Scalar>(output: &[T], targets: &[T], normalizer: T) -> (T, Vec<T>) {
    let two = T::lit(2.0);
    let mut sse = T::zero();
    let grad = output
        .iter()
        .zip(targets)
        .map(|(&y, &t)| {
            let e = y - t;
            sse += e * e;
            two * e / normalizer
        })
        .collect();
    (sse, grad)
}
