//! Layer kinds, their parameters, and the forward/backward math.
//!
//! Everything operates on batched tensors whose first axis is the sample
//! index. Backward passes are analytic; the unit tests corroborate each one
//! against central finite differences.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::tensor::Tensor;

/// Additive floor inside `ln` so a zero probability yields a large finite
/// loss instead of infinity.
pub const CE_EPSILON: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerSpec {
    Dense { inputs: usize, outputs: usize },
    /// Stride-1, valid-padding convolution with a square kernel.
    Conv2d { in_channels: usize, out_channels: usize, kernel: usize },
    /// 2x2 max pooling with stride 2; odd trailing rows/columns are dropped.
    MaxPool2d,
    Relu,
    Flatten,
    Softmax,
}

/// Weights and bias of one parameterized layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub weights: Tensor,
    pub bias: Tensor,
}

impl LayerParams {
    pub fn zeros_like(&self) -> LayerParams {
        LayerParams {
            weights: Tensor::zeros(self.weights.shape().to_vec()),
            bias: Tensor::zeros(self.bias.shape().to_vec()),
        }
    }

    pub fn num_params(&self) -> u64 {
        (self.weights.len() + self.bias.len()) as u64
    }

    pub fn bit_eq(&self, other: &LayerParams) -> bool {
        self.weights.bit_eq(&other.weights) && self.bias.bit_eq(&other.bias)
    }
}

impl LayerSpec {
    pub fn kind_name(&self) -> &'static str {
        match self {
            LayerSpec::Dense { .. } => "dense",
            LayerSpec::Conv2d { .. } => "conv2d",
            LayerSpec::MaxPool2d => "maxpool2d",
            LayerSpec::Relu => "relu",
            LayerSpec::Flatten => "flatten",
            LayerSpec::Softmax => "softmax",
        }
    }

    /// Per-sample output shape for a per-sample `input` shape.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        match *self {
            LayerSpec::Dense { inputs, outputs } => {
                if input != [inputs] {
                    return Err(Error::Structure(format!(
                        "dense layer expects a flat input of {inputs} features, got shape {input:?}"
                    )));
                }
                Ok(vec![outputs])
            }
            LayerSpec::Conv2d { in_channels, out_channels, kernel } => {
                let [c, h, w] = *require_chw(input)?;
                if c != in_channels {
                    return Err(Error::Structure(format!(
                        "conv2d expects {in_channels} input channels, got {c}"
                    )));
                }
                if h < kernel || w < kernel {
                    return Err(Error::Structure(format!(
                        "conv2d kernel {kernel}x{kernel} does not fit a {h}x{w} input"
                    )));
                }
                Ok(vec![out_channels, h - kernel + 1, w - kernel + 1])
            }
            LayerSpec::MaxPool2d => {
                let [c, h, w] = *require_chw(input)?;
                if h < 2 || w < 2 {
                    return Err(Error::Structure(format!(
                        "maxpool2d needs at least a 2x2 input, got {h}x{w}"
                    )));
                }
                Ok(vec![c, h / 2, w / 2])
            }
            LayerSpec::Relu => Ok(input.to_vec()),
            LayerSpec::Flatten => Ok(vec![input.iter().product()]),
            LayerSpec::Softmax => {
                if input.len() != 1 || input[0] == 0 {
                    return Err(Error::Structure(format!(
                        "softmax expects a non-empty vector input, got shape {input:?}"
                    )));
                }
                Ok(input.to_vec())
            }
        }
    }

    pub fn has_params(&self) -> bool {
        matches!(self, LayerSpec::Dense { .. } | LayerSpec::Conv2d { .. })
    }

    /// `(weights, bias)` shapes, for parameterized layers.
    pub fn param_shapes(&self) -> Option<(Vec<usize>, Vec<usize>)> {
        match *self {
            LayerSpec::Dense { inputs, outputs } => Some((vec![outputs, inputs], vec![outputs])),
            LayerSpec::Conv2d { in_channels, out_channels, kernel } => Some((
                vec![out_channels, in_channels, kernel, kernel],
                vec![out_channels],
            )),
            _ => None,
        }
    }

    /// Glorot-uniform weights (limit `sqrt(6 / (fan_in + fan_out))`) and zero
    /// biases. Weight coordinates are drawn in row-major order so the result
    /// is a pure function of the generator state.
    pub fn init_params(&self, rng: &mut ChaCha8Rng) -> Option<LayerParams> {
        let (w_shape, b_shape) = self.param_shapes()?;
        let (fan_in, fan_out) = match *self {
            LayerSpec::Dense { inputs, outputs } => (inputs, outputs),
            LayerSpec::Conv2d { in_channels, out_channels, kernel } => {
                (in_channels * kernel * kernel, out_channels * kernel * kernel)
            }
            _ => unreachable!(),
        };
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let n: usize = w_shape.iter().product();
        let data = (0..n).map(|_| rng.random_range(-limit..limit)).collect();
        Some(LayerParams {
            weights: Tensor::new(w_shape, data).expect("shape/product agree by construction"),
            bias: Tensor::zeros(b_shape),
        })
    }

    /// Forward pass over a batch (`x` is `[N, sample...]`).
    pub fn forward(&self, params: Option<&LayerParams>, x: &Tensor) -> Result<Tensor> {
        match *self {
            LayerSpec::Dense { inputs, outputs } => {
                let p = expect_params(self, params)?;
                let n = batch_of(x, &[inputs])?;
                let xd = x.data();
                let w = p.weights.data();
                let b = p.bias.data();
                let mut y = vec![0.0; n * outputs];
                for s in 0..n {
                    let xrow = &xd[s * inputs..(s + 1) * inputs];
                    let yrow = &mut y[s * outputs..(s + 1) * outputs];
                    for o in 0..outputs {
                        let wrow = &w[o * inputs..(o + 1) * inputs];
                        let mut acc = b[o];
                        for i in 0..inputs {
                            acc += wrow[i] * xrow[i];
                        }
                        yrow[o] = acc;
                    }
                }
                Tensor::new(vec![n, outputs], y)
            }
            LayerSpec::Conv2d { in_channels, out_channels, kernel } => {
                let p = expect_params(self, params)?;
                let (n, h, w) = conv_input_dims(self, x, in_channels, kernel)?;
                let (oh, ow) = (h - kernel + 1, w - kernel + 1);
                let xd = x.data();
                let wd = p.weights.data();
                let bd = p.bias.data();
                let mut y = vec![0.0; n * out_channels * oh * ow];
                for s in 0..n {
                    for oc in 0..out_channels {
                        for r in 0..oh {
                            for c in 0..ow {
                                let mut acc = bd[oc];
                                for ic in 0..in_channels {
                                    let x_base = ((s * in_channels + ic) * h + r) * w + c;
                                    let w_base = ((oc * in_channels + ic) * kernel) * kernel;
                                    for ki in 0..kernel {
                                        let xrow = x_base + ki * w;
                                        let wrow = w_base + ki * kernel;
                                        for kj in 0..kernel {
                                            acc += wd[wrow + kj] * xd[xrow + kj];
                                        }
                                    }
                                }
                                y[((s * out_channels + oc) * oh + r) * ow + c] = acc;
                            }
                        }
                    }
                }
                Tensor::new(vec![n, out_channels, oh, ow], y)
            }
            LayerSpec::MaxPool2d => {
                let (n, ch, h, w) = pool_input_dims(x)?;
                let (oh, ow) = (h / 2, w / 2);
                let xd = x.data();
                let mut y = vec![0.0; n * ch * oh * ow];
                for s in 0..n {
                    for c in 0..ch {
                        let plane = (s * ch + c) * h * w;
                        for r in 0..oh {
                            for q in 0..ow {
                                let (v, _) = window_max(xd, plane, w, r, q);
                                y[((s * ch + c) * oh + r) * ow + q] = v;
                            }
                        }
                    }
                }
                Tensor::new(vec![n, ch, oh, ow], y)
            }
            LayerSpec::Relu => {
                let mut y = x.clone();
                for v in y.data_mut() {
                    if *v < 0.0 {
                        *v = 0.0;
                    }
                }
                Ok(y)
            }
            LayerSpec::Flatten => {
                let n = *x.shape().first().ok_or_else(|| {
                    Error::Structure("flatten requires a batched input".into())
                })?;
                let flat: usize = x.shape()[1..].iter().product();
                x.reshaped(vec![n, flat])
            }
            LayerSpec::Softmax => {
                let classes = *x.shape().last().unwrap_or(&0);
                let n = batch_of(x, &[classes])?;
                if classes == 0 {
                    return Err(Error::Domain("softmax over an empty vector".into()));
                }
                let mut y = x.data().to_vec();
                for row in y.chunks_mut(classes) {
                    softmax_row(row);
                }
                Tensor::new(vec![n, classes], y)
            }
        }
    }

    /// Backward pass: given the forward `input`/`output` and `grad_out`
    /// (gradient of the loss w.r.t. the output), produces the parameter
    /// gradients (for parameterized layers) and the gradient w.r.t. the input.
    pub fn backward(
        &self,
        params: Option<&LayerParams>,
        input: &Tensor,
        output: &Tensor,
        grad_out: &Tensor,
    ) -> Result<(Option<LayerParams>, Tensor)> {
        if grad_out.shape() != output.shape() {
            return Err(Error::Structure(format!(
                "{} backward: grad shape {:?} does not match output shape {:?}",
                self.kind_name(),
                grad_out.shape(),
                output.shape()
            )));
        }
        match *self {
            LayerSpec::Dense { inputs, outputs } => {
                let p = expect_params(self, params)?;
                let n = batch_of(input, &[inputs])?;
                let xd = input.data();
                let gd = grad_out.data();
                let w = p.weights.data();
                let mut dw = vec![0.0; outputs * inputs];
                let mut db = vec![0.0; outputs];
                let mut dx = vec![0.0; n * inputs];
                for s in 0..n {
                    let xrow = &xd[s * inputs..(s + 1) * inputs];
                    let grow = &gd[s * outputs..(s + 1) * outputs];
                    let dxrow = &mut dx[s * inputs..(s + 1) * inputs];
                    for o in 0..outputs {
                        let g = grow[o];
                        db[o] += g;
                        let wrow = &w[o * inputs..(o + 1) * inputs];
                        let dwrow = &mut dw[o * inputs..(o + 1) * inputs];
                        for i in 0..inputs {
                            dwrow[i] += g * xrow[i];
                            dxrow[i] += g * wrow[i];
                        }
                    }
                }
                Ok((
                    Some(LayerParams {
                        weights: Tensor::new(vec![outputs, inputs], dw)?,
                        bias: Tensor::new(vec![outputs], db)?,
                    }),
                    Tensor::new(input.shape().to_vec(), dx)?,
                ))
            }
            LayerSpec::Conv2d { in_channels, out_channels, kernel } => {
                let p = expect_params(self, params)?;
                let (n, h, w) = conv_input_dims(self, input, in_channels, kernel)?;
                let (oh, ow) = (h - kernel + 1, w - kernel + 1);
                let xd = input.data();
                let gd = grad_out.data();
                let wd = p.weights.data();
                let mut dw = vec![0.0; out_channels * in_channels * kernel * kernel];
                let mut db = vec![0.0; out_channels];
                let mut dx = vec![0.0; xd.len()];
                for s in 0..n {
                    for oc in 0..out_channels {
                        for r in 0..oh {
                            for c in 0..ow {
                                let g = gd[((s * out_channels + oc) * oh + r) * ow + c];
                                db[oc] += g;
                                for ic in 0..in_channels {
                                    let x_base = ((s * in_channels + ic) * h + r) * w + c;
                                    let w_base = (oc * in_channels + ic) * kernel * kernel;
                                    for ki in 0..kernel {
                                        let xrow = x_base + ki * w;
                                        let wrow = w_base + ki * kernel;
                                        for kj in 0..kernel {
                                            dw[wrow + kj] += g * xd[xrow + kj];
                                            dx[xrow + kj] += g * wd[wrow + kj];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                Ok((
                    Some(LayerParams {
                        weights: Tensor::new(
                            vec![out_channels, in_channels, kernel, kernel],
                            dw,
                        )?,
                        bias: Tensor::new(vec![out_channels], db)?,
                    }),
                    Tensor::new(input.shape().to_vec(), dx)?,
                ))
            }
            LayerSpec::MaxPool2d => {
                let (n, ch, h, w) = pool_input_dims(input)?;
                let (oh, ow) = (h / 2, w / 2);
                let xd = input.data();
                let gd = grad_out.data();
                let mut dx = vec![0.0; xd.len()];
                for s in 0..n {
                    for c in 0..ch {
                        let plane = (s * ch + c) * h * w;
                        for r in 0..oh {
                            for q in 0..ow {
                                // The gradient flows to the first occurrence
                                // of the window maximum (row-major order), the
                                // same element the forward pass selected.
                                let (_, arg) = window_max(xd, plane, w, r, q);
                                dx[arg] += gd[((s * ch + c) * oh + r) * ow + q];
                            }
                        }
                    }
                }
                Ok((None, Tensor::new(input.shape().to_vec(), dx)?))
            }
            LayerSpec::Relu => {
                let xd = input.data();
                let gd = grad_out.data();
                // Subgradient 0 at the kink (x == 0).
                let dx = xd
                    .iter()
                    .zip(gd)
                    .map(|(&x, &g)| if x > 0.0 { g } else { 0.0 })
                    .collect();
                Ok((None, Tensor::new(input.shape().to_vec(), dx)?))
            }
            LayerSpec::Flatten => Ok((None, grad_out.reshaped(input.shape().to_vec())?)),
            LayerSpec::Softmax => {
                let classes = *output.shape().last().unwrap_or(&0);
                let n = batch_of(output, &[classes])?;
                let pd = output.data();
                let gd = grad_out.data();
                let mut dx = vec![0.0; pd.len()];
                for s in 0..n {
                    let p = &pd[s * classes..(s + 1) * classes];
                    let g = &gd[s * classes..(s + 1) * classes];
                    let row = &mut dx[s * classes..(s + 1) * classes];
                    // Full Jacobian contraction: J[j][i] = p[j] * (delta_ij - p[i]).
                    for i in 0..classes {
                        let mut acc = 0.0;
                        for j in 0..classes {
                            let jac = p[j] * (((i == j) as u8 as f64) - p[i]);
                            acc += jac * g[j];
                        }
                        row[i] = acc;
                    }
                }
                Ok((None, Tensor::new(output.shape().to_vec(), dx)?))
            }
        }
    }
}

/// Numerically stable softmax of one row, in place: subtract the maximum,
/// exponentiate, normalize.
fn softmax_row(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// Softmax of a single probability-vector input (rank 1).
pub fn softmax(z: &Tensor) -> Result<Tensor> {
    if z.rank() != 1 {
        return Err(Error::Structure(format!(
            "softmax expects a rank-1 tensor, got shape {:?}",
            z.shape()
        )));
    }
    if z.is_empty() {
        return Err(Error::Domain("softmax over an empty vector".into()));
    }
    let mut data = z.data().to_vec();
    softmax_row(&mut data);
    Ok(Tensor::from_vec(data))
}

/// `-ln(p[true_class] + epsilon)` for a rank-1 probability vector.
pub fn cross_entropy(probabilities: &Tensor, true_class: usize) -> Result<f64> {
    if probabilities.rank() != 1 {
        return Err(Error::Structure(format!(
            "cross_entropy expects a rank-1 tensor, got shape {:?}",
            probabilities.shape()
        )));
    }
    if true_class >= probabilities.len() {
        return Err(Error::Domain(format!(
            "true class {true_class} out of range for {} classes",
            probabilities.len()
        )));
    }
    Ok(-(probabilities.data()[true_class] + CE_EPSILON).ln())
}

/// Mean cross-entropy over a `[N, C]` batch of probabilities, together with
/// the gradient of that mean w.r.t. the probabilities.
pub fn cross_entropy_batch(probs: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    let classes = *probs.shape().last().unwrap_or(&0);
    let n = batch_of(probs, &[classes])?;
    if n == 0 {
        return Err(Error::Domain("cross_entropy over an empty batch".into()));
    }
    if labels.len() != n {
        return Err(Error::Structure(format!(
            "{} labels provided for a batch of {n}",
            labels.len()
        )));
    }
    let pd = probs.data();
    let mut grad = vec![0.0; pd.len()];
    let mut total = 0.0;
    let scale = 1.0 / n as f64;
    for (s, &y) in labels.iter().enumerate() {
        if y >= classes {
            return Err(Error::Domain(format!(
                "label {y} out of range for {classes} classes"
            )));
        }
        let p = pd[s * classes + y];
        total += -(p + CE_EPSILON).ln();
        grad[s * classes + y] = -scale / (p + CE_EPSILON);
    }
    Ok((total * scale, Tensor::new(probs.shape().to_vec(), grad)?))
}

fn expect_params<'a>(spec: &LayerSpec, params: Option<&'a LayerParams>) -> Result<&'a LayerParams> {
    params.ok_or_else(|| {
        Error::Internal(format!("{} layer invoked without parameters", spec.kind_name()))
    })
}

/// Validates that `x` is `[N, sample...]` with the expected per-sample shape
/// and returns N.
fn batch_of(x: &Tensor, sample: &[usize]) -> Result<usize> {
    if x.rank() != sample.len() + 1 || &x.shape()[1..] != sample {
        return Err(Error::Structure(format!(
            "expected batched input of per-sample shape {:?}, got {:?}",
            sample,
            x.shape()
        )));
    }
    Ok(x.shape()[0])
}

fn require_chw(input: &[usize]) -> Result<&[usize; 3]> {
    input.try_into().map_err(|_| {
        Error::Structure(format!(
            "expected a channels x height x width input, got shape {input:?}"
        ))
    })
}

fn conv_input_dims(
    spec: &LayerSpec,
    x: &Tensor,
    in_channels: usize,
    kernel: usize,
) -> Result<(usize, usize, usize)> {
    if x.rank() != 4 || x.shape()[1] != in_channels {
        return Err(Error::Structure(format!(
            "{} expects input [N, {in_channels}, H, W], got {:?}",
            spec.kind_name(),
            x.shape()
        )));
    }
    let (h, w) = (x.shape()[2], x.shape()[3]);
    if h < kernel || w < kernel {
        return Err(Error::Structure(format!(
            "conv2d kernel {kernel}x{kernel} does not fit a {h}x{w} input"
        )));
    }
    Ok((x.shape()[0], h, w))
}

fn pool_input_dims(x: &Tensor) -> Result<(usize, usize, usize, usize)> {
    if x.rank() != 4 {
        return Err(Error::Structure(format!(
            "maxpool2d expects input [N, C, H, W], got {:?}",
            x.shape()
        )));
    }
    let (h, w) = (x.shape()[2], x.shape()[3]);
    if h < 2 || w < 2 {
        return Err(Error::Structure(format!(
            "maxpool2d needs at least a 2x2 input, got {h}x{w}"
        )));
    }
    Ok((x.shape()[0], x.shape()[1], h, w))
}

/// Maximum of one 2x2 pooling window and the flat index of its first
/// occurrence in row-major order.
fn window_max(xd: &[f64], plane: usize, width: usize, r: usize, q: usize) -> (f64, usize) {
    let mut best = f64::NEG_INFINITY;
    let mut arg = 0;
    for di in 0..2 {
        for dj in 0..2 {
            let idx = plane + (2 * r + di) * width + (2 * q + dj);
            if xd[idx] > best {
                best = xd[idx];
                arg = idx;
            }
        }
    }
    (best, arg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seeds;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn dense_forward_known_values() {
        let spec = LayerSpec::Dense { inputs: 2, outputs: 2 };
        let params = LayerParams {
            weights: t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]),
            bias: t(&[2], &[0.5, -0.5]),
        };
        let y = spec
            .forward(Some(&params), &t(&[1, 2], &[1.0, -1.0]))
            .unwrap();
        // y0 = 1*1 + 2*(-1) + 0.5 = -0.5; y1 = 3*1 + 4*(-1) - 0.5 = -1.5
        assert_eq!(y.data(), &[-0.5, -1.5]);
    }

    #[test]
    fn conv_forward_known_values() {
        let spec = LayerSpec::Conv2d { in_channels: 1, out_channels: 1, kernel: 2 };
        let x = t(&[1, 1, 3, 3], &[1., 2., 3., 4., 5., 6., 7., 8., 9.]);
        // Kernel picks x[i][j] + x[i+1][j+1], bias 0.5.
        let params = LayerParams {
            weights: t(&[1, 1, 2, 2], &[1.0, 0.0, 0.0, 1.0]),
            bias: t(&[1], &[0.5]),
        };
        let y = spec.forward(Some(&params), &x).unwrap();
        assert_eq!(y.shape(), &[1, 1, 2, 2]);
        assert_eq!(y.data(), &[6.5, 8.5, 12.5, 14.5]);
    }

    #[test]
    fn conv_rejects_oversized_kernel() {
        let spec = LayerSpec::Conv2d { in_channels: 1, out_channels: 1, kernel: 4 };
        assert!(spec.output_shape(&[1, 3, 3]).is_err());
    }

    #[test]
    fn pool_drops_odd_edges_and_breaks_ties_first() {
        let spec = LayerSpec::MaxPool2d;
        let x = t(&[1, 1, 3, 3], &[1., 1., 9., 1., 1., 9., 9., 9., 9.]);
        let y = spec.forward(None, &x).unwrap();
        // Only the top-left 2x2 window survives; all four entries tie at 1.
        assert_eq!(y.shape(), &[1, 1, 1, 1]);
        assert_eq!(y.data(), &[1.0]);
        // The tie resolves to the first element in row-major order, which is
        // where the gradient must land.
        let g = t(&[1, 1, 1, 1], &[2.0]);
        let (_, dx) = spec.backward(None, &x, &y, &g).unwrap();
        assert_eq!(dx.data(), &[2., 0., 0., 0., 0., 0., 0., 0., 0.]);
    }

    #[test]
    fn relu_zeroes_negatives_and_their_gradient() {
        let spec = LayerSpec::Relu;
        let x = t(&[1, 3], &[-1.0, 0.0, 2.0]);
        let y = spec.forward(None, &x).unwrap();
        assert_eq!(y.data(), &[0.0, 0.0, 2.0]);
        let g = t(&[1, 3], &[1.0, 1.0, 1.0]);
        let (_, dx) = spec.backward(None, &x, &y, &g).unwrap();
        assert_eq!(dx.data(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn softmax_uniform_on_equal_inputs() {
        let p = softmax(&Tensor::from_vec(vec![0.0; 4])).unwrap();
        assert_eq!(p.data(), &[0.25, 0.25, 0.25, 0.25]);
    }

    #[test]
    fn softmax_sums_to_one_and_survives_large_inputs() {
        let p = softmax(&Tensor::from_vec(vec![1000.0, 1000.5, 999.0])).unwrap();
        let sum: f64 = p.data().iter().sum();
        assert!((sum - 1.0).abs() <= 1e-12, "sum = {sum}");
        assert!(p.data().iter().all(|v| v.is_finite() && *v > 0.0));
    }

    #[test]
    fn softmax_shift_invariance_is_exact_for_exact_shifts() {
        let a = softmax(&Tensor::from_vec(vec![1.0, 2.0, 3.0])).unwrap();
        let b = softmax(&Tensor::from_vec(vec![513.0, 514.0, 515.0])).unwrap();
        assert!(a.bit_eq(&b));
    }

    #[test]
    fn softmax_rejects_empty_input() {
        assert!(matches!(
            softmax(&Tensor::from_vec(vec![])),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn cross_entropy_edge_probabilities() {
        let sure = cross_entropy(&Tensor::from_vec(vec![0.0, 1.0]), 1).unwrap();
        assert!(sure.abs() < 1e-11, "confident prediction should cost ~0, got {sure}");
        let wrong = cross_entropy(&Tensor::from_vec(vec![0.0, 1.0]), 0).unwrap();
        assert!((wrong - -(CE_EPSILON.ln())).abs() < 1e-9);
        assert!(wrong.is_finite());
        assert!(cross_entropy(&Tensor::from_vec(vec![0.5, 0.5]), 2).is_err());
    }

    /// Central-difference check of one layer's backward pass through a fixed
    /// linear functional of the output.
    fn check_layer_gradients(spec: LayerSpec, input_shape: &[usize], seed: u64) {
        use rand::Rng;
        let mut rng = seeds::stream_rng(seed, seeds::stream::TEST_BUILD, 99);
        let mut params = spec.init_params(&mut rng);
        if let Some(p) = params.as_mut() {
            // Non-zero biases so their gradient path is exercised.
            for b in p.bias.data_mut() {
                *b = rng.random_range(-0.5..0.5);
            }
        }
        let n: usize = input_shape.iter().product();
        let x = Tensor::new(
            input_shape.to_vec(),
            (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
        .unwrap();
        let y = spec.forward(params.as_ref(), &x).unwrap();
        let c: Vec<f64> = (0..y.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let loss = |out: &Tensor| -> f64 {
            out.data().iter().zip(&c).map(|(a, b)| a * b).sum()
        };
        let grad_out = Tensor::new(y.shape().to_vec(), c.clone()).unwrap();
        let (dparams, dx) = spec.backward(params.as_ref(), &x, &y, &grad_out).unwrap();

        let h = 1e-5;
        let check = |analytic: f64, numeric: f64, what: &str| {
            let denom = analytic.abs().max(numeric.abs()).max(1e-4);
            let rel = (analytic - numeric).abs() / denom;
            assert!(
                rel < 1e-4,
                "{}: analytic {analytic} vs numeric {numeric} (rel {rel})",
                what
            );
        };

        for i in 0..x.len() {
            let mut xp = x.clone();
            xp.data_mut()[i] += h;
            let mut xm = x.clone();
            xm.data_mut()[i] -= h;
            let lp = loss(&spec.forward(params.as_ref(), &xp).unwrap());
            let lm = loss(&spec.forward(params.as_ref(), &xm).unwrap());
            check(dx.data()[i], (lp - lm) / (2.0 * h), &format!("dx[{i}]"));
        }

        if let (Some(p), Some(dp)) = (params.as_ref(), dparams.as_ref()) {
            for i in 0..p.weights.len() {
                let mut pp = p.clone();
                pp.weights.data_mut()[i] += h;
                let mut pm = p.clone();
                pm.weights.data_mut()[i] -= h;
                let lp = loss(&spec.forward(Some(&pp), &x).unwrap());
                let lm = loss(&spec.forward(Some(&pm), &x).unwrap());
                check(dp.weights.data()[i], (lp - lm) / (2.0 * h), &format!("dw[{i}]"));
            }
            for i in 0..p.bias.len() {
                let mut pp = p.clone();
                pp.bias.data_mut()[i] += h;
                let mut pm = p.clone();
                pm.bias.data_mut()[i] -= h;
                let lp = loss(&spec.forward(Some(&pp), &x).unwrap());
                let lm = loss(&spec.forward(Some(&pm), &x).unwrap());
                check(dp.bias.data()[i], (lp - lm) / (2.0 * h), &format!("db[{i}]"));
            }
        }
    }

    #[test]
    fn dense_gradients_match_finite_differences() {
        check_layer_gradients(LayerSpec::Dense { inputs: 4, outputs: 3 }, &[2, 4], 11);
    }

    #[test]
    fn conv_gradients_match_finite_differences() {
        check_layer_gradients(
            LayerSpec::Conv2d { in_channels: 2, out_channels: 2, kernel: 2 },
            &[2, 2, 4, 4],
            12,
        );
    }

    #[test]
    fn pool_gradients_match_finite_differences() {
        check_layer_gradients(LayerSpec::MaxPool2d, &[2, 1, 4, 4], 13);
    }

    #[test]
    fn softmax_cross_entropy_gradient_matches_finite_differences() {
        let spec = LayerSpec::Softmax;
        let x = t(&[2, 3], &[0.3, -0.8, 0.5, 1.2, 0.1, -0.4]);
        let labels = [2usize, 0];
        let y = spec.forward(None, &x).unwrap();
        let (_, dldp) = cross_entropy_batch(&y, &labels).unwrap();
        let (_, dx) = spec.backward(None, &x, &y, &dldp).unwrap();
        let h = 1e-5;
        for i in 0..x.len() {
            let mut xp = x.clone();
            xp.data_mut()[i] += h;
            let mut xm = x.clone();
            xm.data_mut()[i] -= h;
            let lp = cross_entropy_batch(&spec.forward(None, &xp).unwrap(), &labels)
                .unwrap()
                .0;
            let lm = cross_entropy_batch(&spec.forward(None, &xm).unwrap(), &labels)
                .unwrap()
                .0;
            let numeric = (lp - lm) / (2.0 * h);
            let analytic = dx.data()[i];
            let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-4);
            assert!(rel < 1e-4, "dz[{i}]: analytic {analytic} vs numeric {numeric}");
        }
    }

    #[test]
    fn glorot_init_respects_limit_and_zero_bias() {
        let spec = LayerSpec::Dense { inputs: 10, outputs: 5 };
        let mut rng = seeds::stream_rng(1, seeds::stream::MODEL_INIT, 0);
        let p = spec.init_params(&mut rng).unwrap();
        let limit = (6.0 / 15.0f64).sqrt();
        assert!(p.weights.data().iter().all(|w| w.abs() < limit));
        assert!(p.bias.data().iter().all(|b| *b == 0.0));
        // Deterministic for a fixed stream.
        let mut rng2 = seeds::stream_rng(1, seeds::stream::MODEL_INIT, 0);
        let q = spec.init_params(&mut rng2).unwrap();
        assert!(p.bit_eq(&q));
    }
}
