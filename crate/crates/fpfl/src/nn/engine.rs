//! Forward pass, exact backpropagation, loss, and fairness surrogates.
//!
//! Losses and surrogates are *sums* over the batch, never means; any
//! normalization happens in the caller with (possibly noisy) counts.

use ndarray::{Array2, Array4, ArrayView2, Axis};

use super::{layer_activation, Activation, Batch, DataShape, Features, LayerSpec, ModelParams};
use crate::error::{Error, Result};
use crate::fairness::{FairnessMetric, FairnessSpec};

const PROB_CLAMP: f64 = 1e-12;

fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP)
}

/// Per-group surrogate sum, its gradient, and the conditioning-subset count.
#[derive(Debug, Clone)]
pub struct GroupSurrogate {
    pub f_sum: f64,
    pub grad: Vec<f64>,
    pub count: usize,
}

struct LayerCache {
    /// Dense: the input rows (n, in). Conv: im2col patches (n*oh*ow, c*k*k).
    input: Array2<f64>,
    /// Pre-activation values; conv rows are (sample, oy, ox), columns channels.
    pre: Array2<f64>,
    post: Array2<f64>,
    shape_out: DataShape,
}

struct ForwardPass {
    layers: Vec<LayerCache>,
    /// (n, out_dim) output probabilities.
    output: Array2<f64>,
}

fn apply_activation(act: Activation, z: &Array2<f64>) -> Array2<f64> {
    match act {
        Activation::Identity => z.clone(),
        Activation::Relu => z.mapv(|v| if v > 0.0 { v } else { 0.0 }),
        Activation::Sigmoid => z.mapv(|v| 1.0 / (1.0 + (-v).exp())),
        Activation::Softmax => {
            let mut out = z.clone();
            for mut row in out.rows_mut() {
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
            out
        }
    }
}

/// Elementwise d(post)/d(pre) given the cached pre/post values. Softmax is
/// excluded: final-layer deltas are built directly by the loss/surrogate.
fn activation_derivative(act: Activation, pre: &Array2<f64>, post: &Array2<f64>) -> Array2<f64> {
    match act {
        Activation::Identity => Array2::ones(pre.raw_dim()),
        Activation::Relu => pre.mapv(|v| if v > 0.0 { 1.0 } else { 0.0 }),
        Activation::Sigmoid => post.mapv(|a| a * (1.0 - a)),
        Activation::Softmax => unreachable!("softmax only appears on the final layer"),
    }
}

fn im2col(x: &Array4<f64>, kernel: usize, stride: usize) -> Array2<f64> {
    let (n, c, h, w) = x.dim();
    let oh = (h - kernel) / stride + 1;
    let ow = (w - kernel) / stride + 1;
    let mut patches = Array2::zeros((n * oh * ow, c * kernel * kernel));
    let xs = x.as_slice().expect("contiguous input tensor");
    let ps = patches.as_slice_mut().expect("contiguous patches");
    let cols = c * kernel * kernel;
    for i in 0..n {
        for oy in 0..oh {
            for ox in 0..ow {
                let row = (i * oh + oy) * ow + ox;
                let base = row * cols;
                for ch in 0..c {
                    let src_ch = (i * c + ch) * h * w;
                    for ky in 0..kernel {
                        let src_row = src_ch + (oy * stride + ky) * w + ox * stride;
                        let dst = base + (ch * kernel + ky) * kernel;
                        ps[dst..dst + kernel].copy_from_slice(&xs[src_row..src_row + kernel]);
                    }
                }
            }
        }
    }
    patches
}

fn col2im(
    dpatches: &Array2<f64>,
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    kernel: usize,
    stride: usize,
) -> Array4<f64> {
    let oh = (h - kernel) / stride + 1;
    let ow = (w - kernel) / stride + 1;
    let mut dx = Array4::zeros((n, c, h, w));
    let ds = dpatches.as_slice().expect("contiguous dpatches");
    let xs = dx.as_slice_mut().expect("contiguous dx");
    let cols = c * kernel * kernel;
    for i in 0..n {
        for oy in 0..oh {
            for ox in 0..ow {
                let row = (i * oh + oy) * ow + ox;
                let base = row * cols;
                for ch in 0..c {
                    let dst_ch = (i * c + ch) * h * w;
                    for ky in 0..kernel {
                        let dst_row = dst_ch + (oy * stride + ky) * w + ox * stride;
                        let src = base + (ch * kernel + ky) * kernel;
                        for kx in 0..kernel {
                            xs[dst_row + kx] += ds[src + kx];
                        }
                    }
                }
            }
        }
    }
    dx
}

/// Conv matrix rows are (sample, oy, ox) with channel columns; rebuild the
/// (n, c, h, w) tensor.
fn rows_to_tensor(m: &Array2<f64>, n: usize, c: usize, h: usize, w: usize) -> Array4<f64> {
    let mut out = Array4::zeros((n, c, h, w));
    let ms = m.as_slice().expect("contiguous rows");
    let os = out.as_slice_mut().expect("contiguous tensor");
    for i in 0..n {
        for y in 0..h {
            for x in 0..w {
                let row = ((i * h + y) * w + x) * c;
                for ch in 0..c {
                    os[((i * c + ch) * h + y) * w + x] = ms[row + ch];
                }
            }
        }
    }
    out
}

fn tensor_to_rows(t: &Array4<f64>) -> Array2<f64> {
    let (n, c, h, w) = t.dim();
    let mut out = Array2::zeros((n * h * w, c));
    let ts = t.as_slice().expect("contiguous tensor");
    let os = out.as_slice_mut().expect("contiguous rows");
    for i in 0..n {
        for y in 0..h {
            for x in 0..w {
                let row = ((i * h + y) * w + x) * c;
                for ch in 0..c {
                    os[row + ch] = ts[((i * c + ch) * h + y) * w + x];
                }
            }
        }
    }
    out
}

fn tensor_to_flat(t: &Array4<f64>) -> Array2<f64> {
    let (n, c, h, w) = t.dim();
    let flat = t.as_slice().expect("contiguous tensor").to_vec();
    Array2::from_shape_vec((n, c * h * w), flat).expect("reshape")
}

fn flat_to_tensor(m: &Array2<f64>, c: usize, h: usize, w: usize) -> Array4<f64> {
    let n = m.nrows();
    Array4::from_shape_vec((n, c, h, w), m.as_slice().expect("contiguous").to_vec())
        .expect("reshape")
}

enum Value {
    Rows(Array2<f64>),
    Tensor(Array4<f64>),
}

fn forward_cached(model: &ModelParams, batch: &Batch) -> Result<ForwardPass> {
    batch.validate(&model.arch)?;
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let shapes = model.arch.data_shapes()?;
    let offsets = model.arch.layer_offsets();
    let n = batch.len();

    let mut current = match &batch.features {
        Features::Tabular(x) => Value::Rows(x.clone()),
        Features::Images(x) => Value::Tensor(x.clone()),
    };
    let mut layers = Vec::with_capacity(model.arch.layers.len());

    for (idx, layer) in model.arch.layers.iter().enumerate() {
        let off = offsets[idx];
        let act = layer_activation(layer);
        let cache = match *layer {
            LayerSpec::Dense { input, output, .. } => {
                let rows = match current {
                    Value::Rows(r) => r,
                    Value::Tensor(t) => tensor_to_flat(&t),
                };
                let w = ArrayView2::from_shape(
                    (output, input),
                    &model.weights[off.w_start..off.w_start + off.w_len],
                )
                .expect("weight view");
                let b = &model.weights[off.b_start..off.b_start + off.b_len];
                let mut pre = rows.dot(&w.t());
                for mut row in pre.rows_mut() {
                    for (v, bias) in row.iter_mut().zip(b) {
                        *v += bias;
                    }
                }
                let post = apply_activation(act, &pre);
                current = Value::Rows(post.clone());
                LayerCache {
                    input: rows,
                    pre,
                    post,
                    shape_out: shapes[idx + 1],
                }
            }
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
                stride,
                ..
            } => {
                let tensor = match current {
                    Value::Tensor(t) => t,
                    Value::Rows(_) => {
                        return Err(Error::DimensionMismatch(
                            "conv layer received flat input".into(),
                        ))
                    }
                };
                let patches = im2col(&tensor, kernel, stride);
                let w = ArrayView2::from_shape(
                    (out_channels, in_channels * kernel * kernel),
                    &model.weights[off.w_start..off.w_start + off.w_len],
                )
                .expect("weight view");
                let b = &model.weights[off.b_start..off.b_start + off.b_len];
                let mut pre = patches.dot(&w.t());
                for mut row in pre.rows_mut() {
                    for (v, bias) in row.iter_mut().zip(b) {
                        *v += bias;
                    }
                }
                let post = apply_activation(act, &pre);
                let (oc, oh, ow) = match shapes[idx + 1] {
                    DataShape::Image {
                        channels,
                        height,
                        width,
                    } => (channels, height, width),
                    DataShape::Flat(_) => unreachable!(),
                };
                current = Value::Tensor(rows_to_tensor(&post, n, oc, oh, ow));
                LayerCache {
                    input: patches,
                    pre,
                    post,
                    shape_out: shapes[idx + 1],
                }
            }
        };
        layers.push(cache);
    }

    let output = match current {
        Value::Rows(r) => r,
        Value::Tensor(_) => unreachable!("validated arch ends with dense"),
    };
    Ok(ForwardPass { layers, output })
}

/// Backpropagate from `delta`, the gradient of a scalar with respect to the
/// final layer's pre-activation, and return the flat parameter gradient.
fn backward(model: &ModelParams, pass: &ForwardPass, delta_final: Array2<f64>) -> Vec<f64> {
    let offsets = model.arch.layer_offsets();
    let mut grad = vec![0.0; model.param_count()];
    let mut delta = delta_final;
    let n = pass.output.nrows();

    for idx in (0..model.arch.layers.len()).rev() {
        let layer = &model.arch.layers[idx];
        let off = offsets[idx];
        let cache = &pass.layers[idx];

        // Parameter gradients share one formula: delta^T x input.
        let dw = delta.t().dot(&cache.input);
        grad[off.w_start..off.w_start + off.w_len]
            .copy_from_slice(dw.as_slice().expect("contiguous dw"));
        let db = delta.sum_axis(Axis(0));
        grad[off.b_start..off.b_start + off.b_len]
            .copy_from_slice(db.as_slice().expect("contiguous db"));

        if idx == 0 {
            break;
        }

        // Gradient with respect to this layer's input, in the previous
        // layer's post-activation layout.
        let prev = &pass.layers[idx - 1];
        let prev_act = layer_activation(&model.arch.layers[idx - 1]);
        let dinput_rows = match *layer {
            LayerSpec::Dense { input, output, .. } => {
                let w = ArrayView2::from_shape(
                    (output, input),
                    &model.weights[off.w_start..off.w_start + off.w_len],
                )
                .expect("weight view");
                let dflat = delta.dot(&w); // (n, in)
                match prev.shape_out {
                    DataShape::Flat(_) => dflat,
                    DataShape::Image {
                        channels,
                        height,
                        width,
                    } => {
                        let t = flat_to_tensor(&dflat, channels, height, width);
                        tensor_to_rows(&t)
                    }
                }
            }
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
                stride,
                ..
            } => {
                let w = ArrayView2::from_shape(
                    (out_channels, in_channels * kernel * kernel),
                    &model.weights[off.w_start..off.w_start + off.w_len],
                )
                .expect("weight view");
                let dpatches = delta.dot(&w);
                let (h, w_in) = match prev.shape_out {
                    DataShape::Image { height, width, .. } => (height, width),
                    DataShape::Flat(_) => unreachable!("conv input is an image"),
                };
                let dx = col2im(&dpatches, n, in_channels, h, w_in, kernel, stride);
                tensor_to_rows(&dx)
            }
        };
        let deriv = activation_derivative(prev_act, &prev.pre, &prev.post);
        delta = dinput_rows * deriv;
    }
    grad
}

/// Forward pass returning output probabilities: a (n, 1) column of sigmoid
/// values for binary heads, or (n, classes) softmax rows.
pub fn forward(model: &ModelParams, batch: &Batch) -> Result<Array2<f64>> {
    Ok(forward_cached(model, batch)?.output)
}

fn loss_delta(model: &ModelParams, output: &Array2<f64>, labels: &[u32]) -> (f64, Array2<f64>) {
    let n = output.nrows();
    if model.arch.is_binary() {
        let mut loss = 0.0;
        let mut delta = Array2::zeros((n, 1));
        for i in 0..n {
            let p = clamp_prob(output[[i, 0]]);
            let y = labels[i] as f64;
            loss += -(y * p.ln() + (1.0 - y) * (1.0 - p).ln());
            delta[[i, 0]] = p - y;
        }
        (loss, delta)
    } else {
        let k = output.ncols();
        let mut loss = 0.0;
        let mut delta = Array2::zeros((n, k));
        for i in 0..n {
            let y = labels[i] as usize;
            loss += -clamp_prob(output[[i, y]]).ln();
            for j in 0..k {
                delta[[i, j]] = output[[i, j]] - if j == y { 1.0 } else { 0.0 };
            }
        }
        (loss, delta)
    }
}

/// Summed cross-entropy loss and its exact gradient.
pub fn loss_and_grad(model: &ModelParams, batch: &Batch) -> Result<(f64, Vec<f64>)> {
    let pass = forward_cached(model, batch)?;
    let (loss, delta) = loss_delta(model, &pass.output, &batch.labels);
    if !loss.is_finite() {
        return Err(Error::NonFinite("loss".into()));
    }
    let grad = backward(model, &pass, delta);
    Ok((loss, grad))
}

/// Surrogate value f(z, w) for one example and d(f)/d(final pre-activation).
///
/// FNR parity uses 1 - p(positive); accuracy parity uses the probability
/// assigned to the true class.
fn surrogate_row(
    metric: FairnessMetric,
    binary: bool,
    out_row: ndarray::ArrayView1<f64>,
    label: u32,
    delta_row: &mut [f64],
) -> f64 {
    match metric {
        FairnessMetric::FnrParity => {
            let p = out_row[0];
            delta_row[0] = -p * (1.0 - p);
            1.0 - p
        }
        FairnessMetric::AccuracyParity => {
            if binary {
                let p = out_row[0];
                if label == 1 {
                    delta_row[0] = p * (1.0 - p);
                    p
                } else {
                    delta_row[0] = -p * (1.0 - p);
                    1.0 - p
                }
            } else {
                let y = label as usize;
                let py = out_row[y];
                for (j, d) in delta_row.iter_mut().enumerate() {
                    *d = py * (if j == y { 1.0 } else { 0.0 } - out_row[j]);
                }
                py
            }
        }
    }
}

/// Per-group surrogate sums F_a, their exact gradients, and subset counts
/// n'_a over the conditioning subset d' of the batch.
pub fn surrogate_and_grad(
    model: &ModelParams,
    batch: &Batch,
    spec: &FairnessSpec,
) -> Result<Vec<GroupSurrogate>> {
    let pass = forward_cached(model, batch)?;
    surrogate_from_pass(model, batch, spec, &pass)
}

fn surrogate_from_pass(
    model: &ModelParams,
    batch: &Batch,
    spec: &FairnessSpec,
    pass: &ForwardPass,
) -> Result<Vec<GroupSurrogate>> {
    spec.validate()?;
    if spec.metric == FairnessMetric::FnrParity && !model.arch.is_binary() {
        return Err(Error::InvalidConfig(
            "FNR parity requires a binary (sigmoid) model".into(),
        ));
    }
    if let Some(&g) = batch.groups.iter().find(|&&g| g as usize >= spec.group_count) {
        return Err(Error::DimensionMismatch(format!(
            "group id {g} out of range for {} groups",
            spec.group_count
        )));
    }
    let binary = model.arch.is_binary();
    let out_dim = pass.output.ncols();
    let n = batch.len();
    let p = model.param_count();
    let rows = super::conditioning_rows(batch, spec);

    let mut result = Vec::with_capacity(spec.group_count);
    for a in 0..spec.group_count as u32 {
        let group_rows: Vec<usize> = rows
            .iter()
            .copied()
            .filter(|&i| batch.groups[i] == a)
            .collect();
        if group_rows.is_empty() {
            result.push(GroupSurrogate {
                f_sum: 0.0,
                grad: vec![0.0; p],
                count: 0,
            });
            continue;
        }
        let mut f_sum = 0.0;
        let mut delta = Array2::zeros((n, out_dim));
        for &i in &group_rows {
            let mut row = vec![0.0; out_dim];
            f_sum += surrogate_row(
                spec.metric,
                binary,
                pass.output.row(i),
                batch.labels[i],
                &mut row,
            );
            delta.row_mut(i).assign(&ndarray::ArrayView1::from(&row));
        }
        let grad = backward(model, pass, delta);
        result.push(GroupSurrogate {
            f_sum,
            grad,
            count: group_rows.len(),
        });
    }
    Ok(result)
}

/// One forward pass feeding both the loss gradient and the per-group
/// surrogates; what a participant computes on its local data.
pub fn statistics_pass(
    model: &ModelParams,
    batch: &Batch,
    spec: &FairnessSpec,
) -> Result<(f64, Vec<f64>, Vec<GroupSurrogate>)> {
    let pass = forward_cached(model, batch)?;
    let (loss, delta) = loss_delta(model, &pass.output, &batch.labels);
    if !loss.is_finite() {
        return Err(Error::NonFinite("loss".into()));
    }
    let grad = backward(model, &pass, delta);
    let surrogates = surrogate_from_pass(model, batch, spec, &pass)?;
    Ok((loss, grad, surrogates))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{init_params, ArchitectureSpec, InputShape};
    use ndarray::Array2;

    fn tabular_batch(x: Vec<Vec<f64>>, labels: Vec<u32>, groups: Vec<u32>) -> Batch {
        let n = x.len();
        let d = x[0].len();
        let flat: Vec<f64> = x.into_iter().flatten().collect();
        Batch {
            features: Features::Tabular(Array2::from_shape_vec((n, d), flat).unwrap()),
            labels,
            groups,
        }
    }

    fn random_batch(n: usize, d: usize, classes: u32, groups: u32, seed: u64) -> Batch {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(seed);
        let x: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let labels = (0..n).map(|_| rng.random_range(0..classes)).collect();
        let gs = (0..n).map(|_| rng.random_range(0..groups)).collect();
        tabular_batch(x, labels, gs)
    }

    #[test]
    fn zero_weights_sigmoid_outputs_half() {
        let arch = ArchitectureSpec::shallow_mlp(4);
        let model = ModelParams {
            arch,
            weights: vec![0.0; ArchitectureSpec::shallow_mlp(4).param_count()],
        };
        let batch = random_batch(5, 4, 2, 2, 0);
        let out = forward(&model, &batch).unwrap();
        for &p in out.iter() {
            assert_eq!(p, 0.5);
        }
    }

    #[test]
    fn zero_weights_softmax_uniform() {
        let arch = ArchitectureSpec {
            input: InputShape::Flat(3),
            layers: vec![LayerSpec::Dense {
                input: 3,
                output: 10,
                activation: Activation::Softmax,
            }],
        };
        let model = ModelParams {
            weights: vec![0.0; arch.param_count()],
            arch,
        };
        let batch = random_batch(4, 3, 10, 1, 1);
        let out = forward(&model, &batch).unwrap();
        for &p in out.iter() {
            assert!((p - 0.1).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let arch = ArchitectureSpec {
            input: InputShape::Flat(6),
            layers: vec![
                LayerSpec::Dense {
                    input: 6,
                    output: 8,
                    activation: Activation::Relu,
                },
                LayerSpec::Dense {
                    input: 8,
                    output: 5,
                    activation: Activation::Softmax,
                },
            ],
        };
        let model = init_params(&arch, 3).unwrap();
        let batch = random_batch(20, 6, 5, 1, 2);
        let out = forward(&model, &batch).unwrap();
        for row in out.rows() {
            let s: f64 = row.sum();
            assert!((s - 1.0).abs() < 1e-6, "row sum {s}");
        }
    }

    #[test]
    fn duplicating_batch_doubles_loss_and_grad() {
        let arch = ArchitectureSpec::shallow_mlp(4);
        let model = init_params(&arch, 11).unwrap();
        let batch = random_batch(6, 4, 2, 2, 5);
        let rows: Vec<usize> = (0..6).chain(0..6).collect();
        let doubled = batch.select(&rows);
        let (l1, g1) = loss_and_grad(&model, &batch).unwrap();
        let (l2, g2) = loss_and_grad(&model, &doubled).unwrap();
        assert!((l2 - 2.0 * l1).abs() < 1e-12 * l1.abs().max(1.0));
        for (a, b) in g1.iter().zip(&g2) {
            assert!((b - 2.0 * a).abs() < 1e-9 * a.abs().max(1e-9));
        }
    }

    #[test]
    fn confident_prediction_has_near_zero_loss_and_grad() {
        // Single dense sigmoid unit driven far positive on a y=1 example.
        let arch = ArchitectureSpec {
            input: InputShape::Flat(1),
            layers: vec![LayerSpec::Dense {
                input: 1,
                output: 1,
                activation: Activation::Sigmoid,
            }],
        };
        let model = ModelParams {
            arch,
            weights: vec![30.0, 0.0],
        };
        let batch = tabular_batch(vec![vec![1.0]], vec![1], vec![0]);
        let (loss, grad) = loss_and_grad(&model, &batch).unwrap();
        assert!(loss < 1e-10, "loss {loss}");
        assert!(crate::vecops::l2_norm(&grad) < 1e-10);
    }

    #[test]
    fn empty_batch_rejected() {
        let arch = ArchitectureSpec::shallow_mlp(2);
        let model = init_params(&arch, 0).unwrap();
        let batch = Batch {
            features: Features::Tabular(Array2::zeros((0, 2))),
            labels: vec![],
            groups: vec![],
        };
        assert!(matches!(
            loss_and_grad(&model, &batch),
            Err(Error::EmptyBatch)
        ));
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let arch = ArchitectureSpec::shallow_mlp(3);
        let model = init_params(&arch, 0).unwrap();
        let batch = random_batch(4, 5, 2, 2, 0);
        assert!(forward(&model, &batch).is_err());
    }

    #[test]
    fn constant_half_model_fnr_surrogate_ratio_half() {
        let arch = ArchitectureSpec::shallow_mlp(4);
        let model = ModelParams {
            weights: vec![0.0; arch.param_count()],
            arch,
        };
        let batch = random_batch(40, 4, 2, 3, 9);
        let spec = FairnessSpec::new(FairnessMetric::FnrParity, 3, 0.02).unwrap();
        let surr = surrogate_and_grad(&model, &batch, &spec).unwrap();
        for s in &surr {
            if s.count > 0 {
                assert!((s.f_sum / s.count as f64 - 0.5).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn absent_group_yields_zeros() {
        let arch = ArchitectureSpec::shallow_mlp(4);
        let model = init_params(&arch, 2).unwrap();
        // all rows in group 0, while two groups are declared
        let batch = random_batch(10, 4, 2, 1, 3);
        let spec = FairnessSpec::new(FairnessMetric::FnrParity, 2, 0.02).unwrap();
        let surr = surrogate_and_grad(&model, &batch, &spec).unwrap();
        assert_eq!(surr[1].count, 0);
        assert_eq!(surr[1].f_sum, 0.0);
        assert!(surr[1].grad.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn user_without_positives_has_zero_fnr_blocks_but_nonzero_loss_grad() {
        let arch = ArchitectureSpec::shallow_mlp(4);
        let model = init_params(&arch, 2).unwrap();
        let mut batch = random_batch(10, 4, 2, 2, 3);
        batch.labels.iter_mut().for_each(|l| *l = 0);
        let spec = FairnessSpec::new(FairnessMetric::FnrParity, 2, 0.02).unwrap();
        let (_, grad, surr) = statistics_pass(&model, &batch, &spec).unwrap();
        assert!(crate::vecops::l2_norm(&grad) > 0.0);
        for s in &surr {
            assert_eq!(s.count, 0);
            assert!(s.grad.iter().all(|&g| g == 0.0));
        }
    }

    /// Central finite difference of an arbitrary scalar function of the model.
    fn finite_diff(
        model: &ModelParams,
        f: &dyn Fn(&ModelParams) -> f64,
        step: f64,
    ) -> Vec<f64> {
        let mut grad = vec![0.0; model.param_count()];
        for i in 0..model.param_count() {
            let mut plus = model.clone();
            plus.weights[i] += step;
            let mut minus = model.clone();
            minus.weights[i] -= step;
            grad[i] = (f(&plus) - f(&minus)) / (2.0 * step);
        }
        grad
    }

    fn assert_grad_close(analytic: &[f64], numeric: &[f64], tol: f64) {
        for (i, (a, n)) in analytic.iter().zip(numeric).enumerate() {
            let denom = a.abs().max(n.abs()).max(1e-6);
            let rel = (a - n).abs() / denom;
            assert!(rel < tol, "param {i}: analytic {a}, numeric {n}, rel {rel}");
        }
    }

    #[test]
    fn loss_gradient_matches_finite_differences() {
        let arch = ArchitectureSpec {
            input: InputShape::Flat(3),
            layers: vec![
                LayerSpec::Dense {
                    input: 3,
                    output: 4,
                    activation: Activation::Sigmoid,
                },
                LayerSpec::Dense {
                    input: 4,
                    output: 1,
                    activation: Activation::Sigmoid,
                },
            ],
        };
        let model = init_params(&arch, 21).unwrap();
        let batch = random_batch(8, 3, 2, 2, 22);
        let (_, grad) = loss_and_grad(&model, &batch).unwrap();
        let fd = finite_diff(&model, &|m| loss_and_grad(m, &batch).unwrap().0, 1e-5);
        assert_grad_close(&grad, &fd, 1e-4);
    }

    #[test]
    fn surrogate_gradients_match_finite_differences() {
        let arch = ArchitectureSpec {
            input: InputShape::Flat(4),
            layers: vec![
                LayerSpec::Dense {
                    input: 4,
                    output: 3,
                    activation: Activation::Sigmoid,
                },
                LayerSpec::Dense {
                    input: 3,
                    output: 1,
                    activation: Activation::Sigmoid,
                },
            ],
        };
        let model = init_params(&arch, 31).unwrap();
        let batch = random_batch(12, 4, 2, 2, 32);
        let spec = FairnessSpec::new(FairnessMetric::FnrParity, 2, 0.02).unwrap();
        let surr = surrogate_and_grad(&model, &batch, &spec).unwrap();
        for (a, s) in surr.iter().enumerate() {
            if s.count == 0 {
                continue;
            }
            let fd = finite_diff(
                &model,
                &|m| surrogate_and_grad(m, &batch, &spec).unwrap()[a].f_sum,
                1e-5,
            );
            assert_grad_close(&s.grad, &fd, 1e-4);
        }
    }

    #[test]
    fn multiclass_loss_and_accuracy_surrogate_match_finite_differences() {
        let arch = ArchitectureSpec {
            input: InputShape::Flat(3),
            layers: vec![
                LayerSpec::Dense {
                    input: 3,
                    output: 4,
                    activation: Activation::Sigmoid,
                },
                LayerSpec::Dense {
                    input: 4,
                    output: 3,
                    activation: Activation::Softmax,
                },
            ],
        };
        let model = init_params(&arch, 41).unwrap();
        let batch = random_batch(9, 3, 3, 3, 42);
        let (_, grad) = loss_and_grad(&model, &batch).unwrap();
        let fd = finite_diff(&model, &|m| loss_and_grad(m, &batch).unwrap().0, 1e-5);
        assert_grad_close(&grad, &fd, 1e-4);

        let spec = FairnessSpec::new(FairnessMetric::AccuracyParity, 3, 0.04).unwrap();
        let surr = surrogate_and_grad(&model, &batch, &spec).unwrap();
        for (a, s) in surr.iter().enumerate() {
            if s.count == 0 {
                continue;
            }
            let fd = finite_diff(
                &model,
                &|m| surrogate_and_grad(m, &batch, &spec).unwrap()[a].f_sum,
                1e-5,
            );
            assert_grad_close(&s.grad, &fd, 1e-4);
        }
    }

    #[test]
    fn conv_gradient_matches_finite_differences() {
        let arch = ArchitectureSpec {
            input: InputShape::Image {
                channels: 1,
                height: 8,
                width: 8,
            },
            layers: vec![
                LayerSpec::Conv2d {
                    in_channels: 1,
                    out_channels: 2,
                    kernel: 3,
                    stride: 2,
                    activation: Activation::Sigmoid,
                },
                LayerSpec::Dense {
                    input: 2 * 3 * 3,
                    output: 3,
                    activation: Activation::Softmax,
                },
            ],
        };
        let model = init_params(&arch, 51).unwrap();
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(52);
        let n = 4;
        let imgs =
            Array4::from_shape_fn((n, 1, 8, 8), |_| rng.random_range(-1.0..1.0f64));
        let batch = Batch {
            features: Features::Images(imgs),
            labels: (0..n as u32).map(|i| i % 3).collect(),
            groups: vec![0; n],
        };
        let (_, grad) = loss_and_grad(&model, &batch).unwrap();
        let fd = finite_diff(&model, &|m| loss_and_grad(m, &batch).unwrap().0, 1e-5);
        assert_grad_close(&grad, &fd, 1e-4);
    }

    #[test]
    fn conv_forward_matches_direct_convolution_reference() {
        let arch = ArchitectureSpec {
            input: InputShape::Image {
                channels: 2,
                height: 8,
                width: 8,
            },
            layers: vec![
                LayerSpec::Conv2d {
                    in_channels: 2,
                    out_channels: 3,
                    kernel: 5,
                    stride: 2,
                    activation: Activation::Relu,
                },
                LayerSpec::Dense {
                    input: 3 * 2 * 2,
                    output: 1,
                    activation: Activation::Sigmoid,
                },
            ],
        };
        let model = init_params(&arch, 61).unwrap();
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(62);
        let img = Array4::from_shape_fn((1, 2, 8, 8), |_| rng.random_range(0.0..1.0f64));

        // Direct convolution, no im2col.
        let off = model.arch.layer_offsets();
        let wconv = &model.weights[off[0].w_start..off[0].w_start + off[0].w_len];
        let bconv = &model.weights[off[0].b_start..off[0].b_start + off[0].b_len];
        let (k, stride) = (5usize, 2usize);
        let mut conv_out = vec![0.0; 3 * 2 * 2];
        for oc in 0..3 {
            for oy in 0..2 {
                for ox in 0..2 {
                    let mut acc = bconv[oc];
                    for ic in 0..2 {
                        for ky in 0..k {
                            for kx in 0..k {
                                let wv = wconv[((oc * 2 + ic) * k + ky) * k + kx];
                                acc += wv * img[[0, ic, oy * stride + ky, ox * stride + kx]];
                            }
                        }
                    }
                    conv_out[(oc * 2 + oy) * 2 + ox] = acc.max(0.0);
                }
            }
        }
        let wd = &model.weights[off[1].w_start..off[1].w_start + off[1].w_len];
        let bd = model.weights[off[1].b_start];
        let z: f64 = conv_out.iter().zip(wd).map(|(a, w)| a * w).sum::<f64>() + bd;
        let expect = 1.0 / (1.0 + (-z).exp());

        let batch = Batch {
            features: Features::Images(img),
            labels: vec![0],
            groups: vec![0],
        };
        let out = forward(&model, &batch).unwrap();
        assert!((out[[0, 0]] - expect).abs() < 1e-12);
    }

    #[test]
    fn forward_is_pure() {
        let arch = ArchitectureSpec::deep_mlp(5);
        let model = init_params(&arch, 77).unwrap();
        let batch = random_batch(7, 5, 2, 2, 78);
        let a = forward(&model, &batch).unwrap();
        let b = forward(&model, &batch).unwrap();
        assert_eq!(a, b);
    }
}
