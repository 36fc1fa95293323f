use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::arch::{ArchPlan, Layer, ModelArch};
use super::data::{Batch, Dataset};
use super::params::{Gradient, LayerParams, ParameterSet};
use super::ModelError;
use crate::tensor::Tensor;

/// Examples per forward chunk when evaluating without gradients.
const EVAL_CHUNK: usize = 256;

/// A validated architecture with the forward and backward passes.
#[derive(Debug, Clone)]
pub struct Model {
    arch: ModelArch,
    plan: ArchPlan,
}

/// Activations kept from a forward pass for the backward pass.
struct Trace {
    /// `acts[i]` is the batch input of layer `i`; the last entry holds logits.
    acts: Vec<Vec<f64>>,
    /// im2col buffers of convolution layers.
    cols: Vec<Vec<f64>>,
    /// Argmax offsets of pooling layers, relative to each example's input.
    pool_idx: Vec<Vec<u32>>,
}

impl Model {
    pub fn new(arch: ModelArch) -> Result<Self, ModelError> {
        let plan = arch.plan()?;
        Ok(Self { arch, plan })
    }

    pub fn arch(&self) -> &ModelArch {
        &self.arch
    }

    pub fn input_len(&self) -> usize {
        self.arch.input_shape.iter().product()
    }

    /// Expected `(id, weight shape, bias len)` of each parameterized layer.
    pub fn param_layout(&self) -> Vec<(String, Vec<usize>, usize)> {
        self.arch
            .layers
            .iter()
            .zip(&self.plan.param_ids)
            .filter_map(|(layer, id)| {
                let id = id.clone()?;
                match *layer {
                    Layer::Dense { inputs, outputs } => Some((id, vec![outputs, inputs], outputs)),
                    Layer::Conv2d { in_channels, out_channels, kernel, .. } => {
                        Some((id, vec![out_channels, in_channels, kernel, kernel], out_channels))
                    }
                    _ => None,
                }
            })
            .collect()
    }

    pub fn num_params(&self) -> usize {
        self.param_layout().iter().map(|(_, w, b)| w.iter().product::<usize>() + b).sum()
    }

    /// Scaled-uniform fan-in initialization: each weight is drawn from
    /// `U(-sqrt(6 / fan_in), sqrt(6 / fan_in))`, biases start at zero.
    pub fn init_params(&self, seed: u64) -> ParameterSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = self
            .param_layout()
            .into_iter()
            .map(|(id, wshape, blen)| {
                let fan_in: usize = wshape[1..].iter().product();
                let bound = (6.0 / fan_in as f64).sqrt();
                let n = wshape.iter().product();
                let data = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
                LayerParams {
                    id,
                    weight: Tensor::new(wshape, data).expect("layout shapes are consistent"),
                    bias: Tensor::zeros(&[blen]),
                }
            })
            .collect();
        ParameterSet::new(layers).expect("layer ids are unique")
    }

    pub fn check_params(&self, params: &ParameterSet) -> Result<(), ModelError> {
        let layout = self.param_layout();
        if layout.len() != params.layers().len() {
            return Err(ModelError::ParamMismatch(format!(
                "expected {} parameterized layers, got {}",
                layout.len(),
                params.layers().len()
            )));
        }
        for ((id, wshape, blen), p) in layout.iter().zip(params.layers()) {
            if &p.id != id || p.weight.shape() != wshape.as_slice() || p.bias.shape() != [*blen] {
                return Err(ModelError::ParamMismatch(format!(
                    "layer {id}: expected weight {wshape:?} and bias [{blen}], got {} {:?} {:?}",
                    p.id,
                    p.weight.shape(),
                    p.bias.shape()
                )));
            }
        }
        Ok(())
    }

    fn check_batch(&self, batch: &Batch) -> Result<(), ModelError> {
        let shape = batch.inputs().shape();
        if shape[1..] != self.arch.input_shape[..] {
            return Err(ModelError::InputShape {
                expected: self.arch.input_shape.clone(),
                actual: shape[1..].to_vec(),
            });
        }
        if let Some(&bad) = batch.labels().iter().find(|&&l| l >= self.arch.num_classes) {
            return Err(ModelError::LabelOutOfRange { label: bad, classes: self.arch.num_classes });
        }
        Ok(())
    }

    /// Mean softmax cross-entropy of the batch and the `B × classes` logits.
    pub fn forward_loss(&self, params: &ParameterSet, batch: &Batch) -> Result<(f64, Tensor), ModelError> {
        self.check_params(params)?;
        self.check_batch(batch)?;
        let trace = self.forward(params, batch.inputs().data(), batch.len(), false);
        let logits = trace.acts.into_iter().last().unwrap();
        let (loss, _) = softmax_cross_entropy(&logits, batch.labels(), self.arch.num_classes);
        let logits = Tensor::new(vec![batch.len(), self.arch.num_classes], logits)?;
        Ok((loss, logits))
    }

    /// Exact gradient of [`Model::forward_loss`] with respect to every parameter.
    pub fn backward(&self, params: &ParameterSet, batch: &Batch) -> Result<Gradient, ModelError> {
        self.loss_and_gradient(params, batch).map(|(_, g)| g)
    }

    pub fn loss_and_gradient(
        &self,
        params: &ParameterSet,
        batch: &Batch,
    ) -> Result<(f64, Gradient), ModelError> {
        self.check_params(params)?;
        self.check_batch(batch)?;
        let b = batch.len();
        let trace = self.forward(params, batch.inputs().data(), b, true);
        let (loss, dlogits) =
            softmax_cross_entropy(trace.acts.last().unwrap(), batch.labels(), self.arch.num_classes);
        let grad = self.backprop(params, &trace, dlogits, b);
        Ok((loss, grad))
    }

    /// Predicted class of each example in a flat `count × input` buffer.
    pub fn predict(&self, params: &ParameterSet, inputs: &[f64], count: usize) -> Vec<usize> {
        let logits = self.forward(params, inputs, count, false).acts.pop().unwrap();
        logits.chunks_exact(self.arch.num_classes).map(argmax).collect()
    }

    /// Fraction of examples whose argmax prediction equals the label.
    pub fn evaluate(&self, params: &ParameterSet, data: &Dataset) -> Result<f64, ModelError> {
        self.evaluate_subset(params, data, data.len())
    }

    /// Accuracy over the first `limit` examples of `data`.
    pub fn evaluate_subset(
        &self,
        params: &ParameterSet,
        data: &Dataset,
        limit: usize,
    ) -> Result<f64, ModelError> {
        self.check_params(params)?;
        let n = limit.min(data.len());
        if n == 0 {
            return Err(ModelError::EmptyDataset);
        }
        if data.input_shape() != self.arch.input_shape.as_slice() {
            return Err(ModelError::InputShape {
                expected: self.arch.input_shape.clone(),
                actual: data.input_shape().to_vec(),
            });
        }
        let mut correct = 0usize;
        let mut start = 0;
        while start < n {
            let end = (start + EVAL_CHUNK).min(n);
            let inputs = data.features_f64(start..end);
            let preds = self.predict(params, &inputs, end - start);
            correct +=
                preds.iter().zip(&data.labels()[start..end]).filter(|(p, l)| **p == **l as usize).count();
            start = end;
        }
        Ok(correct as f64 / n as f64)
    }

    fn forward(&self, params: &ParameterSet, input: &[f64], b: usize, keep: bool) -> Trace {
        let mut trace = Trace {
            acts: Vec::with_capacity(self.arch.layers.len() + 1),
            cols: Vec::new(),
            pool_idx: Vec::new(),
        };
        let mut cur = input.to_vec();
        let mut slot = 0;
        for (i, layer) in self.arch.layers.iter().enumerate() {
            let in_shape = &self.plan.shapes[i];
            let out_shape = &self.plan.shapes[i + 1];
            let next = match *layer {
                Layer::Dense { inputs, outputs } => {
                    let p = &params.layers()[slot];
                    slot += 1;
                    dense_forward(&cur, p, b, inputs, outputs)
                }
                Layer::Conv2d { kernel, stride, .. } => {
                    let p = &params.layers()[slot];
                    slot += 1;
                    let (out, cols) = conv_forward(&cur, p, b, in_shape, out_shape, kernel, stride);
                    if keep {
                        trace.cols.push(cols);
                    }
                    out
                }
                Layer::Relu => cur.iter().map(|&v| v.max(0.0)).collect(),
                Layer::MaxPool { size } => {
                    let (out, idx) = maxpool_forward(&cur, b, in_shape, out_shape, size);
                    if keep {
                        trace.pool_idx.push(idx);
                    }
                    out
                }
                Layer::Flatten => cur.clone(),
            };
            if keep {
                trace.acts.push(cur);
            }
            cur = next;
        }
        trace.acts.push(cur);
        trace
    }

    fn backprop(&self, params: &ParameterSet, trace: &Trace, dlogits: Vec<f64>, b: usize) -> Gradient {
        let mut grad = params.zeros_like();
        let mut slot = params.layers().len();
        let mut conv_i = trace.cols.len();
        let mut pool_i = trace.pool_idx.len();
        let mut delta = dlogits;
        for (i, layer) in self.arch.layers.iter().enumerate().rev() {
            let in_shape = &self.plan.shapes[i];
            let out_shape = &self.plan.shapes[i + 1];
            let need_input_grad = i > 0;
            delta = match *layer {
                Layer::Dense { inputs, outputs } => {
                    slot -= 1;
                    let g = &mut grad.layers_mut()[slot];
                    dense_backward(
                        &trace.acts[i],
                        &delta,
                        &params.layers()[slot],
                        g,
                        b,
                        inputs,
                        outputs,
                        need_input_grad,
                    )
                }
                Layer::Conv2d { kernel, stride, .. } => {
                    slot -= 1;
                    conv_i -= 1;
                    let g = &mut grad.layers_mut()[slot];
                    conv_backward(
                        &trace.cols[conv_i],
                        &delta,
                        &params.layers()[slot],
                        g,
                        b,
                        in_shape,
                        out_shape,
                        kernel,
                        stride,
                        need_input_grad,
                    )
                }
                Layer::Relu => delta
                    .iter()
                    .zip(&trace.acts[i + 1])
                    .map(|(d, out)| if *out > 0.0 { *d } else { 0.0 })
                    .collect(),
                Layer::MaxPool { .. } => {
                    pool_i -= 1;
                    maxpool_backward(&delta, &trace.pool_idx[pool_i], b, in_shape, out_shape)
                }
                Layer::Flatten => delta,
            };
        }
        grad
    }
}

/// `C = A·B + beta·C` over strided row/column views.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
    (rsc, csc): (usize, usize),
) {
    if m == 0 || n == 0 {
        return;
    }
    let last = |rows: usize, cols: usize, rs: usize, cs: usize| (rows - 1) * rs + (cols - 1) * cs;
    if k > 0 {
        assert!(last(m, k, rsa, csa) < a.len() && last(k, n, rsb, csb) < b.len());
    }
    assert!(last(m, n, rsc, csc) < c.len());
    // SAFETY: the asserts above keep every strided access inside the slices.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        );
    }
}

fn dense_forward(x: &[f64], p: &LayerParams, b: usize, inputs: usize, outputs: usize) -> Vec<f64> {
    let bias = p.bias.data();
    let mut out: Vec<f64> = (0..b).flat_map(|_| bias.iter().copied()).collect();
    // out[B, out] += X[B, in] · W^T where W is stored [out, in]
    gemm(b, inputs, outputs, x, (inputs, 1), p.weight.data(), (1, inputs), 1.0, &mut out, (outputs, 1));
    out
}

#[allow(clippy::too_many_arguments)]
fn dense_backward(
    x: &[f64],
    delta: &[f64],
    p: &LayerParams,
    g: &mut LayerParams,
    b: usize,
    inputs: usize,
    outputs: usize,
    need_input_grad: bool,
) -> Vec<f64> {
    // dW[out, in] = delta^T · X
    gemm(outputs, b, inputs, delta, (1, outputs), x, (inputs, 1), 0.0, g.weight.data_mut(), (inputs, 1));
    let db = g.bias.data_mut();
    for row in delta.chunks_exact(outputs) {
        for (acc, d) in db.iter_mut().zip(row) {
            *acc += d;
        }
    }
    if !need_input_grad {
        return Vec::new();
    }
    let mut dx = vec![0.0; b * inputs];
    gemm(b, outputs, inputs, delta, (outputs, 1), p.weight.data(), (inputs, 1), 0.0, &mut dx, (inputs, 1));
    dx
}

fn im2col(x: &[f64], in_shape: &[usize], out_shape: &[usize], k: usize, s: usize, cols: &mut [f64]) {
    let (c_in, h, w) = (in_shape[0], in_shape[1], in_shape[2]);
    let (oh, ow) = (out_shape[1], out_shape[2]);
    let n = oh * ow;
    for c in 0..c_in {
        for ki in 0..k {
            for kj in 0..k {
                let row = &mut cols[((c * k + ki) * k + kj) * n..][..n];
                for oy in 0..oh {
                    let src = &x[c * h * w + (oy * s + ki) * w + kj..];
                    let dst = &mut row[oy * ow..(oy + 1) * ow];
                    if s == 1 {
                        dst.copy_from_slice(&src[..ow]);
                    } else {
                        for (ox, d) in dst.iter_mut().enumerate() {
                            *d = src[ox * s];
                        }
                    }
                }
            }
        }
    }
}

fn col2im(cols: &[f64], in_shape: &[usize], out_shape: &[usize], k: usize, s: usize, dx: &mut [f64]) {
    let (c_in, h, w) = (in_shape[0], in_shape[1], in_shape[2]);
    let (oh, ow) = (out_shape[1], out_shape[2]);
    let n = oh * ow;
    for c in 0..c_in {
        for ki in 0..k {
            for kj in 0..k {
                let row = &cols[((c * k + ki) * k + kj) * n..][..n];
                for oy in 0..oh {
                    let base = c * h * w + (oy * s + ki) * w + kj;
                    for ox in 0..ow {
                        dx[base + ox * s] += row[oy * ow + ox];
                    }
                }
            }
        }
    }
}

fn conv_forward(
    x: &[f64],
    p: &LayerParams,
    b: usize,
    in_shape: &[usize],
    out_shape: &[usize],
    k: usize,
    s: usize,
) -> (Vec<f64>, Vec<f64>) {
    let in_len: usize = in_shape.iter().product();
    let oc = out_shape[0];
    let n = out_shape[1] * out_shape[2];
    let kk = in_shape[0] * k * k;
    let mut cols = vec![0.0; b * kk * n];
    let mut out = vec![0.0; b * oc * n];
    let bias = p.bias.data();
    for e in 0..b {
        let col = &mut cols[e * kk * n..(e + 1) * kk * n];
        im2col(&x[e * in_len..(e + 1) * in_len], in_shape, out_shape, k, s, col);
        let o = &mut out[e * oc * n..(e + 1) * oc * n];
        for (row, bv) in o.chunks_exact_mut(n).zip(bias) {
            row.fill(*bv);
        }
        gemm(oc, kk, n, p.weight.data(), (kk, 1), col, (n, 1), 1.0, o, (n, 1));
    }
    (out, cols)
}

#[allow(clippy::too_many_arguments)]
fn conv_backward(
    cols: &[f64],
    delta: &[f64],
    p: &LayerParams,
    g: &mut LayerParams,
    b: usize,
    in_shape: &[usize],
    out_shape: &[usize],
    k: usize,
    s: usize,
    need_input_grad: bool,
) -> Vec<f64> {
    let in_len: usize = in_shape.iter().product();
    let oc = out_shape[0];
    let n = out_shape[1] * out_shape[2];
    let kk = in_shape[0] * k * k;
    let mut dx = if need_input_grad { vec![0.0; b * in_len] } else { Vec::new() };
    let mut dcols = vec![0.0; kk * n];
    for e in 0..b {
        let d = &delta[e * oc * n..(e + 1) * oc * n];
        let col = &cols[e * kk * n..(e + 1) * kk * n];
        // dW[oc, K] += delta[oc, N] · cols^T
        gemm(oc, n, kk, d, (n, 1), col, (1, n), 1.0, g.weight.data_mut(), (kk, 1));
        for (acc, row) in g.bias.data_mut().iter_mut().zip(d.chunks_exact(n)) {
            *acc += row.iter().sum::<f64>();
        }
        if need_input_grad {
            // dcols[K, N] = W^T · delta
            gemm(kk, oc, n, p.weight.data(), (1, kk), d, (n, 1), 0.0, &mut dcols, (n, 1));
            col2im(&dcols, in_shape, out_shape, k, s, &mut dx[e * in_len..(e + 1) * in_len]);
        }
    }
    dx
}

fn maxpool_forward(
    x: &[f64],
    b: usize,
    in_shape: &[usize],
    out_shape: &[usize],
    size: usize,
) -> (Vec<f64>, Vec<u32>) {
    let (c, h, w) = (in_shape[0], in_shape[1], in_shape[2]);
    let (oh, ow) = (out_shape[1], out_shape[2]);
    let in_len = c * h * w;
    let mut out = Vec::with_capacity(b * c * oh * ow);
    let mut idx = Vec::with_capacity(out.capacity());
    for e in 0..b {
        let xe = &x[e * in_len..(e + 1) * in_len];
        for ch in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = ch * h * w + oy * size * w + ox * size;
                    for dy in 0..size {
                        for dx in 0..size {
                            let at = ch * h * w + (oy * size + dy) * w + ox * size + dx;
                            if xe[at] > xe[best] {
                                best = at;
                            }
                        }
                    }
                    out.push(xe[best]);
                    idx.push(best as u32);
                }
            }
        }
    }
    (out, idx)
}

fn maxpool_backward(
    delta: &[f64],
    idx: &[u32],
    b: usize,
    in_shape: &[usize],
    out_shape: &[usize],
) -> Vec<f64> {
    let in_len: usize = in_shape.iter().product();
    let out_len: usize = out_shape.iter().product();
    let mut dx = vec![0.0; b * in_len];
    for e in 0..b {
        let dxe = &mut dx[e * in_len..(e + 1) * in_len];
        for j in 0..out_len {
            dxe[idx[e * out_len + j] as usize] += delta[e * out_len + j];
        }
    }
    dx
}

/// Mean cross-entropy of softmax(logits) and its gradient w.r.t. the logits.
pub(crate) fn softmax_cross_entropy(logits: &[f64], labels: &[usize], classes: usize) -> (f64, Vec<f64>) {
    let b = labels.len();
    let mut loss = 0.0;
    let mut grad = vec![0.0; logits.len()];
    for (e, (row, &y)) in logits.chunks_exact(classes).zip(labels).enumerate() {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        loss += lse - row[y];
        let g = &mut grad[e * classes..(e + 1) * classes];
        for (gv, v) in g.iter_mut().zip(row) {
            *gv = (v - lse).exp() / b as f64;
        }
        g[y] -= 1.0 / b as f64;
    }
    (loss / b as f64, grad)
}

/// Index of the largest value; the first one wins ties.
pub(crate) fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}
