//! Convolutional surrogate mapping a bitmap to a scalar, with hand-written
//! reverse-mode gradients.
//!
//! Activations are stored channel-major over the whole batch (`C × N × H × W`)
//! so each convolution is a single GEMM against an im2col matrix.

mod checkpoint;
mod gradcheck;
mod optim;
mod scratch;
mod train;

use serde::{Deserialize, Serialize};

pub use checkpoint::{Checkpoint, NormStats, TrainProvenance, CHECKPOINT_MAGIC};
pub use gradcheck::{activation_pattern, gradient_check, GradCheckReport};
pub use optim::{Adam, AdamState};
pub use train::{
    backward_and_step, evaluate, evaluate_samples, pattern_inputs, train, write_history_csv, Evaluation,
    HistoryRow, TrainConfig,
};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use scratch::Buf;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Padding {
    Same,
    Valid,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub out_channels: usize,
    pub kernel_size: usize,
    pub padding: Padding,
    pub batchnorm: bool,
    pub relu: bool,
    /// 2×2 max pooling with stride 2 after the activation.
    pub maxpool: bool,
}

impl ConvSpec {
    fn hidden(out_channels: usize, kernel_size: usize, padding: Padding, maxpool: bool) -> Self {
        Self {
            out_channels,
            kernel_size,
            padding,
            batchnorm: true,
            relu: true,
            maxpool,
        }
    }

    fn last(out_channels: usize, kernel_size: usize) -> Self {
        Self {
            out_channels,
            kernel_size,
            padding: Padding::Valid,
            batchnorm: false,
            relu: false,
            maxpool: false,
        }
    }
}

/// Stack of convolutions followed by an affine head onto one scalar.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchitectureSpec {
    pub name: String,
    pub input_size: usize,
    pub conv_layers: Vec<ConvSpec>,
}

/// Spatial bookkeeping for one conv layer at a given input size.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerShape {
    pub in_channels: usize,
    pub in_size: usize,
    /// Size after the convolution.
    pub conv_size: usize,
    /// Size after optional pooling.
    pub out_size: usize,
}

impl ArchitectureSpec {
    /// Three pooled same-padded layers then two valid ones; 15,589 parameters.
    pub fn desk3() -> Self {
        use Padding::*;
        Self {
            name: "desk3".into(),
            input_size: 64,
            conv_layers: vec![
                ConvSpec::hidden(8, 3, Same, true),
                ConvSpec::hidden(16, 3, Same, true),
                ConvSpec::hidden(32, 3, Same, true),
                ConvSpec::hidden(32, 3, Valid, false),
                ConvSpec::last(4, 1),
            ],
        }
    }

    /// Nine layers, pooling after the first three.
    pub fn paper9() -> Self {
        use Padding::*;
        Self {
            name: "paper9".into(),
            input_size: 64,
            conv_layers: vec![
                ConvSpec::hidden(32, 3, Same, true),
                ConvSpec::hidden(64, 3, Same, true),
                ConvSpec::hidden(128, 3, Same, true),
                ConvSpec::hidden(256, 3, Valid, false),
                ConvSpec::hidden(256, 3, Valid, false),
                ConvSpec::hidden(512, 3, Valid, false),
                ConvSpec::hidden(512, 2, Valid, false),
                ConvSpec::hidden(512, 1, Valid, false),
                ConvSpec::last(1, 1),
            ],
        }
    }

    pub fn by_name(name: &str) -> Result<Self> {
        match name {
            "desk3" => Ok(Self::desk3()),
            "paper9" => Ok(Self::paper9()),
            other => Err(Error::config("arch", format!("unknown preset `{other}`"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.shapes().map(|_| ())
    }

    /// Per-layer sizes; errors when a layer would collapse below 1×1.
    pub fn shapes(&self) -> Result<Vec<LayerShape>> {
        let bad = |msg: String| Err(Error::Architecture(format!("{}: {msg}", self.name)));
        if self.conv_layers.is_empty() {
            return bad("no conv layers".into());
        }
        if self.input_size == 0 {
            return bad("zero input size".into());
        }
        let last = self.conv_layers.len() - 1;
        let mut c = 1;
        let mut s = self.input_size;
        let mut out = Vec::with_capacity(self.conv_layers.len());
        for (i, l) in self.conv_layers.iter().enumerate() {
            if l.out_channels == 0 || l.kernel_size == 0 {
                return bad(format!("layer {i} has zero width or kernel"));
            }
            if i == last && (l.batchnorm || l.relu || l.maxpool) {
                return bad("last conv layer must be linear".into());
            }
            let conv = match l.padding {
                Padding::Same => {
                    if l.kernel_size % 2 == 0 {
                        return bad(format!("layer {i}: same padding needs an odd kernel"));
                    }
                    s
                }
                Padding::Valid => {
                    if l.maxpool {
                        return bad(format!("layer {i}: pooling only follows same-padded layers"));
                    }
                    if l.kernel_size > s {
                        return bad(format!("layer {i}: kernel {} exceeds input {s}", l.kernel_size));
                    }
                    s - l.kernel_size + 1
                }
            };
            let pooled = if l.maxpool { conv / 2 } else { conv };
            if pooled == 0 {
                return bad(format!("layer {i}: pooled to zero size"));
            }
            out.push(LayerShape {
                in_channels: c,
                in_size: s,
                conv_size: conv,
                out_size: pooled,
            });
            c = l.out_channels;
            s = pooled;
        }
        Ok(out)
    }

    /// Trainable parameter count: conv weights and biases, batchnorm scale
    /// and shift, and the head.
    pub fn n_params(&self) -> Result<usize> {
        let shapes = self.shapes()?;
        let mut n = 0;
        for (l, sh) in self.conv_layers.iter().zip(&shapes) {
            n += l.out_channels * (sh.in_channels * l.kernel_size * l.kernel_size + 1);
            if l.batchnorm {
                n += 2 * l.out_channels;
            }
        }
        let last = shapes.last().expect("non-empty");
        Ok(n + self.conv_layers.last().expect("non-empty").out_channels * last.out_size * last.out_size + 1)
    }
}

/// Named slice of the flat parameter or buffer vector.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamInfo {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub len: usize,
}

#[derive(Debug, Clone, PartialEq)]
struct LayerPlan {
    cin: usize,
    cout: usize,
    k: usize,
    pad: usize,
    hin: usize,
    hconv: usize,
    hout: usize,
    w: usize,
    b: usize,
    /// Offsets of gamma, beta and of the running mean/var buffers.
    bn: Option<(usize, usize, usize, usize)>,
    relu: bool,
    pool: bool,
}

/// Parameters, running statistics and the layout that ties them to layers.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    arch: ArchitectureSpec,
    plan: Vec<LayerPlan>,
    head_w: usize,
    head_b: usize,
    features: usize,
    params: Vec<f64>,
    buffers: Vec<f64>,
    param_info: Vec<ParamInfo>,
    buffer_info: Vec<ParamInfo>,
}

/// Per-channel batch statistics from a training-mode pass.
#[derive(Debug, Clone, Default)]
pub struct BatchStats {
    /// `(mean, unbiased variance)` per batchnorm layer, in layer order.
    layers: Vec<(Vec<f64>, Vec<f64>)>,
}

struct LayerCache {
    input: Buf,
    xhat: Buf,
    invstd: Vec<f64>,
    /// Post-ReLU, pre-pooling activation; its sign is the ReLU mask.
    act: Buf,
    pool_idx: Buf<u32>,
}

impl Network {
    /// All parameters zero, batchnorm scale one and running variance one.
    pub fn zeros(arch: &ArchitectureSpec) -> Result<Self> {
        let shapes = arch.shapes()?;
        let mut param_info = Vec::new();
        let mut buffer_info = Vec::new();
        let mut np = 0;
        let mut nb = 0;
        let push = |info: &mut Vec<ParamInfo>, n: &mut usize, name: String, shape: Vec<usize>| {
            let len = shape.iter().product();
            info.push(ParamInfo {
                name,
                shape,
                offset: *n,
                len,
            });
            *n += len;
            *n - len
        };
        let mut plan = Vec::new();
        for (i, (l, sh)) in arch.conv_layers.iter().zip(&shapes).enumerate() {
            let k = l.kernel_size;
            let w = push(&mut param_info, &mut np, format!("conv{i}.weight"), vec![l.out_channels, sh.in_channels, k, k]);
            let b = push(&mut param_info, &mut np, format!("conv{i}.bias"), vec![l.out_channels]);
            let bn = l.batchnorm.then(|| {
                let g = push(&mut param_info, &mut np, format!("bn{i}.weight"), vec![l.out_channels]);
                let be = push(&mut param_info, &mut np, format!("bn{i}.bias"), vec![l.out_channels]);
                let rm = push(&mut buffer_info, &mut nb, format!("bn{i}.running_mean"), vec![l.out_channels]);
                let rv = push(&mut buffer_info, &mut nb, format!("bn{i}.running_var"), vec![l.out_channels]);
                (g, be, rm, rv)
            });
            plan.push(LayerPlan {
                cin: sh.in_channels,
                cout: l.out_channels,
                k,
                pad: if l.padding == Padding::Same { k / 2 } else { 0 },
                hin: sh.in_size,
                hconv: sh.conv_size,
                hout: sh.out_size,
                w,
                b,
                bn,
                relu: l.relu,
                pool: l.maxpool,
            });
        }
        let last = plan.last().expect("validated");
        let features = last.cout * last.hout * last.hout;
        let head_w = push(&mut param_info, &mut np, "head.weight".into(), vec![features]);
        let head_b = push(&mut param_info, &mut np, "head.bias".into(), vec![1]);
        let mut params = vec![0.0; np];
        let mut buffers = vec![0.0; nb];
        for p in &plan {
            if let Some((g, _, _, rv)) = p.bn {
                params[g..g + p.cout].fill(1.0);
                buffers[rv..rv + p.cout].fill(1.0);
            }
        }
        Ok(Self {
            arch: arch.clone(),
            plan,
            head_w,
            head_b,
            features,
            params,
            buffers,
            param_info,
            buffer_info,
        })
    }

    /// Seeded fan-in uniform initialization: weights and biases of a layer
    /// with fan-in `f` are drawn from `U(-1/√f, 1/√f)`.
    pub fn init(arch: &ArchitectureSpec, seed: u64) -> Result<Self> {
        let mut net = Self::zeros(arch)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut fill = |params: &mut [f64], bound: f64| {
            for v in params {
                *v = rng.gen_range(-bound..bound);
            }
        };
        for p in net.plan.clone() {
            let bound = 1.0 / ((p.cin * p.k * p.k) as f64).sqrt();
            fill(&mut net.params[p.w..p.w + p.cout * p.cin * p.k * p.k], bound);
            fill(&mut net.params[p.b..p.b + p.cout], bound);
        }
        let bound = 1.0 / (net.features as f64).sqrt();
        let (hw, hb, f) = (net.head_w, net.head_b, net.features);
        fill(&mut net.params[hw..hw + f], bound);
        fill(&mut net.params[hb..hb + 1], bound);
        Ok(net)
    }

    pub fn arch(&self) -> &ArchitectureSpec {
        &self.arch
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn buffers(&self) -> &[f64] {
        &self.buffers
    }

    pub fn param_info(&self) -> &[ParamInfo] {
        &self.param_info
    }

    pub fn buffer_info(&self) -> &[ParamInfo] {
        &self.buffer_info
    }

    /// Replaces parameters and buffers; lengths must match the layout.
    pub fn set_state(&mut self, params: Vec<f64>, buffers: Vec<f64>) -> Result<()> {
        if params.len() != self.params.len() || buffers.len() != self.buffers.len() {
            return Err(Error::Architecture(format!(
                "expected {} parameters and {} buffers, got {} and {}",
                self.params.len(),
                self.buffers.len(),
                params.len(),
                buffers.len()
            )));
        }
        self.params = params;
        self.buffers = buffers;
        Ok(())
    }

    /// Name of the parameter tensor holding flat index `i`.
    pub fn param_name(&self, i: usize) -> &str {
        self.param_info
            .iter()
            .find(|p| (p.offset..p.offset + p.len).contains(&i))
            .map_or("?", |p| p.name.as_str())
    }

    fn input_len(&self) -> usize {
        self.arch.input_size * self.arch.input_size
    }

    fn check_inputs(&self, inputs: &[f64], n: usize) -> Result<()> {
        if n == 0 || inputs.len() != n * self.input_len() {
            return Err(Error::Architecture(format!(
                "expected {n} inputs of {}×{}, got {} values",
                self.arch.input_size,
                self.arch.input_size,
                inputs.len()
            )));
        }
        Ok(())
    }

    /// Inference-mode predictions (running batchnorm statistics) for `n`
    /// row-major inputs laid end to end.
    pub fn predict(&self, inputs: &[f64], n: usize) -> Result<Vec<f64>> {
        self.check_inputs(inputs, n)?;
        let mut out = Vec::with_capacity(n);
        let chunk = 64;
        for start in (0..n).step_by(chunk) {
            let m = chunk.min(n - start);
            let x = &inputs[start * self.input_len()..(start + m) * self.input_len()];
            let (pred, _, _) = self.forward(x, m, false);
            out.extend(pred);
        }
        Ok(out)
    }

    /// Training-mode MSE loss for a batch and, when `grad` is given, its
    /// gradient with respect to every parameter (overwritten, not added).
    pub fn loss_and_grad(
        &self,
        inputs: &[f64],
        labels: &[f64],
        grad: Option<&mut [f64]>,
    ) -> Result<(f64, BatchStats)> {
        let n = labels.len();
        self.check_inputs(inputs, n)?;
        let (pred, caches, stats) = self.forward(inputs, n, true);
        let loss = pred.iter().zip(labels).map(|(p, y)| (p - y) * (p - y)).sum::<f64>() / n as f64;
        if let Some(g) = grad {
            assert_eq!(g.len(), self.params.len());
            let dpred: Vec<f64> = pred.iter().zip(labels).map(|(p, y)| 2.0 * (p - y) / n as f64).collect();
            self.backward(&dpred, caches, g);
        }
        Ok((loss, stats))
    }

    /// Folds batch statistics into the running estimates.
    pub fn update_running_stats(&mut self, stats: &BatchStats) {
        let mut it = stats.layers.iter();
        for p in &self.plan {
            if let Some((_, _, rm, rv)) = p.bn {
                let (mean, var) = it.next().expect("one entry per batchnorm layer");
                for c in 0..p.cout {
                    let r = &mut self.buffers[rm + c];
                    *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * mean[c];
                    let r = &mut self.buffers[rv + c];
                    *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * var[c];
                }
            }
        }
    }

    fn forward(&self, inputs: &[f64], n: usize, train: bool) -> (Vec<f64>, Vec<LayerCache>, BatchStats) {
        let mut a = Buf::from_slice(inputs);
        let mut caches = Vec::with_capacity(self.plan.len());
        let mut stats = BatchStats::default();
        for p in &self.plan {
            let cols = n * p.hconv * p.hconv;
            let ck = p.cin * p.k * p.k;
            let col = im2col(&a, p, n);
            let mut z = Buf::dirty(p.cout * cols);
            gemm(p.cout, ck, cols, &self.params[p.w..], ck, 1, &col, cols, 1, 0.0, &mut z, cols);
            drop(col);
            let mut cache = LayerCache {
                input: if train { a } else { Buf::empty() },
                xhat: Buf::empty(),
                invstd: Vec::new(),
                act: Buf::empty(),
                pool_idx: Buf::empty(),
            };
            let mut means = Vec::new();
            let mut vars = Vec::new();
            if train && p.bn.is_some() {
                cache.xhat = Buf::dirty(p.cout * cols);
            }
            for c in 0..p.cout {
                let row = &mut z[c * cols..(c + 1) * cols];
                let bias = self.params[p.b + c];
                // y = scale·(z + bias − shift) + beta, then ReLU
                let (shift, scale, beta) = match p.bn {
                    None => (0.0, 1.0, 0.0),
                    Some((g, be, rm, rv)) => {
                        let (mean, inv) = if train {
                            let mean = sum(row) / cols as f64 + bias;
                            let var = sum_sq_dev(row, mean - bias) / cols as f64;
                            means.push(mean);
                            vars.push(if cols > 1 { var * cols as f64 / (cols - 1) as f64 } else { var });
                            (mean, 1.0 / (var + BN_EPS).sqrt())
                        } else {
                            (self.buffers[rm + c], 1.0 / (self.buffers[rv + c] + BN_EPS).sqrt())
                        };
                        cache.invstd.push(inv);
                        (mean, inv * self.params[g + c], self.params[be + c])
                    }
                };
                let off = bias - shift;
                if !cache.xhat.is_empty() {
                    let inv = *cache.invstd.last().expect("pushed above");
                    let xh = &mut cache.xhat[c * cols..(c + 1) * cols];
                    let gamma = self.params[p.bn.expect("xhat implies batchnorm").0 + c];
                    for (v, x) in row.iter_mut().zip(xh.iter_mut()) {
                        *x = (*v + off) * inv;
                        *v = gamma * *x + beta;
                    }
                } else if scale != 1.0 || beta != 0.0 || off != 0.0 {
                    for v in row.iter_mut() {
                        *v = scale * (*v + off) + beta;
                    }
                }
                if p.relu {
                    for v in row.iter_mut() {
                        *v = v.max(0.0);
                    }
                }
            }
            if train && p.bn.is_some() {
                stats.layers.push((means, vars));
            }
            if p.pool {
                let (pooled, idx) = maxpool(&z, p.cout * n, p.hconv);
                if train {
                    cache.pool_idx = idx;
                    if p.relu {
                        cache.act = z;
                    }
                }
                z = pooled;
            } else if train && p.relu {
                cache.act = z.clone();
            }
            a = z;
            if train {
                caches.push(cache);
            }
        }
        // a is C × N × S; sample n's feature j = c·S + s
        let last = self.plan.last().expect("validated");
        let s = last.hout * last.hout;
        let w = &self.params[self.head_w..self.head_w + self.features];
        let bias = self.params[self.head_b];
        let pred = (0..n)
            .map(|i| {
                let mut acc = bias;
                for c in 0..last.cout {
                    let f = &a[(c * n + i) * s..][..s];
                    acc += crate::linalg::dot(&w[c * s..][..s], f);
                }
                acc
            })
            .collect();
        if train {
            caches.push(LayerCache {
                input: a,
                xhat: Buf::empty(),
                invstd: Vec::new(),
                act: Buf::empty(),
                pool_idx: Buf::empty(),
            });
        }
        (pred, caches, stats)
    }

    fn backward(&self, dpred: &[f64], mut caches: Vec<LayerCache>, grad: &mut [f64]) {
        grad.fill(0.0);
        let n = dpred.len();
        let last = self.plan.last().expect("validated");
        let s = last.hout * last.hout;
        let feats = caches.pop().expect("head cache").input;
        let w = &self.params[self.head_w..self.head_w + self.features];
        let mut d = Buf::dirty(feats.len());
        for c in 0..last.cout {
            for (i, &dp) in dpred.iter().enumerate() {
                let off = (c * n + i) * s;
                for j in 0..s {
                    grad[self.head_w + c * s + j] += dp * feats[off + j];
                    d[off + j] = dp * w[c * s + j];
                }
            }
        }
        grad[self.head_b] = dpred.iter().sum();

        for (li, p) in self.plan.iter().enumerate().rev() {
            let cache = caches.pop().expect("one cache per layer");
            let cols = n * p.hconv * p.hconv;
            let ck = p.cin * p.k * p.k;
            if p.pool {
                let mut up = Buf::zeros(p.cout * cols);
                for (&idx, &g) in cache.pool_idx.iter().zip(d.iter()) {
                    up[idx as usize] = g;
                }
                d = up;
            }
            for c in 0..p.cout {
                let row = &mut d[c * cols..(c + 1) * cols];
                if p.relu {
                    // the subgradient at 0 is 0
                    for (g, &y) in row.iter_mut().zip(&cache.act[c * cols..(c + 1) * cols]) {
                        *g = if y > 0.0 { *g } else { 0.0 };
                    }
                }
                if let Some((gi, bi, _, _)) = p.bn {
                    let m = cols as f64;
                    let xh = &cache.xhat[c * cols..(c + 1) * cols];
                    let sum_d = sum(row);
                    let sum_dx = crate::linalg::dot(row, xh);
                    grad[gi + c] = sum_dx;
                    grad[bi + c] = sum_d;
                    let scale = self.params[gi + c] * cache.invstd[c] / m;
                    for (g, &x) in row.iter_mut().zip(xh) {
                        *g = scale * (m * *g - sum_d - x * sum_dx);
                    }
                }
                grad[p.b + c] = sum(row);
            }
            let col = im2col(&cache.input, p, n);
            drop(cache);
            let gw = &mut grad[p.w..p.w + p.cout * ck];
            gemm(p.cout, cols, ck, &d, cols, 1, &col, 1, cols, 0.0, gw, ck);
            if li > 0 {
                let mut dcol = col;
                gemm(ck, p.cout, cols, &self.params[p.w..], 1, ck, &d, cols, 1, 0.0, &mut dcol, cols);
                d = col2im(&dcol, p, n);
            }
        }
    }
}

/// Sum with independent accumulators.
fn sum(x: &[f64]) -> f64 {
    let mut acc = [0.0; 8];
    let mut chunks = x.chunks_exact(8);
    for c in &mut chunks {
        for k in 0..8 {
            acc[k] += c[k];
        }
    }
    acc.iter().sum::<f64>() + chunks.remainder().iter().sum::<f64>()
}

/// `Σ (x − mean)²` with independent accumulators.
fn sum_sq_dev(x: &[f64], mean: f64) -> f64 {
    let mut acc = [0.0; 8];
    let mut chunks = x.chunks_exact(8);
    for c in &mut chunks {
        for k in 0..8 {
            let e = c[k] - mean;
            acc[k] += e * e;
        }
    }
    acc.iter().sum::<f64>() + chunks.remainder().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>()
}

/// `c = a·b + beta·c` for an `m × k` by `k × n` product; `c` is row-major
/// with row stride `rsc`.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: usize,
    csa: usize,
    b: &[f64],
    rsb: usize,
    csb: usize,
    beta: f64,
    c: &mut [f64],
    rsc: usize,
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(a.len() > (m - 1) * rsa + (k.max(1) - 1) * csa);
    assert!(b.len() > (k.max(1) - 1) * rsb + (n - 1) * csb);
    assert!(c.len() > (m - 1) * rsc + (n - 1));
    // SAFETY: the asserts above keep every strided access in bounds.
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
            1,
        );
    }
}

/// Column matrix `(cin·k·k) × (n·hconv²)` with zero padding.
fn im2col(a: &[f64], p: &LayerPlan, n: usize) -> Buf {
    let (h, hc, k, pad) = (p.hin, p.hconv, p.k, p.pad);
    let cols = n * hc * hc;
    let mut col = Buf::dirty(p.cin * k * k * cols);
    for ci in 0..p.cin {
        for ky in 0..k {
            for kx in 0..k {
                let row = &mut col[((ci * k + ky) * k + kx) * cols..][..cols];
                let lo = pad.saturating_sub(kx).min(hc);
                let hi = (h + pad).saturating_sub(kx).min(hc).max(lo);
                for s in 0..n {
                    let src = &a[(ci * n + s) * h * h..][..h * h];
                    for oy in 0..hc {
                        let dst = &mut row[(s * hc + oy) * hc..][..hc];
                        let Some(iy) = (oy + ky).checked_sub(pad).filter(|&y| y < h) else {
                            dst.fill(0.0);
                            continue;
                        };
                        let off = iy * h + kx;
                        dst[..lo].fill(0.0);
                        dst[lo..hi].copy_from_slice(&src[off + lo - pad..off + hi - pad]);
                        dst[hi..].fill(0.0);
                    }
                }
            }
        }
    }
    col
}

/// Adjoint of [`im2col`].
fn col2im(col: &[f64], p: &LayerPlan, n: usize) -> Buf {
    let (h, hc, k, pad) = (p.hin, p.hconv, p.k, p.pad);
    let cols = n * hc * hc;
    let mut out = Buf::zeros(p.cin * n * h * h);
    for ci in 0..p.cin {
        for ky in 0..k {
            for kx in 0..k {
                let row = &col[((ci * k + ky) * k + kx) * cols..][..cols];
                let lo = pad.saturating_sub(kx);
                let hi = (h + pad).saturating_sub(kx).min(hc);
                for s in 0..n {
                    let dst = &mut out[(ci * n + s) * h * h..][..h * h];
                    for oy in 0..hc {
                        let Some(iy) = (oy + ky).checked_sub(pad).filter(|&y| y < h) else {
                            continue;
                        };
                        let src = &row[(s * hc + oy) * hc..][..hc];
                        let off = iy * h + kx;
                        if lo < hi {
                            let d = &mut dst[off + lo - pad..off + hi - pad];
                            for (d, s) in d.iter_mut().zip(&src[lo..hi]) {
                                *d += s;
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// 2×2 stride-2 max pooling over `planes` square planes of side `h`.
/// Returns the pooled values and the flat source index of each maximum;
/// ties go to the first candidate in row-major order.
fn maxpool(a: &[f64], planes: usize, h: usize) -> (Buf, Buf<u32>) {
    let ho = h / 2;
    let mut out = Buf::with_capacity(planes * ho * ho);
    let mut idx = Buf::with_capacity(planes * ho * ho);
    assert!(a.len() <= u32::MAX as usize);
    for pl in 0..planes {
        let base = pl * h * h;
        for oy in 0..ho {
            for ox in 0..ho {
                let i0 = base + 2 * oy * h + 2 * ox;
                let (mut best, mut bi) = (a[i0], i0);
                for cand in [i0 + 1, i0 + h, i0 + h + 1] {
                    let v = a[cand];
                    (best, bi) = if v > best { (v, cand) } else { (best, bi) };
                }
                out.push(best);
                idx.push(bi as u32);
            }
        }
    }
    (out, idx)
}
