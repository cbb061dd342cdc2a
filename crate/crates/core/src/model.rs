//! Tiny dense binary segmenter: `conv3x3 -> ReLU -> conv3x3 -> ReLU -> conv1x1`
//! followed by a sigmoid, with hand-written backward pass and Adam.
//!
//! Parameters are kept in `f64` so every weight can be checked against
//! central finite differences.

use crate::error::{Error, Result};
use crate::grid::{Grid, LabelMap, ProbabilityMap};
use crate::rng::{RandomSource, StreamKey, INIT_STREAM};

pub const DEFAULT_HIDDEN: usize = 8;

/// Index of each parameter tensor inside [`ParamTensors`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Tensor {
    Conv1Weight = 0,
    Conv1Bias = 1,
    Conv2Weight = 2,
    Conv2Bias = 3,
    HeadWeight = 4,
    HeadBias = 5,
}

impl Tensor {
    pub const ALL: [Tensor; 6] = [
        Tensor::Conv1Weight,
        Tensor::Conv1Bias,
        Tensor::Conv2Weight,
        Tensor::Conv2Bias,
        Tensor::HeadWeight,
        Tensor::HeadBias,
    ];

    pub fn len(self, hidden: usize) -> usize {
        match self {
            Tensor::Conv1Weight => 9 * hidden,
            Tensor::Conv1Bias | Tensor::Conv2Bias | Tensor::HeadWeight => hidden,
            Tensor::Conv2Weight => 9 * hidden * hidden,
            Tensor::HeadBias => 1,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Tensor::Conv1Weight => "conv1.weight",
            Tensor::Conv1Bias => "conv1.bias",
            Tensor::Conv2Weight => "conv2.weight",
            Tensor::Conv2Bias => "conv2.bias",
            Tensor::HeadWeight => "head.weight",
            Tensor::HeadBias => "head.bias",
        }
    }
}

/// Six flat tensors shaped for a segmenter of width `hidden`.
///
/// Convolution weights are laid out `[out][in][ky][kx]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamTensors {
    hidden: usize,
    data: [Vec<f64>; 6],
}

impl ParamTensors {
    pub fn zeros(hidden: usize) -> Self {
        Self {
            hidden,
            data: Tensor::ALL.map(|t| vec![0.0; t.len(hidden)]),
        }
    }

    pub fn from_tensors(hidden: usize, data: [Vec<f64>; 6]) -> Result<Self> {
        if hidden == 0 {
            return Err(Error::Shape("hidden width must be positive".into()));
        }
        for t in Tensor::ALL {
            if data[t as usize].len() != t.len(hidden) {
                return Err(Error::Shape(format!(
                    "{} needs {} values for width {hidden}, got {}",
                    t.name(),
                    t.len(hidden),
                    data[t as usize].len()
                )));
            }
        }
        Ok(Self { hidden, data })
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn tensor(&self, t: Tensor) -> &[f64] {
        &self.data[t as usize]
    }

    pub fn tensor_mut(&mut self, t: Tensor) -> &mut [f64] {
        &mut self.data[t as usize]
    }

    pub fn count(&self) -> usize {
        self.data.iter().map(Vec::len).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = &f64> {
        self.data.iter().flatten()
    }

    pub fn ensure_same_shape(&self, other: &ParamTensors, what: &str) -> Result<()> {
        if self.hidden != other.hidden {
            return Err(Error::Shape(format!(
                "{what}: width {} vs {}",
                self.hidden, other.hidden
            )));
        }
        Ok(())
    }
}

/// Trainable weights plus a generation counter that invalidates stale
/// forward caches.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmenterParams {
    tensors: ParamTensors,
    generation: u64,
}

/// Gradients of the mean BCE with respect to every parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientBundle(pub ParamTensors);

impl SegmenterParams {
    pub fn zeros(hidden: usize) -> Self {
        Self {
            tensors: ParamTensors::zeros(hidden),
            generation: 0,
        }
    }

    pub fn from_tensors(tensors: ParamTensors) -> Self {
        Self {
            tensors,
            generation: 0,
        }
    }

    /// He-style fan-in scaled Gaussian weights, zero biases.
    pub fn init(hidden: usize, seed: u64) -> Self {
        let mut src = RandomSource::new(seed, StreamKey::new(INIT_STREAM, 0));
        let mut p = Self::zeros(hidden);
        let scales = [
            (Tensor::Conv1Weight, (2.0 / 9.0f64).sqrt()),
            (Tensor::Conv2Weight, (2.0 / (9.0 * hidden as f64)).sqrt()),
            (Tensor::HeadWeight, (1.0 / hidden as f64).sqrt()),
        ];
        for (t, scale) in scales {
            for w in p.tensors.tensor_mut(t) {
                *w = scale * src.standard_normal();
            }
        }
        p
    }

    pub fn hidden(&self) -> usize {
        self.tensors.hidden
    }

    pub fn tensors(&self) -> &ParamTensors {
        &self.tensors
    }

    /// Mutable access; bumps the generation so older caches become stale.
    pub fn tensors_mut(&mut self) -> &mut ParamTensors {
        self.generation += 1;
        &mut self.tensors
    }

    pub fn generation(&self) -> u64 {
        self.generation
    }

    pub fn count(&self) -> usize {
        self.tensors.count()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(|v| v.is_finite())
    }
}

/// Activations retained by [`forward`] for [`backward`].
#[derive(Debug, Clone)]
pub struct ForwardCache {
    generation: u64,
    hidden: usize,
    height: usize,
    width: usize,
    padded_input: Vec<f64>,
    pre1: Vec<f64>,
    padded_act1: Vec<f64>,
    pre2: Vec<f64>,
    act2: Vec<f64>,
    probs: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub logits: Grid,
    pub probs: ProbabilityMap,
    pub cache: ForwardCache,
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Copies `planes` maps of `h x w` into zero-padded `(h+2) x (w+2)` maps.
fn pad(planes: &[f64], count: usize, h: usize, w: usize) -> Vec<f64> {
    let pw = w + 2;
    let mut out = vec![0.0; count * (h + 2) * pw];
    for p in 0..count {
        for r in 0..h {
            let src = &planes[(p * h + r) * w..(p * h + r + 1) * w];
            let start = (p * (h + 2) + r + 1) * pw + 1;
            out[start..start + w].copy_from_slice(src);
        }
    }
    out
}

/// Same-padded 3x3 convolution over pre-padded input planes.
fn conv3x3(padded: &[f64], cin: usize, h: usize, w: usize, weights: &[f64], bias: &[f64]) -> Vec<f64> {
    let cout = bias.len();
    let pw = w + 2;
    let plane = (h + 2) * pw;
    let mut out = vec![0.0; cout * h * w];
    for o in 0..cout {
        let dst = &mut out[o * h * w..(o + 1) * h * w];
        dst.fill(bias[o]);
        for i in 0..cin {
            let src = &padded[i * plane..(i + 1) * plane];
            for ky in 0..3 {
                for kx in 0..3 {
                    let wv = weights[((o * cin + i) * 3 + ky) * 3 + kx];
                    for r in 0..h {
                        let row = &src[(r + ky) * pw + kx..(r + ky) * pw + kx + w];
                        for (d, &s) in dst[r * w..(r + 1) * w].iter_mut().zip(row) {
                            *d += wv * s;
                        }
                    }
                }
            }
        }
    }
    out
}

/// Weight and bias gradients of a 3x3 convolution.
#[allow(clippy::too_many_arguments)]
fn conv3x3_param_grads(
    padded: &[f64],
    cin: usize,
    h: usize,
    w: usize,
    dpre: &[f64],
    cout: usize,
    dweights: &mut [f64],
    dbias: &mut [f64],
) {
    let pw = w + 2;
    let plane = (h + 2) * pw;
    for o in 0..cout {
        let d = &dpre[o * h * w..(o + 1) * h * w];
        dbias[o] += d.iter().sum::<f64>();
        for i in 0..cin {
            let src = &padded[i * plane..(i + 1) * plane];
            for ky in 0..3 {
                for kx in 0..3 {
                    let mut acc = 0.0;
                    for r in 0..h {
                        let row = &src[(r + ky) * pw + kx..(r + ky) * pw + kx + w];
                        acc += d[r * w..(r + 1) * w]
                            .iter()
                            .zip(row)
                            .map(|(a, b)| a * b)
                            .sum::<f64>();
                    }
                    dweights[((o * cin + i) * 3 + ky) * 3 + kx] += acc;
                }
            }
        }
    }
}

/// Gradient with respect to the (unpadded) input of a 3x3 convolution.
fn conv3x3_input_grad(dpre: &[f64], cout: usize, cin: usize, h: usize, w: usize, weights: &[f64]) -> Vec<f64> {
    let padded = pad(dpre, cout, h, w);
    let pw = w + 2;
    let plane = (h + 2) * pw;
    let mut out = vec![0.0; cin * h * w];
    for i in 0..cin {
        let dst = &mut out[i * h * w..(i + 1) * h * w];
        for o in 0..cout {
            let src = &padded[o * plane..(o + 1) * plane];
            for ky in 0..3 {
                for kx in 0..3 {
                    let wv = weights[((o * cin + i) * 3 + ky) * 3 + kx];
                    // d_in[r][c] += w * dpre[r + 1 - ky][c + 1 - kx]
                    let (oy, ox) = (2 - ky, 2 - kx);
                    for r in 0..h {
                        let row = &src[(r + oy) * pw + ox..(r + oy) * pw + ox + w];
                        for (d, &s) in dst[r * w..(r + 1) * w].iter_mut().zip(row) {
                            *d += wv * s;
                        }
                    }
                }
            }
        }
    }
    out
}

pub fn forward(params: &SegmenterParams, image: &Grid) -> ForwardOutput {
    let (h, w) = image.dims();
    let c = params.hidden();
    let t = &params.tensors;
    let padded_input = pad(image.values(), 1, h, w);
    let pre1 = conv3x3(&padded_input, 1, h, w, t.tensor(Tensor::Conv1Weight), t.tensor(Tensor::Conv1Bias));
    let act1: Vec<f64> = pre1.iter().map(|&z| z.max(0.0)).collect();
    let padded_act1 = pad(&act1, c, h, w);
    let pre2 = conv3x3(&padded_act1, c, h, w, t.tensor(Tensor::Conv2Weight), t.tensor(Tensor::Conv2Bias));
    let act2: Vec<f64> = pre2.iter().map(|&z| z.max(0.0)).collect();
    let head_w = t.tensor(Tensor::HeadWeight);
    let mut logits = vec![t.tensor(Tensor::HeadBias)[0]; h * w];
    for (ch, &wv) in head_w.iter().enumerate() {
        for (l, &a) in logits.iter_mut().zip(&act2[ch * h * w..(ch + 1) * h * w]) {
            *l += wv * a;
        }
    }
    let probs: Vec<f64> = logits.iter().map(|&l| sigmoid(l)).collect();
    ForwardOutput {
        logits: Grid::new(h, w, logits).expect("dims preserved"),
        probs: Grid::new(h, w, probs.clone()).expect("dims preserved"),
        cache: ForwardCache {
            generation: params.generation,
            hidden: c,
            height: h,
            width: w,
            padded_input,
            pre1,
            padded_act1,
            pre2,
            act2,
            probs,
        },
    }
}

/// Gradients of the mean BCE against `target`, using
/// `dL/dlogit = (f - t) / (H W)`.
pub fn backward(params: &SegmenterParams, cache: &ForwardCache, target: &LabelMap) -> Result<GradientBundle> {
    if cache.generation != params.generation || cache.hidden != params.hidden() {
        return Err(Error::State(
            "forward cache was produced by different parameters".into(),
        ));
    }
    if target.dims() != (cache.height, cache.width) {
        return Err(Error::Shape(format!(
            "target {}x{} vs cached forward {}x{}",
            target.height(),
            target.width(),
            cache.height,
            cache.width
        )));
    }
    let (h, w, c) = (cache.height, cache.width, cache.hidden);
    let hw = h * w;
    let t = &params.tensors;
    let mut g = ParamTensors::zeros(c);
    let scale = 1.0 / hw as f64;
    let dlogit: Vec<f64> = cache
        .probs
        .iter()
        .zip(target.values())
        .map(|(&f, &y)| (f - y) * scale)
        .collect();

    g.tensor_mut(Tensor::HeadBias)[0] = dlogit.iter().sum();
    let head_w = t.tensor(Tensor::HeadWeight);
    let mut dpre2 = vec![0.0; c * hw];
    for ch in 0..c {
        let a2 = &cache.act2[ch * hw..(ch + 1) * hw];
        g.tensor_mut(Tensor::HeadWeight)[ch] = dlogit.iter().zip(a2).map(|(d, a)| d * a).sum();
        let z2 = &cache.pre2[ch * hw..(ch + 1) * hw];
        for ((d, &dl), &z) in dpre2[ch * hw..(ch + 1) * hw].iter_mut().zip(&dlogit).zip(z2) {
            *d = if z > 0.0 { dl * head_w[ch] } else { 0.0 };
        }
    }

    {
        let (w2, b2) = split_two(&mut g, Tensor::Conv2Weight, Tensor::Conv2Bias);
        conv3x3_param_grads(&cache.padded_act1, c, h, w, &dpre2, c, w2, b2);
    }
    let dact1 = conv3x3_input_grad(&dpre2, c, c, h, w, t.tensor(Tensor::Conv2Weight));
    let dpre1: Vec<f64> = dact1
        .iter()
        .zip(&cache.pre1)
        .map(|(&d, &z)| if z > 0.0 { d } else { 0.0 })
        .collect();
    {
        let (w1, b1) = split_two(&mut g, Tensor::Conv1Weight, Tensor::Conv1Bias);
        conv3x3_param_grads(&cache.padded_input, 1, h, w, &dpre1, c, w1, b1);
    }
    Ok(GradientBundle(g))
}

fn split_two(g: &mut ParamTensors, a: Tensor, b: Tensor) -> (&mut [f64], &mut [f64]) {
    debug_assert!((a as usize) < (b as usize));
    let (left, right) = g.data.split_at_mut(b as usize);
    (&mut left[a as usize], &mut right[0])
}

/// Adam moments and hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub first: ParamTensors,
    pub second: ParamTensors,
}

impl AdamState {
    pub fn new(hidden: usize, lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            first: ParamTensors::zeros(hidden),
            second: ParamTensors::zeros(hidden),
        }
    }
}

/// One bias-corrected Adam update, in place.
pub fn adam_step(params: &mut SegmenterParams, grads: &GradientBundle, state: &mut AdamState) -> Result<()> {
    params.tensors.ensure_same_shape(&grads.0, "adam gradients")?;
    params.tensors.ensure_same_shape(&state.first, "adam moments")?;
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - state.beta1.powi(t);
    let c2 = 1.0 - state.beta2.powi(t);
    let (b1, b2, lr, eps) = (state.beta1, state.beta2, state.lr, state.eps);
    let p = params.tensors_mut();
    for k in 0..6 {
        let (theta, grad) = (&mut p.data[k], &grads.0.data[k]);
        let (m, v) = (&mut state.first.data[k], &mut state.second.data[k]);
        for j in 0..theta.len() {
            let gj = grad[j];
            m[j] = b1 * m[j] + (1.0 - b1) * gj;
            v[j] = b2 * v[j] + (1.0 - b2) * gj * gj;
            let m_hat = m[j] / c1;
            let v_hat = v[j] / c2;
            theta[j] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

/// Hard label `1(f > 0.5)`.
pub fn predict_label(pred: &ProbabilityMap) -> LabelMap {
    crate::metrics::predict_label(pred)
}

/// Probabilities after dividing logits by a temperature.
pub fn probs_at_temperature(logits: &Grid, temperature: f64) -> ProbabilityMap {
    if temperature == 1.0 {
        logits.map(sigmoid)
    } else {
        logits.map(|l| sigmoid(l / temperature))
    }
}
